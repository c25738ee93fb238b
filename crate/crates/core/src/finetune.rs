//! Stage-2 local fine-tuning over a pre-trained and a local semantic graph
//! with bidirectional contrastive alignment and multi-view fusion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{propagate_var, Adam};
use crate::client::{
    batch_forward, sorted_unique, Broadcast, ClientData, ClientParams, ClientState, LossComponents, PipelineSettings,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, RankingMetrics};
use crate::fgsat::{normalize_var, fgsat_forward, NORM_EPS};
use crate::tensor::{CsrMatrix, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Local,
    Pretrained,
}

/// Top-N cosine item graph, symmetrized and normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGraph {
    pub source: GraphSource,
    pub top_n: usize,
    pub adjacency: Arc<CsrMatrix>,
}

/// Per-row top-`top_n` positive cosine neighbours (self excluded, ties to
/// the lower id) as `(row, col, sim)` triplets, before symmetrization.
pub fn top_n_neighbours(reprs: &Matrix, top_n: usize) -> Vec<(usize, usize, f64)> {
    let n = reprs.rows();
    let mut unit = reprs.clone();
    for r in 0..n {
        let norm = crate::tensor::norm(unit.row(r));
        if norm > 0.0 {
            unit.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut triplets = Vec::new();
    const CHUNK: usize = 256;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let sims = unit.slice_rows(start, end).matmul_nt(&unit);
        for i in start..end {
            let row = sims.row(i - start);
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            let keep = top_n.min(cand.len());
            if keep < cand.len() {
                cand.select_nth_unstable_by(keep, cmp);
                cand.truncate(keep);
            }
            cand.sort_by(cmp);
            triplets.extend(cand.into_iter().filter(|&j| row[j] > 0.0).map(|j| (i, j, row[j])));
        }
    }
    triplets
}

pub fn build_semantic_graph(reprs: &Matrix, top_n: usize, source: GraphSource) -> Result<SemanticGraph> {
    let n = reprs.rows();
    if n < 2 || top_n == 0 {
        return Err(Error::InvalidArgument(format!(
            "semantic graph needs >= 2 items and top_n >= 1 (got {n} items, top_n {top_n})"
        )));
    }
    let mut sym: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    for (i, j, s) in top_n_neighbours(reprs, top_n) {
        for key in [(i, j), (j, i)] {
            let e = sym.entry(key).or_insert(0.0);
            *e = e.max(s);
        }
    }
    let mut degree = vec![0.0; n];
    for (&(i, _), &s) in &sym {
        degree[i] += s;
    }
    for (i, d) in degree.iter_mut().enumerate() {
        if *d == 0.0 {
            sym.insert((i, i), 1.0);
            *d = 1.0;
        }
    }
    let triplets: Vec<(usize, usize, f64)> = sym
        .into_iter()
        .map(|((i, j), s)| (i, j, s / (degree[i] * degree[j]).sqrt()))
        .collect();
    Ok(SemanticGraph {
        source,
        top_n,
        adjacency: Arc::new(CsrMatrix::from_triplets(n, n, &triplets)),
    })
}

pub fn graph_convolve(graph: &SemanticGraph, h0: &Matrix) -> Matrix {
    graph.adjacency.spmm(h0)
}

/// Bidirectional contrastive loss between aligned rows. With
/// `include_positive = false` each denominator sums over `j ≠ i` only.
pub fn contrastive_loss_var(g: &mut Graph, a: Var, b: Var, tau: f64, include_positive: bool) -> Var {
    let an = g.row_normalize(a, 0.0);
    let bn = g.row_normalize(b, 0.0);
    let sim = g.matmul_nt(an, bn);
    let logits = g.scale(sim, 1.0 / tau);
    let pos = g.diag(logits);
    let lse_ab = g.log_sum_exp_rows(logits, !include_positive);
    let logits_t = g.transpose(logits);
    let lse_ba = g.log_sum_exp_rows(logits_t, !include_positive);
    let d1 = g.sub(lse_ab, pos);
    let d2 = g.sub(lse_ba, pos);
    let s1 = g.sum(d1);
    let s2 = g.sum(d2);
    g.add(s1, s2)
}

pub fn contrastive_loss(h_local: &Matrix, h_pre: &Matrix, tau: f64, include_positive: bool) -> Result<f64> {
    if h_local.shape() != h_pre.shape() {
        return Err(Error::InvalidArgument(format!(
            "contrastive inputs differ in shape: {:?} vs {:?}",
            h_local.shape(),
            h_pre.shape()
        )));
    }
    if h_local.rows() < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs at least 2 rows".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(h_local.clone());
    let b = g.constant(h_pre.clone());
    let l = contrastive_loss_var(&mut g, a, b, tau, include_positive);
    Ok(g.scalar(l))
}

/// `x_id + Σ v/‖v‖` over the semantic views.
pub fn fuse_views_var(g: &mut Graph, x_id: Var, views: &[Var]) -> Var {
    let mut acc = x_id;
    for &v in views {
        let n = g.row_normalize(v, NORM_EPS);
        acc = g.add(acc, n);
    }
    acc
}

pub fn fuse_views(x_id: &[f64], t_local: &[f64], h_local: &[f64], h_pre: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Matrix::row_vector(x_id));
    let views: Vec<Var> = [t_local, h_local, h_pre]
        .iter()
        .map(|v| g.constant(Matrix::row_vector(v)))
        .collect();
    let out = fuse_views_var(&mut g, x, &views);
    g.value(out).row(0).to_vec()
}

pub fn predict(x_u: &[f64], x_i: &[f64]) -> f64 {
    crate::tensor::dot(x_u, x_i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Items that enter the contrastive loss of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastItems {
    /// Distinct positive items of the batch.
    Positives,
    /// Distinct positives and sampled negatives.
    Batch,
}

/// Which representation stands in for `t_local`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalView {
    /// Output of the local adaptation pipeline (`t″`).
    Fused,
    /// Normalized local encoder output.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub top_n: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Multiplied into the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub standard_infonce: bool,
    pub contrastive_reduction: Reduction,
    pub contrast_items: ContrastItems,
    pub local_view: LocalView,
    /// Build the local graph from the adapted `t″` instead of encoder output.
    pub local_graph_from_fused: bool,
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.top_n == 0 || self.batch_size == 0 {
            return Err(Error::Config("top_n and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch record of Stage-2 training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub valid_recall20: f64,
    pub lr: f64,
}

/// The local text view of every item, computed in id-ordered chunks.
pub fn local_text_view(
    data: &ClientData,
    params: &ClientParams,
    broadcast: &Broadcast,
    settings: &PipelineSettings,
    view: LocalView,
    chunk: usize,
) -> Matrix {
    let n = data.dataset.num_items;
    let mut parts = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let ids: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let vars = params.constants(&mut g);
        let raw = g.constant(data.raw.gather_rows(&ids));
        let t = vars.encoder.encode(&mut g, raw);
        let s = &broadcast.stats;
        let tn = normalize_var(&mut g, t, &s.mean, &s.var, s.eps);
        let clusters: Vec<usize> = ids.iter().map(|&i| broadcast.assignments[i]).collect();
        let f = fgsat_forward(&mut g, &vars.fgsat, tn, &clusters, &broadcast.centers, settings.eta, settings.fusion);
        let v = match view {
            LocalView::Fused => f.fused,
            LocalView::Encoder => f.t,
        };
        parts.push(g.value(v).clone());
    }
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Fine-tunes one client with frozen pre-trained semantics.
#[derive(Clone, Debug)]
pub struct Stage2Trainer {
    pub client: ClientState,
    pub broadcast: Broadcast,
    pub settings: PipelineSettings,
    pub config: Stage2Config,
    pub pre_graph: SemanticGraph,
    pub local_graph: SemanticGraph,
    pub best: Option<(ClientParams, f64, usize)>,
    pub history: Vec<EpochRecord>,
}

/// Final representations of a domain for ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalReprs {
    pub users: Matrix,
    pub items: Matrix,
}

impl Stage2Trainer {
    pub fn new(
        mut client: ClientState,
        t_pre: &Matrix,
        broadcast: Broadcast,
        settings: PipelineSettings,
        config: Stage2Config,
    ) -> Result<Self> {
        config.validate()?;
        if t_pre.rows() != client.data.dataset.num_items {
            return Err(Error::RowCount {
                expected: client.data.dataset.num_items,
                found: t_pre.rows(),
            });
        }
        client.optimizer = Adam::new(client.optimizer.config);
        let pre_graph = build_semantic_graph(t_pre, config.top_n, GraphSource::Pretrained)?;
        let mut trainer = Self {
            local_graph: pre_graph.clone(),
            pre_graph,
            client,
            broadcast,
            settings,
            config,
            best: None,
            history: Vec::new(),
        };
        trainer.refresh_local_graph()?;
        Ok(trainer)
    }

    pub fn refresh_local_graph(&mut self) -> Result<()> {
        let reprs = if self.config.local_graph_from_fused {
            self.fused_text_all(&self.client.params)
        } else {
            self.client.encode_all()
        };
        self.local_graph = build_semantic_graph(&reprs, self.config.top_n, GraphSource::Local)?;
        Ok(())
    }

    fn loss_weights(&self) -> (f64, f64) {
        (self.config.alpha, self.config.beta)
    }

    pub fn step(&mut self, batch: &[(usize, usize)], negatives: &[usize]) -> Result<LossComponents> {
        let (alpha, beta) = self.loss_weights();
        let mut g = Graph::new();
        let vars = self.client.params.vars(&mut g);
        let users: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
        let items: Vec<usize> = batch.iter().map(|&(_, i)| i).chain(negatives.iter().copied()).collect();
        let fwd = batch_forward(
            &mut g,
            &self.client.data,
            &vars,
            &self.broadcast,
            &self.settings,
            &users,
            &items,
        );
        let h_local_all = g.spmm(&self.local_graph.adjacency, vars.items);
        let h_pre_all = g.spmm(&self.pre_graph.adjacency, vars.items);
        let h_local = g.gather_rows(h_local_all, &fwd.unique_items);
        let h_pre = g.gather_rows(h_pre_all, &fwd.unique_items);
        let x_id = g.gather_rows(fwd.items_all, &fwd.unique_items);
        let t_local = match self.config.local_view {
            LocalView::Fused => fwd.fgsat.fused,
            LocalView::Encoder => fwd.fgsat.t,
        };
        let fused = fuse_views_var(&mut g, x_id, &[t_local, h_local, h_pre]);
        let rec = fwd.bpr(&mut g, fused, batch, negatives);
        let mut losses = LossComponents {
            rec: g.scalar(rec),
            ..LossComponents::default()
        };
        let mut total = rec;
        let contrast: Vec<usize> = match self.config.contrast_items {
            ContrastItems::Positives => {
                let pos: Vec<usize> = batch.iter().map(|&(_, i)| i).collect();
                sorted_unique(&pos).into_iter().map(|i| fwd.item_pos(i)).collect()
            }
            ContrastItems::Batch => (0..fwd.unique_items.len()).collect(),
        };
        if contrast.len() >= 2 {
            let a = g.gather_rows(h_local, &contrast);
            let b = g.gather_rows(h_pre, &contrast);
            let con = contrastive_loss_var(&mut g, a, b, self.config.tau, self.config.standard_infonce);
            let con = match self.config.contrastive_reduction {
                Reduction::Sum => con,
                Reduction::Mean => g.scale(con, 1.0 / contrast.len() as f64),
            };
            losses.con = g.scalar(con);
            if alpha != 0.0 {
                let w = g.scale(con, alpha);
                total = g.add(total, w);
            }
        }
        if fwd.fgsat.t_prime.is_some() {
            let kd = fwd.kd(&mut g);
            losses.kd = g.scalar(kd);
            if beta != 0.0 {
                let w = g.scale(kd, beta);
                total = g.add(total, w);
            }
        }
        losses.total = g.scalar(total);
        let grads = g.backward(total);
        self.client.params.apply(&mut self.client.optimizer, &vars, &grads)?;
        Ok(losses)
    }

    /// `t″` (or the chosen local view) for every item.
    pub fn fused_text_all(&self, params: &ClientParams) -> Matrix {
        local_text_view(
            &self.client.data,
            params,
            &self.broadcast,
            &self.settings,
            self.config.local_view,
            self.config.batch_size,
        )
    }

    /// User and fused item representations under `params`.
    pub fn representations(&self, params: &ClientParams) -> FinalReprs {
        let mut g = Graph::new();
        let vars = params.constants(&mut g);
        let (xu, xi) = propagate_var(
            &mut g,
            &self.client.data.adjacency,
            vars.users,
            vars.items,
            self.settings.layers,
        );
        let t_local = g.constant(self.fused_text_all(params));
        let hl = g.spmm(&self.local_graph.adjacency, vars.items);
        let hp = g.spmm(&self.pre_graph.adjacency, vars.items);
        let fused = fuse_views_var(&mut g, xi, &[t_local, hl, hp]);
        FinalReprs {
            users: g.value(xu).clone(),
            items: g.value(fused).clone(),
        }
    }

    pub fn evaluate(&self, params: &ClientParams, split: EvalSplit, ks: &[usize]) -> Result<RankingMetrics> {
        let r = self.representations(params);
        evaluate(&r.users, &r.items, &self.client.data.dataset, split, ks)
    }

    /// Trains with early stopping on validation Recall@20 and restores the
    /// best parameters. Returns the number of epochs run.
    ///
    /// A domain without validation interactions trains for `max_epochs`.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<usize> {
        let initial = self.evaluate(&self.client.params, EvalSplit::Valid, &[20])?;
        // Without validation users there is nothing to select on: run every
        // epoch and keep the last parameters.
        let select = initial.users_evaluated > 0;
        self.best = Some((self.client.params.clone(), initial.get("recall@20"), 0));
        let mut since_best = 0;
        let mut epochs = 0;
        for epoch in 1..=self.config.max_epochs {
            epochs = epoch;
            let batches = self.client.epoch_batches(self.config.batch_size)?;
            let mut acc = LossComponents::default();
            for (batch, negs) in &batches {
                acc.accumulate(&self.step(batch, negs)?);
            }
            let losses = acc.scaled(1.0 / batches.len().max(1) as f64);
            self.refresh_local_graph()?;
            let valid = self.evaluate(&self.client.params, EvalSplit::Valid, &[20])?.get("recall@20");
            let record = EpochRecord {
                epoch,
                losses,
                valid_recall20: valid,
                lr: self.client.optimizer.config.lr,
            };
            on_epoch(&record);
            self.history.push(record);
            let lr = self.client.optimizer.config.lr * self.config.lr_decay;
            self.client.optimizer.set_lr(lr);
            let best = self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
            if !select {
                self.best = Some((self.client.params.clone(), valid, epoch));
            } else if valid > best {
                self.best = Some((self.client.params.clone(), valid, epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.patience {
                    break;
                }
            }
        }
        if let Some((params, _, _)) = &self.best {
            self.client.params = params.clone();
        }
        Ok(epochs)
    }

    pub fn best_epoch(&self) -> usize {
        self.best.as_ref().map_or(0, |b| b.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_have_unit_similarity() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [-2.0, 1.0]]);
        let t = top_n_neighbours(&m, 1);
        let (i, j, s) = t[0];
        assert_eq!((i, j), (0, 1));
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_gets_self_loop() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [1.0, 0.1]]);
        let g = build_semantic_graph(&m, 1, GraphSource::Local).unwrap();
        assert!((g.adjacency.get(1, 1) - 1.0).abs() < 1e-12);
        assert_eq!(g.adjacency.row_entries(1).count(), 1);
    }

    #[test]
    fn contrastive_orthonormal_case() {
        let i2 = Matrix::identity(2);
        assert!((contrastive_loss(&i2, &i2, 0.5, false).unwrap() + 8.0).abs() < 1e-12);
        assert!(contrastive_loss(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2), 0.5, false).is_err());
    }

    #[test]
    fn fusion_spot_values() {
        let u = [0.6, 0.8];
        let x = fuse_views(&u, &u, &u, &u);
        assert!((x[0] - 2.4).abs() < 1e-9 && (x[1] - 3.2).abs() < 1e-9);
        assert_eq!(fuse_views(&u, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]), u.to_vec());
    }

    #[test]
    fn predict_is_dot() {
        assert_eq!(predict(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((predict(&[0.6, 0.8], &[0.6, 0.8]) - 1.0).abs() < 1e-15);
    }
}
