//! One domain's client: its private data, trainable parameters, optimizer
//! and the Stage-1 training step.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Var};
use crate::backbone::{
    bpr_loss_var, propagate_var, Adam, AdamConfig, BipartiteGraph, IdEmbeddings, NegativeSampler,
};
use crate::datamodel::{EmbeddingKind, EmbeddingMatrix, InteractionDataset};
use crate::error::{Error, Result};
use crate::fgsat::{
    fa_loss_var, fgsat_forward, kd_loss_var, normalize_var, ranking_items_var, EncoderVars,
    FgsatForward, FgsatParams, FgsatVars, FgsatWeights, FusionMode, TextEncoder,
};
use crate::seeding::{rng_for, stream_id};
use crate::server::{ClusterModel, DomainStats, ItemUpload};
use crate::tensor::{CsrMatrix, Matrix};

/// Shapes of a client's model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientParams {
    pub ids: IdEmbeddings,
    pub encoder: TextEncoder,
    pub fgsat: FgsatParams,
}

impl ClientParams {
    pub fn init(num_users: usize, num_items: usize, raw_dim: usize, shape: ModelShape, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ids: IdEmbeddings::xavier(num_users, num_items, shape.dim, rng),
            encoder: TextEncoder::new(raw_dim, shape.hidden, shape.dim, rng),
            fgsat: FgsatParams::new(shape.dim, rng),
        }
    }

    /// Every tensor with its stable name.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("ids.users", &self.ids.users),
            ("ids.items", &self.ids.items),
            ("encoder.w1", &self.encoder.w1),
            ("encoder.b1", &self.encoder.b1),
            ("encoder.w2", &self.encoder.w2),
            ("encoder.b2", &self.encoder.b2),
            ("fgsat.w_center", &self.fgsat.w_center),
            ("fgsat.w_graph", &self.fgsat.w_graph),
            ("fgsat.att_w", &self.fgsat.att_w),
            ("fgsat.att_b", &self.fgsat.att_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("ids.users", &mut self.ids.users),
            ("ids.items", &mut self.ids.items),
            ("encoder.w1", &mut self.encoder.w1),
            ("encoder.b1", &mut self.encoder.b1),
            ("encoder.w2", &mut self.encoder.w2),
            ("encoder.b2", &mut self.encoder.b2),
            ("fgsat.w_center", &mut self.fgsat.w_center),
            ("fgsat.w_graph", &mut self.fgsat.w_graph),
            ("fgsat.att_w", &mut self.fgsat.att_w),
            ("fgsat.att_b", &mut self.fgsat.att_b),
        ]
    }

    pub fn vars(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            users: g.param(self.ids.users.clone()),
            items: g.param(self.ids.items.clone()),
            encoder: self.encoder.params(g),
            fgsat: self.fgsat.params(g),
        }
    }

    pub fn constants(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            users: g.constant(self.ids.users.clone()),
            items: g.constant(self.ids.items.clone()),
            encoder: self.encoder.constants(g),
            fgsat: self.fgsat.constants(g),
        }
    }

    /// One Adam step from the gradients of `vars`. Parameters that did not
    /// reach the loss get a zero gradient.
    pub fn apply(&mut self, adam: &mut Adam, vars: &ParamVars, grads: &Gradients) -> Result<()> {
        let order = vars.in_order();
        let g: Vec<Matrix> = self
            .named()
            .iter()
            .zip(order)
            .map(|((_, m), v)| grads.get_or_zeros(v, m))
            .collect();
        let mut entries: Vec<(&str, &mut Matrix, &Matrix)> = self
            .named_mut()
            .into_iter()
            .zip(&g)
            .map(|((n, m), gr)| (n, m, gr))
            .collect();
        adam.step(&mut entries)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub users: Var,
    pub items: Var,
    pub encoder: EncoderVars,
    pub fgsat: FgsatVars,
}

impl ParamVars {
    fn in_order(&self) -> [Var; 10] {
        [
            self.users,
            self.items,
            self.encoder.w1,
            self.encoder.b1,
            self.encoder.w2,
            self.encoder.b2,
            self.fgsat.w_center,
            self.fgsat.w_graph,
            self.fgsat.att_w,
            self.fgsat.att_b,
        ]
    }
}

/// Private, immutable inputs of one domain.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub dataset: Arc<InteractionDataset>,
    /// Raw text embeddings, one row per local item.
    pub raw: Arc<Matrix>,
    pub adjacency: Arc<CsrMatrix>,
    pub sampler: NegativeSampler,
    pub train_pairs: Vec<(usize, usize)>,
}

impl ClientData {
    pub fn new(dataset: InteractionDataset, raw: &EmbeddingMatrix) -> Result<Self> {
        if raw.rows() != dataset.num_items {
            return Err(Error::RowCount {
                expected: dataset.num_items,
                found: raw.rows(),
            });
        }
        let graph = BipartiteGraph::from_train(&dataset);
        Ok(Self {
            sampler: NegativeSampler::new(&dataset),
            train_pairs: dataset.train_pairs(),
            adjacency: Arc::new(graph.normalized_adjacency()),
            raw: Arc::new(raw.to_matrix()),
            dataset: Arc::new(dataset),
        })
    }

    pub fn domain(&self) -> &str {
        &self.dataset.domain_name
    }
}

/// What a client receives from the server each round, restricted to its
/// own domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub stats: DomainStats,
}

impl Broadcast {
    pub fn from_model(model: &ClusterModel, domain: &str) -> Result<Self> {
        let d = model
            .domain_index(domain)
            .ok_or_else(|| Error::InvalidArgument(format!("no broadcast for domain `{domain}`")))?;
        Ok(Self {
            centers: model.centers.clone(),
            assignments: model.assignments[d].clone(),
            stats: model.stats[d].clone(),
        })
    }
}

/// Settings shared by the item-side pipeline of both stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineSettings {
    pub layers: usize,
    pub eta: f64,
    pub fusion: FusionMode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub kd: f64,
    pub fa: f64,
    pub con: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn accumulate(&mut self, other: &LossComponents) {
        self.rec += other.rec;
        self.kd += other.kd;
        self.fa += other.fa;
        self.con += other.con;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossComponents {
        LossComponents {
            rec: self.rec * s,
            kd: self.kd * s,
            fa: self.fa * s,
            con: self.con * s,
            total: self.total * s,
        }
    }
}

pub fn sorted_unique(values: &[usize]) -> Vec<usize> {
    let mut unique = values.to_vec();
    unique.sort_unstable();
    unique.dedup();
    unique
}

/// Tape state of one batch forward shared by both stages.
pub struct BatchForward {
    pub unique_items: Vec<usize>,
    pub unique_users: Vec<usize>,
    /// Propagated user representations, all users.
    pub users_all: Var,
    /// Propagated item ID representations, all items.
    pub items_all: Var,
    pub fgsat: FgsatForward,
}

/// Propagation plus the text pipeline over the batch's unique items.
pub fn batch_forward(
    g: &mut Graph,
    data: &ClientData,
    vars: &ParamVars,
    broadcast: &Broadcast,
    settings: &PipelineSettings,
    users: &[usize],
    items: &[usize],
) -> BatchForward {
    let unique_items = sorted_unique(items);
    let unique_users = sorted_unique(users);
    let (users_all, items_all) =
        propagate_var(g, &data.adjacency, vars.users, vars.items, settings.layers);
    let raw = g.constant(data.raw.gather_rows(&unique_items));
    let t = vars.encoder.encode(g, raw);
    let s = &broadcast.stats;
    let tn = normalize_var(g, t, &s.mean, &s.var, s.eps);
    let clusters: Vec<usize> = unique_items.iter().map(|&i| broadcast.assignments[i]).collect();
    let fgsat = fgsat_forward(
        g,
        &vars.fgsat,
        tn,
        &clusters,
        &broadcast.centers,
        settings.eta,
        settings.fusion,
    );
    BatchForward {
        unique_items,
        unique_users,
        users_all,
        items_all,
        fgsat,
    }
}

impl BatchForward {
    pub fn item_pos(&self, item: usize) -> usize {
        self.unique_items.binary_search(&item).expect("batch item")
    }

    /// KD between the fused and original text branches, scored by the
    /// batch's unique users.
    pub fn kd(&self, g: &mut Graph) -> Var {
        let u = g.gather_rows(self.users_all, &self.unique_users);
        kd_loss_var(g, u, self.fgsat.t, self.fgsat.fused)
    }

    /// BPR over `(user, pos)` pairs with negatives, given per-unique-item
    /// ranking vectors.
    pub fn bpr(&self, g: &mut Graph, ranking: Var, batch: &[(usize, usize)], negatives: &[usize]) -> Var {
        let users: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
        let pos: Vec<usize> = batch.iter().map(|&(_, i)| self.item_pos(i)).collect();
        let neg: Vec<usize> = negatives.iter().map(|&i| self.item_pos(i)).collect();
        let xu = g.gather_rows(self.users_all, &users);
        let xp = g.gather_rows(ranking, &pos);
        let xn = g.gather_rows(ranking, &neg);
        let sp = g.row_dot(xu, xp);
        let sn = g.row_dot(xu, xn);
        bpr_loss_var(g, sp, sn)
    }
}

/// Parameters, optimizer and RNG of one domain.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub data: ClientData,
    pub params: ClientParams,
    pub optimizer: Adam,
    pub shape: ModelShape,
    pub rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(data: ClientData, shape: ModelShape, adam: AdamConfig, seed: u64) -> Self {
        let stream = stream_id(data.domain());
        let mut init_rng = rng_for(seed, stream);
        let params = ClientParams::init(
            data.dataset.num_users,
            data.dataset.num_items,
            data.raw.cols(),
            shape,
            &mut init_rng,
        );
        Self {
            rng: rng_for(seed, stream ^ 0x7472_6169_6e00),
            data,
            params,
            optimizer: Adam::new(adam),
            shape,
        }
    }

    pub fn domain(&self) -> &str {
        self.data.domain()
    }

    /// Encoder outputs over all items, as sent to the server.
    pub fn encode_all(&self) -> Matrix {
        self.params.encoder.encode(&self.data.raw)
    }

    pub fn upload(&self) -> ItemUpload {
        ItemUpload {
            domain: self.domain().to_owned(),
            items: self.encode_all(),
        }
    }

    /// Pre-trained semantic embeddings: encoder outputs over all items.
    pub fn export_pretrained(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::from_matrix(&self.encode_all(), EmbeddingKind::Encoded)
    }

    /// Shuffled train pairs cut into batches, each with sampled negatives.
    pub fn epoch_batches(&mut self, batch_size: usize) -> Result<Vec<(Vec<(usize, usize)>, Vec<usize>)>> {
        let mut pairs = self.data.train_pairs.clone();
        pairs.shuffle(&mut self.rng);
        pairs
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let negs = self.data.sampler.sample(chunk, &mut self.rng)?;
                Ok((chunk.to_vec(), negs))
            })
            .collect()
    }

    /// One optimizer step of the Stage-1 objective
    /// `L_rec + λ_KD L_KD + λ_FA L_FA`.
    pub fn stage1_step(
        &mut self,
        batch: &[(usize, usize)],
        negatives: &[usize],
        broadcast: &Broadcast,
        settings: &PipelineSettings,
        weights: FgsatWeights,
    ) -> Result<LossComponents> {
        let mut g = Graph::new();
        let vars = self.params.vars(&mut g);
        let users: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
        let items: Vec<usize> = batch.iter().map(|&(_, i)| i).chain(negatives.iter().copied()).collect();
        let fwd = batch_forward(&mut g, &self.data, &vars, broadcast, settings, &users, &items);
        let x_id = g.gather_rows(fwd.items_all, &fwd.unique_items);
        let ranking = ranking_items_var(&mut g, x_id, fwd.fgsat.fused);
        let rec = fwd.bpr(&mut g, ranking, batch, negatives);
        let mut losses = LossComponents {
            rec: g.scalar(rec),
            ..LossComponents::default()
        };
        let mut total = rec;
        if let Some(t_prime) = fwd.fgsat.t_prime {
            let kd = fwd.kd(&mut g);
            let fa = fa_loss_var(&mut g, t_prime, fwd.fgsat.fused);
            losses.kd = g.scalar(kd);
            losses.fa = g.scalar(fa);
            if weights.lambda_kd != 0.0 {
                let w = g.scale(kd, weights.lambda_kd);
                total = g.add(total, w);
            }
            if weights.lambda_fa != 0.0 {
                let w = g.scale(fa, weights.lambda_fa);
                total = g.add(total, w);
            }
        }
        losses.total = g.scalar(total);
        let grads = g.backward(total);
        self.params.apply(&mut self.optimizer, &vars, &grads)?;
        Ok(losses)
    }

    /// One pass over the train pairs; returns the batch-mean losses.
    pub fn stage1_epoch(
        &mut self,
        broadcast: &Broadcast,
        settings: &PipelineSettings,
        weights: FgsatWeights,
        batch_size: usize,
    ) -> Result<LossComponents> {
        let batches = self.epoch_batches(batch_size)?;
        let mut acc = LossComponents::default();
        for (batch, negs) in &batches {
            acc.accumulate(&self.stage1_step(batch, negs, broadcast, settings, weights)?);
        }
        Ok(acc.scaled(1.0 / batches.len().max(1) as f64))
    }
}
