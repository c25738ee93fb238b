//! ID embeddings, LightGCN-style propagation, BPR and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var, BPR_CLAMP};
use crate::datamodel::InteractionDataset;
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tensor::{CsrMatrix, Matrix};

/// User-item graph over train interactions.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
}

impl BipartiteGraph {
    pub fn new(num_users: usize, num_items: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        edges.sort_unstable();
        edges.dedup();
        let mut user_degree = vec![0; num_users];
        let mut item_degree = vec![0; num_items];
        for &(u, i) in &edges {
            if u >= num_users || i >= num_items {
                return Err(Error::Data(format!(
                    "edge ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        Ok(Self {
            num_users,
            num_items,
            edges,
            user_degree,
            item_degree,
        })
    }

    pub fn from_train(ds: &InteractionDataset) -> Self {
        Self::new(ds.num_users, ds.num_items, ds.train_pairs())
            .expect("dataset ids are in range by construction")
    }

    /// Symmetric operator over the stacked `[users; items]` node set with
    /// weight `1/√(deg(u)·deg(i))` on each edge and no self-loops.
    pub fn normalized_adjacency(&self) -> CsrMatrix {
        let n = self.num_users + self.num_items;
        let mut triplets = Vec::with_capacity(self.edges.len() * 2);
        for &(u, i) in &self.edges {
            let w = 1.0 / ((self.user_degree[u] * self.item_degree[i]) as f64).sqrt();
            triplets.push((u, self.num_users + i, w));
            triplets.push((self.num_users + i, u, w));
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdEmbeddings {
    pub users: Matrix,
    pub items: Matrix,
}

impl IdEmbeddings {
    pub fn xavier(num_users: usize, num_items: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            users: xavier_uniform(num_users, dim, rng),
            items: xavier_uniform(num_items, dim, rng),
        }
    }
}

/// Xavier/Glorot uniform initialization, bound `√(6 / (rows + cols))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect(),
    )
}

/// Mean of layer-0..=`layers` propagated embeddings; returns `(users, items)`.
pub fn propagate(graph: &BipartiteGraph, emb: &IdEmbeddings, layers: usize) -> (Matrix, Matrix) {
    let adj = Arc::new(graph.normalized_adjacency());
    let mut g = Graph::new();
    let u = g.constant(emb.users.clone());
    let i = g.constant(emb.items.clone());
    let (xu, xi) = propagate_var(&mut g, &adj, u, i, layers);
    (g.value(xu).clone(), g.value(xi).clone())
}

/// Tape version of [`propagate`] against a precomputed normalized adjacency.
pub fn propagate_var(
    g: &mut Graph,
    adjacency: &Arc<CsrMatrix>,
    users: Var,
    items: Var,
    layers: usize,
) -> (Var, Var) {
    let num_users = g.value(users).rows();
    let total = num_users + g.value(items).rows();
    let e0 = g.concat_rows(&[users, items]);
    let mut acc = e0;
    let mut cur = e0;
    for _ in 0..layers {
        cur = g.spmm(adjacency, cur);
        acc = g.add(acc, cur);
    }
    let mean = g.scale(acc, 1.0 / (layers + 1) as f64);
    let xu = g.slice_rows(mean, 0, num_users);
    let xi = g.slice_rows(mean, num_users, total);
    (xu, xi)
}

/// Mean of `−log σ(pos − neg)` with the margin clamped to `[−40, 40]`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || pos_scores.len() != neg_scores.len() {
        return Err(Error::InvalidArgument(format!(
            "bpr_loss needs equal non-empty inputs, got {} and {}",
            pos_scores.len(),
            neg_scores.len()
        )));
    }
    let total: f64 = pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(p, n)| crate::autograd::softplus(-(p - n).clamp(-BPR_CLAMP, BPR_CLAMP)))
        .sum();
    Ok(total / pos_scores.len() as f64)
}

/// Tape BPR over column vectors of scores.
pub fn bpr_loss_var(g: &mut Graph, pos: Var, neg: Var) -> Var {
    let diff = g.sub(pos, neg);
    let terms = g.bpr_term(diff);
    g.mean(terms)
}

/// Uniform negative sampler that rejects a user's train positives.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    num_items: usize,
    positives: Vec<Vec<usize>>,
}

impl NegativeSampler {
    pub fn new(ds: &InteractionDataset) -> Self {
        Self {
            num_items: ds.num_items,
            positives: ds.train_items_by_user(),
        }
    }

    pub fn sample(&self, batch: &[(usize, usize)], rng: &mut impl Rng) -> Result<Vec<usize>> {
        batch
            .iter()
            .map(|&(user, _)| {
                let pos = &self.positives[user];
                if pos.len() >= self.num_items {
                    return Err(Error::Data(format!(
                        "user {user} is positive on every item; no negative exists"
                    )));
                }
                loop {
                    let j = rng.random_range(0..self.num_items);
                    if pos.binary_search(&j).is_err() {
                        return Ok(j);
                    }
                }
            })
            .collect()
    }
}

/// One uniformly drawn non-positive item per `(user, item)` pair.
pub fn sample_negatives(
    ds: &InteractionDataset,
    batch: &[(usize, usize)],
    seed: u64,
) -> Result<Vec<usize>> {
    NegativeSampler::new(ds).sample(batch, &mut rng_for(seed, 0x6e65_6700))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every `(name, param, grad)`. Nothing is modified
    /// if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [(&str, &mut Matrix, &Matrix)]) -> Result<()> {
        for (name, p, grad) in params.iter() {
            if p.shape() != grad.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient((*name).to_owned()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p, grad) in params.iter_mut() {
            let (m, v) = self.moments.entry((*name).to_owned()).or_insert_with(|| {
                (
                    Matrix::zeros(p.rows(), p.cols()),
                    Matrix::zeros(p.rows(), p.cols()),
                )
            });
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                let gk = grad.data()[k];
                md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Interaction;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(users: &[&[f64]], items: &[&[f64]]) -> IdEmbeddings {
        IdEmbeddings {
            users: Matrix::from_rows(users),
            items: Matrix::from_rows(items),
        }
    }

    /// Dense propagation oracle: build the full normalized adjacency and
    /// average the powers.
    fn dense_oracle(graph: &BipartiteGraph, e: &IdEmbeddings, layers: usize) -> Matrix {
        let n = graph.num_users + graph.num_items;
        let mut a = Matrix::zeros(n, n);
        for &(u, i) in &graph.edges {
            let w = 1.0
                / ((graph.user_degree[u] as f64) * (graph.item_degree[i] as f64)).sqrt();
            a.set(u, graph.num_users + i, w);
            a.set(graph.num_users + i, u, w);
        }
        let e0 = Matrix::vstack(&[&e.users, &e.items]);
        let mut acc = e0.clone();
        let mut cur = e0;
        for _ in 0..layers {
            cur = a.matmul(&cur);
            acc = acc.add(&cur);
        }
        acc.scale(1.0 / (layers + 1) as f64)
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = BipartiteGraph::new(2, 2, vec![(0, 0), (1, 1)]).unwrap();
        let e = emb(&[&[1.0, 2.0], &[3.0, 4.0]], &[&[5.0, 6.0], &[7.0, 8.0]]);
        let (u, i) = propagate(&g, &e, 0);
        assert_eq!(u, e.users);
        assert_eq!(i, e.items);
    }

    #[test]
    fn single_edge_one_layer_averages() {
        let g = BipartiteGraph::new(1, 1, vec![(0, 0)]).unwrap();
        let e = emb(&[&[1.0, 0.0]], &[&[0.0, 3.0]]);
        let (u, i) = propagate(&g, &e, 1);
        assert_eq!(u.row(0), &[0.5, 1.5]);
        assert_eq!(i.row(0), &[0.5, 1.5]);
    }

    #[test]
    fn shared_item_matches_dense_oracle() {
        let g = BipartiteGraph::new(2, 1, vec![(0, 0), (1, 0)]).unwrap();
        let e = emb(&[&[1.0, -1.0], &[2.0, 0.5]], &[&[0.3, 0.7]]);
        let (u, i) = propagate(&g, &e, 1);
        let oracle = dense_oracle(&g, &e, 1);
        let got = Matrix::vstack(&[&u, &i]);
        assert!(got.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn isolated_nodes_keep_layer_zero() {
        let g = BipartiteGraph::new(2, 2, vec![(0, 0)]).unwrap();
        let e = emb(&[&[1.0], &[2.0]], &[&[3.0], &[4.0]]);
        let (u, i) = propagate(&g, &e, 2);
        // Isolated nodes are averaged with zero layers 1..=L.
        assert!((u.get(1, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((i.get(1, 0) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_operator_is_symmetric() {
        let g = BipartiteGraph::new(3, 4, vec![(0, 0), (0, 1), (1, 1), (2, 3), (2, 1)]).unwrap();
        let a = g.normalized_adjacency().to_dense();
        assert!(a.max_abs_diff(&a.transpose()) < 1e-15);
    }

    #[test]
    fn propagation_gradient() {
        let g = BipartiteGraph::new(3, 2, vec![(0, 0), (1, 0), (1, 1), (2, 1)]).unwrap();
        let adj = Arc::new(g.normalized_adjacency());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let users = xavier_uniform(3, 4, &mut rng);
        let items = xavier_uniform(2, 4, &mut rng);
        let report = check_gradients(
            &[users, items],
            |gr, v| {
                let (xu, xi) = propagate_var(gr, &adj, v[0], v[1], 2);
                let s = gr.matmul_nt(xu, xi);
                let s = gr.mul(s, s);
                gr.sum(s)
            },
            GradCheck::default(),
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn bpr_spot_values() {
        assert!((bpr_loss(&[0.3], &[0.3]).unwrap() - 0.693147).abs() < 1e-6);
        assert!(bpr_loss(&[40.0], &[0.0]).unwrap() < 1e-15);
        assert!((bpr_loss(&[0.0], &[40.0]).unwrap() - 40.0).abs() < 1e-12);
        assert!(bpr_loss(&[], &[]).is_err());
        assert!(bpr_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn ds_with(num_items: usize, positives: &[usize]) -> InteractionDataset {
        let interactions = positives
            .iter()
            .map(|&item| Interaction {
                user: 0,
                item,
                timestamp: None,
            })
            .collect();
        InteractionDataset::from_dense("d", 1, num_items, interactions).unwrap()
    }

    #[test]
    fn forced_negative() {
        let pos: Vec<usize> = (0..10).filter(|&i| i != 7).collect();
        let ds = ds_with(10, &pos);
        let batch = vec![(0, 0); 20];
        assert!(sample_negatives(&ds, &batch, 3).unwrap().iter().all(|&n| n == 7));
    }

    #[test]
    fn all_positive_user_errors() {
        let ds = ds_with(3, &[0, 1, 2]);
        assert!(sample_negatives(&ds, &[(0, 0)], 0).is_err());
    }

    #[test]
    fn negatives_deterministic_per_seed() {
        let ds = ds_with(50, &[1, 2, 3]);
        let batch = vec![(0, 1); 30];
        assert_eq!(
            sample_negatives(&ds, &batch, 9).unwrap(),
            sample_negatives(&ds, &batch, 9).unwrap()
        );
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Matrix::scalar(1.0);
        let g = Matrix::scalar(1.0);
        adam.step(&mut [("p", &mut p, &g)]).unwrap();
        let expected = 1.0 - 0.005 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Matrix::row_vector(&[1.0, -2.0]);
        let g = Matrix::zeros(1, 2);
        adam.step(&mut [("p", &mut p, &g)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Matrix::scalar(1.0);
        let g = Matrix::scalar(f64::NAN);
        let err = adam.step(&mut [("encoder.w", &mut p, &g)]).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }
}
