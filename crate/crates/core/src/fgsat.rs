//! Client-side fine-grained semantic adaptation: secondary centers,
//! graph-structured transfer over `[C′; T]`, attention fusion, and the
//! distillation and alignment losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::xavier_uniform;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Guard added to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Two-layer perceptron `raw → hidden (ReLU) → d_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl TextEncoder {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: xavier_uniform(input, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: xavier_uniform(hidden, output, rng),
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn encode(&self, raw: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let x = g.constant(raw.clone());
        let out = vars.encode(&mut g, x);
        g.value(out).clone()
    }

    pub fn params(&self, g: &mut Graph) -> EncoderVars {
        EncoderVars {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    pub fn constants(&self, g: &mut Graph) -> EncoderVars {
        EncoderVars {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderVars {
    pub fn encode(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, self.w1);
        let h = g.add(h, self.b1);
        let h = g.relu(h);
        let o = g.matmul(h, self.w2);
        g.add(o, self.b2)
    }
}

/// Trainable FGSAT weights. The attention scorer `(w, b)` is shared by
/// all three score calls.
#[derive(Clone, Debug, PartialEq)]
pub struct FgsatParams {
    /// Transform of the secondary centers, `d_t × d_t`.
    pub w_center: Matrix,
    /// Graph-transfer weight, `d_t × d_t`.
    pub w_graph: Matrix,
    /// Scorer weight, `d_t × 1`.
    pub att_w: Matrix,
    /// Scorer bias, `1 × 1`.
    pub att_b: Matrix,
}

impl FgsatParams {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_center: xavier_uniform(dim, dim, rng),
            w_graph: xavier_uniform(dim, dim, rng),
            att_w: xavier_uniform(dim, 1, rng),
            att_b: Matrix::zeros(1, 1),
        }
    }

    pub fn params(&self, g: &mut Graph) -> FgsatVars {
        FgsatVars {
            w_center: g.param(self.w_center.clone()),
            w_graph: g.param(self.w_graph.clone()),
            att_w: g.param(self.att_w.clone()),
            att_b: g.param(self.att_b.clone()),
        }
    }

    pub fn constants(&self, g: &mut Graph) -> FgsatVars {
        FgsatVars {
            w_center: g.constant(self.w_center.clone()),
            w_graph: g.constant(self.w_graph.clone()),
            att_w: g.constant(self.att_w.clone()),
            att_b: g.constant(self.att_b.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FgsatVars {
    pub w_center: Var,
    pub w_graph: Var,
    pub att_w: Var,
    pub att_b: Var,
}

/// Loss weights of the Stage-1 objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgsatWeights {
    pub lambda_kd: f64,
    pub lambda_fa: f64,
}

/// Which clusters occur in a batch and where each item's cluster lives.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterIndex {
    /// Global cluster id of each secondary-center row, ascending.
    pub present: Vec<usize>,
    /// Per batch item: row in the secondary centers.
    pub local: Vec<usize>,
    /// Per secondary-center row: member count in the batch.
    pub counts: Vec<usize>,
}

impl ClusterIndex {
    pub fn new(assignments: &[usize]) -> Self {
        let mut present = assignments.to_vec();
        present.sort_unstable();
        present.dedup();
        let local: Vec<usize> = assignments
            .iter()
            .map(|a| present.binary_search(a).expect("present"))
            .collect();
        let mut counts = vec![0; present.len()];
        for &l in &local {
            counts[l] += 1;
        }
        Self {
            present,
            local,
            counts,
        }
    }

    /// `(YᵀY + ηI)⁻¹ Yᵀ`; `YᵀY` is diagonal so each row holds
    /// `1/(n_k + η)` at the cluster's members.
    pub fn ridge_projector(&self, eta: f64) -> Matrix {
        let mut p = Matrix::zeros(self.present.len(), self.local.len());
        for (i, &k) in self.local.iter().enumerate() {
            p.set(k, i, 1.0 / (self.counts[k] as f64 + eta));
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondaryCenters {
    /// `C̃`, one row per batch-present cluster.
    pub raw: Matrix,
    /// `C′ = ReLU(C̃ W₁)`.
    pub transformed: Matrix,
    pub index: ClusterIndex,
}

pub fn secondary_centers(
    assignments: &[usize],
    t: &Matrix,
    eta: f64,
    w_center: &Matrix,
) -> Result<SecondaryCenters> {
    if assignments.is_empty() || assignments.len() != t.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} assignments for {} batch rows",
            assignments.len(),
            t.rows()
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument("eta must be positive".into()));
    }
    let mut g = Graph::new();
    let tv = g.constant(t.clone());
    let wv = g.constant(w_center.clone());
    let (raw, transformed, index) = secondary_centers_var(&mut g, tv, assignments, eta, wv);
    Ok(SecondaryCenters {
        raw: g.value(raw).clone(),
        transformed: g.value(transformed).clone(),
        index,
    })
}

/// Returns `(C̃, C′, index)`.
pub fn secondary_centers_var(
    g: &mut Graph,
    t: Var,
    assignments: &[usize],
    eta: f64,
    w_center: Var,
) -> (Var, Var, ClusterIndex) {
    let index = ClusterIndex::new(assignments);
    let p = g.constant(index.ridge_projector(eta));
    let raw = g.matmul(p, t);
    let lin = g.matmul(raw, w_center);
    let transformed = g.relu(lin);
    (raw, transformed, index)
}

/// Symmetrically normalized operator over `Z` from remapped cosines
/// `(cos + 1)/2` with unit self-loops.
pub fn transfer_operator_var(g: &mut Graph, z: Var) -> Var {
    let zn = g.row_normalize(z, 0.0);
    let cos = g.matmul_nt(zn, zn);
    let a = g.affine(cos, 0.5, 0.5);
    let a = g.set_diag(a, 1.0);
    let deg = g.row_sum(a);
    let inv_sqrt = g.powf(deg, -0.5);
    let left = g.mul(a, inv_sqrt);
    let inv_sqrt_t = g.transpose(inv_sqrt);
    g.mul(left, inv_sqrt_t)
}

/// `T′`: the last `B` rows of `ReLU(L Z W₂)` with `Z = [C′; T]`.
pub fn graph_transfer_var(g: &mut Graph, c_prime: Var, t: Var, w_graph: Var) -> Var {
    let kb = g.value(c_prime).rows();
    let total = kb + g.value(t).rows();
    let z = g.concat_rows(&[c_prime, t]);
    let l = transfer_operator_var(g, z);
    let lz = g.matmul(l, z);
    let lzw = g.matmul(lz, w_graph);
    let zp = g.relu(lzw);
    g.slice_rows(zp, kb, total)
}

pub fn graph_transfer(c_prime: &Matrix, t: &Matrix, w_graph: &Matrix) -> Matrix {
    let mut g = Graph::new();
    let c = g.constant(c_prime.clone());
    let tv = g.constant(t.clone());
    let w = g.constant(w_graph.clone());
    let out = graph_transfer_var(&mut g, c, tv, w);
    g.value(out).clone()
}

/// Fuses `t′`, the item's global center and its secondary center with
/// softmax weights of a shared linear scorer. Returns `(t″, q)` where `q`
/// is `B × 3`.
pub fn attention_fuse_var(
    g: &mut Graph,
    t_prime: Var,
    global: Var,
    secondary: Var,
    att_w: Var,
    att_b: Var,
) -> (Var, Var) {
    let views = [t_prime, global, secondary];
    let scores: Vec<Var> = views
        .iter()
        .map(|&v| {
            let s = g.matmul(v, att_w);
            g.add(s, att_b)
        })
        .collect();
    let s = g.concat_cols(&scores);
    let q = g.softmax_rows(s);
    let mut fused = None;
    for (k, &v) in views.iter().enumerate() {
        let qk = g.slice_cols(q, k, k + 1);
        let term = g.mul(v, qk);
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    (fused.expect("three views"), q)
}

/// Single-item fusion; returns `(t″, q)`.
pub fn attention_fuse(
    t_prime: &[f64],
    global: &[f64],
    secondary: &[f64],
    att_w: &Matrix,
    att_b: f64,
) -> (Vec<f64>, [f64; 3]) {
    let mut g = Graph::new();
    let a = g.constant(Matrix::row_vector(t_prime));
    let b = g.constant(Matrix::row_vector(global));
    let c = g.constant(Matrix::row_vector(secondary));
    let w = g.constant(att_w.clone());
    let bias = g.constant(Matrix::scalar(att_b));
    let (fused, q) = attention_fuse_var(&mut g, a, b, c, w, bias);
    let q = g.value(q);
    (
        g.value(fused).row(0).to_vec(),
        [q.get(0, 0), q.get(0, 1), q.get(0, 2)],
    )
}

/// Mean over users of `KL(softmax(x_u T″ᵀ) ‖ softmax(x_u Tᵀ))`, each
/// softmax taken over the batch's items. The original branch is detached.
pub fn kd_loss_var(g: &mut Graph, users: Var, t_orig: Var, t_fused: Var) -> Var {
    let users_t = g.detach(users);
    let t_orig = g.detach(t_orig);
    let teacher = g.matmul_nt(users_t, t_orig);
    kd_from_teacher_var(g, teacher, users, t_fused)
}

/// KD against fixed teacher logits (`users × items`).
pub fn kd_from_teacher_var(g: &mut Graph, teacher: Var, users: Var, t_fused: Var) -> Var {
    let log_q = g.log_softmax_rows(teacher);
    let student = g.matmul_nt(users, t_fused);
    let log_p = g.log_softmax_rows(student);
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_q);
    let terms = g.mul(p, diff);
    let total = g.sum(terms);
    let n = g.value(users).rows().max(1) as f64;
    g.scale(total, 1.0 / n)
}

pub fn kd_loss(users: &Matrix, t_orig: &Matrix, t_fused: &Matrix) -> f64 {
    let mut g = Graph::new();
    let u = g.constant(users.clone());
    let a = g.constant(t_orig.clone());
    let b = g.constant(t_fused.clone());
    let l = kd_loss_var(&mut g, u, a, b);
    g.scalar(l)
}

/// Mean squared Euclidean distance between matching rows.
pub fn fa_loss_var(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    let n = g.value(a).rows().max(1) as f64;
    g.scale(s, 1.0 / n)
}

pub fn fa_loss(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "fa_loss shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let l = fa_loss_var(&mut g, av, bv);
    Ok(g.scalar(l))
}

/// How the fused text vector `t″` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Secondary centers, graph transfer and attention.
    Fgsat,
    /// `t″ = (t + c_k)/2`; no adaptation module.
    CenterAverage,
}

/// Tape outputs of one FGSAT forward over a batch of unique items.
#[derive(Clone, Copy, Debug)]
pub struct FgsatForward {
    /// Normalized encoder outputs `T`.
    pub t: Var,
    /// Graph-transfer outputs `T′` (absent without FGSAT).
    pub t_prime: Option<Var>,
    /// Fused `T″`.
    pub fused: Var,
    pub attention: Option<Var>,
}

/// Runs the adaptation pipeline on normalized batch vectors `t` whose items
/// belong to `clusters` (global ids into `centers`).
pub fn fgsat_forward(
    g: &mut Graph,
    vars: &FgsatVars,
    t: Var,
    clusters: &[usize],
    centers: &Matrix,
    eta: f64,
    mode: FusionMode,
) -> FgsatForward {
    let global = g.constant(centers.gather_rows(clusters));
    match mode {
        FusionMode::CenterAverage => {
            let sum = g.add(t, global);
            let fused = g.scale(sum, 0.5);
            FgsatForward {
                t,
                t_prime: None,
                fused,
                attention: None,
            }
        }
        FusionMode::Fgsat => {
            let (_, c_prime, index) = secondary_centers_var(g, t, clusters, eta, vars.w_center);
            let t_prime = graph_transfer_var(g, c_prime, t, vars.w_graph);
            let secondary = g.gather_rows(c_prime, &index.local);
            let (fused, q) =
                attention_fuse_var(g, t_prime, global, secondary, vars.att_w, vars.att_b);
            FgsatForward {
                t,
                t_prime: Some(t_prime),
                fused,
                attention: Some(q),
            }
        }
    }
}

/// Per-dimension affine normalization `(t − μ) / √(σ² + ε)` on the tape.
pub fn normalize_var(g: &mut Graph, t: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
    let mu = g.constant(Matrix::row_vector(mean));
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let inv = g.constant(Matrix::row_vector(&inv));
    let centered = g.sub(t, mu);
    g.mul(centered, inv)
}

/// `x_id + t″/‖t″‖` per row.
pub fn ranking_items_var(g: &mut Graph, x_id: Var, fused: Var) -> Var {
    let n = g.row_normalize(fused, NORM_EPS);
    g.add(x_id, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn distinct_clusters_recover_items_as_eta_vanishes() {
        let t = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]);
        let sc = secondary_centers(&[4, 1], &t, 1e-12, &Matrix::identity(2)).unwrap();
        // Rows ordered by cluster id: cluster 1 then 4.
        assert!(sc.raw.max_abs_diff(&Matrix::from_rows(&[[-3.0, 0.5], [1.0, 2.0]])) < 1e-9);
    }

    #[test]
    fn shrunk_member_mean() {
        let t = Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0]]);
        let sc = secondary_centers(&[0, 0], &t, 0.01, &Matrix::identity(2)).unwrap();
        let expected = 2.0 / 2.01 * 2.0;
        assert!((sc.raw.get(0, 0) - expected).abs() < 1e-12);
        assert!((sc.raw.get(0, 0) - 1.990).abs() < 1e-3);
    }

    #[test]
    fn relu_kills_negative_centers() {
        let t = Matrix::from_rows(&[[-1.0, -2.0], [-3.0, -1.0]]);
        let sc = secondary_centers(&[0, 1], &t, 0.01, &Matrix::identity(2)).unwrap();
        assert_eq!(sc.transformed, Matrix::zeros(2, 2));
    }

    #[test]
    fn identical_pair_transfer() {
        let row = Matrix::from_rows(&[[0.5, -1.0, 2.0]]);
        let out = graph_transfer(&row, &row, &Matrix::identity(3));
        assert!(out.max_abs_diff(&Matrix::from_rows(&[[0.5, 0.0, 2.0]])) < 1e-12);
    }

    #[test]
    fn zero_graph_weight_gives_zero() {
        let c = Matrix::from_rows(&[[1.0, 0.0]]);
        let t = Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0]]);
        assert_eq!(graph_transfer(&c, &t, &Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
    }

    #[test]
    fn attention_spot_values() {
        let (fused, q) = attention_fuse(
            &[3.0, 0.0],
            &[0.0, 3.0],
            &[0.0, 0.0],
            &Matrix::zeros(2, 1),
            0.7,
        );
        assert!(q.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!((fused[0] - 1.0).abs() < 1e-12 && (fused[1] - 1.0).abs() < 1e-12);

        // Scores (1, 0, 0).
        let w = Matrix::from_rows(&[[1.0], [0.0]]);
        let (_, q) = attention_fuse(&[1.0, 5.0], &[0.0, 5.0], &[0.0, -5.0], &w, 0.0);
        assert!((q[0] - 0.576117).abs() < 1e-6);
        assert!((q[1] - 0.211942).abs() < 1e-6);
        assert!((q[2] - 0.211942).abs() < 1e-6);
    }

    #[test]
    fn kd_zero_for_identical_and_shifted() {
        let users = Matrix::from_rows(&[[1.0, 0.5], [-0.3, 2.0]]);
        let t = Matrix::from_rows(&[[0.1, 0.2], [1.0, -1.0], [0.3, 0.3]]);
        assert!(kd_loss(&users, &t, &t).abs() < 1e-15);
    }

    #[test]
    fn fa_spot_values() {
        let a = Matrix::from_rows(&[[1.0, 1.0]]);
        assert_eq!(fa_loss(&a, &Matrix::zeros(1, 2)).unwrap(), 2.0);
        assert_eq!(fa_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn encoder_gradient() {
        let mut r = rng();
        let enc = TextEncoder::new(6, 5, 3, &mut r);
        let x = xavier_uniform(4, 6, &mut r);
        let b1 = Matrix::row_vector(&[0.1, -0.2, 0.3, 0.05, -0.1]);
        let report = check_gradients(
            &[x, enc.w1.clone(), b1, enc.w2.clone(), enc.b2.clone()],
            |g, v| {
                let vars = EncoderVars {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let o = vars.encode(g, v[0]);
                let sq = g.mul(o, o);
                g.sum(sq)
            },
            GradCheck::default(),
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn fgsat_pipeline_gradient() {
        let mut r = rng();
        let d = 3;
        let p = FgsatParams::new(d, &mut r);
        let t = xavier_uniform(5, d, &mut r).scale(3.0);
        let centers = xavier_uniform(3, d, &mut r);
        let users = xavier_uniform(2, d, &mut r);
        let clusters = [0, 2, 2, 1, 0];
        let teacher = users.matmul_nt(&t);
        let report = check_gradients(
            &[
                t,
                p.w_center.clone(),
                p.w_graph.clone(),
                p.att_w.clone(),
                Matrix::scalar(0.2),
                users,
            ],
            |g, v| {
                let vars = FgsatVars {
                    w_center: v[1],
                    w_graph: v[2],
                    att_w: v[3],
                    att_b: v[4],
                };
                let f = fgsat_forward(g, &vars, v[0], &clusters, &centers, 0.01, FusionMode::Fgsat);
                let teacher = g.constant(teacher.clone());
                let kd = kd_from_teacher_var(g, teacher, v[5], f.fused);
                let fa = fa_loss_var(g, f.t_prime.unwrap(), f.fused);
                let s = g.sum(f.fused);
                let a = g.add(kd, fa);
                g.add(a, s)
            },
            GradCheck::default(),
        );
        assert!(report.passed(), "{report:?}");
    }
}
