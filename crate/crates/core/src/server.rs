//! Federated coordinator: per-domain normalization of uploaded item
//! representations and weighted k-means over the union.
//!
//! Nothing here takes user ids or interactions. Clients talk to the server
//! only through [`ItemUpload`].

use std::collections::HashSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tensor::{norm, squared_distance, Matrix};

/// Running per-dimension mean and variance of one domain's uploads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl DomainStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, t: &Matrix) -> Matrix {
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = t.clone();
        for r in 0..out.rows() {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = (*x - self.mean[c]) * scale[c];
            }
        }
        out
    }

    pub fn denormalize(&self, t: &Matrix) -> Matrix {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = *x * (self.var[c] + self.eps).sqrt() + self.mean[c];
            }
        }
        out
    }

    /// Momentum update with the batch's elementwise mean and population
    /// variance.
    pub fn update(&mut self, t: &Matrix) {
        let n = t.rows();
        if n == 0 {
            return;
        }
        let rho = self.momentum;
        for c in 0..self.dim() {
            let mean = (0..n).map(|r| t.get(r, c)).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (t.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
            self.mean[c] = rho * self.mean[c] + (1.0 - rho) * mean;
            self.var[c] = rho * self.var[c] + (1.0 - rho) * var;
        }
    }
}

/// Normalizes with the current statistics, then (when training) folds the
/// batch into them.
pub fn normalize_batch(stats: &mut DomainStats, t: &Matrix, training: bool) -> Result<Matrix> {
    if t.cols() != stats.dim() {
        return Err(Error::InvalidArgument(format!(
            "batch has {} columns, stats have {}",
            t.cols(),
            stats.dim()
        )));
    }
    let out = stats.normalize(t);
    if training {
        stats.update(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub k: usize,
    pub max_iters: usize,
    pub delta: f64,
    /// Center = members weighted by `1/(‖t − mean‖ + δ)`; `false` gives
    /// classical Lloyd means.
    pub weighted: bool,
    /// Independent seeded initializations; the lowest-inertia run is kept.
    pub n_init: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 100,
            delta: 1e-6,
            weighted: true,
            n_init: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of points to their assigned centers.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step, starting with the initial one.
    pub inertia_history: Vec<f64>,
}

/// Weighted k-means with the default options apart from `k`, `max_iters`
/// and `seed`.
pub fn weighted_kmeans(points: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    kmeans(
        points,
        &KMeansOptions {
            k,
            max_iters,
            seed,
            ..KMeansOptions::default()
        },
        None,
    )
}

/// Runs k-means. With `init` the given centers are the single starting
/// point; otherwise `n_init` seeded draws of `k` distinct points are tried.
pub fn kmeans(points: &Matrix, opts: &KMeansOptions, init: Option<&Matrix>) -> Result<KMeansResult> {
    if opts.k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    if !points.is_finite() {
        return Err(Error::Data("k-means input contains non-finite values".into()));
    }
    if let Some(c) = init {
        if c.shape() != (opts.k, points.cols()) {
            return Err(Error::InvalidArgument(format!(
                "initial centers are {:?}, expected ({}, {})",
                c.shape(),
                opts.k,
                points.cols()
            )));
        }
        return Ok(lloyd(points, c.clone(), opts));
    }
    let distinct = distinct_rows(points);
    if distinct.len() < opts.k {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the {} distinct points",
            opts.k,
            distinct.len()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..opts.n_init.max(1) {
        let mut rng = rng_for(opts.seed, 0x6b6d_0000 + restart as u64);
        let picks = sample(&mut rng, distinct.len(), opts.k);
        let rows: Vec<usize> = picks.iter().map(|p| distinct[p]).collect();
        let run = lloyd(points, points.gather_rows(&rows), opts);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// First index of every distinct row, in row order.
fn distinct_rows(points: &Matrix) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..points.rows())
        .filter(|&r| seen.insert(points.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect()
}

/// Nearest center by squared distance; ties go to the lowest index.
pub fn nearest_centers(points: &Matrix, centers: &Matrix) -> Vec<usize> {
    (0..points.rows())
        .map(|r| {
            let p = points.row(r);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..centers.rows() {
                let d = squared_distance(p, centers.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn inertia(points: &Matrix, centers: &Matrix, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(r, &c)| squared_distance(points.row(r), centers.row(c)))
        .sum()
}

fn lloyd(points: &Matrix, mut centers: Matrix, opts: &KMeansOptions) -> KMeansResult {
    let k = centers.rows();
    let dim = points.cols();
    let mut assign = nearest_centers(points, &centers);
    let mut history = vec![inertia(points, &centers, &assign)];
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut means = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (r, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in means.row_mut(c).iter_mut().zip(points.row(r)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                means.row_mut(c).iter_mut().for_each(|s| *s /= n);
            }
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut weights = vec![0.0; k];
        for (r, &c) in assign.iter().enumerate() {
            let p = points.row(r);
            let w = if opts.weighted {
                1.0 / (norm_diff(p, means.row(c)) + opts.delta)
            } else {
                1.0
            };
            weights[c] += w;
            for (s, x) in sums.row_mut(c).iter_mut().zip(p) {
                *s += w * x;
            }
        }
        let previous = centers.clone();
        let mut reseeded = HashSet::new();
        for c in 0..k {
            if weights[c] > 0.0 {
                for s in sums.row_mut(c).iter_mut() {
                    *s /= weights[c];
                }
                centers.row_mut(c).copy_from_slice(sums.row(c));
            }
        }
        for c in 0..k {
            if weights[c] == 0.0 {
                // Farthest point from its own (pre-update) center.
                let far = (0..points.rows())
                    .filter(|r| !reseeded.contains(r))
                    .max_by(|&a, &b| {
                        let da = squared_distance(points.row(a), previous.row(assign[a]));
                        let db = squared_distance(points.row(b), previous.row(assign[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    });
                if let Some(r) = far {
                    reseeded.insert(r);
                    centers.row_mut(c).copy_from_slice(points.row(r));
                }
            }
        }
        let next = nearest_centers(points, &centers);
        history.push(inertia(points, &centers, &next));
        let stable = next == assign;
        assign = next;
        if stable {
            break;
        }
    }
    KMeansResult {
        inertia: inertia(points, &centers, &assign),
        centers,
        assignments: assign,
        iterations,
        inertia_history: history,
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d)
}

/// One domain's encoded item matrix as sent to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemUpload {
    pub domain: String,
    pub items: Matrix,
}

/// Broadcast result of one federated round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// Centers in the per-domain-normalized space, `K × d_t`.
    pub centers: Matrix,
    pub domains: Vec<String>,
    /// Per domain, per item: global cluster index.
    pub assignments: Vec<Vec<usize>>,
    /// Statistics each domain's upload was normalized with this round.
    pub stats: Vec<DomainStats>,
    pub inertia: f64,
    pub iterations_run: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub total_rounds: usize,
    pub local_epochs: usize,
    pub current_round: usize,
}

impl RoundPlan {
    pub fn new(total_rounds: usize, local_epochs: usize) -> Result<Self> {
        if total_rounds == 0 || local_epochs == 0 {
            return Err(Error::Config("rounds and local epochs must be >= 1".into()));
        }
        Ok(Self {
            total_rounds,
            local_epochs,
            current_round: 1,
        })
    }
}

/// Normalizes each upload with its domain's stats (updating them),
/// clusters the union and splits the assignments back per domain.
pub fn run_round(
    uploads: &[ItemUpload],
    stats: &mut [DomainStats],
    opts: &KMeansOptions,
    init: Option<&Matrix>,
) -> Result<ClusterModel> {
    if uploads.is_empty() || uploads.len() != stats.len() {
        return Err(Error::InvalidArgument(format!(
            "{} uploads for {} domain stats",
            uploads.len(),
            stats.len()
        )));
    }
    let dim = uploads[0].items.cols();
    if let Some(u) = uploads.iter().find(|u| u.items.cols() != dim) {
        return Err(Error::InvalidArgument(format!(
            "upload from `{}` has dimension {}, expected {dim}",
            u.domain,
            u.items.cols()
        )));
    }
    let snapshot = stats.to_vec();
    let normalized = uploads
        .iter()
        .zip(stats.iter_mut())
        .map(|(u, s)| normalize_batch(s, &u.items, true))
        .collect::<Result<Vec<_>>>()?;
    let all = Matrix::vstack(&normalized.iter().collect::<Vec<_>>());
    let result = kmeans(&all, opts, init)?;
    let mut assignments = Vec::with_capacity(uploads.len());
    let mut offset = 0;
    for n in &normalized {
        assignments.push(result.assignments[offset..offset + n.rows()].to_vec());
        offset += n.rows();
    }
    Ok(ClusterModel {
        centers: result.centers,
        domains: uploads.iter().map(|u| u.domain.clone()).collect(),
        assignments,
        stats: snapshot,
        inertia: result.inertia,
        iterations_run: result.iterations,
    })
}

/// Server state carried across rounds.
#[derive(Clone, Debug)]
pub struct Server {
    pub stats: Vec<DomainStats>,
    pub options: KMeansOptions,
    pub warm_start: bool,
    previous: Option<Matrix>,
    round: usize,
}

impl Server {
    pub fn new(num_domains: usize, dim: usize, options: KMeansOptions, warm_start: bool) -> Self {
        Self {
            stats: vec![DomainStats::new(dim); num_domains],
            options,
            warm_start,
            previous: None,
            round: 0,
        }
    }

    pub fn rounds_run(&self) -> usize {
        self.round
    }

    pub fn run_round(&mut self, uploads: &[ItemUpload]) -> Result<ClusterModel> {
        let opts = KMeansOptions {
            seed: crate::seeding::derive_seed(self.options.seed, self.round as u64),
            ..self.options.clone()
        };
        let init = if self.warm_start { self.previous.as_ref() } else { None };
        let model = run_round(uploads, &mut self.stats, &opts, init)?;
        self.previous = Some(model.centers.clone());
        self.round += 1;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_stats_leave_input() {
        let stats = DomainStats {
            eps: 0.0,
            ..DomainStats::new(3)
        };
        let t = Matrix::from_rows(&[[1.0, -2.0, 3.5]]);
        assert_eq!(stats.normalize(&t), t);
    }

    #[test]
    fn normalize_spot_value() {
        let mut stats = DomainStats {
            mean: vec![1.0, 2.0],
            var: vec![1.0, 4.0],
            ..DomainStats::new(2)
        };
        let out = normalize_batch(&mut stats, &Matrix::from_rows(&[[2.0, 4.0]]), false).unwrap();
        assert!((out.get(0, 0) - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((out.get(0, 0) - 0.999995).abs() < 1e-6);
        assert!((out.get(0, 1) - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn momentum_update_of_mean() {
        let mut stats = DomainStats::new(1);
        normalize_batch(&mut stats, &Matrix::from_rows(&[[1.0], [1.0]]), true).unwrap();
        assert!((stats.mean[0] - 0.1).abs() < 1e-15);
        // Zero batch variance pulls the variance towards 0.
        assert!((stats.var[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn denormalize_inverts() {
        let stats = DomainStats {
            mean: vec![0.3, -1.0],
            var: vec![2.0, 0.5],
            ..DomainStats::new(2)
        };
        let t = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.25]]);
        assert!(stats.denormalize(&stats.normalize(&t)).max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn four_point_example() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let r = weighted_kmeans(&pts, 2, 100, 1).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let c = r.centers.row(r.assignments[0]);
        assert!((c[0] - 0.0).abs() < 1e-9 && (c[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn k_equal_to_distinct_points_has_zero_inertia() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0], [1.0, 2.0], [5.0, -1.0]]);
        let r = weighted_kmeans(&pts, 3, 100, 0).unwrap();
        assert!(r.inertia < 1e-20);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let pts = Matrix::from_rows(&[[1.0], [1.0], [2.0]]);
        assert!(weighted_kmeans(&pts, 3, 100, 0).is_err());
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Two identical starting centers force one cluster to be empty.
        let pts = Matrix::from_rows(&[[0.0], [0.1], [9.0], [9.2]]);
        let init = Matrix::from_rows(&[[0.0], [0.0]]);
        let opts = KMeansOptions {
            k: 2,
            ..KMeansOptions::default()
        };
        let r = kmeans(&pts, &opts, Some(&init)).unwrap();
        assert_eq!(r.assignments, vec![0, 0, 1, 1]);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let uploads = vec![
            ItemUpload {
                domain: "a".into(),
                items: Matrix::zeros(3, 2),
            },
            ItemUpload {
                domain: "b".into(),
                items: Matrix::zeros(3, 3),
            },
        ];
        let mut stats = vec![DomainStats::new(2), DomainStats::new(3)];
        assert!(run_round(&uploads, &mut stats, &KMeansOptions::default(), None).is_err());
    }

    #[test]
    fn single_client_single_cluster() {
        let items = Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0], [2.0, 1.0]]);
        let uploads = vec![ItemUpload {
            domain: "a".into(),
            items: items.clone(),
        }];
        let mut stats = vec![DomainStats::new(2)];
        let opts = KMeansOptions {
            k: 1,
            ..KMeansOptions::default()
        };
        let m = run_round(&uploads, &mut stats, &opts, None).unwrap();
        assert_eq!(m.assignments, vec![vec![0, 0, 0]]);
        // Identity snapshot stats: the center is near the data mean.
        let c = m.centers.row(0);
        assert!((c[0] - 2.0).abs() < 0.2 && (c[1] - 1.0).abs() < 0.2);
        assert_eq!(m.stats[0], DomainStats::new(2));
    }

    #[test]
    fn server_rounds_are_deterministic() {
        let items = Matrix::from_rows(&[[0.0, 1.0], [5.0, 5.0], [0.2, 0.9], [5.1, 4.8]]);
        let run = || {
            let mut s = Server::new(
                1,
                2,
                KMeansOptions {
                    k: 2,
                    ..KMeansOptions::default()
                },
                true,
            );
            let up = [ItemUpload {
                domain: "a".into(),
                items: items.clone(),
            }];
            (s.run_round(&up).unwrap(), s.run_round(&up).unwrap())
        };
        assert_eq!(run(), run());
    }
}
