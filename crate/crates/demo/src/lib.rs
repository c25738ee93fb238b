//! Browser bindings: weighted k-means on 2-D points, the contrastive loss
//! as a function of temperature, and the similarity attack's F1 against
//! top-k on a small synthetic domain.

use fedcrf::datamodel::{generate_synthetic, SyntheticSpec};
use fedcrf::eval::sia_attack;
use fedcrf::finetune::contrastive_loss;
use fedcrf::seeding::rng_for;
use fedcrf::server::{kmeans, KMeansOptions};
use fedcrf::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Clustering {
    pub points: Vec<[f64; 2]>,
    pub blob: Vec<usize>,
    pub assignments: Vec<usize>,
    pub centers: Vec<[f64; 2]>,
    pub inertia: f64,
    pub iterations: usize,
}

/// `n` points from `blobs` Gaussian blobs (plus a few far outliers), then
/// k-means with `k` clusters.
pub fn cluster_points(n: usize, blobs: usize, k: usize, outliers: usize, weighted: bool, seed: u64) -> Result<Clustering, String> {
    if n == 0 || blobs == 0 || k == 0 {
        return Err("n, blobs and k must be positive".into());
    }
    let mut rng = rng_for(seed, 1);
    let means: Vec<[f64; 2]> = (0..blobs).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect();
    let mut points = Vec::with_capacity(n + outliers);
    let mut blob = Vec::with_capacity(n + outliers);
    for i in 0..n {
        let m = means[i % blobs];
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        points.push([m[0] + 0.6 * dx, m[1] + 0.6 * dy]);
        blob.push(i % blobs);
    }
    for _ in 0..outliers {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        points.push([12.0 * angle.cos(), 12.0 * angle.sin()]);
        blob.push(blobs);
    }
    let m = Matrix::from_rows(&points);
    let opts = KMeansOptions {
        k,
        weighted,
        seed,
        ..KMeansOptions::default()
    };
    let res = kmeans(&m, &opts, None).map_err(|e| e.to_string())?;
    Ok(Clustering {
        points,
        blob,
        assignments: res.assignments,
        centers: (0..res.centers.rows()).map(|r| [res.centers.get(r, 0), res.centers.get(r, 1)]).collect(),
        inertia: res.inertia,
        iterations: res.iterations,
    })
}

#[derive(Debug, Serialize)]
pub struct TemperatureCurve {
    pub tau: Vec<f64>,
    pub as_written: Vec<f64>,
    pub standard: Vec<f64>,
}

/// Both contrastive forms over a log-spaced temperature grid for `pairs`
/// aligned rows whose second view is the first plus `noise`.
pub fn temperature_curve(pairs: usize, dim: usize, noise: f64, seed: u64) -> Result<TemperatureCurve, String> {
    if pairs < 2 || dim == 0 {
        return Err("need at least 2 pairs and dim >= 1".into());
    }
    let mut rng = rng_for(seed, 2);
    let a = Matrix::from_vec(pairs, dim, (0..pairs * dim).map(|_| rng.sample(StandardNormal)).collect());
    let jitter: Vec<f64> = (0..pairs * dim).map(|_| noise * rng.sample::<f64, _>(StandardNormal)).collect();
    let b = a.add(&Matrix::from_vec(pairs, dim, jitter));
    let tau: Vec<f64> = (0..40).map(|i| 10f64.powf(-1.5 + 2.5 * i as f64 / 39.0)).collect();
    let eval = |standard: bool| -> Result<Vec<f64>, String> {
        tau.iter()
            .map(|&t| contrastive_loss(&a, &b, t, standard).map(|l| l / pairs as f64).map_err(|e| e.to_string()))
            .collect()
    };
    Ok(TemperatureCurve {
        as_written: eval(false)?,
        standard: eval(true)?,
        tau,
    })
}

#[derive(Debug, Serialize)]
pub struct AttackCurve {
    pub top_k: Vec<usize>,
    pub f1: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Attack F1 for top-k 1..=`max_k` on raw item embeddings of one
/// synthetic domain.
pub fn attack_curve(subtopics: usize, users: usize, items: usize, max_k: usize, seed: u64) -> Result<AttackCurve, String> {
    let spec = SyntheticSpec {
        num_domains: 1,
        num_users: users,
        num_items: items,
        subtopics,
        seed,
        ..SyntheticSpec::default()
    };
    let domain = generate_synthetic(&spec).map_err(|e| e.to_string())?.remove(0);
    let top_k: Vec<usize> = (1..=max_k.max(1)).collect();
    let report = sia_attack(&domain.embeddings.to_matrix(), &domain.dataset, None, &top_k).map_err(|e| e.to_string())?;
    Ok(AttackCurve {
        top_k,
        f1: report.rows.iter().map(|r| r.f1).collect(),
        precision: report.rows.iter().map(|r| r.precision).collect(),
        recall: report.rows.iter().map(|r| r.recall).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn cluster(n: usize, blobs: usize, k: usize, outliers: usize, weighted: bool, seed: u32) -> Result<String, JsError> {
    to_js(cluster_points(n, blobs, k, outliers, weighted, seed as u64))
}

#[wasm_bindgen]
pub fn contrastive_vs_tau(pairs: usize, dim: usize, noise: f64, seed: u32) -> Result<String, JsError> {
    to_js(temperature_curve(pairs, dim, noise, seed as u64))
}

#[wasm_bindgen]
pub fn attack_vs_top_k(subtopics: usize, users: usize, items: usize, max_k: usize, seed: u32) -> Result<String, JsError> {
    to_js(attack_curve(subtopics, users, items, max_k, seed as u64))
}
