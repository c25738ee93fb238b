//! Seeded multi-domain benchmark with latent topics shared across domains.
//!
//! Items get a topic; their raw text embedding is the topic centroid plus
//! Gaussian noise, shifted by a per-domain offset. Users draw a
//! topic-preference vector from a symmetric Dirichlet and sample items in
//! proportion to `affinity(topic) * popularity(item)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::emb1::{EmbeddingKind, EmbeddingMatrix, RAW_TEXT_DIM};
use super::interactions::{Interaction, InteractionDataset};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub num_topics: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Dirichlet concentration of user topic preferences.
    pub preference_concentration: f64,
    /// Log-normal sigma of per-item popularity.
    pub popularity_sigma: f64,
    /// Splits every topic into this many subtopics, each with its own
    /// embedding offset and per-user preference. 1 disables the split.
    pub subtopics: usize,
    /// Scale of the subtopic embedding offsets.
    pub subtopic_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 2,
            num_users: 500,
            num_items: 300,
            num_topics: 4,
            noise_scale: 0.5,
            seed: 0,
            min_interactions: 8,
            max_interactions: 16,
            preference_concentration: 0.3,
            popularity_sigma: 0.8,
            subtopics: 1,
            subtopic_scale: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_domains == 0 || self.num_users == 0 || self.num_items == 0 {
            return fail("domains, users and items must be positive");
        }
        if self.num_topics == 0 || self.num_topics > self.num_items {
            return fail("num_topics must be in 1..=num_items");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return fail("noise_scale must be a finite nonnegative number");
        }
        if self.min_interactions == 0
            || self.min_interactions > self.max_interactions
            || self.max_interactions > self.num_items
        {
            return fail("need 1 <= min_interactions <= max_interactions <= num_items");
        }
        if self.subtopics == 0 || !(self.subtopic_scale >= 0.0) || !self.subtopic_scale.is_finite() {
            return fail("subtopics must be >= 1 and subtopic_scale finite and nonnegative");
        }
        if !(self.preference_concentration > 0.0) || !(self.popularity_sigma >= 0.0) {
            return fail("preference_concentration must be > 0 and popularity_sigma >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDomain {
    pub dataset: InteractionDataset,
    pub embeddings: EmbeddingMatrix,
    pub item_topics: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticDomain>> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, 0);
    let centroids: Vec<Vec<f64>> = (0..spec.num_topics)
        .map(|_| gaussian_vec(&mut rng, RAW_TEXT_DIM, 1.0))
        .collect();

    (0..spec.num_domains)
        .map(|d| generate_domain(spec, d, &centroids))
        .collect()
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn generate_domain(
    spec: &SyntheticSpec,
    domain: usize,
    centroids: &[Vec<f64>],
) -> Result<SyntheticDomain> {
    let mut rng = rng_for(spec.seed, 1 + domain as u64);
    let offset = gaussian_vec(&mut rng, RAW_TEXT_DIM, 0.5);
    let gain = 1.0 + 0.5 * domain as f64;

    let mut item_topics: Vec<usize> = (0..spec.num_items).map(|i| i % spec.num_topics).collect();
    item_topics.shuffle(&mut rng);

    // Subtopic draws use their own stream so `subtopics = 1` reproduces the
    // plain topic model exactly.
    let mut sub_rng = rng_for(spec.seed, 0x5b70_0000 + domain as u64);
    let mut seen = vec![0usize; spec.num_topics];
    let item_subtopics: Vec<usize> = item_topics
        .iter()
        .map(|&t| {
            seen[t] += 1;
            (seen[t] - 1) % spec.subtopics
        })
        .collect();
    let sub_offsets: Vec<Vec<Vec<f64>>> = if spec.subtopics > 1 {
        (0..spec.num_topics)
            .map(|_| {
                (0..spec.subtopics)
                    .map(|_| gaussian_vec(&mut sub_rng, RAW_TEXT_DIM, spec.subtopic_scale))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    // Rows end up with norms of order one, like sentence-encoder output.
    let scale = 1.0 / (RAW_TEXT_DIM as f64).sqrt();
    let mut data = Vec::with_capacity(spec.num_items * RAW_TEXT_DIM);
    for (i, &topic) in item_topics.iter().enumerate() {
        let noise = gaussian_vec(&mut rng, RAW_TEXT_DIM, spec.noise_scale);
        for k in 0..RAW_TEXT_DIM {
            let sub = sub_offsets.get(topic).map_or(0.0, |o| o[item_subtopics[i]][k]);
            data.push((scale * (gain * (centroids[topic][k] + sub + noise[k]) + offset[k])) as f32);
        }
    }
    let embeddings =
        EmbeddingMatrix::new(spec.num_items, RAW_TEXT_DIM, data, EmbeddingKind::RawText)?;

    let popularity_dist = LogNormal::new(0.0, spec.popularity_sigma)
        .map_err(|e| Error::Config(format!("popularity distribution: {e}")))?;
    let popularity: Vec<f64> = (0..spec.num_items)
        .map(|_| popularity_dist.sample(&mut rng))
        .collect();
    let gamma = Gamma::new(spec.preference_concentration, 1.0)
        .map_err(|e| Error::Config(format!("preference distribution: {e}")))?;

    let mut interactions = Vec::new();
    let mut clock: i64 = 0;
    for user in 0..spec.num_users {
        let raw: Vec<f64> = (0..spec.num_topics)
            .map(|_| gamma.sample(&mut rng).max(1e-12))
            .collect();
        let total: f64 = raw.iter().sum();
        let affinity: Vec<f64> = raw.iter().map(|a| a / total).collect();

        let sub_affinity: Vec<Vec<f64>> = if spec.subtopics > 1 {
            (0..spec.num_topics)
                .map(|_| (0..spec.subtopics).map(|_| gamma.sample(&mut sub_rng).max(1e-12)).collect())
                .collect()
        } else {
            Vec::new()
        };

        let n = rng.random_range(spec.min_interactions..=spec.max_interactions);
        let mut weights: Vec<f64> = (0..spec.num_items)
            .map(|i| {
                let t = item_topics[i];
                let sub = sub_affinity.get(t).map_or(1.0, |a| a[item_subtopics[i]]);
                affinity[t] * sub * popularity[i]
            })
            .collect();
        for _ in 0..n {
            let item = sample_weighted(&mut rng, &weights);
            weights[item] = 0.0;
            clock += 1;
            interactions.push(Interaction {
                user,
                item,
                timestamp: Some(clock),
            });
        }
    }
    let name = format!("synth_{}", (b'a' + (domain % 26) as u8) as char);
    let dataset = InteractionDataset::from_dense(name, spec.num_users, spec.num_items, interactions)?;
    Ok(SyntheticDomain {
        dataset,
        embeddings,
        item_topics,
    })
}

/// Draws an index with probability proportional to `weights`; falls back to
/// the first positive weight when rounding leaves the draw past the end.
fn sample_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).expect("positive weight")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_users: 40,
            num_items: 30,
            min_interactions: 5,
            max_interactions: 8,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.dataset.interactions, y.dataset.interactions);
            assert_eq!(x.embeddings, y.embeddings);
            assert_eq!(x.item_topics, y.item_topics);
        }
    }

    #[test]
    fn zero_noise_collapses_topics() {
        let spec = SyntheticSpec {
            noise_scale: 0.0,
            ..small()
        };
        let domains = generate_synthetic(&spec).unwrap();
        let d = &domains[0];
        for i in 0..d.item_topics.len() {
            for j in 0..d.item_topics.len() {
                if d.item_topics[i] == d.item_topics[j] {
                    assert_eq!(d.embeddings.row(i), d.embeddings.row(j));
                }
            }
        }
    }

    #[test]
    fn interaction_counts_within_bounds() {
        let spec = small();
        for d in generate_synthetic(&spec).unwrap() {
            let per_user = d.dataset.train_items_by_user();
            assert!(per_user
                .iter()
                .all(|v| (spec.min_interactions..=spec.max_interactions).contains(&v.len())));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SyntheticSpec {
            num_topics: 31,
            ..small()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
