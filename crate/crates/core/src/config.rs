//! Experiment configuration. JSON, unknown keys rejected.
//!
//! A config may name a `"preset"` (`kitchen_food` or `care_beauty`); its
//! values are applied first and every other key overrides them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::client::ModelShape;
use crate::datamodel::{SplitRatios, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{ContrastItems, LocalView, Reduction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    KitchenFood,
    CareBeauty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFiles {
    /// Defaults to the interactions file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Files(Vec<DomainFiles>),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Skip federated pre-training.
    pub disable_fed: bool,
    /// Drop the contrastive term.
    pub disable_cl: bool,
    /// Replace the adaptation module by center averaging.
    pub disable_fgsat: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub data: Option<DataSource>,
    pub min_core: usize,
    pub split: SplitRatios,

    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,

    pub clusters: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    pub kmeans_warm_start: bool,

    pub eta: f64,
    pub lambda_kd: f64,
    pub lambda_fa: f64,

    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub top_n: usize,
    pub stage2_epochs: usize,
    pub patience: usize,
    pub lr_decay: f64,
    pub standard_infonce: bool,
    pub contrastive_reduction: Reduction,
    pub contrast_items: ContrastItems,
    pub local_view: LocalView,
    pub local_graph_from_fused: bool,
    /// Export the adapted `t″` instead of encoder outputs after Stage 1.
    pub export_fused: bool,

    pub ablation: Ablation,
    pub attack_top_k: Vec<usize>,
    /// Worker threads for clients; `None` uses one per client.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: None,
            data: None,
            min_core: 5,
            split: SplitRatios::default(),
            dim: 64,
            hidden: 256,
            layers: 2,
            lr: 0.005,
            batch_size: 1024,
            clusters: 50,
            rounds: 20,
            local_epochs: 1,
            kmeans_max_iters: 100,
            kmeans_restarts: 4,
            kmeans_warm_start: true,
            eta: 0.01,
            lambda_kd: 0.2,
            lambda_fa: 0.1,
            alpha: 0.2,
            beta: 0.2,
            tau: 0.5,
            top_n: 10,
            stage2_epochs: 40,
            patience: 5,
            lr_decay: 0.95,
            standard_infonce: false,
            contrastive_reduction: Reduction::Mean,
            contrast_items: ContrastItems::Positives,
            local_view: LocalView::Fused,
            local_graph_from_fused: true,
            export_fused: false,
            ablation: Ablation::default(),
            attack_top_k: vec![1, 3, 5],
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            preset: Some(p),
            ..Self::default()
        };
        match p {
            Preset::KitchenFood => base,
            Preset::CareBeauty => Self {
                clusters: 70,
                lambda_kd: 0.1,
                lambda_fa: 0.1,
                alpha: 0.1,
                beta: 0.1,
                ..base
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        let Value::Object(user) = user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let base = match user.get("preset") {
            None | Some(Value::Null) => Self::default(),
            Some(p) => {
                let p: Preset = serde_json::from_value(p.clone())
                    .map_err(|e| Error::Config(format!("preset: {e}")))?;
                Self::preset(p)
            }
        };
        let Value::Object(mut merged) = serde_json::to_value(&base)? else {
            unreachable!("config serializes to an object")
        };
        for (k, v) in user {
            merged.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(DataSource::Files(domains)) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for d in domains {
                d.interactions = base.join(&d.interactions);
                d.embeddings = base.join(&d.embeddings);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.hidden == 0 {
            return fail("dim and hidden must be >= 1".into());
        }
        if self.clusters == 0 {
            return fail("clusters must be >= 1".into());
        }
        if self.rounds == 0 || self.local_epochs == 0 {
            return fail("rounds and local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.top_n == 0 || self.min_core == 0 {
            return fail("batch_size, top_n and min_core must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.eta > 0.0) || !(self.tau > 0.0) {
            return fail("lr, eta and tau must be > 0".into());
        }
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_fa", self.lambda_fa),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a finite value >= 0"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must be in (0, 1]".into());
        }
        if self.attack_top_k.contains(&0) {
            return fail("attack_top_k entries must be >= 1".into());
        }
        if self.threads == Some(0) {
            return fail("threads must be >= 1".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            dim: self.dim,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let kf = ExperimentConfig::preset(Preset::KitchenFood);
        assert_eq!((kf.lr, kf.batch_size, kf.dim, kf.rounds, kf.tau), (0.005, 1024, 64, 20, 0.5));
        assert_eq!((kf.clusters, kf.lambda_kd, kf.lambda_fa, kf.alpha, kf.beta), (50, 0.2, 0.1, 0.2, 0.2));
        let cb = ExperimentConfig::preset(Preset::CareBeauty);
        assert_eq!((cb.clusters, cb.lambda_kd, cb.lambda_fa, cb.alpha, cb.beta), (70, 0.1, 0.1, 0.1, 0.1));
    }

    #[test]
    fn preset_then_overrides() {
        let cfg = ExperimentConfig::from_json(r#"{"preset": "care_beauty", "alpha": 0.5, "seed": 3}"#).unwrap();
        assert_eq!((cfg.clusters, cfg.alpha, cfg.seed), (70, 0.5, Some(3)));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_json(r#"{"alpah": 0.5}"#).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Config);
        let err = ExperimentConfig::from_json(r#"{"ablation": {"disable_everything": true}}"#).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn missing_seed_is_config_error() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.require_seed().unwrap_err().kind(), crate::ErrorKind::Config);
    }
}
