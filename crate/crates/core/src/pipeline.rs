//! The two-stage experiment driver: data preparation, federated Stage 1,
//! per-client Stage 2, evaluation, the privacy audit and report emission.
//!
//! Output directory layout:
//!
//! ```text
//! report.json          resolved config, input hashes, per-domain results
//! report.tsv           the same results as `domain  metric  value` rows
//! log.jsonl            one loss record per client epoch, both stages
//! model.ckpt           final representations, uploads and parameters
//! tpre/<domain>.emb1   exported pre-trained semantic embeddings
//! rounds/round_XX.ckpt server artifacts of every Stage-1 round
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone::{propagate_var, AdamConfig};
use crate::checkpoint::{Checkpoint, Tensor};
use crate::client::{Broadcast, ClientData, ClientParams, ClientState, LossComponents, PipelineSettings};
use crate::config::{DataSource, ExperimentConfig};
use crate::datamodel::{
    encode_emb1, generate_synthetic, interactions_text, load_interactions, read_embeddings, split_dataset,
    write_embeddings, EmbeddingKind, EmbeddingMatrix, InteractionDataset, SplitOrder,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sia_attack, AttackRow, EvalSplit};
use crate::fgsat::{FgsatWeights, FusionMode};
use crate::finetune::{local_text_view, LocalView, Stage2Config, Stage2Trainer};
use crate::seeding::{derive_seed, stream_id};
use crate::server::{run_round, ClusterModel, DomainStats, ItemUpload, KMeansOptions, Server};
use crate::tensor::Matrix;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Git-style blob hash: SHA-256 over `"blob {len}\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InputHash {
    pub domain: String,
    pub interactions: String,
    pub embeddings: String,
}

/// One split domain with its row-aligned raw text embeddings.
#[derive(Clone, Debug)]
pub struct PreparedDomain {
    pub dataset: InteractionDataset,
    pub embeddings: EmbeddingMatrix,
    pub hash: InputHash,
    /// Latent topic per item (synthetic data only).
    pub item_topics: Option<Vec<usize>>,
}

/// Lines the rows of `emb` up with the local item ids of `ds`.
pub fn align_embeddings(ds: &InteractionDataset, emb: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if emb.rows() == ds.num_items {
        return Ok(emb);
    }
    match ds.item_token_rows() {
        Some(rows) if rows.iter().all(|&r| r < emb.rows()) => emb.select_rows(&rows),
        _ => Err(Error::RowCount {
            expected: ds.num_items,
            found: emb.rows(),
        }),
    }
}

/// Loads or generates every domain and applies the per-user split.
pub fn prepare_domains(cfg: &ExperimentConfig) -> Result<Vec<PreparedDomain>> {
    let seed = cfg.require_seed()?;
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `data` section".into()))?;
    let mut out = Vec::new();
    match source {
        DataSource::Synthetic(spec) => {
            for d in generate_synthetic(spec)? {
                let dataset = split_dataset(&d.dataset, cfg.split, seed)?;
                let hash = InputHash {
                    domain: dataset.domain_name.clone(),
                    interactions: content_hash(interactions_text(&dataset).as_bytes()),
                    embeddings: content_hash(&encode_emb1(&d.embeddings)),
                };
                out.push(PreparedDomain {
                    dataset,
                    embeddings: d.embeddings,
                    hash,
                    item_topics: Some(d.item_topics),
                });
            }
        }
        DataSource::Files(files) => {
            for f in files {
                for p in [&f.interactions, &f.embeddings] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
                let mut ds = load_interactions(&f.interactions, cfg.min_core)?;
                if let Some(name) = &f.name {
                    ds.domain_name = name.clone();
                }
                let dataset = split_dataset(&ds, cfg.split, seed)?;
                let hash = InputHash {
                    domain: dataset.domain_name.clone(),
                    interactions: hash_file(&f.interactions)?,
                    embeddings: hash_file(&f.embeddings)?,
                };
                let embeddings = align_embeddings(&dataset, read_embeddings(&f.embeddings)?)?;
                out.push(PreparedDomain {
                    dataset,
                    embeddings,
                    hash,
                    item_topics: None,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no domains configured".into()));
    }
    let mut names: Vec<&str> = out.iter().map(|d| d.dataset.domain_name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("domain names must be distinct".into()));
    }
    Ok(out)
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(content_hash(&bytes))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub single_thread: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainReport {
    pub domain: String,
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub split_order: SplitOrder,
    pub stage1_final_loss: Option<LossComponents>,
    pub stage2_epochs: usize,
    pub best_epoch: usize,
    pub best_valid_recall20: f64,
    pub test: BTreeMap<String, f64>,
    pub test_users: usize,
    pub attack: Vec<AttackRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub inertia: f64,
    pub kmeans_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub engine: BTreeMap<&'static str, &'static str>,
    pub config: ExperimentConfig,
    pub inputs: Vec<InputHash>,
    pub rounds: Vec<RoundSummary>,
    pub domains: Vec<DomainReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `domain<TAB>metric<TAB>value` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("domain\tmetric\tvalue\n");
        for d in &self.domains {
            for (k, v) in &d.test {
                let _ = writeln!(s, "{}\t{k}\t{v}", d.domain);
            }
            let _ = writeln!(s, "{}\tvalid_recall@20\t{}", d.domain, d.best_valid_recall20);
            for r in &d.attack {
                let _ = writeln!(s, "{}\tsia_f1@{}\t{}", d.domain, r.top_k, r.f1);
            }
        }
        s
    }

    pub fn domain(&self, name: &str) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == name)
    }

    /// Mean of a test metric over domains.
    pub fn mean_test(&self, metric: &str) -> f64 {
        let n = self.domains.len().max(1) as f64;
        self.domains.iter().map(|d| d.test.get(metric).copied().unwrap_or(0.0)).sum::<f64>() / n
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
    /// One JSON object per line.
    pub log: Vec<Value>,
}

fn pool(cfg: &ExperimentConfig, opts: &RunOptions, clients: usize) -> Result<rayon::ThreadPool> {
    let threads = if opts.single_thread {
        1
    } else {
        cfg.threads.unwrap_or(clients).max(1)
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn kmeans_options(cfg: &ExperimentConfig, seed: u64, points: usize) -> KMeansOptions {
    KMeansOptions {
        k: cfg.clusters.min(points).max(1),
        max_iters: cfg.kmeans_max_iters,
        delta: 1e-6,
        weighted: true,
        n_init: cfg.kmeans_restarts,
        seed,
    }
}

pub fn model_checkpoint(
    clients: &[(String, Matrix, Matrix, Matrix, ClientParams)],
) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for (domain, users, items, upload, params) in clients {
        ck.push(Tensor::from_matrix(format!("{domain}.user_repr"), users));
        ck.push(Tensor::from_matrix(format!("{domain}.item_repr"), items));
        ck.push(Tensor::from_matrix(format!("{domain}.upload"), upload));
        for (name, m) in params.named() {
            ck.push(Tensor::from_matrix(format!("{domain}.params.{name}"), m));
        }
    }
    ck
}

pub fn round_checkpoint(model: &ClusterModel, uploads: &[ItemUpload]) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push(Tensor::from_matrix("centers", &model.centers));
    for (d, name) in model.domains.iter().enumerate() {
        ck.push(Tensor::from_indices(format!("{name}.assignments"), &model.assignments[d]));
        let s = &model.stats[d];
        ck.push(Tensor::from_matrix(format!("{name}.stats.mean"), &Matrix::from_vec(1, s.dim(), s.mean.clone())));
        ck.push(Tensor::from_matrix(format!("{name}.stats.var"), &Matrix::from_vec(1, s.dim(), s.var.clone())));
        ck.push(Tensor::from_matrix(format!("{name}.upload"), &uploads[d].items));
    }
    ck
}

/// Freshly initialized clients, as `run` builds them before any training.
pub fn init_clients(cfg: &ExperimentConfig, domains: &[PreparedDomain]) -> Result<Vec<ClientState>> {
    let seed = cfg.require_seed()?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    domains
        .iter()
        .map(|d| {
            let data = ClientData::new(d.dataset.clone(), &d.embeddings)?;
            Ok(ClientState::new(data, cfg.shape(), adam, seed))
        })
        .collect()
}

/// Checkpoint of untrained clients: propagated ID embeddings as
/// representations and initial encoder outputs as uploads.
pub fn untrained_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let domains = prepare_domains(cfg)?;
    let clients = init_clients(cfg, &domains)?;
    let rows = clients
        .iter()
        .map(|c| {
            let mut g = Graph::new();
            let u = g.constant(c.params.ids.users.clone());
            let i = g.constant(c.params.ids.items.clone());
            let (u, i) = propagate_var(&mut g, &c.data.adjacency, u, i, cfg.layers);
            let (users, items) = (g.value(u).clone(), g.value(i).clone());
            (c.domain().to_owned(), users, items, c.encode_all(), c.params.clone())
        })
        .collect::<Vec<_>>();
    Ok(model_checkpoint(&rows))
}

fn write_out(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs the full two-stage experiment described by `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let domains = prepare_domains(cfg)?;
    let mut clients = init_clients(cfg, &domains)?;
    let pool = pool(cfg, opts, clients.len())?;
    let ab = cfg.ablation;
    let settings = PipelineSettings {
        layers: cfg.layers,
        eta: cfg.eta,
        fusion: if ab.disable_fgsat {
            FusionMode::CenterAverage
        } else {
            FusionMode::Fgsat
        },
    };
    let weights = FgsatWeights {
        lambda_kd: cfg.lambda_kd,
        lambda_fa: cfg.lambda_fa,
    };
    let mut log = Vec::new();
    let mut rounds = Vec::new();
    let mut round_files = Vec::new();
    let mut stage1_final = vec![None; clients.len()];

    let (broadcasts, uploads) = if ab.disable_fed {
        // No server: each client clusters its own normalized outputs.
        let uploads: Vec<ItemUpload> = clients.iter().map(ClientState::upload).collect();
        let broadcasts = uploads
            .iter()
            .map(|u| {
                let mut stats = [DomainStats::new(cfg.dim)];
                let opts = kmeans_options(cfg, derive_seed(seed, stream_id(&u.domain)), u.items.rows());
                let model = run_round(std::slice::from_ref(u), &mut stats, &opts, None)?;
                Broadcast::from_model(&model, &u.domain)
            })
            .collect::<Result<Vec<_>>>()?;
        (broadcasts, uploads)
    } else {
        let total_items: usize = clients.iter().map(|c| c.data.dataset.num_items).sum();
        let mut server = Server::new(
            clients.len(),
            cfg.dim,
            kmeans_options(cfg, derive_seed(seed, stream_id("server")), total_items),
            cfg.kmeans_warm_start,
        );
        let mut last = None;
        for round in 1..=cfg.rounds {
            let uploads: Vec<ItemUpload> = pool.install(|| clients.par_iter().map(ClientState::upload).collect());
            let model = server.run_round(&uploads)?;
            rounds.push(RoundSummary {
                round,
                inertia: model.inertia,
                kmeans_iterations: model.iterations_run,
            });
            if opts.out_dir.is_some() {
                round_files.push((format!("rounds/round_{round:02}.ckpt"), round_checkpoint(&model, &uploads).encode()));
            }
            let broadcasts = clients
                .iter()
                .map(|c| Broadcast::from_model(&model, c.domain()))
                .collect::<Result<Vec<_>>>()?;
            let losses: Vec<Vec<LossComponents>> = pool.install(|| {
                clients
                    .par_iter_mut()
                    .zip(broadcasts.par_iter())
                    .map(|(c, b)| {
                        (0..cfg.local_epochs)
                            .map(|_| c.stage1_epoch(b, &settings, weights, cfg.batch_size))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for (d, (c, per_epoch)) in clients.iter().zip(&losses).enumerate() {
                for (e, l) in per_epoch.iter().enumerate() {
                    log.push(json!({"stage": 1, "round": round, "domain": c.domain(), "epoch": e + 1, "losses": l}));
                }
                stage1_final[d] = per_epoch.last().copied();
            }
            last = Some((broadcasts, uploads));
        }
        last.expect("at least one round")
    };

    let t_pre: Vec<Matrix> = clients
        .iter()
        .zip(&broadcasts)
        .map(|(c, b)| {
            if cfg.export_fused && !ab.disable_fed {
                local_text_view(&c.data, &c.params, b, &settings, LocalView::Fused, cfg.batch_size)
            } else {
                c.encode_all()
            }
        })
        .collect();

    let stage2 = Stage2Config {
        alpha: if ab.disable_cl { 0.0 } else { cfg.alpha },
        beta: cfg.beta,
        tau: cfg.tau,
        top_n: cfg.top_n,
        max_epochs: cfg.stage2_epochs,
        patience: cfg.patience,
        lr_decay: cfg.lr_decay,
        batch_size: cfg.batch_size,
        standard_infonce: cfg.standard_infonce,
        contrastive_reduction: cfg.contrastive_reduction,
        contrast_items: cfg.contrast_items,
        local_view: cfg.local_view,
        local_graph_from_fused: cfg.local_graph_from_fused,
    };
    let jobs: Vec<(ClientState, &Matrix, Broadcast)> = clients
        .into_iter()
        .zip(&t_pre)
        .zip(broadcasts)
        .map(|((c, t), b)| (c, t, b))
        .collect();
    let trained = pool.install(|| {
        jobs.into_par_iter()
            .map(|(c, t, b)| {
                let mut trainer = Stage2Trainer::new(c, t, b, settings, stage2.clone())?;
                let epochs = trainer.train(|_| {})?;
                Ok((trainer, epochs))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut reports = Vec::new();
    let mut ck_rows = Vec::new();
    for (d, ((trainer, epochs), upload)) in trained.iter().zip(&uploads).enumerate() {
        let ds = &trainer.client.data.dataset;
        for r in &trainer.history {
            log.push(json!({"stage": 2, "domain": ds.domain_name, "epoch": r.epoch, "losses": r.losses,
                "valid_recall@20": r.valid_recall20, "lr": r.lr}));
        }
        let reprs = trainer.representations(&trainer.client.params);
        let test = evaluate(&reprs.users, &reprs.items, ds, EvalSplit::Test, &[10, 20])?;
        let attack = sia_attack(&upload.items, ds, None, &cfg.attack_top_k)?;
        reports.push(DomainReport {
            domain: ds.domain_name.clone(),
            num_users: ds.num_users,
            num_items: ds.num_items,
            num_interactions: ds.interactions.len(),
            split_order: if ds.has_timestamps() {
                SplitOrder::Chronological
            } else {
                SplitOrder::SeededShuffle
            },
            stage1_final_loss: stage1_final[d],
            stage2_epochs: *epochs,
            best_epoch: trainer.best_epoch(),
            best_valid_recall20: trainer.best.as_ref().map_or(0.0, |b| b.1),
            test: test.metrics,
            test_users: test.users_evaluated,
            attack: attack.rows,
        });
        ck_rows.push((
            ds.domain_name.clone(),
            reprs.users,
            reprs.items,
            upload.items.clone(),
            trainer.client.params.clone(),
        ));
    }

    let report = RunReport {
        engine: BTreeMap::from([("name", env!("CARGO_PKG_NAME")), ("version", ENGINE_VERSION)]),
        config: cfg.clone(),
        inputs: domains.iter().map(|d| d.hash.clone()).collect(),
        rounds,
        domains: reports,
    };
    let checkpoint = model_checkpoint(&ck_rows);

    if let Some(dir) = &opts.out_dir {
        write_out(dir, "report.json", report.to_json().as_bytes())?;
        write_out(dir, "report.tsv", report.to_tsv().as_bytes())?;
        let mut lines = String::new();
        for v in &log {
            lines.push_str(&v.to_string());
            lines.push('\n');
        }
        write_out(dir, "log.jsonl", lines.as_bytes())?;
        write_out(dir, "model.ckpt", &checkpoint.encode())?;
        for (name, bytes) in &round_files {
            write_out(dir, name, bytes)?;
        }
        for (t, d) in t_pre.iter().zip(&domains) {
            let path = dir.join("tpre").join(format!("{}.emb1", d.dataset.domain_name));
            std::fs::create_dir_all(dir.join("tpre")).map_err(|e| Error::io("creating tpre dir", e))?;
            write_embeddings(path, &EmbeddingMatrix::from_matrix(t, EmbeddingKind::Encoded)?)?;
        }
    }

    Ok(RunOutcome { report, checkpoint, log })
}

/// The seeded two-domain, four-topic benchmark used by the ablation check.
pub fn benchmark_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(seed),
        data: Some(DataSource::Synthetic(crate::datamodel::SyntheticSpec {
            seed,
            ..Default::default()
        })),
        clusters: 8,
        ..ExperimentConfig::default()
    }
}
