use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedcrf::checkpoint::Checkpoint;
use fedcrf::config::{DataSource, DomainFiles, ExperimentConfig};
use fedcrf::datamodel::{
    generate_synthetic, write_embeddings, write_interactions, EmbeddingKind, EmbeddingMatrix, SyntheticSpec,
};
use fedcrf::eval::{evaluate, sia_attack, EvalSplit};
use fedcrf::pipeline::{prepare_domains, run_experiment, RunOptions};
use fedcrf::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "fedcrf", version, about = "Federated cross-domain recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both training stages and write report, logs and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Train clients one after another on the calling thread.
        #[arg(long)]
        single_thread: bool,
    },
    /// Generate a synthetic benchmark plus a config that runs it.
    Synth {
        /// JSON synthetic spec; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Ranking metrics of a model checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20])]
        k: Vec<usize>,
    },
    /// Similarity-based inference attack on the uploads in a checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
        top_k: Vec<usize>,
    },
    /// Write a round checkpoint's centers (EMB1) and assignments (TSV).
    Dump {
        #[arg(long)]
        round: PathBuf,
        #[arg(long, default_value = "dump")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        cfg.require_seed()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            common,
            out,
            single_thread,
        } => {
            let cfg = common.load()?;
            let outcome = run_experiment(
                &cfg,
                &RunOptions {
                    out_dir: Some(out.clone()),
                    single_thread,
                },
            )?;
            for d in &outcome.report.domains {
                println!(
                    "{}\trecall@20 {:.4}\tndcg@20 {:.4}\tbest epoch {}",
                    d.domain,
                    d.test.get("recall@20").copied().unwrap_or(0.0),
                    d.test.get("ndcg@20").copied().unwrap_or(0.0),
                    d.best_epoch
                );
            }
            println!("report written to {}", out.join("report.json").display());
            Ok(())
        }
        Command::Synth { config, seed, out } => synth(config.as_deref(), seed, &out),
        Command::Eval {
            common,
            checkpoint,
            split,
            k,
        } => {
            let cfg = common.load()?;
            let ck = Checkpoint::read(&checkpoint)?;
            let split = match split {
                Split::Valid => EvalSplit::Valid,
                Split::Test => EvalSplit::Test,
            };
            let mut out = serde_json::Map::new();
            for d in prepare_domains(&cfg)? {
                let name = &d.dataset.domain_name;
                let users = ck.matrix(&format!("{name}.user_repr"))?;
                let items = ck.matrix(&format!("{name}.item_repr"))?;
                check_rows(&items, d.dataset.num_items, name)?;
                check_rows(&users, d.dataset.num_users, name)?;
                let m = evaluate(&users, &items, &d.dataset, split, &k)?;
                out.insert(name.clone(), serde_json::to_value(&m)?);
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::Attack {
            common,
            checkpoint,
            top_k,
        } => {
            if top_k.is_empty() || top_k.contains(&0) {
                return Err(Error::Config("--top-k entries must be >= 1".into()));
            }
            let cfg = common.load()?;
            let ck = Checkpoint::read(&checkpoint)?;
            println!("domain\ttop_k\tf1\tprecision\trecall\ttargets");
            for d in prepare_domains(&cfg)? {
                let name = &d.dataset.domain_name;
                let upload = ck.matrix(&format!("{name}.upload"))?;
                check_rows(&upload, d.dataset.num_items, name)?;
                for r in sia_attack(&upload, &d.dataset, None, &top_k)?.rows {
                    println!(
                        "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                        r.top_k, r.f1, r.precision, r.recall, r.targets
                    );
                }
            }
            Ok(())
        }
        Command::Dump { round, out } => dump(&round, &out),
    }
}

fn check_rows(m: &fedcrf::Matrix, expected: usize, domain: &str) -> Result<()> {
    if m.rows() != expected {
        return Err(Error::Checkpoint(format!(
            "`{domain}` has {} rows in the checkpoint, the data has {expected}",
            m.rows()
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    create_dir(out)?;
    let mut files = Vec::new();
    for d in generate_synthetic(&spec)? {
        let name = d.dataset.domain_name.clone();
        write_interactions(out.join(format!("{name}.tsv")), &d.dataset)?;
        write_embeddings(out.join(format!("{name}.emb1")), &d.embeddings)?;
        let topics: String = d
            .item_topics
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}\t{t}\n", d.dataset.item_tokens[i]))
            .collect();
        write_text(&out.join(format!("{name}.topics.tsv")), &topics)?;
        files.push(DomainFiles {
            name: Some(name.clone()),
            interactions: format!("{name}.tsv").into(),
            embeddings: format!("{name}.emb1").into(),
        });
        println!("{name}: {} users, {} items, {} interactions", d.dataset.num_users, d.dataset.num_items, d.dataset.interactions.len());
    }
    let cfg = ExperimentConfig {
        seed: Some(spec.seed),
        data: Some(DataSource::Files(files)),
        ..ExperimentConfig::default()
    };
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))
}

fn dump(round: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::read(round)?;
    create_dir(out)?;
    let centers = ck.matrix("centers")?;
    write_embeddings(out.join("centers.emb1"), &EmbeddingMatrix::from_matrix(&centers, EmbeddingKind::Encoded)?)?;
    let domains: Vec<String> = ck
        .names()
        .filter_map(|n| n.strip_suffix(".assignments"))
        .map(str::to_owned)
        .collect();
    for name in &domains {
        let assign = ck.get(&format!("{name}.assignments"))?.to_indices()?;
        let text: String = assign.iter().enumerate().map(|(i, c)| format!("{i}\t{c}\n")).collect();
        write_text(&out.join(format!("{name}.assignments.tsv")), &text)?;
        let upload = ck.matrix(&format!("{name}.upload"))?;
        write_embeddings(out.join(format!("{name}.upload.emb1")), &EmbeddingMatrix::from_matrix(&upload, EmbeddingKind::Encoded)?)?;
    }
    println!("{} centers, {} domains written to {}", centers.rows(), domains.len(), out.display());
    Ok(())
}
