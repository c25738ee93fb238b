//! Synthetic ablation benchmark: mean test Recall@20 of the full model and
//! the three ablations over several seeds.
//!
//! `cargo run --release -p fedcrf --example ablation -- [seeds] [config.json] [variant,...]`

use fedcrf::config::{Ablation, DataSource, ExperimentConfig};
use fedcrf::datamodel::SyntheticSpec;
use fedcrf::pipeline::{run_experiment, RunOptions};

fn main() -> fedcrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(5, |s| s.parse().expect("seed count"));
    let base = match args.next() {
        Some(path) if path != "-" => ExperimentConfig::load(path)?,
        Some(_) | None => fedcrf::pipeline::benchmark_config(0),
    };
    let only: Option<Vec<String>> = args.next().map(|s| s.split(',').map(str::to_owned).collect());
    let variants = [
        ("full", Ablation::default()),
        ("-cl", Ablation { disable_cl: true, ..Ablation::default() }),
        ("-fgsat", Ablation { disable_fgsat: true, ..Ablation::default() }),
        ("-fed", Ablation { disable_fed: true, ..Ablation::default() }),
    ];
    for (name, ablation) in variants {
        if only.as_ref().is_some_and(|o| !o.iter().any(|v| v == name)) {
            continue;
        }
        let mut recalls = Vec::new();
        let start = std::time::Instant::now();
        for seed in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = Some(seed);
            if let Some(DataSource::Synthetic(spec)) = &mut cfg.data {
                *spec = SyntheticSpec { seed, ..spec.clone() };
            }
            cfg.ablation = ablation;
            let out = run_experiment(&cfg, &RunOptions::default())?;
            recalls.push(out.report.mean_test("recall@20"));
        }
        let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let per: Vec<String> = recalls.iter().map(|r| format!("{r:.4}")).collect();
        println!("{name:8} mean {mean:.4}  [{}]  {:.1}s", per.join(" "), start.elapsed().as_secs_f64());
    }
    Ok(())
}
