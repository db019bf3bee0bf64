//! Run one configuration grid on a shared synthetic dataset and print the
//! mean test metrics per variant.
//!
//!     cargo run --release -p adfseg --example ablation -- <ladder|weights|modalities> [image_size] [epochs] [seeds] [key=value ...]
//!
//! `seeds` is comma separated, e.g. 0,1,2.

use std::path::PathBuf;

use adfseg::experiments::{grid_by_name, run_grid};
use adfseg::ExperimentConfig;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let grid = args.next().unwrap_or_else(|| "ladder".into());
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let seeds: Vec<u64> = args
        .next()
        .unwrap_or_else(|| "0,1,2".into())
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    let mut overrides = vec![
        "data.n_pairs=200".to_string(),
        format!("trainer.epochs={epochs}"),
        format!("trainer.checkpoint_every={epochs}"),
        "metrics.dump_embeddings=false".into(),
    ];
    overrides.extend(args);
    let cfg = ExperimentConfig::desk_scale(size).with_overrides(&overrides)?;
    let dataset = cfg.data.load(cfg.encoder.image_size)?;
    let out = PathBuf::from(format!("runs/{grid}_{size}"));
    let report = run_grid(&cfg, &dataset, &grid_by_name(&grid)?, &seeds, &out)?;
    print!("{}", report.table());
    Ok(())
}
