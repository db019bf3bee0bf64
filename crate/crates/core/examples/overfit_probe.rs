//! Overfit the full model on eight synthetic pairs at 64x64 and report
//! train Dice plus the shared/specific cosine geometry.
//!
//!     cargo run --release -p adfseg --example overfit_probe -- [epochs] [out_dir] [key=value ...]

use std::path::PathBuf;

use adfseg::experiments::overfit_probe;
use adfseg::ExperimentConfig;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/overfit".into()));

    let extra: Vec<String> = args.collect();
    let cfg = ExperimentConfig::desk_scale(64).with_overrides(&[
        "data.n_pairs=10".to_string(),
        "data.generator.test_fraction=0.2".into(),
        format!("trainer.epochs={epochs}"),
        "trainer.checkpoint_every=1000".into(),
    ])?
    .with_overrides(&extra)?;
    let dataset = cfg.data.load(cfg.encoder.image_size)?;
    let r = overfit_probe(&cfg, &dataset, &out, 0.95, 25)?;
    println!("epochs {} train dice {:.4}", r.epochs_run, r.train_dice);
    println!(
        "cross-modal shared cos {:.3}  intra |cos| {:.3}  cross-modal specific cos {:.3}",
        r.diagnostics.cross_shared, r.diagnostics.intra_abs, r.diagnostics.cross_specific
    );
    Ok(())
}
