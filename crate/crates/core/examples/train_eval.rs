//! Train a small model, reload it from its checkpoint and score the test
//! split, including the shared/specific cosine diagnostics.
//!
//! cargo run --release --example train_eval -- [epochs] [out_dir] [key=value ...]

use std::path::PathBuf;

use adfseg::data::Split;
use adfseg::metrics::{disentangle_diagnostics, evaluate, NetSegmenter};
use adfseg::{ExperimentConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/train_eval".into()));
    let extra: Vec<String> = args.collect();

    let cfg = ExperimentConfig::desk_scale(32)
        .with_overrides(&[format!("trainer.epochs={epochs}"), "data.n_pairs=60".into()])?
        .with_overrides(&extra)?;
    let dataset = cfg.data.load(cfg.encoder.image_size)?;

    let mut trainer = Trainer::new(&cfg)?;
    let fit = trainer.fit(&dataset, &out)?;
    for r in &fit.epochs {
        println!(
            "epoch {:>3}  total {:.4}  da {:.4}  fd {:.4}  ce {:.4}  dice {:.4}  lambda2 {:.3}",
            r.epoch, r.total, r.da, r.fd, r.ce, r.dice, r.lambda2
        );
    }

    let reloaded = Trainer::from_checkpoint(&fit.checkpoint)?;
    let test = dataset.split(Split::Test);
    let seg = NetSegmenter { model: reloaded.model(), dtype: reloaded.dtype() };
    let report = evaluate(&seg, &test, cfg.metrics.eval_batch_size)?;
    let (json, _) = report.write(&out.join("eval"))?;
    let m = report.mean;
    println!("test iou {:.4} dice {:.4} se {:.4} gmean {:.4} ({})", m.iou, m.dice, m.se, m.gmean, json.display());

    let d = disentangle_diagnostics(reloaded.model(), &test, reloaded.dtype(), 8, Some(&out.join("embeddings.csv")))?;
    println!(
        "shared cos {:.3}  intra |cos| {:.3}  specific cos {:.3}",
        d.cross_shared, d.intra_abs, d.cross_specific
    );
    Ok(())
}
