use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use adfseg::config::{DataSource, ExperimentConfig};
use adfseg::data::{load_directory, save_dataset, Split};
use adfseg::experiments::{grid_by_name, run_grid};
use adfseg::metrics::{disentangle_diagnostics, evaluate, GroundTruthSegmenter, NetSegmenter, Segmenter};
use adfseg::{losscheck, plot, Trainer};

/// Set to 1 to force single-threaded, bitwise-reproducible runs.
const DETERMINISTIC_ENV: &str = "ADFSEG_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "adfseg", version, about = "Two-modality lesion segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set trainer.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for the desk-scale preset at this image size.
    #[arg(long)]
    desk: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match (&self.config, self.desk) {
            (Some(p), _) => ExperimentConfig::from_file(p).with_context(|| format!("config {}", p.display()))?,
            (None, Some(size)) => ExperimentConfig::desk_scale(size),
            (None, None) => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if deterministic_env() {
            cfg.trainer.deterministic = true;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset on disk.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, train_log.csv and loss.png.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Paired image directory; defaults to the checkpoint's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the ground truth itself instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run an ablation grid: ladder, weights or modalities.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "ladder")]
        grid: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every loss against its loop oracle and finite differences.
    Losscheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        cases: usize,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn deterministic_env() -> bool {
    matches!(std::env::var(DETERMINISTIC_ENV).as_deref(), Ok("1") | Ok("true"))
}

fn train(cfg: ExperimentConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let dataset = cfg.data.load(cfg.encoder.image_size)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(&cfg, ckpt)?,
        None => Trainer::new(&cfg)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let fit = trainer.fit(&dataset, out)?;
    let (_, epochs) = adfseg::trainer::read_log(&fit.log)?;
    let series = [
        ("total", epochs.iter().map(|r| r.total).collect()),
        ("ce", epochs.iter().map(|r| r.ce).collect()),
        ("dice", epochs.iter().map(|r| r.dice).collect()),
        ("fd", epochs.iter().map(|r| r.fd).collect()),
    ];
    if epochs.len() >= 2 {
        plot::loss_curves(&series, &out.join("loss.png"))?;
    }
    println!("checkpoint {}", fit.checkpoint.display());
    println!("log {}", fit.log.display());
    println!("config_hash {}", cfg.hash());
    Ok(())
}

fn eval(
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    oracle: bool,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> anyhow::Result<()> {
    let trainer = match checkpoint {
        Some(p) => {
            if !p.exists() {
                bail!("checkpoint {} does not exist", p.display());
            }
            Some(Trainer::from_checkpoint(p)?)
        }
        None if oracle => None,
        None => bail!("--checkpoint is required unless --oracle is given"),
    };
    let cfg = match &trainer {
        Some(t) => t.config().clone(),
        None => cfg_args.load()?,
    };
    let dataset = match data {
        Some(root) => load_directory(root, (cfg.encoder.image_size, cfg.encoder.image_size))?,
        None => cfg.data.load(cfg.encoder.image_size)?,
    };
    let test = dataset.split(Split::Test);
    let seg: Box<dyn Segmenter + '_> = match (&trainer, oracle) {
        (_, true) | (None, _) => Box::new(GroundTruthSegmenter),
        (Some(t), false) => Box::new(NetSegmenter { model: t.model(), dtype: t.dtype() }),
    };
    let mut report = evaluate(seg.as_ref(), &test, cfg.metrics.eval_batch_size)?;
    report.config_hash = Some(cfg.hash());
    if let (Some(t), false) = (&trainer, oracle) {
        if cfg.metrics.dump_embeddings && cfg.trainer.modalities == adfseg::Modalities::Both {
            let path = out.with_extension("embeddings.csv");
            let summary = disentangle_diagnostics(t.model(), &test, t.dtype(), cfg.metrics.eval_batch_size, Some(&path))?;
            println!("{}", serde_json::to_string(&summary)?);
            report.embeddings = Some(path);
        }
    }
    let (json, csv) = report.write(out)?;
    let m = report.mean;
    println!("iou {:.4} dice {:.4} se {:.4} gmean {:.4}", m.iou, m.dice, m.se, m.gmean);
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::SynthData { cfg, out } => {
            let cfg = cfg.load()?;
            if cfg.data.source != DataSource::Synthetic {
                bail!("synth-data needs data.source = \"synthetic\"");
            }
            let ds = cfg.data.load(cfg.encoder.image_size)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} pairs ({} train, {} test) to {}",
                ds.len(),
                ds.split(Split::Train).len(),
                ds.split(Split::Test).len(),
                out.display()
            );
        }
        Cmd::Train { cfg, out, resume } => train(cfg.load()?, &out, resume.as_deref())?,
        Cmd::Eval { checkpoint, data, oracle, out, cfg } => {
            eval(checkpoint.as_deref(), data.as_deref(), oracle, &out, &cfg)?
        }
        Cmd::Ablate { cfg, grid, seeds, out } => {
            let cfg = cfg.load()?;
            let variants = grid_by_name(&grid)?;
            let dataset = cfg.data.load(cfg.encoder.image_size)?;
            let report = run_grid(&cfg, &dataset, &variants, &seeds, &out)?;
            print!("{}", report.table());
        }
        Cmd::Losscheck { seed, cases, json } => {
            let report = losscheck::run_all(seed, cases)?;
            print!("{}", report.table());
            if let Some(p) = json {
                std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
            }
            return Ok(report.all_pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    if deterministic_env() && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        // must happen before the thread pool starts
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
