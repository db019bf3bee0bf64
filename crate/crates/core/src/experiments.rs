//! Configuration lattices for ablations and the single-vs-two-modality
//! comparison, run on one dataset with shared seeds.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::{config, Result};
use crate::metrics::{disentangle_diagnostics, evaluate, DiagnosticsSummary, MeanMetrics, NetSegmenter};
use crate::model::Modalities;
use crate::plot;
use crate::trainer::Trainer;

/// A named edit applied on top of a base config.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Variant {
    fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// baseline, +DA, +DA+PD, +DA+PD+DACL, +TS.
pub fn ablation_ladder() -> Vec<Variant> {
    let row = |da: bool, pd: bool, dacl: bool, ts: bool| {
        vec![
            format!("trainer.use_da={da}"),
            format!("trainer.use_pd={pd}"),
            format!("trainer.use_dacl={dacl}"),
            format!("trainer.use_ts={ts}"),
        ]
    };
    [
        ("baseline", row(false, false, false, false)),
        ("+DA", row(true, false, false, false)),
        ("+DA+PD", row(true, true, false, false)),
        ("+DA+PD+DACL", row(true, true, true, false)),
        ("+TS", row(true, true, true, true)),
    ]
    .into_iter()
    .map(|(n, o)| Variant { name: n.into(), overrides: o })
    .collect()
}

/// The (α, β, γ, δ) regimes for the disentanglement sub-losses.
pub fn weighting_grid() -> Vec<Variant> {
    let third = 1.0 / 3.0;
    [(1.0, 1.0, 1.0, 1.0), (third, third, third, 0.1), (third, third, third, 0.01), (third, third, third, 0.001)]
        .into_iter()
        .map(|(a, b, g, d)| Variant {
            name: format!("a={a:.3} b={b:.3} g={g:.3} d={d}"),
            overrides: vec![
                format!("disentangle.alpha={a:?}"),
                format!("disentangle.beta={b:?}"),
                format!("disentangle.gamma={g:?}"),
                format!("disentangle.delta={d:?}"),
            ],
        })
        .collect()
}

pub fn modality_variants() -> Vec<Variant> {
    vec![
        Variant::new("both", &["trainer.modalities=\"both\""]),
        Variant::new("w_only", &["trainer.modalities=\"w_only\""]),
        Variant::new("n_only", &["trainer.modalities=\"n_only\""]),
    ]
}

pub fn grid_by_name(name: &str) -> Result<Vec<Variant>> {
    match name {
        "ladder" => Ok(ablation_ladder()),
        "weights" => Ok(weighting_grid()),
        "modalities" => Ok(modality_variants()),
        other => Err(config(format!("unknown grid `{other}` (ladder, weights, modalities)"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub test: MeanMetrics,
    pub diagnostics: Option<DiagnosticsSummary>,
}

/// Train on the train split and score the test split.
pub fn train_and_eval(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path, variant: &str) -> Result<RunResult> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(dataset, out_dir)?;
    let test = dataset.split(Split::Test);
    let seg = NetSegmenter { model: trainer.model(), dtype: trainer.dtype() };
    let mut report = evaluate(&seg, &test, cfg.metrics.eval_batch_size)?;
    report.config_hash = Some(cfg.hash());
    report.write(&out_dir.join("eval"))?;
    let diagnostics = if cfg.trainer.modalities == Modalities::Both {
        Some(disentangle_diagnostics(
            trainer.model(),
            &test,
            trainer.dtype(),
            cfg.metrics.eval_batch_size,
            cfg.metrics.dump_embeddings.then(|| out_dir.join("embeddings.csv")).as_deref(),
        )?)
    } else {
        None
    };
    Ok(RunResult {
        variant: variant.into(),
        seed: cfg.trainer.seed,
        config_hash: cfg.hash(),
        test: report.mean,
        diagnostics,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub seeds: usize,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<RunResult>,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn dice(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mean.dice)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<32} {:>7} {:>7} {:>7} {:>7}\n", "variant", "IoU", "Dice", "SE", "G-mean");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<32} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
                r.variant, r.mean.iou, r.mean.dice, r.mean.se, r.mean.gmean
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("grid.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
        w.write_record(["variant", "seeds", "iou", "dice", "se", "gmean"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seeds.to_string(),
                r.mean.iou.to_string(),
                r.mean.dice.to_string(),
                r.mean.se.to_string(),
                r.mean.gmean.to_string(),
            ])?;
        }
        w.flush()?;
        let groups: Vec<(&str, Vec<f64>)> = self
            .rows
            .iter()
            .map(|r| (r.variant.as_str(), vec![r.mean.iou, r.mean.dice, r.mean.se, r.mean.gmean]))
            .collect();
        plot::metric_bars(&groups, &dir.join("grid.png"))?;
        Ok(())
    }
}

/// Every variant under every seed. The seed drives parameter init and
/// batch order; the dataset is shared by all runs.
pub fn run_grid(
    base: &ExperimentConfig,
    dataset: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<GridReport> {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut ov = v.overrides.clone();
            ov.push(format!("trainer.seed={seed}"));
            let cfg = base.with_overrides(&ov)?;
            let dir = out_dir.join(format!("v{vi}_seed{seed}"));
            log::info!("grid: {} seed {seed}", v.name);
            let r = train_and_eval(&cfg, dataset, &dir, &v.name)?;
            per_seed.push(r.test);
            runs.push(r);
        }
        let n = per_seed.len() as f64;
        let avg = |f: fn(&MeanMetrics) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        rows.push(GridRow {
            variant: v.name.clone(),
            seeds: per_seed.len(),
            mean: MeanMetrics {
                iou: avg(|m| m.iou),
                dice: avg(|m| m.dice),
                se: avg(|m| m.se),
                gmean: avg(|m| m.gmean),
            },
        });
    }
    let report = GridReport { runs, rows };
    report.write(out_dir)?;
    Ok(report)
}

/// Count of steps along `values` that go down, and the largest such drop.
pub fn inversions(values: &[f64]) -> (usize, f64) {
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for w in values.windows(2) {
        if w[1] < w[0] {
            count += 1;
            worst = worst.max(w[0] - w[1]);
        }
    }
    (count, worst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub epochs_run: usize,
    pub train_dice: f64,
    pub diagnostics: DiagnosticsSummary,
}

/// Fit a small train split until train Dice reaches `target` or the
/// configured epoch budget runs out. Checks every `check_every` epochs.
pub fn overfit_probe(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    target: f64,
    check_every: usize,
) -> Result<ProbeResult> {
    let budget = cfg.trainer.epochs;
    let mut trainer = Trainer::new(cfg)?;
    let train = dataset.split(Split::Train);
    let mut dice = 0.0;
    let mut done = 0;
    while done < budget {
        let next = (done + check_every.max(1)).min(budget);
        // the schedule is defined over the full budget, so only the stop
        // point moves
        trainer.fit_until(dataset, out_dir, next)?;
        done = next;
        let seg = NetSegmenter { model: trainer.model(), dtype: trainer.dtype() };
        dice = evaluate(&seg, &train, cfg.metrics.eval_batch_size)?.mean.dice;
        log::info!("probe epoch {done}: train dice {dice:.4}");
        if dice >= target {
            break;
        }
    }
    let diagnostics = disentangle_diagnostics(trainer.model(), &train, trainer.dtype(), cfg.metrics.eval_batch_size, None)?;
    Ok(ProbeResult { epochs_run: done, train_dice: dice, diagnostics })
}
