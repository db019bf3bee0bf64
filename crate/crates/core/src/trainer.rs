//! Total objective, progressive weighting of the disentanglement term, the
//! optimization loop, and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::alignment::{mmd_loss, median_heuristic, Sigma};
use crate::config::ExperimentConfig;
use crate::data::{make_batches, to_tensors, BatchMode, BatchTensors, Dataset, SamplePair, Split};
use crate::disentangle::{loss_fd, FdReport, FdWeights};
use crate::error::{config, contract, Error, Result};
use crate::model::{AdfNet, Modalities};
use crate::params::{Adam, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub alpha_fd_max: f64,
    pub alpha_fd_init: f64,
    pub dice_smooth: f64,
    pub modalities: Modalities,
    /// Ablation switches: distribution alignment, preliminary
    /// disentanglement, contrastive term, progressive schedule.
    pub use_da: bool,
    pub use_pd: bool,
    pub use_dacl: bool,
    pub use_ts: bool,
    pub deterministic: bool,
    /// "f32" or "f64".
    pub dtype: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 1e-3,
            batch_size: 24,
            seed: 0,
            checkpoint_every: 10,
            lambda_ce: 0.5,
            lambda_dice: 0.5,
            alpha_fd_max: 1.0,
            alpha_fd_init: 1.0,
            dice_smooth: 1.0,
            modalities: Modalities::Both,
            use_da: true,
            use_pd: true,
            use_dacl: true,
            use_ts: true,
            deterministic: true,
            dtype: "f32".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(config("batch_size must be >= 2 for training"));
        }
        if self.checkpoint_every == 0 {
            return Err(config("checkpoint_every must be >= 1"));
        }
        for (k, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_dice", self.lambda_dice),
            ("alpha_fd_max", self.alpha_fd_max),
            ("alpha_fd_init", self.alpha_fd_init),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{k} must be >= 0, got {v}")));
            }
        }
        if self.dice_smooth < 0.0 {
            return Err(config("dice_smooth must be >= 0"));
        }
        self.dtype()?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(config(format!("dtype must be f32 or f64, got `{other}`"))),
        }
    }
}

/// min(alpha_fd_max, (e / E) * alpha_fd_init) for 1 <= e <= E.
pub fn lambda2_schedule(epoch: usize, epochs: usize, alpha_fd_max: f64, alpha_fd_init: f64) -> Result<f64> {
    if epochs == 0 || epoch == 0 || epoch > epochs {
        return Err(contract(format!("epoch {epoch} outside [1, {epochs}]")));
    }
    Ok(alpha_fd_max.min((epoch as f64 / epochs as f64) * alpha_fd_init))
}

/// Effective weights for one epoch after ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub da: f64,
    pub align: f64,
    pub diff: f64,
    pub orth: f64,
    pub dacl: f64,
    pub fd: f64,
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossReport {
    /// λ1·DA + λ2·FD + λ3·CE + λ4·Dice recomputed from the scalars.
    pub fn recomposed_total(&self) -> f64 {
        self.lambda1 * self.da + self.lambda2 * self.fd + self.lambda3 * self.ce + self.lambda4 * self.dice
    }

    fn mean_of(epoch: usize, rows: &[LossReport]) -> LossReport {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&LossReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        // weights are fixed within an epoch; averaging them could move a bit
        let w = rows.first().copied().unwrap_or_default();
        LossReport {
            epoch,
            step: rows.len(),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            da: avg(|r| r.da),
            align: avg(|r| r.align),
            diff: avg(|r| r.diff),
            orth: avg(|r| r.orth),
            dacl: avg(|r| r.dacl),
            fd: avg(|r| r.fd),
            ce: avg(|r| r.ce),
            dice: avg(|r| r.dice),
            total: avg(|r| r.total),
        }
    }

    fn csv_header() -> &'static str {
        "kind,epoch,step,lambda1,lambda2,lambda3,lambda4,da,align,diff,orth,dacl,fd,ce,dice,total"
    }

    fn csv_row(&self, kind: &str) -> String {
        format!(
            "{kind},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.da,
            self.align,
            self.diff,
            self.orth,
            self.dacl,
            self.fd,
            self.ce,
            self.dice,
            self.total
        )
    }
}

/// Mean pixel cross-entropy and soft Dice loss on the lesion channel.
/// `mask` is (B, H, W) with values in {0, 1}.
pub fn seg_losses(logits: &Tensor, mask: &Tensor, smooth: f64) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(contract(format!("expected 2 logit channels, got {c}")));
    }
    if mask.dims() != [b, h, w] {
        return Err(contract(format!(
            "mask shape {:?} does not match logits {:?}",
            mask.dims(),
            logits.dims()
        )));
    }
    let mask_max = mask.to_dtype(DType::F64)?.max_all()?.to_scalar::<f64>()?;
    let mask_min = mask.to_dtype(DType::F64)?.min_all()?.to_scalar::<f64>()?;
    if mask_max > 1.0 || mask_min < 0.0 {
        return Err(contract("mask is not binary"));
    }
    let fg = mask.to_dtype(logits.dtype())?;
    let bg = (1.0 - &fg)?;
    let onehot = Tensor::stack(&[&bg, &fg], 1)?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let ce = (logp * &onehot)?.sum(1)?.mean_all()?.neg()?;
    let prob_fg = candle_nn::ops::softmax(logits, 1)?.narrow(1, 1, 1)?.squeeze(1)?;
    let inter = (&prob_fg * &fg)?.sum_all()?;
    let denom = ((prob_fg.sum_all()? + fg.sum_all()?)? + smooth)?;
    let dice = (1.0 - ((inter * 2.0)? + smooth)?.div(&denom)?)?;
    Ok((ce, dice))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct Trainer {
    cfg: ExperimentConfig,
    store: ParamStore,
    model: AdfNet,
    opt: Adam,
    sigma: Option<f64>,
    epochs_done: usize,
    dtype: DType,
    device: Device,
}

pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<LossReport>,
}

const META_EPOCH: &str = "epoch";
const META_STEP: &str = "adam_step";
const META_SIGMA: &str = "sigma";
const META_HASH: &str = "config_hash";
const META_CONFIG: &str = "config_toml";
const META_FORMAT: &str = "format";
const FORMAT: &str = "adfseg-checkpoint-v1";

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.trainer.dtype()?;
        let device = Device::Cpu;
        let mut store = ParamStore::new(cfg.trainer.seed, dtype, &device);
        let model = AdfNet::new(
            &mut store,
            cfg.trainer.modalities,
            &cfg.encoder,
            &cfg.disentangle,
            &cfg.fusion,
        )?;
        let opt = Adam::new(&store, cfg.trainer.lr)?;
        let sigma = match cfg.alignment.sigma {
            Sigma::Fixed(s) => Some(s),
            Sigma::Auto => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            opt,
            sigma,
            epochs_done: 0,
            dtype,
            device,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &AdfNet {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    pub fn batch(&self, pairs: &[&SamplePair]) -> Result<BatchTensors> {
        to_tensors(pairs, self.dtype, &self.device)
    }

    /// Weights in force during `epoch` (1-based).
    pub fn weights_for_epoch(&self, epoch: usize) -> Result<LossWeights> {
        let t = &self.cfg.trainer;
        let both = t.modalities == Modalities::Both;
        let scheduled = lambda2_schedule(epoch, t.epochs, t.alpha_fd_max, t.alpha_fd_init)?;
        Ok(LossWeights {
            lambda1: if both && t.use_da { self.cfg.alignment.lambda_da } else { 0.0 },
            lambda2: match (both, t.use_ts) {
                (false, _) => 0.0,
                (true, true) => scheduled,
                (true, false) => t.alpha_fd_max,
            },
            lambda3: t.lambda_ce,
            lambda4: t.lambda_dice,
        })
    }

    fn fd_weights(&self) -> FdWeights {
        let t = &self.cfg.trainer;
        let d = &self.cfg.disentangle;
        let pd = if t.use_pd { 1.0 } else { 0.0 };
        FdWeights {
            alpha: d.alpha * pd,
            beta: d.beta * pd,
            gamma: d.gamma * pd,
            delta: if t.use_dacl { d.delta } else { 0.0 },
        }
    }

    /// Forward pass and every loss term, without touching parameters.
    pub fn losses(&mut self, batch: &BatchTensors, weights: LossWeights) -> Result<(Tensor, LossReport)> {
        let out = self.model.forward(&batch.x_w, &batch.x_n)?;
        let (ce, dice) = seg_losses(&out.logits.logits, &batch.mask, self.cfg.trainer.dice_smooth)?;
        let mut total = ((&ce * weights.lambda3)? + (&dice * weights.lambda4)?)?;
        let mut report = LossReport {
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda3: weights.lambda3,
            lambda4: weights.lambda4,
            ce: scalar(&ce)?,
            dice: scalar(&dice)?,
            ..Default::default()
        };
        if let (Some((g_w, g_n)), Some(bundle)) = (&out.global, &out.bundle) {
            let sigma = match self.sigma {
                Some(s) => s,
                None => {
                    let s = median_heuristic(&g_w.global, &g_n.global)?;
                    log::info!("alignment bandwidth frozen at {s}");
                    self.sigma = Some(s);
                    s
                }
            };
            let da = mmd_loss(&g_w.global, &g_n.global, sigma)?;
            let d = &self.cfg.disentangle;
            let (fd, parts): (Tensor, FdReport) =
                loss_fd(&bundle.pooled, self.fd_weights(), d.tau, d.symmetrize_dacl)?;
            total = ((total + (&da * weights.lambda1)?)? + (&fd * weights.lambda2)?)?;
            report.da = scalar(&da)?;
            report.align = parts.align;
            report.diff = parts.diff;
            report.orth = parts.orth;
            report.dacl = parts.dacl;
            report.fd = parts.fd;
        }
        report.total = scalar(&total)?;
        Ok((total, report))
    }

    /// One optimizer step on `batch` with the weights of `epoch`.
    pub fn train_step(&mut self, batch: &BatchTensors, epoch: usize, step: usize) -> Result<LossReport> {
        if batch.x_w.dim(0)? < 2 {
            return Err(contract("training batches need at least 2 samples"));
        }
        let weights = self.weights_for_epoch(epoch)?;
        let (total, mut report) = self.losses(batch, weights)?;
        report.epoch = epoch;
        report.step = step;
        for (term, v) in [
            ("DA", report.da),
            ("Align", report.align),
            ("Diff", report.diff),
            ("Orth", report.orth),
            ("DACL", report.dacl),
            ("FD", report.fd),
            ("CE", report.ce),
            ("Dice", report.dice),
            ("total", report.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term, epoch, step });
            }
        }
        let grads = total.backward()?;
        self.opt.step(&self.store, &grads)?;
        Ok(report)
    }

    /// Run the remaining epochs up to `trainer.epochs` on the train split,
    /// logging to `out_dir/train_log.csv` and checkpointing into `out_dir`.
    pub fn fit(&mut self, dataset: &Dataset, out_dir: &Path) -> Result<FitOutcome> {
        self.fit_until(dataset, out_dir, self.cfg.trainer.epochs)
    }

    /// Like `fit` but stops after epoch `stop` (the schedule still spans
    /// the full `trainer.epochs`).
    pub fn fit_until(&mut self, dataset: &Dataset, out_dir: &Path, stop: usize) -> Result<FitOutcome> {
        if stop > self.cfg.trainer.epochs {
            return Err(contract(format!(
                "stop epoch {stop} beyond trainer.epochs {}",
                self.cfg.trainer.epochs
            )));
        }
        fs::create_dir_all(out_dir)?;
        let train = dataset.split(Split::Train);
        let t = self.cfg.trainer.clone();
        if train.len() < t.batch_size {
            return Err(config(format!(
                "train split has {} pairs, fewer than batch_size {}",
                train.len(),
                t.batch_size
            )));
        }
        let log_path = out_dir.join("train_log.csv");
        let resuming = self.epochs_done > 0 && log_path.exists();
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(&log_path)?;
        if !resuming {
            writeln!(log, "{}", LossReport::csv_header())?;
        }
        let mut epochs = Vec::new();
        let mut last_ckpt = None;
        for epoch in self.epochs_done + 1..=stop {
            let order_seed = t.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
            let mut rows = Vec::new();
            for (step, idx) in make_batches(train.len(), t.batch_size, Some(order_seed), BatchMode::Train)?.enumerate() {
                let pairs: Vec<&SamplePair> = idx.iter().map(|&i| train[i]).collect();
                let batch = self.batch(&pairs)?;
                let report = self.train_step(&batch, epoch, step)?;
                writeln!(log, "{}", report.csv_row("step"))?;
                rows.push(report);
            }
            let mean = LossReport::mean_of(epoch, &rows);
            writeln!(log, "{}", mean.csv_row("epoch"))?;
            log::debug!("epoch {epoch}: total {:.5} dice-loss {:.5}", mean.total, mean.dice);
            epochs.push(mean);
            self.epochs_done = epoch;
            if epoch % t.checkpoint_every == 0 || epoch == stop {
                let path = out_dir.join(format!("ckpt_epoch{epoch:04}.safetensors"));
                self.save_checkpoint(&path)?;
                last_ckpt = Some(path);
            }
        }
        log.flush()?;
        let checkpoint = match last_ckpt {
            Some(p) => p,
            None => {
                let p = out_dir.join(format!("ckpt_epoch{:04}.safetensors", self.epochs_done));
                self.save_checkpoint(&p)?;
                p
            }
        };
        Ok(FitOutcome {
            checkpoint,
            log: log_path,
            epochs,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = self
            .store
            .tensors()
            .into_iter()
            .map(|(k, v)| (format!("param.{k}"), v))
            .collect();
        tensors.extend(self.opt.state_tensors());
        let mut meta = HashMap::new();
        meta.insert(META_FORMAT.to_string(), FORMAT.to_string());
        meta.insert(META_EPOCH.to_string(), self.epochs_done.to_string());
        meta.insert(META_STEP.to_string(), self.opt.step_count().to_string());
        meta.insert(META_HASH.to_string(), self.cfg.hash());
        meta.insert(META_CONFIG.to_string(), self.cfg.to_toml()?);
        if let Some(s) = self.sigma {
            meta.insert(META_SIGMA.to_string(), format!("{s:e}"));
        }
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        let views: Vec<(&String, &Tensor)> = names.into_iter().map(|k| (k, &tensors[k])).collect();
        safetensors::serialize_to_file(views, Some(meta), path)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint, restoring weights, optimizer
    /// state, the frozen bandwidth and the epoch counter.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let cfg = ExperimentConfig::from_toml_str(&ckpt.config_toml)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        if cfg.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("config hash does not match embedded config".into()));
        }
        let mut trainer = Trainer::new(&cfg)?;
        trainer.restore(&ckpt)?;
        Ok(trainer)
    }

    /// Resume from `path` with a config that must hash identically to the
    /// one stored in the checkpoint, except for `trainer.epochs`.
    pub fn resume(cfg: &ExperimentConfig, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let stored = ExperimentConfig::from_toml_str(&ckpt.config_toml)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut a = stored.clone();
        let mut b = cfg.clone();
        a.trainer.epochs = 0;
        b.trainer.epochs = 0;
        if a != b {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with config {}, resuming with {}",
                stored.hash(),
                cfg.hash()
            )));
        }
        let mut trainer = Trainer::new(cfg)?;
        trainer.restore(&ckpt)?;
        Ok(trainer)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut params = HashMap::new();
        let mut rest = HashMap::new();
        for (k, v) in &ckpt.tensors {
            match k.strip_prefix("param.") {
                Some(name) => {
                    params.insert(name.to_string(), v.clone());
                }
                None => {
                    rest.insert(k.clone(), v.to_dtype(self.dtype)?);
                }
            }
        }
        self.store.load_tensors(&params)?;
        self.opt.load_state(&rest, ckpt.adam_step)?;
        self.sigma = ckpt.sigma.or(self.sigma);
        self.epochs_done = ckpt.epoch;
        Ok(())
    }
}

/// Parsed checkpoint archive.
pub struct Checkpoint {
    pub tensors: HashMap<String, Tensor>,
    pub epoch: usize,
    pub adam_step: u64,
    pub sigma: Option<f64>,
    pub config_hash: String,
    pub config_toml: String,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let corrupt = |why: String| Error::Checkpoint(format!("{} is corrupt: {why}", path.display()));
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| corrupt("no metadata".into()))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| corrupt(format!("missing `{k}`")));
        if get(META_FORMAT)? != FORMAT {
            return Err(corrupt("unknown format tag".into()));
        }
        let epoch = get(META_EPOCH)?.parse().map_err(|_| corrupt("bad epoch".into()))?;
        let adam_step = get(META_STEP)?.parse().map_err(|_| corrupt("bad step".into()))?;
        let sigma = match meta.get(META_SIGMA) {
            Some(s) => Some(s.parse::<f64>().map_err(|_| corrupt("bad sigma".into()))?),
            None => None,
        };
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(Self {
            tensors,
            epoch,
            adam_step,
            sigma,
            config_hash: get(META_HASH)?,
            config_toml: get(META_CONFIG)?,
        })
    }
}

/// Read `train_log.csv` back into reports, split by row kind.
pub fn read_log(path: &Path) -> Result<(Vec<LossReport>, Vec<LossReport>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| contract(format!("bad log field {i}")))
        };
        let r = LossReport {
            epoch: f(1)? as usize,
            step: f(2)? as usize,
            lambda1: f(3)?,
            lambda2: f(4)?,
            lambda3: f(5)?,
            lambda4: f(6)?,
            da: f(7)?,
            align: f(8)?,
            diff: f(9)?,
            orth: f(10)?,
            dacl: f(11)?,
            fd: f(12)?,
            ce: f(13)?,
            dice: f(14)?,
            total: f(15)?,
        };
        match rec.get(0) {
            Some("step") => steps.push(r),
            Some("epoch") => epochs.push(r),
            other => return Err(contract(format!("unknown log row kind {other:?}"))),
        }
    }
    Ok((steps, epochs))
}

/// Foreground probability maps (B, H, W) for a batch, in eval semantics.
pub fn foreground_probs(model: &AdfNet, batch: &BatchTensors) -> Result<Tensor> {
    let out = model.forward(&batch.x_w, &batch.x_n)?;
    Ok(candle_nn::ops::softmax(&out.logits.logits, 1)?
        .narrow(1, 1, 1)?
        .squeeze(1)?
        .to_dtype(DType::F32)?)
}

/// Channel argmax of the logits -> (B, H, W) u8 labels.
pub fn predict_labels(model: &AdfNet, batch: &BatchTensors) -> Result<Tensor> {
    let out = model.forward(&batch.x_w, &batch.x_n)?;
    Ok(out.logits.logits.argmax(D::Minus(3))?.to_dtype(DType::U8)?)
}
