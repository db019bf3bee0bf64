//! Pixel metrics (IoU, Dice, sensitivity, G-mean), dataset evaluation and
//! disentanglement diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, to_tensors, BatchMode, Mask, SamplePair};
use crate::disentangle::cosine_rows;
use crate::error::{config, contract, Result};
use crate::model::AdfNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub eval_batch_size: usize,
    pub dump_embeddings: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            eval_batch_size: 8,
            dump_embeddings: true,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_batch_size == 0 {
            return Err(config("metrics.eval_batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pixel counts of a binary prediction against binary ground truth.
/// Any nonzero value counts as foreground.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(contract(format!("pred has {} pixels, gt has {}", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Per-image scores. `se` and `gmean` are `None` when the ground truth has
/// no foreground but the prediction does; they are left out of the means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub iou: f64,
    pub dice: f64,
    pub se: Option<f64>,
    pub gmean: Option<f64>,
}

pub fn metrics_from_counts(c: ConfusionCounts) -> ImageMetrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    if c.tp + c.fn_ == 0 {
        // no lesion in the ground truth
        return if c.fp == 0 {
            ImageMetrics { iou: 1.0, dice: 1.0, se: Some(1.0), gmean: Some(1.0) }
        } else {
            ImageMetrics { iou: 0.0, dice: 0.0, se: None, gmean: None }
        };
    }
    let se = tp / (tp + fn_);
    let spec = if c.tn + c.fp == 0 { 1.0 } else { tn / (tn + fp) };
    ImageMetrics {
        iou: tp / (tp + fp + fn_),
        dice: 2.0 * tp / (2.0 * tp + fp + fn_),
        se: Some(se),
        gmean: Some((se * spec).sqrt()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub iou: f64,
    pub dice: f64,
    pub se: f64,
    pub gmean: f64,
}

pub fn mean_metrics(rows: &[ImageMetrics]) -> MeanMetrics {
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    MeanMetrics {
        iou: mean(rows.iter().map(|r| r.iou).collect()),
        dice: mean(rows.iter().map(|r| r.dice).collect()),
        se: mean(rows.iter().filter_map(|r| r.se).collect()),
        gmean: mean(rows.iter().filter_map(|r| r.gmean).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: Option<String>,
    pub per_image: Vec<PerImage>,
    pub mean: MeanMetrics,
    pub embeddings: Option<PathBuf>,
}

impl EvalReport {
    pub fn from_rows(per_image: Vec<PerImage>) -> Self {
        let rows: Vec<ImageMetrics> = per_image.iter().map(|p| p.metrics).collect();
        Self {
            config_hash: None,
            mean: mean_metrics(&rows),
            per_image,
            embeddings: None,
        }
    }

    /// `<stem>.json` and `<stem>.csv` next to each other.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        let json = stem.with_extension("json");
        let csv_path = stem.with_extension("csv");
        fs::write(&json, serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["id", "tp", "fp", "fn", "tn", "iou", "dice", "se", "gmean"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.per_image {
            w.write_record([
                p.id.clone(),
                p.counts.tp.to_string(),
                p.counts.fp.to_string(),
                p.counts.fn_.to_string(),
                p.counts.tn.to_string(),
                p.metrics.iou.to_string(),
                p.metrics.dice.to_string(),
                opt(p.metrics.se),
                opt(p.metrics.gmean),
            ])?;
        }
        let m = &self.mean;
        w.write_record([
            "mean".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            m.iou.to_string(),
            m.dice.to_string(),
            m.se.to_string(),
            m.gmean.to_string(),
        ])?;
        w.flush()?;
        Ok((json, csv_path))
    }
}

/// Anything that turns a batch of pairs into binary masks.
pub trait Segmenter {
    fn segment(&self, pairs: &[&SamplePair]) -> Result<Vec<Mask>>;
}

/// Returns the ground truth. Useful as an upper-bound sanity check.
pub struct GroundTruthSegmenter;

impl Segmenter for GroundTruthSegmenter {
    fn segment(&self, pairs: &[&SamplePair]) -> Result<Vec<Mask>> {
        Ok(pairs.iter().map(|p| p.mask.clone()).collect())
    }
}

/// Channel argmax of the network logits.
pub struct NetSegmenter<'a> {
    pub model: &'a AdfNet,
    pub dtype: DType,
}

impl Segmenter for NetSegmenter<'_> {
    fn segment(&self, pairs: &[&SamplePair]) -> Result<Vec<Mask>> {
        let batch = to_tensors(pairs, self.dtype, &candle_core::Device::Cpu)?;
        let out = self.model.forward(&batch.x_w, &batch.x_n)?;
        let labels = out.logits.logits.argmax(1)?.to_dtype(DType::U8)?;
        let (b, h, w) = labels.dims3()?;
        let flat = labels.flatten_all()?.to_vec1::<u8>()?;
        Ok((0..b)
            .map(|i| Mask {
                height: h,
                width: w,
                data: flat[i * h * w..(i + 1) * h * w].to_vec(),
            })
            .collect())
    }
}

/// Score every pair in order, batching by `batch_size`.
pub fn evaluate(seg: &dyn Segmenter, pairs: &[&SamplePair], batch_size: usize) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for idx in make_batches(pairs.len(), batch_size, None, BatchMode::Eval)? {
        let chunk: Vec<&SamplePair> = idx.iter().map(|&i| pairs[i]).collect();
        let preds = seg.segment(&chunk)?;
        if preds.len() != chunk.len() {
            return Err(contract("segmenter returned the wrong number of masks"));
        }
        for (p, pred) in chunk.iter().zip(&preds) {
            if (pred.height, pred.width) != (p.mask.height, p.mask.width) {
                return Err(contract(format!("prediction for `{}` has the wrong size", p.id)));
            }
            let counts = confusion(&pred.data, &p.mask.data)?;
            rows.push(PerImage {
                id: p.id.clone(),
                counts,
                metrics: metrics_from_counts(counts),
            });
        }
    }
    Ok(EvalReport::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    /// mean cos(z_ws, z_ns)
    pub cross_shared: f64,
    /// mean over both modalities of |cos(shared, specific)|
    pub intra_abs: f64,
    /// mean cos(z_wp, z_np)
    pub cross_specific: f64,
    pub rows: usize,
}

/// Pooled projector outputs for `pairs`. When `dump` is given, writes one
/// CSV row per (pair, role) with columns id, label, feature_role, dim_*.
pub fn disentangle_diagnostics(
    model: &AdfNet,
    pairs: &[&SamplePair],
    dtype: DType,
    batch_size: usize,
    dump: Option<&Path>,
) -> Result<DiagnosticsSummary> {
    let mut writer = match dump {
        Some(path) => {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            Some(csv::Writer::from_path(path)?)
        }
        None => None,
    };
    let mut header_done = false;
    let (mut cs, mut ia, mut cp) = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    let mut rows = 0usize;
    for idx in make_batches(pairs.len(), batch_size, None, BatchMode::Eval)? {
        let chunk: Vec<&SamplePair> = idx.iter().map(|&i| pairs[i]).collect();
        let batch = to_tensors(&chunk, dtype, &candle_core::Device::Cpu)?;
        let out = model.forward(&batch.x_w, &batch.x_n)?;
        let bundle = out
            .bundle
            .ok_or_else(|| contract("diagnostics need the two-modality model"))?;
        let z = &bundle.pooled;
        let sum = |a: &Tensor, b: &Tensor, abs: bool| -> Result<f64> {
            let c = cosine_rows(a, b)?;
            let c = if abs { c.abs()? } else { c };
            Ok(c.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
        };
        cs += sum(&z.ws, &z.ns, false)?;
        cp += sum(&z.wp, &z.np, false)?;
        ia += 0.5 * (sum(&z.ws, &z.wp, true)? + sum(&z.ns, &z.np, true)?);
        n += chunk.len();
        if let Some(w) = writer.as_mut() {
            let roles = [("z_ws", &z.ws), ("z_wp", &z.wp), ("z_ns", &z.ns), ("z_np", &z.np)];
            let dim = z.ws.dim(1)?;
            if !header_done {
                let mut h = vec!["id".to_string(), "label".into(), "feature_role".into()];
                h.extend((0..dim).map(|d| format!("dim_{d}")));
                w.write_record(&h)?;
                header_done = true;
            }
            let vals: Vec<Vec<Vec<f64>>> = roles
                .iter()
                .map(|(_, t)| t.to_dtype(DType::F64)?.to_vec2::<f64>())
                .collect::<candle_core::Result<_>>()?;
            for (i, p) in chunk.iter().enumerate() {
                for (r, (role, _)) in roles.iter().enumerate() {
                    let mut rec = vec![
                        p.id.clone(),
                        serde_json::to_value(p.label)?.as_str().unwrap_or_default().to_string(),
                        role.to_string(),
                    ];
                    rec.extend(vals[r][i].iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                    rows += 1;
                }
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let n = n.max(1) as f64;
    Ok(DiagnosticsSummary {
        cross_shared: cs / n,
        intra_abs: ia / n,
        cross_specific: cp / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones() {
        let c = confusion(&[1, 1, 1, 1], &[1, 1, 1, 1]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 0 });
        let m = metrics_from_counts(c);
        assert_eq!((m.iou, m.dice, m.se, m.gmean), (1.0, 1.0, Some(1.0), Some(1.0)));
    }

    #[test]
    fn complement_has_no_true_hits() {
        let gt = [1u8, 0, 1, 0, 0, 1];
        let pred: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn one_of_each() {
        let m = metrics_from_counts(ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.dice, 0.5);
        assert_eq!(m.se, Some(0.5));
        assert!((m.gmean.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_ground_truth_conventions() {
        let m = metrics_from_counts(ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
        assert_eq!(m.dice, 1.0);
        let m = metrics_from_counts(ConfusionCounts { tp: 0, fp: 2, fn_: 0, tn: 7 });
        assert_eq!((m.iou, m.dice, m.se, m.gmean), (0.0, 0.0, None, None));
        let mean = mean_metrics(&[m, metrics_from_counts(ConfusionCounts { tp: 1, fp: 0, fn_: 1, tn: 2 })]);
        assert_eq!(mean.se, 0.5);
        assert!((mean.dice - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(confusion(&[1], &[1, 0]).is_err());
    }
}
