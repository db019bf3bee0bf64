//! Shared/specific projections of the deep features and the cosine-geometry
//! losses that shape them: cross-modal shared alignment, cross-modal
//! specific differentiation, intra-modal orthogonality, and the
//! disentangle-aware contrastive term.
//!
//! All losses take per-sample vectors (B, F). By default these are token
//! means of the projected maps; `Pooling::Flatten` uses the flattened maps.

use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::DeepFeatureMap;
use crate::error::{config, contract, Result};
use crate::params::{Init, Mlp, ParamStore};

/// Added to vector norms in every cosine.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    /// Average the w-anchored and n-anchored contrastive terms.
    pub symmetrize_dacl: bool,
    pub pooling: Pooling,
    /// Layers per projector; 1 is a plain linear map.
    pub projector_depth: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            delta: 0.01,
            tau: 0.07,
            symmetrize_dacl: false,
            pooling: Pooling::Mean,
            projector_depth: 2,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{k} must be >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.projector_depth == 0 {
            return Err(config("projector_depth must be >= 1"));
        }
        Ok(())
    }
}

/// The four per-sample vectors the losses operate on, each (B, F).
#[derive(Debug, Clone)]
pub struct PooledBundle {
    pub ws: Tensor,
    pub wp: Tensor,
    pub ns: Tensor,
    pub np: Tensor,
}

#[derive(Debug, Clone)]
pub struct DisentangledBundle {
    /// Token maps, each (B, N, D).
    pub z_ws: Tensor,
    pub z_wp: Tensor,
    pub z_ns: Tensor,
    pub z_np: Tensor,
    pub pooled: PooledBundle,
}

fn pool(z: &Tensor, pooling: Pooling) -> Result<Tensor> {
    Ok(match pooling {
        Pooling::Mean => z.mean(1)?,
        Pooling::Flatten => z.flatten_from(1)?,
    })
}

/// The four projectors f_s^(w), f_p^(w), f_s^(n), f_p^(n).
pub struct Disentangler {
    shared_w: Mlp,
    specific_w: Mlp,
    shared_n: Mlp,
    specific_n: Mlp,
    pooling: Pooling,
}

impl Disentangler {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &FdConfig, init: Init) -> Result<Self> {
        let mut mk = |name: &str| Mlp::new(store, name, dim, dim, dim, cfg.projector_depth, init);
        Ok(Self {
            shared_w: mk("proj.shared_w")?,
            specific_w: mk("proj.specific_w")?,
            shared_n: mk("proj.shared_n")?,
            specific_n: mk("proj.specific_n")?,
            pooling: cfg.pooling,
        })
    }

    pub fn project(&self, f_w: &DeepFeatureMap, f_n: &DeepFeatureMap) -> Result<DisentangledBundle> {
        if f_w.data.dims() != f_n.data.dims() {
            return Err(contract(format!(
                "deep maps differ in shape: {:?} vs {:?}",
                f_w.data.dims(),
                f_n.data.dims()
            )));
        }
        let z_ws = self.shared_w.forward(&f_w.data)?;
        let z_wp = self.specific_w.forward(&f_w.data)?;
        let z_ns = self.shared_n.forward(&f_n.data)?;
        let z_np = self.specific_n.forward(&f_n.data)?;
        let pooled = PooledBundle {
            ws: pool(&z_ws, self.pooling)?,
            wp: pool(&z_wp, self.pooling)?,
            ns: pool(&z_ns, self.pooling)?,
            np: pool(&z_np, self.pooling)?,
        };
        Ok(DisentangledBundle {
            z_ws,
            z_wp,
            z_ns,
            z_np,
            pooled,
        })
    }
}

fn norms(x: &Tensor) -> Result<Tensor> {
    Ok((x.sqr()?.sum(D::Minus1)?.sqrt()? + COSINE_EPS)?)
}

/// Row-wise cosine of two (B, F) batches -> (B,).
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(contract(format!("cosine of {:?} and {:?}", a.dims(), b.dims())));
    }
    let dot = (a * b)?.sum(D::Minus1)?;
    Ok((dot / (norms(a)? * norms(b)?)?)?)
}

/// All-pairs cosine: out[i, j] = cos(a_i, b_j), shape (B, B').
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let an = a.broadcast_div(&norms(a)?.unsqueeze(1)?)?;
    let bn = b.broadcast_div(&norms(b)?.unsqueeze(1)?)?;
    Ok(an.matmul(&bn.t()?)?)
}

/// ½(1 − mean_b cos(z_ws, z_ns)).
pub fn loss_align(z_ws: &Tensor, z_ns: &Tensor) -> Result<Tensor> {
    let m = cosine_rows(z_ws, z_ns)?.mean_all()?;
    Ok(((1.0 - m)? * 0.5)?)
}

/// ½(1 + mean_b cos(z_wp, z_np)).
pub fn loss_diff(z_wp: &Tensor, z_np: &Tensor) -> Result<Tensor> {
    let m = cosine_rows(z_wp, z_np)?.mean_all()?;
    Ok(((m + 1.0)? * 0.5)?)
}

/// (1/2B) Σ_b [cos²(z_ws, z_wp) + cos²(z_ns, z_np)].
pub fn loss_orth(z_ws: &Tensor, z_wp: &Tensor, z_ns: &Tensor, z_np: &Tensor) -> Result<Tensor> {
    let w = cosine_rows(z_ws, z_wp)?.sqr()?;
    let n = cosine_rows(z_ns, z_np)?.sqr()?;
    Ok(((w.mean_all()? + n.mean_all()?)? * 0.5)?)
}

/// Contrastive term anchored on `anchor`: positive is `positive[b]`; the
/// denominator runs over every m of `positive`, `neg_a`, `neg_b`.
fn anchored_contrast(
    anchor: &Tensor,
    positive: &Tensor,
    neg_a: &Tensor,
    neg_b: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let s_pos = (cosine_matrix(anchor, positive)? / tau)?;
    let s_a = (cosine_matrix(anchor, neg_a)? / tau)?;
    let s_b = (cosine_matrix(anchor, neg_b)? / tau)?;
    let logits = Tensor::cat(&[&s_pos, &s_a, &s_b], 1)?;
    let log_den = logits.log_sum_exp(1)?;
    let b = anchor.dim(0)?;
    let eye = Tensor::eye(b, s_pos.dtype(), s_pos.device())?;
    let pos = (s_pos * eye)?.sum(1)?;
    Ok((log_den - pos)?.mean_all()?)
}

/// Disentangle-aware contrastive loss, anchored on z_ws unless `symmetric`.
pub fn loss_dacl(z: &PooledBundle, tau: f64, symmetric: bool) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(config(format!("tau must be > 0, got {tau}")));
    }
    if z.ws.dim(0)? == 0 {
        return Err(contract("contrastive loss needs B >= 1"));
    }
    let w = anchored_contrast(&z.ws, &z.ns, &z.wp, &z.np, tau)?;
    if !symmetric {
        return Ok(w);
    }
    let n = anchored_contrast(&z.ns, &z.ws, &z.np, &z.wp, tau)?;
    Ok(((w + n)? * 0.5)?)
}

/// Scalar values of the four sub-losses and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub align: f64,
    pub diff: f64,
    pub orth: f64,
    pub dacl: f64,
    pub fd: f64,
}

/// Effective weights of the four sub-losses after ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl From<&FdConfig> for FdWeights {
    fn from(c: &FdConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            delta: c.delta,
        }
    }
}

/// α·Align + β·Diff + γ·Orth + δ·DACL.
pub fn loss_fd(
    z: &PooledBundle,
    weights: FdWeights,
    tau: f64,
    symmetric: bool,
) -> Result<(Tensor, FdReport)> {
    let align = loss_align(&z.ws, &z.ns)?;
    let diff = loss_diff(&z.wp, &z.np)?;
    let orth = loss_orth(&z.ws, &z.wp, &z.ns, &z.np)?;
    let dacl = loss_dacl(z, tau, symmetric)?;
    let total = ((((&align * weights.alpha)? + (&diff * weights.beta)?)?
        + (&orth * weights.gamma)?)?
        + (&dacl * weights.delta)?)?;
    let scalar = |t: &Tensor| -> Result<f64> {
        Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    };
    let report = FdReport {
        align: scalar(&align)?,
        diff: scalar(&diff)?,
        orth: scalar(&orth)?,
        dacl: scalar(&dacl)?,
        fd: scalar(&total)?,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    // the norm guard shifts exact boundary values by O(1e-8)
    const BOUNDARY_TOL: f64 = 1e-7;

    fn m(rows: &[&[f64]]) -> Tensor {
        let b = rows.len();
        let f = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (b, f), &Device::Cpu).unwrap()
    }

    fn s(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn align_boundaries() {
        let a = m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]);
        assert!(s(loss_align(&a, &a).unwrap()).abs() < BOUNDARY_TOL);
        let neg = a.neg().unwrap();
        assert!((s(loss_align(&a, &neg).unwrap()) - 1.0).abs() < BOUNDARY_TOL);
    }

    #[test]
    fn diff_boundaries() {
        let a = m(&[&[1.0, 0.0], &[0.3, 0.7]]);
        let neg = a.neg().unwrap();
        assert!(s(loss_diff(&a, &neg).unwrap()).abs() < BOUNDARY_TOL);
        assert!((s(loss_diff(&a, &a).unwrap()) - 1.0).abs() < BOUNDARY_TOL);
        let x = m(&[&[1.0, 0.0]]);
        let y = m(&[&[0.0, 4.0]]);
        assert!((s(loss_diff(&x, &y).unwrap()) - 0.5).abs() < BOUNDARY_TOL);
    }

    #[test]
    fn orth_boundaries() {
        let ws = m(&[&[1.0, 0.0, 0.0]]);
        let wp = m(&[&[0.0, 1.0, 0.0]]);
        let ns = m(&[&[0.0, 0.0, 2.0]]);
        let np = m(&[&[3.0, 0.0, 0.0]]);
        assert!(s(loss_orth(&ws, &wp, &ns, &np).unwrap()).abs() < BOUNDARY_TOL);
        assert!((s(loss_orth(&ws, &ws, &ns, &ns).unwrap()) - 1.0).abs() < BOUNDARY_TOL);
        let half = loss_orth(&ws, &ws.neg().unwrap(), &ns, &np).unwrap();
        assert!((s(half) - 0.5).abs() < BOUNDARY_TOL);
    }

    #[test]
    fn dacl_orthogonal_single_sample_is_log3() {
        let z = PooledBundle {
            ws: m(&[&[1.0, 0.0, 0.0, 0.0]]),
            wp: m(&[&[0.0, 1.0, 0.0, 0.0]]),
            ns: m(&[&[0.0, 0.0, 1.0, 0.0]]),
            np: m(&[&[0.0, 0.0, 0.0, 1.0]]),
        };
        let v = s(loss_dacl(&z, 1.0, false).unwrap());
        assert!((v - 3f64.ln()).abs() < BOUNDARY_TOL);
        assert!(matches!(loss_dacl(&z, 0.0, false), Err(crate::Error::Config(_))));
    }

    #[test]
    fn fd_zero_weights_and_known_parts() {
        // align = 0, diff = 1, orth = 0.5, dacl computed directly.
        let ws = m(&[&[1.0, 0.0, 0.0]]);
        let z = PooledBundle {
            ws: ws.clone(),
            ns: ws.clone(),
            wp: ws.neg().unwrap(),
            np: ws.neg().unwrap(),
        };
        let zero = FdWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, delta: 0.0 };
        let (t, _) = loss_fd(&z, zero, 0.07, false).unwrap();
        assert_eq!(s(t), 0.0);
        let (t, r) = loss_fd(&z, (&FdConfig::default()).into(), 0.07, false).unwrap();
        assert!(r.align.abs() < BOUNDARY_TOL);
        assert!((r.diff - 1.0).abs() < BOUNDARY_TOL);
        assert!((r.orth - 1.0).abs() < BOUNDARY_TOL);
        let expect = (r.diff + r.orth) / 3.0 + 0.01 * r.dacl;
        assert!((s(t) - expect).abs() < BOUNDARY_TOL);
    }

    #[test]
    fn identity_projectors_copy_inputs() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(0, DType::F64, &dev);
        let cfg = FdConfig { projector_depth: 1, ..Default::default() };
        let dis = Disentangler::new(&mut store, 4, &cfg, Init::Identity).unwrap();
        let data = Tensor::arange(0.0f64, 24.0, &dev).unwrap().reshape((2, 3, 4)).unwrap();
        let f = DeepFeatureMap { data: data.clone(), modality: crate::encoder::Modality::W };
        let g = DeepFeatureMap { data: data.clone(), modality: crate::encoder::Modality::N };
        let b = dis.project(&f, &g).unwrap();
        for z in [&b.z_ws, &b.z_wp, &b.z_ns, &b.z_np] {
            let diff = (z - &data).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
        }
        assert_eq!(b.pooled.ws.dims(), &[2, 4]);
    }
}
