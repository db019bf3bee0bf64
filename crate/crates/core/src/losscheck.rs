//! Self-check of every loss and metric against the plain-loop oracles,
//! plus central finite-difference gradient checks. Needs no data and no
//! trained model.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{attention_pool, global_average, global_descriptor, mmd_loss, AttentionScorer, MultiScaleFeature};
use crate::disentangle::{loss_align, loss_dacl, loss_diff, loss_fd, loss_orth, FdWeights, PooledBundle};
use crate::encoder::Modality;
use crate::error::Result;
use crate::metrics::{confusion, metrics_from_counts};
use crate::oracle::{self, Mat};
use crate::trainer::{lambda2_schedule, seg_losses};

pub const ORACLE_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
/// Cosine norms carry a 1e-8 guard, so boundary values are exact only to
/// about that order.
pub const BOUNDARY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub kind: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &str, kind: &'static str, cases: usize, max_err: f64, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            cases,
            max_err,
            tol,
            pass: max_err.is_finite() && max_err <= tol,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheckReport {
    pub rows: Vec<CheckRow>,
}

impl LossCheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn kind_pass(&self, kind: &str) -> bool {
        self.rows.iter().filter(|r| r.kind == kind).all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:<9} {:>6} {:>12} {:>9}  result\n", "check", "kind", "cases", "max_err", "tol");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:<9} {:>6} {:>12.3e} {:>9.0e}  {}",
                r.name,
                r.kind,
                r.cases,
                r.max_err,
                r.tol,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn t2(m: &Mat) -> Result<Tensor> {
    let (r, c) = (m.len(), m[0].len());
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (r, c), &Device::Cpu)?)
}

fn val(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn bundle(ws: &Mat, wp: &Mat, ns: &Mat, np: &Mat) -> Result<PooledBundle> {
    Ok(PooledBundle {
        ws: t2(ws)?,
        wp: t2(wp)?,
        ns: t2(ns)?,
        np: t2(np)?,
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Tensor losses vs loop oracles on `cases` random inputs each.
pub fn oracle_checks(cases: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = [0.0f64; 9];
    for _ in 0..cases {
        let b = rng.random_range(2..=4);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..1.0);
        let sigma = rng.random_range(0.5..3.0);
        let ws = rand_mat(&mut rng, b, d);
        let wp = rand_mat(&mut rng, b, d);
        let ns = rand_mat(&mut rng, b, d);
        let np = rand_mat(&mut rng, b, d);
        let z = bundle(&ws, &wp, &ns, &np)?;

        err[0] = err[0].max(rel(val(&mmd_loss(&z.ws, &z.ns, sigma)?)?, oracle::mmd(&ws, &ns, sigma)));
        err[1] = err[1].max(rel(val(&loss_align(&z.ws, &z.ns)?)?, oracle::align(&ws, &ns)));
        err[2] = err[2].max(rel(val(&loss_diff(&z.wp, &z.np)?)?, oracle::diff(&wp, &np)));
        err[3] = err[3].max(rel(
            val(&loss_orth(&z.ws, &z.wp, &z.ns, &z.np)?)?,
            oracle::orth(&ws, &wp, &ns, &np),
        ));
        let sym = rng.random_bool(0.5);
        err[4] = err[4].max(rel(
            val(&loss_dacl(&z, tau, sym)?)?,
            oracle::dacl(&ws, &wp, &ns, &np, tau, sym),
        ));
        let w = [rng.random(), rng.random(), rng.random(), rng.random()];
        let fw = FdWeights { alpha: w[0], beta: w[1], gamma: w[2], delta: w[3] };
        let (fd, _) = loss_fd(&z, fw, tau, false)?;
        err[5] = err[5].max(rel(val(&fd)?, oracle::fd(&ws, &wp, &ns, &np, w, tau)));

        // token pooling on one (B, N, F) map
        let n = rng.random_range(1..=6);
        let maps: Vec<Mat> = (0..b).map(|_| rand_mat(&mut rng, n, d)).collect();
        let flat: Vec<f64> = maps.iter().flatten().flatten().copied().collect();
        let f = MultiScaleFeature {
            data: Tensor::from_vec(flat, (b, n, d), &Device::Cpu)?,
            modality: Modality::W,
        };
        let wv: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bias: f64 = rng.random_range(-1.0..1.0);
        let scorer = AttentionScorer::from_linear(Linear::new(
            Tensor::from_vec(wv.clone(), (1, d), &Device::Cpu)?,
            Some(Tensor::new(&[bias], &Device::Cpu)?),
        ));
        let avg: Mat = global_average(&f)?.to_vec2()?;
        let (weighted, att) = attention_pool(&f, &scorer)?;
        let (weighted, att): (Mat, Mat) = (weighted.to_vec2()?, att.to_vec2()?);
        for i in 0..b {
            let m = oracle::token_mean(&maps[i]);
            let (ow, oa) = oracle::attention_pool(&maps[i], &wv, bias);
            for k in 0..d {
                err[6] = err[6].max((avg[i][k] - m[k]).abs());
                err[7] = err[7].max((weighted[i][k] - ow[k]).abs());
            }
            for k in 0..n {
                err[7] = err[7].max((att[i][k] - oa[k]).abs());
            }
        }

        // segmentation losses on a random 8x8 batch
        let (h, wd) = (8, 8);
        let logits: Vec<[Mat; 2]> = (0..b)
            .map(|_| [rand_mat(&mut rng, h, wd), rand_mat(&mut rng, h, wd)].map(|m| m.iter().map(|r| r.iter().map(|v| v * 3.0).collect()).collect()))
            .collect();
        let mask: Vec<Vec<Vec<u8>>> = (0..b)
            .map(|_| (0..h).map(|_| (0..wd).map(|_| rng.random_range(0..2u8)).collect()).collect())
            .collect();
        let lt = Tensor::from_vec(
            logits.iter().flat_map(|c| c.iter().flatten().flatten().copied()).collect::<Vec<f64>>(),
            (b, 2, h, wd),
            &Device::Cpu,
        )?;
        let mt = Tensor::from_vec(
            mask.iter().flatten().flatten().map(|&v| v as u32).collect::<Vec<u32>>(),
            (b, h, wd),
            &Device::Cpu,
        )?;
        let (ce, dice) = seg_losses(&lt, &mt, 1.0)?;
        let (oce, odice) = oracle::seg_losses(&logits, &mask, 1.0);
        err[8] = err[8].max(rel(val(&ce)?, oce)).max(rel(val(&dice)?, odice));
    }
    let names = [
        "mmd_loss",
        "loss_align",
        "loss_diff",
        "loss_orth",
        "loss_dacl",
        "loss_fd",
        "global_average",
        "attention_pool",
        "seg_losses",
    ];
    Ok(names
        .iter()
        .zip(err)
        .map(|(n, e)| CheckRow::new(n, "oracle", cases, e, ORACLE_TOL))
        .collect())
}

/// Exact closed-form schedule over a 150-epoch run, and 100 random masks
/// against brute-force pixel sets. Both must match exactly.
pub fn exact_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let epochs = 150;
    let mut bad = 0.0;
    for (max, init) in [(1.0, 1.0), (0.5, 2.0), (0.3, 0.7)] {
        for e in 1..=epochs {
            if lambda2_schedule(e, epochs, max, init)?.to_bits() != oracle::lambda2(e, epochs, max, init).to_bits() {
                bad += 1.0;
            }
        }
    }
    rows.push(CheckRow::new("lambda2_schedule", "exact", 3 * epochs, bad, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut bad = 0.0;
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        // mix of dense, sparse and empty masks
        let p_gt = [0.0, 0.1, 0.5, 1.0][i % 4];
        let p_pred = rng.random_range(0.0..1.0);
        let gt: Vec<Vec<u8>> = (0..h).map(|_| (0..w).map(|_| rng.random_bool(p_gt) as u8).collect()).collect();
        let pred: Vec<Vec<u8>> = (0..h).map(|_| (0..w).map(|_| rng.random_bool(p_pred) as u8).collect()).collect();
        let c = confusion(&pred.concat(), &gt.concat())?;
        let m = metrics_from_counts(c);
        let o = oracle::overlap_metrics(&oracle::pixel_sets(&pred, &gt));
        if (m.iou, m.dice, m.se, m.gmean) != o {
            bad += 1.0;
        }
    }
    rows.push(CheckRow::new("metrics_vs_pixel_sets", "exact", 100, bad, 0.0));
    Ok(rows)
}

/// Largest elementwise relative error between autodiff and central
/// differences of `f` with respect to every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars: Vec<Var> = inputs.iter().map(Var::from_tensor).collect::<candle_core::Result<_>>()?;
    let xs: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&xs)?.backward()?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let shape = inputs[i].shape().clone();
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; shape.elem_count()],
        };
        let base: Vec<f64> = inputs[i].flatten_all()?.to_vec1()?;
        for k in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = base.clone();
                p[k] += delta;
                let mut args = inputs.to_vec();
                args[i] = Tensor::from_vec(p, shape.clone(), &Device::Cpu)?;
                val(&f(&args)?)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Finite-difference checks on random (B=2, D=8) inputs.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let (b, d) = (2, 8);
    let mut four = || -> Result<Vec<Tensor>> { (0..4).map(|_| rand_t(&mut rng, &[b, d], 1.0)).collect() };
    let z4 = four()?;
    let pb = |x: &[Tensor]| PooledBundle {
        ws: x[0].clone(),
        wp: x[1].clone(),
        ns: x[2].clone(),
        np: x[3].clone(),
    };
    let mut rows = Vec::new();
    let mut push = |name: &str, e: f64| rows.push(CheckRow::new(name, "gradient", 1, e, GRAD_TOL));

    push("mmd_loss", gradcheck(&z4[..2], |x| mmd_loss(&x[0], &x[1], 2.0))?);
    push("loss_align", gradcheck(&[z4[0].clone(), z4[2].clone()], |x| loss_align(&x[0], &x[1]))?);
    push("loss_diff", gradcheck(&[z4[1].clone(), z4[3].clone()], |x| loss_diff(&x[0], &x[1]))?);
    push("loss_orth", gradcheck(&z4, |x| loss_orth(&x[0], &x[1], &x[2], &x[3]))?);
    push("loss_dacl", gradcheck(&z4, |x| loss_dacl(&pb(x), 0.07, false))?);
    push("loss_dacl_symmetric", gradcheck(&z4, |x| loss_dacl(&pb(x), 0.07, true))?);
    let w = FdWeights { alpha: 1.0 / 3.0, beta: 1.0 / 3.0, gamma: 1.0 / 3.0, delta: 0.01 };
    push("loss_fd", gradcheck(&z4, |x| Ok(loss_fd(&pb(x), w, 0.07, false)?.0))?);

    // alignment through the descriptor, including the scorer weights
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda);
    let inputs = vec![
        rand_t(&mut rng, &[b, 3, d], 1.0)?,
        rand_t(&mut rng, &[b, 3, d], 1.0)?,
        rand_t(&mut rng, &[1, d], 1.0)?,
        rand_t(&mut rng, &[1], 1.0)?,
    ];
    push(
        "mmd_through_descriptor",
        gradcheck(&inputs, |x| {
            let scorer = AttentionScorer::from_linear(Linear::new(x[2].clone(), Some(x[3].clone())));
            let fw = MultiScaleFeature { data: x[0].clone(), modality: Modality::W };
            let fn_ = MultiScaleFeature { data: x[1].clone(), modality: Modality::N };
            let gw = global_descriptor(&fw, &scorer)?.global;
            let gn = global_descriptor(&fn_, &scorer)?.global;
            mmd_loss(&gw, &gn, 2.0)
        })?,
    );

    let logits = rand_t(&mut rng, &[b, 2, 4, 4], 2.0)?;
    let mask_v: Vec<u32> = (0..b * 16).map(|_| rng.random_range(0..2u32)).collect();
    let mask = Tensor::from_vec(mask_v, (b, 4, 4), &Device::Cpu)?;
    push("seg_ce", gradcheck(std::slice::from_ref(&logits), |x| Ok(seg_losses(&x[0], &mask, 1.0)?.0))?);
    push("seg_dice", gradcheck(std::slice::from_ref(&logits), |x| Ok(seg_losses(&x[0], &mask, 1.0)?.1))?);
    Ok(rows)
}

/// Hand-computable boundary cases, to within the cosine norm guard.
pub fn boundary_checks() -> Result<Vec<CheckRow>> {
    let e = |rows: &[&[f64]]| -> Result<Tensor> {
        let m: Mat = rows.iter().map(|r| r.to_vec()).collect();
        t2(&m)
    };
    let mut out = Vec::new();
    let x = e(&[&[1.0, 2.0, -1.0], &[0.5, -3.0, 2.0]])?;
    let neg = x.neg()?;
    let ortho = e(&[&[2.0, -1.0, 0.0], &[3.0, 0.5, 0.0]])?;
    let ex = e(&[&[1.0, 0.0, 0.0, 0.0]])?;
    let ey = e(&[&[0.0, 1.0, 0.0, 0.0]])?;
    let ez = e(&[&[0.0, 0.0, 1.0, 0.0]])?;
    let ew = e(&[&[0.0, 0.0, 0.0, 1.0]])?;
    let mut c = |name: &str, got: f64, want: f64| {
        out.push(CheckRow::new(name, "boundary", 1, (got - want).abs(), BOUNDARY_TOL));
    };
    c("mmd(X,X)=0", val(&mmd_loss(&x, &x, 1.0)?)?, 0.0);
    let z = e(&[&[0.0], &[0.0]])?;
    let o = e(&[&[1.0], &[1.0]])?;
    c("mmd two-point", val(&mmd_loss(&z, &o, 1.0)?)?, 2.0 - 2.0 * (-0.5f64).exp());
    c("align(x,x)=0", val(&loss_align(&x, &x)?)?, 0.0);
    c("align(x,-x)=1", val(&loss_align(&x, &neg)?)?, 1.0);
    c("diff(x,-x)=0", val(&loss_diff(&x, &neg)?)?, 0.0);
    c("diff(x,x)=1", val(&loss_diff(&x, &x)?)?, 1.0);
    let x_ortho = e(&[&[1.0, 2.0, 0.0], &[-1.0, 6.0, 0.0]])?;
    c("diff(orthogonal)=1/2", val(&loss_diff(&ortho, &x_ortho)?)?, 0.5);
    c("orth(orthogonal)=0", val(&loss_orth(&ortho, &x_ortho, &x_ortho, &ortho)?)?, 0.0);
    c("orth(same)=1", val(&loss_orth(&x, &x, &ortho, &ortho)?)?, 1.0);
    c("orth(-x, perp)=1/2", val(&loss_orth(&ortho, &ortho.neg()?, &x_ortho, &ortho)?)?, 0.5);
    let pbo = PooledBundle { ws: ex.clone(), wp: ey.clone(), ns: ez.clone(), np: ew.clone() };
    c("dacl orthonormal B=1 = ln 3", val(&loss_dacl(&pbo, 1.0, false)?)?, 3f64.ln());
    let zero = FdWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, delta: 0.0 };
    let pbx = PooledBundle { ws: x.clone(), wp: neg.clone(), ns: ortho.clone(), np: x.clone() };
    c("fd with zero weights", val(&loss_fd(&pbx, zero, 0.07, false)?.0)?, 0.0);
    // sub-losses (0, 1, 1/2, ln 3): align 0, diff 1, orth 1/2, dacl ln 3
    let known = PooledBundle { ws: ex.clone(), wp: ey.clone(), ns: ex.clone(), np: ey.clone() };
    let (_, rep) = loss_fd(&known, FdWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, delta: 0.0 }, 1.0, false)?;
    c("fd known align=0", rep.align, 0.0);
    c("fd known diff=1", rep.diff, 1.0);
    let third = 1.0 / 3.0;
    let r = PooledBundle {
        ws: ex.clone(),
        wp: (&ex + &ey)?,
        ns: ex.clone(),
        np: (&ex + &ey)?,
    };
    let (fdv, rep) = loss_fd(&r, FdWeights { alpha: third, beta: third, gamma: third, delta: 0.01 }, 0.07, false)?;
    c(
        "fd = weighted sum of parts",
        val(&fdv)?,
        third * (rep.align + rep.diff + rep.orth) + 0.01 * rep.dacl,
    );
    Ok(out)
}

pub fn run_all(seed: u64, cases: usize) -> Result<LossCheckReport> {
    let mut rows = boundary_checks()?;
    rows.extend(oracle_checks(cases, seed)?);
    rows.extend(exact_checks(seed)?);
    rows.extend(gradient_checks(seed)?);
    Ok(LossCheckReport { rows })
}
