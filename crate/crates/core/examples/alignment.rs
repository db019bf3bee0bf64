//! Gaussian-kernel MMD between two batches as one of them drifts away, and
//! the bandwidth the median heuristic would pick.
//!
//! cargo run --release --example alignment

use adfseg::alignment::{median_heuristic, mmd_loss};
use candle_core::{Device, Tensor};

fn main() -> anyhow::Result<()> {
    let dev = Device::Cpu;
    let g_w = Tensor::randn(0f64, 1.0, (16, 8), &dev)?;
    let noise = Tensor::randn(0f64, 1.0, (16, 8), &dev)?;
    let sigma = median_heuristic(&g_w, &noise)?;
    println!("median-heuristic sigma {sigma:.3}");
    for shift in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0] {
        let g_n = (&noise + shift)?;
        let same = mmd_loss(&g_w, &g_w, sigma)?.to_scalar::<f64>()?;
        let d = mmd_loss(&g_w, &g_n, sigma)?.to_scalar::<f64>()?;
        println!("shift {shift:>4}: mmd {d:.5} (self {same:.1e})");
    }
    Ok(())
}
