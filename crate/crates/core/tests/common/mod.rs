#![allow(dead_code)]

use candle_core::{Device, Tensor};

use adfseg::ExperimentConfig;

/// 16x16 images and a dozen pairs: enough to exercise every code path in
/// well under a second per epoch.
pub fn tiny_config(epochs: usize) -> ExperimentConfig {
    ExperimentConfig::desk_scale(16)
        .with_overrides(&[
            "data.n_pairs=12".to_string(),
            "data.generator.test_fraction=0.25".into(),
            "trainer.batch_size=4".into(),
            format!("trainer.epochs={epochs}"),
            "trainer.checkpoint_every=1".into(),
        ])
        .expect("tiny overrides are valid")
}

pub fn mat(rows: &[Vec<f64>]) -> Tensor {
    let b = rows.len();
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (b, d), &Device::Cpu).unwrap()
}

pub fn val(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
