mod common;

use std::collections::HashMap;
use std::fs;

use adfseg::data::{to_tensors, Split};
use adfseg::trainer::{read_log, Checkpoint};
use adfseg::{Error, Trainer};
use candle_core::{DType, Device, Tensor};
use common::tiny_config;

fn as_vecs(t: &HashMap<String, Tensor>) -> Vec<(String, Vec<f32>)> {
    let mut out: Vec<(String, Vec<f32>)> = t
        .iter()
        .map(|(k, v)| (k.clone(), v.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn resumed_run_matches_uninterrupted_bitwise() {
    let cfg = tiny_config(4);
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    let full = Trainer::new(&cfg).unwrap().fit(&ds, a.path()).unwrap();

    let half = Trainer::new(&cfg).unwrap().fit_until(&ds, b.path(), 2).unwrap();
    let mut resumed = Trainer::resume(&cfg, &half.checkpoint).unwrap();
    assert_eq!(resumed.epochs_done(), 2);
    let rest = resumed.fit(&ds, b.path()).unwrap();

    assert_eq!(
        fs::read_to_string(&full.log).unwrap(),
        fs::read_to_string(&rest.log).unwrap()
    );
    let ca = Checkpoint::read(&full.checkpoint).unwrap();
    let cb = Checkpoint::read(&rest.checkpoint).unwrap();
    assert_eq!(as_vecs(&ca.tensors), as_vecs(&cb.tensors));
    assert_eq!((ca.epoch, ca.adam_step, ca.sigma), (cb.epoch, cb.adam_step, cb.sigma));
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny_config(2);
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fit = Trainer::new(&cfg).unwrap().fit_until(&ds, dir.path(), 1).unwrap();
    let other = cfg.with_overrides(&["trainer.lr=0.5"]).unwrap();
    assert!(matches!(Trainer::resume(&other, &fit.checkpoint), Err(Error::Checkpoint(_))));
    let longer = cfg.with_overrides(&["trainer.epochs=5"]).unwrap();
    assert!(Trainer::resume(&longer, &fit.checkpoint).is_ok());
}

#[test]
fn corrupt_checkpoints_are_reported() {
    let cfg = tiny_config(1);
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fit = Trainer::new(&cfg).unwrap().fit(&ds, dir.path()).unwrap();

    let garbage = dir.path().join("garbage.safetensors");
    fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    assert!(matches!(Trainer::from_checkpoint(&garbage), Err(Error::Checkpoint(_))));

    let bytes = fs::read(&fit.checkpoint).unwrap();
    let cut = dir.path().join("cut.safetensors");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Trainer::from_checkpoint(&cut), Err(Error::Checkpoint(_))));

    let restored = Trainer::from_checkpoint(&fit.checkpoint).unwrap();
    assert_eq!(restored.config(), &cfg);
    assert_eq!(restored.epochs_done(), 1);
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let cfg = tiny_config(3);
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fit = Trainer::new(&cfg).unwrap().fit(&ds, dir.path()).unwrap();
    let (steps, epochs) = read_log(&fit.log).unwrap();
    assert_eq!(epochs.len(), 3);
    assert_eq!(steps.len(), 3 * (ds.split(Split::Train).len() / 4));
    for r in steps.iter().chain(&epochs) {
        assert!((r.total - r.recomposed_total()).abs() <= 1e-5 * r.total.abs().max(1.0), "{r:?}");
        assert!(r.da >= -1e-6 && r.fd.is_finite() && r.ce >= 0.0 && r.dice >= 0.0);
    }
}

#[test]
fn segmentation_only_objective_when_extras_are_off() {
    let cfg = tiny_config(2)
        .with_overrides(&["trainer.use_da=false", "trainer.use_ts=false", "trainer.alpha_fd_max=0.0"])
        .unwrap();
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fit = Trainer::new(&cfg).unwrap().fit(&ds, dir.path()).unwrap();
    let (steps, _) = read_log(&fit.log).unwrap();
    for r in steps {
        assert_eq!((r.lambda1, r.lambda2), (0.0, 0.0));
        assert!((r.total - (0.5 * r.ce + 0.5 * r.dice)).abs() < 1e-6);
    }
}

#[test]
fn switches_zero_their_weights() {
    let base = tiny_config(10);
    let t = Trainer::new(&base).unwrap();
    let w = t.weights_for_epoch(5).unwrap();
    assert_eq!(w.lambda2, 0.5);
    assert_eq!(w.lambda1, base.alignment.lambda_da);

    let no_da = Trainer::new(&base.with_overrides(&["trainer.use_da=false"]).unwrap()).unwrap();
    assert_eq!(no_da.weights_for_epoch(5).unwrap().lambda1, 0.0);

    let no_ts = Trainer::new(&base.with_overrides(&["trainer.use_ts=false"]).unwrap()).unwrap();
    assert_eq!(no_ts.weights_for_epoch(1).unwrap().lambda2, base.trainer.alpha_fd_max);

    for m in ["w_only", "n_only"] {
        let single = Trainer::new(&base.with_overrides(&[format!("trainer.modalities=\"{m}\"")]).unwrap()).unwrap();
        let w = single.weights_for_epoch(7).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (0.0, 0.0));
    }
    assert!(t.weights_for_epoch(0).is_err());
    assert!(t.weights_for_epoch(11).is_err());
}

#[test]
fn zero_learning_rate_repeats_the_same_losses() {
    let cfg = tiny_config(2);
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.set_lr(0.0);
    let train = ds.split(Split::Train);
    let batch = t.batch(&train[..4]).unwrap();
    let a = t.train_step(&batch, 1, 0).unwrap();
    let b = t.train_step(&batch, 1, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_inputs_name_the_failing_term() {
    let cfg = tiny_config(2);
    let ds = cfg.data.load(cfg.encoder.image_size).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    let mut pairs: Vec<_> = ds.split(Split::Train)[..4].iter().map(|p| (*p).clone()).collect();
    pairs[1].x_w.data[0] = f32::NAN;
    let refs: Vec<_> = pairs.iter().collect();
    let batch = to_tensors(&refs, DType::F32, &Device::Cpu).unwrap();
    match t.train_step(&batch, 1, 3) {
        Err(Error::NonFinite { term, epoch, step }) => {
            assert!(!term.is_empty());
            assert_eq!((epoch, step), (1, 3));
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.total)),
    }
}
