use std::fs;

use adfseg::data::{load_directory, save_dataset, synthesize_dataset, GeneratorConfig, Label, Split};
use adfseg::Error;

fn generator(size: usize) -> GeneratorConfig {
    GeneratorConfig { image_size: size, ..GeneratorConfig::default() }
}

#[test]
fn disk_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(10, 3, &generator(32)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_directory(dir.path(), (32, 32)).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.pairs.iter().zip(&back.pairs) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.mask.data, b.mask.data);
        for (x, y) in a.x_w.data.iter().chain(&a.x_n.data).zip(b.x_w.data.iter().chain(&b.x_n.data)) {
            assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6, "{x} vs {y}");
        }
    }
    assert_eq!(back.split(Split::Test).len(), ds.split(Split::Test).len());
}

#[test]
fn missing_counterpart_names_the_id() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(5, 3, &generator(16)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let victim = &ds.pairs[0].id;
    fs::remove_file(dir.path().join("train/images_n").join(format!("{victim}.png"))).unwrap();
    match load_directory(dir.path(), (16, 16)) {
        Err(Error::Manifest { id, .. }) => assert_eq!(&id, victim),
        other => panic!("expected a manifest error, got {:?}", other.map(|d| d.len())),
    }
}

#[test]
fn resize_on_load_keeps_masks_binary() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(6, 9, &generator(32)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let small = load_directory(dir.path(), (16, 16)).unwrap();
    for p in &small.pairs {
        assert_eq!((p.x_w.height, p.x_w.width), (16, 16));
        assert_eq!(p.mask.data.len(), 256);
        assert!(p.mask.is_binary());
    }
}

#[test]
fn labels_fall_back_to_mask_content() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GeneratorConfig { benign_fraction: 0.5, ..generator(16) };
    let ds = synthesize_dataset(12, 4, &gen).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    fs::remove_file(dir.path().join("manifest.json")).unwrap();
    let back = load_directory(dir.path(), (16, 16)).unwrap();
    for p in &back.pairs {
        let want = if p.mask.foreground() > 0 { Label::Tumor } else { Label::Benign };
        assert_eq!(p.label, want);
    }
}

#[test]
fn synthetic_splits_are_disjoint_and_sized() {
    let ds = synthesize_dataset(20, 1, &generator(16)).unwrap();
    ds.manifest.check_disjoint().unwrap();
    assert_eq!(ds.split(Split::Test).len(), 4);
    assert_eq!(ds.split(Split::Train).len(), 16);
}
