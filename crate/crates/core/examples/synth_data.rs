//! Generate a synthetic paired dataset, write it as PNGs and read it back.
//!
//! cargo run --release --example synth_data -- [out_dir] [n_pairs] [image_size]

use std::path::PathBuf;

use adfseg::data::{load_directory, save_dataset, synthesize_dataset, GeneratorConfig, Split};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("runs/synth"));
    let n: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let size: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(64);

    let gen = GeneratorConfig { image_size: size, ..GeneratorConfig::default() };
    let ds = synthesize_dataset(n, 7, &gen)?;
    save_dataset(&ds, &out)?;
    let back = load_directory(&out, (size, size))?;

    let mut worst = 0.0f32;
    for (a, b) in ds.pairs.iter().zip(&back.pairs) {
        for (x, y) in a.x_w.data.iter().chain(&a.x_n.data).zip(b.x_w.data.iter().chain(&b.x_n.data)) {
            worst = worst.max((x - y).abs());
        }
        assert_eq!(a.mask.data, b.mask.data, "mask of {} changed on disk", a.id);
    }
    let fg: Vec<f64> = ds.pairs.iter().map(|p| p.mask.foreground_fraction()).collect();
    let tumors = fg.iter().filter(|&&f| f > 0.0).count();
    println!(
        "{} pairs ({} train / {} test) in {}",
        ds.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Test).len(),
        out.display()
    );
    println!(
        "{tumors} with lesions, mean foreground {:.3}, worst pixel round-trip error {worst:.5}",
        fg.iter().sum::<f64>() / fg.len() as f64
    );
    Ok(())
}
