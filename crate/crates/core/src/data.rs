//! Paired-modality samples: a seeded synthetic generator with planted
//! shared/specific factors, PNG directory ingestion, and batching.
//!
//! Modality `w` is the primary one; masks are annotated in its pixel frame.
//! Modality `n` may be shifted by a small planted offset to mimic imperfect
//! registration between the two acquisitions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub const CHANNELS: usize = 3;
pub const SHARED_DIM: usize = 10;
pub const SPECIFIC_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Tumor,
}

/// Channel-last float image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    fn to_rgb8(&self) -> image::RgbImage {
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length matches dimensions")
    }

    fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

/// Binary mask, one byte per pixel, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.data.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

/// Latent record behind a synthetic pair.
///
/// `shared` = [present, cx, cy, rx, ry, theta, a2, a3, phase, visibility_dir]
/// `specific_w` = [illum_dir, illum_gain, tint_r, tint_b]
/// `specific_n` = [vessel_orient, vessel_freq, vessel_phase, vessel_gain]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFactors {
    pub shared: Vec<f32>,
    pub specific_w: Vec<f32>,
    pub specific_n: Vec<f32>,
    pub shift: (i32, i32),
    pub noise_seed: u64,
}

impl PlantedFactors {
    pub fn with_zero_specific(&self) -> Self {
        Self {
            specific_w: vec![0.0; SPECIFIC_DIM],
            specific_n: vec![0.0; SPECIFIC_DIM],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub x_w: Image,
    pub x_n: Image,
    pub mask: Mask,
    pub label: Label,
    pub factors: Option<PlantedFactors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: Option<PathBuf>,
    pub image_size: (usize, usize),
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.id.as_str())
            .collect();
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.split == Split::Test && train.contains(e.id.as_str()))
        {
            return Err(Error::Manifest {
                id: e.id.clone(),
                reason: "id appears in both train and test splits".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// In-memory dataset: the manifest plus the pairs it lists, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SamplePair> {
        self.manifest
            .entries
            .iter()
            .zip(&self.pairs)
            .filter(|(e, _)| e.split == split)
            .map(|(_, p)| p)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Lesion semi-axes, as fractions of the image side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Bound on the summed amplitude of the boundary harmonics.
    pub shape_jitter: f64,
    pub benign_fraction: f64,
    pub test_fraction: f64,
    /// 0 gives both modalities the full lesion; towards 1 each modality
    /// shows only its own half of the lesion clearly.
    pub complementarity: f64,
    pub lesion_contrast: f64,
    pub illumination_strength: f64,
    pub vessel_strength: f64,
    /// Vessel stripes per image side at unit frequency gain.
    pub vessel_cycles: f64,
    pub noise_std: f64,
    /// Maximum |shift| in pixels applied to modality n.
    pub misalignment_px: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            radius_min: 0.12,
            radius_max: 0.25,
            shape_jitter: 0.15,
            benign_fraction: 0.1,
            test_fraction: 0.2,
            complementarity: 0.8,
            lesion_contrast: 0.35,
            illumination_strength: 0.3,
            vessel_strength: 0.12,
            vessel_cycles: 12.0,
            noise_std: 0.04,
            misalignment_px: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(config(format!(
                "need 0 < radius_min <= radius_max, got {} and {}",
                self.radius_min, self.radius_max
            )));
        }
        if !(0.0..1.0).contains(&self.shape_jitter) {
            return Err(config("shape_jitter must lie in [0, 1)"));
        }
        if self.radius_max * (1.0 + self.shape_jitter) >= 0.5 {
            return Err(config(format!(
                "lesion radius {} (with jitter {}) does not fit inside the image",
                self.radius_max, self.shape_jitter
            )));
        }
        for (name, v) in [
            ("benign_fraction", self.benign_fraction),
            ("test_fraction", self.test_fraction),
            ("complementarity", self.complementarity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.noise_std < 0.0 || self.lesion_contrast < 0.0 {
            return Err(config("noise_std and lesion_contrast must be >= 0"));
        }
        if self.misalignment_px as usize * 4 > self.image_size {
            return Err(config("misalignment_px must be at most a quarter of image_size"));
        }
        Ok(())
    }

    /// Per-image lesion area fraction implied by the radius and jitter
    /// ranges, ignoring pixel discretization.
    pub fn foreground_fraction_bounds(&self) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let lo = pi * (self.radius_min * (1.0 - self.shape_jitter)).powi(2);
        let hi = pi * (self.radius_max * (1.0 + self.shape_jitter)).powi(2);
        (lo, hi)
    }

    /// Load a flat `key = value` config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sample_factors(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, tumor: bool) -> PlantedFactors {
    let tau = std::f32::consts::TAU;
    let reach = (cfg.radius_max * (1.0 + cfg.shape_jitter)) as f32;
    let rmin = cfg.radius_min as f32;
    let rmax = cfg.radius_max as f32;
    let jitter = cfg.shape_jitter as f32;
    let split: f32 = rng.random_range(0.0..=1.0);
    let shared = vec![
        if tumor { 1.0 } else { 0.0 },
        rng.random_range(reach..=1.0 - reach),
        rng.random_range(reach..=1.0 - reach),
        rng.random_range(rmin..=rmax),
        rng.random_range(rmin..=rmax),
        rng.random_range(0.0..tau),
        split * jitter * rng.random_range(-1.0f32..=1.0),
        (1.0 - split) * jitter * rng.random_range(-1.0f32..=1.0),
        rng.random_range(0.0..tau),
        rng.random_range(0.0..tau),
    ];
    let specific_w = vec![
        rng.random_range(0.0..tau),
        rng.random_range(0.5f32..=1.0),
        rng.random_range(-0.06f32..=0.06),
        rng.random_range(-0.06f32..=0.06),
    ];
    let specific_n = vec![
        rng.random_range(0.0..tau),
        rng.random_range(0.75f32..=1.25),
        rng.random_range(0.0..tau),
        rng.random_range(0.5f32..=1.0),
    ];
    let m = cfg.misalignment_px as i32;
    let shift = if m > 0 {
        (rng.random_range(-m..=m), rng.random_range(-m..=m))
    } else {
        (0, 0)
    };
    PlantedFactors {
        shared,
        specific_w,
        specific_n,
        shift,
        noise_seed: rng.random(),
    }
}

/// Lesion membership of normalized point (u, v) under a shared code.
fn inside_lesion(shared: &[f32], u: f32, v: f32) -> bool {
    if shared[0] < 0.5 {
        return false;
    }
    let (cx, cy, rx, ry, theta, a2, a3, phase) = (
        shared[1], shared[2], shared[3], shared[4], shared[5], shared[6], shared[7], shared[8],
    );
    let (du, dv) = (u - cx, v - cy);
    let (s, c) = theta.sin_cos();
    let p = du * c + dv * s;
    let q = -du * s + dv * c;
    let rho = ((p / rx).powi(2) + (q / ry).powi(2)).sqrt();
    let ang = q.atan2(p);
    rho <= 1.0 + a2 * (2.0 * ang + phase).cos() + a3 * (3.0 * ang + phase).cos()
}

/// Fraction of the lesion contrast modality w receives at (u, v); modality n
/// receives the complement.
fn visibility_w(shared: &[f32], complementarity: f32, u: f32, v: f32) -> f32 {
    let (cx, cy, rx, ry, dir) = (shared[1], shared[2], shared[3], shared[4], shared[9]);
    let r = 0.5 * (rx + ry);
    let proj = (u - cx) * dir.cos() + (v - cy) * dir.sin();
    0.5 + 0.5 * complementarity * (4.0 * proj / r).tanh()
}

/// A rendered pair together with the per-pixel lesion contribution each
/// modality received (before noise and clamping).
#[derive(Debug, Clone)]
pub struct Rendered {
    pub x_w: Image,
    pub x_n: Image,
    pub mask: Mask,
    pub lesion_w: Vec<f32>,
    pub lesion_n: Vec<f32>,
}

const TISSUE_W: [f32; 3] = [0.78, 0.48, 0.42];
const LESION_W: [f32; 3] = [0.35, 1.0, 0.85];
const TISSUE_N: [f32; 3] = [0.42, 0.52, 0.58];
const LESION_N: [f32; 3] = [0.6, 1.0, 1.0];
const VESSEL_N: [f32; 3] = [0.9, 1.0, 0.6];

pub fn render(factors: &PlantedFactors, cfg: &GeneratorConfig) -> Rendered {
    let size = cfg.image_size;
    let n_px = size * size;
    let sh = &factors.shared;
    let sw = &factors.specific_w;
    let sn = &factors.specific_n;
    let comp = cfg.complementarity as f32;
    let contrast = cfg.lesion_contrast as f32;

    let coord = |i: usize| (i as f32 + 0.5) / size as f32;

    let mut mask = Mask::empty(size, size);
    let mut lesion_w = vec![0.0f32; n_px];
    let mut lesion_n_native = vec![0.0f32; n_px];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (coord(x), coord(y));
            if inside_lesion(sh, u, v) {
                let i = y * size + x;
                mask.data[i] = 1;
                let vis = visibility_w(sh, comp, u, v);
                lesion_w[i] = contrast * vis;
                lesion_n_native[i] = contrast * (1.0 - vis);
            }
        }
    }

    // Modality n is observed with a planted integer shift relative to w.
    let (dx, dy) = factors.shift;
    let clampi = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    let mut lesion_n = vec![0.0f32; n_px];
    for y in 0..size {
        for x in 0..size {
            let sy = clampi(y as i64 - dy as i64);
            let sx = clampi(x as i64 - dx as i64);
            lesion_n[y * size + x] = lesion_n_native[sy * size + sx];
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(factors.noise_seed);
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0) as f32).expect("std >= 0");
    let illum = cfg.illumination_strength as f32 * sw[1];
    let (idir_s, idir_c) = sw[0].sin_cos();
    let vessel = cfg.vessel_strength as f32 * sn[3];
    let freq = cfg.vessel_cycles as f32 * sn[1] * std::f32::consts::TAU;
    let (vs, vc) = sn[0].sin_cos();

    let mut x_w = Image::zeros(size, size);
    let mut x_n = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (coord(x), coord(y));
            let i = y * size + x;
            let gain = 1.0 + illum * ((u - 0.5) * idir_c + (v - 0.5) * idir_s);
            let tint = [sw[2], 0.0, sw[3]];
            // Shifted frame for modality n: texture and lesion move together.
            let (un, vn) = (u - dx as f32 / size as f32, v - dy as f32 / size as f32);
            let stripe = (freq * (un * vc + vn * vs) + sn[2]).sin();
            let cross = (0.5 * freq * (-un * vs + vn * vc) + 1.3 * sn[2]).sin();
            let texture = vessel * stripe * (0.6 + 0.4 * cross);
            for c in 0..CHANNELS {
                let k = i * CHANNELS + c;
                let w = TISSUE_W[c] * gain + tint[c] - lesion_w[i] * LESION_W[c];
                x_w.data[k] = (w + noise.sample(&mut rng)).clamp(0.0, 1.0);
                let n = TISSUE_N[c] + texture * VESSEL_N[c] - lesion_n[i] * LESION_N[c];
                x_n.data[k] = (n + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    Rendered {
        x_w,
        x_n,
        mask,
        lesion_w,
        lesion_n,
    }
}

/// Generate `n_pairs` synthetic pairs. Bit-identical for equal (seed, config).
pub fn synthesize_dataset(n_pairs: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Dataset> {
    if n_pairs == 0 {
        return Err(config("n_pairs must be >= 1"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = ((n_pairs as f64) * cfg.test_fraction).round() as usize;
    let n_test = n_test.min(n_pairs.saturating_sub(1));
    let mut entries = Vec::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let tumor = rng.random_range(0.0..1.0) >= cfg.benign_fraction;
        let factors = sample_factors(&mut rng, cfg, tumor);
        let r = render(&factors, cfg);
        let id = format!("syn{k:05}");
        let split = if k < n_pairs - n_test {
            Split::Train
        } else {
            Split::Test
        };
        let label = if tumor { Label::Tumor } else { Label::Benign };
        entries.push(ManifestEntry {
            id: id.clone(),
            split,
            label,
        });
        pairs.push(SamplePair {
            id,
            x_w: r.x_w,
            x_n: r.x_n,
            mask: r.mask,
            label,
            factors: Some(factors),
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            root: None,
            image_size: (cfg.image_size, cfg.image_size),
            entries,
        },
        pairs,
    })
}

const DIR_W: &str = "images_w";
const DIR_N: &str = "images_n";
const DIR_MASK: &str = "masks";
const MANIFEST_FILE: &str = "manifest.json";

/// Write `root/{train,test}/{images_w,images_n,masks}/<id>.png` plus
/// `root/manifest.json`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        for sub in [DIR_W, DIR_N, DIR_MASK] {
            fs::create_dir_all(root.join(split.dir_name()).join(sub))?;
        }
    }
    for (entry, pair) in dataset.manifest.entries.iter().zip(&dataset.pairs) {
        let dir = root.join(entry.split.dir_name());
        let file = format!("{}.png", pair.id);
        pair.x_w.to_rgb8().save(dir.join(DIR_W).join(&file))?;
        pair.x_n.to_rgb8().save(dir.join(DIR_N).join(&file))?;
        let m: Vec<u8> = pair.mask.data.iter().map(|&v| v * 255).collect();
        image::GrayImage::from_raw(pair.mask.width as u32, pair.mask.height as u32, m)
            .expect("mask buffer matches dimensions")
            .save(dir.join(DIR_MASK).join(&file))?;
    }
    let manifest = DatasetManifest {
        root: Some(root.to_path_buf()),
        ..dataset.manifest.clone()
    };
    fs::write(root.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(())
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn load_rgb(path: &Path, (h, w): (usize, usize)) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != w || img.height() as usize != h {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(Image::from_rgb8(&img))
}

fn load_mask(path: &Path, id: &str, (h, w): (usize, usize)) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    if img.as_raw().iter().any(|&v| v != 0 && v != 255) {
        log::warn!("mask for `{id}` is not binary; thresholding at 0.5");
    }
    let img = if img.width() as usize != w || img.height() as usize != h {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    let data = img
        .as_raw()
        .iter()
        .map(|&v| u8::from(v as f32 / 255.0 >= 0.5))
        .collect();
    Ok(Mask {
        height: h,
        width: w,
        data,
    })
}

/// Ingest a paired directory tree. Labels come from `manifest.json` when it
/// exists, otherwise from whether the mask is empty.
pub fn load_directory(root: &Path, resize: (usize, usize)) -> Result<Dataset> {
    let stored: BTreeMap<String, Label> = match fs::read_to_string(root.join(MANIFEST_FILE)) {
        Ok(text) => {
            let m: DatasetManifest = serde_json::from_str(&text)?;
            m.entries.into_iter().map(|e| (e.id, e.label)).collect()
        }
        Err(_) => BTreeMap::new(),
    };
    let mut entries = Vec::new();
    let mut pairs = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let ids_w = png_ids(&dir.join(DIR_W))?;
        let ids_n = png_ids(&dir.join(DIR_N))?;
        let ids_m = png_ids(&dir.join(DIR_MASK))?;
        let all: BTreeSet<&String> = ids_w.iter().chain(&ids_n).chain(&ids_m).collect();
        for id in all {
            for (sub, set) in [(DIR_W, &ids_w), (DIR_N, &ids_n), (DIR_MASK, &ids_m)] {
                if !set.contains(id) {
                    return Err(Error::Manifest {
                        id: id.clone(),
                        reason: format!("missing {}/{sub}/{id}.png", split.dir_name()),
                    });
                }
            }
            let file = format!("{id}.png");
            let x_w = load_rgb(&dir.join(DIR_W).join(&file), resize)?;
            let x_n = load_rgb(&dir.join(DIR_N).join(&file), resize)?;
            let mask = load_mask(&dir.join(DIR_MASK).join(&file), id, resize)?;
            let label = stored.get(id).copied().unwrap_or(if mask.foreground() > 0 {
                Label::Tumor
            } else {
                Label::Benign
            });
            entries.push(ManifestEntry {
                id: id.clone(),
                split,
                label,
            });
            pairs.push(SamplePair {
                id: id.clone(),
                x_w,
                x_n,
                mask,
                label,
                factors: None,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Manifest {
            id: String::new(),
            reason: format!("no pairs found under {}", root.display()),
        });
    }
    let manifest = DatasetManifest {
        root: Some(root.to_path_buf()),
        image_size: resize,
        entries,
    };
    manifest.check_disjoint()?;
    Ok(Dataset { manifest, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Short trailing batch dropped; needs batch_size >= 2.
    Train,
    /// Short trailing batch kept.
    Eval,
}

/// Index batches over `n_items`. Shuffled by `shuffle_seed` when given,
/// otherwise in natural order.
pub fn make_batches(
    n_items: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    mode: BatchMode,
) -> Result<std::vec::IntoIter<Vec<usize>>> {
    if batch_size == 0 || (mode == BatchMode::Train && batch_size < 2) {
        return Err(config(format!(
            "batch_size must be >= 2 in training mode (got {batch_size})"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(batches.into_iter())
}

fn push_chw(img: &Image, dst: &mut Vec<f32>) {
    for c in 0..CHANNELS {
        for y in 0..img.height {
            for x in 0..img.width {
                dst.push(img.at(y, x, c));
            }
        }
    }
}

/// Stacked tensors for one batch: images (B, C, H, W) and masks (B, H, W)
/// as u32 class indices.
pub struct BatchTensors {
    pub x_w: Tensor,
    pub x_n: Tensor,
    pub mask: Tensor,
}

pub fn to_tensors(pairs: &[&SamplePair], dtype: DType, device: &Device) -> Result<BatchTensors> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.x_w.height, first.x_w.width);
    let mut xw = Vec::with_capacity(pairs.len() * CHANNELS * h * w);
    let mut xn = Vec::with_capacity(xw.capacity());
    let mut m = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if p.x_w.height != h || p.x_w.width != w || p.x_n.height != h || p.x_n.width != w {
            return Err(Error::Contract(format!("pair `{}` has mismatched image size", p.id)));
        }
        push_chw(&p.x_w, &mut xw);
        push_chw(&p.x_n, &mut xn);
        m.extend(p.mask.data.iter().map(|&v| v as u32));
    }
    let b = pairs.len();
    Ok(BatchTensors {
        x_w: Tensor::from_vec(xw, (b, CHANNELS, h, w), device)?.to_dtype(dtype)?,
        x_n: Tensor::from_vec(xn, (b, CHANNELS, h, w), device)?.to_dtype(dtype)?,
        mask: Tensor::from_vec(m, (b, h, w), device)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synthesize_dataset(4, 7, &small()).unwrap();
        let b = synthesize_dataset(4, 7, &small()).unwrap();
        assert_eq!(a.len(), 4);
        for (p, q) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(p.x_w, q.x_w);
            assert_eq!(p.x_n, q.x_n);
            assert_eq!(p.mask, q.mask);
            assert_eq!(p.factors, q.factors);
        }
        let c = synthesize_dataset(4, 8, &small()).unwrap();
        assert_ne!(a.pairs[0].x_w, c.pairs[0].x_w);
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(matches!(synthesize_dataset(0, 1, &small()), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_lesion_rejected() {
        let cfg = GeneratorConfig {
            radius_min: 0.3,
            radius_max: 0.6,
            ..small()
        };
        assert!(matches!(synthesize_dataset(1, 1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_specific_codes_share_lesion_geometry() {
        let cfg = GeneratorConfig {
            benign_fraction: 0.0,
            ..small()
        };
        let ds = synthesize_dataset(1, 3, &cfg).unwrap();
        let f = ds.pairs[0].factors.as_ref().unwrap().with_zero_specific();
        let r = render(&f, &cfg);
        let support_w: Vec<bool> = r.lesion_w.iter().map(|&v| v > 0.0).collect();
        let support_n: Vec<bool> = r.lesion_n.iter().map(|&v| v > 0.0).collect();
        assert_eq!(support_w, support_n);
        let from_mask: Vec<bool> = r.mask.data.iter().map(|&v| v == 1).collect();
        assert_eq!(support_w, from_mask);
        assert!(r.mask.foreground() > 0);
    }

    #[test]
    fn batches_train_drop_eval_keep() {
        let train: Vec<_> = make_batches(10, 4, Some(1), BatchMode::Train).unwrap().collect();
        assert_eq!(train.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        let eval: Vec<_> = make_batches(10, 4, None, BatchMode::Eval).unwrap().collect();
        assert_eq!(eval.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let again: Vec<_> = make_batches(10, 4, Some(1), BatchMode::Train).unwrap().collect();
        assert_eq!(train, again);
        assert!(make_batches(10, 1, None, BatchMode::Train).is_err());
        assert!(make_batches(10, 1, None, BatchMode::Eval).is_ok());
    }

    #[test]
    fn tensors_are_channel_first() {
        let ds = synthesize_dataset(2, 1, &small()).unwrap();
        let refs: Vec<&SamplePair> = ds.pairs.iter().collect();
        let t = to_tensors(&refs, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.x_w.dims(), &[2, 3, 32, 32]);
        assert_eq!(t.mask.dims(), &[2, 32, 32]);
        let v: f32 = t.x_n.get(1).unwrap().get(2).unwrap().get(5).unwrap().get(7).unwrap()
            .to_scalar().unwrap();
        assert_eq!(v, ds.pairs[1].x_n.at(5, 7, 2));
    }
}
