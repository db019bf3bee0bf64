//! Cross-modal shared aggregation, shared/specific fusion, and the
//! progressive-upsampling mask decoder.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::params::{Init, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of x2 upsampling stages; grid * 2^stages must equal the image side.
    pub decoder_stages: usize,
    /// Channels after the first stage; halved per stage down to 8.
    pub base_channels: usize,
    pub shared_bias: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            decoder_stages: 4,
            base_channels: 32,
            shared_bias: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, grid: usize, image_size: usize) -> Result<()> {
        if self.base_channels == 0 {
            return Err(config("base_channels must be >= 1"));
        }
        if grid << self.decoder_stages != image_size {
            return Err(config(format!(
                "decoder_stages {} upsample a {grid}x{grid} grid to {}, not {image_size}",
                self.decoder_stages,
                grid << self.decoder_stages
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub z_sh: Tensor,
    pub z_fused: Tensor,
}

/// (B, 2, H, W) logits; channel 1 is lesion.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub logits: Tensor,
}

/// f_sh: 2D -> D linear, then f'_sh, f_w, f_n per-token MLPs.
pub struct FusionHead {
    shared_proj: Linear,
    shared_map: Mlp,
    specific_w_map: Mlp,
    specific_n_map: Mlp,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &FusionConfig) -> Result<Self> {
        Self::with_init(store, dim, cfg, Init::Uniform, Init::Uniform)
    }

    pub fn with_init(
        store: &mut ParamStore,
        dim: usize,
        cfg: &FusionConfig,
        shared_init: Init,
        map_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            shared_proj: store.linear("fuse.shared_proj", 2 * dim, dim, cfg.shared_bias, shared_init)?,
            shared_map: Mlp::new(store, "fuse.shared_map", dim, dim, dim, 2, map_init)?,
            specific_w_map: Mlp::new(store, "fuse.specific_w_map", dim, dim, dim, 2, map_init)?,
            specific_n_map: Mlp::new(store, "fuse.specific_n_map", dim, dim, dim, 2, map_init)?,
        })
    }

    pub fn aggregate_shared(&self, z_ws: &Tensor, z_ns: &Tensor) -> Result<Tensor> {
        if z_ws.dims() != z_ns.dims() {
            return Err(contract(format!(
                "shared maps differ in shape: {:?} vs {:?}",
                z_ws.dims(),
                z_ns.dims()
            )));
        }
        let cat = Tensor::cat(&[z_ws, z_ns], D::Minus1)?;
        Ok(self.shared_proj.forward(&cat)?)
    }

    /// The three additive branches of the fused feature, in order
    /// (shared, specific w, specific n).
    pub fn branches(&self, z_sh: &Tensor, z_wp: &Tensor, z_np: &Tensor) -> Result<[Tensor; 3]> {
        if z_sh.dims() != z_wp.dims() || z_sh.dims() != z_np.dims() {
            return Err(contract(format!(
                "fusion inputs differ in shape: {:?}, {:?}, {:?}",
                z_sh.dims(),
                z_wp.dims(),
                z_np.dims()
            )));
        }
        Ok([
            self.shared_map.forward(z_sh)?,
            self.specific_w_map.forward(z_wp)?,
            self.specific_n_map.forward(z_np)?,
        ])
    }

    pub fn fuse(&self, z_sh: &Tensor, z_wp: &Tensor, z_np: &Tensor) -> Result<Tensor> {
        let [a, b, c] = self.branches(z_sh, z_wp, z_np)?;
        Ok(((a + b)? + c)?)
    }

    pub fn forward(&self, z_ws: &Tensor, z_wp: &Tensor, z_ns: &Tensor, z_np: &Tensor) -> Result<FusedFeature> {
        let z_sh = self.aggregate_shared(z_ws, z_ns)?;
        let z_fused = self.fuse(&z_sh, z_wp, z_np)?;
        Ok(FusedFeature { z_sh, z_fused })
    }
}

struct UpStage {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Token grid -> (B, 2, H, W) through `decoder_stages` nearest x2
/// upsamplings, each followed by two 3x3 conv + ReLU.
pub struct Decoder {
    stages: Vec<UpStage>,
    head: Conv2d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &FusionConfig) -> Result<Self> {
        let conv3 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut stages = Vec::with_capacity(cfg.decoder_stages);
        let mut cin = dim;
        for i in 0..cfg.decoder_stages {
            let cout = (cfg.base_channels >> i).max(8.min(cfg.base_channels));
            stages.push(UpStage {
                conv1: store.conv2d(&format!("dec.stage{i}.conv1"), cin, cout, 3, conv3)?,
                conv2: store.conv2d(&format!("dec.stage{i}.conv2"), cout, cout, 3, conv3)?,
            });
            cin = cout;
        }
        let head = store.conv2d("dec.head", cin, 2, 1, Conv2dConfig::default())?;
        Ok(Self { stages, head })
    }

    pub fn decode(&self, z_fused: &Tensor) -> Result<MaskLogits> {
        let (b, n, d) = z_fused.dims3()?;
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n {
            return Err(config(format!("token count {n} is not a perfect square")));
        }
        let mut h = z_fused.transpose(1, 2)?.contiguous()?.reshape((b, d, g, g))?;
        for stage in &self.stages {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = stage.conv1.forward(&h)?.relu()?;
            h = stage.conv2.forward(&h)?.relu()?;
        }
        Ok(MaskLogits {
            logits: self.head.forward(&h)?,
        })
    }
}
