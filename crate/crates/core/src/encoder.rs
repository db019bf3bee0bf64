//! Two-branch ViT-style patch encoder.
//!
//! Each branch embeds non-overlapping patches, adds a learned positional
//! table, and runs `depth` pre-norm transformer blocks. The outputs of the
//! first `shallow_stages` blocks are tapped as shallow stage maps; the
//! normalized output of the last block is the deep map. Token count is the
//! same at every block, so taps need no resampling.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::params::{Init, LayerNorm, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    W,
    N,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::W => "w",
            Modality::N => "n",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    /// Number of leading blocks tapped as shallow stages (L).
    pub shallow_stages: usize,
    pub mlp_ratio: usize,
    /// Share one set of weights between the two branches.
    pub shared_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            patch_size: 16,
            embed_dim: 32,
            num_heads: 4,
            depth: 4,
            shallow_stages: 3,
            mlp_ratio: 2,
            shared_weights: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.shallow_stages == 0 || self.shallow_stages >= self.depth {
            return Err(config(format!(
                "need 1 <= shallow_stages < depth, got {} and {}",
                self.shallow_stages, self.depth
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(config("mlp_ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// (B, N, D) token map from one shallow stage.
#[derive(Debug, Clone)]
pub struct TokenFeatureMap {
    pub data: Tensor,
    /// 1-based stage index.
    pub stage: usize,
    pub modality: Modality,
}

/// (B, N, D) output of the last encoder block.
#[derive(Debug, Clone)]
pub struct DeepFeatureMap {
    pub data: Tensor,
    pub modality: Modality,
}

struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        Ok(self.proj.forward(&out)?)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        Ok(Self {
            norm1: store.layer_norm(&format!("{name}.norm1"), d)?,
            attn: Attention {
                qkv: store.linear(&format!("{name}.attn.qkv"), d, 3 * d, true, Init::Uniform)?,
                proj: store.linear(&format!("{name}.attn.proj"), d, d, true, Init::Uniform)?,
                heads: cfg.num_heads,
            },
            norm2: store.layer_norm(&format!("{name}.norm2"), d)?,
            fc1: store.linear(&format!("{name}.mlp.fc1"), d, hidden, true, Init::Uniform)?,
            fc2: store.linear(&format!("{name}.mlp.fc2"), hidden, d, true, Init::Uniform)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// One modality branch.
pub struct Branch {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    taps: usize,
}

impl Branch {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = store.conv2d(
            &format!("{name}.patch_embed"),
            cfg.in_channels,
            cfg.embed_dim,
            cfg.patch_size,
            Conv2dConfig {
                stride: cfg.patch_size,
                ..Default::default()
            },
        )?;
        let pos_embed = store.normal(
            &format!("{name}.pos_embed"),
            &[1, cfg.num_tokens(), cfg.embed_dim],
            0.02,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = store.layer_norm(&format!("{name}.norm"), cfg.embed_dim)?;
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            norm,
            taps: cfg.shallow_stages,
        })
    }

    /// Returns the shallow taps and the deep map, all (B, N, D).
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let tokens = self.patch_embed.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let mut h = tokens.broadcast_add(&self.pos_embed)?;
        let mut taps = Vec::with_capacity(self.taps);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if i < self.taps {
                taps.push(h.clone());
            }
        }
        Ok((taps, self.norm.forward(&h)?))
    }
}

pub struct EncoderOutput {
    pub shallow_w: Vec<TokenFeatureMap>,
    pub shallow_n: Vec<TokenFeatureMap>,
    pub deep_w: DeepFeatureMap,
    pub deep_n: DeepFeatureMap,
}

/// Encoder with one branch per modality, or one branch used for both when
/// `shared_weights` is set.
pub struct Encoder {
    branch_w: Branch,
    branch_n: Option<Branch>,
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (branch_w, branch_n) = if cfg.shared_weights {
            (Branch::new(store, "enc", cfg)?, None)
        } else {
            (
                Branch::new(store, "enc_w", cfg)?,
                Some(Branch::new(store, "enc_n", cfg)?),
            )
        };
        Ok(Self {
            branch_w,
            branch_n,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn branch(&self, modality: Modality) -> &Branch {
        match modality {
            Modality::W => &self.branch_w,
            Modality::N => self.branch_n.as_ref().unwrap_or(&self.branch_w),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let want = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if dims.len() != 4 || dims[0] == 0 || dims[1..] != want {
            return Err(contract(format!(
                "expected image batch (B>=1, {}, {}, {}), got {:?}",
                want[0], want[1], want[2], dims
            )));
        }
        Ok(())
    }

    /// Encode a single modality.
    pub fn encode_one(
        &self,
        x: &Tensor,
        modality: Modality,
    ) -> Result<(Vec<TokenFeatureMap>, DeepFeatureMap)> {
        self.check_input(x)?;
        let (taps, deep) = self.branch(modality).forward(x)?;
        let shallow = taps
            .into_iter()
            .enumerate()
            .map(|(i, data)| TokenFeatureMap {
                data,
                stage: i + 1,
                modality,
            })
            .collect();
        Ok((shallow, DeepFeatureMap { data: deep, modality }))
    }

    pub fn encode(&self, x_w: &Tensor, x_n: &Tensor) -> Result<EncoderOutput> {
        let (bw, bn) = (x_w.dim(0)?, x_n.dim(0)?);
        if bw != bn {
            return Err(contract(format!(
                "modality batch sizes differ: w has {bw}, n has {bn}"
            )));
        }
        let (shallow_w, deep_w) = self.encode_one(x_w, Modality::W)?;
        let (shallow_n, deep_n) = self.encode_one(x_n, Modality::N)?;
        Ok(EncoderOutput {
            shallow_w,
            shallow_n,
            deep_w,
            deep_n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            depth: 3,
            shallow_stages: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.shallow_stages = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patch_size = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = Encoder::new(&mut s, &tiny()).unwrap();
        let a = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((3, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&a, &b), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn shared_weights_use_one_branch() {
        let mut s1 = ParamStore::new(0, DType::F32, &Device::Cpu);
        Encoder::new(&mut s1, &tiny()).unwrap();
        let mut s2 = ParamStore::new(0, DType::F32, &Device::Cpu);
        Encoder::new(
            &mut s2,
            &EncoderConfig {
                shared_weights: true,
                ..tiny()
            },
        )
        .unwrap();
        assert_eq!(s1.num_scalars(), 2 * s2.num_scalars());
    }
}
