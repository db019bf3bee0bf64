//! The full network: encoder, alignment scorers, projectors, fusion head,
//! decoder. Single-modality baselines reuse the same encoder branch and
//! decoder with a per-token MLP in place of the fusion path.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::alignment::{concat_multiscale, global_descriptor, AttentionScorer, GlobalDescriptor};
use crate::disentangle::{DisentangledBundle, Disentangler, FdConfig};
use crate::encoder::{Encoder, EncoderConfig, Modality};
use crate::error::{contract, Result};
use crate::fusion::{Decoder, FusedFeature, FusionConfig, FusionHead, MaskLogits};
use crate::params::{Init, Mlp, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    Both,
    WOnly,
    NOnly,
}

pub struct ForwardOutput {
    pub logits: MaskLogits,
    /// (w, n) global descriptors; two-modality mode only.
    pub global: Option<(GlobalDescriptor, GlobalDescriptor)>,
    pub bundle: Option<DisentangledBundle>,
    pub fused: Option<FusedFeature>,
}

enum Head {
    Fusion {
        scorer_w: AttentionScorer,
        scorer_n: AttentionScorer,
        disentangler: Disentangler,
        fusion: FusionHead,
    },
    Single {
        modality: Modality,
        map: Mlp,
    },
}

pub struct AdfNet {
    encoder: Encoder,
    head: Head,
    decoder: Decoder,
}

impl AdfNet {
    pub fn new(
        store: &mut ParamStore,
        modalities: Modalities,
        enc: &EncoderConfig,
        fd: &FdConfig,
        fusion: &FusionConfig,
    ) -> Result<Self> {
        enc.validate()?;
        fd.validate()?;
        fusion.validate(enc.grid(), enc.image_size)?;
        let d = enc.embed_dim;
        let (encoder, head) = match modalities {
            Modalities::Both => {
                let encoder = Encoder::new(store, enc)?;
                let ms_dim = enc.shallow_stages * d;
                let scorer_w = AttentionScorer::new(store, "align.scorer_w", ms_dim)?;
                let scorer_n = AttentionScorer::new(store, "align.scorer_n", ms_dim)?;
                let disentangler = Disentangler::new(store, d, fd, Init::Uniform)?;
                let fusion = FusionHead::new(store, d, fusion)?;
                (
                    encoder,
                    Head::Fusion {
                        scorer_w,
                        scorer_n,
                        disentangler,
                        fusion,
                    },
                )
            }
            Modalities::WOnly | Modalities::NOnly => {
                let single = EncoderConfig {
                    shared_weights: true,
                    ..enc.clone()
                };
                let encoder = Encoder::new(store, &single)?;
                let map = Mlp::new(store, "single.map", d, d, d, 2, Init::Uniform)?;
                let modality = if modalities == Modalities::WOnly {
                    Modality::W
                } else {
                    Modality::N
                };
                (encoder, Head::Single { modality, map })
            }
        };
        let decoder = Decoder::new(store, d, fusion)?;
        Ok(Self {
            encoder,
            head,
            decoder,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn modalities(&self) -> Modalities {
        match &self.head {
            Head::Fusion { .. } => Modalities::Both,
            Head::Single { modality: Modality::W, .. } => Modalities::WOnly,
            Head::Single { modality: Modality::N, .. } => Modalities::NOnly,
        }
    }

    pub fn forward(&self, x_w: &Tensor, x_n: &Tensor) -> Result<ForwardOutput> {
        match &self.head {
            Head::Fusion {
                scorer_w,
                scorer_n,
                disentangler,
                fusion,
            } => {
                let enc = self.encoder.encode(x_w, x_n)?;
                let ms_w = concat_multiscale(&enc.shallow_w)?;
                let ms_n = concat_multiscale(&enc.shallow_n)?;
                let g_w = global_descriptor(&ms_w, scorer_w)?;
                let g_n = global_descriptor(&ms_n, scorer_n)?;
                let bundle = disentangler.project(&enc.deep_w, &enc.deep_n)?;
                let fused = fusion.forward(&bundle.z_ws, &bundle.z_wp, &bundle.z_ns, &bundle.z_np)?;
                let logits = self.decoder.decode(&fused.z_fused)?;
                Ok(ForwardOutput {
                    logits,
                    global: Some((g_w, g_n)),
                    bundle: Some(bundle),
                    fused: Some(fused),
                })
            }
            Head::Single { modality, map } => {
                let x = match modality {
                    Modality::W => x_w,
                    Modality::N => x_n,
                };
                if x_w.dim(0)? != x_n.dim(0)? {
                    return Err(contract("modality batch sizes differ"));
                }
                let (_, deep) = self.encoder.encode_one(x, *modality)?;
                let logits = self.decoder.decode(&map.forward(&deep.data)?)?;
                Ok(ForwardOutput {
                    logits,
                    global: None,
                    bundle: None,
                    fused: None,
                })
            }
        }
    }
}
