//! Multi-scale global descriptors and the Gaussian-kernel MMD alignment loss.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::encoder::{Modality, TokenFeatureMap};
use crate::error::{config, contract, Result};
use crate::params::{Init, ParamStore};

/// (B, N, L*D) stage maps concatenated along the feature axis.
#[derive(Debug, Clone)]
pub struct MultiScaleFeature {
    pub data: Tensor,
    pub modality: Modality,
}

#[derive(Debug, Clone)]
pub struct GlobalDescriptor {
    pub avg: Tensor,
    pub weighted: Tensor,
    pub global: Tensor,
    pub attention: Tensor,
}

/// Kernel bandwidth: estimated once from data, or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaRepr", into = "SigmaRepr")]
pub enum Sigma {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SigmaRepr {
    Word(String),
    Value(f64),
}

impl TryFrom<SigmaRepr> for Sigma {
    type Error = String;
    fn try_from(r: SigmaRepr) -> std::result::Result<Self, String> {
        match r {
            SigmaRepr::Word(w) if w == "auto" => Ok(Sigma::Auto),
            SigmaRepr::Word(w) => Err(format!("sigma must be `auto` or a number, got `{w}`")),
            SigmaRepr::Value(v) => Ok(Sigma::Fixed(v)),
        }
    }
}

impl From<Sigma> for SigmaRepr {
    fn from(s: Sigma) -> Self {
        match s {
            Sigma::Auto => SigmaRepr::Word("auto".into()),
            Sigma::Fixed(v) => SigmaRepr::Value(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    pub sigma: Sigma,
    /// Weight of the alignment term in the total objective.
    pub lambda_da: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            sigma: Sigma::Auto,
            lambda_da: 1e-4,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Sigma::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config(format!("sigma must be > 0, got {s}")));
            }
        }
        if !(self.lambda_da >= 0.0) {
            return Err(config("lambda_da must be >= 0"));
        }
        Ok(())
    }
}

pub fn concat_multiscale(stage_maps: &[TokenFeatureMap]) -> Result<MultiScaleFeature> {
    let first = stage_maps
        .first()
        .ok_or_else(|| contract("need at least one stage map"))?;
    let (b, n, _) = first.data.dims3()?;
    for m in stage_maps {
        let (mb, mn, _) = m.data.dims3()?;
        if mb != b || mn != n {
            return Err(contract(format!(
                "stage {} has shape ({mb}, {mn}, _), expected ({b}, {n}, _)",
                m.stage
            )));
        }
        if m.modality != first.modality {
            return Err(contract("stage maps mix modalities"));
        }
    }
    let parts: Vec<&Tensor> = stage_maps.iter().map(|m| &m.data).collect();
    Ok(MultiScaleFeature {
        data: Tensor::cat(&parts, D::Minus1)?,
        modality: first.modality,
    })
}

/// Mean over the token axis: (B, N, F) -> (B, F).
pub fn global_average(f: &MultiScaleFeature) -> Result<Tensor> {
    if f.data.dim(1)? == 0 {
        return Err(contract("global_average needs at least one token"));
    }
    Ok(f.data.mean(1)?)
}

/// Token-level linear scorer F -> 1.
pub struct AttentionScorer {
    proj: Linear,
}

impl AttentionScorer {
    pub fn new(store: &mut ParamStore, name: &str, feature_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: store.linear(name, feature_dim, 1, true, Init::Uniform)?,
        })
    }

    pub fn from_linear(proj: Linear) -> Self {
        Self { proj }
    }

    /// Raw scores (B, N).
    pub fn scores(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(f)?.squeeze(D::Minus1)?)
    }
}

/// Softmax-over-tokens pooling. Returns (weighted (B, F), attention (B, N)).
pub fn attention_pool(
    f: &MultiScaleFeature,
    scorer: &AttentionScorer,
) -> Result<(Tensor, Tensor)> {
    let scores = scorer.scores(&f.data)?;
    let attention = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let weighted = attention.unsqueeze(1)?.matmul(&f.data)?.squeeze(1)?;
    Ok((weighted, attention))
}

pub fn global_descriptor(
    f: &MultiScaleFeature,
    scorer: &AttentionScorer,
) -> Result<GlobalDescriptor> {
    let avg = global_average(f)?;
    let (weighted, attention) = attention_pool(f, scorer)?;
    let global = (&avg + &weighted)?;
    Ok(GlobalDescriptor {
        avg,
        weighted,
        global,
        attention,
    })
}

/// (B, B') matrix of squared Euclidean distances between rows.
fn sq_dists(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = a.unsqueeze(1)?.broadcast_sub(&b.unsqueeze(0)?)?;
    Ok(diff.sqr()?.sum(D::Minus1)?)
}

/// Biased (V-statistic) Gaussian-kernel MMD between two (B, F) batches.
pub fn mmd_loss(g_w: &Tensor, g_n: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(config(format!("sigma must be > 0, got {sigma}")));
    }
    let (b, f) = g_w.dims2()?;
    let (bn, fn_) = g_n.dims2()?;
    if b < 2 || bn < 2 {
        return Err(contract(format!("mmd needs batches of at least 2, got {b} and {bn}")));
    }
    if f != fn_ {
        return Err(contract(format!("feature dims differ: {f} vs {fn_}")));
    }
    let scale = -1.0 / (2.0 * sigma * sigma);
    let k = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        Ok((sq_dists(x, y)? * scale)?.exp()?.mean_all()?)
    };
    let kww = k(g_w, g_w)?;
    let knn = k(g_n, g_n)?;
    let kwn = k(g_w, g_n)?;
    Ok(((kww + knn)? - (kwn * 2.0)?)?)
}

/// Median pairwise distance over the pooled rows of both batches.
pub fn median_heuristic(g_w: &Tensor, g_n: &Tensor) -> Result<f64> {
    let all = Tensor::cat(&[g_w, g_n], 0)?.to_dtype(candle_core::DType::F64)?;
    let d2: Vec<Vec<f64>> = sq_dists(&all, &all)?.to_vec2()?;
    let mut dists: Vec<f64> = Vec::new();
    for (i, row) in d2.iter().enumerate() {
        for v in &row[i + 1..] {
            dists.push(v.max(0.0).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(contract("median heuristic needs at least two rows"));
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    Ok(if median > 1e-6 { median } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t3(v: Vec<f64>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn zero_scorer(feature_dim: usize) -> AttentionScorer {
        let mut s = ParamStore::new(0, DType::F64, &Device::Cpu);
        AttentionScorer::from_linear(s.linear("a", feature_dim, 1, true, Init::Zeros).unwrap())
    }

    #[test]
    fn concat_three_maps() {
        let maps: Vec<TokenFeatureMap> = (0..3)
            .map(|l| TokenFeatureMap {
                data: t3((0..64).map(|i| (i + 100 * l) as f64).collect(), (2, 4, 8)),
                stage: l + 1,
                modality: Modality::W,
            })
            .collect();
        let ms = concat_multiscale(&maps).unwrap();
        assert_eq!(ms.data.dims(), &[2, 4, 24]);
        for (l, m) in maps.iter().enumerate() {
            let slice = ms.data.narrow(2, l * 8, 8).unwrap();
            assert_eq!(
                slice.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                m.data.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn concat_single_is_identity() {
        let data = t3((0..16).map(f64::from).collect(), (1, 2, 8));
        let m = TokenFeatureMap { data: data.clone(), stage: 1, modality: Modality::N };
        let ms = concat_multiscale(&[m]).unwrap();
        assert_eq!(
            ms.data.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            data.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn concat_rejects_token_mismatch() {
        let a = TokenFeatureMap { data: t3(vec![0.0; 8], (1, 2, 4)), stage: 1, modality: Modality::W };
        let b = TokenFeatureMap { data: t3(vec![0.0; 12], (1, 3, 4)), stage: 2, modality: Modality::W };
        assert!(matches!(concat_multiscale(&[a, b]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn average_of_one_and_three_is_two() {
        let f = MultiScaleFeature { data: t3(vec![1.0, 3.0], (1, 2, 1)), modality: Modality::W };
        let avg = global_average(&f).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(avg, vec![vec![2.0]]);
    }

    #[test]
    fn uniform_scores_give_average_and_double_global() {
        let f = MultiScaleFeature {
            data: t3((0..24).map(|i| (i as f64).sin()).collect(), (2, 3, 4)),
            modality: Modality::W,
        };
        let d = global_descriptor(&f, &zero_scorer(4)).unwrap();
        let att = d.attention.to_vec2::<f64>().unwrap();
        for row in &att {
            for a in row {
                assert!((a - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let avg = d.avg.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let w = d.weighted.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = d.global.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..avg.len() {
            assert!((avg[i] - w[i]).abs() < 1e-12);
            assert!((g[i] - 2.0 * avg[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_zero_descriptor() {
        let f = MultiScaleFeature { data: t3(vec![0.0; 24], (2, 3, 4)), modality: Modality::N };
        let mut s = ParamStore::new(5, DType::F64, &Device::Cpu);
        let scorer = AttentionScorer::new(&mut s, "a", 4).unwrap();
        let d = global_descriptor(&f, &scorer).unwrap();
        assert!(d.global.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dominant_score_selects_token() {
        // Scorer reads the first feature; token 1 has a huge first feature.
        let mut s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let lin = s.linear("a", 2, 1, false, Init::Zeros).unwrap();
        s.set("a.weight", &Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap()).unwrap();
        let scorer = AttentionScorer::from_linear(lin);
        let f = MultiScaleFeature {
            data: t3(vec![0.0, 1.0, 200.0, 2.0, 0.0, 3.0], (1, 3, 2)),
            modality: Modality::W,
        };
        let (w, att) = attention_pool(&f, &scorer).unwrap();
        let w = w.to_vec2::<f64>().unwrap();
        assert!((att.to_vec2::<f64>().unwrap()[0][1] - 1.0).abs() < 1e-12);
        assert!((w[0][0] - 200.0).abs() < 1e-9 && (w[0][1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mmd_identical_is_zero_and_errors() {
        let x = Tensor::new(&[[0.1f64, 0.2], [0.5, -0.3], [1.0, 2.0]], &Device::Cpu).unwrap();
        let v = mmd_loss(&x, &x, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert!(v.abs() <= 1e-7);
        assert!(matches!(mmd_loss(&x, &x, 0.0), Err(crate::Error::Config(_))));
        let one = Tensor::new(&[[0.1f64, 0.2]], &Device::Cpu).unwrap();
        assert!(matches!(mmd_loss(&one, &one, 1.0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mmd_two_point_case() {
        // Kww = Knn = 1, Kwn = exp(-1/2): 2 - 2exp(-1/2).
        let gw = Tensor::new(&[[0.0f64], [0.0]], &Device::Cpu).unwrap();
        let gn = Tensor::new(&[[1.0f64], [1.0]], &Device::Cpu).unwrap();
        let v = mmd_loss(&gw, &gn, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn sigma_parses_auto_and_number() {
        let c: MmdConfig = toml::from_str("sigma = \"auto\"\nlambda_da = 0.0001").unwrap();
        assert_eq!(c.sigma, Sigma::Auto);
        let c: MmdConfig = toml::from_str("sigma = 2.5").unwrap();
        assert_eq!(c.sigma, Sigma::Fixed(2.5));
        assert!(toml::from_str::<MmdConfig>("sigma = \"wide\"").is_err());
    }
}
