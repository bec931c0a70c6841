//! Semantic rearrangement: per-region style randomization of shallow
//! features by Dirichlet-weighted mixing of the sample's own regional
//! statistics, transferred back with AdaIN.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{moments_at, RegionStats};
use crate::tensor::{FeatureMap, LabelMap, EPS_STD};

/// Default Dirichlet concentration.
pub const DEFAULT_ALPHA: f64 = 1.0 / 64.0;

/// One mixing-weight row per present category, each over the same present
/// categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub categories: Vec<u8>,
    /// `weights[i][j]`: contribution of `categories[j]` to the new style of
    /// `categories[i]`.
    pub weights: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl MixWeights {
    pub fn row(&self, category: u8) -> Option<&[f64]> {
        self.categories
            .iter()
            .position(|&c| c == category)
            .map(|i| self.weights[i].as_slice())
    }
}

/// Symmetric Dirichlet draw of dimension `k`.
///
/// Components are generated in log space through
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)`, so concentrations far below one do
/// not underflow every component to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, alpha: f64) -> Vec<f64> {
    assert!(k >= 1, "dirichlet dimension must be positive");
    assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma parameters");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.gen::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Independent Dirichlet(K, alpha) weights for every present category.
pub fn sample_mix_weights<R: Rng + ?Sized>(rng: &mut R, present_categories: &[u8], alpha: f64) -> Result<MixWeights> {
    if present_categories.is_empty() {
        return Err(Error::InvalidInput("no present categories to mix".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    let k = present_categories.len();
    let weights = (0..k).map(|_| sample_dirichlet(rng, k, alpha)).collect();
    Ok(MixWeights {
        categories: present_categories.to_vec(),
        weights,
        alpha,
    })
}

/// Convex combination of region means and of region stds.
pub fn synthesize_distribution(stats: &[RegionStats], w: &[f64]) -> Result<RegionStats> {
    if stats.len() != w.len() || stats.is_empty() {
        return Err(Error::shape(
            format!("{} weights", stats.len()),
            format!("{} weights", w.len()),
        ));
    }
    let d = stats[0].mean.len();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for (s, &wi) in stats.iter().zip(w) {
        if s.mean.len() != d || s.std.len() != d {
            return Err(Error::shape(format!("{d} channels"), s.mean.len()));
        }
        for k in 0..d {
            mean[k] += wi * s.mean[k];
            std[k] += wi * s.std[k];
        }
    }
    let best = w
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(RegionStats {
        category: stats[best].category,
        mean,
        std,
        pixel_count: stats[best].pixel_count,
    })
}

/// `dst.std * (x - src.mean) / src.std + dst.mean`, channel-wise.
pub fn adain_transfer(region_pixels: &[Vec<f64>], src: &RegionStats, dst: &RegionStats) -> Vec<Vec<f64>> {
    region_pixels
        .iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .map(|(k, &v)| dst.std[k] * (v - src.mean[k]) / src.std[k].max(EPS_STD) + dst.mean[k])
                .collect()
        })
        .collect()
}

/// Result of rearranging one shallow feature map.
#[derive(Clone, Debug)]
pub struct Rearrangement {
    pub output: FeatureMap,
    pub weights: MixWeights,
    /// Original region statistics, parallel to `weights.categories`.
    pub original: Vec<RegionStats>,
    /// Synthesized target statistics, parallel to `weights.categories`.
    pub synthesized: Vec<RegionStats>,
}

impl Rearrangement {
    /// Backpropagates through the per-region affine maps with the region
    /// statistics held constant.
    pub fn input_gradient(&self, gt: &LabelMap, grad_out: &FeatureMap) -> FeatureMap {
        let mut grad = grad_out.clone();
        let n = grad.area();
        let slot: Vec<Option<usize>> = (0..gt.num_categories())
            .map(|c| self.weights.categories.iter().position(|&k| k as usize == c))
            .collect();
        for (p, &label) in gt.data().iter().enumerate() {
            let Some(i) = slot.get(label as usize).copied().flatten() else {
                continue;
            };
            let (src, dst) = (&self.original[i], &self.synthesized[i]);
            for d in 0..grad.channels() {
                grad.data_mut()[d * n + p] *= dst.std[d] / src.std[d];
            }
        }
        grad
    }
}

/// Rearranges the regional styles of a shallow feature map. Ignore-labelled
/// positions are copied through.
pub fn rearrange<R: Rng + ?Sized>(f_s: &FeatureMap, gt_s: &LabelMap, rng: &mut R, alpha: f64) -> Result<Rearrangement> {
    if f_s.layer_id != 0 {
        return Err(Error::InvalidInput(format!(
            "rearrangement applies to layer 0 features, got layer {}",
            f_s.layer_id
        )));
    }
    gt_s.check_spatial(f_s)?;
    let regions = gt_s.region_indices();
    let present: Vec<u8> = (0..regions.len())
        .filter(|&c| !regions[c].is_empty())
        .map(|c| c as u8)
        .collect();
    if present.is_empty() {
        return Ok(Rearrangement {
            output: f_s.clone(),
            weights: MixWeights {
                categories: Vec::new(),
                weights: Vec::new(),
                alpha,
            },
            original: Vec::new(),
            synthesized: Vec::new(),
        });
    }
    let original: Vec<RegionStats> = present
        .iter()
        .map(|&c| moments_at(f_s, &regions[c as usize], c))
        .collect();
    let weights = sample_mix_weights(rng, &present, alpha)?;
    let mut synthesized = Vec::with_capacity(present.len());
    for (i, &c) in present.iter().enumerate() {
        let mut s = synthesize_distribution(&original, &weights.weights[i])?;
        s.category = c;
        s.pixel_count = original[i].pixel_count;
        synthesized.push(s);
    }

    let mut output = f_s.clone();
    let n = output.area();
    for (i, &c) in present.iter().enumerate() {
        let (src, dst) = (&original[i], &synthesized[i]);
        for d in 0..output.channels() {
            let scale = dst.std[d] / src.std[d];
            let shift = dst.mean[d] - scale * src.mean[d];
            let ch = &mut output.data_mut()[d * n..(d + 1) * n];
            for &p in &regions[c as usize] {
                ch[p] = scale * ch[p] + shift;
            }
        }
    }
    Ok(Rearrangement {
        output,
        weights,
        original,
        synthesized,
    })
}
