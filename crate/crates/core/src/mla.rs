//! Style elimination and multi-level alignment of deep features against
//! frozen domain-neutral features.
//!
//! Every alignment term comes with its analytic gradient with respect to the
//! segmentation-branch features. The neutral features are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{gap, mean_at};
use crate::tensor::{FeatureMap, LabelMap, EPS_STD};

/// Default per-layer weights for layers 1..=4.
pub const DEFAULT_LAMBDA_MLA: [f64; 4] = [0.4, 0.6, 0.8, 1.0];

/// Parameter-free instance normalization over each channel.
pub fn style_eliminate(f_s: &FeatureMap) -> FeatureMap {
    let mut out = f_s.clone();
    let n = out.area() as f64;
    for c in 0..out.channels() {
        let ch = out.channel_mut(c);
        let mu = ch.iter().sum::<f64>() / n;
        let sigma = (ch.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(EPS_STD);
        for v in ch.iter_mut() {
            *v = (*v - mu) / sigma;
        }
    }
    out
}

/// Gradient of [`style_eliminate`] with respect to its input.
pub fn style_eliminate_backward(input: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    let mut grad = grad_out.clone();
    let n = input.area() as f64;
    for c in 0..input.channels() {
        let x = input.channel(c);
        let mu = x.iter().sum::<f64>() / n;
        let raw = (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        let g = grad.channel_mut(c);
        let g_mean = g.iter().sum::<f64>() / n;
        if raw <= EPS_STD {
            // floored sigma is a constant
            for gv in g.iter_mut() {
                *gv = (*gv - g_mean) / EPS_STD;
            }
            continue;
        }
        let gy_mean = g.iter().zip(x).map(|(gv, xv)| gv * (xv - mu) / raw).sum::<f64>() / n;
        for (gv, xv) in g.iter_mut().zip(x) {
            let y = (xv - mu) / raw;
            *gv = (*gv - g_mean - y * gy_mean) / raw;
        }
    }
    grad
}

/// Which alignment levels are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignLevels {
    pub global: bool,
    pub regional: bool,
    pub local: bool,
}

impl Default for AlignLevels {
    fn default() -> Self {
        Self::ALL
    }
}

impl AlignLevels {
    pub const ALL: AlignLevels = AlignLevels {
        global: true,
        regional: true,
        local: true,
    };
    pub const NONE: AlignLevels = AlignLevels {
        global: false,
        regional: false,
        local: false,
    };

    pub fn any(&self) -> bool {
        self.global || self.regional || self.local
    }
}

/// One branch's squared center distance to the neutral center, over `D`.
fn global_term(f_k: &FeatureMap, f_n: &FeatureMap, grad: Option<&mut FeatureMap>) -> f64 {
    let d = f_k.channels() as f64;
    let gk = gap(f_k);
    let gn = gap(f_n);
    let value = gk.iter().zip(&gn).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d;
    if let Some(grad) = grad {
        let scale = 2.0 / (d * f_k.area() as f64);
        for c in 0..f_k.channels() {
            let g = scale * (gk[c] - gn[c]);
            grad.channel_mut(c).iter_mut().for_each(|v| *v += g);
        }
    }
    value
}

fn regional_term(f_k: &FeatureMap, f_n: &FeatureMap, regions: &[Vec<usize>], mut grad: Option<&mut FeatureMap>) -> f64 {
    let d = f_k.channels() as f64;
    let area = f_k.area() as f64;
    let mut value = 0.0;
    for idx in regions.iter().filter(|r| !r.is_empty()) {
        let omega = idx.len() as f64 / area;
        let sk = mean_at(f_k, idx);
        let sn = mean_at(f_n, idx);
        value += omega * sk.iter().zip(&sn).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d;
        if let Some(grad) = grad.as_deref_mut() {
            // omega / |region| == 1 / area
            let scale = 2.0 / (d * area);
            for c in 0..f_k.channels() {
                let g = scale * (sk[c] - sn[c]);
                let ch = grad.channel_mut(c);
                for &p in idx {
                    ch[p] += g;
                }
            }
        }
    }
    value
}

fn local_term(f_k: &FeatureMap, f_n: &FeatureMap, grad: Option<&mut FeatureMap>) -> f64 {
    let norm = (f_k.channels() * f_k.area()) as f64;
    let value = f_k
        .data()
        .iter()
        .zip(f_n.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / norm;
    if let Some(grad) = grad {
        for ((g, a), b) in grad.data_mut().iter_mut().zip(f_k.data()).zip(f_n.data()) {
            *g += 2.0 * (a - b) / norm;
        }
    }
    value
}

/// Global-level alignment summed over the original and rearranged branches.
pub fn global_alignment(f_i: &FeatureMap, f_sr: &FeatureMap, f_n: &FeatureMap) -> Result<f64> {
    f_i.check_same_shape(f_n)?;
    f_sr.check_same_shape(f_n)?;
    Ok(global_term(f_i, f_n, None) + global_term(f_sr, f_n, None))
}

/// Regional-level alignment; region weights are pixel ratios of `gt_l`.
pub fn regional_alignment(f_i: &FeatureMap, f_sr: &FeatureMap, f_n: &FeatureMap, gt_l: &LabelMap) -> Result<f64> {
    f_i.check_same_shape(f_n)?;
    f_sr.check_same_shape(f_n)?;
    gt_l.check_spatial(f_n)?;
    let regions = gt_l.region_indices();
    Ok(regional_term(f_i, f_n, &regions, None) + regional_term(f_sr, f_n, &regions, None))
}

/// Local (per-pixel) alignment.
pub fn local_alignment(f_i: &FeatureMap, f_sr: &FeatureMap, f_n: &FeatureMap) -> Result<f64> {
    f_i.check_same_shape(f_n)?;
    f_sr.check_same_shape(f_n)?;
    Ok(local_term(f_i, f_n, None) + local_term(f_sr, f_n, None))
}

/// Alignment terms of one deep layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub global: f64,
    pub regional: f64,
    pub local: f64,
}

impl LayerTerms {
    pub fn sum(&self) -> f64 {
        self.global + self.regional + self.local
    }
}

/// Per-layer alignment terms and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBreakdown {
    pub layers: Vec<LayerTerms>,
    pub lambda_mla: Vec<f64>,
    pub total: f64,
}

/// Inputs for one aligned layer. `branches` holds the segmentation-branch
/// features (original first, rearranged second when present).
pub struct LayerInputs<'a> {
    pub branches: Vec<&'a FeatureMap>,
    pub neutral: &'a FeatureMap,
    pub labels: &'a LabelMap,
}

/// Terms of one layer and, optionally, gradients for each branch.
pub fn align_layer(
    inputs: &LayerInputs<'_>,
    levels: AlignLevels,
    with_grad: bool,
) -> Result<(LayerTerms, Vec<FeatureMap>)> {
    let f_n = inputs.neutral;
    inputs.labels.check_spatial(f_n)?;
    let regions = if levels.regional {
        inputs.labels.region_indices()
    } else {
        Vec::new()
    };
    let mut terms = LayerTerms::default();
    let mut grads = Vec::new();
    for f_k in &inputs.branches {
        f_k.check_same_shape(f_n)?;
        let mut g = with_grad.then(|| FeatureMap::zeros(f_k.channels(), f_k.height(), f_k.width(), f_k.layer_id));
        if levels.global {
            terms.global += global_term(f_k, f_n, g.as_mut());
        }
        if levels.regional {
            terms.regional += regional_term(f_k, f_n, &regions, g.as_mut());
        }
        if levels.local {
            terms.local += local_term(f_k, f_n, g.as_mut());
        }
        grads.extend(g);
    }
    Ok((terms, grads))
}

/// Weighted multi-layer alignment. Gradients are returned per layer and per
/// branch, already scaled by the layer weight.
pub fn mla_loss_with_grad(
    per_layer: &[LayerInputs<'_>],
    lambda_mla: &[f64],
    levels: AlignLevels,
    with_grad: bool,
) -> Result<(AlignmentBreakdown, Vec<Vec<FeatureMap>>)> {
    if per_layer.len() != lambda_mla.len() {
        return Err(Error::shape(
            format!("{} layer weights", per_layer.len()),
            format!("{}", lambda_mla.len()),
        ));
    }
    let mut breakdown = AlignmentBreakdown {
        layers: Vec::with_capacity(per_layer.len()),
        lambda_mla: lambda_mla.to_vec(),
        total: 0.0,
    };
    let mut all_grads = Vec::with_capacity(per_layer.len());
    for (inputs, &lambda) in per_layer.iter().zip(lambda_mla) {
        let (terms, mut grads) = align_layer(inputs, levels, with_grad && lambda != 0.0)?;
        breakdown.total += lambda * terms.sum();
        breakdown.layers.push(terms);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= lambda);
        }
        all_grads.push(grads);
    }
    Ok((breakdown, all_grads))
}

/// Weighted multi-layer alignment over all three levels.
pub fn mla_loss(per_layer: &[LayerInputs<'_>], lambda_mla: &[f64]) -> Result<AlignmentBreakdown> {
    Ok(mla_loss_with_grad(per_layer, lambda_mla, AlignLevels::ALL, false)?.0)
}
