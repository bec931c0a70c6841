//! Analytic-versus-finite-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{NetworkConfig, SegNet, HEAD_LAYER};
use super::train::{sample_step, TrainConfig};
use crate::data::SegSample;
use crate::error::Result;
use crate::mla::{align_layer, mla_loss_with_grad, AlignLevels, LayerInputs, DEFAULT_LAMBDA_MLA};
use crate::objective::{js_consistency_grad, task_loss_grad, ProbabilityMap};
use crate::tensor::{FeatureMap, LabelMap};

/// Loss whose gradient is checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradLoss {
    Global,
    Regional,
    Local,
    Mla,
    Pc,
    Task,
    /// The full training objective with respect to network parameters.
    Network,
}

impl GradLoss {
    pub const ALL: [GradLoss; 7] = [
        GradLoss::Global,
        GradLoss::Regional,
        GradLoss::Local,
        GradLoss::Mla,
        GradLoss::Pc,
        GradLoss::Task,
        GradLoss::Network,
    ];
}

impl std::str::FromStr for GradLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "global" => GradLoss::Global,
            "regional" => GradLoss::Regional,
            "local" => GradLoss::Local,
            "mla" => GradLoss::Mla,
            "pc" => GradLoss::Pc,
            "task" => GradLoss::Task,
            "network" => GradLoss::Network,
            other => return Err(format!("unknown loss {other:?}")),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: GradLoss,
    /// `|a - n| / max(|a|, |n|)` over the whole gradient vector.
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub entries: usize,
}

/// Norm-wise relative error; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

const STEP: f64 = 1e-4;

fn random_map(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), layer: u8) -> FeatureMap {
    let (c, h, w) = shape;
    FeatureMap::from_vec(
        (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        c,
        h,
        w,
        layer,
    )
    .expect("finite")
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    LabelMap::new(
        (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect(),
        h,
        w,
        classes,
    )
    .expect("labels in range")
}

/// Central differences of `f` over `params`.
fn numeric_grad(params: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + step;
            let up = f(params);
            params[i] = orig - step;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn concat(a: &FeatureMap, b: &FeatureMap) -> Vec<f64> {
    a.data().iter().chain(b.data()).copied().collect()
}

fn split_pair(v: &[f64], shape: (usize, usize, usize), layer: u8) -> (FeatureMap, FeatureMap) {
    let n = v.len() / 2;
    let (c, h, w) = shape;
    (
        FeatureMap::from_vec(v[..n].to_vec(), c, h, w, layer).expect("finite"),
        FeatureMap::from_vec(v[n..].to_vec(), c, h, w, layer).expect("finite"),
    )
}

/// Checks one loss on random probes of `channels × size × size` (features)
/// or `classes × size × size` (predictions).
pub fn gradcheck(loss: GradLoss, channels: usize, size: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (channels, size, size);
    let (analytic, numeric) = match loss {
        GradLoss::Global | GradLoss::Regional | GradLoss::Local => {
            let levels = AlignLevels {
                global: loss == GradLoss::Global,
                regional: loss == GradLoss::Regional,
                local: loss == GradLoss::Local,
            };
            let fi = random_map(&mut rng, shape, 1);
            let fsr = random_map(&mut rng, shape, 1);
            let fn_ = random_map(&mut rng, shape, 1);
            let gt = random_labels(&mut rng, size, size, 3);
            let eval = |v: &[f64], grad: bool| {
                let (a, b) = split_pair(v, shape, 1);
                let inputs = LayerInputs {
                    branches: vec![&a, &b],
                    neutral: &fn_,
                    labels: &gt,
                };
                align_layer(&inputs, levels, grad).expect("matching shapes")
            };
            let mut params = concat(&fi, &fsr);
            let (_, grads) = eval(&params, true);
            let analytic = concat(&grads[0], &grads[1]);
            let numeric = numeric_grad(&mut params, STEP, |v| eval(v, false).0.sum());
            (analytic, numeric)
        }
        GradLoss::Mla => {
            let maps: Vec<FeatureMap> = (0..12)
                .map(|l| random_map(&mut rng, shape, (l / 3 + 1) as u8))
                .collect();
            let gt = random_labels(&mut rng, size, size, 3);
            let mut params: Vec<f64> = (0..4).flat_map(|l| concat(&maps[3 * l], &maps[3 * l + 1])).collect();
            let per = 2 * channels * size * size;
            let eval = |v: &[f64], grad: bool| {
                let pairs: Vec<(FeatureMap, FeatureMap)> = (0..4)
                    .map(|l| split_pair(&v[l * per..(l + 1) * per], shape, l as u8 + 1))
                    .collect();
                let inputs: Vec<LayerInputs<'_>> = (0..4)
                    .map(|l| LayerInputs {
                        branches: vec![&pairs[l].0, &pairs[l].1],
                        neutral: &maps[3 * l + 2],
                        labels: &gt,
                    })
                    .collect();
                mla_loss_with_grad(&inputs, &DEFAULT_LAMBDA_MLA, AlignLevels::ALL, grad).expect("matching shapes")
            };
            let (_, grads) = eval(&params, true);
            let analytic: Vec<f64> = grads.iter().flat_map(|g| concat(&g[0], &g[1])).collect();
            let numeric = numeric_grad(&mut params, STEP, |v| eval(v, false).0.total);
            (analytic, numeric)
        }
        GradLoss::Pc => {
            let a = random_map(&mut rng, shape, HEAD_LAYER);
            let b = random_map(&mut rng, shape, HEAD_LAYER);
            let eval = |v: &[f64]| {
                let (x, y) = split_pair(v, shape, HEAD_LAYER);
                js_consistency_grad(&ProbabilityMap::from_logits(&x), &ProbabilityMap::from_logits(&y))
                    .expect("same shape")
            };
            let mut params = concat(&a, &b);
            let (_, ga, gb) = eval(&params);
            let numeric = numeric_grad(&mut params, STEP, |v| eval(v).0);
            (concat(&ga, &gb), numeric)
        }
        GradLoss::Task => {
            let logits = random_map(&mut rng, shape, HEAD_LAYER);
            let gt = random_labels(&mut rng, size, size, channels);
            let eval = |v: &[f64]| {
                let x = FeatureMap::from_vec(v.to_vec(), channels, size, size, HEAD_LAYER).expect("finite");
                task_loss_grad(&ProbabilityMap::from_logits(&x), &gt).expect("valid pixels")
            };
            let mut params = logits.data().to_vec();
            let (_, g) = eval(&params);
            let numeric = numeric_grad(&mut params, STEP, |v| eval(v).0);
            (g.data().to_vec(), numeric)
        }
        GradLoss::Network => network_check(&mut rng, channels, size)?,
    };
    Ok(GradCheckReport {
        loss,
        relative_error: relative_error(&analytic, &numeric),
        analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        entries: analytic.len(),
    })
}

/// Full objective against a sample of stage, head and (unfrozen) layer-0
/// parameters.
fn network_check(rng: &mut ChaCha8Rng, channels: usize, size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let config = NetworkConfig {
        channels: [channels, channels + 1, channels + 2, channels + 1, channels],
        strides: [1, 2, 1, 1, 1],
        num_classes: 3,
        seed: rng.gen(),
        frozen_layer0: false,
        ..Default::default()
    };
    let mut net = SegNet::new(config)?;
    // move the trainable stages away from the neutral twin
    for conv in &mut net.stages {
        conv.weight.iter_mut().for_each(|w| *w += rng.gen_range(-0.1..0.1));
        conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let image = random_map(rng, (3, size, size), 0);
    let image = FeatureMap::from_vec(image.data().iter().map(|v| 0.5 + 0.5 * v).collect(), 3, size, size, 0)?;
    let labels = random_labels(rng, size, size, 3);
    let sample = SegSample {
        id: "probe".into(),
        image,
        labels,
    };
    let cfg = TrainConfig {
        alpha: 0.5,
        ..Default::default()
    };
    // Neutral targets carry no gradient, so layer 0 is probed on the task
    // objective alone where every path is differentiated.
    let cfg_layer0 = TrainConfig {
        srm: false,
        pc: false,
        mla: AlignLevels::NONE,
        ..cfg.clone()
    };
    let srm_seed: u64 = rng.gen();
    let step = sample_step(&net, &sample, &mut ChaCha8Rng::seed_from_u64(srm_seed), &cfg)?;
    let step0 = sample_step(&net, &sample, &mut ChaCha8Rng::seed_from_u64(srm_seed), &cfg_layer0)?;

    // (conv index in [layer0, stage1..4, head], weight index)
    let mut picks = Vec::new();
    for conv_idx in 0..6 {
        for _ in 0..6 {
            let len = match conv_idx {
                0 => net.layer0.weight.len(),
                5 => net.head.weight.len(),
                k => net.stages[k - 1].weight.len(),
            };
            picks.push((conv_idx, rng.gen_range(0..len)));
        }
    }
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&(c, i)| match c {
            0 => step0.grads.layer0.weight[i],
            5 => step.grads.head.weight[i],
            k => step.grads.stages[k - 1].weight[i],
        })
        .collect();
    let mut numeric = Vec::with_capacity(picks.len());
    for &(c, i) in &picks {
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = net.clone();
            let w = match c {
                0 => &mut probe.layer0.weight[i],
                5 => &mut probe.head.weight[i],
                k => &mut probe.stages[k - 1].weight[i],
            };
            *w += delta;
            let c_cfg = if c == 0 { &cfg_layer0 } else { &cfg };
            let out = sample_step(&probe, &sample, &mut ChaCha8Rng::seed_from_u64(srm_seed), c_cfg)?;
            Ok(out.loss.total)
        };
        let h = 1e-6;
        numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    Ok((analytic, numeric))
}
