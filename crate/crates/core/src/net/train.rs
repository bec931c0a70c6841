//! SGD training on the combined objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::model::{Grads, NetworkConfig, PairOptions, SegNet};
use crate::data::{ConfusionMatrix, MiouReport, SegSample};
use crate::error::{Error, Result};
use crate::mla::{mla_loss_with_grad, AlignLevels, AlignmentBreakdown, LayerInputs, LayerTerms, DEFAULT_LAMBDA_MLA};
use crate::objective::{
    js_consistency, js_consistency_grad, task_loss_grad, total_loss, LossBreakdown, DEFAULT_LAMBDA_PC,
};
use crate::srm::DEFAULT_ALPHA;
use crate::stats::resize_labels;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Layers 1..=4 (and layer 0 when unfrozen).
    pub lr_encoder: f64,
    /// Classification head.
    pub lr_decoder: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_steps: usize,
    pub batch: usize,
    /// Square random-crop size; 0 keeps the full image.
    pub crop: usize,
    pub flip: bool,
    pub seed: u64,
    pub lambda_mla: [f64; 4],
    pub lambda_pc: f64,
    pub alpha: f64,
    pub srm: bool,
    pub pc: bool,
    pub mla: AlignLevels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 0.005,
            lr_decoder: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            max_steps: 1000,
            batch: 4,
            crop: 0,
            flip: true,
            seed: 0,
            lambda_mla: DEFAULT_LAMBDA_MLA,
            lambda_pc: DEFAULT_LAMBDA_PC,
            alpha: DEFAULT_ALPHA,
            srm: true,
            pc: true,
            mla: AlignLevels::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("poly_power", self.poly_power),
            ("alpha", self.alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if self.max_steps == 0 || self.batch == 0 {
            return Err(Error::Config("max_steps and batch must be positive".into()));
        }
        if self
            .lambda_mla
            .iter()
            .chain([&self.lambda_pc])
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether any alignment term contributes.
    pub fn uses_mla(&self) -> bool {
        self.mla.any() && self.lambda_mla.iter().any(|&l| l != 0.0)
    }

    /// Whether prediction consistency contributes.
    pub fn uses_pc(&self) -> bool {
        self.srm && self.pc && self.lambda_pc != 0.0
    }
}

/// `(1 - step / max_steps)^power`, clamped at zero.
pub fn poly_factor(step: usize, max_steps: usize, power: f64) -> f64 {
    (1.0 - step as f64 / max_steps as f64).max(0.0).powf(power)
}

/// Loss components and gradients for one sample.
#[derive(Clone, Debug)]
pub struct SampleStep {
    pub loss: LossBreakdown,
    pub alignment: AlignmentBreakdown,
    pub grads: Grads,
}

fn scale(f: &mut FeatureMap, s: f64) {
    f.data_mut().iter_mut().for_each(|v| *v *= s);
}

fn add_into(dst: &mut FeatureMap, src: &FeatureMap, s: f64) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += s * b;
    }
}

/// Forward and backward pass of the full objective on one sample.
pub fn sample_step<R: Rng + ?Sized>(
    net: &SegNet,
    sample: &SegSample,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<SampleStep> {
    let use_mla = cfg.uses_mla();
    let pair = net.forward_pair(
        &sample.image,
        &sample.labels,
        rng,
        PairOptions {
            srm: cfg.srm,
            alpha: cfg.alpha,
            neutral: use_mla,
        },
    )?;
    let task_weight = if cfg.srm { 0.5 } else { 1.0 };
    let (task_i, mut g_i) = task_loss_grad(&pair.branch_i.probs, &sample.labels)?;
    scale(&mut g_i, task_weight);
    let mut sr = match &pair.branch_sr {
        Some(b) => {
            let (t, mut g) = task_loss_grad(&b.probs, &sample.labels)?;
            scale(&mut g, task_weight);
            Some((t, g))
        }
        None => None,
    };

    let mut pc = 0.0;
    let lambda_pc = if cfg.uses_pc() { cfg.lambda_pc } else { 0.0 };
    if let (Some(b), Some((_, g_sr))) = (&pair.branch_sr, sr.as_mut()) {
        if lambda_pc != 0.0 {
            let (v, a, c) = js_consistency_grad(&pair.branch_i.probs, &b.probs)?;
            add_into(&mut g_i, &a, lambda_pc);
            add_into(g_sr, &c, lambda_pc);
            pc = v;
        } else {
            pc = js_consistency(&pair.branch_i.probs, &b.probs)?;
        }
    }

    let (alignment, feature_grads) = match &pair.neutral {
        Some(neutral) => {
            let labels: Vec<_> = neutral
                .iter()
                .map(|f| resize_labels(&sample.labels, f.height(), f.width()))
                .collect();
            let inputs: Vec<LayerInputs<'_>> = (0..4)
                .map(|l| {
                    let mut branches = vec![&pair.branch_i.features[l]];
                    if let Some(b) = &pair.branch_sr {
                        branches.push(&b.features[l]);
                    }
                    LayerInputs {
                        branches,
                        neutral: &neutral[l],
                        labels: &labels[l],
                    }
                })
                .collect();
            mla_loss_with_grad(&inputs, &cfg.lambda_mla, cfg.mla, true)?
        }
        None => (
            AlignmentBreakdown {
                layers: vec![LayerTerms::default(); 4],
                lambda_mla: cfg.lambda_mla.to_vec(),
                total: 0.0,
            },
            vec![Vec::new(); 4],
        ),
    };

    let loss = total_loss(task_i, sr.as_ref().map(|s| s.0), &alignment, pc, lambda_pc)?;

    let mut grads = net.zero_grads();
    let need_input = !net.config.frozen_layer0;
    let fg = |branch: usize| -> Vec<Option<&FeatureMap>> { feature_grads.iter().map(|g| g.get(branch)).collect() };
    let gin_i = net.backward_branch(&pair.branch_i, &g_i, &fg(0), &mut grads, need_input);
    let gin_sr = match (&pair.branch_sr, &sr) {
        (Some(b), Some((_, g))) => net.backward_branch(b, g, &fg(1), &mut grads, need_input),
        _ => None,
    };
    if let Some(gi) = gin_i {
        net.backward_shallow(&pair, &gi, gin_sr.as_ref(), &mut grads);
    }
    Ok(SampleStep { loss, alignment, grads })
}

/// One logged optimisation step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub loss: LossBreakdown,
    pub alignment: AlignmentBreakdown,
}

/// Conventions the objective leaves open, recorded with every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    /// Mixing weights span the categories present in each sample only.
    pub mix_over_present_categories: bool,
    /// Consistency is a mean over all pixels, ignore-labelled ones included.
    pub js_pixel_mean: bool,
    /// Ignore-labelled pixels join no region.
    pub ignore_in_regions: bool,
    /// The neutral twin sees the same (style-eliminated) layer-1 input as
    /// the original branch.
    pub neutral_style_elim: bool,
    pub neutral_twin: bool,
}

impl Conventions {
    pub fn of(net: &NetworkConfig) -> Self {
        Self {
            mix_over_present_categories: true,
            js_pixel_mean: true,
            ignore_in_regions: false,
            neutral_style_elim: net.style_elim,
            neutral_twin: net.neutral_twin,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: LossBreakdown,
    pub conventions: Conventions,
    pub layer0_checksum_before: String,
    pub layer0_checksum_after: String,
    pub twin_checksum_before: String,
    pub twin_checksum_after: String,
}

fn augment<R: Rng + ?Sized>(sample: &SegSample, cfg: &TrainConfig, rng: &mut R) -> SegSample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let mut s = if cfg.crop > 0 && (cfg.crop < h || cfg.crop < w) {
        let ch = cfg.crop.min(h);
        let cw = cfg.crop.min(w);
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        sample.crop(top, left, ch, cw)
    } else {
        sample.clone()
    };
    if cfg.flip && rng.gen_bool(0.5) {
        s = s.flipped();
    }
    s
}

fn sgd(
    conv: &mut Conv2d,
    grad: &super::layers::ConvGrad,
    vel: &mut super::layers::ConvGrad,
    lr: f64,
    cfg: &TrainConfig,
) {
    let params = conv.params_mut().into_iter().flat_map(|p| p.iter_mut());
    let grads = grad.params().into_iter().flatten();
    let vels = vel.params_mut().into_iter().flat_map(|v| v.iter_mut());
    for ((p, g), v) in params.zip(grads).zip(vels) {
        let d = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + d;
        *p -= lr * *v;
    }
}

/// Momentum SGD update with weight decay; frozen parameters are skipped.
pub fn apply_update(
    net: &mut SegNet,
    grads: &Grads,
    velocity: &mut Grads,
    lr_encoder: f64,
    lr_decoder: f64,
    cfg: &TrainConfig,
) {
    if !net.config.frozen_layer0 {
        sgd(&mut net.layer0, &grads.layer0, &mut velocity.layer0, lr_encoder, cfg);
    }
    for ((conv, g), v) in net.stages.iter_mut().zip(&grads.stages).zip(velocity.stages.iter_mut()) {
        sgd(conv, g, v, lr_encoder, cfg);
    }
    sgd(&mut net.head, &grads.head, &mut velocity.head, lr_decoder, cfg);
}

fn mean_breakdowns(losses: &[LossBreakdown], aligns: &[AlignmentBreakdown]) -> (LossBreakdown, AlignmentBreakdown) {
    let n = losses.len() as f64;
    let mut loss = LossBreakdown {
        lambda_pc: losses[0].lambda_pc,
        task_sr: losses[0].task_sr.map(|_| 0.0),
        ..Default::default()
    };
    for l in losses {
        loss.task_i += l.task_i / n;
        if let (Some(acc), Some(v)) = (loss.task_sr.as_mut(), l.task_sr) {
            *acc += v / n;
        }
        loss.mla_total += l.mla_total / n;
        loss.pc += l.pc / n;
        loss.total += l.total / n;
    }
    let mut align = AlignmentBreakdown {
        layers: vec![LayerTerms::default(); aligns[0].layers.len()],
        lambda_mla: aligns[0].lambda_mla.clone(),
        total: 0.0,
    };
    for a in aligns {
        for (acc, t) in align.layers.iter_mut().zip(&a.layers) {
            acc.global += t.global / n;
            acc.regional += t.regional / n;
            acc.local += t.local / n;
        }
        align.total += a.total / n;
    }
    (loss, align)
}

/// Trains `net` in place. `on_step` receives every step record in order.
pub fn train(
    net: &mut SegNet,
    data: &[SegSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let layer0_before = net.layer0_checksum();
    let twin_before = net.twin_checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = net.zero_grads();
    let mut last = LossBreakdown::default();
    for step in 0..cfg.max_steps {
        let factor = poly_factor(step, cfg.max_steps, cfg.poly_power);
        let (lr_enc, lr_dec) = (cfg.lr_encoder * factor, cfg.lr_decoder * factor);
        let mut acc = net.zero_grads();
        let mut losses = Vec::with_capacity(cfg.batch);
        let mut aligns = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..data.len());
            let sample = augment(&data[idx], cfg, &mut rng);
            let out = sample_step(net, &sample, &mut rng, cfg)?;
            acc.add_scaled(&out.grads, 1.0 / cfg.batch as f64);
            losses.push(out.loss);
            aligns.push(out.alignment);
        }
        let (loss, alignment) = mean_breakdowns(&losses, &aligns);
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step, loss: loss.total });
        }
        apply_update(net, &acc, &mut velocity, lr_enc, lr_dec, cfg);
        let record = StepRecord {
            step,
            lr_encoder: lr_enc,
            lr_decoder: lr_dec,
            loss,
            alignment,
        };
        on_step(&record);
        last = record.loss;
    }
    Ok(TrainSummary {
        steps: cfg.max_steps,
        final_loss: last,
        conventions: Conventions::of(&net.config),
        layer0_checksum_before: layer0_before,
        layer0_checksum_after: net.layer0_checksum(),
        twin_checksum_before: twin_before,
        twin_checksum_after: net.twin_checksum(),
    })
}

/// Confusion-matrix mIoU of `net` on `samples`.
pub fn evaluate(net: &SegNet, samples: &[SegSample]) -> Result<MiouReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    for s in samples {
        let pred = net.predict(&s.image)?;
        cm.add(&pred, &s.labels)?;
    }
    Ok(cm.report())
}
