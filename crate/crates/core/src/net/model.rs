//! Five-stage segmentation network with a frozen shallow layer and a frozen
//! domain-neutral twin of the deep stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    bilinear_resize, bilinear_resize_backward, relu_backward_inplace, relu_inplace, Conv2d, ConvCache, ConvGrad,
};
use crate::error::{Error, Result};
use crate::mla::{style_eliminate, style_eliminate_backward};
use crate::objective::ProbabilityMap;
use crate::srm::{rearrange, Rearrangement};
use crate::stats::resize_labels;
use crate::tensor::{FeatureMap, LabelMap};

/// Layer id attached to logit maps.
pub const HEAD_LAYER: u8 = 5;

/// Images share the feature-map layout: `3 × H × W`, values in `[0, 1]`.
pub type Image = FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Output channels of layers 0..=4.
    pub channels: [usize; 5],
    pub strides: [usize; 5],
    pub kernel: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub frozen_layer0: bool,
    /// When off, the neutral features come from the live stages (detached).
    pub neutral_twin: bool,
    /// Parameter-free instance normalization after layer 0, at training and
    /// inference time alike.
    pub style_elim: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: [16, 24, 32, 48, 64],
            strides: [1, 2, 2, 1, 1],
            kernel: 3,
            num_classes: 5,
            seed: 0,
            frozen_layer0: true,
            neutral_twin: true,
            style_elim: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.strides.contains(&0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("kernel must be odd".into()));
        }
        if !(1..255).contains(&self.num_classes) {
            return Err(Error::Config("num_classes must be in 1..=254".into()));
        }
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Raw layer 0 output.
    pub shallow: FeatureMap,
    /// Layers 1..=4.
    pub features: Vec<FeatureMap>,
    pub logits: FeatureMap,
    pub probs: ProbabilityMap,
}

/// Activations of one segmentation branch kept for backpropagation.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    caches: Vec<ConvCache>,
    /// Stage outputs, layers 1..=4.
    pub features: Vec<FeatureMap>,
    head_cache: ConvCache,
    head_hw: (usize, usize),
    pub probs: ProbabilityMap,
}

/// Everything a training step needs from the paired forward pass.
#[derive(Clone, Debug)]
pub struct PairOutput {
    pub shallow: FeatureMap,
    shallow_cache: ConvCache,
    pub gt_shallow: LabelMap,
    /// Input to layer 1 on the original branch.
    pub input_i: FeatureMap,
    pub branch_i: BranchTrace,
    pub rearranged: Option<Rearrangement>,
    pub input_sr: Option<FeatureMap>,
    pub branch_sr: Option<BranchTrace>,
    /// Neutral features of layers 1..=4, computed without gradient.
    pub neutral: Option<Vec<FeatureMap>>,
}

/// Parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layer0: ConvGrad,
    pub stages: Vec<ConvGrad>,
    pub head: ConvGrad,
}

impl Grads {
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        self.layer0.add_scaled(&other.layer0, scale);
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.add_scaled(b, scale);
        }
        self.head.add_scaled(&other.head, scale);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub config: NetworkConfig,
    pub layer0: Conv2d,
    pub stages: Vec<Conv2d>,
    pub twin: Vec<Conv2d>,
    pub head: Conv2d,
}

impl SegNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel;
        let layer0 = Conv2d::init(&mut rng, config.in_channels, config.channels[0], k, config.strides[0]).with_norm();
        let stages: Vec<Conv2d> = (1..5)
            .map(|l| {
                Conv2d::init(
                    &mut rng,
                    config.channels[l - 1],
                    config.channels[l],
                    k,
                    config.strides[l],
                )
                .with_norm()
            })
            .collect();
        let mut head = Conv2d::init(&mut rng, config.channels[4], config.num_classes, 1, 1);
        let scale = (0.5f64).sqrt();
        head.weight.iter_mut().for_each(|w| *w *= scale);
        let twin = stages.clone();
        Ok(Self {
            config,
            layer0,
            stages,
            twin,
            head,
        })
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            layer0: ConvGrad::zeros_like(&self.layer0),
            stages: self.stages.iter().map(ConvGrad::zeros_like).collect(),
            head: ConvGrad::zeros_like(&self.head),
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.config.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.config.in_channels),
                image.channels(),
            ));
        }
        Ok(())
    }

    fn shallow_with_cache(&self, image: &Image) -> (FeatureMap, ConvCache) {
        let (mut f, cache) = self.layer0.forward(image, 0);
        relu_inplace(&mut f);
        (f, cache)
    }

    /// Layer 0 output before style elimination.
    pub fn shallow(&self, image: &Image) -> Result<FeatureMap> {
        self.check_image(image)?;
        Ok(self.shallow_with_cache(image).0)
    }

    /// Input to layer 1 derived from a shallow feature map.
    pub fn stage_input(&self, shallow: &FeatureMap) -> FeatureMap {
        if self.config.style_elim {
            style_eliminate(shallow)
        } else {
            shallow.clone()
        }
    }

    fn run_stages(convs: &[Conv2d], input: &FeatureMap) -> (Vec<FeatureMap>, Vec<ConvCache>) {
        let mut features = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        let mut x = input;
        for (l, conv) in convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(x, l as u8 + 1);
            relu_inplace(&mut y);
            features.push(y);
            caches.push(cache);
            x = features.last().expect("just pushed");
        }
        (features, caches)
    }

    /// Runs layers 1..=4 and the head from a layer-1 input.
    pub fn run_branch(&self, input: &FeatureMap, out_h: usize, out_w: usize) -> BranchTrace {
        let (features, caches) = Self::run_stages(&self.stages, input);
        let (small, head_cache) = self.head.forward(&features[3], HEAD_LAYER);
        let head_hw = (small.height(), small.width());
        let logits = bilinear_resize(&small, out_h, out_w);
        BranchTrace {
            caches,
            features,
            head_cache,
            head_hw,
            probs: ProbabilityMap::from_logits(&logits),
        }
    }

    /// Neutral features of layers 1..=4; never differentiated.
    pub fn neutral_features(&self, input: &FeatureMap) -> Vec<FeatureMap> {
        let convs = if self.config.neutral_twin {
            &self.twin
        } else {
            &self.stages
        };
        Self::run_stages(convs, input).0
    }

    pub fn forward(&self, image: &Image) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let shallow = self.shallow_with_cache(image).0;
        let input = self.stage_input(&shallow);
        let (features, _) = Self::run_stages(&self.stages, &input);
        let small = self.head.forward(&features[3], HEAD_LAYER).0;
        let logits = bilinear_resize(&small, image.height(), image.width());
        let probs = ProbabilityMap::from_logits(&logits);
        Ok(ForwardOutput {
            shallow,
            features,
            logits,
            probs,
        })
    }

    /// Features of `layer` (0 = raw shallow output, 1..=4 deep stages).
    pub fn features_at(&self, image: &Image, layer: usize) -> Result<FeatureMap> {
        if layer > 4 {
            return Err(Error::InvalidInput(format!("layer must be in 0..=4, got {layer}")));
        }
        let out = self.forward(image)?;
        Ok(if layer == 0 {
            out.shallow
        } else {
            out.features.into_iter().nth(layer - 1).expect("four stages")
        })
    }

    pub fn predict(&self, image: &Image) -> Result<LabelMap> {
        Ok(self.forward(image)?.probs.argmax())
    }

    /// Original and rearranged branches plus neutral features.
    pub fn forward_pair<R: Rng + ?Sized>(
        &self,
        image: &Image,
        gt: &LabelMap,
        rng: &mut R,
        opts: PairOptions,
    ) -> Result<PairOutput> {
        self.check_image(image)?;
        if gt.height() != image.height() || gt.width() != image.width() {
            return Err(Error::shape(
                format!("{}x{} labels", image.height(), image.width()),
                format!("{}x{}", gt.height(), gt.width()),
            ));
        }
        let (h, w) = (image.height(), image.width());
        let (shallow, shallow_cache) = self.shallow_with_cache(image);
        let gt_shallow = resize_labels(gt, shallow.height(), shallow.width());
        let input_i = self.stage_input(&shallow);
        let branch_i = self.run_branch(&input_i, h, w);
        let (rearranged, input_sr, branch_sr) = if opts.srm {
            let r = rearrange(&shallow, &gt_shallow, rng, opts.alpha)?;
            let input = self.stage_input(&r.output);
            let trace = self.run_branch(&input, h, w);
            (Some(r), Some(input), Some(trace))
        } else {
            (None, None, None)
        };
        let neutral = opts.neutral.then(|| self.neutral_features(&input_i));
        Ok(PairOutput {
            shallow,
            shallow_cache,
            gt_shallow,
            input_i,
            branch_i,
            rearranged,
            input_sr,
            branch_sr,
            neutral,
        })
    }

    /// Backpropagates one branch. `feature_grads[l]` is added to the
    /// gradient of the layer `l + 1` output. Returns the gradient with respect
    /// to the layer-1 input when `need_input` is set.
    pub fn backward_branch(
        &self,
        trace: &BranchTrace,
        grad_logits: &FeatureMap,
        feature_grads: &[Option<&FeatureMap>],
        grads: &mut Grads,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let g_small = bilinear_resize_backward(grad_logits, trace.head_hw.0, trace.head_hw.1);
        let mut g = self
            .head
            .backward(&trace.head_cache, &g_small, &mut grads.head, true)
            .expect("input gradient requested");
        for l in (0..4).rev() {
            if let Some(Some(extra)) = feature_grads.get(l) {
                for (a, b) in g.data_mut().iter_mut().zip(extra.data()) {
                    *a += b;
                }
            }
            relu_backward_inplace(&trace.features[l], &mut g);
            let want_input = l > 0 || need_input;
            g = self.stages[l].backward(&trace.caches[l], &g, &mut grads.stages[l], want_input)?;
        }
        Some(g)
    }

    /// Backpropagates gradients arriving at the layer-1 inputs of both
    /// branches into layer 0.
    pub fn backward_shallow(
        &self,
        pair: &PairOutput,
        grad_input_i: &FeatureMap,
        grad_input_sr: Option<&FeatureMap>,
        grads: &mut Grads,
    ) {
        let through_se = |input: &FeatureMap, g: &FeatureMap| {
            if self.config.style_elim {
                style_eliminate_backward(input, g)
            } else {
                g.clone()
            }
        };
        let mut g = through_se(&pair.shallow, grad_input_i);
        if let (Some(gsr), Some(r)) = (grad_input_sr, pair.rearranged.as_ref()) {
            let g_out = through_se(&r.output, gsr);
            let g_in = r.input_gradient(&pair.gt_shallow, &g_out);
            for (a, b) in g.data_mut().iter_mut().zip(g_in.data()) {
                *a += b;
            }
        }
        relu_backward_inplace(&pair.shallow, &mut g);
        self.layer0.backward(&pair.shallow_cache, &g, &mut grads.layer0, false);
    }

    /// SHA-256 over the frozen parameters: layer 0 and the neutral twin.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hash_conv(&mut hasher, &self.layer0);
        for c in &self.twin {
            hash_conv(&mut hasher, c);
        }
        hex(&hasher.finalize())
    }

    pub fn layer0_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hash_conv(&mut hasher, &self.layer0);
        hex(&hasher.finalize())
    }

    pub fn twin_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for c in &self.twin {
            hash_conv(&mut hasher, c);
        }
        hex(&hasher.finalize())
    }

    /// Every convolution in serialization order.
    pub(crate) fn convs(&self) -> Vec<(&'static str, &Conv2d)> {
        let mut v = vec![("layer0", &self.layer0)];
        for (name, c) in ["stage1", "stage2", "stage3", "stage4"].into_iter().zip(&self.stages) {
            v.push((name, c));
        }
        for (name, c) in ["twin1", "twin2", "twin3", "twin4"].into_iter().zip(&self.twin) {
            v.push((name, c));
        }
        v.push(("head", &self.head));
        v
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![&mut self.layer0];
        v.extend(self.stages.iter_mut());
        v.extend(self.twin.iter_mut());
        v.push(&mut self.head);
        v
    }
}

/// Switches for [`SegNet::forward_pair`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOptions {
    pub srm: bool,
    pub alpha: f64,
    pub neutral: bool,
}

fn hash_conv(hasher: &mut Sha256, conv: &Conv2d) {
    for v in conv.params().into_iter().flatten() {
        hasher.update(v.to_le_bytes());
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            channels: [4, 5, 6, 7, 8],
            num_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_image_gives_valid_probabilities() {
        let net = SegNet::new(small_config()).unwrap();
        let img = FeatureMap::zeros(3, 8, 8, 0);
        let out = net.forward(&img).unwrap();
        assert!(out.logits.data().iter().all(|v| v.is_finite()));
        for p in 0..64 {
            let s: f64 = (0..3).map(|k| out.probs.get(k, p)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = SegNet::new(small_config()).unwrap();
        let img = FeatureMap::from_vec((0..3 * 64).map(|i| (i % 7) as f64 / 7.0).collect(), 3, 8, 8, 0).unwrap();
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img.clone()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(SegNet::new(small_config()).unwrap(), net);
    }

    #[test]
    fn grid_follows_stride_arithmetic() {
        let net = SegNet::new(small_config()).unwrap();
        let stride = net.config.output_stride();
        for size in [8, 16] {
            let img = FeatureMap::zeros(3, size, size, 0);
            let out = net.forward(&img).unwrap();
            assert_eq!(out.features[3].height(), size / stride);
            assert_eq!(out.probs.height(), size);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let net = SegNet::new(small_config()).unwrap();
        let img = FeatureMap::zeros(1, 8, 8, 0);
        assert!(matches!(net.forward(&img), Err(Error::ShapeMismatch { .. })));
    }
}
