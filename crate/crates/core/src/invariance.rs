//! Domain-invariance analysis: Chamfer distance between standardized
//! deep-feature samples of two domains, mapped to `exp(-gamma * d)`.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::net::SegNet;
use crate::stats::{gap, mean_at, resize_labels};
use crate::tensor::{FeatureMap, LabelMap, EPS_STD};

pub const DEFAULT_GAMMA: f64 = 0.01;
pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_SAMPLES: usize = 300;
pub const MIN_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Global,
    Local,
    Regional,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Global, Level::Local, Level::Regional];

    fn index(self) -> u64 {
        match self {
            Level::Global => 0,
            Level::Local => 1,
            Level::Regional => 2,
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Global => "Global",
            Level::Local => "Local",
            Level::Regional => "Regional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSampleSet {
    pub level: Level,
    pub category: Option<u8>,
    pub vectors: Vec<Vec<f64>>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_nearest(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|s| to.iter().map(|t| euclidean(s, t)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric Chamfer distance: half the mean nearest-neighbour distance in
/// each direction.
pub fn chamfer_distance(s_set: &[Vec<f64>], t_set: &[Vec<f64>]) -> Result<f64> {
    if s_set.is_empty() || t_set.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(0.5 * mean_nearest(s_set, t_set) + 0.5 * mean_nearest(t_set, s_set))
}

/// `exp(-gamma * d)`.
pub fn invariance_score(d: f64, gamma: f64) -> f64 {
    (-gamma * d).exp()
}

/// Deep features of one domain with labels resized to the feature grid.
#[derive(Clone, Debug)]
pub struct DomainFeatures {
    pub maps: Vec<(FeatureMap, LabelMap)>,
}

impl DomainFeatures {
    pub fn extract(model: &SegNet, samples: &[SegSample], layer: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        let maps = samples
            .iter()
            .map(|s| {
                let f = model.features_at(&s.image, layer)?;
                let gt = resize_labels(&s.labels, f.height(), f.width());
                Ok((f, gt))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps })
    }

    fn num_categories(&self) -> usize {
        self.maps[0].1.num_categories()
    }

    fn channels(&self) -> usize {
        self.maps[0].0.channels()
    }

    fn all_local(&self) -> Vec<Vec<f64>> {
        self.maps
            .iter()
            .flat_map(|(f, _)| (0..f.area()).map(move |p| f.pixel(p)))
            .collect()
    }

    fn global_pool(&self) -> Vec<Vec<f64>> {
        self.maps.iter().map(|(f, _)| gap(f)).collect()
    }

    fn local_pool(&self, c: u8) -> Vec<Vec<f64>> {
        self.maps
            .iter()
            .flat_map(|(f, gt)| {
                gt.data()
                    .iter()
                    .enumerate()
                    .filter(move |(_, &v)| v == c)
                    .map(move |(p, _)| f.pixel(p))
            })
            .collect()
    }

    fn regional_pool(&self, c: u8) -> Vec<Vec<f64>> {
        self.maps
            .iter()
            .filter_map(|(f, gt)| {
                let idx: Vec<usize> = (0..gt.area()).filter(|&p| gt.data()[p] == c).collect();
                (!idx.is_empty()).then(|| mean_at(f, &idx))
            })
            .collect()
    }
}

/// Channel-wise `(mu, sigma)` of the source local features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Estimated from up to `count` local source features drawn with `seed`.
    pub fn from_source(source: &DomainFeatures, count: usize, seed: u64) -> Self {
        let pool = source.all_local();
        let picked = subsample(&pool, count, seed);
        let d = source.channels();
        let n = picked.len() as f64;
        let mut mean = vec![0.0; d];
        for v in &picked {
            for k in 0..d {
                mean[k] += v[k] / n;
            }
        }
        let mut std = vec![0.0; d];
        for v in &picked {
            for k in 0..d {
                std[k] += (v[k] - mean[k]).powi(2) / n;
            }
        }
        // constant source channels are centred but not scaled
        std.iter_mut()
            .for_each(|s| *s = if s.sqrt() <= EPS_STD { 1.0 } else { s.sqrt() });
        Self { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Up to `k` vectors drawn without replacement. The draw depends only on
/// `seed` and the pool size, so equal-sized pools are sampled at the same
/// positions.
fn subsample(pool: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

fn sampling_seed(trial_seed: u64, level: Level, category: Option<u8>) -> u64 {
    let cat = category.map_or(0, |c| c as u64 + 1);
    trial_seed ^ (level.index() << 56) ^ (cat << 40)
}

/// Standardized, subsampled source/target sets for one level: a single pair
/// for the global level, one pair per category present in both domains
/// otherwise.
pub fn build_sample_sets(
    source: &DomainFeatures,
    target: &DomainFeatures,
    level: Level,
    standardizer: &Standardizer,
    samples_per_trial: usize,
    trial_seed: u64,
) -> Vec<(FeatureSampleSet, FeatureSampleSet)> {
    let make = |pool: Vec<Vec<f64>>, category: Option<u8>| {
        let picked = subsample(&pool, samples_per_trial, sampling_seed(trial_seed, level, category));
        FeatureSampleSet {
            level,
            category,
            vectors: picked.iter().map(|v| standardizer.apply(v)).collect(),
        }
    };
    match level {
        Level::Global => vec![(make(source.global_pool(), None), make(target.global_pool(), None))],
        Level::Local | Level::Regional => {
            let classes = source.num_categories().min(target.num_categories());
            (0..classes as u8)
                .filter_map(|c| {
                    let (s, t) = if level == Level::Local {
                        (source.local_pool(c), target.local_pool(c))
                    } else {
                        (source.regional_pool(c), target.regional_pool(c))
                    };
                    (!s.is_empty() && !t.is_empty()).then(|| (make(s, Some(c)), make(t, Some(c))))
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub trials: usize,
    pub samples_per_trial: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Deep layer whose features are compared.
    pub layer: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            samples_per_trial: DEFAULT_SAMPLES,
            gamma: DEFAULT_GAMMA,
            seed: 0,
            layer: 4,
        }
    }
}

impl AnalyzeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be positive".into()));
        }
        if self.samples_per_trial < MIN_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "samples per trial must be at least {MIN_SAMPLES}"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput("gamma must be positive".into()));
        }
        if self.layer > 4 {
            return Err(Error::InvalidInput("layer must be in 0..=4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialValue {
    /// Mean Chamfer distance over the compared sets.
    pub distance: f64,
    /// Mean invariance over the compared sets.
    pub score: f64,
    /// Number of set pairs (categories) averaged.
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: Level,
    pub trials: Vec<TrialValue>,
    pub mean_distance: Option<f64>,
    pub mean_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub trials: usize,
    pub samples_per_trial: usize,
    pub gamma: f64,
    pub seed: u64,
    pub layer: usize,
    /// Seed of the draw that estimated the standardization statistics.
    pub stats_seed: u64,
    pub levels: Vec<LevelReport>,
}

impl InvarianceReport {
    pub fn level(&self, level: Level) -> &LevelReport {
        self.levels
            .iter()
            .find(|l| l.level == level)
            .expect("all levels reported")
    }
}

/// Runs the analysis on pre-extracted features.
pub fn analyze_features(
    source: &DomainFeatures,
    target: &DomainFeatures,
    cfg: &AnalyzeConfig,
) -> Result<InvarianceReport> {
    cfg.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stats_seed: u64 = seeds.gen();
    let trial_seeds: Vec<u64> = (0..cfg.trials).map(|_| seeds.gen()).collect();
    let standardizer = Standardizer::from_source(source, cfg.samples_per_trial, stats_seed);
    let mut levels = Vec::with_capacity(3);
    for level in Level::ALL {
        let mut trials = Vec::with_capacity(cfg.trials);
        for &seed in &trial_seeds {
            let pairs = build_sample_sets(source, target, level, &standardizer, cfg.samples_per_trial, seed);
            if pairs.is_empty() {
                continue;
            }
            let mut dist = 0.0;
            let mut score = 0.0;
            for (s, t) in &pairs {
                let d = chamfer_distance(&s.vectors, &t.vectors)?;
                dist += d;
                score += invariance_score(d, cfg.gamma);
            }
            let n = pairs.len() as f64;
            trials.push(TrialValue {
                distance: dist / n,
                score: score / n,
                pairs: pairs.len(),
            });
        }
        let mean = |f: fn(&TrialValue) -> f64| {
            (!trials.is_empty()).then(|| trials.iter().map(f).sum::<f64>() / trials.len() as f64)
        };
        levels.push(LevelReport {
            level,
            mean_distance: mean(|t| t.distance),
            mean_score: mean(|t| t.score),
            trials,
        });
    }
    Ok(InvarianceReport {
        trials: cfg.trials,
        samples_per_trial: cfg.samples_per_trial,
        gamma: cfg.gamma,
        seed: cfg.seed,
        layer: cfg.layer,
        stats_seed,
        levels,
    })
}

pub fn analyze(
    model: &SegNet,
    source: &[SegSample],
    target: &[SegSample],
    cfg: &AnalyzeConfig,
) -> Result<InvarianceReport> {
    cfg.validate()?;
    let s = DomainFeatures::extract(model, source, cfg.layer)?;
    let t = DomainFeatures::extract(model, target, cfg.layer)?;
    analyze_features(&s, &t, cfg)
}

/// Tab-separated table: one row per target, one column per level, mean
/// invariance in percent.
pub fn format_table(rows: &[(String, InvarianceReport)]) -> String {
    let mut out = String::from("target");
    for level in Level::ALL {
        write!(out, "\t{level}").expect("string write");
    }
    out.push('\n');
    for (name, report) in rows {
        out.push_str(name);
        for level in Level::ALL {
            match report.level(level).mean_score {
                Some(s) => write!(out, "\t{:.2}", 100.0 * s),
                None => write!(out, "\t-"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}
