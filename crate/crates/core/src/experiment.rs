//! Desk-scale ablation experiments on paired synthetic domains: train on the
//! source domain, measure mIoU on style-shifted targets with identical
//! layout statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_domain, DomainSpec, SegSample};
use crate::error::Result;
use crate::mla::AlignLevels;
use crate::net::{evaluate, train, NetworkConfig, SegNet, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain task loss, no style elimination.
    Baseline,
    /// Rearranged branch with the averaged task loss only.
    SrmOnly,
    /// Rearrangement, style elimination, all alignment levels, consistency.
    Full,
    NoGlobal,
    NoRegional,
    NoLocal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::SrmOnly,
        Variant::Full,
        Variant::NoGlobal,
        Variant::NoRegional,
        Variant::NoLocal,
    ];

    /// Applies the variant's switches on top of the base configuration.
    pub fn configure(self, network: &NetworkConfig, train: &TrainConfig) -> (NetworkConfig, TrainConfig) {
        let mut net = network.clone();
        let mut tr = train.clone();
        match self {
            Variant::Baseline => {
                net.style_elim = false;
                tr.srm = false;
                tr.pc = false;
                tr.mla = AlignLevels::NONE;
            }
            Variant::SrmOnly => {
                net.style_elim = false;
                tr.srm = true;
                tr.pc = false;
                tr.mla = AlignLevels::NONE;
            }
            Variant::Full => {
                net.style_elim = true;
                tr.srm = true;
                tr.pc = true;
                tr.mla = AlignLevels::ALL;
            }
            Variant::NoGlobal | Variant::NoRegional | Variant::NoLocal => {
                let (n, mut t) = Variant::Full.configure(network, train);
                net = n;
                match self {
                    Variant::NoGlobal => t.mla.global = false,
                    Variant::NoRegional => t.mla.regional = false,
                    _ => t.mla.local = false,
                }
                tr = t;
            }
        }
        (net, tr)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::SrmOnly => "srm-only",
            Variant::Full => "full",
            Variant::NoGlobal => "no-global",
            Variant::NoRegional => "no-regional",
            Variant::NoLocal => "no-local",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let num_classes = 5;
        Self {
            num_classes,
            image_size: 32,
            train_samples: 200,
            eval_samples: 40,
            network: NetworkConfig {
                num_classes,
                ..Default::default()
            },
            train: TrainConfig {
                max_steps: 600,
                ..Default::default()
            },
        }
    }
}

/// Source training set, source validation set and target sets for a seed.
pub struct Domains {
    pub train: Vec<SegSample>,
    pub source_eval: Vec<SegSample>,
    pub targets: Vec<(String, Vec<SegSample>)>,
}

pub fn make_domains(cfg: &ExperimentConfig, seed: u64) -> Result<Domains> {
    let train_layout = seed.wrapping_mul(2).wrapping_add(1000);
    let eval_layout = seed.wrapping_mul(2).wrapping_add(1001);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let train = generate_domain(
        &DomainSpec::source(cfg.num_classes, cfg.image_size, train_layout),
        cfg.train_samples,
        &mut rng,
    )?;
    let source_eval = generate_domain(
        &DomainSpec::source(cfg.num_classes, cfg.image_size, eval_layout),
        cfg.eval_samples,
        &mut rng,
    )?;
    let targets = DomainSpec::targets(cfg.num_classes, cfg.image_size, eval_layout)
        .into_iter()
        .map(|spec| Ok((spec.name.clone(), generate_domain(&spec, cfg.eval_samples, &mut rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Domains {
        train,
        source_eval,
        targets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub source_miou: f64,
    pub target_miou: Vec<(String, f64)>,
    /// Mean over targets, in mIoU points (0..100).
    pub mean_target: f64,
}

/// Trains one variant on one seed and evaluates it. mIoU values are in
/// percent.
pub fn run_variant(
    cfg: &ExperimentConfig,
    domains: &Domains,
    variant: Variant,
    seed: u64,
) -> Result<(VariantResult, SegNet)> {
    let (mut net_cfg, mut train_cfg) = variant.configure(&cfg.network, &cfg.train);
    net_cfg.seed = seed;
    train_cfg.seed = seed.wrapping_add(1);
    let mut net = SegNet::new(net_cfg)?;
    train(&mut net, &domains.train, &train_cfg, |_| {})?;
    let source_miou = 100.0 * evaluate(&net, &domains.source_eval)?.mean;
    let target_miou = domains
        .targets
        .iter()
        .map(|(name, samples)| Ok((name.clone(), 100.0 * evaluate(&net, samples)?.mean)))
        .collect::<Result<Vec<_>>>()?;
    let mean_target = target_miou.iter().map(|t| t.1).sum::<f64>() / target_miou.len() as f64;
    Ok((
        VariantResult {
            variant,
            seed,
            source_miou,
            target_miou,
            mean_target,
        },
        net,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_switches() {
        let cfg = ExperimentConfig::default();
        let (n, t) = Variant::Baseline.configure(&cfg.network, &cfg.train);
        assert!(!n.style_elim && !t.srm && !t.uses_pc() && !t.uses_mla());
        let (n, t) = Variant::SrmOnly.configure(&cfg.network, &cfg.train);
        assert!(!n.style_elim && t.srm && !t.uses_pc() && !t.uses_mla());
        let (n, t) = Variant::Full.configure(&cfg.network, &cfg.train);
        assert!(n.style_elim && t.srm && t.uses_pc() && t.mla == AlignLevels::ALL);
        let (_, t) = Variant::NoLocal.configure(&cfg.network, &cfg.train);
        assert!(t.mla.global && t.mla.regional && !t.mla.local);
        let (_, t) = Variant::NoGlobal.configure(&cfg.network, &cfg.train);
        assert!(!t.mla.global && t.mla.regional && t.mla.local);
        for v in Variant::ALL {
            let (n, _) = v.configure(&cfg.network, &cfg.train);
            assert!(n.frozen_layer0);
        }
    }

    #[test]
    fn short_run_is_deterministic() {
        let mut cfg = ExperimentConfig {
            train_samples: 6,
            eval_samples: 3,
            ..Default::default()
        };
        cfg.network.channels = [4, 4, 6, 6, 8];
        cfg.train.max_steps = 3;
        cfg.train.batch = 2;
        let d = make_domains(&cfg, 3).unwrap();
        assert_eq!(d.targets.len(), 2);
        for (_, t) in &d.targets {
            for (a, b) in t.iter().zip(&d.source_eval) {
                assert_eq!(a.labels, b.labels);
            }
        }
        let (a, _) = run_variant(&cfg, &d, Variant::Full, 3).unwrap();
        let (b, _) = run_variant(&cfg, &d, Variant::Full, 3).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=100.0).contains(&a.mean_target));
    }
}
