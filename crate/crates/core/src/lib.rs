//! Domain-generalized semantic segmentation by semantic-region style
//! rearrangement and multi-level feature alignment.
//!
//! The crate bundles the numerical core (region statistics, rearrangement,
//! alignment losses, Jensen-Shannon consistency), a compact trainable
//! segmentation network, a synthetic multi-domain data generator, the mIoU
//! metric and a Chamfer-distance domain-invariance analyzer.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod invariance;
pub mod mla;
pub mod net;
pub mod objective;
pub mod srm;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use mla::{AlignLevels, AlignmentBreakdown, LayerTerms};
pub use net::{NetworkConfig, SegNet, TrainConfig};
pub use objective::{LossBreakdown, ProbabilityMap};
pub use stats::RegionStats;
pub use tensor::{FeatureMap, LabelMap, EPS_STD, IGNORE};
