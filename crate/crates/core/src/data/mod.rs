//! Synthetic multi-domain data, dataset files and the mIoU metric.

mod io;
mod metrics;
mod synth;

pub use io::{load_dataset, save_dataset, Dataset, Manifest};
pub use metrics::{miou, ConfusionMatrix, MiouReport};
pub use synth::{generate_domain, pattern_value, CategoryStyle, DomainSpec, PALETTE};

use crate::net::Image;
use crate::tensor::LabelMap;

/// An image with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

impl SegSample {
    /// Horizontal mirror of image and labels.
    pub fn flipped(&self) -> Self {
        let (c, h, w) = self.image.shape();
        let mut img = self.image.clone();
        for ch in 0..c {
            for y in 0..h {
                img.channel_mut(ch)[y * w..(y + 1) * w].reverse();
            }
        }
        Self {
            id: self.id.clone(),
            image: img,
            labels: self.labels.flipped(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Self {
        let c = self.image.channels();
        let w = self.image.width();
        let mut data = Vec::with_capacity(c * size_h * size_w);
        for ch in 0..c {
            let src = self.image.channel(ch);
            for y in top..top + size_h {
                data.extend_from_slice(&src[y * w + left..y * w + left + size_w]);
            }
        }
        Self {
            id: self.id.clone(),
            image: Image::from_vec(data, c, size_h, size_w, 0).expect("crop of a finite image"),
            labels: self.labels.crop(top, left, size_h, size_w),
        }
    }
}
