//! Label-conditioned and global feature statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, LabelMap, EPS_STD, IGNORE};

/// Channel-wise style of one semantic region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub category: u8,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pixel_count: usize,
}

/// Nearest-neighbour label resize with center-of-cell sampling:
/// `src = floor((dst + 0.5) * src_len / dst_len)`, clamped to the source.
pub fn resize_labels(labels: &LabelMap, target_h: usize, target_w: usize) -> LabelMap {
    assert!(target_h >= 1 && target_w >= 1, "target size must be positive");
    if target_h == labels.height() && target_w == labels.width() {
        return labels.clone();
    }
    let rows = nearest_index(labels.height(), target_h);
    let cols = nearest_index(labels.width(), target_w);
    let mut data = Vec::with_capacity(target_h * target_w);
    for &sy in &rows {
        for &sx in &cols {
            data.push(labels.get(sy, sx));
        }
    }
    LabelMap::new(data, target_h, target_w, labels.num_categories())
        .expect("resized labels keep the source value range")
}

fn nearest_index(src_len: usize, dst_len: usize) -> Vec<usize> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(src_len - 1))
        .collect()
}

/// Feature vectors at pixels labelled `c`, in raster order.
pub fn split_by_semantic(f: &FeatureMap, gt: &LabelMap, c: u8) -> Result<Vec<Vec<f64>>> {
    gt.check_spatial(f)?;
    Ok(gt
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == c && c != IGNORE)
        .map(|(p, _)| f.pixel(p))
        .collect())
}

/// Mean and population standard deviation (floored at [`EPS_STD`]) of the
/// region labelled `c`.
pub fn region_moments(f: &FeatureMap, gt: &LabelMap, c: u8) -> Result<RegionStats> {
    gt.check_spatial(f)?;
    let idx = positions_of(gt, c);
    if idx.is_empty() {
        return Err(Error::AbsentCategory(c));
    }
    Ok(moments_at(f, &idx, c))
}

pub(crate) fn positions_of(gt: &LabelMap, c: u8) -> Vec<usize> {
    if c == IGNORE {
        return Vec::new();
    }
    gt.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == c)
        .map(|(p, _)| p)
        .collect()
}

/// Moments over an explicit, non-empty set of raster positions.
pub(crate) fn moments_at(f: &FeatureMap, idx: &[usize], category: u8) -> RegionStats {
    debug_assert!(!idx.is_empty());
    let n = idx.len() as f64;
    let mut mean = Vec::with_capacity(f.channels());
    let mut std = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let ch = f.channel(c);
        let mu = idx.iter().map(|&p| ch[p]).sum::<f64>() / n;
        let var = idx.iter().map(|&p| (ch[p] - mu).powi(2)).sum::<f64>() / n;
        mean.push(mu);
        std.push(var.sqrt().max(EPS_STD));
    }
    RegionStats {
        category,
        mean,
        std,
        pixel_count: idx.len(),
    }
}

/// Global average pooling.
pub fn gap(f: &FeatureMap) -> Vec<f64> {
    let n = f.area() as f64;
    (0..f.channels())
        .map(|c| f.channel(c).iter().sum::<f64>() / n)
        .collect()
}

/// Semantic average pooling: the channel-wise mean of region `c`.
pub fn sap(f: &FeatureMap, gt: &LabelMap, c: u8) -> Result<Vec<f64>> {
    gt.check_spatial(f)?;
    let idx = positions_of(gt, c);
    if idx.is_empty() {
        return Err(Error::AbsentCategory(c));
    }
    Ok(mean_at(f, &idx))
}

pub(crate) fn mean_at(f: &FeatureMap, idx: &[usize]) -> Vec<f64> {
    let n = idx.len() as f64;
    (0..f.channels())
        .map(|c| {
            let ch = f.channel(c);
            idx.iter().map(|&p| ch[p]).sum::<f64>() / n
        })
        .collect()
}

/// Fraction of all `H * W` pixels labelled `c`; ignore pixels only enlarge
/// the denominator.
pub fn region_ratio(gt: &LabelMap, c: u8) -> f64 {
    if c == IGNORE {
        return 0.0;
    }
    let hits = gt.data().iter().filter(|&&v| v == c).count();
    hits as f64 / gt.area() as f64
}
