//! Dense feature maps and label maps.
//!
//! Feature maps are stored channel-major: element `(c, h, w)` lives at
//! `c * H * W + h * W + w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label id excluded from every semantic region.
pub const IGNORE: u8 = 255;

/// Floor applied to every standard deviation.
pub const EPS_STD: f64 = 1e-5;

/// Activations of one network layer, `channels × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    /// 0 is the shallow (layer 0) output; 1..=4 are the deep stages.
    pub layer_id: u8,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, layer_id: u8) -> Self {
        assert!(channels >= 1 && height >= 1 && width >= 1, "empty feature map");
        Self {
            data: vec![0.0; channels * height * width],
            channels,
            height,
            width,
            layer_id,
        }
    }

    pub fn from_vec(data: Vec<f64>, channels: usize, height: usize, width: usize, layer_id: u8) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{} values", channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite activation at index {i}")));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
            layer_id,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `H * W`.
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.area();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.area();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[c * self.area() + h * self.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let n = self.area();
        self.data[c * n + h * self.width + w] = v;
    }

    /// Feature vector at raster position `p = h * W + w`.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let n = self.area();
        (0..self.channels).map(|c| self.data[c * n + p]).collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }
}

/// Per-pixel category ids with [`IGNORE`] marking void pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    data: Vec<u8>,
    height: usize,
    width: usize,
    num_categories: usize,
}

impl LabelMap {
    pub fn new(data: Vec<u8>, height: usize, width: usize, num_categories: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("label map dims must be positive".into()));
        }
        if num_categories == 0 || num_categories > IGNORE as usize {
            return Err(Error::InvalidInput(format!(
                "num_categories must be in 1..=254, got {num_categories}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} labels", height * width),
                format!("{} labels", data.len()),
            ));
        }
        if let Some(&bad) = data.iter().find(|&&v| v != IGNORE && v as usize >= num_categories) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {num_categories} categories"
            )));
        }
        Ok(Self {
            data,
            height,
            width,
            num_categories,
        })
    }

    pub fn filled(value: u8, height: usize, width: usize, num_categories: usize) -> Result<Self> {
        Self::new(vec![value; height * width], height, width, num_categories)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.data[h * self.width + w]
    }

    /// Categories with at least one pixel, ascending.
    pub fn present_categories(&self) -> Vec<u8> {
        let mut seen = vec![false; self.num_categories];
        for &v in &self.data {
            if v != IGNORE {
                seen[v as usize] = true;
            }
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(c, _)| c as u8)
            .collect()
    }

    /// Pixel count per category (ignore excluded).
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_categories];
        for &v in &self.data {
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
        counts
    }

    /// Raster positions of each category, ignore excluded.
    pub fn region_indices(&self) -> Vec<Vec<usize>> {
        let mut regions = vec![Vec::new(); self.num_categories];
        for (p, &v) in self.data.iter().enumerate() {
            if v != IGNORE {
                regions[v as usize].push(p);
            }
        }
        regions
    }

    pub(crate) fn check_spatial(&self, f: &FeatureMap) -> Result<()> {
        if self.height == f.height() && self.width == f.width() {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{} labels", f.height(), f.width()),
                format!("{}x{}", self.height, self.width),
            ))
        }
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Self {
            data,
            height: h,
            width: w,
            num_categories: self.num_categories,
        }
    }
}
