//! Procedural street-scene stand-in: Voronoi layouts whose cells carry a
//! category-specific texture (content) rendered with a domain-specific,
//! per-category colour, brightness and noise level (style).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::net::Image;
use crate::tensor::LabelMap;

/// Base colour gains used by the preset domains.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.55, 1.00],
    [1.00, 0.35, 0.35],
    [0.35, 0.95, 0.40],
    [1.00, 0.95, 0.30],
    [0.80, 0.40, 1.00],
    [0.30, 0.90, 0.95],
    [1.00, 0.60, 0.15],
    [0.60, 0.60, 0.60],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStyle {
    /// Additive offset after the colour gain.
    pub brightness: f64,
    /// Per-channel multiplicative gain, all positive.
    pub gain: [f64; 3],
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub num_categories: usize,
    pub image_size: usize,
    pub layout_seed: u64,
    /// Voronoi cells per image.
    pub cells: usize,
    /// Texture contrast around mid-grey.
    pub texture_amplitude: f64,
    pub styles: Vec<CategoryStyle>,
}

impl DomainSpec {
    /// Domain where category `c` is painted with `PALETTE[(c + palette_shift) % 8]`.
    pub fn preset(
        name: &str,
        num_categories: usize,
        image_size: usize,
        layout_seed: u64,
        palette_shift: usize,
        brightness: f64,
        noise: f64,
    ) -> Self {
        let styles = (0..num_categories)
            .map(|c| CategoryStyle {
                brightness,
                gain: PALETTE[(c + palette_shift) % PALETTE.len()],
                noise,
            })
            .collect();
        Self {
            name: name.to_string(),
            num_categories,
            image_size,
            layout_seed,
            cells: 6,
            texture_amplitude: 0.3,
            styles,
        }
    }

    /// Source domain used by the experiments.
    pub fn source(num_categories: usize, image_size: usize, layout_seed: u64) -> Self {
        Self::preset("source", num_categories, image_size, layout_seed, 0, 0.0, 0.03)
    }

    /// Targets: the same content with regional colours reassigned and a
    /// global brightness change.
    pub fn targets(num_categories: usize, image_size: usize, layout_seed: u64) -> Vec<Self> {
        vec![
            Self::preset("target-a", num_categories, image_size, layout_seed, 1, -0.08, 0.03),
            Self::preset("target-b", num_categories, image_size, layout_seed, 2, 0.08, 0.05),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if !(1..255).contains(&self.num_categories) {
            return Err(Error::Config("num_categories must be in 1..=254".into()));
        }
        if self.styles.len() != self.num_categories {
            return Err(Error::Config(format!(
                "{} styles for {} categories",
                self.styles.len(),
                self.num_categories
            )));
        }
        if self.cells == 0 {
            return Err(Error::Config("cells must be positive".into()));
        }
        for s in &self.styles {
            if s.gain.iter().any(|&g| g.is_nan() || g <= 0.0) || s.noise.is_nan() || s.noise < 0.0 {
                return Err(Error::Config("gains must be positive and noise non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Texture of category `c` at pixel `(y, x)` with cell phase `phase`, in
/// `[-1, 1]`. Textures cycle through five families.
pub fn pattern_value(c: usize, y: usize, x: usize, phase: usize) -> f64 {
    let (y, x) = (y + phase, x + phase);
    match c % 5 {
        0 => 0.0,
        1 => {
            if (y / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        2 => {
            if (x / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        3 => {
            if ((y / 2) + (x / 2)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => {
            if ((x + y) / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

struct Layout {
    labels: Vec<u8>,
    phases: Vec<usize>,
}

fn draw_layout(rng: &mut ChaCha8Rng, spec: &DomainSpec) -> Layout {
    let n = spec.image_size;
    let centers: Vec<(f64, f64, u8, usize)> = (0..spec.cells)
        .map(|_| {
            (
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0..spec.num_categories) as u8,
                rng.gen_range(0..4usize),
            )
        })
        .collect();
    let mut labels = Vec::with_capacity(n * n);
    let mut phases = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let nearest = centers
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                    let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one cell");
            labels.push(nearest.2);
            phases.push(nearest.3);
        }
    }
    Layout { labels, phases }
}

/// Generates `n` samples. Layouts come from `spec.layout_seed` alone, so two
/// specs sharing it produce identical label maps; pixel noise comes from
/// `rng`.
pub fn generate_domain<R: Rng + ?Sized>(spec: &DomainSpec, n: usize, rng: &mut R) -> Result<Vec<SegSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    let size = spec.image_size;
    let area = size * size;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let layout = draw_layout(&mut layout_rng, spec);
        let mut data = vec![0.0; 3 * area];
        for p in 0..area {
            let c = layout.labels[p] as usize;
            let style = &spec.styles[c];
            let v = 0.5 + spec.texture_amplitude * pattern_value(c, p / size, p % size, layout.phases[p]);
            for ch in 0..3 {
                let noise: f64 = StandardNormal.sample(rng);
                data[ch * area + p] = (style.gain[ch] * v + style.brightness + style.noise * noise).clamp(0.0, 1.0);
            }
        }
        samples.push(SegSample {
            id: format!("{i:05}"),
            image: Image::from_vec(data, 3, size, size, 0)?,
            labels: LabelMap::new(layout.labels, size, size, spec.num_categories)?,
        });
    }
    Ok(samples)
}
