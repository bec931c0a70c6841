//! Dataset directories: `images/<id>.png` (8-bit RGB), `labels/<id>.png`
//! (8-bit grey, 255 = ignore) and a `manifest.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainSpec, SegSample};
use crate::error::{Error, Result};
use crate::net::Image;
use crate::tensor::{LabelMap, IGNORE};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub num_categories: usize,
    #[serde(default)]
    pub spec: Option<DomainSpec>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub num_categories: usize,
    pub spec: Option<DomainSpec>,
}

pub fn save_dataset(
    samples: &[SegSample],
    directory: &Path,
    num_categories: usize,
    spec: Option<&DomainSpec>,
) -> Result<()> {
    fs::create_dir_all(directory.join("images"))?;
    fs::create_dir_all(directory.join("labels"))?;
    for s in samples {
        write_png(
            &directory.join("images").join(format!("{}.png", s.id)),
            &quantize(&s.image),
            s.image.width(),
            s.image.height(),
            png::ColorType::Rgb,
        )?;
        write_png(
            &directory.join("labels").join(format!("{}.png", s.id)),
            s.labels.data(),
            s.labels.width(),
            s.labels.height(),
            png::ColorType::Grayscale,
        )?;
    }
    let manifest = Manifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        num_categories,
        spec: spec.cloned(),
    };
    let file = BufWriter::new(File::create(directory.join(MANIFEST))?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

/// Loads a dataset. Ids come from the manifest when present, otherwise from
/// the image directory; without a manifest the category count is inferred
/// from the largest label.
pub fn load_dataset(directory: &Path) -> Result<Dataset> {
    let manifest_path = directory.join(MANIFEST);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        Some(serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?)
    } else {
        None
    };
    let ids = match &manifest {
        Some(m) => m.ids.clone(),
        None => {
            let mut ids: Vec<String> = fs::read_dir(directory.join("images"))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .collect();
            ids.sort();
            ids
        }
    };
    let mut raw = Vec::with_capacity(ids.len());
    for id in &ids {
        let image_path = directory.join("images").join(format!("{id}.png"));
        let label_path = directory.join("labels").join(format!("{id}.png"));
        if !label_path.exists() {
            return Err(Error::MissingPair(image_path));
        }
        let (rgb, w, h) = read_png(&image_path, 3)?;
        let (labels, lw, lh) = read_png(&label_path, 1)?;
        if (w, h) != (lw, lh) {
            return Err(Error::shape(format!("{w}x{h} labels"), format!("{lw}x{lh}")));
        }
        raw.push((id.clone(), rgb, labels, w, h, label_path));
    }
    let num_categories = match &manifest {
        Some(m) => m.num_categories,
        None => raw
            .iter()
            .flat_map(|r| r.2.iter().copied())
            .filter(|&v| v != IGNORE)
            .max()
            .map_or(1, |m| m as usize + 1),
    };
    let mut samples = Vec::with_capacity(raw.len());
    for (id, rgb, labels, w, h, label_path) in raw {
        if let Some(&bad) = labels.iter().find(|&&v| v != IGNORE && v as usize >= num_categories) {
            return Err(Error::LabelOutOfRange {
                path: label_path,
                label: bad,
                num_categories,
            });
        }
        samples.push(SegSample {
            id,
            image: dequantize(&rgb, w, h),
            labels: LabelMap::new(labels, h, w, num_categories)?,
        });
    }
    Ok(Dataset {
        samples,
        num_categories,
        spec: manifest.and_then(|m| m.spec),
    })
}

fn quantize(image: &Image) -> Vec<u8> {
    let area = image.area();
    let mut out = Vec::with_capacity(3 * area);
    for p in 0..area {
        for ch in 0..3 {
            let v = image.channel(ch)[p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

fn dequantize(rgb: &[u8], w: usize, h: usize) -> Image {
    let area = w * h;
    let mut data = vec![0.0; 3 * area];
    for p in 0..area {
        for ch in 0..3 {
            data[ch * area + p] = rgb[3 * p + ch] as f64 / 255.0;
        }
    }
    Image::from_vec(data, 3, h, w, 0).expect("finite pixels")
}

fn write_png(path: &Path, data: &[u8], w: usize, h: usize, color: png::ColorType) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    Ok(())
}

/// Decodes an 8-bit PNG into `channels` interleaved channels (1 or 3).
fn read_png(path: &PathBuf, channels: usize) -> Result<(Vec<u8>, usize, usize)> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let mut out = Vec::with_capacity(w * h * channels);
    for px in buf.chunks(src_channels) {
        match (channels, src_channels) {
            (1, _) => out.push(px[0]),
            (3, 1) | (3, 2) => out.extend_from_slice(&[px[0], px[0], px[0]]),
            (3, _) => out.extend_from_slice(&px[..3]),
            _ => unreachable!("only 1 or 3 channels are requested"),
        }
    }
    Ok((out, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source(4, 16, 1);
        let samples = generate_domain(&spec, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        save_dataset(&samples, dir.path(), 4, Some(&spec)).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.num_categories, 4);
        assert_eq!(ds.spec.as_ref(), Some(&spec));
        for (a, b) in samples.iter().zip(&ds.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn missing_label_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source(4, 16, 1);
        let samples = generate_domain(&spec, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        save_dataset(&samples, dir.path(), 4, None).unwrap();
        fs::remove_file(dir.path().join("labels").join("00001.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingPair(_))));
    }

    #[test]
    fn out_of_range_label_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source(4, 16, 1);
        let samples = generate_domain(&spec, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // declare fewer categories than the labels use
        save_dataset(&samples, dir.path(), 1, None).unwrap();
        let err = load_dataset(dir.path());
        assert!(matches!(err, Err(Error::LabelOutOfRange { .. })), "{err:?}");
    }

    #[test]
    fn manifest_free_directory_infers_categories() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source(4, 16, 5);
        let samples = generate_domain(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        save_dataset(&samples, dir.path(), 4, None).unwrap();
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 4);
        let max = samples
            .iter()
            .flat_map(|s| s.labels.data().iter().copied())
            .max()
            .unwrap();
        assert_eq!(ds.num_categories, max as usize + 1);
    }
}
