//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `SRMACKPT`, `u32` version, `u64` length and
//! JSON bytes of the [`NetworkConfig`], `u32` tensor count, then per
//! convolution: `u16` name length, name, `u32` in/out/kernel/stride, then
//! weight, bias, norm scale and norm shift arrays, each a `u64` count
//! followed by `f64` values (the norm arrays are empty for the head).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{hex, NetworkConfig, SegNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SRMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &SegNet, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&net.config)?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let convs = net.convs();
    w.write_all(&(convs.len() as u32).to_le_bytes())?;
    for (name, conv) in convs {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for v in [conv.in_channels, conv.out_channels, conv.kernel, conv.stride] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for values in conv.params() {
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_f64s<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if n != expected {
        return Err(Error::Checkpoint(format!("expected {expected} values, found {n}")));
    }
    (0..n).map(|_| Ok(f64::from_le_bytes(read_array(r)?))).collect()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<SegNet> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u64(&mut r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("config block too large".into()));
    }
    let mut config = vec![0u8; len];
    r.read_exact(&mut config)
        .map_err(|e| Error::Checkpoint(format!("truncated config: {e}")))?;
    let config: NetworkConfig = serde_json::from_slice(&config)?;
    let mut net = SegNet::new(config)?;
    let count = read_u32(&mut r)? as usize;
    let names: Vec<&'static str> = net.convs().into_iter().map(|(n, _)| n).collect();
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    for (conv, expected_name) in net.convs_mut().into_iter().zip(names) {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        if name != expected_name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected_name}, found {}",
                String::from_utf8_lossy(&name)
            )));
        }
        let dims = [
            read_u32(&mut r)?,
            read_u32(&mut r)?,
            read_u32(&mut r)?,
            read_u32(&mut r)?,
        ];
        let want = [conv.in_channels, conv.out_channels, conv.kernel, conv.stride].map(|v| v as u32);
        if dims != want {
            return Err(Error::Checkpoint(format!(
                "{expected_name}: shape {dims:?} does not match config {want:?}"
            )));
        }
        for values in conv.params_mut() {
            *values = read_f64s(&mut r, values.len())?;
        }
    }
    Ok(net)
}

pub fn save_checkpoint(net: &SegNet, path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    write_checkpoint(net, &mut bytes)?;
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMap;

    fn net() -> SegNet {
        SegNet::new(NetworkConfig {
            channels: [3, 4, 5, 6, 7],
            num_classes: 3,
            seed: 42,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_reproduces_logits() {
        let mut n = net();
        n.stages[2].weight[3] += 0.25;
        let mut bytes = Vec::new();
        write_checkpoint(&n, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, n);
        let img =
            FeatureMap::from_vec((0..3 * 64).map(|i| ((i * 37) % 11) as f64 / 11.0).collect(), 3, 8, 8, 0).unwrap();
        let a = n.forward(&img).unwrap().logits;
        let b = back.forward(&img).unwrap().logits;
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPTxxxxxxxx"[..]).is_err());
        let mut bytes = Vec::new();
        write_checkpoint(&net(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_returns_content_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let h1 = save_checkpoint(&net(), &p).unwrap();
        let h2 = save_checkpoint(&load_checkpoint(&p).unwrap(), &dir.path().join("b.ckpt")).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
    }
}
