//! Binary volume and checkpoint containers, and PGM slice export.
//!
//! Container layout: the 8-byte magic `BIOPHV01`, a little-endian `u32`
//! header length, a UTF-8 JSON header, then little-endian `f64` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::Field3D;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIOPHV01";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

fn write_container(out: &mut impl Write, header: &[u8], payload: &[&[f64]]) -> Result<()> {
    let len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(header)?;
    let total: usize = payload.iter().map(|p| p.len()).sum();
    let mut buf = Vec::with_capacity(total * 8);
    for chunk in payload {
        for v in *chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_container(input: &mut impl Read) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not whole f64s",
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    channels: usize,
    spacing: f64,
    dtype: String,
}

/// A multi-channel volume, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub spacing: f64,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], channels: usize, spacing: f64, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product::<usize>() * channels;
        if data.len() != n || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "volume",
                lhs: vec![channels, dims[0], dims[1], dims[2]],
                rhs: vec![data.len()],
            });
        }
        Ok(Volume {
            dims,
            channels,
            spacing,
            data,
        })
    }

    pub fn from_field(field: &Field3D) -> Self {
        Volume {
            dims: field.dims(),
            channels: 1,
            spacing: field.spacing(),
            data: field.data().to_vec(),
        }
    }

    /// A `[C, H, W, D]` tensor as a `C`-channel volume.
    pub fn from_tensor(t: &Tensor, spacing: f64) -> Result<Self> {
        match *t.shape() {
            [c, h, w, d] => Volume::new([h, w, d], c, spacing, t.data().to_vec()),
            _ => Err(Error::invalid(format!(
                "expected a 4-d tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.dims;
        Tensor::new(vec![self.channels, h, w, d], self.data.clone()).expect("validated volume")
    }

    pub fn channel(&self, c: usize) -> Result<Field3D> {
        if c >= self.channels {
            return Err(Error::invalid(format!(
                "channel {c} out of range (have {})",
                self.channels
            )));
        }
        let n: usize = self.dims.iter().product();
        Field3D::new(
            self.dims,
            self.spacing,
            self.data[c * n..(c + 1) * n].to_vec(),
        )
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&VolumeHeader {
            dims: self.dims,
            channels: self.channels,
            spacing: self.spacing,
            dtype: DTYPE.into(),
        })?;
        write_container(out, &header, &[&self.data])
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let (header, data) = read_container(input)?;
        let h: VolumeHeader = serde_json::from_slice(&header)?;
        if h.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype {}", h.dtype)));
        }
        Volume::new(h.dims, h.channels, h.spacing, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Volume::read_from(&mut fs::File::open(path)?)
    }
}

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(config: &Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    format_version: u32,
    dtype: String,
    step: usize,
    config_hash: String,
    config: Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors (parameters and optimiser moments) plus training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            kind: "checkpoint".into(),
            format_version: CHECKPOINT_VERSION,
            dtype: DTYPE.into(),
            step: self.step,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let payload: Vec<&[f64]> = self.tensors.iter().map(|(_, t)| t.data()).collect();
        write_container(out, &serde_json::to_vec(&header)?, &payload)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let (header, data) = read_container(input)?;
        let h: CheckpointHeader = serde_json::from_slice(&header)?;
        if h.kind != "checkpoint" || h.dtype != DTYPE {
            return Err(Error::Format(format!(
                "not a checkpoint ({}, {})",
                h.kind, h.dtype
            )));
        }
        if h.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                h.format_version
            )));
        }
        if config_hash(&h.config) != h.config_hash {
            return Err(Error::Format(
                "config hash does not match stored config".into(),
            ));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(h.tensors.len());
        for entry in h.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + n;
            if end > data.len() {
                return Err(Error::Format(format!("truncated tensor {}", entry.name)));
            }
            tensors.push((
                entry.name,
                Tensor::new(entry.shape, data[offset..end].to_vec())?,
            ));
            offset = end;
        }
        if offset != data.len() {
            return Err(Error::Format(format!(
                "{} trailing values",
                data.len() - offset
            )));
        }
        Ok(Checkpoint {
            step: h.step,
            config: h.config,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read_from(&mut fs::File::open(path)?)
    }
}

/// Binary PGM of the axial slice `z` of one channel, rows along the first
/// axis. Intensities are min-max scaled to 0..=255; a flat slice maps to 128.
pub fn slice_pgm(volume: &Volume, channel: usize, z: usize) -> Result<Vec<u8>> {
    let field = volume.channel(channel)?;
    let [h, w, d] = volume.dims;
    if z >= d {
        return Err(Error::invalid(format!(
            "slice {z} out of range (depth {d})"
        )));
    }
    let values: Vec<f64> = (0..h)
        .flat_map(|x| (0..w).map(move |y| (x, y)))
        .map(|(x, y)| field.get(x, y, z))
        .collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("slice {z} of channel {channel}"),
            value: *v,
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        let data = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.25 - 3.0).collect();
        Volume::new([3, 4, 5], 2, 1.5, data).unwrap()
    }

    #[test]
    fn volume_round_trip() {
        let v = ramp();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&buf[12..12 + len]).unwrap();
        assert_eq!(header["dtype"], "f64le");
        assert_eq!(header["channels"], 2);
        assert_eq!(buf.len(), 12 + len + 8 * 120);
        assert_eq!(Volume::read_from(&mut buf.as_slice()).unwrap(), v);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        ramp().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Volume::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        buf.truncate(buf.len() - 8);
        assert!(Volume::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            step: 7,
            config: serde_json::json!({"lr0": 3e-4, "steps": 10}),
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.1, f64::MIN_POSITIVE]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(0.3)),
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("b").unwrap().item(), 0.3);
    }

    #[test]
    fn constant_slice_is_uniform_gray() {
        let v = Volume::new([3, 4, 2], 1, 1.0, vec![0.7; 24]).unwrap();
        let pgm = slice_pgm(&v, 0, 1).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 12);
        assert!(pgm[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn slice_scaling_and_bounds() {
        let v = ramp();
        let pgm = slice_pgm(&v, 1, 0).unwrap();
        let px = &pgm[pgm.len() - 12..];
        assert_eq!(px[0], 0);
        assert_eq!(px[11], 255);
        assert!(slice_pgm(&v, 2, 0).is_err());
        assert!(slice_pgm(&v, 0, 5).is_err());
    }
}
