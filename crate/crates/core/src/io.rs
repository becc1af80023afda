//! On-disk formats: TMF1 tensors, JSON-headed containers, checkpoints,
//! sample bundles and anomaly-map exports.
//!
//! A TMF1 block is the magic `TMF1`, a dtype byte (1 = f32, 2 = f64), a rank
//! byte, `rank` little-endian `u32` extents and the row-major little-endian
//! payload. A container is one line of compact JSON, a `\n`, then the
//! concatenated blocks; header offsets count bytes from just after the
//! newline.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::PixelMask;
use crate::model::{Model, ModelArch};
use crate::numerics::{DType, Scalar, Tensor};
use crate::scoring::AnomalyMap;
use crate::synthdata::LabeledSample;

pub const TMF_MAGIC: &[u8; 4] = b"TMF1";
pub const CHECKPOINT_FORMAT: &str = "mmad-checkpoint";
pub const SAMPLE_FORMAT: &str = "mmad-sample";
pub const FORMAT_VERSION: u32 = 1;

/// Encodes `t` as one TMF1 block, converting entries to `dtype`.
pub fn encode_tmf<T: Scalar>(t: &Tensor<T>, dtype: DType) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + dtype.width() * t.len());
    out.extend_from_slice(TMF_MAGIC);
    out.push(dtype.code());
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated TMF1 block while reading {what}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decodes the TMF1 block at the start of `bytes`. Returns the tensor, its
/// stored dtype and the number of bytes consumed.
pub fn decode_tmf<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, DType, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != TMF_MAGIC {
        return Err(Error::Format("bad TMF1 magic".into()));
    }
    let head = take(bytes, &mut at, 2, "header")?;
    let dtype = DType::from_code(head[0]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = take(bytes, &mut at, 4, "extent")?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format("TMF1 element count overflows".into()))?;
    let payload = take(
        bytes,
        &mut at,
        n.checked_mul(dtype.width()).ok_or_else(|| Error::Format("TMF1 payload size overflows".into()))?,
        "payload",
    )?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype, at))
}

/// Decodes a buffer holding exactly one TMF1 block.
pub fn decode_tmf_exact<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, DType)> {
    let (t, d, used) = decode_tmf(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after TMF1 block", bytes.len() - used)));
    }
    Ok((t, d))
}

/// Location of one named block inside a container payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

/// Encodes named tensors into a payload and its block table.
pub fn encode_blocks<T: Scalar>(tensors: &[(&str, &Tensor<T>)], dtype: DType) -> Result<(Vec<BlockEntry>, Vec<u8>)> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let block = encode_tmf(t, dtype)?;
        entries.push(BlockEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            length: block.len(),
        });
        payload.extend_from_slice(&block);
    }
    Ok((entries, payload))
}

/// Header line, newline, payload.
pub fn write_container<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a container into its parsed header and payload.
pub fn read_container<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("container has no header line".into()))?;
    let header = serde_json::from_slice(&bytes[..nl])?;
    Ok((header, &bytes[nl + 1..]))
}

/// Decodes every block of `entries`, checking that the table tiles the
/// payload exactly and that each block's shape matches its entry.
pub fn decode_blocks<T: Scalar>(entries: &[BlockEntry], payload: &[u8], dtype: DType) -> Result<Vec<(String, Tensor<T>)>> {
    let mut expect_offset = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.offset != expect_offset {
            return Err(Error::Format(format!("block `{}` starts at {} but {} was expected", e.name, e.offset, expect_offset)));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Format(format!("block `{}` runs past the end of the file", e.name)))?;
        let (t, d) = decode_tmf_exact::<T>(&payload[e.offset..end])?;
        if d != dtype {
            return Err(Error::Format(format!("block `{}` has dtype {d:?}, header says {dtype:?}", e.name)));
        }
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("block `{}` has shape {:?}, header says {:?}", e.name, t.shape(), e.shape)));
        }
        out.push((e.name.clone(), t));
        expect_offset = end;
    }
    if expect_offset != payload.len() {
        return Err(Error::Format(format!("{} unreferenced payload bytes", payload.len() - expect_offset)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub arch: ModelArch,
    /// Configuration snapshot of the run that produced the checkpoint.
    pub run_config: serde_json::Value,
    pub tensors: Vec<BlockEntry>,
}

/// Model parameters plus the metadata needed to rebuild and audit them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub arch: ModelArch,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub run_config: serde_json::Value,
    pub dtype: DType,
    /// Every trainable tensor in store order.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(
        model: &Model<T>,
        step: u64,
        seed: u64,
        config_hash: &str,
        run_config: serde_json::Value,
        dtype: DType,
    ) -> Self {
        Self {
            arch: model.arch.clone(),
            step,
            seed,
            config_hash: config_hash.to_string(),
            run_config,
            dtype,
            tensors: model.store.iter().map(|(name, t)| (name.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model<T>> {
        Model::from_tensors(self.arch.clone(), self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named: Vec<(&str, &Tensor<T>)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let (entries, payload) = encode_blocks(&named, self.dtype)?;
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            dtype: self.dtype,
            step: self.step,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            arch: self.arch.clone(),
            run_config: self.run_config.clone(),
            tensors: entries,
        };
        write_container(&header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (CheckpointHeader, _) = read_container(bytes)?;
        if h.format != CHECKPOINT_FORMAT || h.version != FORMAT_VERSION {
            return Err(Error::Format(format!("not a version {FORMAT_VERSION} checkpoint: {} v{}", h.format, h.version)));
        }
        let tensors = decode_blocks(&h.tensors, payload, h.dtype)?;
        Ok(Self {
            arch: h.arch,
            step: h.step,
            seed: h.seed,
            config_hash: h.config_hash,
            run_config: h.run_config,
            dtype: h.dtype,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleHeader {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub class_name: String,
    pub is_anomalous: bool,
    pub config_hash: String,
    /// `f_rgb`, `f_3d`, `valid`, `gt` in that order; masks are stored as
    /// 0/1 matrices.
    pub tensors: Vec<BlockEntry>,
}

const SAMPLE_BLOCKS: [&str; 4] = ["f_rgb", "f_3d", "valid", "gt"];

fn mask_tensor<T: Scalar>(m: &PixelMask) -> Tensor<T> {
    let data = m.data().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    Tensor::new(vec![m.height(), m.width()], data).expect("mask extents match its data")
}

fn tensor_mask<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<PixelMask> {
    if t.rank() != 2 {
        return Err(Error::Format(format!("{what} must be a rank-2 matrix, got shape {:?}", t.shape())));
    }
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v == T::one() {
                Ok(true)
            } else if v == T::zero() {
                Ok(false)
            } else {
                Err(Error::Format(format!("{what} entries must be 0 or 1, found {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PixelMask::from_vec(t.shape()[0], t.shape()[1], data)
}

pub fn encode_sample<T: Scalar>(s: &LabeledSample<T>, config_hash: &str, dtype: DType) -> Result<Vec<u8>> {
    let (valid, gt) = (mask_tensor::<T>(&s.mask), mask_tensor::<T>(&s.gt));
    let (entries, payload) = encode_blocks(
        &[
            (SAMPLE_BLOCKS[0], &s.f_rgb),
            (SAMPLE_BLOCKS[1], &s.f_3d),
            (SAMPLE_BLOCKS[2], &valid),
            (SAMPLE_BLOCKS[3], &gt),
        ],
        dtype,
    )?;
    let header = SampleHeader {
        format: SAMPLE_FORMAT.into(),
        version: FORMAT_VERSION,
        dtype,
        class_name: s.class_name.clone(),
        is_anomalous: s.is_anomalous,
        config_hash: config_hash.to_string(),
        tensors: entries,
    };
    write_container(&header, &payload)
}

/// Parses a sample bundle. The returned header carries the config hash.
pub fn decode_sample<T: Scalar>(bytes: &[u8]) -> Result<(LabeledSample<T>, SampleHeader)> {
    let (h, payload): (SampleHeader, _) = read_container(bytes)?;
    if h.format != SAMPLE_FORMAT || h.version != FORMAT_VERSION {
        return Err(Error::Format(format!("not a version {FORMAT_VERSION} sample: {} v{}", h.format, h.version)));
    }
    let names: Vec<&str> = h.tensors.iter().map(|e| e.name.as_str()).collect();
    if names != SAMPLE_BLOCKS {
        return Err(Error::Format(format!("sample blocks must be {SAMPLE_BLOCKS:?}, found {names:?}")));
    }
    let mut blocks = decode_blocks::<T>(&h.tensors, payload, h.dtype)?.into_iter().map(|(_, t)| t);
    let (f_rgb, f_3d) = (blocks.next().expect("4 blocks"), blocks.next().expect("4 blocks"));
    let mask = tensor_mask(&blocks.next().expect("4 blocks"), "valid")?;
    let gt = tensor_mask(&blocks.next().expect("4 blocks"), "gt")?;
    if f_rgb.rank() != 3 || f_3d.rank() != 3 {
        return Err(Error::Format("feature blocks must be H x W x D grids".into()));
    }
    mask.expect_dims(f_rgb.shape()[0], f_rgb.shape()[1], "sample validity mask")?;
    gt.expect_dims(f_rgb.shape()[0], f_rgb.shape()[1], "sample ground truth")?;
    if !gt.is_subset_of(&mask) {
        return Err(Error::Format("ground-truth pixels must all be valid".into()));
    }
    if h.is_anomalous == gt.is_empty() {
        return Err(Error::Format("is_anomalous must hold exactly when the ground truth is nonempty".into()));
    }
    let sample = LabeledSample {
        class_name: h.class_name.clone(),
        f_rgb,
        f_3d,
        mask,
        gt,
        is_anomalous: h.is_anomalous,
    };
    Ok((sample, h))
}

/// Sidecar metadata written next to an exported map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSidecar {
    pub class_name: String,
    pub height: usize,
    pub width: usize,
    pub image_score: f64,
    pub config_hash: String,
    pub checkpoint_step: u64,
}

/// Rank-2 f32 TMF1 encoding of a map.
pub fn encode_map<T: Scalar>(map: &AnomalyMap<T>) -> Result<Vec<u8>> {
    encode_tmf(map.as_tensor(), DType::F32)
}

/// Binary 8-bit PGM with values scaled so the map maximum becomes 255.
pub fn encode_pgm<T: Scalar>(map: &AnomalyMap<T>) -> Vec<u8> {
    let max = map.data().iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|v| {
        if max > 0.0 {
            (v.to_f64_lossy() / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}
