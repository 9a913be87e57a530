//! Binary checkpoint of named f32 tensors with a trailing CRC32.
//!
//! Layout (little-endian): `"DCAN"`, u32 version, u32 tensor count, then per
//! tensor u16 name length, UTF-8 name, u8 rank, rank × u32 extents and the
//! f32 payload; finally the CRC32 of every byte after the magic.

use std::collections::HashSet;
use std::path::Path;

use super::adam::Adam;
use crate::model::{Dcanet, ModelConfig, Variant};
use crate::tensor::{Shape, Tensor};
use crate::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 4] = b"DCAN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor<f32>)>,
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("truncated at byte {}", self.pos + 4)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor name too long: {} bytes", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate tensor `{name}`")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(malformed("file too short"));
        }
        let (body, tail) = bytes[4..].split_at(bytes.len() - 8);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::HashMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| malformed("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let shape = Shape::new(&dims).map_err(|e| malformed(format!("`{name}`: {e}")))?;
            let n = shape.numel();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| malformed("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if !seen.insert(name.clone()) {
                return Err(malformed(format!("duplicate tensor `{name}`")));
            }
            let t = Tensor::from_vec(&dims, data).map_err(|e| malformed(e.to_string()))?;
            ck.tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes through a temporary file renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Splits a u64 into four 16-bit chunks, each exact in f32.
fn encode_u64(v: u64) -> Tensor<f32> {
    let data = (0..4).map(|k| ((v >> (16 * k)) & 0xffff) as f32).collect();
    Tensor::from_vec(&[4], data).expect("valid shape")
}

fn decode_u64(name: &str, t: &Tensor<f32>) -> std::result::Result<u64, CheckpointError> {
    if t.dims() != [4] {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            found: t.shape().clone(),
            expected: Shape::new(&[4]).expect("valid"),
        });
    }
    let mut v = 0u64;
    for (k, &c) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&c) || c.fract() != 0.0 {
            return Err(malformed(format!("`{name}` chunk {c} is not a 16-bit integer")));
        }
        v |= (c as u64) << (16 * k);
    }
    Ok(v)
}

fn ints(v: &[usize]) -> Tensor<f32> {
    Tensor::from_vec(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("valid shape")
}

fn read_ints(ck: &Checkpoint, name: &str) -> std::result::Result<Vec<usize>, CheckpointError> {
    let t = ck.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(malformed(format!("`{name}` holds non-integer {v}")))
            }
        })
        .collect()
}

fn read_int(ck: &Checkpoint, name: &str) -> std::result::Result<usize, CheckpointError> {
    let v = read_ints(ck, name)?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(malformed(format!("`{name}` must hold one value"))),
    }
}

/// Position in a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    /// Completed iterations.
    pub iter: u64,
    pub seed: u64,
}

/// Everything restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Restored {
    pub model: Dcanet<f32>,
    pub adam: Option<Adam<f32>>,
    pub progress: Option<Progress>,
}

const CONFIG_KEYS: [&str; 7] = [
    "config.in_channels",
    "config.width",
    "config.variant",
    "config.cam_reduction",
    "config.sam_kernel",
    "config.upper_blocks",
    "config.lower_rates",
];

/// Snapshot of a model, optionally with optimiser state and run progress.
pub fn make_checkpoint(model: &Dcanet<f32>, adam: Option<&Adam<f32>>, progress: Option<Progress>) -> Result<Checkpoint> {
    let cfg = model.config();
    let mut ck = Checkpoint::new();
    ck.push(CONFIG_KEYS[0], ints(&[cfg.in_channels]))?;
    ck.push(CONFIG_KEYS[1], ints(&[cfg.width]))?;
    ck.push(CONFIG_KEYS[2], ints(&[cfg.variant.code() as usize]))?;
    ck.push(CONFIG_KEYS[3], ints(&[cfg.cam_reduction]))?;
    ck.push(CONFIG_KEYS[4], ints(&[cfg.sam_kernel]))?;
    ck.push(CONFIG_KEYS[5], ints(&cfg.upper_blocks))?;
    ck.push(CONFIG_KEYS[6], ints(&cfg.lower_rates))?;
    for (_, e) in model.params().iter() {
        ck.push(e.name.clone(), e.value.clone())?;
    }
    if let Some(adam) = adam {
        ck.push("adam.step", encode_u64(adam.step_count()))?;
        for (id, e) in model.params().trainable() {
            let (m, v) = adam
                .moments(id.index())
                .ok_or_else(|| Error::InvalidArgument(format!("optimiser has no state for `{}`", e.name)))?;
            ck.push(format!("adam.m.{}", e.name), m.clone())?;
            ck.push(format!("adam.v.{}", e.name), v.clone())?;
        }
    }
    if let Some(p) = progress {
        ck.push("train.iter", encode_u64(p.iter))?;
        ck.push("train.seed", encode_u64(p.seed))?;
    }
    Ok(ck)
}

fn assign(name: &str, dst: &mut Tensor<f32>, src: &Tensor<f32>) -> std::result::Result<(), CheckpointError> {
    if dst.shape() != src.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            found: src.shape().clone(),
            expected: dst.shape().clone(),
        });
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Rebuilds the model (and optimiser state, if stored) from a checkpoint.
pub fn restore_checkpoint(ck: &Checkpoint) -> Result<Restored> {
    let upper = read_ints(ck, "config.upper_blocks")?;
    let code = read_int(ck, "config.variant")?;
    let config = ModelConfig {
        in_channels: read_int(ck, "config.in_channels")?,
        width: read_int(ck, "config.width")?,
        variant: u8::try_from(code)
            .ok()
            .and_then(Variant::from_code)
            .ok_or_else(|| malformed(format!("unknown variant code {code}")))?,
        cam_reduction: read_int(ck, "config.cam_reduction")?,
        sam_kernel: read_int(ck, "config.sam_kernel")?,
        upper_blocks: upper
            .try_into()
            .map_err(|_| malformed("config.upper_blocks must hold 5 values"))?,
        lower_rates: read_ints(ck, "config.lower_rates")?,
    };
    let mut model = Dcanet::<f32>::new(config, 0)?;
    let mut known: HashSet<String> = CONFIG_KEYS.iter().map(|s| s.to_string()).collect();

    let ids: Vec<_> = model.params().iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in &ids {
        let src = ck.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        assign(name, model.params_mut().get_mut(*id), src)?;
        known.insert(name.clone());
    }

    let adam = match ck.get("adam.step") {
        None => None,
        Some(step) => {
            let mut adam = Adam::new(model.params());
            adam.set_step_count(decode_u64("adam.step", step)?);
            known.insert("adam.step".into());
            for (id, e) in model.params().trainable() {
                let (m, v) = adam.moments_mut(id.index()).expect("trainable has moments");
                for (key, dst) in [(format!("adam.m.{}", e.name), m), (format!("adam.v.{}", e.name), v)] {
                    let src = ck.get(&key).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                    assign(&key, dst, src)?;
                    known.insert(key);
                }
            }
            Some(adam)
        }
    };

    let progress = match (ck.get("train.iter"), ck.get("train.seed")) {
        (None, None) => None,
        (Some(i), Some(s)) => {
            known.insert("train.iter".into());
            known.insert("train.seed".into());
            Some(Progress {
                iter: decode_u64("train.iter", i)?,
                seed: decode_u64("train.seed", s)?,
            })
        }
        (None, Some(_)) => return Err(CheckpointError::MissingTensor("train.iter".into()).into()),
        (Some(_), None) => return Err(CheckpointError::MissingTensor("train.seed".into()).into()),
    };

    if let Some(name) = ck.names().find(|n| !known.contains(*n)) {
        return Err(CheckpointError::UnknownTensor(name.to_string()).into());
    }
    Ok(Restored { model, adam, progress })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dcanet<f32> {
        Dcanet::new(ModelConfig::gray().with_width(8), 3).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small();
        let adam = Adam::new(m.params());
        let ck = make_checkpoint(&m, Some(&adam), Some(Progress { iter: 70_000_123, seed: u64::MAX - 5 })).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let r = restore_checkpoint(&back).unwrap();
        assert_eq!(r.progress, Some(Progress { iter: 70_000_123, seed: u64::MAX - 5 }));
        let again = make_checkpoint(&r.model, r.adam.as_ref(), r.progress).unwrap();
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dcan");
        let ck = make_checkpoint(&small(), None, None).unwrap();
        ck.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        loaded.save(dir.path().join("n.dcan")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("n.dcan")).unwrap());
        assert!(restore_checkpoint(&loaded).unwrap().adam.is_none());
    }

    #[test]
    fn tensor_count_matches_inventory() {
        let m = Dcanet::<f32>::new(ModelConfig::gray(), 0).unwrap();
        let ck = make_checkpoint(&m, None, None).unwrap();
        let per_layer: usize = m
            .inventory()
            .iter()
            .map(|l| match l.kind {
                crate::model::LayerKind::Conv => 2,
                crate::model::LayerKind::BatchNorm => 4,
                crate::model::LayerKind::Prelu => 1,
            })
            .sum();
        assert_eq!(ck.len(), per_layer + CONFIG_KEYS.len());
        // estimator, input fusion, attention, upper, lower, head
        let convs = 7 + 1 + 6 + 13 + 17 + 1;
        let bns = 5 + 1 + 12 + 16;
        assert_eq!(per_layer, 2 * convs + 4 * bns + 1);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = make_checkpoint(&small(), None, None).unwrap().to_bytes();
        let mut bad = bytes.clone();
        let k = bad.len() / 2;
        bad[k] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::HashMismatch { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body[4..]);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn version_and_names_are_checked() {
        let bytes = make_checkpoint(&small(), None, None).unwrap().to_bytes();
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&with_crc(body)),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));

        let mut ck = make_checkpoint(&small(), None, None).unwrap();
        ck.push("mystery", Tensor::zeros(&[1]).unwrap()).unwrap();
        let err = restore_checkpoint(&ck).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::UnknownTensor(ref n)) if n == "mystery"));

        let full = make_checkpoint(&small(), None, None).unwrap();
        let mut partial = Checkpoint::new();
        for (n, t) in full.tensors.iter().filter(|(n, _)| n != "head.bias") {
            partial.push(n.clone(), t.clone()).unwrap();
        }
        let err = restore_checkpoint(&partial).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::MissingTensor(ref n)) if n == "head.bias"));

        let mut wrong = Checkpoint::new();
        for (n, t) in &full.tensors {
            let t = if n == "head.bias" { Tensor::zeros(&[2]).unwrap() } else { t.clone() };
            wrong.push(n.clone(), t).unwrap();
        }
        assert!(matches!(
            restore_checkpoint(&wrong).unwrap_err(),
            Error::Checkpoint(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn u64_chunks_are_exact() {
        for v in [0u64, 1, 65535, 65536, u64::MAX, 0x1234_5678_9abc_def0] {
            assert_eq!(decode_u64("x", &encode_u64(v)).unwrap(), v);
        }
    }
}
