//! The `SFAW` weights container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFAW" | version u32 | record count u32 | records... | crc32 u32
//! record: name length u32 | UTF-8 name | dtype u8 | rank u32 | extents u64 × rank | payload
//! ```
//!
//! The CRC covers everything between the version field and the CRC itself.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context};
use sfanet::network::SfanetModel;
use sfanet::training::TrainState;
use sfanet::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"SFAW";
pub const VERSION: u32 = 1;

pub const ITER_RECORD: &str = "state/iter";
pub const MOMENTUM_PREFIX: &str = "state/momentum/";
pub const MEAN_RECORD: &str = "meta/pixel_mean";

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl RecordData {
    fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            RecordData::F32(t) => t.shape(),
            RecordData::F64(t) => t.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

/// Bad checksum, as opposed to any other load failure.
#[derive(Debug)]
pub struct CrcMismatch {
    pub stored: u32,
    pub computed: u32,
}

impl std::fmt::Display for CrcMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CRC mismatch: stored {:08x}, computed {:08x}", self.stored, self.computed)
    }
}

impl std::error::Error for CrcMismatch {}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightsFile {
    pub records: Vec<Record>,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| anyhow!("truncated weights file at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> anyhow::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> anyhow::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl WeightsFile {
    pub fn get(&self, name: &str) -> Option<&RecordData> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.data)
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.records.push(Record {
            name: name.into(),
            data: RecordData::F32(t),
        });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.records.push(Record {
            name: name.into(),
            data: RecordData::F64(t),
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend((self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            body.extend((r.name.len() as u32).to_le_bytes());
            body.extend(r.name.as_bytes());
            body.push(dtype_tag(r.data.dtype()));
            body.extend((r.data.shape().len() as u32).to_le_bytes());
            for &e in r.data.shape() {
                body.extend((e as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(t) => t.data().iter().for_each(|v| body.extend(v.to_le_bytes())),
                RecordData::F64(t) => t.data().iter().for_each(|v| body.extend(v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(body);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        ensure!(bytes.len() >= 16, "weights file too short ({} bytes)", bytes.len());
        ensure!(&bytes[..4] == MAGIC, "not a weights file (bad magic)");
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        ensure!(version == VERSION, "unsupported weights version {version}");
        let body = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CrcMismatch { stored, computed }.into());
        }
        let mut rd = Reader { bytes: body, pos: 0 };
        let count = rd.u32()?;
        let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .context("record name is not UTF-8")?
                .to_string();
            ensure!(names.insert(name.clone()), "duplicate record {name}");
            let tag = rd.take(1)?[0];
            let rank = rd.u32()? as usize;
            ensure!(rank <= 8, "record {name} has rank {rank}");
            let shape = (0..rank)
                .map(|_| rd.u64().map(|e| e as usize))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| anyhow!("record {name} is too large"))?;
            let data = match tag {
                0 => {
                    let raw = rd.take(n.checked_mul(4).ok_or_else(|| anyhow!("record {name} too large"))?)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    RecordData::F32(Tensor::from_vec(shape, v)?)
                }
                1 => {
                    let raw = rd.take(n.checked_mul(8).ok_or_else(|| anyhow!("record {name} too large"))?)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    RecordData::F64(Tensor::from_vec(shape, v)?)
                }
                t => bail!("record {name} has unknown dtype tag {t}"),
            };
            records.push(Record { name, data });
        }
        ensure!(rd.pos == body.len(), "{} stray bytes after the last record", body.len() - rd.pos);
        Ok(WeightsFile { records })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    /// Every model tensor, plus optimizer state and the pixel mean.
    pub fn from_model(model: &SfanetModel<f32>, state: Option<&TrainState>, mean: [f32; 3]) -> Self {
        let mut w = WeightsFile::default();
        for (_, e) in model.store.iter() {
            w.push_f32(e.name.clone(), e.tensor.clone());
        }
        if let Some(s) = state {
            w.push_f64(ITER_RECORD, Tensor::scalar(s.iter as f64));
            for (name, buf) in &s.optimizer.buffers {
                w.push_f32(
                    format!("{MOMENTUM_PREFIX}{name}"),
                    Tensor::from_vec(vec![buf.len()], buf.clone()).expect("length matches"),
                );
            }
        }
        w.push_f32(MEAN_RECORD, Tensor::from_vec(vec![3], mean.to_vec()).expect("three values"));
        w
    }

    pub fn mean(&self) -> anyhow::Result<[f32; 3]> {
        match self.get(MEAN_RECORD) {
            Some(RecordData::F32(t)) if t.numel() == 3 => Ok([t.data()[0], t.data()[1], t.data()[2]]),
            _ => bail!("weights lack a {MEAN_RECORD} record"),
        }
    }

    /// Copies every stored tensor into `model`. Nothing is written unless
    /// all names and shapes match.
    pub fn apply(&self, model: &mut SfanetModel<f32>) -> anyhow::Result<()> {
        let classes = model.config.num_classes;
        if let Some(head) = self.get("head.classifier.weight") {
            let stored = head.shape().first().copied().unwrap_or(0);
            ensure!(stored == classes, "weights predict {stored} classes, config has {classes}");
        }
        let mut updates = Vec::new();
        for (id, e) in model.store.iter() {
            let rec = self
                .get(&e.name)
                .ok_or_else(|| anyhow!("weights lack tensor {}", e.name))?;
            let RecordData::F32(t) = rec else {
                bail!("tensor {} is not f32", e.name)
            };
            ensure!(
                t.shape() == e.tensor.shape(),
                "tensor {} has shape {:?}, model expects {:?}",
                e.name,
                t.shape(),
                e.tensor.shape()
            );
            updates.push((id, t.data().to_vec()));
        }
        let known: BTreeSet<&str> = model.store.iter().map(|(_, e)| e.name.as_str()).collect();
        for r in &self.records {
            let aux = r.name.starts_with("state/") || r.name.starts_with("meta/");
            ensure!(aux || known.contains(r.name.as_str()), "unexpected tensor {} in weights", r.name);
        }
        for (id, data) in updates {
            model.store.tensor_mut(id).data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    /// Optimizer progress saved alongside the weights, if any.
    pub fn restore_state(&self, state: &mut TrainState) -> anyhow::Result<bool> {
        let Some(RecordData::F64(iter)) = self.get(ITER_RECORD) else {
            return Ok(false);
        };
        state.iter = iter.item()? as usize;
        state.optimizer.buffers.clear();
        for r in &self.records {
            if let Some(name) = r.name.strip_prefix(MOMENTUM_PREFIX) {
                let RecordData::F32(t) = &r.data else {
                    bail!("momentum buffer {name} is not f32")
                };
                state.optimizer.buffers.insert(name.to_string(), t.data().to_vec());
            }
        }
        state.mean = self.mean()?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfanet::network::SfanetConfig;
    use sfanet::training::TrainConfig;

    fn model(seed: u64) -> SfanetModel<f32> {
        let cfg = SfanetConfig {
            width: 0.0625,
            input_h: 32,
            input_w: 32,
            ..SfanetConfig::default()
        };
        SfanetModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = model(1);
        let mut state = TrainState::new(&TrainConfig::default(), [1.0, 2.0, 3.0]);
        state.iter = 17;
        state.optimizer.buffers.insert("x".into(), vec![0.5, -0.25]);
        let w = WeightsFile::from_model(&a, Some(&state), state.mean);
        let bytes = w.to_bytes();
        let back = WeightsFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);

        let mut b = model(2);
        back.apply(&mut b).unwrap();
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.tensor), bits(&y.tensor), "{}", x.name);
        }
        let mut restored = TrainState::new(&TrainConfig::default(), [0.0; 3]);
        assert!(back.restore_state(&mut restored).unwrap());
        assert_eq!(restored.iter, 17);
        assert_eq!(restored.mean, [1.0, 2.0, 3.0]);
        assert_eq!(restored.optimizer.buffers, state.optimizer.buffers);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = WeightsFile::from_model(&model(1), None, [0.0; 3]).to_bytes();
        for pos in [8, 20, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let err = WeightsFile::from_bytes(&bad).unwrap_err();
            assert!(err.downcast_ref::<CrcMismatch>().is_some(), "byte {pos}: {err}");
        }
        assert!(WeightsFile::from_bytes(&bytes[..bytes.len() - 7]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(WeightsFile::from_bytes(&magic).is_err());
    }

    #[test]
    fn class_mismatch_leaves_model_untouched() {
        let w = WeightsFile::from_model(&model(1), None, [0.0; 3]);
        let cfg = SfanetConfig {
            width: 0.0625,
            input_h: 32,
            input_w: 32,
            num_classes: 5,
            ..SfanetConfig::default()
        };
        let mut other = SfanetModel::<f32>::new(cfg, 3).unwrap();
        let before: Vec<_> = other.store.iter().map(|(_, e)| e.tensor.data().to_vec()).collect();
        let err = w.apply(&mut other).unwrap_err();
        assert!(err.to_string().contains("classes"), "{err}");
        let after: Vec<_> = other.store.iter().map(|(_, e)| e.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn header_layout() {
        let mut w = WeightsFile::default();
        w.push_f32("a", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
        let b = w.to_bytes();
        assert_eq!(&b[..4], b"SFAW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'a');
        assert_eq!(b[17], 0);
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[22..30].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[30..34].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 30 + 8 + 4);
        assert_eq!(
            u32::from_le_bytes(b[38..].try_into().unwrap()),
            crc32fast::hash(&b[8..38])
        );
    }
}
