//! Binary checkpoint: magic, version, JSON metadata, tensor index, payload.
//!
//! ```text
//! magic      7 bytes  "REAREC\x01"
//! version    u32
//! meta_len   u64, followed by meta_len bytes of UTF-8 JSON
//! count      u32, followed by count index entries:
//!              name_len u32, name, rank u32, dims u64 x rank,
//!              offset u64, len u64 (floats), crc32 u32
//! payload    u64 byte length, then little-endian f32 data
//! ```
//!
//! All integers are little-endian. Offsets are relative to the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"REAREC\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Dataset file the model was trained on, if any.
    pub dataset: Option<String>,
}

impl CheckpointMeta {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            train: None,
            epoch: 0,
            history: Vec::new(),
            dataset: None,
        }
    }
}

pub fn encode_checkpoint(params: &ModelParams<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());

    let mut payload = Vec::new();
    for (name, t) in &named {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&payload[offset as usize..]);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Integrity(format!("file truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Integrity(format!("{what} {v} does not fit in memory")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(CHECKPOINT_MAGIC))));
    }
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32("version").map_err(|_| Error::Format("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let meta_len = r.u64("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut index = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("tensor dim")).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("tensor offset")?;
        let len = r.u64("tensor length")?;
        let crc = r.u32("tensor checksum")?;
        index.push((name, shape, offset, len, crc));
    }
    let payload_len = r.u64("payload length")?;
    let payload = r.take(payload_len, "payload")?;

    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(index.len());
    let mut tensors = Vec::with_capacity(index.len());
    for (name, shape, offset, len, crc) in index {
        let bytes_len = len
            .checked_mul(4)
            .ok_or_else(|| Error::Integrity(format!("tensor {name} length overflows")))?;
        let end = offset
            .checked_add(bytes_len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Integrity(format!("tensor {name} extends past the payload")))?;
        if shape.iter().product::<usize>() != len {
            return Err(Error::Format(format!("tensor {name} shape {shape:?} does not hold {len} values")));
        }
        let blob = &payload[offset..end];
        if crc32fast::hash(blob) != crc {
            return Err(Error::Integrity(format!("checksum mismatch in tensor {name}")));
        }
        spans.push((offset, end));
        let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::from_vec(shape, data)));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(Error::Integrity("tensor payload regions overlap".into()));
    }
    let params = ModelParams::from_named(&meta.encoder, tensors)?;
    Ok((params, meta))
}

pub fn save_checkpoint(params: &ModelParams<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MaskMode;

    fn sample() -> (ModelParams<f32>, CheckpointMeta) {
        let cfg = EncoderConfig {
            num_items: 12,
            d: 8,
            layers: 2,
            heads: 2,
            n_max: 6,
            k_max: 2,
            mask_mode: MaskMode::PrefixBidirectional,
            dropout: 0.1,
        };
        let p = ModelParams::init(&cfg, 4).unwrap();
        let mut meta = CheckpointMeta::new(cfg);
        meta.epoch = 3;
        meta.train = Some(TrainConfig::default());
        meta.history = vec![EpochRecord {
            epoch: 1,
            train_loss: 2.5,
            valid_metric: 0.125,
        }];
        (p, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, meta) = sample();
        let bytes = encode_checkpoint(&p, &meta).unwrap();
        let (q, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta);
        for ((na, a), (nb, b)) in p.named().iter().zip(q.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_and_header_errors() {
        let (p, meta) = sample();
        let bytes = encode_checkpoint(&p, &meta).unwrap();

        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Integrity(_))));

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 10]), Err(Error::Integrity(_))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        match decode_checkpoint(&magic) {
            Err(Error::Format(msg)) => assert!(msg.contains("REAREC")),
            other => panic!("{other:?}"),
        }

        let mut version = bytes.clone();
        version[7] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let (p, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &meta, &path).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!((q, m), (p, meta));
    }
}
