//! Binary checkpoint container.
//!
//! Layout: the ASCII magic `GMIXCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the tensor blocks
//! as little-endian `f32` values in header order. The header carries the run
//! config, counters, the RNG position and a table of block names, shapes,
//! offsets (relative to the end of the header) and FNV-1a checksums.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GMIXCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// Position of a ChaCha8 stream, enough to continue it bit-exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the position is a 68-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Full training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub encoder: Encoder<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    /// Byte length.
    len: u64,
    /// FNV-1a 64 of the block bytes, hex.
    checksum: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Header {
    config: RunConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
    blocks: Vec<BlockEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Blocks in container order: parameter values, Adam moments, then batch-norm
/// running statistics.
fn blocks(enc: &Encoder<f32>) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for p in enc.params().iter() {
        out.push((format!("param:{}", p.name), p.shape().to_vec(), p.value.data()));
    }
    for p in enc.params().iter() {
        out.push((format!("adam-m:{}", p.name), p.shape().to_vec(), p.m.data()));
    }
    for p in enc.params().iter() {
        out.push((format!("adam-v:{}", p.name), p.shape().to_vec(), p.v.data()));
    }
    for bn in enc.batch_norms() {
        out.push((format!("bn-mean:{}", bn.name), vec![bn.running_mean.len()], &bn.running_mean[..]));
        out.push((format!("bn-var:{}", bn.name), vec![bn.running_var.len()], &bn.running_var[..]));
    }
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in blocks(&self.encoder) {
            let start = payload.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let bytes = &payload[start..];
            entries.push(BlockEntry {
                name,
                shape,
                offset: start as u64,
                len: bytes.len() as u64,
                checksum: format!("{:016x}", fnv1a(bytes)),
            });
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            blocks: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREAMBLE {
            return Err(err(format!("preamble truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(err("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = PREAMBLE
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| err(format!("header truncated (needs {hlen} bytes)")))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| err(format!("malformed header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut encoder = Encoder::<f32>::new(header.config.encoder_config(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = blocks(&encoder).into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != header.blocks.len() {
            return Err(err(format!(
                "block table lists {} blocks, the model needs {}",
                header.blocks.len(),
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&header.blocks) {
            if &entry.name != name {
                return Err(err(format!("block `{}` found where `{name}` was expected", entry.name)));
            }
            if &entry.shape != shape {
                return Err(err(format!("block `{name}` has shape {:?}, the model needs {shape:?}", entry.shape)));
            }
            let want = shape.iter().product::<usize>() * 4;
            if entry.len as usize != want {
                return Err(err(format!("block `{name}` length {} does not match its shape", entry.len)));
            }
            let (start, end) = (entry.offset as usize, entry.offset as usize + want);
            let raw = payload.get(start..end).ok_or_else(|| {
                err(format!(
                    "block `{name}` truncated (needs payload bytes {start}..{end}, file has {})",
                    payload.len()
                ))
            })?;
            if format!("{:016x}", fnv1a(raw)) != entry.checksum {
                return Err(err(format!("block `{name}` checksum mismatch")));
            }
            values.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
        }
        let used = header.blocks.iter().map(|b| b.offset + b.len).max().unwrap_or(0) as usize;
        if payload.len() != used {
            return Err(err(format!("{} trailing bytes after the last block", payload.len() - used)));
        }
        install(&mut encoder, values)?;
        Ok(Checkpoint { config: header.config, epoch: header.epoch, step: header.step, rng: header.rng, encoder })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write decoded block values into the encoder, in `blocks` order.
fn install(enc: &mut Encoder<f32>, values: Vec<Vec<f32>>) -> Result<()> {
    let mut it = values.into_iter();
    let mut next =
        |shape: Vec<usize>| -> Result<Tensor> { Tensor::new(shape, it.next().expect("block count checked")) };
    let n = enc.params().len();
    for which in 0..3 {
        for slot in 0..n {
            let shape = enc.params().get(slot).shape().to_vec();
            let t = next(shape)?;
            let p = enc.params_mut().get_mut(slot);
            match which {
                0 => p.value = t,
                1 => p.m = t,
                _ => p.v = t,
            }
        }
    }
    for i in 0..enc.batch_norms().len() {
        let len = enc.batch_norms()[i].running_mean.len();
        let mean = next(vec![len])?.into_data();
        let var = next(vec![len])?.into_data();
        let bn = &mut enc.batch_norms_mut()[i];
        bn.running_mean = mean;
        bn.running_var = var;
    }
    Ok(())
}
