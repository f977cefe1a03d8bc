//! Binary checkpoint: parameters, a JSON config snapshot and the RNG state.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_file, write_atomic};
use super::HarnessError;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"RVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Rft,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Sft => 1,
            Stage::Rft => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self, HarnessError> {
        match t {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Sft),
            2 => Ok(Stage::Rft),
            _ => Err(HarnessError::Format(format!("unknown stage tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rft => "rft",
        }
    }
}

/// Generator position: seed, stream and 128-bit word position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: ParamStore,
    /// Opaque JSON snapshot of the run configuration and metadata.
    pub config: String,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.stage.tag());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                b.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], HarnessError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| HarnessError::Format(format!("checkpoint truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        fn u32_of(s: &[u8]) -> usize {
            u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize
        }
        if take(4)? != MAGIC {
            return Err(HarnessError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32_of(take(4)?);
        if version != VERSION as usize {
            return Err(HarnessError::Format(format!("unsupported checkpoint version {version}")));
        }
        let stage = Stage::from_tag(take(1)?[0])?;
        let count = u32_of(take(4)?);
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = u32_of(take(4)?);
            let name = String::from_utf8(take(n)?.to_vec()).map_err(|e| HarnessError::Format(e.to_string()))?;
            let rank = u32_of(take(4)?);
            let shape = (0..rank).map(|_| take(4).map(u32_of)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = take(8 * numel)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| HarnessError::Format(e.to_string()))?;
            params.insert(name, t);
        }
        let n = u32_of(take(4)?);
        let config = String::from_utf8(take(n)?.to_vec()).map_err(|e| HarnessError::Format(e.to_string()))?;
        let seed: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(take(16)?.try_into().expect("16 bytes"));
        if pos != bytes.len() {
            return Err(HarnessError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { stage, params, config, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_bytes(&read_file(path)?)
    }
}
