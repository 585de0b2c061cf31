//! Checkpoint container: magic "PYCK", version, stage tag, rng state,
//! step counter, then named tensors in the on-disk tensor format.
//! Load → save reproduces identical bytes.

use std::path::Path;

use crate::datagen::pyt::{decode_pyt, encode_pyt, F32Tensor};
use crate::error::{Error, Result};
use crate::numerics::ParamSet;

pub const CKPT_MAGIC: &[u8; 4] = b"PYCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    fn from_tag(t: u8, name: &str) -> Result<Self> {
        match t {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Finetune),
            other => Err(Error::format(name, format!("unknown stage tag {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    /// ChaCha word position at save time.
    pub rng_word_pos: u128,
    pub step: u64,
    pub params: Vec<(String, F32Tensor)>,
}

impl Checkpoint {
    /// Capture parameter sets in order; names must be globally unique.
    pub fn new(stage: Stage, seed: u64, rng_word_pos: u128, step: u64, sets: &[&ParamSet]) -> Self {
        let mut params = Vec::new();
        for ps in sets {
            for p in ps.iter() {
                let data: Vec<f32> = p.value.data.iter().map(|&v| v as f32).collect();
                params.push((
                    p.name.clone(),
                    F32Tensor { dims: p.value.dims.clone(), data },
                ));
            }
        }
        Checkpoint { version: CKPT_VERSION, stage, seed, rng_word_pos, step, params }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.stage.tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&encode_pyt(t));
        }
        out
    }

    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let need = |off: usize, len: usize| -> Result<&[u8]> {
            bytes
                .get(off..off + len)
                .ok_or_else(|| Error::format(name, "truncated checkpoint"))
        };
        if need(0, 4)? != CKPT_MAGIC {
            return Err(Error::format(name, "bad magic bytes"));
        }
        let version = u32::from_le_bytes(need(4, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::format(name, format!("unsupported version {version}")));
        }
        let stage = Stage::from_tag(need(8, 1)?[0], name)?;
        let seed = u64::from_le_bytes(need(9, 8)?.try_into().unwrap());
        let rng_word_pos = u128::from_le_bytes(need(17, 16)?.try_into().unwrap());
        let step = u64::from_le_bytes(need(33, 8)?.try_into().unwrap());
        let n = u32::from_le_bytes(need(41, 4)?.try_into().unwrap()) as usize;
        let mut off = 45;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u32::from_le_bytes(need(off, 4)?.try_into().unwrap()) as usize;
            off += 4;
            let pname = String::from_utf8(need(off, name_len)?.to_vec())
                .map_err(|_| Error::format(name, "non-utf8 parameter name"))?;
            off += name_len;
            let (t, consumed) = decode_pyt(&bytes[off..], name)?;
            off += consumed;
            params.push((pname, t));
        }
        if off != bytes.len() {
            return Err(Error::format(name, "trailing bytes after records"));
        }
        Ok(Checkpoint { version, stage, seed, rng_word_pos, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
        Self::decode(&bytes, &name)
    }

    /// Rebuild a parameter set from records whose names start with
    /// `prefix`, preserving record order.
    pub fn param_set(&self, prefix: &str) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        for (name, t) in &self.params {
            if name.starts_with(prefix) {
                ps.add(name, t.dims.clone(), t.to_f64());
            }
        }
        if ps.is_empty() {
            return Err(Error::Lookup(format!(
                "checkpoint holds no parameters under prefix '{prefix}'"
            )));
        }
        Ok(ps)
    }
}
