//! Binary checkpoints: a named tensor table plus run metadata, RNG state
//! and a SHA-256 integrity digest.
//!
//! Layout (little-endian throughout):
//!   magic "PVADCKP1" | u32 version
//!   u64 meta_len | meta TOML
//!   32-byte rng seed | u128 rng word position
//!   u32 count | (u32 name_len, name, u64 len, u64 values)*   -- counters
//!   u32 count | (u32 name_len, name, u32 ndim, u64 dims*, f32 data)*
//!   32-byte sha256 of everything above
//!
//! Tensors are stored name-sorted, so identical state always produces
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::PipelineError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PVADCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub stage: String,
    pub ablation: String,
    pub epochs_done: usize,
    pub global_step: u64,
    pub adam_step: u64,
    pub som_step: u64,
    pub ac_m: Option<usize>,
    pub proto_kept: Option<usize>,
    pub config: Config,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            stage: String::new(),
            ablation: "none".into(),
            epochs_done: 0,
            global_step: 0,
            adam_step: 0,
            som_step: 0,
            ac_m: None,
            proto_kept: None,
            config: Config::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub counters: BTreeMap<String, Vec<u64>>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let meta = toml::to_string(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());

        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (name, values) in &self.counters {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| PipelineError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, PipelineError> {
        let fail = |detail: &str| PipelineError::checkpoint(path, detail);
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(fail("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expect = Sha256::digest(body);
        if digest != expect.as_slice() {
            return Err(fail("integrity check failed: payload digest mismatch"));
        }

        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], PipelineError> {
            if *pos + n > body.len() {
                return Err(PipelineError::checkpoint(path, "unexpected end of file"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 8)? != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(&format!(
                "unsupported checkpoint version {version}, this build reads {FORMAT_VERSION}"
            )));
        }

        let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let meta_bytes = take(&mut pos, meta_len)?;
        let meta: CheckpointMeta = toml::from_str(
            std::str::from_utf8(meta_bytes).map_err(|_| fail("meta is not utf-8"))?,
        )
        .map_err(|e| fail(&format!("meta parse error: {e}")))?;

        let rng_seed: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());

        let n_counters = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut counters = BTreeMap::new();
        for _ in 0..n_counters {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("counter name is not utf-8"))?;
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, len * 8)?;
            let values = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            counters.insert(name, values);
        }

        let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("tensor name is not utf-8"))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(&mut pos, count * 4)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(
                name,
                Tensor::new(&shape, data).map_err(|e| fail(&format!("bad tensor: {e}")))?,
            );
        }

        if pos != body.len() {
            return Err(fail("trailing bytes after tensor table"));
        }
        Ok(Self { meta, rng_seed, rng_word_pos, counters, tensors })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
