//! Single-file checkpoints: a magic tag, a JSON header (stage, iteration,
//! RNG state, architecture record) and named f32 little-endian arrays.
//!
//! Values are quantized to f32 on save; loading restores f64 arrays whose
//! f32 image is bit-identical, so save -> load -> save reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{IferError, Result};
use crate::params::Params;
use crate::tape::Arr;

pub const MAGIC: &[u8; 9] = b"IFERCKPT1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha8 stream position; stringly encoded because it is a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn new(seed: u64, word_pos: u128) -> Self {
        Self {
            seed,
            word_pos: word_pos.to_string(),
        }
    }

    pub fn word_pos(&self) -> Result<u128> {
        self.word_pos
            .parse()
            .map_err(|_| IferError::Checkpoint(format!("bad RNG word position '{}'", self.word_pos)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    stage: String,
    iteration: u64,
    rng: RngState,
    arch: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: String,
    pub iteration: u64,
    pub rng: RngState,
    /// Architecture record; load-time mismatches are rejected.
    pub arch: serde_json::Value,
    pub arrays: BTreeMap<String, Arr>,
}

impl Checkpoint {
    pub fn new(stage: &str, iteration: u64, rng: RngState, arch: serde_json::Value) -> Self {
        Self {
            stage: stage.to_string(),
            iteration,
            rng,
            arch,
            arrays: BTreeMap::new(),
        }
    }

    /// Store every array of `params` under `prefix.name`.
    pub fn insert_params(&mut self, prefix: &str, params: &Params) {
        for (name, a) in &params.0 {
            self.arrays.insert(format!("{prefix}.{name}"), a.clone());
        }
    }

    /// Collect the arrays under `prefix.` back into a parameter set.
    pub fn extract_params(&self, prefix: &str) -> Result<Params> {
        let want = format!("{prefix}.");
        let mut p = Params::new();
        for (name, a) in &self.arrays {
            if let Some(rest) = name.strip_prefix(&want) {
                p.insert(rest, a.clone());
            }
        }
        if p.0.is_empty() {
            return Err(IferError::Checkpoint(format!(
                "checkpoint has no arrays under '{prefix}.'"
            )));
        }
        Ok(p)
    }

    pub fn insert_array(&mut self, name: &str, a: Arr) {
        self.arrays.insert(name.to_string(), a);
    }

    pub fn array(&self, name: &str) -> Result<&Arr> {
        self.arrays
            .get(name)
            .ok_or_else(|| IferError::Checkpoint(format!("checkpoint missing array '{name}'")))
    }

    pub fn ensure_arch(&self, expected: &serde_json::Value) -> Result<()> {
        if &self.arch != expected {
            return Err(IferError::Checkpoint(format!(
                "architecture mismatch: checkpoint has {}, expected {}",
                self.arch, expected
            )));
        }
        Ok(())
    }

    pub fn ensure_stage(&self, expected: &str) -> Result<()> {
        if self.stage != expected {
            return Err(IferError::Checkpoint(format!(
                "stage mismatch: checkpoint is '{}', expected '{}'",
                self.stage, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        let header = Header {
            stage: self.stage.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            arch: self.arch.clone(),
        };
        let hj = serde_json::to_vec(&header)?;
        out.extend_from_slice(&(hj.len() as u32).to_le_bytes());
        out.extend_from_slice(&hj);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(IferError::Checkpoint("truncated checkpoint".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, MAGIC.len())?;
        if magic != MAGIC {
            return Err(IferError::Checkpoint(
                "bad magic: not a checkpoint file".into(),
            ));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != SCHEMA_VERSION {
            return Err(IferError::Checkpoint(format!(
                "unsupported schema version {ver}, expected {SCHEMA_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(&mut pos, hlen)?)?;
        let n_arrays = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n_arrays {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| IferError::Checkpoint("array name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(&mut pos, count * 4)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let arr = Arr::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| IferError::Checkpoint(format!("bad shape for array '{name}'")))?;
            arrays.insert(name, arr);
        }
        if pos != buf.len() {
            return Err(IferError::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                buf.len() - pos
            )));
        }
        Ok(Self {
            stage: header.stage,
            iteration: header.iteration,
            rng: header.rng,
            arch: header.arch,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Quantize a parameter set through f32, as loading a checkpoint would.
pub fn quantize_f32(params: &Params) -> Params {
    let mut out = Params::new();
    for (name, a) in &params.0 {
        out.insert(name, a.mapv(|v| v as f32 as f64));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_ckpt() -> Checkpoint {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut p = Params::new();
        p.insert("layer0.kernel", randn(&mut r, &[2, 3, 3, 3], 1.0));
        p.insert("bias", randn(&mut r, &[5], 0.1));
        let arch = serde_json::json!({"kind": "demo", "widths": [2, 3]});
        let mut ck = Checkpoint::new("pretrain", 42, RngState::new(9, 1234), arch);
        ck.insert_params("gen", &p);
        ck.insert_array("w_mean", randn(&mut r, &[4], 1.0));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_ckpt();
        let b1 = ck.to_bytes().unwrap();
        let ck2 = Checkpoint::from_bytes(&b1).unwrap();
        let b2 = ck2.to_bytes().unwrap();
        assert_eq!(b1, b2);
        assert_eq!(ck2.stage, "pretrain");
        assert_eq!(ck2.iteration, 42);
        assert_eq!(ck2.rng.seed, 9);
        assert_eq!(ck2.rng.word_pos().unwrap(), 1234);
        // values equal at f32 precision
        for (name, a) in &ck.arrays {
            let b = &ck2.arrays[name];
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample_ckpt();
        ck.save(&path).unwrap();
        let ck2 = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), ck2.to_bytes().unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let ck = sample_ckpt();
        let mut b = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 3]),
            Err(IferError::Checkpoint(_))
        ));
        b[0] ^= 0xFF;
        match Checkpoint::from_bytes(&b) {
            Err(IferError::Checkpoint(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn arch_and_stage_mismatches_are_named() {
        let ck = sample_ckpt();
        let other = serde_json::json!({"kind": "demo", "widths": [9, 9]});
        match ck.ensure_arch(&other) {
            Err(IferError::Checkpoint(msg)) => assert!(msg.contains("mismatch"), "{msg}"),
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert!(ck.ensure_arch(&ck.arch.clone()).is_ok());
        assert!(ck.ensure_stage("pretrain").is_ok());
        assert!(ck.ensure_stage("fer").is_err());
    }

    #[test]
    fn extract_params_round_trips_at_f32() {
        let ck = sample_ckpt();
        let b = ck.to_bytes().unwrap();
        let ck2 = Checkpoint::from_bytes(&b).unwrap();
        let p = ck2.extract_params("gen").unwrap();
        assert_eq!(p.names().count(), 2);
        assert!(p.0.contains_key("layer0.kernel"));
        assert!(ck2.extract_params("nothing").is_err());
        // quantize_f32 matches the storage transform exactly
        let orig = ck.extract_params("gen").unwrap();
        let q = quantize_f32(&orig);
        assert_eq!(q.checksum(), p.checksum());
        assert_eq!(q.get("bias"), p.get("bias"));
    }
}
