//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MVDCKPT\0"  u32 version  [32] config sha256  u32 blob count
//! per blob:    u16 name length, name (utf-8), u64 data length, data, [32] sha256(data)
//! ```
//!
//! Parameter blobs are named `param/<name>` and hold `u32 rank, u32 dims...`
//! followed by row-major f32 values; Adam state lives in `adam/<name>` as
//! `u64 step` then the first and second moments as f32.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{AdamState, ParamStore, Tensor};
use crate::rl::ReplaySnapshot;

pub const MAGIC: &[u8; 8] = b"MVDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    blobs: Vec<(String, Vec<u8>)>,
}

/// Little-endian append helpers.
#[derive(Default)]
pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    pub fn u64s(&mut self, v: &[u64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], what: &'a str) -> Self {
        Reader { data, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < n {
            return Err(Error::Checkpoint(format!("`{}` is truncated", self.what)));
        }
        let (head, rest) = self.data.split_at(n);
        self.data = rest;
        Ok(head)
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(width).is_none_or(|b| b > self.data.len()) {
            return Err(Error::Checkpoint(format!("`{}` has a bad length", self.what)));
        }
        Ok(n)
    }
    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }
    pub fn finish(self) -> Result<()> {
        if self.data.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("`{}` has trailing bytes", self.what)))
        }
    }
}

impl Checkpoint {
    pub fn new(config_hash_hex: &str) -> Self {
        let mut config_hash = [0u8; 32];
        for (i, b) in config_hash.iter_mut().enumerate() {
            *b = config_hash_hex
                .get(2 * i..2 * i + 2)
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .unwrap_or(0);
        }
        Checkpoint {
            config_hash,
            blobs: Vec::new(),
        }
    }

    pub fn config_hash_hex(&self) -> String {
        super::config::hex(&self.config_hash)
    }

    pub fn put(&mut self, name: impl Into<String>, data: Vec<u8>) {
        let name = name.into();
        match self.blobs.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = data,
            None => self.blobs.push((name, data)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.extend_from_slice(&self.config_hash);
        w.u32(self.blobs.len() as u32);
        for (name, data) in &self.blobs {
            w.0.extend_from_slice(&(name.len() as u16).to_le_bytes());
            w.0.extend_from_slice(name.as_bytes());
            w.bytes(data);
            w.0.extend_from_slice(&Sha256::digest(data));
        }
        w.0
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, "header");
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not utf-8".into()))?;
            let blob = r.bytes()?;
            let sum = r.take(32)?;
            if Sha256::digest(&blob)[..] != sum[..] {
                return Err(Error::Checksum(name));
            }
            blobs.push((name, blob));
        }
        r.finish()?;
        Ok(Checkpoint { config_hash, blobs })
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }

    /// Every parameter value and its Adam state.
    pub fn put_params(&mut self, store: &ParamStore<f32>) {
        for p in store.iter() {
            let mut w = Writer::default();
            let shape = p.value().shape();
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u32(d as u32);
            }
            for x in p.value().data() {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
            self.put(format!("param/{}", p.name), w.0);
            let mut w = Writer::default();
            w.u64(p.adam.step);
            w.f32s(&p.adam.m);
            w.f32s(&p.adam.v);
            self.put(format!("adam/{}", p.name), w.0);
        }
    }

    /// Overwrite `store` from the checkpoint. The parameter sets must match
    /// by name and shape.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let stored = self.names().filter(|n| n.starts_with("param/")).count();
        if stored != store.len() {
            return Err(Error::ParameterMismatch(format!(
                "checkpoint holds {stored} parameters, model has {}",
                store.len()
            )));
        }
        for p in store.iter_mut() {
            let key = format!("param/{}", p.name);
            let mut r = Reader::new(self.get(&key)?, &key);
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != p.value().shape() {
                return Err(Error::ParameterMismatch(format!(
                    "`{}` has shape {shape:?} in the checkpoint, {:?} in the model",
                    p.name,
                    p.value().shape()
                )));
            }
            let n: usize = shape.iter().product();
            let values: Vec<f32> = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            r.finish()?;
            *p.value_mut() = Tensor::new(shape, values)?;

            let key = format!("adam/{}", p.name);
            let mut r = Reader::new(self.get(&key)?, &key);
            let step = r.u64()?;
            let m = r.f32s()?;
            let v = r.f32s()?;
            r.finish()?;
            if m.len() != n || v.len() != n {
                return Err(Error::ParameterMismatch(format!("`{}` has a malformed optimizer state", p.name)));
            }
            p.adam = AdamState { m, v, step };
            p.grad = None;
        }
        Ok(())
    }

    pub fn put_replay(&mut self, s: &ReplaySnapshot) {
        self.put("replay/frames", s.frames.clone());
        let mut w = Writer::default();
        w.f32s(&s.frame_proprio);
        w.u64(s.next_frame_id);
        w.u64s(&s.obs_ids);
        w.u64s(&s.next_ids);
        w.f32s(&s.actions);
        w.f32s(&s.rewards);
        w.bytes(&s.terminals);
        w.u64(s.write_pos);
        w.u64s(&s.open_stack);
        self.put("replay/index", w.0);
    }

    pub fn replay(&self) -> Result<ReplaySnapshot> {
        let mut r = Reader::new(self.get("replay/index")?, "replay/index");
        let s = ReplaySnapshot {
            frames: self.get("replay/frames")?.to_vec(),
            frame_proprio: r.f32s()?,
            next_frame_id: r.u64()?,
            obs_ids: r.u64s()?,
            next_ids: r.u64s()?,
            actions: r.f32s()?,
            rewards: r.f32s()?,
            terminals: r.bytes()?,
            write_pos: r.u64()?,
            open_stack: r.u64s()?,
        };
        r.finish()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(&"ab".repeat(32));
        c.put("a", vec![1, 2, 3]);
        c.put("b", Vec::new());
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config_hash_hex(), "ab".repeat(32));
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        // First data byte of blob "a": header 8+4+32+4, then name len 2 + "a" + u64 len.
        bad[48 + 2 + 1 + 8] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum(n)) if n == "a"));
        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&old), Err(Error::CheckpointVersion { found: 7, .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }
}
