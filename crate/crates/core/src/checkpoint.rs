//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SNSGCKPT" | version u32 | kind str | config str
//! groups:   u32 count, each { name str, u32 count, each tensor }
//! counters: u32 count, each { name str, u64 }
//! floats:   u32 count, each { name str, f64 bits }
//! rngs:     u32 count, each { name str, seed [u8; 32], stream u64, word_pos u128 }
//! texts:    u32 count, each { name str, value str }
//! sha256 of everything above
//! ```
//!
//! A `str` is a u64 byte length and UTF-8 bytes; a tensor is a name,
//! a u32 rank, u64 dims and f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use sonoseg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"SNSGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// What the checkpoint holds, e.g. `segmentation`, `vae`, `denoiser`.
    pub kind: String,
    /// Full TOML configuration the state was produced with.
    pub config: String,
    pub groups: Vec<(String, NamedTensors)>,
    pub counters: BTreeMap<String, u64>,
    pub floats: BTreeMap<String, f64>,
    pub rngs: Vec<RngState>,
    pub texts: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: String) -> Self {
        Self {
            kind: kind.into(),
            config,
            ..Self::default()
        }
    }

    pub fn group(&self, name: &str) -> Result<&NamedTensors> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group {name:?}")))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {name:?}")))
    }

    pub fn float(&self, name: &str) -> Result<f64> {
        self.floats
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing value {name:?}")))
    }

    pub fn rng(&self, name: &str) -> Result<&RngState> {
        self.rngs
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing random stream {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut w, &self.kind);
        put_str(&mut w, &self.config);
        put_u32(&mut w, self.groups.len());
        for (name, tensors) in &self.groups {
            put_str(&mut w, name);
            put_u32(&mut w, tensors.len());
            for (tname, t) in tensors {
                put_str(&mut w, tname);
                put_u32(&mut w, t.shape().len());
                for &d in t.shape() {
                    w.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        put_u32(&mut w, self.counters.len());
        for (k, v) in &self.counters {
            put_str(&mut w, k);
            w.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut w, self.floats.len());
        for (k, v) in &self.floats {
            put_str(&mut w, k);
            w.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        put_u32(&mut w, self.rngs.len());
        for r in &self.rngs {
            put_str(&mut w, &r.name);
            w.extend_from_slice(&r.seed);
            w.extend_from_slice(&r.stream.to_le_bytes());
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        put_u32(&mut w, self.texts.len());
        for (k, v) in &self.texts {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint(
                "checksum mismatch: file is truncated or corrupted".into(),
            ));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let mut ck = Checkpoint {
            kind: r.string()?,
            config: r.string()?,
            ..Checkpoint::default()
        };
        for _ in 0..r.count(4)? {
            let name = r.string()?;
            let mut tensors = Vec::new();
            for _ in 0..r.count(12)? {
                let tname = r.string()?;
                let rank = r.count(8)?;
                let mut shape = Vec::with_capacity(rank);
                let mut numel: usize = 1;
                for _ in 0..rank {
                    let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
                    numel = numel
                        .checked_mul(d)
                        .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
                    shape.push(d);
                }
                let bytes = r.take(
                    numel
                        .checked_mul(4)
                        .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?,
                )?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                tensors.push((tname, Tensor::from_vec(&shape, data)?));
            }
            ck.groups.push((name, tensors));
        }
        for _ in 0..r.count(16)? {
            let k = r.string()?;
            ck.counters.insert(k, r.u64()?);
        }
        for _ in 0..r.count(16)? {
            let k = r.string()?;
            ck.floats.insert(k, f64::from_bits(r.u64()?));
        }
        for _ in 0..r.count(64)? {
            let name = r.string()?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            ck.rngs.push(RngState {
                name,
                seed,
                stream,
                word_pos,
            });
        }
        for _ in 0..r.count(16)? {
            let k = r.string()?;
            let v = r.string()?;
            ck.texts.insert(k, v);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::item(path, m),
            other => other,
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Lines describing every key under `section` whose value differs between
/// two TOML documents.
pub fn config_diff(section: &str, stored: &str, current: &str) -> Result<Vec<String>> {
    let parse = |text: &str| -> Result<BTreeMap<String, String>> {
        let value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut flat = BTreeMap::new();
        if let Some(v) = value.get(section) {
            flatten(section, v, &mut flat);
        }
        Ok(flat)
    };
    let (a, b) = (parse(stored)?, parse(current)?);
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let missing = "(unset)".to_string();
    Ok(keys
        .into_iter()
        .filter_map(|k| {
            let (x, y) = (a.get(k).unwrap_or(&missing), b.get(k).unwrap_or(&missing));
            (x != y).then(|| format!("{k}: checkpoint {x}, current {y}"))
        })
        .collect())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn put_u32(w: &mut Vec<u8>, n: usize) {
    w.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u64).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Element count, rejected when the remaining bytes cannot hold
    /// `count * min_size`.
    fn count(&mut self, min_size: usize) -> Result<usize> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        if n.saturating_mul(min_size) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("count {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let len = usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("string length overflow".into()))?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 in string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("segmentation", "[network]\nnum_aux = 3\n".into());
        ck.groups.push((
            "params".into(),
            vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)),
                (
                    "a.bias".into(),
                    Tensor::from_vec(&[1], vec![f32::MIN_POSITIVE]).unwrap(),
                ),
            ],
        ));
        ck.groups.push(("empty".into(), Vec::new()));
        ck.counters.insert("step".into(), 17);
        ck.floats.insert("best".into(), -0.0);
        ck.rngs.push(RngState::capture("train", &rng_from(3)));
        ck.texts.insert("note".into(), "ünïcode".into());
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert!(back.floats["best"].is_sign_negative());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().encode();
        for n in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..n]).is_err(), "prefix {n} accepted");
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().encode();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::decode(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains(&FORMAT_VERSION.to_string()), "{msg}");
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn diff_reports_changed_keys() {
        let a = "[network]\nnum_aux = 3\nencoder_channels = [8, 16]\n[optim]\nlr0 = 1.0\n";
        let b = "[network]\nnum_aux = 2\nencoder_channels = [8, 16]\n[optim]\nlr0 = 2.0\n";
        let d = config_diff("network", a, b).unwrap();
        assert_eq!(d, vec!["network.num_aux: checkpoint 3, current 2".to_string()]);
        assert!(config_diff("network", a, a).unwrap().is_empty());
    }
}
