//! Binary checkpoint format.
//!
//! Layout, all fixed-width fields little-endian:
//!
//! ```text
//! magic "VARAckpt" | version u32 | digest str | config text str
//! vocab str | min ratio f64 | max ratio f64 | sample rate u32 | hop u32
//! step u64 | rng seed u64 | rng word position u128 | adam t u64
//! param count u32, then per parameter:
//!   name str | dim count u32 | dims u32… | values f64… | adam m f64… | adam v f64…
//! ```
//!
//! Strings are u32-length-prefixed UTF-8. The digest is the config digest of
//! the run that wrote the file; callers compare it against their own config
//! before restoring. The vocabulary, speed-ratio range, and framing travel
//! with the weights so synthesis needs no access to the training corpus.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const MAGIC: &[u8; 8] = b"VARAckpt";
const VERSION: u32 = 1;

/// Everything needed to continue training bit-exactly.
pub struct Checkpoint {
    pub config_text: String,
    pub digest: String,
    pub vocab: String,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub sample_rate: u32,
    pub hop: u32,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub adam_t: u64,
    pub params: ParamStore,
    pub adam_m: BTreeMap<String, Vec<f64>>,
    pub adam_v: BTreeMap<String, Vec<f64>>,
}

fn w_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn w_str(b: &mut Vec<u8>, s: &str) {
    w_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn w_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let names: Vec<&String> = ck.params.names().collect();
    for name in &names {
        let n = ck.params.get(name)?.data.len();
        let (m, v) = (ck.adam_m.get(*name), ck.adam_v.get(*name));
        if m.is_some_and(|m| m.len() != n) || v.is_some_and(|v| v.len() != n) {
            return Err(Error::Internal(format!(
                "checkpoint: optimizer state for {name} disagrees with parameter size {n}"
            )));
        }
    }
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    w_u32(&mut b, VERSION);
    w_str(&mut b, &ck.digest);
    w_str(&mut b, &ck.config_text);
    w_str(&mut b, &ck.vocab);
    b.extend_from_slice(&ck.min_ratio.to_le_bytes());
    b.extend_from_slice(&ck.max_ratio.to_le_bytes());
    w_u32(&mut b, ck.sample_rate);
    w_u32(&mut b, ck.hop);
    b.extend_from_slice(&ck.step.to_le_bytes());
    b.extend_from_slice(&ck.rng_seed.to_le_bytes());
    b.extend_from_slice(&ck.rng_word_pos.to_le_bytes());
    b.extend_from_slice(&ck.adam_t.to_le_bytes());
    w_u32(&mut b, names.len() as u32);
    for name in names {
        let p = ck.params.get(name)?;
        w_str(&mut b, name);
        w_u32(&mut b, p.dims.len() as u32);
        for &d in &p.dims {
            w_u32(&mut b, d as u32);
        }
        w_f64s(&mut b, &p.data);
        let n = p.data.len();
        let fresh = vec![0.0; n];
        let m = ck.adam_m.get(name).filter(|m| !m.is_empty()).unwrap_or(&fresh);
        let v = ck.adam_v.get(name).filter(|v| !v.is_empty()).unwrap_or(&fresh);
        w_f64s(&mut b, m);
        w_f64s(&mut b, v);
    }
    std::fs::write(path, &b).map_err(|e| Error::io(path, e))
}

struct Cur<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(self.path, "non-UTF-8 string field"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cur { b: &bytes, pos: 0, path };
    if c.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let digest = c.str()?;
    let config_text = c.str()?;
    let vocab = c.str()?;
    let min_ratio = c.f64()?;
    let max_ratio = c.f64()?;
    let sample_rate = c.u32()?;
    let hop = c.u32()?;
    let step = c.u64()?;
    let rng_seed = c.u64()?;
    let rng_word_pos = c.u128()?;
    let adam_t = c.u64()?;
    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for _ in 0..count {
        let name = c.str()?;
        let nd = c.u32()? as usize;
        if nd == 0 || nd > 8 {
            return Err(Error::format(path, format!("param {name}: {nd} dims")));
        }
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = c.f64s(n)?;
        let m = c.f64s(n)?;
        let v = c.f64s(n)?;
        params.insert(&name, dims, data)?;
        adam_m.insert(name.clone(), m);
        adam_v.insert(name, v);
    }
    if c.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after checkpoint payload", bytes.len() - c.pos),
        ));
    }
    Ok(Checkpoint {
        config_text,
        digest,
        vocab,
        min_ratio,
        max_ratio,
        sample_rate,
        hop,
        step,
        rng_seed,
        rng_word_pos,
        adam_t,
        params,
        adam_m,
        adam_v,
    })
}
