//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DYNLCKPT" | version u32 | config hash [32]
//! stores:    u32 count, each: name, step u64, u32 params, each: name, blob
//! optimizer: u32 count, each: name, u8 present, [u32 n, n first blobs, n second blobs]
//! rng:       u32 count, each: name, seed [32], stream u64, word position u128
//! sections:  u32 count, each: name, u64 length, raw bytes
//! extra:     u64 length, UTF-8 JSON
//! checksum:  SHA-256 of everything above
//! blob:      dtype u8 | rank u32 | dims u64 × rank | data
//! name:      u32 length | UTF-8
//! ```
//!
//! Loading checks magic, version, config hash and checksum before anything
//! is handed back, so a bad file never yields partial state.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::diff::{Adam, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"DYNLCKPT";
pub const VERSION: u32 = 1;

/// SHA-256 of a canonical config serialization.
pub fn config_hash(canonical: &[u8]) -> [u8; 32] {
    Sha256::digest(canonical).into()
}

/// Parameters and step counter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreState<T> {
    pub step: u64,
    pub params: Vec<(String, Tensor<T>)>,
}

/// Adam moments in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: [u8; 32],
    pub stores: Vec<(String, StoreState<T>)>,
    pub optimizers: Vec<(String, Option<OptimizerState<T>>)>,
    pub rngs: Vec<(String, RngState)>,
    /// Opaque named byte sections (e.g. replay contents).
    pub sections: Vec<(String, Vec<u8>)>,
    /// Free-form JSON for runtime counters.
    pub extra: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            stores: Vec::new(),
            optimizers: Vec::new(),
            rngs: Vec::new(),
            sections: Vec::new(),
            extra: String::new(),
        }
    }

    pub fn add_store(&mut self, name: &str, store: &ParamStore<T>, adam: Option<&Adam<T>>) {
        let params = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        self.stores.push((
            name.to_string(),
            StoreState {
                step: store.step(),
                params,
            },
        ));
        let opt = adam.map(|a| OptimizerState {
            first: a.first.clone(),
            second: a.second.clone(),
        });
        self.optimizers.push((name.to_string(), opt));
    }

    pub fn add_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        self.rngs.push((name.to_string(), RngState::capture(rng)));
    }

    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.restore())
            .ok_or_else(|| Error::Checkpoint(format!("no rng state named {name}")))
    }

    /// Copies a saved store (and optionally its optimizer) into live
    /// objects. Names and shapes must match exactly.
    pub fn restore_store(&self, name: &str, store: &mut ParamStore<T>, adam: Option<&mut Adam<T>>) -> Result<()> {
        let state = self
            .stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter section named {name}")))?;
        if state.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "section {name} has {} parameters, model has {}",
                state.params.len(),
                store.len()
            )));
        }
        for (id, (pname, value)) in store.ids().collect::<Vec<_>>().into_iter().zip(&state.params) {
            if store.name(id) != pname || store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {pname} {:?} does not match {} {:?}",
                    value.shape(),
                    store.name(id),
                    store.value(id).shape()
                )));
            }
        }
        let opt = match adam {
            Some(a) => {
                let saved = self
                    .optimizers
                    .iter()
                    .find(|(n, _)| n == name)
                    .and_then(|(_, s)| s.as_ref())
                    .ok_or_else(|| Error::Checkpoint(format!("no optimizer state for {name}")))?;
                let shapes_ok = saved.first.len() == state.params.len()
                    && saved.second.len() == state.params.len()
                    && saved.first.iter().zip(&saved.second).zip(&state.params).all(|((m, v), (_, p))| {
                        m.shape() == p.shape() && v.shape() == p.shape()
                    });
                if !shapes_ok {
                    return Err(Error::Checkpoint(format!("optimizer state for {name} does not match")));
                }
                Some((a, saved))
            }
            None => None,
        };
        // validated; now mutate
        for (id, (_, value)) in store.ids().collect::<Vec<_>>().into_iter().zip(&state.params) {
            *store.value_mut(id) = value.clone();
        }
        store.set_step(state.step);
        store.zero_grad();
        if let Some((a, saved)) = opt {
            a.first = saved.first.clone();
            a.second = saved.second.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        put_u32(&mut out, self.stores.len());
        for (name, s) in &self.stores {
            put_str(&mut out, name);
            out.extend_from_slice(&s.step.to_le_bytes());
            put_u32(&mut out, s.params.len());
            for (pname, t) in &s.params {
                put_str(&mut out, pname);
                put_blob(&mut out, t);
            }
        }
        put_u32(&mut out, self.optimizers.len());
        for (name, o) in &self.optimizers {
            put_str(&mut out, name);
            match o {
                None => out.push(0),
                Some(o) => {
                    out.push(1);
                    put_u32(&mut out, o.first.len());
                    o.first.iter().chain(&o.second).for_each(|t| put_blob(&mut out, t));
                }
            }
        }
        put_u32(&mut out, self.rngs.len());
        for (name, r) in &self.rngs {
            put_str(&mut out, name);
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        put_u32(&mut out, self.sections.len());
        for (name, bytes) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out.extend_from_slice(&(self.extra.len() as u64).to_le_bytes());
        out.extend_from_slice(self.extra.as_bytes());
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    /// Parses and validates a checkpoint against the expected config hash.
    pub fn from_bytes(bytes: &[u8], expected_hash: &[u8; 32]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if &hash != expected_hash {
            return Err(Error::Checkpoint(
                "config hash mismatch: checkpoint was written for a different model configuration".into(),
            ));
        }
        if bytes.len() < 32 + r.pos {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupt".into()));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let mut ck = Checkpoint::new(hash);
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let step = r.u64()?;
            let n = r.u32()?;
            let mut params = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let pname = r.string()?;
                params.push((pname, r.blob()?));
            }
            ck.stores.push((name, StoreState { step, params }));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let opt = match r.take(1)?[0] {
                0 => None,
                1 => {
                    let n = r.u32()?;
                    let mut all = Vec::with_capacity(2 * n.min(1 << 16));
                    for _ in 0..2 * n {
                        all.push(r.blob()?);
                    }
                    let second = all.split_off(n);
                    Some(OptimizerState { first: all, second })
                }
                b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
            };
            ck.optimizers.push((name, opt));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let seed = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            ck.rngs.push((name, RngState { seed, stream, word_pos }));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let len = r.u64()? as usize;
            ck.sections.push((name, r.take(len)?.to_vec()));
        }
        let len = r.u64()? as usize;
        ck.extra = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("extra section is not UTF-8".into()))?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
        }
        Ok(ck)
    }

    /// Writes atomically: a temporary file in the same directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: &[u8; 32]) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, expected_hash)
    }
}

/// Reads just the config hash of a checkpoint file.
pub fn peek_hash(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    r.u32()?;
    Ok(r.take(32)?.try_into().expect("32 bytes"))
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_blob<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    put_u32(out, t.rank());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    /// Reads a blob of any dtype, converting to `T`.
    fn blob<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let code = self.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let raw = self.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64c(f64::read_le(c))).collect(),
        };
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a/w", Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-7, -1e7]).unwrap())
            .unwrap();
        s.insert("b", Tensor::from_f64(&[1], &[0.25]).unwrap()).unwrap();
        s
    }

    #[test]
    fn bytes_round_trip() {
        let s = store();
        let adam = Adam::new(&s, Default::default()).unwrap();
        let mut ck = Checkpoint::new(config_hash(b"cfg"));
        ck.add_store("wm", &s, Some(&adam));
        ck.add_rng("act", &ChaCha8Rng::seed_from_u64(9));
        ck.extra = "{\"x\":1}".into();
        ck.sections.push(("replay".into(), vec![1, 2, 3]));
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes(), &config_hash(b"cfg")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn every_truncation_is_refused() {
        let mut ck = Checkpoint::new(config_hash(b"cfg"));
        ck.add_store("wm", &store(), None);
        let bytes = ck.to_bytes();
        for cut in 0..bytes.len() {
            let err = Checkpoint::<f32>::from_bytes(&bytes[..cut], &config_hash(b"cfg")).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{cut}: {err}");
        }
    }
}
