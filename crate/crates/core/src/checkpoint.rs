//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"ACLA"`, `u32` version, `u32` section count, then per section a
//! `u32` name length, the UTF-8 name, a `u8` kind, a `u64` payload length
//! and the payload. Kind 0 is an f64 tensor (`u64` h, w, c then the
//! values), kind 1 is UTF-8 text, kind 2 is a `u64` array.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"ACLA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    Text(String),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Payload)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail("length overflow"))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn put(&mut self, name: impl Into<String>, payload: Payload) {
        let name = name.into();
        match self.sections.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = payload,
            None => self.sections.push((name, payload)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    fn missing(name: &str) -> Error {
        Error::State(format!("checkpoint has no section `{name}`"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Payload::F64(t)) => Ok(t),
            Some(_) => Err(Error::State(format!("section `{name}` is not a tensor"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Payload::Text(t)) => Ok(t),
            Some(_) => Err(Error::State(format!("section `{name}` is not text"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Payload::U64(v)) => Ok(v),
            Some(_) => Err(Error::State(format!("section `{name}` is not an integer array"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (kind, body) = match payload {
                Payload::F64(t) => {
                    let s = t.shape();
                    let mut b = Vec::with_capacity(24 + 8 * t.len());
                    for d in [s.h, s.w, s.c] {
                        b.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                    (0u8, b)
                }
                Payload::Text(s) => (1, s.as_bytes().to_vec()),
                Payload::U64(v) => (2, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            };
            out.push(kind);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    /// Decodes a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(4).map_err(|_| r.fail("file too short for magic bytes"))? != MAGIC {
            return Err(r.fail("bad magic bytes, not an ACLA checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| r.fail("section name is not UTF-8"))?.to_string();
            let kind = r.u8()?;
            let len = r.len()?;
            let body = r.take(len)?;
            let mut b = Reader { bytes: body, at: 0, path };
            let payload = match kind {
                0 => {
                    let (h, w, c) = (b.len()?, b.len()?, b.len()?);
                    let count = h.checked_mul(w).and_then(|v| v.checked_mul(c));
                    if count.and_then(|v| v.checked_mul(8)) != Some(len - 24) {
                        return Err(r.fail(format!("section `{name}` size does not match its shape")));
                    }
                    let data = body[24..].chunks_exact(8).map(|x| f64::from_le_bytes(x.try_into().expect("8 bytes")));
                    Payload::F64(Tensor::from_vec(Shape::new(h, w, c), data.collect())?)
                }
                1 => Payload::Text(String::from_utf8(body.to_vec()).map_err(|_| r.fail("text section is not UTF-8"))?),
                2 => {
                    if len % 8 != 0 {
                        return Err(r.fail(format!("section `{name}` length is not a multiple of 8")));
                    }
                    Payload::U64(body.chunks_exact(8).map(|x| u64::from_le_bytes(x.try_into().expect("8 bytes"))).collect())
                }
                k => return Err(r.fail(format!("section `{name}` has unknown kind {k}"))),
            };
            sections.push((name, payload));
        }
        if r.at != bytes.len() {
            return Err(r.fail("trailing bytes after the last section"));
        }
        Ok(Checkpoint { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn put_store(&mut self, store: &ParamStore) {
        for e in store.entries() {
            self.put(format!("param/{}", e.name), Payload::F64(e.tensor.clone()));
        }
    }

    /// Overwrites every parameter of `store` from the `param/` sections.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("param/{}", store.entries()[id.index()].name);
            let t = self.tensor(&name)?;
            let dst = store.get_mut(id);
            if t.shape() != dst.shape() {
                return Err(Error::State(format!("{name} has shape {}, model expects {}", t.shape(), dst.shape())));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &Adam, store: &ParamStore) {
        self.put(format!("{prefix}/step"), Payload::U64(vec![adam.step]));
        for (i, id) in adam.ids.iter().enumerate() {
            let name = &store.entries()[id.index()].name;
            self.put(format!("{prefix}/m/{name}"), Payload::F64(adam.m[i].clone()));
            self.put(format!("{prefix}/v/{name}"), Payload::F64(adam.v[i].clone()));
        }
    }

    /// Restores moments into an optimiser already built over `store`.
    pub fn restore_adam(&self, prefix: &str, adam: &mut Adam, store: &ParamStore) -> Result<()> {
        let step = self.u64s(&format!("{prefix}/step"))?;
        adam.step = *step.first().ok_or_else(|| Error::State(format!("{prefix}/step is empty")))?;
        for (i, id) in adam.ids.iter().enumerate() {
            let name = &store.entries()[id.index()].name;
            for (key, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = self.tensor(&format!("{prefix}/{key}/{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::State(format!("{prefix}/{key}/{name} has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    pub fn put_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        let seed = rng.get_seed();
        let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let pos = rng.get_word_pos();
        words.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        self.put(format!("rng/{name}"), Payload::U64(words));
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        let key = format!("rng/{name}");
        let w = self.u64s(&key)?;
        if w.len() != 7 {
            return Err(Error::State(format!("{key} holds {} words, expected 7", w.len())));
        }
        let mut seed = [0u8; 32];
        for (i, v) in w[..4].iter().enumerate() {
            seed[8 * i..8 * i + 8].copy_from_slice(&v.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(w[4]);
        rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
        Ok(rng)
    }
}

/// Label for errors about in-memory buffers.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}
