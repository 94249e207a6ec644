//! `.vbit` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VBIT" | version u16 | step u64 | config_len u32 | config (TOML, UTF-8)
//! | gen_t u64 | disc_t u64 | count u32
//! | count × (name_len u32 | name | rank u32 | rank × extent u32 | f32 payload)
//! ```
//!
//! Model parameters come first under their store names; optimizer moments
//! follow as `adam/{gen|disc}/{m|v}/{param}`.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::networks::{ModelBundle, ParamStore};
use crate::trainer::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"VBIT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// The config exactly as stored.
    pub config_text: String,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub gen_optim: AdamState,
    pub disc_optim: AdamState,
}

impl Checkpoint {
    /// Rebuilds the model, checking parameter names and shapes against the
    /// architecture the config describes.
    pub fn bundle(&self) -> Result<ModelBundle> {
        let mut b = ModelBundle::init(self.config.model.clone(), self.config.domain_specs()?, 0)?;
        let want: Vec<_> = b.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let got: Vec<_> = self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if want != got {
            let missing = want.iter().find(|w| !got.contains(w)).or_else(|| got.iter().find(|g| !want.contains(g)));
            return Err(Error::Format(format!("parameters do not match the stored architecture (first difference: {missing:?})")));
        }
        b.params = self.params.clone();
        Ok(b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.gen_optim.t.to_le_bytes());
        out.extend_from_slice(&self.disc_optim.t.to_le_bytes());
        let mut entries: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        for (group, st) in [("gen", &self.gen_optim), ("disc", &self.disc_optim)] {
            for (kind, store) in [("m", &st.m), ("v", &st.v)] {
                entries.extend(store.iter().map(|(n, t)| (format!("adam/{group}/{kind}/{n}"), t)));
            }
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for e in t.shape() {
                out.extend_from_slice(&(*e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic: not a .vbit checkpoint".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
        }
        let step = r.u64("step")?;
        let config_text = r.string("config")?;
        let config = TrainConfig::from_toml(&config_text)?;
        let gen_t = r.u64("optimizer step")?;
        let disc_t = r.u64("optimizer step")?;
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut gen_optim = AdamState { t: gen_t, ..Default::default() };
        let mut disc_optim = AdamState { t: disc_t, ..Default::default() };
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, e| a.checked_mul(*e)).ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?, &name)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            let store = match name.strip_prefix("adam/") {
                None => &mut params,
                Some(rest) => {
                    let (group, rest) = rest.split_once('/').ok_or_else(|| Error::Format(format!("bad optimizer entry `{name}`")))?;
                    let (kind, pname) = rest.split_once('/').ok_or_else(|| Error::Format(format!("bad optimizer entry `{name}`")))?;
                    let st = match group {
                        "gen" => &mut gen_optim,
                        "disc" => &mut disc_optim,
                        _ => return Err(Error::Format(format!("bad optimizer entry `{name}`"))),
                    };
                    let store = match kind {
                        "m" => &mut st.m,
                        "v" => &mut st.v,
                        _ => return Err(Error::Format(format!("bad optimizer entry `{name}`"))),
                    };
                    store.insert(pname, t);
                    continue;
                }
            };
            if store.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
        }
        Ok(Self { step, config_text, config, params, gen_optim, disc_optim })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("vbit.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} reading {what} ({n} bytes wanted, {} left)", self.pos, self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}
