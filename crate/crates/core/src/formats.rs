//! Little-endian binary formats for frames, label maps, scalar maps,
//! probability maps and checkpoints. Every file starts with a four-byte
//! magic and a version byte.
//!
//! Real values are stored as `f32`; reading widens to `f64` exactly, so
//! write → read → write reproduces the original bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pseudolab::EntropyMap;
use crate::synthdata::LabelMap;
use crate::tensor::Map3;
use crate::tinynet::{AdamWConfig, OptimizerState, Param, ParamSet};

pub const VERSION: u8 = 1;

const FIMG: &[u8; 4] = b"FIMG";
const LMAP: &[u8; 4] = b"LMAP";
const FMAP: &[u8; 4] = b"FMAP";
const PMAP: &[u8; 4] = b"PMAP";
const SEGC: &[u8; 4] = b"SEGC";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let mut r = Self { buf, pos: 0, what };
        if r.take(4)? != magic {
            return Err(Error::Format(format!("{what}: bad magic")));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("{}: truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dim16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u16")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.push(VERSION);
    out
}

pub fn encode_fimg(map: &Map3) -> Result<Vec<u8>> {
    let mut out = header(FIMG);
    out.extend_from_slice(&dim16(map.channels(), "channels")?.to_le_bytes());
    out.extend_from_slice(&dim16(map.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim16(map.width(), "width")?.to_le_bytes());
    put_f32s(&mut out, map.data());
    Ok(out)
}

pub fn decode_fimg(bytes: &[u8]) -> Result<Map3> {
    let mut r = Reader::new(bytes, FIMG, "fimg")?;
    let c = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let data = r.f32s(c * h * w)?;
    r.finish()?;
    Ok(Map3::from_vec(c, h, w, data))
}

pub fn encode_lmap(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = header(LMAP);
    out.extend_from_slice(&dim16(map.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim16(map.width(), "width")?.to_le_bytes());
    out.push(map.num_classes());
    out.extend_from_slice(map.labels());
    Ok(out)
}

pub fn decode_lmap(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::new(bytes, LMAP, "lmap")?;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u8()?;
    let labels = r.take(h * w)?.to_vec();
    r.finish()?;
    LabelMap::new(h, w, c, labels)
}

pub fn encode_fmap(map: &EntropyMap) -> Result<Vec<u8>> {
    let mut out = header(FMAP);
    out.extend_from_slice(&dim16(map.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim16(map.width(), "width")?.to_le_bytes());
    put_f32s(&mut out, map.values());
    Ok(out)
}

pub fn decode_fmap(bytes: &[u8]) -> Result<EntropyMap> {
    let mut r = Reader::new(bytes, FMAP, "fmap")?;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let values = r.f32s(h * w)?;
    r.finish()?;
    EntropyMap::new(h, w, values)
}

pub fn encode_pmap(map: &Map3) -> Result<Vec<u8>> {
    let mut out = header(PMAP);
    out.extend_from_slice(&dim16(map.channels(), "classes")?.to_le_bytes());
    out.extend_from_slice(&dim16(map.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim16(map.width(), "width")?.to_le_bytes());
    put_f32s(&mut out, map.data());
    Ok(out)
}

pub fn decode_pmap(bytes: &[u8]) -> Result<Map3> {
    let mut r = Reader::new(bytes, PMAP, "pmap")?;
    let c = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let data = r.f32s(c * h * w)?;
    r.finish()?;
    Ok(Map3::from_vec(c, h, w, data))
}

/// Model parameters plus optimizer moments at a given iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u32,
    pub params: ParamSet,
    /// First and second moments; the step counter is `iteration`.
    pub moments: Option<(ParamSet, ParamSet)>,
    pub iteration: u64,
}

impl Checkpoint {
    /// Snapshot of training state, rounded to the stored precision.
    pub fn new(config_hash: u32, params: &ParamSet, optimizer: Option<&OptimizerState>, iteration: u64) -> Self {
        let mut params = params.clone();
        params.quantize_f32();
        let moments = optimizer.map(|o| {
            let (mut m, mut v) = (o.m.clone(), o.v.clone());
            m.quantize_f32();
            v.quantize_f32();
            (m, v)
        });
        Self {
            config_hash,
            params,
            moments,
            iteration,
        }
    }

    pub fn width(&self) -> usize {
        self.params.width()
    }

    /// Rebuilds optimizer state with the given hyperparameters; fresh
    /// state when the checkpoint carries no moments.
    pub fn optimizer(&self, config: AdamWConfig) -> OptimizerState {
        match &self.moments {
            Some((m, v)) => OptimizerState {
                config,
                m: m.clone(),
                v: v.clone(),
                step: self.iteration,
            },
            None => OptimizerState::new(&self.params, config),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = header(SEGC);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        put_entries(&mut out, self.params.params().iter())?;
        let opt: Vec<Param> = match &self.moments {
            Some((m, v)) => m
                .params()
                .iter()
                .map(|p| prefixed("m.", p))
                .chain(v.params().iter().map(|p| prefixed("v.", p)))
                .collect(),
            None => Vec::new(),
        };
        put_entries(&mut out, opt.iter())?;
        out.extend_from_slice(&self.iteration.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, SEGC, "ckpt")?;
        let config_hash = r.u32()?;
        let params = ParamSet::from_params(read_entries(&mut r)?)?;
        let opt = read_entries(&mut r)?;
        let iteration = r.u64()?;
        r.finish()?;
        let moments = if opt.is_empty() {
            None
        } else {
            let n = opt.len() / 2;
            if opt.len() != 2 * n {
                return Err(Error::Format("ckpt: odd optimizer entry count".into()));
            }
            let strip = |p: &Param, prefix: &str| -> Result<Param> {
                let name = p.name.strip_prefix(prefix).ok_or_else(|| {
                    Error::Format(format!("ckpt: optimizer entry `{}` lacks `{prefix}`", p.name))
                })?;
                Ok(Param {
                    name: name.to_string(),
                    ..p.clone()
                })
            };
            let m = opt[..n].iter().map(|p| strip(p, "m.")).collect::<Result<Vec<_>>>()?;
            let v = opt[n..].iter().map(|p| strip(p, "v.")).collect::<Result<Vec<_>>>()?;
            let (m, v) = (ParamSet::from_params(m)?, ParamSet::from_params(v)?);
            if !m.same_layout(&params) || !v.same_layout(&params) {
                return Err(Error::Format("ckpt: optimizer shapes differ from parameters".into()));
            }
            Some((m, v))
        };
        Ok(Self {
            config_hash,
            params,
            moments,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn prefixed(prefix: &str, p: &Param) -> Param {
    Param {
        name: format!("{prefix}{}", p.name),
        ..p.clone()
    }
}

fn put_entries<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = &'a Param>) -> Result<()> {
    out.extend_from_slice(&dim16(entries.len(), "entry count")?.to_le_bytes());
    for p in entries {
        let name = p.name.as_bytes();
        let len = u8::try_from(name.len()).map_err(|_| Error::Format(format!("name `{}` too long", p.name)))?;
        out.push(len);
        out.extend_from_slice(name);
        let rank = u8::try_from(p.shape.len()).map_err(|_| Error::Format("rank exceeds u8".into()))?;
        out.push(rank);
        for d in &p.shape {
            out.extend_from_slice(&dim16(*d, "dimension")?.to_le_bytes());
        }
        put_f32s(out, &p.data);
    }
    Ok(())
}

fn read_entries(r: &mut Reader<'_>) -> Result<Vec<Param>> {
    let count = r.u16()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u8()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("ckpt: entry name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u16().map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        out.push(Param { name, shape, data });
    }
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_fimg(path: &Path) -> Result<Map3> {
    decode_fimg(&fs::read(path)?)
}

pub fn read_lmap(path: &Path) -> Result<LabelMap> {
    decode_lmap(&fs::read(path)?)
}

pub fn read_fmap(path: &Path) -> Result<EntropyMap> {
    decode_fmap(&fs::read(path)?)
}

pub fn read_pmap(path: &Path) -> Result<Map3> {
    decode_pmap(&fs::read(path)?)
}
