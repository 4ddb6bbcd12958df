//! Binary checkpoint: little-endian, length-prefixed strings.
//!
//! ```text
//! magic "POIRECCK" | version u32 | config hash | variant | vocab 4 x u64
//! leaf count u32 | per leaf: id, ndim u32, dims u64.., values f64..
//! optimizer flag u8 | [step u64 | per leaf: m f64.., v f64..]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, VariantSpec};
use crate::error::{Error, Result};
use crate::ingest::VocabSizes;
use crate::train::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POIRECCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in memory".into()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let bytes = self.take(out.len() * 8)?;
        for (o, c) in out.iter_mut().zip(bytes.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, optimizer: Option<&OptimizerState>, config_hash: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(config_hash);
    w.str(&model.variant.name());
    let v = model.vocab;
    for n in [v.users, v.pois, v.categories, v.areas] {
        w.u64(n as u64);
    }
    let leaves = model.store.leaves();
    w.u32(leaves.len() as u32);
    for leaf in leaves {
        w.str(&leaf.id);
        w.u32(leaf.value.shape().len() as u32);
        for &d in leaf.value.shape() {
            w.u64(d as u64);
        }
        w.f64s(leaf.value.data());
    }
    match optimizer {
        None => w.0.push(0),
        Some(opt) => {
            if opt.m.len() != leaves.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tracks {} leaves, model has {}",
                    opt.m.len(),
                    leaves.len()
                )));
            }
            w.0.push(1);
            w.u64(opt.step);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                w.f64s(m);
                w.f64s(v);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&w.0).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8).map_err(|_| Error::Checkpoint("file too short for header".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_hash = r.str()?;
    let variant: VariantSpec = r.str()?.parse()?;
    let vocab = VocabSizes {
        users: r.usize()?,
        pois: r.usize()?,
        categories: r.usize()?,
        areas: r.usize()?,
    };
    let mut model = Model::zeros(vocab, variant)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} leaves, variant {variant} expects {}",
            model.store.len()
        )));
    }
    for leaf in model.store.leaves_mut() {
        let id = r.str()?;
        if id != leaf.id {
            return Err(Error::Checkpoint(format!("leaf {id:?} found where {:?} was expected", leaf.id)));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if dims != leaf.value.shape() {
            return Err(Error::Checkpoint(format!(
                "leaf {id} has shape {dims:?}, expected {:?}",
                leaf.value.shape()
            )));
        }
        r.f64s(leaf.value.data_mut())?;
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut opt = OptimizerState::new(&model.store);
            opt.step = step;
            for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
                r.f64s(m)?;
                r.f64s(v)?;
            }
            Some(opt)
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        config_hash,
        model,
        optimizer,
    })
}
