//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "VDDCKPT\0" | version u32 | stage u8 | step u64
//! model config: len u32 + UTF-8 key=value text
//! rng: seed [u8;32] | stream u64 | word_pos u128
//! params: count u32, then per tensor: name (len u32 + UTF-8) | ndim u32 | dims u64… | data f64…
//! optimizer: flag u8; if 1: step u64 | count u32 | m tensors | v tensors
//! ```
//!
//! Tensors are written sorted by name, so the byte stream depends only on content.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"VDDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
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
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub model: ModelConfig,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

fn err(detail: impl std::fmt::Display) -> Error {
    Error::Checkpoint(detail.to_string())
}

fn write_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LE>(s.len() as u32).expect("vec write");
    w.extend_from_slice(s.as_bytes());
}

fn write_tensors(w: &mut Vec<u8>, items: &[(String, Tensor)]) {
    let mut sorted: Vec<&(String, Tensor)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    w.write_u32::<LE>(sorted.len() as u32).expect("vec write");
    for (name, t) in sorted {
        write_str(w, name);
        w.write_u32::<LE>(t.ndim() as u32).expect("vec write");
        for &d in t.shape() {
            w.write_u64::<LE>(d as u64).expect("vec write");
        }
        for &v in t.data() {
            w.write_f64::<LE>(v).expect("vec write");
        }
    }
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(err)? as usize;
    if n > 1 << 20 {
        return Err(err(format!("string length {n} out of range")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(err)
}

fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = r.read_u32::<LE>().map_err(err)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let ndim = r.read_u32::<LE>().map_err(err)? as usize;
        if ndim > 8 {
            return Err(err(format!("tensor {name} has implausible rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(err))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(err(format!("tensor {name} too large")));
        }
        let mut data = vec![0.0; n];
        r.read_f64_into::<LE>(&mut data).map_err(err)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(VERSION).expect("vec write");
        w.write_u8(self.stage).expect("vec write");
        w.write_u64::<LE>(self.step).expect("vec write");
        write_str(&mut w, &self.model.to_text());
        w.extend_from_slice(&self.rng.seed);
        w.write_u64::<LE>(self.rng.stream).expect("vec write");
        w.write_u128::<LE>(self.rng.word_pos).expect("vec write");
        write_tensors(&mut w, &self.params);
        match &self.optimizer {
            None => w.write_u8(0).expect("vec write"),
            Some(o) => {
                w.write_u8(1).expect("vec write");
                w.write_u64::<LE>(o.step).expect("vec write");
                write_tensors(&mut w, &o.m);
                write_tensors(&mut w, &o.v);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err("file too short for header"))?;
        if &magic != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LE>().map_err(err)?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let stage = r.read_u8().map_err(err)?;
        if !(1..=3).contains(&stage) {
            return Err(err(format!("invalid stage tag {stage}")));
        }
        let step = r.read_u64::<LE>().map_err(err)?;
        let model = ModelConfig::from_text(&read_str(&mut r)?)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(err)?;
        let rng = RngState {
            seed,
            stream: r.read_u64::<LE>().map_err(err)?,
            word_pos: r.read_u128::<LE>().map_err(err)?,
        };
        let params = read_tensors(&mut r)?;
        let optimizer = match r.read_u8().map_err(err)? {
            0 => None,
            1 => Some(OptimizerState {
                step: r.read_u64::<LE>().map_err(err)?,
                m: read_tensors(&mut r)?,
                v: read_tensors(&mut r)?,
            }),
            f => return Err(err(format!("invalid optimizer flag {f}"))),
        };
        if !r.is_empty() {
            return Err(err(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            stage,
            step,
            model,
            rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(d) => Error::Checkpoint(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}
