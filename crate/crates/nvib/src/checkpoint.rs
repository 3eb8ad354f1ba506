//! Binary checkpoints: a magic line, a format version, a JSON header with
//! the model configuration and vocabulary, then named little-endian `f32`
//! tensors.

use std::io::{Read, Write};
use std::path::Path;

use nvib_core::model::{Model, ModelConfig};
use nvib_core::tokenizer::Vocab;
use nvib_core::{Matrix, Real};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NVIBCKP\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub vocab: Vec<char>,
    pub step: usize,
}

pub struct Checkpoint<T> {
    pub header: Header,
    pub model: Model<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn vocab(&self) -> Vocab {
        Vocab::from_chars(self.header.vocab.clone())
    }
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, vocab: &Vocab, step: usize) -> Result<()> {
    let header = Header {
        model: model.config().clone(),
        vocab: vocab.chars().to_vec(),
        step,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, m) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not an NVIB checkpoint"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "bad tensor name"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.take(rows * cols * 4)?;
        let values = data
            .chunks_exact(4)
            .map(|c| T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        named.push((name, Matrix::from_vec(rows, cols, values)));
    }
    if !r.buf.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    // The initial values are overwritten; any fixed seed will do.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = Model::new(header.model.clone(), &mut rng)?;
    model
        .load_params(&named)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint { header, model })
}
