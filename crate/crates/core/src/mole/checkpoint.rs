//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  "MOLECKPT"
//! version   u32 LE   FORMAT_VERSION
//! header    u64 LE length + UTF-8 JSON (caller-defined metadata)
//! body      sequence of tensors / layers, all integers u64 LE,
//!           all reals f64 LE bit patterns
//! ```
//!
//! A layer is written as `W₀`, then `T`, `r`, `α`, then `(Aᵢ, Bᵢ)` for each
//! expert, then `W_g`. Floats are stored as raw bits so a save/load round
//! trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LoraExpert, MoleLinear, Router};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const MAGIC: &[u8; 8] = b"MOLECKPT";
pub const FORMAT_VERSION: u32 = 1;

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub struct CheckpointWriter<W: Write> {
    inner: W,
}

impl<W: Write> CheckpointWriter<W> {
    pub fn new(mut inner: W, header: &str) -> Result<Self> {
        inner.write_all(MAGIC).map_err(fmt_err)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(fmt_err)?;
        let mut w = Self { inner };
        w.write_u64(header.len() as u64)?;
        w.inner.write_all(header.as_bytes()).map_err(fmt_err)?;
        Ok(w)
    }

    pub fn write_u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes()).map_err(fmt_err)
    }

    pub fn write_f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_bits().to_le_bytes()).map_err(fmt_err)
    }

    pub fn write_tensor(&mut self, t: &Tensor2D) -> Result<()> {
        self.write_u64(t.rows() as u64)?;
        self.write_u64(t.cols() as u64)?;
        let mut buf = Vec::with_capacity(t.data().len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        self.inner.write_all(&buf).map_err(fmt_err)
    }

    pub fn write_layer(&mut self, layer: &MoleLinear) -> Result<()> {
        let dims = layer.dims();
        self.write_tensor(layer.base())?;
        self.write_u64(dims.num_experts as u64)?;
        self.write_u64(dims.rank as u64)?;
        self.write_f64(dims.alpha)?;
        for e in layer.experts() {
            self.write_tensor(e.a())?;
            self.write_tensor(e.b())?;
        }
        self.write_tensor(layer.router().weights())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(fmt_err)?;
        Ok(self.inner)
    }
}

pub struct CheckpointReader<R: Read> {
    inner: R,
    header: String,
}

/// Refuse absurd sizes before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

impl<R: Read> CheckpointReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        inner.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a MoLE checkpoint (bad magic)".into()));
        }
        let mut ver = [0u8; 4];
        inner.read_exact(&mut ver).map_err(fmt_err)?;
        let version = u32::from_le_bytes(ver);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut r = Self {
            inner,
            header: String::new(),
        };
        let len = r.read_u64()?;
        if len > MAX_ELEMENTS {
            return Err(Error::Format(format!("header length {len} is implausible")));
        }
        let mut buf = vec![0u8; len as usize];
        r.inner.read_exact(&mut buf).map_err(fmt_err)?;
        r.header = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
        Ok(r)
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).map_err(fmt_err)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.read_u64()?))
    }

    pub fn read_tensor(&mut self) -> Result<Tensor2D> {
        let rows = self.read_u64()?;
        let cols = self.read_u64()?;
        let n = rows.checked_mul(cols).filter(|&n| n <= MAX_ELEMENTS).ok_or_else(|| {
            Error::Format(format!("tensor of {rows}x{cols} is implausible"))
        })? as usize;
        let mut bytes = vec![0u8; n * 8];
        self.inner.read_exact(&mut bytes).map_err(fmt_err)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Tensor2D::from_vec(rows as usize, cols as usize, data)
    }

    pub fn read_layer(&mut self) -> Result<MoleLinear> {
        let w0 = self.read_tensor()?;
        let num_experts = self.read_u64()? as usize;
        let rank = self.read_u64()? as usize;
        let alpha = self.read_f64()?;
        if num_experts == 0 || num_experts > 1024 {
            return Err(Error::Format(format!("implausible expert count {num_experts}")));
        }
        let mut experts = Vec::with_capacity(num_experts);
        for _ in 0..num_experts {
            let a = self.read_tensor()?;
            let b = self.read_tensor()?;
            let e = LoraExpert::from_parts(a, b, alpha)?;
            if e.rank() != rank {
                return Err(Error::Format(format!("expert rank {} != declared {rank}", e.rank())));
            }
            experts.push(e);
        }
        let w_g = self.read_tensor()?;
        MoleLinear::from_parts(w0, experts, Router::from_weights(w_g))
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b).map_err(fmt_err)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after checkpoint body".into())),
        }
    }
}

const LAYERS_HEADER: &str = r#"{"kind":"mole-layers"}"#;

/// Save a bare list of layers.
pub fn save_layers(path: &Path, layers: &[&MoleLinear]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = CheckpointWriter::new(BufWriter::new(file), LAYERS_HEADER)?;
    w.write_u64(layers.len() as u64)?;
    for layer in layers {
        w.write_layer(layer)?;
    }
    w.finish()?;
    Ok(())
}

pub fn load_layers(path: &Path) -> Result<Vec<MoleLinear>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = CheckpointReader::new(BufReader::new(file))?;
    if r.header() != LAYERS_HEADER {
        return Err(Error::Format(format!("expected a layer checkpoint, header is {}", r.header())));
    }
    let n = r.read_u64()?;
    let layers = (0..n).map(|_| r.read_layer()).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    Ok(layers)
}
