//! Flat checkpoint files.
//!
//! Layout:
//!
//! ```text
//! DABDETR-CKPT 1\n
//! config <byte length>\n<JSON bytes>\n
//! param <name> <ndim> <d0> <d1> …\n<little-endian f64 bytes>\n   (repeated)
//! end\n
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &str = "DABDETR-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(config: serde_json::Value, store: &ParamStore) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                (
                    store.name(id).to_string(),
                    Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
                )
            })
            .collect();
        Self { config, params }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {VERSION}")?;
        let cfg = serde_json::to_string(&self.config).map_err(|e| bad(e.to_string()))?;
        writeln!(w, "config {}", cfg.len())?;
        w.write_all(cfg.as_bytes())?;
        writeln!(w)?;
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "param {name} {} {}", t.shape().len(), dims.join(" "))?;
            let mut buf = Vec::with_capacity(8 * t.numel());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let header = read_line(&mut r)?;
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(bad(format!("bad header {header:?}")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing version in header {header:?}")))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
        }
        let cfg_line = read_line(&mut r)?;
        let len: usize = cfg_line
            .strip_prefix("config ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad config line {cfg_line:?}")))?;
        let mut cfg = vec![0u8; len];
        r.read_exact(&mut cfg).map_err(|_| bad("truncated config"))?;
        expect_newline(&mut r)?;
        let config = serde_json::from_slice(&cfg).map_err(|e| bad(format!("config JSON: {e}")))?;
        let mut params = Vec::new();
        loop {
            let line = read_line(&mut r)?;
            if line == "end" {
                break;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() < 3 || fields[0] != "param" {
                return Err(bad(format!("bad parameter line {line:?}")));
            }
            let name = fields[1].to_string();
            let ndim: usize = fields[2].parse().map_err(|_| bad(format!("bad ndim in {line:?}")))?;
            if fields.len() != 3 + ndim {
                return Err(bad(format!("dimension count mismatch in {line:?}")));
            }
            let shape: Vec<usize> = fields[3..]
                .iter()
                .map(|d| d.parse().map_err(|_| bad(format!("bad dim in {line:?}"))))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 8 * n];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("truncated data for {name}")))?;
            expect_newline(&mut r)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push((name, Tensor::from_parts(shape, data)));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::read_from(f)
    }

    /// Copies every stored parameter into `store`; names and shapes must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            store.assign(name, t.clone())?;
        }
        Ok(())
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut buf = Vec::new();
    r.read_until(b'\n', &mut buf)?;
    if buf.pop() != Some(b'\n') {
        return Err(bad("unexpected end of file"));
    }
    String::from_utf8(buf).map_err(|_| bad("non-UTF-8 header line"))
}

fn expect_newline<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(|_| bad("unexpected end of file"))?;
    if b[0] != b'\n' {
        return Err(bad("missing block terminator"));
    }
    Ok(())
}
