//! Parameter snapshots and their flat binary encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CILM" | version: u32 | param_count: u32
//! per parameter: rank: u32 | dims: rank x u32 | values: prod(dims) x f64
//! ```

use std::io::{Read, Write};

use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"CILM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    values: Vec<Tensor>,
}

impl ParamState {
    pub fn new(values: Vec<Tensor>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for t in &self.values {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..], "<memory>")
    }

    pub fn read_from<R: Read>(r: &mut R, origin: &str) -> Result<Self> {
        let err = |field: &str, msg: &str| Error::parse(origin, field, msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("magic", "truncated"))?;
        if &magic != MAGIC {
            return Err(err("magic", "expected \"CILM\""));
        }
        let version = read_u32(r).map_err(|_| err("version", "truncated"))?;
        if version != VERSION {
            return Err(err("version", &format!("unsupported version {version}")));
        }
        let count = read_u32(r).map_err(|_| err("param_count", "truncated"))?;
        let mut values = Vec::with_capacity(count as usize);
        for i in 0..count {
            let rank = read_u32(r).map_err(|_| err(&format!("param[{i}].rank"), "truncated"))?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(
                    read_u32(r).map_err(|_| err(&format!("param[{i}].dims"), "truncated"))? as usize,
                );
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| err(&format!("param[{i}].values"), "truncated"))?;
                data.push(f64::from_le_bytes(buf));
            }
            values.push(Tensor::new(shape, data)?);
        }
        Ok(Self { values })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
