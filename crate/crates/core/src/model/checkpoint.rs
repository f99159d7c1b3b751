//! `CPMP` checkpoint container.
//!
//! ```text
//! "CPMP" | version u16 | config length u32 | config JSON bytes |
//! record count u32 |
//!   per record: name length u16, name UTF-8, dtype u8 (0 = f32, 1 = f64),
//!               rank u8, extents u32 each, values little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::container::{LeReader, LeWriter};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPMP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub precision: Precision,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, precision: Precision) {
        self.records.push(Record {
            name: name.into(),
            precision,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no record {name:?}")))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = LeWriter::new(out);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u16(CHECKPOINT_VERSION)?;
        w.u32(self.config_json.len() as u32)?;
        w.bytes(self.config_json.as_bytes())?;
        w.u32(self.records.len() as u32)?;
        for r in &self.records {
            w.short_str(&r.name)?;
            w.u8(match r.precision {
                Precision::F32 => 0,
                Precision::F64 => 1,
            })?;
            w.u8(r.tensor.ndim() as u8)?;
            for &d in r.tensor.shape() {
                w.u32(d as u32)?;
            }
            match r.precision {
                Precision::F32 => w.f32s(r.tensor.data().iter().copied())?,
                Precision::F64 => w.f64s(r.tensor.data())?,
            }
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = LeReader::new(input);
        if &r.array::<4>()? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config_json = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.short_str()?;
            let precision = match r.u8()? {
                0 => Precision::F32,
                1 => Precision::F64,
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match precision {
                Precision::F32 => r.f32s(n)?,
                Precision::F64 => r.f64s(n)?,
            };
            records.push(Record {
                name,
                precision,
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(Self { config_json, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
