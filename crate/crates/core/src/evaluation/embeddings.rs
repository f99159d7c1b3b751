//! `EMBD` container for exported feature vectors.
//!
//! ```text
//! "EMBD" | version u16 | record count u32 |
//!   per record: id length u16, id UTF-8 bytes, label i32 (-1 = none),
//!               dim u16, dim f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::container::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::skeleton::Dataset;

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub label: Option<usize>,
    pub values: Vec<f64>,
}

pub fn write_embeddings<W: Write>(out: W, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = LeWriter::new(out);
    w.bytes(EMBD_MAGIC)?;
    w.u16(EMBD_VERSION)?;
    w.u32(u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?)?;
    for r in records {
        w.short_str(&r.sample_id)?;
        let label = match r.label {
            Some(l) => i32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds i32")))?,
            None => -1,
        };
        w.i32(label)?;
        w.u16(u16::try_from(r.values.len()).map_err(|_| Error::Format("embedding too wide".into()))?)?;
        w.f32s(r.values.iter().copied())?;
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(input: R) -> Result<Vec<EmbeddingRecord>> {
    let mut r = LeReader::new(input);
    if &r.array::<4>()? != EMBD_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u16()?;
    if version != EMBD_VERSION {
        return Err(Error::Format(format!("unsupported EMBD version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let sample_id = r.short_str()?;
        let label = match r.i32()? {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format(format!("invalid label {l}"))),
        };
        let dim = r.u16()? as usize;
        out.push(EmbeddingRecord {
            sample_id,
            label,
            values: r.f32s(dim)?,
        });
    }
    if !r.at_end()? {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

/// Writes eval-mode `h` features of every sample, train split first.
pub fn export_embeddings(params: &ModelParams, dataset: &Dataset, frames: usize, path: &Path) -> Result<usize> {
    let seqs: Vec<_> = dataset.sequences.iter().collect();
    let clips = super::cropped(&seqs, frames)?;
    let feats = super::extract_features(params, &clips, frames, false)?;
    let records: Vec<EmbeddingRecord> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| EmbeddingRecord {
            sample_id: s.sample_id.clone(),
            label: s.label,
            values: feats.row(i).to_vec(),
        })
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_embeddings(BufWriter::new(File::create(path)?), &records)?;
    Ok(records.len())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    read_embeddings(BufReader::new(File::open(path)?))
}
