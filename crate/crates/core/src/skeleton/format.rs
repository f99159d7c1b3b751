//! `SKEL` tensor container and JSON manifest.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "SKEL" | version u16 | record count u32 |
//!   per record: id length u16, id UTF-8 bytes, C u16, T u16, V u16,
//!               C*T*V f32 values (c slowest, v fastest)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, SkeletonSequence};
use crate::autodiff::Tensor;
use crate::container::{LeReader, LeWriter};
use crate::error::{Error, Result};

pub const SKEL_MAGIC: &[u8; 4] = b"SKEL";
pub const SKEL_VERSION: u16 = 1;

pub fn write_skel<W: Write>(out: W, sequences: &[SkeletonSequence]) -> Result<()> {
    let mut w = LeWriter::new(out);
    w.bytes(SKEL_MAGIC)?;
    w.u16(SKEL_VERSION)?;
    w.u32(u32::try_from(sequences.len()).map_err(|_| Error::Format("too many records".into()))?)?;
    for s in sequences {
        w.short_str(&s.sample_id)?;
        for d in s.tensor().shape() {
            w.u16(u16::try_from(*d).map_err(|_| Error::Format(format!("extent {d} exceeds u16")))?)?;
        }
        w.f32s(s.tensor().data().iter().copied())?;
    }
    w.into_inner().flush()?;
    Ok(())
}

/// Reads every `(sample_id, C x T x V tensor)` record.
pub fn read_skel<R: Read>(input: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = LeReader::new(input);
    let magic = r.array::<4>().map_err(|_| Error::Format("bad magic bytes".into()))?;
    if &magic != SKEL_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u16()?;
    if version != SKEL_VERSION {
        return Err(Error::Format(format!("unsupported SKEL version {version}")));
    }
    let count = r.u32()? as usize;
    let truncated = |_| Error::Format("record count mismatch".into());
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.short_str().map_err(truncated)?;
        let c = r.u16().map_err(truncated)? as usize;
        let t = r.u16().map_err(truncated)? as usize;
        let v = r.u16().map_err(truncated)? as usize;
        let values = r.f32s(c * t * v).map_err(truncated)?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("record {id:?}")));
        }
        records.push((id, Tensor::new(vec![c, t, v], values)?));
    }
    if !r.at_end()? {
        return Err(Error::Format("record count mismatch".into()));
    }
    Ok(records)
}

fn data_path(manifest_path: &Path, manifest: &DatasetManifest) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.data_file)
}

/// Writes the manifest JSON to `manifest_path` and the tensors to the
/// manifest's `data_file` next to it.
pub fn save_dataset(manifest_path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.manifest.validate()?;
    if dataset.sequences.len() != dataset.manifest.samples.len() {
        return Err(Error::Format("manifest and sequence counts differ".into()));
    }
    if let Some(dir) = manifest_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(data_path(manifest_path, &dataset.manifest))?);
    write_skel(file, &dataset.sequences)?;
    let json = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(manifest_path, json)?;
    Ok(())
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    manifest.validate()?;
    let file = BufReader::new(File::open(data_path(manifest_path, &manifest))?);
    let mut by_id: HashMap<String, Tensor> = read_skel(file)?.into_iter().collect();
    let mut sequences = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let data = by_id
            .remove(&entry.id)
            .ok_or_else(|| Error::Format(format!("manifest references absent sample_id {:?}", entry.id)))?;
        if data.shape()[2] != manifest.topology.joints {
            return Err(Error::shape("load_dataset", format!("{:?} has {} joints", entry.id, data.shape()[2])));
        }
        sequences.push(SkeletonSequence::new(entry.id.clone(), entry.label, data)?);
    }
    Ok(Dataset { sequences, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::generate_synthetic_dataset;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = generate_synthetic_dataset(3, 4, 15, 12, 0.02, 1).unwrap();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.sequences, ds.sequences);
        assert_eq!(back.manifest, ds.manifest);
    }

    #[test]
    fn byte_layout() {
        let seq = SkeletonSequence::new("ab", None, Tensor::new(vec![1, 1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_skel(&mut buf, &[seq]).unwrap();
        let mut want = b"SKEL".to_vec();
        want.extend(1u16.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u16.to_le_bytes());
        want.extend(b"ab");
        for d in [1u16, 1, 2] {
            want.extend(d.to_le_bytes());
        }
        want.extend(1f32.to_le_bytes());
        want.extend((-2f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn truncated_file_reports_record_count_mismatch() {
        let ds = generate_synthetic_dataset(2, 2, 15, 4, 0.0, 1).unwrap();
        let mut buf = Vec::new();
        write_skel(&mut buf, &ds.sequences).unwrap();
        buf.truncate(buf.len() - 10);
        let err = read_skel(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("record count mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_skel(&b"SKEX\x01\x00\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut buf = b"SKEL".to_vec();
        buf.extend(1u16.to_le_bytes());
        buf.extend(1u32.to_le_bytes());
        buf.extend(1u16.to_le_bytes());
        buf.extend(b"x");
        for d in [1u16, 1, 2] {
            buf.extend(d.to_le_bytes());
        }
        buf.extend(f32::NAN.to_le_bytes());
        buf.extend(0f32.to_le_bytes());
        assert!(matches!(read_skel(&buf[..]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn absent_sample_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let mut ds = generate_synthetic_dataset(2, 2, 15, 4, 0.0, 1).unwrap();
        save_dataset(&path, &ds).unwrap();
        ds.manifest.samples[0].id = "ghost".into();
        std::fs::write(&path, serde_json::to_string(&ds.manifest).unwrap()).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }
}
