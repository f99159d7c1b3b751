//! Skeleton sequences, the synthetic motion generator, and the on-disk
//! dataset format (a `SKEL` tensor container plus a JSON manifest).

mod format;
mod synth;
mod topology;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use format::{load_dataset, read_skel, save_dataset, write_skel, SKEL_MAGIC, SKEL_VERSION};
pub use synth::{generate_synthetic_dataset, synthesize, SynthConfig, Variation};
pub use topology::{GraphAdjacency, Skeleton};

/// One action clip: a `C x T x V` tensor of joint coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub sample_id: String,
    pub label: Option<usize>,
    data: Tensor,
}

impl SkeletonSequence {
    pub fn new(sample_id: impl Into<String>, label: Option<usize>, data: Tensor) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 {
            return Err(Error::shape("skeleton sequence", format!("expected C x T x V, got {shape:?}")));
        }
        if shape[2] < 2 {
            return Err(Error::invalid(format!("a sequence needs at least 2 joints, got {}", shape[2])));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("skeleton sequence".into()));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            label,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn at(&self, c: usize, t: usize, v: usize) -> f64 {
        self.data.data()[(c * self.frames() + t) * self.joints() + v]
    }

    pub(crate) fn with_tensor(&self, data: Tensor) -> Self {
        Self {
            sample_id: self.sample_id.clone(),
            label: self.label,
            data,
        }
    }
}

/// Translates all coordinates so the root joint (index 0) of the first frame
/// sits at the origin.
pub fn normalize_sequence(seq: &SkeletonSequence) -> SkeletonSequence {
    let (c, t, v) = (seq.channels(), seq.frames(), seq.joints());
    let mut out = seq.data.clone();
    for ch in 0..c {
        let origin = seq.at(ch, 0, 0);
        for x in &mut out.data_mut()[ch * t * v..(ch + 1) * t * v] {
            *x -= origin;
        }
    }
    seq.with_tensor(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTopology {
    #[serde(rename = "V")]
    pub joints: usize,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Option<usize>,
    pub split: Split,
}

/// JSON side of a stored dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// `SKEL` container holding the tensors, relative to the manifest.
    #[serde(default = "default_data_file")]
    pub data_file: String,
    pub topology: ManifestTopology,
    pub samples: Vec<ManifestEntry>,
}

fn default_data_file() -> String {
    "data.skel".into()
}

impl DatasetManifest {
    pub fn adjacency(&self) -> Result<GraphAdjacency> {
        GraphAdjacency::new(self.topology.joints, self.topology.edges.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Format(format!("duplicate sample id {:?}", s.id)));
            }
        }
        self.adjacency().map(|_| ())
    }
}

/// Sequences paired with their manifest, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SkeletonSequence> {
        self.sequences
            .iter()
            .zip(&self.manifest.samples)
            .filter(|(_, m)| m.split == split)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<SkeletonSequence> {
        self.split(split).into_iter().cloned().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.sequences.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1)
    }

    pub fn adjacency(&self) -> Result<GraphAdjacency> {
        self.manifest.adjacency()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_from(values: Vec<f64>, t: usize, v: usize) -> SkeletonSequence {
        SkeletonSequence::new("s", None, Tensor::new(vec![3, t, v], values).unwrap()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SkeletonSequence::new("a", None, Tensor::zeros(&[3, 4, 1])).is_err());
        assert!(SkeletonSequence::new("a", None, Tensor::zeros(&[3, 4])).is_err());
        let mut t = Tensor::zeros(&[3, 2, 2]);
        t.data_mut()[0] = f64::NAN;
        assert!(SkeletonSequence::new("a", None, t).is_err());
    }

    #[test]
    fn root_maps_to_origin() {
        let s = seq_from((0..3 * 4 * 3).map(|i| i as f64 * 0.5 + 1.0).collect(), 4, 3);
        let n = normalize_sequence(&s);
        for c in 0..3 {
            assert_eq!(n.at(c, 0, 0), 0.0);
        }
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent_and_translation_invariant(
            values in proptest::collection::vec(-2.0f64..2.0, 3 * 5 * 4),
            shift in proptest::array::uniform3(-10.0f64..10.0),
        ) {
            let s = seq_from(values.clone(), 5, 4);
            let once = normalize_sequence(&s);
            let twice = normalize_sequence(&once);
            prop_assert_eq!(once.tensor(), twice.tensor());

            let shifted: Vec<f64> = values
                .iter()
                .enumerate()
                .map(|(i, x)| x + shift[i / 20])
                .collect();
            let moved = normalize_sequence(&seq_from(shifted, 5, 4));
            prop_assert!(moved.tensor().max_abs_diff(once.tensor()) < 1e-12);
        }
    }
}
