use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Joint tree with rest-pose offsets, used by the synthetic generator and to
/// derive the graph adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub parents: Vec<Option<usize>>,
    /// Rest position of each joint relative to the root.
    pub rest: Vec<[f64; 3]>,
}

impl Skeleton {
    /// 15-joint body: root, 3-joint spine, head, two 3-joint arms hanging
    /// from the upper spine and two 2-joint legs hanging from the root.
    pub fn body15() -> Self {
        let parents = vec![
            None,     // 0 root (pelvis)
            Some(0),  // 1 spine
            Some(1),  // 2 chest
            Some(2),  // 3 neck
            Some(3),  // 4 head
            Some(3),  // 5 left shoulder
            Some(5),  // 6 left elbow
            Some(6),  // 7 left hand
            Some(3),  // 8 right shoulder
            Some(8),  // 9 right elbow
            Some(9),  // 10 right hand
            Some(0),  // 11 left knee
            Some(11), // 12 left foot
            Some(0),  // 13 right knee
            Some(13), // 14 right foot
        ];
        let rest = vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, 0.7, 0.0],
            [0.0, 0.9, 0.0],
            [-0.2, 0.65, 0.0],
            [-0.45, 0.6, 0.0],
            [-0.65, 0.55, 0.0],
            [0.2, 0.65, 0.0],
            [0.45, 0.6, 0.0],
            [0.65, 0.55, 0.0],
            [-0.12, -0.45, 0.0],
            [-0.12, -0.9, 0.0],
            [0.12, -0.45, 0.0],
            [0.12, -0.9, 0.0],
        ];
        Self { parents, rest }
    }

    /// `body15` for `V = 15`; otherwise a spine chain of up to four joints
    /// with the remaining joints forming two-joint limbs that alternate
    /// between the top of the spine and the root.
    pub fn for_joints(v: usize) -> Result<Self> {
        if v < 2 {
            return Err(Error::invalid(format!("a skeleton needs at least 2 joints, got {v}")));
        }
        if v == 15 {
            return Ok(Self::body15());
        }
        let spine = v.min(4);
        let mut parents = vec![None];
        let mut rest = vec![[0.0, 0.0, 0.0]];
        for j in 1..spine {
            parents.push(Some(j - 1));
            rest.push([0.0, 0.25 * j as f64, 0.0]);
        }
        let mut limb = 0usize;
        while parents.len() < v {
            let from_top = limb % 2 == 0;
            let anchor = if from_top { spine - 1 } else { 0 };
            let side = if (limb / 2) % 2 == 0 { -1.0 } else { 1.0 };
            let dy = if from_top { -0.05 } else { -0.45 };
            let mut parent = anchor;
            for seg in 1..=2 {
                if parents.len() == v {
                    break;
                }
                let base = rest[anchor];
                parents.push(Some(parent));
                rest.push([base[0] + side * 0.2 * seg as f64, base[1] + dy * seg as f64, 0.0]);
                parent = parents.len() - 1;
            }
            limb += 1;
        }
        Ok(Self { parents, rest })
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn edges(&self) -> Vec<[usize; 2]> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| [p, j]))
            .collect()
    }
}

/// Normalized joint adjacency the spatial graph convolution mixes with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdjacencyEdges")]
pub struct GraphAdjacency {
    pub joints: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(skip)]
    normalized: Option<Tensor>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjacencyEdges {
    joints: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<AdjacencyEdges> for GraphAdjacency {
    type Error = Error;

    fn try_from(raw: AdjacencyEdges) -> Result<Self> {
        Self::new(raw.joints, raw.edges)
    }
}

impl GraphAdjacency {
    /// `D^{-1/2} (A + I) D^{-1/2}` of the undirected edge list.
    pub fn new(joints: usize, edges: Vec<[usize; 2]>) -> Result<Self> {
        let mut adj = Self {
            joints,
            edges,
            normalized: None,
        };
        adj.normalized = Some(adj.compute_normalized()?);
        Ok(adj)
    }

    pub fn from_skeleton(s: &Skeleton) -> Self {
        Self::new(s.joints(), s.edges()).expect("skeleton edges are in range")
    }

    fn compute_normalized(&self) -> Result<Tensor> {
        let v = self.joints;
        if v < 2 {
            return Err(Error::invalid("adjacency needs at least 2 joints"));
        }
        let mut a = Tensor::eye(v);
        for &[i, j] in &self.edges {
            if i >= v || j >= v {
                return Err(Error::invalid(format!("edge ({i},{j}) outside {v} joints")));
            }
            if i != j {
                a.data_mut()[i * v + j] = 1.0;
                a.data_mut()[j * v + i] = 1.0;
            }
        }
        let deg: Vec<f64> = (0..v).map(|i| a.row(i).iter().sum::<f64>()).collect();
        for i in 0..v {
            for j in 0..v {
                a.data_mut()[i * v + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
        Ok(a)
    }

    pub fn normalized(&self) -> &Tensor {
        self.normalized.as_ref().expect("normalized adjacency is built on construction")
    }

    /// Relabels joints: new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let edges = self.edges.iter().map(|&[i, j]| [inverse[i], inverse[j]]).collect();
        Self::new(self.joints, edges)
    }
}
