//! Finite-difference suite over every differentiable primitive and both
//! contrastive losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_check, ConvGeom, Graph, Tensor, Var};
use crate::contrastive::{batch_loss, center_and_normalize_var, ContextQueue, LossSettings, MiningSide, Stage};
use crate::error::Result;

/// Largest relative error the suite accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Name, input shapes and builder of each primitive under test.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("add_bias", vec![vec![4, 3], vec![3]], |g, v| g.add_bias(v[0], v[1])),
        ("multiply", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![2, 3]], |g, v| g.scale(v[0], -1.7)),
        ("relu", vec![vec![3, 3]], |g, v| g.relu(v[0])),
        ("exp", vec![vec![3, 2]], |g, v| g.exp(v[0])),
        ("log", vec![vec![3, 2]], |g, v| {
            let e = g.exp(v[0])?;
            g.log(e)
        }),
        ("divide", vec![vec![2, 2], vec![2, 2]], |g, v| {
            let e = g.exp(v[1])?;
            g.div(v[0], e)
        }),
        ("reduce_sum", vec![vec![2, 3, 4]], |g, v| g.reduce_sum(v[0], None)),
        ("reduce_sum_axis", vec![vec![2, 3, 4]], |g, v| g.reduce_sum(v[0], Some(1))),
        ("reduce_mean_axis", vec![vec![2, 3, 4]], |g, v| g.reduce_mean(v[0], Some(2))),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0], 0.5)),
        ("l2_normalize_rows", vec![vec![4, 3]], |g, v| g.l2_normalize_rows(v[0])),
        ("mean_center_rows", vec![vec![4, 3]], |g, v| g.mean_center_rows(v[0])),
        ("batchnorm_train", vec![vec![5, 3], vec![3], vec![3]], |g, v| {
            Ok(g.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)
        }),
        ("batchnorm_eval", vec![vec![5, 3], vec![3], vec![3]], |g, v| {
            g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)
        }),
        ("temporal_conv", vec![vec![2 * 5 * 3, 2], vec![3 * 2, 4], vec![4]], |g, v| {
            let geom = ConvGeom { batch: 2, frames: 5, joints: 3, kernel: 3, stride: 2 };
            g.temporal_conv(v[0], v[1], Some(v[2]), geom)
        }),
        ("graph_mix", vec![vec![6, 2]], |g, v| {
            let adj = Tensor::new(vec![3, 3], vec![0.5, 0.5, 0.0, 0.3, 0.4, 0.3, 0.0, 0.5, 0.5])?;
            g.graph_mix(v[0], &adj)
        }),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], vec![3, 4])),
        ("transpose", vec![vec![2, 5]], |g, v| g.transpose(v[0])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("index_select", vec![vec![4, 2]], |g, v| g.index_select(v[0], &[3, 0, 3])),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub name: String,
    pub points: usize,
    pub max_error: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < GRADCHECK_TOLERANCE
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("shape matches data")
}

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(&[rows, dim], rng);
    for row in t.data_mut().chunks_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Scalar probe `sum(y * w)` with a random weighting, so every output
/// coordinate contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(g.value(y).shape(), &mut rng));
    let p = g.mul(y, w)?;
    g.reduce_sum(p, None)
}

/// Checks every primitive and both losses at `points` random inputs each.
pub fn run_gradcheck_suite(points: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for (name, shapes, build) in primitive_cases() {
        let mut worst: f64 = 0.0;
        for trial in 0..points {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
            let err = finite_difference_check(
                |g, v| {
                    let y = build(g, v)?;
                    weighted_sum(g, y, seed ^ trial as u64)
                },
                &inputs,
                EPS,
            )?;
            worst = worst.max(err);
        }
        results.push(GradcheckResult { name: name.into(), points, max_error: worst });
    }

    for (name, stage) in [("similarity_kl_loss", Stage::One), ("enhanced_loss", Stage::Two)] {
        let settings = LossSettings {
            tau: 0.1,
            tau_prime: 0.05,
            k: 3,
            renormalize: false,
            mining_side: MiningSide::Target,
        };
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let mut queue = ContextQueue::new(12, 4)?;
            queue.push(&unit_rows(12, 4, &mut rng), &(100..112).collect::<Vec<_>>())?;
            let target = unit_rows(3, 4, &mut rng);
            let raw = random_tensor(&[3, 4], &mut rng);
            let err = finite_difference_check(
                |g, v| {
                    let p = center_and_normalize_var(g, v[0])?;
                    Ok(batch_loss(g, p, &target, &[0, 1, 2], &queue, stage, &settings)?.loss)
                },
                std::slice::from_ref(&raw),
                EPS,
            )?;
            worst = worst.max(err);
        }
        results.push(GradcheckResult { name: name.into(), points, max_error: worst });
    }
    Ok(results)
}
