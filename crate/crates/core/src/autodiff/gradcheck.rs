//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares analytic gradients of a scalar function against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over every input coordinate.
///
/// `f` builds the scalar output from leaves holding `points`. Values that
/// pass through `stop_gradient` are frozen at their unperturbed forward
/// values while probing, so only gradient-carrying paths are compared.
pub fn finite_difference_check<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let frozen = g.stop_values().to_vec();
    let grads = g.backward(out)?;

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut h = Graph::with_frozen_stops(frozen.clone());
        let leaves: Vec<Var> = pts.iter().map(|p| h.constant(p.clone())).collect();
        let out = f(&mut h, &leaves)?;
        let v = h.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe = points.to_vec();
    for (p, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("parameter leaf gradient").clone();
        for j in 0..points[p].numel() {
            let orig = points[p].data()[j];
            probe[p].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[p].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
