//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted and backward is a single reverse sweep.
//! Handles ([`Var`]) are plain indices into the tape.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norms below this are clamped before row normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a strided temporal convolution over `[B*T*V, C]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub frames: usize,
    pub joints: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_frames(&self) -> usize {
        (self.frames + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

/// Per-column statistics of a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divided by the row count).
    pub var: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum { a: Var, axis: Option<usize> },
    Mean { a: Var, axis: Option<usize> },
    Softmax { a: Var, tau: f64 },
    L2Normalize { a: Var, norms: Vec<f64>, clamped: Vec<bool> },
    MeanCenter(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    TemporalConv { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    GraphMix { x: Var, adj: Tensor },
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a `requires_grad` leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    frozen_stops: Option<Vec<Tensor>>,
    stop_count: usize,
    stop_values: Vec<Tensor>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` calls return the given values in order
    /// instead of their inputs. Used by the finite-difference checker so that
    /// perturbations only travel along gradient-carrying paths.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Self {
            frozen_stops: Some(values),
            ..Self::default()
        }
    }

    /// Forward values produced by `stop_gradient` so far, in call order.
    pub fn stop_values(&self) -> &[Tensor] {
        &self.stop_values
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (br, bc) = self.value(b).dims2("matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{kb},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Adds a `[C]` bias to every row of a tensor whose last extent is `C`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = last_dim(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("multiply", value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("divide", a, b)?;
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::DivisionByZero("divide"));
        }
        let value = self.zip_with(a, b, |x, y| x / y);
        self.push("divide", value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::LogDomain("log"));
        }
        let value = self.value(a).map(f64::ln);
        self.push("log", value, Op::Log(a), &[a])
    }

    /// Sum over one axis, or over everything (scalar result) when `axis` is `None`.
    pub fn reduce_sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = self.reduce(a, axis, "reduce_sum", false)?;
        self.push("reduce_sum", value, Op::Sum { a, axis }, &[a])
    }

    pub fn reduce_mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = self.reduce(a, axis, "reduce_mean", true)?;
        self.push("reduce_mean", value, Op::Mean { a, axis }, &[a])
    }

    fn reduce(&self, a: Var, axis: Option<usize>, op: &'static str, mean: bool) -> Result<Tensor> {
        let t = self.value(a);
        match axis {
            None => {
                let s = t.sum();
                Ok(Tensor::scalar(if mean { s / t.numel() as f64 } else { s }))
            }
            Some(ax) => {
                if ax >= t.ndim() {
                    return Err(Error::shape(op, format!("axis {ax} of {:?}", t.shape())));
                }
                let (outer, n, inner) = axis_split(t.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                let d = t.data();
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|x| *x /= n as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, out)
            }
        }
    }

    /// Row-wise `softmax(x / tau)` along the last axis.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!("softmax temperature {tau} must be positive")));
        }
        let t = self.value(a);
        let c = last_dim(t.shape());
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row_in_place(row, tau);
        }
        self.push("softmax", out, Op::Softmax { a, tau }, &[a])
    }

    /// Divides each row (last axis) by its l2 norm, clamped below at [`NORM_EPS`].
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = last_dim(t.shape());
        let mut out = t.clone();
        let mut norms = Vec::new();
        let mut clamped = Vec::new();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let is_clamped = n < NORM_EPS;
            let n = if is_clamped { NORM_EPS } else { n };
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
            clamped.push(is_clamped);
        }
        self.push("l2_normalize_rows", out, Op::L2Normalize { a, norms, clamped }, &[a])
    }

    /// Subtracts the per-column mean over the rows of a 2-D tensor.
    pub fn mean_center_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("mean_center_rows")?;
        let mut out = self.value(a).clone();
        let means = column_means(out.data(), r, c);
        for row in out.data_mut().chunks_mut(c) {
            for (x, m) in row.iter_mut().zip(&means) {
                *x -= m;
            }
        }
        self.push("mean_center_rows", out, Op::MeanCenter(a), &[a])
    }

    /// Train-mode batch normalization over the rows of `[R, C]`.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (r, c) = self.value(x).dims2("batchnorm")?;
        self.check_affine("batchnorm", c, gamma, beta)?;
        let mean = column_means(self.value(x).data(), r, c);
        let mut var = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let stats = BatchStats { mean, var, rows: r };
        let v = self.push("batchnorm", value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c) = self.value(x).dims2("batchnorm_eval")?;
        self.check_affine("batchnorm_eval", c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm_eval", "running statistics width"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.affine_normalize(x, gamma, beta, mean, &inv_std);
        self.push(
            "batchnorm_eval",
            value,
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(op, format!("scale/shift must be [{c}]")));
        }
        Ok(())
    }

    fn affine_normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Tensor, Vec<f64>) {
        let c = mean.len();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (hrow, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                hrow[j] = (hrow[j] - mean[j]) * inv_std[j];
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        (value, xhat)
    }

    /// Strided temporal convolution with symmetric zero padding of `(K-1)/2`.
    ///
    /// `x` is `[B*T*V, Cin]` with rows ordered `(b, t, v)`, `w` is
    /// `[K*Cin, Cout]` with rows ordered `(k, cin)`; output is
    /// `[B*T'*V, Cout]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (rows, cin) = self.value(x).dims2("temporal_conv")?;
        let (wr, cout) = self.value(w).dims2("temporal_conv")?;
        if geom.kernel % 2 == 0 || geom.stride == 0 {
            return Err(Error::invalid("temporal kernel must be odd and stride positive"));
        }
        if rows != geom.batch * geom.frames * geom.joints || wr != geom.kernel * cin {
            return Err(Error::shape(
                "temporal_conv",
                format!("x [{rows},{cin}], w [{wr},{cout}], geometry {geom:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("temporal_conv", "bias width"));
            }
        }
        let t_out = geom.out_frames();
        let per_in = geom.frames * geom.joints * cin;
        let per_out = t_out * geom.joints * cout;
        let kc = geom.kernel * cin;
        let mut out = vec![0.0; geom.batch * per_out];
        let mut col = vec![0.0; t_out * geom.joints * kc];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for b in 0..geom.batch {
            im2col(&xd[b * per_in..(b + 1) * per_in], &mut col, &geom, cin);
            gemm(t_out * geom.joints, kc, cout, 1.0, &col, false, wd, false, 0.0, &mut out[b * per_out..(b + 1) * per_out]);
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new(vec![geom.batch * t_out * geom.joints, cout], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push("temporal_conv", value, Op::TemporalConv { x, w, bias, geom }, &parents)
    }

    /// Mixes joints within each group of `V` consecutive rows by a constant
    /// `V x V` matrix: `y[g, v] = sum_u adj[v, u] * x[g, u]`.
    pub fn graph_mix(&mut self, x: Var, adj: &Tensor) -> Result<Var> {
        let (rows, c) = self.value(x).dims2("graph_mix")?;
        let (v, v2) = adj.dims2("graph_mix")?;
        if v != v2 || rows % v != 0 {
            return Err(Error::shape("graph_mix", format!("x [{rows},{c}] with adjacency [{v},{v2}]")));
        }
        let mut out = vec![0.0; rows * c];
        let xd = self.value(x).data();
        for g in 0..rows / v {
            let s = g * v * c..(g + 1) * v * c;
            gemm(v, v, c, 1.0, adj.data(), false, &xd[s.clone()], false, 0.0, &mut out[s]);
        }
        let value = Tensor::new(vec![rows, c], out)?;
        self.push("graph_mix", value, Op::GraphMix { x, adj: adj.clone() }, &[x])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let value = Tensor::new(vec![c, r], transpose2(self.value(a).data(), r, c))?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Gathers slices along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.shape().first().copied().unwrap_or(1);
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("index_select", format!("indices out of range for extent {n}")));
        }
        let inner = t.numel() / n;
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        self.push("index_select", value, Op::IndexSelect { a, indices: indices.to_vec() }, &[a])
    }

    /// Forward identity that blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = match &self.frozen_stops {
            Some(frozen) => frozen
                .get(self.stop_count)
                .cloned()
                .ok_or_else(|| Error::invalid("frozen stop-gradient values exhausted"))?,
            None => self.value(a).clone(),
        };
        if value.shape() != self.shape(a) {
            return Err(Error::shape("stop_gradient", "frozen value shape"));
        }
        self.stop_count += 1;
        self.stop_values.push(value.clone());
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Every `requires_grad` leaf gets a
    /// gradient, zero when no gradient-carrying path reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], to: Var, contrib: Tensor) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let ta = self.value(a);
                let tb = self.value(b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = y.shape()[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    // da = g @ b^T (or g @ b when b was transposed)
                    gemm(m, n, k, 1.0, g.data(), false, tb.data(), !trans_b, 0.0, &mut da);
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(b) {
                    let shape = tb.shape().to_vec();
                    let mut db = vec![0.0; k * n];
                    if trans_b {
                        // db [n,k] = g^T @ a
                        gemm(n, m, k, 1.0, g.data(), true, ta.data(), false, 0.0, &mut db);
                    } else {
                        // db [k,n] = a^T @ g
                        gemm(k, m, n, 1.0, ta.data(), true, g.data(), false, 0.0, &mut db);
                    }
                    self.accumulate(grads, b, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let c = self.shape(*bias)[0];
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(db));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    self.accumulate(grads, a, zip(g, self.value(b), |gg, y| gg * y));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, zip(g, self.value(a), |gg, x| gg * x));
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let tb = self.value(b);
                if self.wants(a) {
                    self.accumulate(grads, a, zip(g, tb, |gg, d| gg / d));
                }
                if self.wants(b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = zip(g, y, |gg, q| gg * q);
                    self.accumulate(grads, b, zip(&t, tb, |t, d| -t / d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, zip(g, ta, |gg, x| if x > 0.0 { gg } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip(g, y, |gg, e| gg * e)),
            Op::Log(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, zip(g, ta, |gg, x| gg / x));
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*a).to_vec();
                let numel: usize = shape.iter().product();
                let d = match axis {
                    None => {
                        let v = if mean { g.item() / numel as f64 } else { g.item() };
                        Tensor::full(&shape, v)
                    }
                    Some(ax) => {
                        let (outer, n, inner) = axis_split(&shape, *ax);
                        let f = if mean { 1.0 / n as f64 } else { 1.0 };
                        let mut out = vec![0.0; numel];
                        for o in 0..outer {
                            let src = &g.data()[o * inner..(o + 1) * inner];
                            for j in 0..n {
                                let dst = &mut out[(o * n + j) * inner..(o * n + j + 1) * inner];
                                for (x, s) in dst.iter_mut().zip(src) {
                                    *x = s * f;
                                }
                            }
                        }
                        Tensor::new(shape, out).unwrap()
                    }
                };
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { a, tau } => {
                let c = last_dim(y.shape());
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dx, yy) in drow.iter_mut().zip(yrow) {
                        *dx = yy * (*dx - dot) / tau;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2Normalize { a, norms, clamped } => {
                let c = last_dim(y.shape());
                let mut d = g.clone();
                for (r, (drow, yrow)) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)).enumerate() {
                    let n = norms[r];
                    if clamped[r] {
                        drow.iter_mut().for_each(|x| *x /= n);
                    } else {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (dx, yy) in drow.iter_mut().zip(yrow) {
                            *dx = (*dx - yy * dot) / n;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanCenter(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let means = column_means(g.data(), r, c);
                let mut d = g.clone();
                for row in d.data_mut().chunks_mut(c) {
                    for (x, m) in row.iter_mut().zip(&means) {
                        *x -= m;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let (dgamma, dbeta) = affine_grads(g.data(), xhat, c);
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; r * c];
                    let rf = r as f64;
                    for ((drow, grow), hrow) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            drow[j] = gam[j] * inv_std[j] / rf * (rf * grow[j] - dbeta[j] - hrow[j] * dgamma[j]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![r, c], dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let c = y.shape()[1];
                let (dgamma, dbeta) = affine_grads(g.data(), xhat, c);
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(c) {
                        for j in 0..c {
                            row[j] *= gam[j] * inv_std[j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(dbeta));
            }
            Op::TemporalConv { x, w, bias, geom } => {
                let (x, w) = (*x, *w);
                let cin = self.shape(x)[1];
                let cout = y.shape()[1];
                let t_out = geom.out_frames();
                let out_rows = t_out * geom.joints;
                let kc = geom.kernel * cin;
                let per_in = geom.frames * geom.joints * cin;
                let per_out = out_rows * cout;
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let want_x = self.wants(x);
                let want_w = self.wants(w);
                let mut dw = vec![0.0; kc * cout];
                let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
                let mut col = vec![0.0; out_rows * kc];
                for b in 0..geom.batch {
                    let gb = &g.data()[b * per_out..(b + 1) * per_out];
                    if want_w {
                        im2col(&xd[b * per_in..(b + 1) * per_in], &mut col, geom, cin);
                        gemm(kc, out_rows, cout, 1.0, &col, true, gb, false, 1.0, &mut dw);
                    }
                    if want_x {
                        gemm(out_rows, cout, kc, 1.0, gb, false, wd, true, 0.0, &mut col);
                        col2im_add(&col, &mut dx[b * per_in..(b + 1) * per_in], geom, cin);
                    }
                }
                if want_x {
                    self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), dx).unwrap());
                }
                if want_w {
                    self.accumulate(grads, w, Tensor::new(self.shape(w).to_vec(), dw).unwrap());
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let mut db = vec![0.0; cout];
                        for row in g.data().chunks(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *bv, Tensor::from_vec(db));
                    }
                }
            }
            Op::GraphMix { x, adj } => {
                let v = adj.shape()[0];
                let c = y.shape()[1];
                let mut dx = vec![0.0; g.numel()];
                for grp in 0..y.shape()[0] / v {
                    let s = grp * v * c..(grp + 1) * v * c;
                    gemm(v, v, c, 1.0, adj.data(), true, &g.data()[s.clone()], false, 0.0, &mut dx[s]);
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(shape).unwrap());
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                self.accumulate(grads, *a, Tensor::new(vec![c, r], transpose2(g.data(), r, c)).unwrap());
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let n = shape[*axis];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + n * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(shape, d).unwrap());
                    }
                    offset += n;
                }
            }
            Op::IndexSelect { a, indices } => {
                let shape = self.shape(*a).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut d = vec![0.0; shape.iter().product()];
                for (k, &i) in indices.iter().enumerate() {
                    for (x, s) in d[i * inner..(i + 1) * inner].iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                        *x += s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, d).unwrap());
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn affine_grads(g: &[f64], xhat: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            dgamma[j] += grow[j] * hrow[j];
            dbeta[j] += grow[j];
        }
    }
    (dgamma, dbeta)
}

pub(crate) fn column_means(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut means = vec![0.0; c];
    for row in data.chunks(c) {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= r as f64);
    means
}

/// Max-subtracted `softmax(row / tau)` in place.
pub(crate) fn softmax_row_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / tau).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn transpose2(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

/// Source frame for output frame `to` and tap `k`, if inside the sequence.
fn source_frame(geom: &ConvGeom, to: usize, k: usize) -> Option<usize> {
    let t = (to * geom.stride + k) as isize - geom.pad() as isize;
    (t >= 0 && (t as usize) < geom.frames).then_some(t as usize)
}

fn im2col(x: &[f64], col: &mut [f64], geom: &ConvGeom, cin: usize) {
    let kc = geom.kernel * cin;
    for to in 0..geom.out_frames() {
        for v in 0..geom.joints {
            let row = &mut col[(to * geom.joints + v) * kc..(to * geom.joints + v + 1) * kc];
            for k in 0..geom.kernel {
                let dst = &mut row[k * cin..(k + 1) * cin];
                match source_frame(geom, to, k) {
                    Some(t) => {
                        let s = (t * geom.joints + v) * cin;
                        dst.copy_from_slice(&x[s..s + cin]);
                    }
                    None => dst.fill(0.0),
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], dx: &mut [f64], geom: &ConvGeom, cin: usize) {
    let kc = geom.kernel * cin;
    for to in 0..geom.out_frames() {
        for v in 0..geom.joints {
            let row = &col[(to * geom.joints + v) * kc..(to * geom.joints + v + 1) * kc];
            for k in 0..geom.kernel {
                if let Some(t) = source_frame(geom, to, k) {
                    let s = (t * geom.joints + v) * cin;
                    for (d, c) in dx[s..s + cin].iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                        *d += c;
                    }
                }
            }
        }
    }
}
