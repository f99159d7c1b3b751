//! Siamese spatio-temporal graph encoder with projection and prediction heads.
//!
//! Features flow as `[B*T*V, C]` row matrices with rows ordered `(b, t, v)`.
//! Each encoder block computes
//! `temporal_conv(relu(batchnorm(A · X · W)))`, and a global average over
//! frames and joints yields the representation `h`. The projector `g` and the
//! predictor `p` are both `linear -> batchnorm -> relu -> linear`.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, ConvGeom, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{GraphAdjacency, SkeletonSequence};

pub use checkpoint::{Checkpoint, Precision, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output width of each block; the last one is the feature dim of `h`.
    pub widths: Vec<usize>,
    /// Temporal stride of each block.
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
    pub adjacency: GraphAdjacency,
}

impl EncoderConfig {
    pub fn num_blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated encoder has a block")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.strides.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} strides for {} blocks",
                self.strides.len(),
                self.widths.len()
            )));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel {} must be odd", self.temporal_kernel)));
        }
        if self.in_channels == 0 || self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("channel widths and strides must be positive".into()));
        }
        Ok(())
    }

    /// Frames left after every strided block.
    pub fn output_frames(&self, frames: usize) -> usize {
        let pad = (self.temporal_kernel - 1) / 2;
        self.strides.iter().fold(frames, |t, s| (t + 2 * pad - self.temporal_kernel) / s + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub bn_eps: f64,
    /// Weight of the old value in running batchnorm statistics.
    pub bn_momentum: f64,
}

/// Model hyperparameters without the dataset-dependent adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            temporal_kernel: 9,
            projector_hidden: 128,
            projector_out: 32,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl Architecture {
    /// Nine blocks as in ST-GCN: 64, 64, 64, 64, 128, 128, 128, 256, 256 with
    /// stride 2 entering each wider stage; 512-wide hidden and 128-d output heads.
    pub fn paper() -> Self {
        Self {
            widths: vec![64, 64, 64, 64, 128, 128, 128, 256, 256],
            strides: vec![1, 1, 1, 1, 2, 1, 1, 2, 1],
            projector_hidden: 512,
            projector_out: 128,
            ..Self::default()
        }
    }

    pub fn build(&self, adjacency: GraphAdjacency) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                in_channels: self.in_channels,
                widths: self.widths.clone(),
                strides: self.strides.clone(),
                temporal_kernel: self.temporal_kernel,
                adjacency,
            },
            projector_hidden: self.projector_hidden,
            projector_out: self.projector_out,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ModelConfig {
    pub fn desk(adjacency: GraphAdjacency) -> Self {
        Architecture::default().build(adjacency).expect("desk architecture is valid")
    }

    pub fn paper(adjacency: GraphAdjacency) -> Self {
        Architecture::paper().build(adjacency).expect("paper architecture is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projector_hidden == 0 || self.projector_out == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    ///
    /// Block `i` with widths `c_in -> c`: spatial weight `c_in*c`, batchnorm
    /// `2c`, temporal weight `K*c*c` and bias `c`. Each head with input `d`,
    /// hidden `H` and output `O`: `d*H + H + 2H + H*O + O`. The projector's
    /// input is the feature dim, the predictor's is `O`.
    pub fn parameter_count(&self) -> usize {
        let e = &self.encoder;
        let k = e.temporal_kernel;
        let mut cin = e.in_channels;
        let mut n = 0;
        for &c in &e.widths {
            n += cin * c + 2 * c + k * c * c + c;
            cin = c;
        }
        let (h, o) = (self.projector_hidden, self.projector_out);
        let head = |d: usize| d * h + h + 2 * h + h * o + o;
        n + head(e.feature_dim()) + head(o)
    }
}

/// Running batchnorm statistics for eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    spatial: usize,
    gamma: usize,
    beta: usize,
    conv: usize,
    conv_bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadSlots {
    fc1: usize,
    fc1_bias: usize,
    gamma: usize,
    beta: usize,
    fc2: usize,
    fc2_bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<BlockSlots>,
    projector: HeadSlots,
    predictor: HeadSlots,
    encoder_params: usize,
}

/// Parameters in a fixed order plus one [`RunningStats`] per batchnorm layer
/// (encoder blocks, then projector, then predictor).
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
    pub running: Vec<RunningStats>,
    layout: Layout,
}

struct Builder<'r> {
    names: Vec<String>,
    values: Vec<Tensor>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    fn weight(&mut self, name: String, fan_in: usize, cols: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name, Tensor::new(vec![fan_in, cols], data).expect("positive extents"))
    }

    fn head(&mut self, prefix: &str, d: usize, h: usize, o: usize) -> HeadSlots {
        HeadSlots {
            fc1: self.weight(format!("{prefix}.fc1.weight"), d, h),
            fc1_bias: self.push(format!("{prefix}.fc1.bias"), Tensor::zeros(&[h])),
            gamma: self.push(format!("{prefix}.bn.gamma"), Tensor::full(&[h], 1.0)),
            beta: self.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[h])),
            fc2: self.weight(format!("{prefix}.fc2.weight"), h, o),
            fc2_bias: self.push(format!("{prefix}.fc2.bias"), Tensor::zeros(&[o])),
        }
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng: &mut rng,
        };
        let e = &config.encoder;
        let k = e.temporal_kernel;
        let mut cin = e.in_channels;
        let mut blocks = Vec::with_capacity(e.num_blocks());
        let mut running = Vec::new();
        for (i, &c) in e.widths.iter().enumerate() {
            blocks.push(BlockSlots {
                spatial: b.weight(format!("encoder.block{i}.spatial.weight"), cin, c),
                gamma: b.push(format!("encoder.block{i}.bn.gamma"), Tensor::full(&[c], 1.0)),
                beta: b.push(format!("encoder.block{i}.bn.beta"), Tensor::zeros(&[c])),
                conv: b.weight(format!("encoder.block{i}.temporal.weight"), k * c, c),
                conv_bias: b.push(format!("encoder.block{i}.temporal.bias"), Tensor::zeros(&[c])),
            });
            running.push(fresh_stats(c));
            cin = c;
        }
        let encoder_params = b.values.len();
        let (h, o) = (config.projector_hidden, config.projector_out);
        let projector = b.head("projector", e.feature_dim(), h, o);
        let predictor = b.head("predictor", o, h, o);
        running.push(fresh_stats(h));
        running.push(fresh_stats(h));
        let (names, values) = (b.names, b.values);
        Ok(Self {
            config,
            names,
            values,
            running,
            layout: Layout {
                blocks,
                projector,
                predictor,
                encoder_params,
            },
        })
    }

    /// Parameters belonging to the encoder, in storage order.
    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        0..self.layout.encoder_params
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn running_names(&self, i: usize) -> String {
        let blocks = self.layout.blocks.len();
        if i < blocks {
            format!("encoder.block{i}.bn")
        } else if i == blocks {
            "projector.bn".into()
        } else {
            "predictor.bn".into()
        }
    }

    /// Adds every parameter to `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| if trainable { graph.param(v.clone()) } else { graph.constant(v.clone()) })
            .collect()
    }

    /// Folds train-mode batch statistics into the running estimates, using the
    /// unbiased variance.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (i, s) in stats {
            let r = &mut self.running[*i];
            let unbias = if s.rows > 1 { s.rows as f64 / (s.rows - 1) as f64 } else { 1.0 };
            for j in 0..r.mean.len() {
                r.mean[j] = m * r.mean[j] + (1.0 - m) * s.mean[j];
                r.var[j] = m * r.var[j] + (1.0 - m) * s.var[j] * unbias;
            }
        }
    }

    /// `self = momentum * self + (1 - momentum) * online`; running statistics
    /// are copied from `online`.
    pub fn ema_update(&mut self, online: &ModelParams, momentum: f64) {
        for (t, s) in self.values.iter_mut().zip(&online.values) {
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = momentum * *a + (1.0 - momentum) * b;
            }
        }
        self.running.clone_from(&online.running);
    }

    pub fn to_checkpoint(&self, config_json: String, precision: Precision) -> Checkpoint {
        let mut ck = Checkpoint {
            config_json,
            records: Vec::new(),
        };
        self.append_records(&mut ck, "", precision);
        ck
    }

    /// Writes parameters and running statistics with names prefixed by `prefix`.
    pub fn append_records(&self, ck: &mut Checkpoint, prefix: &str, precision: Precision) {
        for (n, v) in self.names.iter().zip(&self.values) {
            ck.push(format!("{prefix}{n}"), v.clone(), precision);
        }
        for (i, r) in self.running.iter().enumerate() {
            let base = self.running_names(i);
            ck.push(format!("{prefix}{base}.running_mean"), Tensor::from_vec(r.mean.clone()), precision);
            ck.push(format!("{prefix}{base}.running_var"), Tensor::from_vec(r.var.clone()), precision);
        }
    }

    /// Restores values for `config` from records named with `prefix`.
    pub fn from_records(config: ModelConfig, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for (n, v) in p.names.iter().zip(p.values.iter_mut()) {
            let t = ck.require(&format!("{prefix}{n}"))?;
            if t.shape() != v.shape() {
                return Err(Error::Format(format!("record {n:?} has shape {:?}, expected {:?}", t.shape(), v.shape())));
            }
            *v = t.clone();
        }
        for i in 0..p.running.len() {
            let base = p.running_names(i);
            let width = p.running[i].mean.len();
            let mean = ck.require(&format!("{prefix}{base}.running_mean"))?;
            let var = ck.require(&format!("{prefix}{base}.running_var"))?;
            if mean.numel() != width || var.numel() != width {
                return Err(Error::Format(format!("running statistics of {base} have the wrong width")));
            }
            p.running[i] = RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            };
        }
        Ok(p)
    }

    /// Reads a checkpoint whose config echo is either a model config or an
    /// object with a `model` field.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        let model = value.get("model").cloned().unwrap_or(value);
        let config: ModelConfig = serde_json::from_value(model)?;
        Self::from_records(config, ck, "")
    }
}

fn fresh_stats(c: usize) -> RunningStats {
    RunningStats {
        mean: vec![0.0; c],
        var: vec![1.0; c],
    }
}

/// Stacks sequences into `[B*T*V, C]` rows ordered `(b, t, v)`.
pub fn batch_rows(seqs: &[SkeletonSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (c, t, v) = (first.channels(), first.frames(), first.joints());
    let mut out = Vec::with_capacity(seqs.len() * c * t * v);
    for s in seqs {
        if s.tensor().shape() != first.tensor().shape() {
            return Err(Error::shape("batch_rows", format!("{:?} vs {:?}", s.tensor().shape(), first.tensor().shape())));
        }
        let d = s.tensor().data();
        for f in 0..t {
            for j in 0..v {
                for ch in 0..c {
                    out.push(d[(ch * t + f) * v + j]);
                }
            }
        }
    }
    Tensor::new(vec![seqs.len() * t * v, c], out)
}

/// One forward pass over bound parameters. Train-mode batchnorm statistics
/// are collected in `stats` for [`ModelParams::update_running`].
pub struct Forward<'a> {
    params: &'a ModelParams,
    vars: &'a [Var],
    mode: Mode,
    pub stats: Vec<(usize, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ModelParams, vars: &'a [Var], mode: Mode) -> Self {
        assert_eq!(vars.len(), params.values.len(), "vars must come from ModelParams::bind");
        Self {
            params,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    fn batchnorm(&mut self, g: &mut Graph, x: Var, gamma: usize, beta: usize, layer: usize) -> Result<Var> {
        let eps = self.params.config.bn_eps;
        let (gv, bv) = (self.vars[gamma], self.vars[beta]);
        match self.mode {
            Mode::Train => {
                let (y, s) = g.batchnorm_train(x, gv, bv, eps)?;
                self.stats.push((layer, s));
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.params.running[layer];
                g.batchnorm_eval(x, gv, bv, &r.mean, &r.var, eps)
            }
        }
    }

    /// Encodes `[B*T*V, C]` rows of `batch` clips with `frames` frames into
    /// `h: [B, feature_dim]`.
    pub fn encode(&mut self, g: &mut Graph, x: Var, batch: usize, frames: usize) -> Result<Var> {
        let feats = self.encode_features(g, x, batch, frames)?;
        let (rows, c) = g.value(feats).dims2("encode")?;
        let grouped = g.reshape(feats, vec![batch, rows / batch, c])?;
        g.reduce_mean(grouped, Some(1))
    }

    /// Last block output `[B*T'*V, feature_dim]` before pooling.
    pub fn encode_features(&mut self, g: &mut Graph, x: Var, batch: usize, frames: usize) -> Result<Var> {
        let cfg = &self.params.config.encoder;
        let adj = cfg.adjacency.normalized();
        let v = cfg.adjacency.joints;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != batch * frames * v || shape[1] != cfg.in_channels {
            return Err(Error::shape(
                "encode",
                format!("input {shape:?} does not match batch {batch}, {frames} frames, {v} joints, {} channels", cfg.in_channels),
            ));
        }
        let mut feats = x;
        let mut t = frames;
        let mut cin = cfg.in_channels;
        for (i, slots) in self.params.layout.blocks.clone().iter().enumerate() {
            let cout = cfg.widths[i];
            let w = self.vars[slots.spatial];
            // mix on the narrower side of the weight
            let spatial = if cin <= cout {
                let mixed = g.graph_mix(feats, adj)?;
                g.matmul(mixed, w)?
            } else {
                let y = g.matmul(feats, w)?;
                g.graph_mix(y, adj)?
            };
            let normed = self.batchnorm(g, spatial, slots.gamma, slots.beta, i)?;
            let act = g.relu(normed)?;
            let geom = ConvGeom {
                batch,
                frames: t,
                joints: v,
                kernel: cfg.temporal_kernel,
                stride: cfg.strides[i],
            };
            feats = g.temporal_conv(act, self.vars[slots.conv], Some(self.vars[slots.conv_bias]), geom)?;
            t = geom.out_frames();
            cin = cout;
        }
        Ok(feats)
    }

    fn head(&mut self, g: &mut Graph, x: Var, s: HeadSlots, layer: usize) -> Result<Var> {
        let a = g.matmul(x, self.vars[s.fc1])?;
        let a = g.add_bias(a, self.vars[s.fc1_bias])?;
        let a = self.batchnorm(g, a, s.gamma, s.beta, layer)?;
        let a = g.relu(a)?;
        let a = g.matmul(a, self.vars[s.fc2])?;
        g.add_bias(a, self.vars[s.fc2_bias])
    }

    pub fn project(&mut self, g: &mut Graph, h: Var) -> Result<Var> {
        let layer = self.params.layout.blocks.len();
        self.head(g, h, self.params.layout.projector, layer)
    }

    pub fn predict(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        let layer = self.params.layout.blocks.len() + 1;
        self.head(g, z, self.params.layout.predictor, layer)
    }

    pub fn embed(&mut self, g: &mut Graph, x: Var, batch: usize, frames: usize) -> Result<Var> {
        let h = self.encode(g, x, batch, frames)?;
        self.project(g, h)
    }
}

/// Student predictions paired with stop-gradient targets.
#[derive(Clone, Debug)]
pub struct ViewPairs {
    /// `(p(z1), sg(z2'))`, then `(p(z2), sg(z1'))` when symmetrized.
    pub pairs: Vec<(Var, Var)>,
    /// Train-mode statistics of the online parameters.
    pub stats: Vec<(usize, BatchStats)>,
}

/// Input rows of two augmented views of the same clips.
#[derive(Clone, Copy, Debug)]
pub struct ViewBatch<'t> {
    pub first: &'t Tensor,
    pub second: &'t Tensor,
    pub batch: usize,
    pub frames: usize,
}

/// Runs both branches. With no `target`, the target branch reuses the online
/// parameters behind a stop-gradient; otherwise it runs on `target`, bound as
/// constants.
pub fn forward_views(
    g: &mut Graph,
    online: (&ModelParams, &[Var]),
    target: Option<(&ModelParams, &[Var])>,
    views: ViewBatch<'_>,
    mode: Mode,
    symmetric: bool,
) -> Result<ViewPairs> {
    let (batch, frames) = (views.batch, views.frames);
    let x1 = g.constant(views.first.clone());
    let x2 = g.constant(views.second.clone());
    let mut fwd = Forward::new(online.0, online.1, mode);
    let z1 = fwd.embed(g, x1, batch, frames)?;
    let p1 = fwd.predict(g, z1)?;
    let (t1, t2, p2) = match target {
        None => {
            let z2 = fwd.embed(g, x2, batch, frames)?;
            let p2 = symmetric.then(|| fwd.predict(g, z2)).transpose()?;
            (g.stop_gradient(z1)?, g.stop_gradient(z2)?, p2)
        }
        Some((tp, tv)) => {
            let p2 = if symmetric {
                let z2 = fwd.embed(g, x2, batch, frames)?;
                Some(fwd.predict(g, z2)?)
            } else {
                None
            };
            let mut tf = Forward::new(tp, tv, mode);
            let z2t = tf.embed(g, x2, batch, frames)?;
            let z1t = if symmetric { tf.embed(g, x1, batch, frames)? } else { z2t };
            (g.stop_gradient(z1t)?, g.stop_gradient(z2t)?, p2)
        }
    };
    let mut pairs = vec![(p1, t2)];
    if let Some(p2) = p2 {
        pairs.push((p2, t1));
    }
    Ok(ViewPairs { pairs, stats: fwd.stats })
}
