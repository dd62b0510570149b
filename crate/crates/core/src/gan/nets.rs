use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::GanError;
use crate::image::Image;
use crate::numeric::{Graph, NormMode, Tensor, TensorError, Var};

pub const LEAKY_SLOPE: f32 = 0.2;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
const INIT_STD: f32 = 0.02;

/// Whether batch norm uses batch statistics or the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormParams {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], 1.0).with_requires_grad(true),
            beta: Tensor::zeros(&[c]).with_requires_grad(true),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    fn update_running(&mut self, mean: &[f32], var: &[f32]) {
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Stride-2, pad-1, 4×4 (transposed) convolution with optional bias or
/// batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNormParams>,
    pub transpose: bool,
}

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

impl ConvLayer {
    fn new<R: Rng>(c_in: usize, c_out: usize, transpose: bool, bn: bool, rng: &mut R) -> Self {
        let shape = if transpose {
            [c_in, c_out, KERNEL, KERNEL]
        } else {
            [c_out, c_in, KERNEL, KERNEL]
        };
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            kernel: Tensor::new(&shape, data)
                .expect("shape matches")
                .with_requires_grad(true),
            bias: (!bn).then(|| Tensor::zeros(&[c_out]).with_requires_grad(true)),
            bn: bn.then(|| BatchNormParams::new(c_out)),
            transpose,
        }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.kernel.shape();
        if self.transpose {
            s[1]
        } else {
            s[0]
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.kernel];
        v.extend(self.bias.as_ref());
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.kernel];
        v.extend(self.bias.as_mut());
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    /// Convolution, then bias or batch norm; no activation.
    fn apply(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        phase: Phase,
        trace: &mut Trace,
    ) -> Result<Var, TensorError> {
        let k = param_leaf(g, &self.kernel, trainable, trace)?;
        let mut y = if self.transpose {
            g.conv2d_transpose(x, k, STRIDE, PAD)?
        } else {
            g.conv2d(x, k, STRIDE, PAD)?
        };
        if let Some(b) = &self.bias {
            let b = param_leaf(g, b, trainable, trace)?;
            y = g.add_channel_bias(y, b)?;
        }
        if let Some(bn) = &self.bn {
            let gamma = param_leaf(g, &bn.gamma, trainable, trace)?;
            let beta = param_leaf(g, &bn.beta, trainable, trace)?;
            let mode = match phase {
                Phase::Train => NormMode::Batch,
                Phase::Eval => NormMode::Fixed {
                    mean: bn.running_mean.clone(),
                    var: bn.running_var.clone(),
                },
            };
            y = g.batch_norm(y, gamma, beta, &mode, BN_EPS)?;
            trace.bn_outputs.push(y);
        }
        Ok(y)
    }
}

/// Graph handles produced by one forward pass, in parameter order.
#[derive(Debug, Default)]
pub struct Trace {
    pub params: Vec<Var>,
    pub bn_outputs: Vec<Var>,
}

fn param_leaf(g: &mut Graph, t: &Tensor, trainable: bool, trace: &mut Trace) -> Result<Var, TensorError> {
    let v = if trainable {
        g.leaf(&t.clone().with_requires_grad(true))
    } else {
        g.constant(t.shape(), t.data().to_vec())?
    };
    trace.params.push(v);
    Ok(v)
}

fn bn_layers_mut<'a>(layers: impl Iterator<Item = &'a mut ConvLayer>) -> Vec<&'a mut BatchNormParams> {
    layers.filter_map(|l| l.bn.as_mut()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub base_channels: usize,
    /// 0 disables semantic injection.
    pub semantic_dim: usize,
}

impl GeneratorSpec {
    pub fn depth(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    /// Channels after encoder level `i` (1-based).
    pub fn channels(&self, i: usize) -> usize {
        (self.base_channels << (i - 1).min(3)).min(8 * self.base_channels)
    }

    fn validate(&self) -> Result<(), GanError> {
        if self.image_size < 2 || !self.image_size.is_power_of_two() {
            return Err(GanError::Config(format!(
                "generator size {} must be a power of two ≥ 2",
                self.image_size
            )));
        }
        if self.base_channels == 0 {
            return Err(GanError::Config("base channels must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder–decoder with level-wise skips and a 1×1 bottleneck where the
/// semantic vector is concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
}

impl Generator {
    pub fn new<R: Rng>(spec: GeneratorSpec, rng: &mut R) -> Result<Self, GanError> {
        spec.validate()?;
        let d = spec.depth();
        let mut encoder = Vec::with_capacity(d);
        for i in 1..=d {
            let c_in = if i == 1 { 1 } else { spec.channels(i - 1) };
            encoder.push(ConvLayer::new(c_in, spec.channels(i), false, i > 1, rng));
        }
        let mut decoder = Vec::with_capacity(d);
        for j in 1..=d {
            let c_in = if j == 1 {
                spec.channels(d) + spec.semantic_dim
            } else {
                2 * spec.channels(d - j + 1)
            };
            let last = j == d;
            let c_out = if last { 1 } else { spec.channels(d - j) };
            decoder.push(ConvLayer::new(c_in, c_out, true, !last, rng));
        }
        Ok(Self { spec, encoder, decoder })
    }

    pub fn from_parts(spec: GeneratorSpec, encoder: Vec<ConvLayer>, decoder: Vec<ConvLayer>) -> Self {
        Self { spec, encoder, decoder }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn bn_params_mut(&mut self) -> Vec<&mut BatchNormParams> {
        bn_layers_mut(self.encoder.iter_mut().chain(self.decoder.iter_mut()))
    }

    /// `shape` is `[n, 1, S, S]`, `semantic` is `[n, s, 1, 1]` (omitted when
    /// `semantic_dim` is 0). Output is `[n, 1, S, S]` in `[0, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        shape: Var,
        semantic: Option<Var>,
        trainable: bool,
        phase: Phase,
    ) -> Result<(Var, Trace), GanError> {
        let mut trace = Trace::default();
        let s = self.spec.image_size;
        match g.shape(shape) {
            [_, 1, h, w] if *h == s && *w == s => {}
            other => {
                return Err(GanError::Shape(format!(
                    "generator input {other:?}, expected [n, 1, {s}, {s}]"
                )));
            }
        }
        match (semantic, self.spec.semantic_dim) {
            (None, 0) => {}
            (Some(v), dim) if dim > 0 && g.shape(v)[1..] == [dim, 1, 1] => {}
            (sem, dim) => {
                return Err(GanError::Shape(format!(
                    "semantic input {:?} for semantic_dim {dim}",
                    sem.map(|v| g.shape(v).to_vec())
                )));
            }
        }
        let mut skips = Vec::with_capacity(self.depth());
        let mut x = shape;
        for layer in &self.encoder {
            let y = layer.apply(g, x, trainable, phase, &mut trace)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
            skips.push(x);
        }
        if let Some(sem) = semantic {
            x = g.concat_channels(&[x, sem])?;
        }
        let d = self.depth();
        for (j, layer) in self.decoder.iter().enumerate() {
            if j > 0 {
                x = g.concat_channels(&[x, skips[d - 1 - j]])?;
            }
            let y = layer.apply(g, x, trainable, phase, &mut trace)?;
            x = if j + 1 == d {
                let t = g.tanh(y);
                g.affine(t, 0.5, 0.5)
            } else {
                g.leaky_relu(y, LEAKY_SLOPE)
            };
        }
        Ok((x, trace))
    }

    /// Inference on a batch of shape images and semantic vectors.
    pub fn generate(&self, shapes: &[&Image], semantics: &[&[f32]]) -> Result<Vec<Image>, GanError> {
        if shapes.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (x, sem) = batch_inputs(&mut g, shapes, semantics, self.spec.semantic_dim, self.spec.image_size)?;
        let (out, _) = self.forward(&mut g, x, sem, false, Phase::Eval)?;
        let s = self.spec.image_size;
        Ok(g.value(out)
            .chunks(s * s)
            .map(|c| Image::square(s, c.to_vec()).expect("size matches"))
            .collect())
    }
}

/// Stacks images into `[n, 1, S, S]` and semantic vectors into `[n, s, 1, 1]`.
pub fn batch_inputs(
    g: &mut Graph,
    shapes: &[&Image],
    semantics: &[&[f32]],
    semantic_dim: usize,
    size: usize,
) -> Result<(Var, Option<Var>), GanError> {
    let n = shapes.len();
    let mut data = Vec::with_capacity(n * size * size);
    for im in shapes {
        if !im.is_square() || im.size() != size {
            return Err(GanError::Shape(format!(
                "image {}×{} for generator of size {size}",
                im.width(),
                im.height()
            )));
        }
        data.extend_from_slice(im.pixels());
    }
    let x = g.constant(&[n, 1, size, size], data)?;
    if semantic_dim == 0 {
        return Ok((x, None));
    }
    if semantics.len() != n || semantics.iter().any(|s| s.len() != semantic_dim) {
        return Err(GanError::Shape(format!(
            "{} semantic vectors for {n} shapes (dimension {semantic_dim})",
            semantics.len()
        )));
    }
    let sem = g.constant(&[n, semantic_dim, 1, 1], semantics.concat())?;
    Ok((x, Some(sem)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub image_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 layers; `log2(S)` gives a single global score.
    pub layers: usize,
}

/// Scores `(shape, image)` pairs on a patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    pub layers: Vec<ConvLayer>,
}

impl Discriminator {
    pub fn new<R: Rng>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Self, GanError> {
        let max = spec.image_size.trailing_zeros() as usize;
        if spec.layers < 2 || spec.layers > max || spec.base_channels == 0 {
            return Err(GanError::Config(format!(
                "discriminator needs 2..={max} layers and positive width, got {} layers",
                spec.layers
            )));
        }
        let b = spec.base_channels;
        let width = |i: usize| (b << (i - 1).min(3)).min(8 * b);
        let mut layers = Vec::with_capacity(spec.layers);
        for i in 1..=spec.layers {
            let c_in = if i == 1 { 2 } else { width(i - 1) };
            let last = i == spec.layers;
            let c_out = if last { 1 } else { width(i) };
            layers.push(ConvLayer::new(c_in, c_out, false, i > 1 && !last, rng));
        }
        Ok(Self { spec, layers })
    }

    pub fn from_parts(spec: DiscriminatorSpec, layers: Vec<ConvLayer>) -> Self {
        Self { spec, layers }
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn bn_params_mut(&mut self) -> Vec<&mut BatchNormParams> {
        bn_layers_mut(self.layers.iter_mut())
    }

    /// `shape` and `image` are `[n, 1, S, S]`; returns sigmoid scores
    /// `[n, 1, S/2^L, S/2^L]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        shape: Var,
        image: Var,
        trainable: bool,
        phase: Phase,
    ) -> Result<(Var, Trace), GanError> {
        let mut trace = Trace::default();
        let mut x = g.concat_channels(&[shape, image])?;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.apply(g, x, trainable, phase, &mut trace)?;
            x = if i + 1 == n {
                g.sigmoid(y)
            } else {
                g.leaky_relu(y, LEAKY_SLOPE)
            };
        }
        Ok((x, trace))
    }
}

/// Folds the batch statistics seen in `trace` into the running estimates.
pub fn update_running_stats(g: &Graph, trace: &Trace, bns: Vec<&mut BatchNormParams>) {
    for (bn, &v) in bns.into_iter().zip(&trace.bn_outputs) {
        if let Some(stats) = g.batch_stats(v) {
            bn.update_running(&stats.mean, &stats.var);
        }
    }
}
