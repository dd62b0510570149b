//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node holding its forward value. Nodes are
//! appended after their inputs, so walking the tape backwards is a valid
//! topological order. A graph supports one backward pass; build a fresh one
//! per step.

use super::conv::{
    batch_dims, conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, transpose_geom, ConvGeom,
};
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{leaky_relu, sigmoid, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch normalization obtains its statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Statistics of the current batch.
    Batch,
    /// Fixed per-channel statistics (inference).
    Fixed { mean: Vec<f32>, var: Vec<f32> },
}

/// Per-channel batch statistics observed by a batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f32),
    Abs(usize),
    LogClamped(usize, f32),
    LeakyRelu(usize, f32),
    Tanh(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize, [usize; 3]),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        n: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        k: usize,
        n: usize,
        geom: ConvGeom,
    },
    ConcatChannels(Vec<usize>),
    Reshape(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf; gradients flow into it iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::Dimension(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    /// Copies a node out as a tensor, carrying its gradient if populated.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(&node.shape, node.value.clone())
            .expect("node shape matches its value")
            .with_requires_grad(node.requires_grad);
        if let Some(g) = &node.grad {
            t.set_grad(g.clone()).expect("grad matches node shape");
        }
        t
    }

    /// Statistics used by a batch-norm node in batch mode.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean, var, batch: true, ..
            } => Some(BatchStats {
                mean: mean.iter().map(|&m| m as f32).collect(),
                var: var.iter().map(|&v| v as f32).collect(),
            }),
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var, TensorError> {
        self.same_shape(a, b, what)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.nodes[a.0].shape.clone(), value, rg, op)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a.0, scale))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a.0))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f32) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::LogClamped(a.0, floor))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, |x| leaky_relu(x, slope), Op::LeakyRelu(a.0, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![1], vec![s as f32], rg, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a.0]);
        self.push(vec![1], vec![(s / n) as f32], rg, Op::Mean(a.0))
    }

    /// `[n, k] · [k, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (n, k, m) = match (sa.as_slice(), sb.as_slice()) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            _ => {
                return Err(TensorError::Dimension(format!("matmul of {sa:?} and {sb:?}")));
            }
        };
        let mut out = vec![0f32; n * m];
        gemm_nn(n, k, m, &self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul(a.0, b.0, [n, k, m])))
    }

    /// `[n, m] + [m]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let m = match self.nodes[a.0].shape.as_slice() {
            [_, m] => *m,
            s => return Err(TensorError::Dimension(format!("add_row_bias on {s:?}"))),
        };
        if self.nodes[bias.0].shape != [m] {
            return Err(TensorError::Dimension(format!(
                "bias {:?} for rows of {m}",
                self.nodes[bias.0].shape
            )));
        }
        let b = &self.nodes[bias.0].value;
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % m])
            .collect();
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::AddRowBias(a.0, bias.0)))
    }

    /// `[n, c, h, w] + [c]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, c, h, w) = batch_dims(&self.nodes[a.0].shape)?;
        if self.nodes[bias.0].shape != [c] {
            return Err(TensorError::Dimension(format!(
                "bias {:?} for {c} channels",
                self.nodes[bias.0].shape
            )));
        }
        let plane = h * w;
        let b = &self.nodes[bias.0].value;
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[(i / plane) % c])
            .collect();
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            value,
            rg,
            Op::AddChannelBias(a.0, bias.0),
        ))
    }

    /// Cross-correlation; `x` is `[n, c_in, h, w]`, `k` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (n, c, h, w) = batch_dims(&self.nodes[x.0].shape)?;
        let (c_out, c_in, kh, kw) = match self.nodes[k.0].shape.as_slice() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(TensorError::Dimension(format!("kernel shape {s:?}"))),
        };
        if c != c_in {
            return Err(TensorError::Dimension(format!(
                "conv input has {c} channels, kernel expects {c_in}"
            )));
        }
        let geom = ConvGeom::new(c_in, h, w, c_out, kh, kw, stride, pad)?;
        let out = conv_forward(&self.nodes[x.0].value, &self.nodes[k.0].value, n, &geom);
        let rg = self.rg(&[x.0, k.0]);
        Ok(self.push(
            vec![n, c_out, geom.h_out, geom.w_out],
            out,
            rg,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                n,
                geom,
            },
        ))
    }

    /// Transposed convolution; `k` is `[c_in, c_out, kh, kw]`.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (n, c, h, w) = batch_dims(&self.nodes[x.0].shape)?;
        let (c_in, c_out, kh, kw) = match self.nodes[k.0].shape.as_slice() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(TensorError::Dimension(format!("kernel shape {s:?}"))),
        };
        if c != c_in {
            return Err(TensorError::Dimension(format!(
                "transposed conv input has {c} channels, kernel expects {c_in}"
            )));
        }
        let geom = transpose_geom(c_in, h, w, c_out, kh, kw, stride, pad)?;
        let out = conv_transpose_forward(&self.nodes[x.0].value, &self.nodes[k.0].value, n, &geom);
        let rg = self.rg(&[x.0, k.0]);
        Ok(self.push(
            vec![n, c_out, geom.h, geom.w],
            out,
            rg,
            Op::ConvTranspose2d {
                x: x.0,
                k: k.0,
                n,
                geom,
            },
        ))
    }

    /// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat of nothing".into()));
        }
        let (n, _, h, w) = batch_dims(&self.nodes[parts[0].0].shape)?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = batch_dims(&self.nodes[p.0].shape)?;
            if (pn, ph, pw) != (n, h, w) || self.nodes[p.0].shape.len() != 4 {
                return Err(TensorError::Dimension(format!(
                    "concat of {:?} with {:?}",
                    self.nodes[parts[0].0].shape, self.nodes[p.0].shape
                )));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.nodes[p.0].value[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![n, total, h, w], out, rg, Op::ConcatChannels(ids)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(TensorError::Dimension(format!(
                "reshape {:?} into {shape:?}",
                self.nodes[a.0].shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a.0)))
    }

    /// Per-channel normalization of `[n, c, h, w]` followed by `γ·x̂ + β`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &NormMode, eps: f32) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let (n, c, h, w) = batch_dims(&shape)?;
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [c] {
                return Err(TensorError::Dimension(format!(
                    "batch-norm affine {:?} for {c} channels",
                    self.nodes[p.0].shape
                )));
            }
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = &self.nodes[x.0].value;
        let (mean, var, inv_std, batch) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let mut s = 0f64;
                    for smp in 0..n {
                        let base = (smp * c + ch) * plane;
                        s += xv[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / count;
                    let mut q = 0f64;
                    for smp in 0..n {
                        let base = (smp * c + ch) * plane;
                        q += xv[base..base + plane]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
                (mean, var, inv, true)
            }
            NormMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Dimension(format!(
                        "fixed statistics for {} channels, input has {c}",
                        mean.len()
                    )));
                }
                (
                    mean.iter().map(|&m| m as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| 1.0 / (v as f64 + eps as f64).sqrt()).collect(),
                    false,
                )
            }
        };
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let value: Vec<f32> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                let xhat = (v as f64 - mean[ch]) * inv_std[ch];
                (g[ch] as f64 * xhat + b[ch] as f64) as f32
            })
            .collect();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                var,
                inv_std,
                batch,
            },
        ))
    }

    /// Reverse pass from a scalar. Gradients accumulate over multiple uses of
    /// a node. The graph is consumed: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::Contract("graph already consumed by backward".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (target, g) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.nodes[target].grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, dy: &[f32]) -> Vec<(usize, Vec<f32>)> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.as_slice();
        let wants = |j: usize| self.nodes[j].requires_grad;
        let map = |j: usize, f: &dyn Fn(f32, f32, f32) -> f32| -> Vec<f32> {
            val(j)
                .iter()
                .zip(&node.value)
                .zip(dy)
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect()
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sub(a, b) => vec![(*a, dy.to_vec()), (*b, dy.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let da = val(*b).iter().zip(dy).map(|(y, g)| y * g).collect();
                let db = val(*a).iter().zip(dy).map(|(x, g)| x * g).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Affine(a, s) => vec![(*a, dy.iter().map(|g| g * s).collect())],
            Op::Abs(a) => vec![(
                *a,
                map(*a, &|x, _, g| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            )],
            Op::LogClamped(a, floor) => {
                let f = *floor;
                vec![(*a, map(*a, &|x, _, g| if x > f { g / x } else { 0.0 }))]
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                vec![(*a, map(*a, &|x, _, g| if x > 0.0 { g } else { s * g }))]
            }
            Op::Tanh(a) => vec![(*a, map(*a, &|_, y, g| g * (1.0 - y * y)))],
            Op::Sigmoid(a) => vec![(*a, map(*a, &|_, y, g| g * y * (1.0 - y)))],
            Op::Sum(a) => vec![(*a, vec![dy[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len().max(1);
                vec![(*a, vec![(dy[0] as f64 / n as f64) as f32; n])]
            }
            Op::MatMul(a, b, [n, k, m]) => {
                let mut out = Vec::new();
                if wants(*a) {
                    let mut da = vec![0f32; n * k];
                    gemm_nt(*n, *m, *k, dy, val(*b), &mut da);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0f32; k * m];
                    gemm_tn(*k, *n, *m, val(*a), dy, &mut db);
                    out.push((*b, db));
                }
                out
            }
            Op::AddRowBias(a, bias) => {
                let m = val(*bias).len();
                let mut db = vec![0f64; m];
                for (i, g) in dy.iter().enumerate() {
                    db[i % m] += *g as f64;
                }
                vec![(*a, dy.to_vec()), (*bias, db.into_iter().map(|v| v as f32).collect())]
            }
            Op::AddChannelBias(a, bias) => {
                let c = val(*bias).len();
                let (_, _, h, w) = batch_dims(&node.shape).expect("validated on forward");
                let plane = h * w;
                let mut db = vec![0f64; c];
                for (i, g) in dy.iter().enumerate() {
                    db[(i / plane) % c] += *g as f64;
                }
                vec![(*a, dy.to_vec()), (*bias, db.into_iter().map(|v| v as f32).collect())]
            }
            Op::Conv2d { x, k, n, geom } => {
                let (dx, dk) = conv_backward(val(*x), val(*k), dy, *n, geom, wants(*x), wants(*k));
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
                out
            }
            Op::ConvTranspose2d { x, k, n, geom } => {
                let (dx, dk) = conv_transpose_backward(val(*x), val(*k), dy, *n, geom, wants(*x), wants(*k));
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
                out
            }
            Op::ConcatChannels(ids) => {
                let (n, total, h, w) = batch_dims(&node.shape).expect("validated on forward");
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(ids.len());
                for &id in ids {
                    let c = batch_dims(&self.nodes[id].shape).expect("validated").1;
                    if wants(id) {
                        let mut g = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let start = (s * total + offset) * plane;
                            g.extend_from_slice(&dy[start..start + c * plane]);
                        }
                        out.push((id, g));
                    }
                    offset += c;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, dy.to_vec())],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
                ..
            } => {
                let (n, c, h, w) = batch_dims(&node.shape).expect("validated on forward");
                let plane = h * w;
                let count = (n * plane) as f64;
                let xv = val(*x);
                let gv = val(*gamma);
                let mut sum_dy = vec![0f64; c];
                let mut sum_dy_xhat = vec![0f64; c];
                for (i, &g) in dy.iter().enumerate() {
                    let ch = (i / plane) % c;
                    let xhat = (xv[i] as f64 - mean[ch]) * inv_std[ch];
                    sum_dy[ch] += g as f64;
                    sum_dy_xhat[ch] += g as f64 * xhat;
                }
                let mut out = Vec::new();
                if wants(*x) {
                    let dx = dy
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| {
                            let ch = (i / plane) % c;
                            let scale = gv[ch] as f64 * inv_std[ch];
                            if *batch {
                                let xhat = (xv[i] as f64 - mean[ch]) * inv_std[ch];
                                (scale * (g as f64 - sum_dy[ch] / count - xhat * sum_dy_xhat[ch] / count)) as f32
                            } else {
                                (scale * g as f64) as f32
                            }
                        })
                        .collect();
                    out.push((*x, dx));
                }
                out.push((*gamma, sum_dy_xhat.iter().map(|&v| v as f32).collect()));
                out.push((*beta, sum_dy.iter().map(|&v| v as f32).collect()));
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_the_input() {
        let mut g = Graph::new();
        let w = g.leaf(
            &Tensor::new(&[3], vec![0.5, -1.0, 2.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let x = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn gradients_accumulate_over_uses() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(&[2], vec![3.0, -1.0]).unwrap().with_requires_grad(true));
        let a = g.affine(w, 2.0, 0.0);
        let b = g.mul(w, w).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        // d/dw (2w + w²) = 2 + 2w
        assert_eq!(g.grad(w).unwrap(), &[8.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::full(&[2], 1.0).with_requires_grad(true));
        assert!(matches!(g.backward(w), Err(TensorError::Contract(_))));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::Contract(_))));
    }

    #[test]
    fn tensor_export_carries_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::full(&[2, 2], 1.0).with_requires_grad(true));
        let m = g.mean(w);
        g.backward(m).unwrap();
        let t = g.tensor(w);
        assert_eq!(t.grad().unwrap(), &[0.25; 4]);
        assert!(t.requires_grad());
    }

    #[test]
    fn concat_and_reshape_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[2, 3], vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let b4 = g.reshape(b, &[2, 3, 1, 1]).unwrap();
        let c = g.concat_channels(&[a, b4]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 1, 1]);
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 5.0, 2.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let mut g = Graph::new();
        let x = g
            .constant(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 30.0])
            .unwrap();
        let gamma = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.batch_norm(x, gamma, beta, &NormMode::Batch, 0.0).unwrap();
        let stats = g.batch_stats(y).unwrap();
        assert_eq!(stats.mean, vec![4.0, 17.5]);
        assert_eq!(stats.var, vec![5.0, 68.75]);
        let v = g.value(y);
        let ch0: f32 = [v[0], v[1], v[4], v[5]].iter().sum();
        assert!(ch0.abs() < 1e-6);
    }
}
