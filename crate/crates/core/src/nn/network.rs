//! Forward pass, loss heads and last-to-first backpropagation with an
//! optional stopping depth.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{
    col2im_add, conv_col_grad, conv_forward, conv_param_grad_add, dense_forward, dense_input_grad, dense_param_grad,
    dot, im2col, max_pool, max_pool_backward, ConvShape,
};
use super::params::{LayerwiseParams, PartialGradient};
use super::spec::{Activation, LayerGeom, ModelKind, ModelSpec, OutputKind, CNN_KERNEL};
use crate::data::{Batch, Dataset, TargetView};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;

const EVAL_CHUNK: usize = 250;

/// Glorot-uniform weights, zero biases; a pure function of `(spec, seed)`.
pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<LayerwiseParams<T>> {
    spec.validate()?;
    let input_dim = spec.input_dim();
    let blocks = spec
        .geometry()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = stream(seed, Purpose::Init, i as u64, 0);
            let (fan_in, fan_out) = g.fans(input_dim);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = match *g {
                LayerGeom::Block { len, .. } => len,
                LayerGeom::Dense { inputs, outputs } => inputs * outputs,
                LayerGeom::Conv { cin, cout, .. } => cout * cin * CNN_KERNEL * CNN_KERNEL,
            };
            let mut block: Vec<T> = (0..weights).map(|_| T::lit(rng.random_range(-a..a))).collect();
            block.resize(g.param_count(), T::zero());
            block
        })
        .collect();
    LayerwiseParams::new(blocks)
}

/// Mean loss over the batch plus `l2/2 * |w|^2`.
pub fn forward_loss<T: Real>(spec: &ModelSpec, params: &LayerwiseParams<T>, batch: &Dataset<T>) -> Result<T> {
    let net = Net::new(spec, params, batch)?;
    let b = batch.as_batch();
    let (logits, _) = net.forward(b, false)?;
    let (sum, _) = net.head(&logits, b, false)?;
    net.finish_loss(sum / T::from_count(b.n))
}

/// Gradient blocks for layers `depth_limit..=L`.
pub fn backward<T: Real>(
    spec: &ModelSpec,
    params: &LayerwiseParams<T>,
    batch: &Dataset<T>,
    depth_limit: usize,
) -> Result<PartialGradient<T>> {
    let net = Net::new(spec, params, batch)?;
    if depth_limit == spec.num_layers() + 1 {
        return Ok(PartialGradient::empty(spec.num_layers(), batch.len()));
    }
    net.backward(batch.as_batch(), depth_limit).map(|(_, g)| g)
}

/// Loss and gradient from one pass.
pub fn backward_with_loss<T: Real>(
    spec: &ModelSpec,
    params: &LayerwiseParams<T>,
    batch: &Dataset<T>,
    depth_limit: usize,
) -> Result<(T, PartialGradient<T>)> {
    let net = Net::new(spec, params, batch)?;
    net.backward(batch.as_batch(), depth_limit)
}

/// Full gradient as a parameter-shaped vector.
pub fn full_gradient<T: Real>(spec: &ModelSpec, params: &LayerwiseParams<T>, batch: &Dataset<T>) -> Result<LayerwiseParams<T>> {
    backward(spec, params, batch, 1)?.into_full()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Same objective as [`forward_loss`].
    pub loss: f64,
    /// Fraction of correct predictions; `None` for regression targets.
    pub accuracy: Option<f64>,
}

/// Loss and accuracy over a whole dataset, in fixed-size chunks.
pub fn evaluate<T: Real>(spec: &ModelSpec, params: &LayerwiseParams<T>, data: &Dataset<T>) -> Result<Evaluation> {
    let net = Net::new(spec, params, data)?;
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let b = data.view(s..(s + EVAL_CHUNK).min(data.len()));
            let (logits, _) = net.forward(b, false)?;
            let (sum, _) = net.head(&logits, b, false)?;
            Ok((sum, net.correct(&logits, b)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = T::zero();
    let mut correct = Some(0usize);
    for (s, c) in parts {
        sum = sum + s;
        correct = correct.zip(c).map(|(a, b)| a + b);
    }
    let loss = net.finish_loss(sum / T::from_count(data.len()))?;
    Ok(Evaluation {
        loss: loss.as_f64(),
        accuracy: correct.map(|c| c as f64 / data.len() as f64),
    })
}

enum Tape<T> {
    Convex,
    /// Post-activation output of every hidden layer.
    Mlp(Vec<Vec<T>>),
    Cnn(CnnTape<T>),
}

struct CnnTape<T> {
    col1: Vec<T>,
    a1: Vec<T>,
    arg1: Vec<u32>,
    col2: Vec<T>,
    a2: Vec<T>,
    arg2: Vec<u32>,
    p2: Vec<T>,
    h: Vec<T>,
}

struct Net<'a, T> {
    spec: &'a ModelSpec,
    params: &'a LayerwiseParams<T>,
    geom: Vec<LayerGeom>,
    l2: T,
}

impl<'a, T: Real> Net<'a, T> {
    fn new(spec: &'a ModelSpec, params: &'a LayerwiseParams<T>, data: &Dataset<T>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.block_sizes();
        if params.block_sizes() != expected {
            return Err(Error::Shape(format!(
                "parameter blocks {:?} do not match model blocks {:?}",
                params.block_sizes(),
                expected
            )));
        }
        if data.is_empty() {
            return Err(Error::Shape("batch is empty".into()));
        }
        if data.dim() != spec.input_dim() {
            return Err(Error::Shape(format!(
                "batch feature dimension {} does not match model input {}",
                data.dim(),
                spec.input_dim()
            )));
        }
        Ok(Self { spec, params, geom: spec.geometry(), l2: T::lit(spec.l2_coeff) })
    }

    fn finish_loss(&self, data_loss: T) -> Result<T> {
        let mut loss = data_loss;
        if self.l2 > T::zero() {
            loss = loss + self.l2 * T::lit(0.5) * self.params.norm_sq();
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite ({loss})")));
        }
        Ok(loss)
    }

    fn activate(&self, v: &mut [T]) {
        if self.spec.activation == Activation::Relu {
            for x in v {
                if *x < T::zero() {
                    *x = T::zero();
                }
            }
        }
    }

    /// Multiplies `delta` by the activation derivative, read off the output.
    fn gate(&self, delta: &mut [T], out: &[T]) {
        if self.spec.activation == Activation::Relu {
            for (d, &a) in delta.iter_mut().zip(out) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
        }
    }

    fn conv_shapes(&self) -> (ConvShape, ConvShape) {
        let conv = |g: LayerGeom| match g {
            LayerGeom::Conv { cin, cout, side } => ConvShape { cin, cout, k: CNN_KERNEL, side },
            _ => unreachable!("cnn layers 1 and 2 are convolutions"),
        };
        (conv(self.geom[0]), conv(self.geom[1]))
    }

    fn dense(&self, i: usize) -> (usize, usize) {
        match self.geom[i] {
            LayerGeom::Dense { inputs, outputs } => (inputs, outputs),
            _ => unreachable!("layer {i} is dense"),
        }
    }

    fn forward(&self, b: Batch<'_, T>, keep: bool) -> Result<(Vec<T>, Tape<T>)> {
        let p = self.params;
        let (logits, tape) = match self.spec.kind {
            ModelKind::LinearL2 | ModelKind::LogisticL2 => {
                let logits = (0..b.n)
                    .map(|s| {
                        let x = &b.x[s * b.dim..(s + 1) * b.dim];
                        self.geom.iter().enumerate().fold(T::zero(), |acc, (i, g)| match *g {
                            LayerGeom::Block { offset, len } => acc + dot(&x[offset..offset + len], p.block(i)),
                            _ => unreachable!(),
                        })
                    })
                    .collect();
                (logits, Tape::Convex)
            }
            ModelKind::Mlp => {
                let l = self.geom.len();
                let mut outs: Vec<Vec<T>> = Vec::with_capacity(l - 1);
                let mut logits = Vec::new();
                for i in 0..l {
                    let (inp, out) = self.dense(i);
                    let input = if i == 0 { b.x } else { &outs[i - 1] };
                    let mut z = dense_forward(input, b.n, inp, out, p.block(i));
                    if i + 1 < l {
                        self.activate(&mut z);
                        if !keep && i > 0 {
                            outs[i - 1] = Vec::new();
                        }
                        outs.push(z);
                    } else {
                        logits = z;
                    }
                }
                (logits, Tape::Mlp(outs))
            }
            ModelKind::CnnSmall => {
                let (sh1, sh2) = self.conv_shapes();
                let (flat, hidden) = self.dense(2);
                let (_, classes) = self.dense(3);
                let (q1p1, a1n, p1n) = (sh1.patch() * sh1.positions(), sh1.cout * sh1.positions(), sh2.input_len());
                let (q2p2, a2n) = (sh2.patch() * sh2.positions(), sh2.cout * sh2.positions());
                let rows = if keep { b.n } else { 1 };
                let mut t = CnnTape {
                    col1: vec![T::zero(); rows * q1p1],
                    a1: vec![T::zero(); rows * a1n],
                    arg1: vec![0; rows * p1n],
                    col2: vec![T::zero(); rows * q2p2],
                    a2: vec![T::zero(); rows * a2n],
                    arg2: vec![0; rows * flat],
                    p2: vec![T::zero(); b.n * flat],
                    h: Vec::new(),
                };
                let mut p1 = vec![T::zero(); p1n];
                for s in 0..b.n {
                    let r = if keep { s } else { 0 };
                    let col1 = &mut t.col1[r * q1p1..(r + 1) * q1p1];
                    im2col(sh1, &b.x[s * b.dim..(s + 1) * b.dim], col1);
                    let a1 = &mut t.a1[r * a1n..(r + 1) * a1n];
                    conv_forward(sh1, p.block(0), col1, a1);
                    self.activate(a1);
                    max_pool(sh1.cout, sh1.out_side(), a1, &mut p1, &mut t.arg1[r * p1n..(r + 1) * p1n]);
                    let col2 = &mut t.col2[r * q2p2..(r + 1) * q2p2];
                    im2col(sh2, &p1, col2);
                    let a2 = &mut t.a2[r * a2n..(r + 1) * a2n];
                    conv_forward(sh2, p.block(1), col2, a2);
                    self.activate(a2);
                    max_pool(
                        sh2.cout,
                        sh2.out_side(),
                        a2,
                        &mut t.p2[s * flat..(s + 1) * flat],
                        &mut t.arg2[r * flat..(r + 1) * flat],
                    );
                }
                let mut h = dense_forward(&t.p2, b.n, flat, hidden, p.block(2));
                self.activate(&mut h);
                let logits = dense_forward(&h, b.n, hidden, classes, p.block(3));
                t.h = h;
                (logits, Tape::Cnn(t))
            }
        };
        if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite model output {bad}")));
        }
        Ok((logits, tape))
    }

    /// Summed per-sample loss and, if requested, `dloss/dlogits` of the mean.
    fn head(&self, logits: &[T], b: Batch<'_, T>, grad: bool) -> Result<(T, Vec<T>)> {
        let k = self.spec.output_dim();
        let out = self.spec.output_kind();
        let inv_n = T::one() / T::from_count(b.n);
        let mut sum = T::zero();
        let mut d = if grad { vec![T::zero(); logits.len()] } else { Vec::new() };
        match (out, b.targets) {
            (OutputKind::SoftmaxCe, TargetView::Classes(labels, kc)) if kc == k => {
                for (s, &y) in labels.iter().enumerate() {
                    let z = &logits[s * k..(s + 1) * k];
                    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
                    let total: T = z.iter().map(|&v| (v - m).exp()).sum();
                    sum = sum + m + total.ln() - z[y];
                    if grad {
                        for (j, dj) in d[s * k..(s + 1) * k].iter_mut().enumerate() {
                            let pj = (z[j] - m).exp() / total;
                            *dj = (if j == y { pj - T::one() } else { pj }) * inv_n;
                        }
                    }
                }
            }
            (OutputKind::SquaredError, TargetView::Classes(labels, kc)) if kc == k => {
                for (s, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let r = logits[s * k + j] - if j == y { T::one() } else { T::zero() };
                        sum = sum + T::lit(0.5) * r * r;
                        if grad {
                            d[s * k + j] = r * inv_n;
                        }
                    }
                }
            }
            (OutputKind::SquaredError, TargetView::Values(ys)) if k == 1 => {
                for (s, &y) in ys.iter().enumerate() {
                    let r = logits[s] - y;
                    sum = sum + T::lit(0.5) * r * r;
                    if grad {
                        d[s] = r * inv_n;
                    }
                }
            }
            (OutputKind::SigmoidCe, TargetView::Values(ys)) if k == 1 => {
                for (s, &y) in ys.iter().enumerate() {
                    let z = logits[s];
                    // softplus(z) - y z, stable for either sign of z
                    let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
                    sum = sum + softplus - y * z;
                    if grad {
                        d[s] = (sigmoid(z) - y) * inv_n;
                    }
                }
            }
            _ => {
                return Err(Error::Shape(format!(
                    "targets do not fit a {out:?} head with {k} outputs"
                )))
            }
        }
        Ok((sum, d))
    }

    fn correct(&self, logits: &[T], b: Batch<'_, T>) -> Option<usize> {
        let k = self.spec.output_dim();
        match b.targets {
            TargetView::Classes(labels, _) => Some(
                labels
                    .iter()
                    .enumerate()
                    .filter(|&(s, &y)| argmax(&logits[s * k..(s + 1) * k]) == y)
                    .count(),
            ),
            TargetView::Values(ys) if self.spec.output_kind() == OutputKind::SigmoidCe => Some(
                ys.iter()
                    .zip(logits)
                    .filter(|&(&y, &z)| (z > T::zero()) == (y > T::lit(0.5)))
                    .count(),
            ),
            TargetView::Values(_) => None,
        }
    }

    fn backward(&self, b: Batch<'_, T>, depth: usize) -> Result<(T, PartialGradient<T>)> {
        let l = self.geom.len();
        if depth == 0 || depth > l + 1 {
            return Err(Error::Contract(format!("depth limit {depth} outside 1..={}", l + 1)));
        }
        let (logits, tape) = self.forward(b, true)?;
        let (sum, dlogits) = self.head(&logits, b, true)?;
        let loss = self.finish_loss(sum / T::from_count(b.n))?;
        let d0 = depth - 1;
        let p = self.params;
        // grads[i - d0] for layer i, filled last to first
        let mut grads: Vec<Vec<T>> = vec![Vec::new(); l - d0];
        match tape {
            Tape::Convex => {
                for i in d0..l {
                    let LayerGeom::Block { offset, len } = self.geom[i] else { unreachable!() };
                    let mut g = vec![T::zero(); len];
                    for (s, &dz) in dlogits.iter().enumerate() {
                        let x = &b.x[s * b.dim + offset..s * b.dim + offset + len];
                        for (gj, &xj) in g.iter_mut().zip(x) {
                            *gj = *gj + dz * xj;
                        }
                    }
                    grads[i - d0] = g;
                }
            }
            Tape::Mlp(outs) => {
                let mut delta = dlogits;
                for i in (d0..l).rev() {
                    let (inp, out) = self.dense(i);
                    let input = if i == 0 { b.x } else { &outs[i - 1] };
                    grads[i - d0] = dense_param_grad(input, &delta, b.n, inp, out);
                    if i > d0 {
                        delta = dense_input_grad(p.block(i), &delta, b.n, inp, out);
                        self.gate(&mut delta, &outs[i - 1]);
                    }
                }
            }
            Tape::Cnn(t) => self.cnn_backward(b.n, d0, &t, dlogits, &mut grads),
        }
        if self.l2 > T::zero() {
            for (k, g) in grads.iter_mut().enumerate() {
                for (gj, &wj) in g.iter_mut().zip(p.block(d0 + k)) {
                    *gj = *gj + self.l2 * wj;
                }
            }
        }
        Ok((loss, PartialGradient::new(depth, l, grads, b.n)?))
    }

    fn cnn_backward(&self, n: usize, d0: usize, t: &CnnTape<T>, dlogits: Vec<T>, grads: &mut [Vec<T>]) {
        let p = self.params;
        let (sh1, sh2) = self.conv_shapes();
        let (flat, hidden) = self.dense(2);
        let (_, classes) = self.dense(3);
        grads[3 - d0] = dense_param_grad(&t.h, &dlogits, n, hidden, classes);
        if d0 > 2 {
            return;
        }
        let mut dh = dense_input_grad(p.block(3), &dlogits, n, hidden, classes);
        self.gate(&mut dh, &t.h);
        grads[2 - d0] = dense_param_grad(&t.p2, &dh, n, flat, hidden);
        if d0 > 1 {
            return;
        }
        let dp2 = dense_input_grad(p.block(2), &dh, n, flat, hidden);
        let (q1p1, a1n, p1n) = (sh1.patch() * sh1.positions(), sh1.cout * sh1.positions(), sh2.input_len());
        let (q2p2, a2n) = (sh2.patch() * sh2.positions(), sh2.cout * sh2.positions());
        let mut g2 = vec![T::zero(); p.block(1).len()];
        let mut g1 = if d0 == 0 { vec![T::zero(); p.block(0).len()] } else { Vec::new() };
        let mut da2 = vec![T::zero(); a2n];
        let mut dcol2 = vec![T::zero(); q2p2];
        let mut dp1 = vec![T::zero(); p1n];
        let mut da1 = vec![T::zero(); a1n];
        for s in 0..n {
            let a2 = &t.a2[s * a2n..(s + 1) * a2n];
            max_pool_backward(&dp2[s * flat..(s + 1) * flat], &t.arg2[s * flat..(s + 1) * flat], &mut da2);
            self.gate(&mut da2, a2);
            let col2 = &t.col2[s * q2p2..(s + 1) * q2p2];
            conv_param_grad_add(sh2, col2, &da2, &mut g2);
            if d0 == 0 {
                conv_col_grad(sh2, p.block(1), &da2, &mut dcol2);
                dp1.fill(T::zero());
                col2im_add(sh2, &dcol2, &mut dp1);
                max_pool_backward(&dp1, &t.arg1[s * p1n..(s + 1) * p1n], &mut da1);
                self.gate(&mut da1, &t.a1[s * a1n..(s + 1) * a1n]);
                conv_param_grad_add(sh1, &t.col1[s * q1p1..(s + 1) * q1p1], &da1, &mut g1);
            }
        }
        grads[1 - d0] = g2;
        if d0 == 0 {
            grads[0] = g1;
        }
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = j;
        }
    }
    best
}
