//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Nodes are appended
//! in evaluation order, so reverse iteration is a valid topological order for
//! the backward sweep. Only the handful of operators needed by the video
//! classifiers and attention gates are provided; each carries a hand-written
//! adjoint that is checked against central differences in the test suite.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Geometry of a 3D window operator over `(N, D, H, W, C)` inputs with
/// TensorFlow-style "same" padding: `out = ceil(in / stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
}

impl WindowGeom {
    pub fn same(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut output = [0; 3];
        let mut pad_before = [0; 3];
        for a in 0..3 {
            output[a] = input[a].div_ceil(stride[a]);
            let needed = (output[a] - 1) * stride[a] + kernel[a];
            let pad_total = needed.saturating_sub(input[a]);
            pad_before[a] = pad_total / 2;
        }
        WindowGeom {
            input,
            output,
            kernel,
            stride,
            pad_before,
        }
    }

    /// Input coordinate for output `o` and kernel tap `k` on axis `a`, if inside.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[a] + k) as isize - self.pad_before[a] as isize;
        if pos >= 0 && (pos as usize) < self.input[a] {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Per-sample patch matrix `(P, K)` for a convolution, `K = kd*kh*kw*cin` in
/// kernel layout order. Padded taps are zero.
struct Patches {
    positions: usize,
    k: usize,
    /// `(input offset or usize::MAX for padding, length)` runs covering the
    /// patch matrix in order; adjacent taps with adjacent sources are merged.
    runs: Vec<(usize, usize)>,
}

impl Patches {
    fn new(geom: WindowGeom, cin: usize) -> Self {
        let [od, oh, ow] = geom.output;
        let [_, ih, iw] = geom.input;
        let [kd, kh, kw] = geom.kernel;
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut push = |off: usize| {
            if let Some(last) = runs.last_mut() {
                let joins = if off == usize::MAX {
                    last.0 == usize::MAX
                } else {
                    last.0 != usize::MAX && last.0 + last.1 == off
                };
                if joins {
                    last.1 += cin;
                    return;
                }
            }
            runs.push((off, cin));
        };
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    for a in 0..kd {
                        for b in 0..kh {
                            for c in 0..kw {
                                push(match (geom.source(0, z, a), geom.source(1, y, b), geom.source(2, x, c)) {
                                    (Some(pz), Some(py), Some(px)) => ((pz * ih + py) * iw + px) * cin,
                                    _ => usize::MAX,
                                });
                            }
                        }
                    }
                }
            }
        }
        Patches {
            positions: od * oh * ow,
            k: kd * kh * kw * cin,
            runs,
        }
    }

    fn positions(&self) -> usize {
        self.positions
    }

    fn k(&self) -> usize {
        self.k
    }

    /// Fills `cols` from one sample's input.
    fn gather(&self, x: &[f64], cols: &mut [f64]) {
        let mut at = 0;
        for &(off, len) in &self.runs {
            let dst = &mut cols[at..at + len];
            if off == usize::MAX {
                dst.fill(0.0);
            } else {
                dst.copy_from_slice(&x[off..off + len]);
            }
            at += len;
        }
    }

    /// Adds `cols` back into one sample's input gradient.
    fn scatter(&self, cols: &[f64], gx: &mut [f64]) {
        let mut at = 0;
        for &(off, len) in &self.runs {
            if off != usize::MAX {
                for (d, v) in gx[off..off + len].iter_mut().zip(&cols[at..at + len]) {
                    *d += v;
                }
            }
            at += len;
        }
    }
}

/// `(K, Cout)` kernel as `(Cout, K)`.
fn transpose(w: &[f64], k: usize, cout: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for i in 0..k {
        for o in 0..cout {
            t[o * k + i] = w[i * cout + o];
        }
    }
    t
}

/// Four independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: WindowGeom,
    },
    AvgPool3d {
        x: Var,
        geom: WindowGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    SpatialMean(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    SelectStep {
        x: Var,
        t: usize,
    },
    Stack(Vec<Var>),
    SoftmaxXent {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Pending running-statistics update produced by a batch-norm layer in
/// training mode. Applied by the trainer after the optimiser step.
#[derive(Debug, Clone)]
pub struct BatchStatsUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased.
    pub batch_var: Vec<f64>,
    pub count: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    grad_all_params: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BatchStatsUpdate>,
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Offsets into a broadcast operand for every element of the output, given
/// output shape and operand shape of equal rank.
/// Operand offset of each output element under broadcasting.
enum Broadcast {
    Same,
    /// Operand is `out` with trailing axes collapsed to 1.
    Div(usize),
    Table(Vec<usize>),
}

impl Broadcast {
    fn new(out_shape: &[usize], operand: &[usize]) -> Self {
        if out_shape == operand {
            return Broadcast::Same;
        }
        let k = operand.iter().rposition(|&d| d != 1).map_or(0, |i| i + 1);
        if operand[..k] == out_shape[..k] {
            Broadcast::Div(numel(&out_shape[k..]))
        } else {
            Broadcast::Table(broadcast_offsets(out_shape, operand))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Div(r) => i / r,
            Broadcast::Table(t) => t[i],
        }
    }
}

fn broadcast_offsets(out_shape: &[usize], operand: &[usize]) -> Vec<usize> {
    let op_strides = strides(operand);
    let eff: Vec<usize> = operand
        .iter()
        .zip(&op_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total = numel(out_shape);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for a in (0..out_shape.len()).rev() {
            idx[a] += 1;
            off += eff[a];
            if idx[a] < out_shape[a] {
                break;
            }
            off -= eff[a] * idx[a];
            idx[a] = 0;
        }
    }
    offs
}

impl Graph {
    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            grad_all_params: false,
            rng: crate::seed::rng(seed),
            bn_updates: Vec::new(),
        }
    }

    /// Inference-mode tape: no dropout, batch norm uses running statistics.
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    /// Treat frozen parameters as differentiable too. Needed when gradients
    /// with respect to activations of a frozen sub-network are requested.
    pub fn with_grad_all_params(mut self) -> Self {
        self.grad_all_params = true;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStatsUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. for input saliency or checks).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = self.grad_all_params || store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Elementwise product with NumPy-style broadcasting on equal-rank shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "mul: rank mismatch");
        let out_shape: Vec<usize> = sa
            .iter()
            .zip(&sb)
            .map(|(&x, &y)| {
                assert!(x == y || x == 1 || y == 1, "mul: {sa:?} vs {sb:?}");
                x.max(y)
            })
            .collect();
        let oa = Broadcast::new(&out_shape, &sa);
        let ob = Broadcast::new(&out_shape, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..numel(&out_shape)).map(|i| da[oa.at(i)] * db[ob.at(i)]).collect();
        let out = Tensor::from_vec(&out_shape, data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "mul_const: shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// Inverted dropout. Identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a).to_vec();
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(&shape, mask).unwrap();
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// `(N, F) x (F, G) -> (N, G)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, f) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vw.shape()[0], f, "matmul: inner dimension");
        let g = vw.shape()[1];
        let (dx, dw) = (vx.data(), vw.data());
        let mut out = vec![0.0; n * g];
        for i in 0..n {
            let row = &mut out[i * g..(i + 1) * g];
            for k in 0..f {
                let xv = dx[i * f + k];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &dw[k * g..(k + 1) * g];
                for (o, wv) in row.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let out = Tensor::from_vec(&[n, g], out).unwrap();
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::MatMul(x, w), rg)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let g = *vx.shape().last().unwrap();
        assert_eq!(vb.len(), g, "add_bias: width");
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data()[i % g])
            .collect();
        let out = Tensor::from_vec(vx.shape(), data).unwrap();
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// 3D convolution, "same" padding. `x: (N, D, H, W, Cin)`,
    /// `w: (kd, kh, kw, Cin, Cout)`, `b: (Cout)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3]) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 5, "conv3d: input rank");
        assert_eq!(sw.len(), 5, "conv3d: kernel rank");
        assert_eq!(sx[4], sw[3], "conv3d: input channels");
        let (cin, cout) = (sw[3], sw[4]);
        let geom = WindowGeom::same([sx[1], sx[2], sx[3]], [sw[0], sw[1], sw[2]], stride);
        let n = sx[0];
        let [od, oh, ow] = geom.output;
        let mut out = vec![0.0; n * od * oh * ow * cout];
        let (dx, dw, db) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let patches = Patches::new(geom, cin);
        let (p, k) = (patches.positions(), patches.k());
        let wt = transpose(dw, k, cout);
        let per_in = dx.len() / n;
        let mut cols = vec![0.0; p * k];
        for s in 0..n {
            patches.gather(&dx[s * per_in..(s + 1) * per_in], &mut cols);
            for (row, acc) in cols.chunks_exact(k).zip(out[s * p * cout..(s + 1) * p * cout].chunks_exact_mut(cout)) {
                for (o, a) in acc.iter_mut().enumerate() {
                    *a = db[o] + dot(row, &wt[o * k..(o + 1) * k]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, od, oh, ow, cout], out).unwrap();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv3d { x, w, b, geom }, rg)
    }

    /// Average pooling with "same" padding; padded cells are excluded from
    /// the average.
    pub fn avg_pool3d(&mut self, x: Var, size: [usize; 3], stride: [usize; 3]) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 5, "avg_pool3d: input rank");
        let geom = WindowGeom::same([sx[1], sx[2], sx[3]], size, stride);
        let (n, c) = (sx[0], sx[4]);
        let [od, oh, ow] = geom.output;
        let [id_, ih, iw] = geom.input;
        let dx = self.value(x).data();
        let mut out = vec![0.0; n * od * oh * ow * c];
        for s in 0..n {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let obase = (((s * od + z) * oh + y) * ow + xx) * c;
                        let mut count = 0usize;
                        for kd in 0..size[0] {
                            let Some(pz) = geom.source(0, z, kd) else { continue };
                            for kh in 0..size[1] {
                                let Some(py) = geom.source(1, y, kh) else { continue };
                                for kw in 0..size[2] {
                                    let Some(px) = geom.source(2, xx, kw) else { continue };
                                    count += 1;
                                    let ibase = (((s * id_ + pz) * ih + py) * iw + px) * c;
                                    for ch in 0..c {
                                        out[obase + ch] += dx[ibase + ch];
                                    }
                                }
                            }
                        }
                        let inv = 1.0 / count as f64;
                        for ch in 0..c {
                            out[obase + ch] *= inv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, od, oh, ow, c], out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::AvgPool3d { x, geom }, rg)
    }

    /// Batch normalisation over `(N, F)`. In training mode the batch
    /// statistics are used and queued for a running-average update; otherwise
    /// the stored running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        mean_id: ParamId,
        var_id: ParamId,
        eps: f64,
    ) -> Var {
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2, "batch_norm: expects (N, F)");
        let (n, f) = (vx.shape()[0], vx.shape()[1]);
        let dx = vx.data();
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for i in 0..n {
                for j in 0..f {
                    mean[j] += dx[i * f + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for i in 0..n {
                for j in 0..f {
                    let d = dx[i * f + j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        } else {
            (
                store.get(mean_id).data().to_vec(),
                store.get(var_id).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut x_hat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        let (g, b) = (store.get(gamma).data(), store.get(beta).data());
        for i in 0..n {
            for j in 0..f {
                let h = (dx[i * f + j] - mean[j]) * inv_std[j];
                x_hat[i * f + j] = h;
                out[i * f + j] = g[j] * h + b[j];
            }
        }
        if self.training {
            let unbiased = if n > 1 {
                var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
            } else {
                var.clone()
            };
            self.bn_updates.push(BatchStatsUpdate {
                mean_id,
                var_id,
                batch_mean: mean,
                batch_var: unbiased,
                count: n,
            });
        }
        let x_hat = Tensor::from_vec(&[n, f], x_hat).unwrap();
        let out = Tensor::from_vec(&[n, f], out).unwrap();
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        let batch_stats = self.training;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                x_hat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Max over the last axis, keeping it as size 1.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        let rows = vx.len() / c;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            argmax.push(r * c + best);
            out.push(row[best]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::from_vec(&shape, out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::ChannelMax { x, argmax }, rg)
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        let out: Vec<f64> = vx
            .data()
            .chunks_exact(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::from_vec(&shape, out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::ChannelMean(x), rg)
    }

    /// Global average over H and W: `(N, D, H, W, C) -> (N, D, C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 5, "spatial_mean: input rank");
        let (n, d, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let mut out = vec![0.0; n * d * c];
        let inv = 1.0 / (h * w) as f64;
        for (i, chunk) in vx.data().chunks_exact(h * w * c).enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            for px in chunk.chunks_exact(c) {
                for (a, v) in o.iter_mut().zip(px) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let out = Tensor::from_vec(&[n, d, c], out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::SpatialMean(x), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat: leading shape");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::from_vec(&shape, out).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        assert!(start + len <= c, "slice_last: out of range");
        let out: Vec<f64> = vx
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&shape, out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Slice { x, start, len }, rg)
    }

    /// `(N, T, F) -> (N, F)` at step `t`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3, "select_step: input rank");
        let (n, steps, f) = (s[0], s[1], s[2]);
        assert!(t < steps);
        let mut out = Vec::with_capacity(n * f);
        for i in 0..n {
            let base = (i * steps + t) * f;
            out.extend_from_slice(&vx.data()[base..base + f]);
        }
        let out = Tensor::from_vec(&[n, f], out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::SelectStep { x, t }, rg)
    }

    /// Stacks `(N, F)` steps into `(N, T, F)`.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Var {
        let s = self.shape(parts[0]).to_vec();
        let (n, f) = (s[0], s[1]);
        let steps = parts.len();
        let mut out = vec![0.0; n * steps * f];
        for (t, &p) in parts.iter().enumerate() {
            assert_eq!(self.shape(p), &s[..], "stack_steps: shape");
            let d = self.value(p).data();
            for i in 0..n {
                let base = (i * steps + t) * f;
                out[base..base + f].copy_from_slice(&d[i * f..(i + 1) * f]);
            }
        }
        let out = Tensor::from_vec(&[n, steps, f], out).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Stack(parts.to_vec()), rg)
    }

    /// Mean over the batch of `-sum_k q_k log softmax(z)_k`. `targets` rows are
    /// probability vectors (one-hot for hard labels). Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Var {
        let vz = self.value(logits);
        assert_eq!(vz.shape(), targets.shape(), "softmax_cross_entropy: shape");
        let k = vz.shape()[1];
        let n = vz.shape()[0];
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, q) in vz.data().chunks_exact(k).zip(targets.data().chunks_exact(k)) {
            let lsm = crate::loss::log_softmax(row);
            for (l, qv) in lsm.iter().zip(q) {
                if *qv != 0.0 {
                    loss -= qv * l;
                }
            }
            probs.extend(lsm.iter().map(|l| libm::exp(*l)));
        }
        let probs = Tensor::from_vec(&[n, k], probs).unwrap();
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Backward sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be scalar");
        self.backward_seeded(root, Tensor::full(self.shape(root), 1.0))
    }

    /// Backward sweep from an arbitrary node with an explicit upstream seed.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "backward: seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                match params.get_mut(&id) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], gy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let oa = Broadcast::new(out_shape, va.shape());
                let ob = Broadcast::new(out_shape, vb.shape());
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    let gd = ga.data_mut();
                    for (i, gv) in g.iter().enumerate() {
                        gd[oa.at(i)] += gv * vb.data()[ob.at(i)];
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    let gd = gb.data_mut();
                    for (i, gv) in g.iter().enumerate() {
                        gd[ob.at(i)] += gv * va.data()[oa.at(i)];
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], gy.map(|v| v * s));
            }
            Op::MulConst(a, c) => {
                let data = g.iter().zip(c.data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[a.0], Tensor::from_vec(gy.shape(), data).unwrap());
            }
            Op::Relu(a) => {
                let xa = self.value(*a).data();
                let data = g
                    .iter()
                    .zip(xa)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], Tensor::from_vec(gy.shape(), data).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let data = g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                accumulate(&mut grads[a.0], Tensor::from_vec(gy.shape(), data).unwrap());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let data = g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                accumulate(&mut grads[a.0], Tensor::from_vec(gy.shape(), data).unwrap());
            }
            Op::Reshape(a) => {
                let ga = gy.clone().reshape(self.shape(*a)).unwrap();
                accumulate(&mut grads[a.0], ga);
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, f) = (vx.shape()[0], vx.shape()[1]);
                let gw_n = vw.shape()[1];
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * f];
                    for r in 0..n {
                        let grow = &g[r * gw_n..(r + 1) * gw_n];
                        for k in 0..f {
                            let wrow = &vw.data()[k * gw_n..(k + 1) * gw_n];
                            gx[r * f + k] = dot(grow, wrow);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, f], gx).unwrap());
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; f * gw_n];
                    for r in 0..n {
                        let grow = &g[r * gw_n..(r + 1) * gw_n];
                        for k in 0..f {
                            let xv = vx.data()[r * f + k];
                            if xv == 0.0 {
                                continue;
                            }
                            let dst = &mut gw[k * gw_n..(k + 1) * gw_n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], Tensor::from_vec(&[f, gw_n], gw).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], gy.clone());
                }
                if self.rg(*b) {
                    let width = self.value(*b).len();
                    let mut gb = vec![0.0; width];
                    for row in g.chunks_exact(width) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[width], gb).unwrap());
                }
            }
            Op::Conv3d { x, w, b, geom } => self.conv3d_backward(*x, *w, *b, geom, gy, grads),
            Op::AvgPool3d { x, geom } => {
                let sx = self.shape(*x).to_vec();
                let (n, c) = (sx[0], sx[4]);
                let [od, oh, ow] = geom.output;
                let [id_, ih, iw] = geom.input;
                let mut gx = vec![0.0; numel(&sx)];
                for s in 0..n {
                    for z in 0..od {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let obase = (((s * od + z) * oh + y) * ow + xx) * c;
                                let mut taps = Vec::with_capacity(8);
                                for kd in 0..geom.kernel[0] {
                                    let Some(pz) = geom.source(0, z, kd) else { continue };
                                    for kh in 0..geom.kernel[1] {
                                        let Some(py) = geom.source(1, y, kh) else { continue };
                                        for kw in 0..geom.kernel[2] {
                                            let Some(px) = geom.source(2, xx, kw) else {
                                                continue;
                                            };
                                            taps.push((((s * id_ + pz) * ih + py) * iw + px) * c);
                                        }
                                    }
                                }
                                let inv = 1.0 / taps.len() as f64;
                                for ibase in taps {
                                    for ch in 0..c {
                                        gx[ibase + ch] += g[obase + ch] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(&sx, gx).unwrap());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (n, f) = (x_hat.shape()[0], x_hat.shape()[1]);
                let gam = self.value(*gamma).data();
                let xh = x_hat.data();
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for r in 0..n {
                    for j in 0..f {
                        sum_g[j] += g[r * f + j];
                        sum_gx[j] += g[r * f + j] * xh[r * f + j];
                    }
                }
                if self.rg(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(&[f], sum_gx.clone()).unwrap());
                }
                if self.rg(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::from_vec(&[f], sum_g.clone()).unwrap());
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * f];
                    let nf = n as f64;
                    for r in 0..n {
                        for j in 0..f {
                            let k = r * f + j;
                            gx[k] = if *batch_stats {
                                gam[j] * inv_std[j] / nf
                                    * (nf * g[k] - sum_g[j] - xh[k] * sum_gx[j])
                            } else {
                                g[k] * gam[j] * inv_std[j]
                            };
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, f], gx).unwrap());
                }
            }
            Op::ChannelMax { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (gv, &src) in g.iter().zip(argmax) {
                    gx.data_mut()[src] += gv;
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ChannelMean(x) => {
                let sx = self.shape(*x);
                let c = *sx.last().unwrap();
                let inv = 1.0 / c as f64;
                let data = g
                    .iter()
                    .flat_map(|gv| core::iter::repeat_n(gv * inv, c))
                    .collect();
                accumulate(&mut grads[x.0], Tensor::from_vec(sx, data).unwrap());
            }
            Op::SpatialMean(x) => {
                let sx = self.shape(*x).to_vec();
                let (h, w, c) = (sx[2], sx[3], sx[4]);
                let inv = 1.0 / (h * w) as f64;
                let mut gx = Vec::with_capacity(numel(&sx));
                for row in g.chunks_exact(c) {
                    for _ in 0..h * w {
                        gx.extend(row.iter().map(|v| v * inv));
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(&sx, gx).unwrap());
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if self.rg(*p) {
                        let data: Vec<f64> = g
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(&mut grads[p.0], Tensor::from_vec(self.shape(*p), data).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let sx = self.shape(*x);
                let c = *sx.last().unwrap();
                let mut gx = Tensor::zeros(sx);
                for (dst, src) in gx.data_mut().chunks_exact_mut(c).zip(g.chunks_exact(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SelectStep { x, t } => {
                let sx = self.shape(*x);
                let (steps, f) = (sx[1], sx[2]);
                let mut gx = Tensor::zeros(sx);
                for (i, row) in g.chunks_exact(f).enumerate() {
                    let base = (i * steps + t) * f;
                    gx.data_mut()[base..base + f].copy_from_slice(row);
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Stack(parts) => {
                let s = gy.shape();
                let (n, steps, f) = (s[0], s[1], s[2]);
                for (t, p) in parts.iter().enumerate() {
                    if !self.rg(*p) {
                        continue;
                    }
                    let mut data = Vec::with_capacity(n * f);
                    for i in 0..n {
                        let base = (i * steps + t) * f;
                        data.extend_from_slice(&g[base..base + f]);
                    }
                    accumulate(&mut grads[p.0], Tensor::from_vec(&[n, f], data).unwrap());
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let n = probs.shape()[0] as f64;
                let scale = g[0] / n;
                let data = probs
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(p, q)| (p - q) * scale)
                    .collect();
                accumulate(&mut grads[logits.0], Tensor::from_vec(probs.shape(), data).unwrap());
            }
        }
    }

    fn conv3d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &WindowGeom,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (cin, cout) = (sw[3], sw[4]);
        let n = sx[0];
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let g = gy.data();
        let want_x = self.rg(x);
        let want_w = self.rg(w);
        let mut gx = if want_x { vec![0.0; dx.len()] } else { Vec::new() };
        let mut gw = Vec::new();
        if want_x || want_w {
            let patches = Patches::new(*geom, cin);
            let (p, k) = (patches.positions(), patches.k());
            let wt = transpose(dw, k, cout);
            let mut gwt = vec![0.0; if want_w { k * cout } else { 0 }];
            let per_in = dx.len() / n;
            let mut cols = vec![0.0; p * k];
            let mut gcols = vec![0.0; if want_x { p * k } else { 0 }];
            for s in 0..n {
                let gys = &g[s * p * cout..(s + 1) * p * cout];
                if want_w {
                    patches.gather(&dx[s * per_in..(s + 1) * per_in], &mut cols);
                    for (row, grow) in cols.chunks_exact(k).zip(gys.chunks_exact(cout)) {
                        for (o, &gv) in grow.iter().enumerate() {
                            axpy(&mut gwt[o * k..(o + 1) * k], gv, row);
                        }
                    }
                }
                if want_x {
                    for (grow_cols, grow) in gcols.chunks_exact_mut(k).zip(gys.chunks_exact(cout)) {
                        grow_cols.fill(0.0);
                        for (o, &gv) in grow.iter().enumerate() {
                            axpy(grow_cols, gv, &wt[o * k..(o + 1) * k]);
                        }
                    }
                    patches.scatter(&gcols, &mut gx[s * per_in..(s + 1) * per_in]);
                }
            }
            if want_w {
                gw = transpose(&gwt, cout, k);
            }
        }
        if want_x {
            accumulate(&mut grads[x.0], Tensor::from_vec(&sx, gx).unwrap());
        }
        if want_w {
            accumulate(&mut grads[w.0], Tensor::from_vec(&sw, gw).unwrap());
        }
        if self.rg(b) {
            let mut gb = vec![0.0; cout];
            for row in g.chunks_exact(cout) {
                for (d, v) in gb.iter_mut().zip(row) {
                    *d += v;
                }
            }
            accumulate(&mut grads[b.0], Tensor::from_vec(&[cout], gb).unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        let data = (0..numel(shape)).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Checks d(sum(out * probe))/d(input) against central differences for a
    /// unary graph builder.
    fn check_unary(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = random(shape, 11);
        let mut g = Graph::new(true, 0);
        let x = g.input_with_grad(x0.clone());
        let y = build(&mut g, x);
        let probe = random(g.shape(y), 12);
        let grads = g.backward_seeded(y, probe.clone());
        let analytic = grads.of(x).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new(true, 0);
            let x = g.input(t);
            let y = build(&mut g, x);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn same_padding_geometry() {
        let g = WindowGeom::same([5, 32, 32], [3, 3, 3], [3, 3, 3]);
        assert_eq!(g.output, [2, 11, 11]);
        assert_eq!(g.pad_before, [0, 0, 0]);
        let g = WindowGeom::same([5, 32, 32], [3, 3, 3], [1, 1, 1]);
        assert_eq!(g.output, [5, 32, 32]);
        assert_eq!(g.pad_before, [1, 1, 1]);
        let g = WindowGeom::same([1, 1, 1], [3, 3, 3], [3, 3, 3]);
        assert_eq!(g.output, [1, 1, 1]);
        assert_eq!(g.pad_before, [1, 1, 1]);
    }

    #[test]
    fn conv3d_input_gradient() {
        let w = random(&[3, 3, 3, 2, 3], 1);
        let b = random(&[3], 2);
        check_unary(&[2, 4, 5, 5, 2], |g, x| {
            let w = g.input(w.clone());
            let b = g.input(b.clone());
            g.conv3d(x, w, b, [2, 2, 2])
        });
    }

    #[test]
    fn conv3d_kernel_gradient() {
        let x = random(&[2, 3, 4, 4, 2], 3);
        let b = random(&[2], 4);
        check_unary(&[3, 3, 3, 2, 2], |g, w| {
            let xi = g.input(x.clone());
            let b = g.input(b.clone());
            g.conv3d(xi, w, b, [1, 1, 1])
        });
    }

    #[test]
    fn pooling_and_reductions() {
        check_unary(&[2, 3, 5, 5, 2], |g, x| g.avg_pool3d(x, [2, 2, 2], [2, 2, 2]));
        check_unary(&[2, 3, 4, 4, 3], |g, x| g.channel_max(x));
        check_unary(&[2, 3, 4, 4, 3], |g, x| g.channel_mean(x));
        check_unary(&[2, 3, 4, 4, 3], |g, x| g.spatial_mean(x));
    }

    #[test]
    fn elementwise_and_structural() {
        check_unary(&[3, 4], |g, x| g.sigmoid(x));
        check_unary(&[3, 4], |g, x| g.tanh(x));
        check_unary(&[3, 4], |g, x| {
            let a = g.slice_last(x, 1, 2);
            let b = g.slice_last(x, 0, 1);
            g.concat(&[a, b])
        });
        check_unary(&[2, 3, 4], |g, x| {
            let s: Vec<Var> = (0..3).rev().map(|t| g.select_step(x, t)).collect();
            g.stack_steps(&s)
        });
        let gate = random(&[2, 3, 1, 1, 1], 5);
        check_unary(&[2, 3, 2, 2, 3], |g, x| {
            let gt = g.input(gate.clone());
            g.mul(x, gt)
        });
        let full = random(&[2, 3, 2, 2, 3], 6);
        check_unary(&[2, 3, 2, 2, 1], |g, x| {
            let f = g.input(full.clone());
            g.mul(f, x)
        });
        let w = random(&[4, 3], 7);
        check_unary(&[2, 4], |g, x| {
            let w = g.input(w.clone());
            let y = g.matmul(x, w);
            let y2 = g.mul(y, y);
            g.scale(y2, 0.5)
        });
    }

    #[test]
    fn batch_norm_gradient_in_both_modes() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", random(&[3], 8), true);
        let beta = store.add("b", random(&[3], 9), true);
        let mean = store.add("m", Tensor::full(&[3], 0.1), false);
        let var = store.add("v", Tensor::full(&[3], 0.7), false);
        for training in [true, false] {
            let x0 = random(&[4, 3], 10);
            let probe = random(&[4, 3], 13);
            let run = |t: Tensor, with_grad: bool| {
                let mut g = Graph::new(training, 0);
                let x = if with_grad { g.input_with_grad(t) } else { g.input(t) };
                let y = g.batch_norm(&store, x, gamma, beta, mean, var, 1e-3);
                (g, x, y)
            };
            let (g, x, y) = run(x0.clone(), true);
            let grads = g.backward_seeded(y, probe.clone());
            let analytic = grads.of(x).unwrap();
            for i in 0..x0.len() {
                let h = 1e-6;
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                let f = |t: Tensor| {
                    let (g, _, y) = run(t, false);
                    g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
                };
                let numeric = (f(p) - f(m)) / (2.0 * h);
                assert!((analytic.data()[i] - numeric).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let targets = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.0, 0.2, 0.3, 0.5]).unwrap();
        check_unary(&[2, 3], |g, x| g.softmax_cross_entropy(x, targets.clone()));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", random(&[2, 2], 1), false);
        let mut g = Graph::new(true, 0);
        let x = g.input(random(&[1, 2], 2));
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv);
        let loss = g.softmax_cross_entropy(y, Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let grads = g.backward(loss);
        assert!(grads.param(w).is_none());
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut g = Graph::inference();
        let x = g.input(random(&[3, 3], 1));
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);
    }
}
