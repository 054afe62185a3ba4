//! Parameter storage, layers and the Adam optimiser.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Updated by the optimiser. Batch-norm running statistics and frozen
    /// sub-networks are stored with `trainable = false`.
    pub trainable: bool,
}

/// Named, ordered parameter tensors. Layers hold [`ParamId`]s into the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.id_of(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// Replaces the value of a named parameter, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Construction(alloc::format!("unknown parameter `{name}`")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter of `other` under `prefix` into this store.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for e in &other.entries {
            self.assign(&alloc::format!("{prefix}{}", e.name), e.value.clone())?;
        }
        Ok(())
    }

    /// Order-sensitive hash over names and exact bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Glorot/Xavier uniform initialisation.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..numel(shape))
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
}

impl Conv3dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: [usize; 3],
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let taps = kernel.iter().product::<usize>();
        let w = glorot_uniform(&[kernel[0], kernel[1], kernel[2], cin, cout], taps * cin, taps * cout, rng);
        Conv3dLayer {
            weight: store.add(&alloc::format!("{name}.weight"), w, true),
            bias: store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]), true),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, b, self.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng);
        DenseLayer {
            weight: store.add(&alloc::format!("{name}.weight"), w, true),
            bias: store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[fan_out]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        BatchNormLayer {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::full(&[width], 1.0), true),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[width]), true),
            running_mean: store.add(&alloc::format!("{name}.running_mean"), Tensor::zeros(&[width]), false),
            running_var: store.add(&alloc::format!("{name}.running_var"), Tensor::full(&[width], 1.0), false),
            eps: 1e-3,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        g.batch_norm(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.eps,
        )
    }
}

/// Applies queued batch statistics to running averages.
pub fn apply_batch_stats(store: &mut ParamStore, updates: &[crate::graph::BatchStatsUpdate]) {
    for u in updates {
        for (dst, src) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
            for (r, b) in store.get_mut(dst).data_mut().iter_mut().zip(src) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

/// Replaces running statistics with the exact pooled mean and unbiased
/// variance of a full pass, given that pass's per-batch updates.
pub fn set_population_stats(store: &mut ParamStore, updates: &[crate::graph::BatchStatsUpdate]) {
    let mut ids: Vec<(ParamId, ParamId)> = Vec::new();
    for u in updates {
        if !ids.contains(&(u.mean_id, u.var_id)) {
            ids.push((u.mean_id, u.var_id));
        }
    }
    for (mean_id, var_id) in ids {
        let parts: Vec<_> = updates.iter().filter(|u| u.mean_id == mean_id).collect();
        let total: usize = parts.iter().map(|u| u.count).sum();
        let f = parts[0].batch_mean.len();
        let mut mean = alloc::vec![0.0; f];
        for u in &parts {
            for (m, b) in mean.iter_mut().zip(&u.batch_mean) {
                *m += b * u.count as f64 / total as f64;
            }
        }
        let mut ss = alloc::vec![0.0; f];
        for u in &parts {
            let k = u.count as f64;
            for j in 0..f {
                let d = u.batch_mean[j] - mean[j];
                ss[j] += (k - 1.0).max(0.0) * u.batch_var[j] + k * d * d;
            }
        }
        let denom = if total > 1 { (total - 1) as f64 } else { 1.0 };
        store.get_mut(mean_id).data_mut().copy_from_slice(&mean);
        for (r, s) in store.get_mut(var_id).data_mut().iter_mut().zip(&ss) {
            *r = s / denom;
        }
    }
}

/// Single LSTM layer, sequence to sequence. Gate order in the fused kernels
/// is input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmLayer {
    pub input_kernel: ParamId,
    pub recurrent_kernel: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = glorot_uniform(&[input, 4 * hidden], input, 4 * hidden, rng);
        let wh = glorot_uniform(&[hidden, 4 * hidden], hidden, 4 * hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        // unit forget bias
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmLayer {
            input_kernel: store.add(&alloc::format!("{name}.input_kernel"), wx, true),
            recurrent_kernel: store.add(&alloc::format!("{name}.recurrent_kernel"), wh, true),
            bias: store.add(&alloc::format!("{name}.bias"), b, true),
            hidden,
        }
    }

    /// `(N, T, F) -> (N, T, hidden)`, zero initial state.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Var {
        let (n, steps) = (g.shape(seq)[0], g.shape(seq)[1]);
        let h_dim = self.hidden;
        let wx = g.param(store, self.input_kernel);
        let wh = g.param(store, self.recurrent_kernel);
        let b = g.param(store, self.bias);
        let mut h = g.input(Tensor::zeros(&[n, h_dim]));
        let mut c = g.input(Tensor::zeros(&[n, h_dim]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.select_step(seq, t);
            let zx = g.matmul(xt, wx);
            let zh = g.matmul(h, wh);
            let z = g.add(zx, zh);
            let z = g.add_bias(z, b);
            let i_pre = g.slice_last(z, 0, h_dim);
            let f_pre = g.slice_last(z, h_dim, h_dim);
            let c_pre = g.slice_last(z, 2 * h_dim, h_dim);
            let o_pre = g.slice_last(z, 3 * h_dim, h_dim);
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let cand = g.tanh(c_pre);
            let o = g.sigmoid(o_pre);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            outputs.push(h);
        }
        g.stack_steps(&outputs)
    }
}

/// Adam with the conventional moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.learning_rate * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}
