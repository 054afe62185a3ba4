//! Spatial and temporal attention gates and their sequential (SST) and
//! parallel (PST) compositions.
//!
//! Spatial: channel-wise max and mean planes are concatenated, convolved by a
//! same-padded 3x3x3 kernel to one channel and squashed by a sigmoid, giving
//! `F_s` of shape `(N, D, H, W, 1)`.
//!
//! Temporal: each frame is reduced to its per-channel spatial mean, the frame
//! sequence runs through two stacked LSTMs, and a per-step dense unit with a
//! sigmoid gives `F_t` of shape `(N, D, 1, 1, 1)`.
//!
//! Both gates multiply the clip they were computed from, broadcasting over the
//! missing axes.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameClip;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv3dLayer, DenseLayer, LstmLayer, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Spatial,
    Temporal,
    Sst,
    Pst,
}

impl AttentionKind {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Spatial => "spatial",
            AttentionKind::Temporal => "temporal",
            AttentionKind::Sst => "sst",
            AttentionKind::Pst => "pst",
        }
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, AttentionKind::Spatial | AttentionKind::Sst | AttentionKind::Pst)
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, AttentionKind::Temporal | AttentionKind::Sst | AttentionKind::Pst)
    }
}

impl core::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionKind::None),
            "spatial" => Ok(AttentionKind::Spatial),
            "temporal" => Ok(AttentionKind::Temporal),
            "sst" => Ok(AttentionKind::Sst),
            "pst" => Ok(AttentionKind::Pst),
            other => Err(Error::Validation(format!(
                "unknown attention `{other}` (expected none, spatial, temporal, sst or pst)"
            ))),
        }
    }
}

/// Where the gate sits inside a classifier branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    #[default]
    Input,
    AfterFirstConv,
}

fn default_hidden() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// PST only: multiply `I_s` by `I_t`, applying the input twice.
    #[serde(default)]
    pub literal_product: bool,
    #[serde(default)]
    pub site: AttentionSite,
    #[serde(default = "default_hidden")]
    pub lstm_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self::of(AttentionKind::None)
    }
}

impl AttentionConfig {
    pub fn of(kind: AttentionKind) -> Self {
        AttentionConfig {
            kind,
            literal_product: false,
            site: AttentionSite::Input,
            lstm_hidden: default_hidden(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match (self.kind, self.literal_product) {
            (AttentionKind::Pst, true) => "pst-literal",
            (k, _) => k.tag(),
        }
    }
}

/// `F_s` for one clip, `(frames, height, width, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionMap {
    pub weights: Tensor,
}

/// `F_t` for one clip, `(frames, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttentionMap {
    pub weights: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialAttention {
    pub conv: Conv3dLayer,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        SpatialAttention {
            conv: Conv3dLayer::new(store, &format!("{prefix}spatial.conv"), [3, 3, 3], 2, 1, [1, 1, 1], rng),
        }
    }

    /// Convolution output before the sigmoid.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mx = g.channel_max(x);
        let avg = g.channel_mean(x);
        let desc = g.concat(&[mx, avg]);
        self.conv.forward(g, store, desc)
    }

    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let z = self.logits(g, store, x);
        g.sigmoid(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalAttention {
    pub lstm: [LstmLayer; 2],
    pub dense: DenseLayer,
    pub channels: usize,
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let l1 = LstmLayer::new(store, &format!("{prefix}temporal.lstm1"), channels, hidden, rng);
        let l2 = LstmLayer::new(store, &format!("{prefix}temporal.lstm2"), hidden, hidden, rng);
        let dense = DenseLayer::new(store, &format!("{prefix}temporal.dense"), hidden, 1, rng);
        TemporalAttention {
            lstm: [l1, l2],
            dense,
            channels,
        }
    }

    /// Per-frame scores before the sigmoid, `(N, D)`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        let desc = g.spatial_mean(x);
        let h1 = self.lstm[0].forward(g, store, desc);
        let h2 = self.lstm[1].forward(g, store, h1);
        let hidden = self.lstm[1].hidden;
        let flat = g.reshape(h2, &[n * d, hidden]);
        let s = self.dense.forward(g, store, flat);
        g.reshape(s, &[n, d])
    }

    /// `F_t` reshaped to broadcast over `(N, D, H, W, C)`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
        let z = self.logits(g, store, x);
        let s = g.sigmoid(z);
        g.reshape(s, &[n, d, 1, 1, 1])
    }
}

/// Attended clip plus the gates that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub spatial_gate: Option<Var>,
    pub temporal_gate: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionModule {
    Spatial(SpatialAttention),
    Temporal(TemporalAttention),
    Sst(SpatialAttention, TemporalAttention),
    Pst {
        spatial: SpatialAttention,
        temporal: TemporalAttention,
        literal_product: bool,
    },
}

impl AttentionModule {
    /// `None` for [`AttentionKind::None`].
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<Self> {
        let spatial = |store: &mut ParamStore, rng: &mut ChaCha8Rng| SpatialAttention::new(store, prefix, rng);
        let temporal = |store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            TemporalAttention::new(store, prefix, channels, cfg.lstm_hidden, rng)
        };
        Some(match cfg.kind {
            AttentionKind::None => return None,
            AttentionKind::Spatial => AttentionModule::Spatial(spatial(store, rng)),
            AttentionKind::Temporal => AttentionModule::Temporal(temporal(store, rng)),
            AttentionKind::Sst => {
                let s = spatial(store, rng);
                AttentionModule::Sst(s, temporal(store, rng))
            }
            AttentionKind::Pst => {
                let s = spatial(store, rng);
                AttentionModule::Pst {
                    spatial: s,
                    temporal: temporal(store, rng),
                    literal_product: cfg.literal_product,
                }
            }
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Attended {
        match self {
            AttentionModule::Spatial(s) => {
                let fs = s.gate(g, store, x);
                Attended {
                    output: g.mul(x, fs),
                    spatial_gate: Some(fs),
                    temporal_gate: None,
                }
            }
            AttentionModule::Temporal(t) => {
                let ft = t.gate(g, store, x);
                Attended {
                    output: g.mul(x, ft),
                    spatial_gate: None,
                    temporal_gate: Some(ft),
                }
            }
            AttentionModule::Sst(s, t) => {
                let fs = s.gate(g, store, x);
                let xs = g.mul(x, fs);
                let ft = t.gate(g, store, xs);
                Attended {
                    output: g.mul(xs, ft),
                    spatial_gate: Some(fs),
                    temporal_gate: Some(ft),
                }
            }
            AttentionModule::Pst {
                spatial,
                temporal,
                literal_product,
            } => {
                let fs = spatial.gate(g, store, x);
                let ft = temporal.gate(g, store, x);
                let xs = g.mul(x, fs);
                let output = if *literal_product {
                    let xt = g.mul(x, ft);
                    g.mul(xs, xt)
                } else {
                    g.mul(xs, ft)
                };
                Attended {
                    output,
                    spatial_gate: Some(fs),
                    temporal_gate: Some(ft),
                }
            }
        }
    }
}

fn strip_batch(t: &Tensor) -> Tensor {
    t.clone().reshape(&t.shape()[1..]).unwrap()
}

fn check_channels(clip: &FrameClip, temporal: &TemporalAttention) -> Result<()> {
    let s = clip.shape();
    if s[3] != temporal.channels {
        return Err(Error::shape(&[s[0], s[1], s[2], temporal.channels], &s));
    }
    Ok(())
}

fn temporal_map(g: &Graph, ft: Var) -> TemporalAttentionMap {
    let d = g.shape(ft)[1];
    TemporalAttentionMap {
        weights: g.value(ft).clone().reshape(&[d, 1]).unwrap(),
    }
}

/// Spatial gate `F_s` and `I_s = I * F_s` for one clip.
pub fn spatial_attention(
    clip: &FrameClip,
    module: &SpatialAttention,
    store: &ParamStore,
) -> Result<(SpatialAttentionMap, Tensor)> {
    let mut g = Graph::inference();
    let x = g.input(clip.as_batch());
    let fs = module.gate(&mut g, store, x);
    let out = g.mul(x, fs);
    Ok((
        SpatialAttentionMap {
            weights: strip_batch(g.value(fs)),
        },
        strip_batch(g.value(out)),
    ))
}

/// Temporal gate `F_t` and `I_t = I * F_t` for one clip.
pub fn temporal_attention(
    clip: &FrameClip,
    module: &TemporalAttention,
    store: &ParamStore,
) -> Result<(TemporalAttentionMap, Tensor)> {
    check_channels(clip, module)?;
    let mut g = Graph::inference();
    let x = g.input(clip.as_batch());
    let ft = module.gate(&mut g, store, x);
    let out = g.mul(x, ft);
    Ok((temporal_map(&g, ft), strip_batch(g.value(out))))
}

/// Spatial then temporal: `I_st = I_s * F_t(I_s)`.
pub fn sst_attention(
    clip: &FrameClip,
    spatial: &SpatialAttention,
    temporal: &TemporalAttention,
    store: &ParamStore,
) -> Result<Tensor> {
    check_channels(clip, temporal)?;
    let module = AttentionModule::Sst(*spatial, *temporal);
    let mut g = Graph::inference();
    let x = g.input(clip.as_batch());
    let a = module.apply(&mut g, store, x);
    Ok(strip_batch(g.value(a.output)))
}

/// Both gates from the original clip. Default `I * F_s * F_t`; with
/// `literal_product`, `I_s * I_t`.
pub fn pst_attention(
    clip: &FrameClip,
    spatial: &SpatialAttention,
    temporal: &TemporalAttention,
    store: &ParamStore,
    literal_product: bool,
) -> Result<Tensor> {
    check_channels(clip, temporal)?;
    let module = AttentionModule::Pst {
        spatial: *spatial,
        temporal: *temporal,
        literal_product,
    };
    let mut g = Graph::inference();
    let x = g.input(clip.as_batch());
    let a = module.apply(&mut g, store, x);
    Ok(strip_batch(g.value(a.output)))
}

/// Sets the gate's final bias to `bias` and zeroes its weights, making the
/// pre-sigmoid output the constant `bias` everywhere.
pub fn force_spatial_logit(store: &mut ParamStore, module: &SpatialAttention, bias: f64) {
    store.get_mut(module.conv.weight).data_mut().fill(0.0);
    store.get_mut(module.conv.bias).data_mut().fill(bias);
}

/// Temporal counterpart of [`force_spatial_logit`].
pub fn force_temporal_logit(store: &mut ParamStore, module: &TemporalAttention, bias: f64) {
    store.get_mut(module.dense.weight).data_mut().fill(0.0);
    store.get_mut(module.dense.bias).data_mut().fill(bias);
}

/// Collects gate values from every attention node in a forward pass.
pub fn gate_values(g: &Graph, attended: &Attended) -> Vec<f64> {
    let mut out = Vec::new();
    for v in [attended.spatial_gate, attended.temporal_gate].into_iter().flatten() {
        out.extend_from_slice(g.value(v).data());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn clip(seed_: u64, shape: [usize; 4]) -> FrameClip {
        let mut rng = seed::rng(seed_);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>()).collect();
        FrameClip::new("c", 0, Tensor::from_vec(&shape, data).unwrap()).unwrap()
    }

    fn modules(hidden: usize) -> (ParamStore, SpatialAttention, TemporalAttention) {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(9);
        let s = SpatialAttention::new(&mut store, "", &mut rng);
        let t = TemporalAttention::new(&mut store, "", 3, hidden, &mut rng);
        (store, s, t)
    }

    #[test]
    fn zero_logits_give_half_gates() {
        let (mut store, s, t) = modules(16);
        force_spatial_logit(&mut store, &s, 0.0);
        force_temporal_logit(&mut store, &t, 0.0);
        let c = clip(1, [5, 32, 32, 3]);
        let (fs, is) = spatial_attention(&c, &s, &store).unwrap();
        assert!(fs.weights.data().iter().all(|&w| w == 0.5));
        assert_eq!(fs.weights.shape(), &[5, 32, 32, 1]);
        assert!(is.data().iter().zip(c.pixels().data()).all(|(a, b)| *a == 0.5 * b));
        let (ft, it) = temporal_attention(&c, &t, &store).unwrap();
        assert_eq!(ft.weights.shape(), &[5, 1]);
        assert!(ft.weights.data().iter().all(|&w| w == 0.5));
        assert!(it.data().iter().zip(c.pixels().data()).all(|(a, b)| *a == 0.5 * b));
        let sst = sst_attention(&c, &s, &t, &store).unwrap();
        assert!(sst.data().iter().zip(c.pixels().data()).all(|(a, b)| *a == 0.25 * b));
        let pst = pst_attention(&c, &s, &t, &store, false).unwrap();
        assert!(pst.data().iter().zip(c.pixels().data()).all(|(a, b)| *a == 0.25 * b));
        let lit = pst_attention(&c, &s, &t, &store, true).unwrap();
        assert!(lit.data().iter().zip(c.pixels().data()).all(|(a, b)| (*a - 0.25 * b * b).abs() < 1e-15));
    }

    #[test]
    fn saturated_gates_reproduce_the_input() {
        let (mut store, s, t) = modules(16);
        force_spatial_logit(&mut store, &s, 40.0);
        force_temporal_logit(&mut store, &t, 40.0);
        let c = clip(2, [5, 32, 32, 3]);
        for out in [
            sst_attention(&c, &s, &t, &store).unwrap(),
            pst_attention(&c, &s, &t, &store, false).unwrap(),
        ] {
            assert!(out.max_abs_diff(c.pixels()) < 1e-3);
        }
    }

    #[test]
    fn zero_clip_has_zero_pooling_planes() {
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros(&[1, 5, 4, 4, 3]));
        let m = g.channel_max(x);
        let a = g.channel_mean(x);
        assert!(g.value(m).data().iter().chain(g.value(a).data()).all(|v| *v == 0.0));
    }

    #[test]
    fn channel_max_dominates_mean() {
        let c = clip(3, [5, 8, 8, 3]);
        let mut g = Graph::inference();
        let x = g.input(c.as_batch());
        let m = g.channel_max(x);
        let a = g.channel_mean(x);
        let px = c.pixels().data();
        for (i, (mv, av)) in g.value(m).data().iter().zip(g.value(a).data()).enumerate() {
            let ch = &px[i * 3..i * 3 + 3];
            assert_eq!(*mv, ch.iter().copied().fold(f64::MIN, f64::max));
            assert!(mv >= av);
        }
    }

    #[test]
    fn sst_order_is_observable() {
        let (mut store, s, t) = modules(16);
        // Spatial gate that depends strongly on content.
        let w = store.get_mut(s.conv.weight);
        w.data_mut().iter_mut().for_each(|v| *v *= 8.0);
        let c = clip(4, [5, 16, 16, 3]);
        let mut g = Graph::inference();
        let x = g.input(c.as_batch());
        let ft_raw = t.gate(&mut g, &store, x);
        let fs = s.gate(&mut g, &store, x);
        let xs = g.mul(x, fs);
        let ft_seq = t.gate(&mut g, &store, xs);
        assert!(g.value(ft_raw).max_abs_diff(g.value(ft_seq)) > 1e-6);
    }

    #[test]
    fn literal_pst_never_exceeds_default() {
        let (store, s, t) = modules(16);
        for k in 0..4 {
            let c = clip(10 + k, [5, 8, 8, 3]);
            let def = pst_attention(&c, &s, &t, &store, false).unwrap();
            let lit = pst_attention(&c, &s, &t, &store, true).unwrap();
            assert!(lit.data().iter().zip(def.data()).all(|(l, d)| l <= d));
        }
    }

    #[test]
    fn temporal_rejects_wrong_channels() {
        let (store, _, t) = modules(8);
        let c = clip(5, [5, 8, 8, 4]);
        assert!(matches!(temporal_attention(&c, &t, &store), Err(Error::Shape { .. })));
    }

    #[test]
    fn gates_are_reproducible() {
        let (store, _, t) = modules(128);
        let c = clip(6, [5, 32, 32, 3]);
        let a = temporal_attention(&c, &t, &store).unwrap();
        let b = temporal_attention(&c, &t, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_frames_give_identical_descriptors() {
        let one = clip(7, [1, 8, 8, 3]);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(one.pixels().data());
        }
        let c = Tensor::from_vec(&[1, 5, 8, 8, 3], data).unwrap();
        let mut g = Graph::inference();
        let x = g.input(c);
        let d = g.spatial_mean(x);
        let v = g.value(d).data();
        for f in 1..5 {
            assert_eq!(&v[f * 3..f * 3 + 3], &v[0..3]);
        }
    }

    #[test]
    fn kind_tags_round_trip() {
        for k in [
            AttentionKind::None,
            AttentionKind::Spatial,
            AttentionKind::Temporal,
            AttentionKind::Sst,
            AttentionKind::Pst,
        ] {
            assert_eq!(k.tag().parse::<AttentionKind>().unwrap(), k);
        }
        assert!("cbam".parse::<AttentionKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gates_in_open_unit_interval(seed_ in 0u64..1000) {
            let (store, s, t) = modules(8);
            let c = clip(seed_, [5, 8, 8, 3]);
            let (fs, _) = spatial_attention(&c, &s, &store).unwrap();
            let (ft, _) = temporal_attention(&c, &t, &store).unwrap();
            prop_assert!(fs.weights.data().iter().chain(ft.weights.data()).all(|w| *w > 0.0 && *w < 1.0));
        }

        #[test]
        fn temporal_gate_ignores_pixel_order(seed_ in 0u64..1000) {
            let (store, _, t) = modules(8);
            let c = clip(seed_, [5, 6, 6, 3]);
            // Reverse pixel order within each frame.
            let px = c.pixels().data();
            let mut permuted = Vec::with_capacity(px.len());
            for frame in px.chunks_exact(36 * 3) {
                for p in frame.chunks_exact(3).rev() {
                    permuted.extend_from_slice(p);
                }
            }
            let pc = FrameClip::new("c", 0, Tensor::from_vec(&[5, 6, 6, 3], permuted).unwrap()).unwrap();
            let a = temporal_attention(&c, &t, &store).unwrap().0;
            let b = temporal_attention(&pc, &t, &store).unwrap().0;
            prop_assert!(a.weights.max_abs_diff(&b.weights) < 1e-12);
        }

        #[test]
        fn spatial_logits_shift_with_content(seed_ in 0u64..1000) {
            let (store, s, _) = modules(8);
            // Content in the interior, zero border of 2 pixels.
            let mut rng = seed::rng(seed_);
            let (d, h, w) = (3, 10, 10);
            let mut base = Tensor::zeros(&[1, d, h, w, 3]);
            for z in 0..d {
                for y in 2..h - 3 {
                    for x in 2..w - 3 {
                        for c in 0..3 {
                            let off = base.offset(&[0, z, y, x, c]);
                            base.data_mut()[off] = rng.random::<f64>();
                        }
                    }
                }
            }
            let mut shifted = Tensor::zeros(&[1, d, h, w, 3]);
            for z in 0..d {
                for y in 0..h - 1 {
                    for x in 0..w - 1 {
                        for c in 0..3 {
                            let v = base.at(&[0, z, y, x, c]);
                            let off = shifted.offset(&[0, z, y + 1, x + 1, c]);
                            shifted.data_mut()[off] = v;
                        }
                    }
                }
            }
            let run = |t: Tensor| {
                let mut g = Graph::inference();
                let x = g.input(t);
                let z = s.logits(&mut g, &store, x);
                g.value(z).clone()
            };
            let (za, zb) = (run(base), run(shifted));
            for z in 0..d {
                for y in 0..h - 1 {
                    for x in 0..w - 1 {
                        let a = za.at(&[0, z, y, x, 0]);
                        let b = zb.at(&[0, z, y + 1, x + 1, 0]);
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_values_are_collected() {
        let (store, s, t) = modules(8);
        let module = AttentionModule::Sst(s, t);
        let mut g = Graph::inference();
        let x = g.input(clip(8, [5, 8, 8, 3]).as_batch());
        let a = module.apply(&mut g, &store, x);
        assert_eq!(gate_values(&g, &a).len(), 5 * 8 * 8 + 5);
    }
}
