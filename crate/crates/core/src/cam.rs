//! Grad-CAM over the conv stages of the mood branch.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::FrameClip;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::labels::{MoodClass, NUM_CLASSES};
use crate::models::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamLayer {
    /// The clip as fed to the first conv stage (after any input attention).
    Input,
    Conv1,
    Conv2,
    Conv3,
}

impl CamLayer {
    pub const ALL: [CamLayer; 4] = [CamLayer::Input, CamLayer::Conv1, CamLayer::Conv2, CamLayer::Conv3];

    pub fn tag(self) -> &'static str {
        match self {
            CamLayer::Input => "input",
            CamLayer::Conv1 => "conv1",
            CamLayer::Conv2 => "conv2",
            CamLayer::Conv3 => "conv3",
        }
    }

    /// The deepest conv stage whose output still has more than one cell along
    /// time, height and width; falls back to `Conv1`.
    pub fn default_for(net: &Network) -> CamLayer {
        let trace = net.config().branch.shape_trace();
        let resolves = |name: &str| {
            trace
                .iter()
                .find(|(n, _)| *n == name)
                .is_some_and(|(_, s)| s[..3].iter().all(|&d| d > 1))
        };
        [CamLayer::Conv3, CamLayer::Conv2]
            .into_iter()
            .find(|l| resolves(l.tag()))
            .unwrap_or(CamLayer::Conv1)
    }
}

impl core::str::FromStr for CamLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CamLayer::ALL
            .into_iter()
            .find(|l| l.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownLayer(format!("{s} (expected input, conv1, conv2 or conv3)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    /// `(frames, height, width)` in `[0, 1]`.
    pub heat: Tensor,
    /// Rectified map at layer resolution, before upsampling and normalisation.
    pub coarse: Tensor,
    pub target: MoodClass,
    pub layer: CamLayer,
    /// The rectified map was identically zero.
    pub zero_map: bool,
}

/// Rectified gradient-weighted channel sum. Both inputs are `(D, H, W, C)`;
/// channel weights are the mean gradient over `D, H, W`.
pub fn weighted_activation_map(activations: &Tensor, grads: &Tensor) -> Result<Tensor> {
    if activations.shape() != grads.shape() || activations.shape().len() != 4 {
        return Err(Error::shape(activations.shape(), grads.shape()));
    }
    let s = activations.shape();
    let (cells, c) = (s[0] * s[1] * s[2], s[3]);
    let mut alpha = alloc::vec![0.0; c];
    for row in grads.data().chunks_exact(c) {
        for (a, g) in alpha.iter_mut().zip(row) {
            *a += g;
        }
    }
    for a in &mut alpha {
        *a /= cells as f64;
    }
    let data = activations
        .data()
        .chunks_exact(c)
        .map(|row| row.iter().zip(&alpha).map(|(x, a)| x * a).sum::<f64>().max(0.0))
        .collect();
    Tensor::from_vec(&s[..3], data)
}

/// Trilinear resize of a `(D, H, W)` volume with half-pixel centres.
pub fn upsample_trilinear(t: &Tensor, out: [usize; 3]) -> Tensor {
    let s = t.shape();
    let src = [s[0], s[1], s[2]];
    let taps = |axis: usize, o: usize| -> (usize, usize, f64) {
        let n = src[axis];
        let x = ((o as f64 + 0.5) * n as f64 / out[axis] as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = libm::floor(x) as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let at = |d: usize, h: usize, w: usize| t.data()[(d * src[1] + h) * src[2] + w];
    let mut data = Vec::with_capacity(out.iter().product());
    for od in 0..out[0] {
        let (d0, d1, fd) = taps(0, od);
        for oh in 0..out[1] {
            let (h0, h1, fh) = taps(1, oh);
            for ow in 0..out[2] {
                let (w0, w1, fw) = taps(2, ow);
                let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                let plane = |d| lerp(lerp(at(d, h0, w0), at(d, h0, w1), fw), lerp(at(d, h1, w0), at(d, h1, w1), fw), fh);
                data.push(lerp(plane(d0), plane(d1), fd));
            }
        }
    }
    Tensor::from_vec(&out, data).unwrap()
}

/// Divides by the maximum. Returns the input unchanged and `true` when the
/// maximum is not positive.
pub fn normalize_max(t: &Tensor) -> (Tensor, bool) {
    let m = t.data().iter().copied().fold(0.0f64, f64::max);
    if m <= 0.0 {
        return (t.map(|_| 0.0), true);
    }
    (t.map(|v| (v / m).clamp(0.0, 1.0)), false)
}

/// Activation and target-logit gradient at `layer` of the mood branch, each `(D, H, W, C)`.
pub fn layer_activation_and_grad(
    net: &Network,
    clip: &FrameClip,
    target: MoodClass,
    layer: CamLayer,
) -> Result<(Tensor, Tensor)> {
    clip.expect_shape(net.input_shape())?;
    let mut g = Graph::inference();
    let x = g.input_with_grad(clip.as_batch());
    let f = net.forward(&mut g, x);
    let tap = match layer {
        CamLayer::Input => f.mood_branch.attended,
        CamLayer::Conv1 => f.mood_branch.conv[0],
        CamLayer::Conv2 => f.mood_branch.conv[1],
        CamLayer::Conv3 => f.mood_branch.conv[2],
    };
    let mut seed = Tensor::zeros(&[1, NUM_CLASSES]);
    seed.data_mut()[target.index()] = 1.0;
    let grads = g.backward_seeded(f.mood_logits, seed);
    let act = g.value(tap).clone();
    let shape = act.shape()[1..].to_vec();
    let grad = grads.of(tap).cloned().unwrap_or_else(|| Tensor::zeros(act.shape()));
    Ok((act.reshape(&shape)?, grad.reshape(&shape)?))
}

pub fn grad_cam(net: &Network, clip: &FrameClip, target: MoodClass, layer: CamLayer) -> Result<CamMap> {
    let (act, grad) = layer_activation_and_grad(net, clip, target, layer)?;
    let coarse = weighted_activation_map(&act, &grad)?;
    let [d, h, w, _] = clip.shape();
    let up = upsample_trilinear(&coarse, [d, h, w]);
    let (heat, zero_map) = normalize_max(&up);
    Ok(CamMap {
        heat,
        coarse,
        target,
        layer,
        zero_map,
    })
}
