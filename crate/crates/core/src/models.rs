//! The four mood classifiers.
//!
//! * **1-CNN**: one branch of three strided 3D conv stages, each followed by
//!   average pooling, then flatten, batch norm, a 512-unit dense layer,
//!   dropout and a 3-way softmax.
//! * **2-CNN+MLP**: a mood-trained and a delta-trained 1-CNN, frozen; their
//!   512-d penultimate features are concatenated (mood first) and classified
//!   by a 1024 -> 512 -> 3 MLP.
//! * **2-CNN**: the same two branches trained jointly on `L_m + L_delta`; only
//!   the mood head is read at inference.
//! * **TS-Net**: a 1-CNN student distilled from a trained 2-CNN+MLP teacher.
//!
//! Every branch can carry an attention gate in front of its first conv stage
//! (or right after it). Class order is `(-1, 0, +1)` everywhere.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind, AttentionModule, AttentionSite, Attended};
use crate::data::{FrameClip, CLIP_SHAPE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, WindowGeom};
use crate::labels::{MoodClass, NUM_CLASSES};
use crate::loss::{self, DistillationConfig};
use crate::nn::{BatchNormLayer, Conv3dLayer, DenseLayer, ParamStore};
use crate::seed;
use crate::tensor::Tensor;
use crate::train::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "1cnn")]
    OneCnn,
    #[serde(rename = "2cnn-mlp")]
    TwoCnnMlp,
    #[serde(rename = "2cnn")]
    TwoCnn,
    #[serde(rename = "tsnet")]
    TsNet,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::OneCnn => "1cnn",
            Architecture::TwoCnnMlp => "2cnn-mlp",
            Architecture::TwoCnn => "2cnn",
            Architecture::TsNet => "tsnet",
        }
    }

    /// Whether training needs delta labels.
    pub fn uses_delta(self) -> bool {
        !matches!(self, Architecture::OneCnn)
    }
}

impl core::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1cnn" | "1-cnn" => Ok(Architecture::OneCnn),
            "2cnn-mlp" | "2-cnn+mlp" | "2cnn+mlp" => Ok(Architecture::TwoCnnMlp),
            "2cnn" | "2-cnn" => Ok(Architecture::TwoCnn),
            "tsnet" | "ts-net" => Ok(Architecture::TsNet),
            other => Err(Error::Validation(format!(
                "unknown architecture `{other}` (expected 1cnn, 2cnn-mlp, 2cnn or tsnet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnBranchSpec {
    pub input_shape: [usize; 4],
    pub conv_channels: [usize; 3],
    pub kernel: [usize; 3],
    pub conv_stride: usize,
    /// Average-pool window and stride.
    pub pool: usize,
    pub dense_units: usize,
    pub classes: usize,
    pub dropout_rate: f64,
}

impl Default for CnnBranchSpec {
    fn default() -> Self {
        CnnBranchSpec {
            input_shape: CLIP_SHAPE,
            conv_channels: [16, 32, 32],
            kernel: [3, 3, 3],
            conv_stride: 3,
            pool: 2,
            dense_units: 512,
            classes: NUM_CLASSES,
            dropout_rate: 0.4,
        }
    }
}

impl CnnBranchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(m));
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has an empty axis", self.input_shape));
        }
        if self.conv_channels.contains(&0) || self.kernel.contains(&0) {
            return bad("conv channels and kernel sizes must be positive".into());
        }
        if self.conv_stride == 0 || self.pool == 0 || self.dense_units == 0 {
            return bad("stride, pool and dense width must be positive".into());
        }
        if self.classes != NUM_CLASSES {
            return bad(format!("classifier must have {NUM_CLASSES} outputs, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Output shape `(D, H, W, C)` after every layer, from stride arithmetic.
    pub fn shape_trace(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [d, h, w, c] = self.input_shape;
        let mut dims = [d, h, w];
        let mut out = Vec::new();
        out.push(("input", alloc::vec![d, h, w, c]));
        let names = [("conv1", "pool1"), ("conv2", "pool2"), ("conv3", "pool3")];
        for (stage, (cn, pn)) in names.iter().enumerate() {
            let ch = self.conv_channels[stage];
            let s = self.conv_stride;
            dims = WindowGeom::same(dims, self.kernel, [s, s, s]).output;
            out.push((*cn, alloc::vec![dims[0], dims[1], dims[2], ch]));
            let p = self.pool;
            dims = WindowGeom::same(dims, [p, p, p], [p, p, p]).output;
            out.push((*pn, alloc::vec![dims[0], dims[1], dims[2], ch]));
        }
        let flat = dims.iter().product::<usize>() * self.conv_channels[2];
        out.push(("flatten", alloc::vec![flat]));
        out.push(("batch_norm", alloc::vec![flat]));
        out.push(("dense", alloc::vec![self.dense_units]));
        out.push(("softmax", alloc::vec![self.classes]));
        out
    }

    pub fn flat_width(&self) -> usize {
        self.shape_trace()
            .iter()
            .find(|(n, _)| *n == "flatten")
            .map(|(_, s)| s[0])
            .unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub fused_feature_width: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec {
            fused_feature_width: 1024,
            mlp_hidden: 512,
            classes: NUM_CLASSES,
        }
    }
}

impl FusionSpec {
    pub fn for_branch(spec: &CnnBranchSpec) -> Self {
        FusionSpec {
            fused_feature_width: 2 * spec.dense_units,
            mlp_hidden: spec.dense_units,
            classes: NUM_CLASSES,
        }
    }

    fn check(&self, branch: &CnnBranchSpec) -> Result<()> {
        if self.fused_feature_width != 2 * branch.dense_units {
            return Err(Error::Construction(format!(
                "fused width {} must be twice the branch penultimate width {}",
                self.fused_feature_width, branch.dense_units
            )));
        }
        if self.classes != NUM_CLASSES || self.mlp_hidden == 0 {
            return Err(Error::Construction("fusion MLP must map to 3 classes".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a network skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub attention: AttentionConfig,
    pub branch: CnnBranchSpec,
    pub fusion: FusionSpec,
    #[serde(default)]
    pub distillation: Option<DistillationConfig>,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, attention: AttentionConfig) -> Self {
        let branch = CnnBranchSpec::default();
        ModelConfig {
            architecture,
            attention,
            branch,
            fusion: FusionSpec::for_branch(&branch),
            distillation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        if self.architecture == Architecture::TwoCnnMlp {
            self.fusion.check(&self.branch)?;
        }
        if let Some(d) = &self.distillation {
            d.validate()?;
        }
        Ok(())
    }
}

/// One 1-CNN, optionally preceded by an attention gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub attention: Option<AttentionModule>,
    pub site: AttentionSite,
    pub conv: [Conv3dLayer; 3],
    pub norm: BatchNormLayer,
    pub hidden: DenseLayer,
    pub head: DenseLayer,
    pub dropout: f64,
    pub pool: usize,
}

/// Tapped activations of one branch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub logits: Var,
    /// Post-ReLU dense features, before dropout.
    pub features: Var,
    /// The clip as seen by the first conv stage (attended if a gate is on the input).
    pub attended: Var,
    /// Post-ReLU output of each conv stage.
    pub conv: [Var; 3],
    pub gates: Option<Attended>,
}

impl Branch {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &CnnBranchSpec,
        attention: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let site_channels = match attention.site {
            AttentionSite::Input => spec.input_shape[3],
            AttentionSite::AfterFirstConv => spec.conv_channels[0],
        };
        let gate = AttentionModule::build(store, prefix, attention, site_channels, rng);
        let s = spec.conv_stride;
        let mut cin = spec.input_shape[3];
        let conv = core::array::from_fn(|i| {
            let layer = Conv3dLayer::new(
                store,
                &format!("{prefix}conv{}", i + 1),
                spec.kernel,
                cin,
                spec.conv_channels[i],
                [s, s, s],
                rng,
            );
            cin = spec.conv_channels[i];
            layer
        });
        let flat = spec.flat_width();
        let norm = BatchNormLayer::new(store, &format!("{prefix}bn"), flat);
        let hidden = DenseLayer::new(store, &format!("{prefix}dense"), flat, spec.dense_units, rng);
        let head = DenseLayer::new(store, &format!("{prefix}head"), spec.dense_units, spec.classes, rng);
        Ok(Branch {
            attention: gate,
            site: attention.site,
            conv,
            norm,
            hidden,
            head,
            dropout: spec.dropout_rate,
            pool: spec.pool,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> BranchOutput {
        let mut gates = None;
        let mut h = x;
        if let (Some(att), AttentionSite::Input) = (&self.attention, self.site) {
            let a = att.apply(g, store, h);
            h = a.output;
            gates = Some(a);
        }
        let attended = h;
        let p = self.pool;
        let mut taps = [x; 3];
        for (i, conv) in self.conv.iter().enumerate() {
            let z = conv.forward(g, store, h);
            h = g.relu(z);
            if i == 0 {
                if let (Some(att), AttentionSite::AfterFirstConv) = (&self.attention, self.site) {
                    let a = att.apply(g, store, h);
                    h = a.output;
                    gates = Some(a);
                }
            }
            taps[i] = h;
            h = g.avg_pool3d(h, [p, p, p], [p, p, p]);
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat]);
        let h = self.norm.forward(g, store, h);
        let z = self.hidden.forward(g, store, h);
        let features = g.relu(z);
        let d = g.dropout(features, self.dropout);
        let logits = self.head.forward(g, store, d);
        BranchOutput {
            logits,
            features,
            attended,
            conv: taps,
            gates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Single(Branch),
    /// End-to-end two-branch model. With an input-site gate, one attention
    /// module feeds both branches, so the delta loss also trains the gate the
    /// mood head sees.
    Dual {
        gate: Option<AttentionModule>,
        mood: Branch,
        delta: Branch,
    },
    Fusion {
        mood: Branch,
        delta: Branch,
        hidden: DenseLayer,
        head: DenseLayer,
        dropout: f64,
    },
}

/// Outputs of a network forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub mood_logits: Var,
    pub delta_logits: Option<Var>,
    pub mood_branch: BranchOutput,
    pub delta_branch: Option<BranchOutput>,
}

/// Parameters plus the layout that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

pub const SINGLE_PREFIX: &str = "branch.";
pub const MOOD_PREFIX: &str = "mood.";
pub const DELTA_PREFIX: &str = "delta.";
pub const SHARED_PREFIX: &str = "shared.";

impl Network {
    /// Builds a freshly initialised network. Equal seeds give identical parameters.
    pub fn new(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed::derive_str(init_seed, "init"));
        let spec = &config.branch;
        let att = &config.attention;
        let layout = match config.architecture {
            Architecture::OneCnn | Architecture::TsNet => {
                Layout::Single(Branch::new(&mut store, SINGLE_PREFIX, spec, att, &mut rng)?)
            }
            Architecture::TwoCnn => {
                let shared = att.site == AttentionSite::Input;
                let gate = if shared {
                    AttentionModule::build(&mut store, SHARED_PREFIX, att, spec.input_shape[3], &mut rng)
                } else {
                    None
                };
                let branch_att = if shared { AttentionConfig::of(AttentionKind::None) } else { *att };
                Layout::Dual {
                    gate,
                    mood: Branch::new(&mut store, MOOD_PREFIX, spec, &branch_att, &mut rng)?,
                    delta: Branch::new(&mut store, DELTA_PREFIX, spec, &branch_att, &mut rng)?,
                }
            }
            Architecture::TwoCnnMlp => {
                let mood = Branch::new(&mut store, MOOD_PREFIX, spec, att, &mut rng)?;
                let delta = Branch::new(&mut store, DELTA_PREFIX, spec, att, &mut rng)?;
                let f = &config.fusion;
                let hidden = DenseLayer::new(&mut store, "mlp.hidden", f.fused_feature_width, f.mlp_hidden, &mut rng);
                let head = DenseLayer::new(&mut store, "mlp.head", f.mlp_hidden, f.classes, &mut rng);
                store.freeze_prefix(MOOD_PREFIX);
                store.freeze_prefix(DELTA_PREFIX);
                Layout::Fusion {
                    mood,
                    delta,
                    hidden,
                    head,
                    dropout: spec.dropout_rate,
                }
            }
        };
        Ok(Network {
            config: *config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.config.branch.input_shape
    }

    /// The branch whose conv stages drive mood prediction.
    pub fn mood_branch(&self) -> &Branch {
        match &self.layout {
            Layout::Single(b) => b,
            Layout::Dual { mood, .. } | Layout::Fusion { mood, .. } => mood,
        }
    }

    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let want = self.input_shape();
        if s.len() != 5 || s[1..] != want[..] {
            let mut expected = alloc::vec![s.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&want);
            return Err(Error::shape(&expected, s));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Forward {
        let st = &self.store;
        match &self.layout {
            Layout::Single(b) => {
                let out = b.forward(g, st, x);
                Forward {
                    mood_logits: out.logits,
                    delta_logits: None,
                    mood_branch: out,
                    delta_branch: None,
                }
            }
            Layout::Dual { gate, mood, delta } => {
                let a = gate.map(|m| m.apply(g, st, x));
                let x = a.map_or(x, |a| a.output);
                let mut m = mood.forward(g, st, x);
                let d = delta.forward(g, st, x);
                if a.is_some() {
                    m.gates = a;
                }
                Forward {
                    mood_logits: m.logits,
                    delta_logits: Some(d.logits),
                    mood_branch: m,
                    delta_branch: Some(d),
                }
            }
            Layout::Fusion {
                mood,
                delta,
                hidden,
                head,
                dropout,
            } => {
                let m = mood.forward(g, st, x);
                let d = delta.forward(g, st, x);
                let fused = g.concat(&[m.features, d.features]);
                let h = hidden.forward(g, st, fused);
                let h = g.relu(h);
                let h = g.dropout(h, *dropout);
                let logits = head.forward(g, st, h);
                Forward {
                    mood_logits: logits,
                    delta_logits: None,
                    mood_branch: m,
                    delta_branch: Some(d),
                }
            }
        }
    }

    /// Mood logits `(N, 3)` in inference mode.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let f = self.forward(&mut g, x);
        Ok(g.value(f.mood_logits).clone())
    }

    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<[f64; 3]>> {
        let z = self.logits(batch)?;
        Ok(z.data()
            .chunks_exact(NUM_CLASSES)
            .map(|row| {
                let p = loss::softmax(row);
                [p[0], p[1], p[2]]
            })
            .collect())
    }

    /// Mood probabilities for one clip, class order `(-1, 0, +1)`.
    pub fn predict(&self, clip: &FrameClip) -> Result<[f64; 3]> {
        clip.expect_shape(self.input_shape())?;
        Ok(self.predict_batch(&clip.as_batch())?[0])
    }

    pub fn classify(&self, clip: &FrameClip) -> Result<MoodClass> {
        Ok(argmax_class(&self.predict(clip)?))
    }

    /// Concatenated `(mood, delta)` penultimate features of a fusion model.
    pub fn fused_features(&self, clip: &FrameClip) -> Result<Tensor> {
        clip.expect_shape(self.input_shape())?;
        let Layout::Fusion { mood, delta, .. } = &self.layout else {
            return Err(Error::Construction("fused features need a 2-CNN+MLP".into()));
        };
        let mut g = Graph::inference();
        let x = g.input(clip.as_batch());
        let m = mood.forward(&mut g, &self.store, x);
        let d = delta.forward(&mut g, &self.store, x);
        let f = g.concat(&[m.features, d.features]);
        Ok(g.value(f).clone())
    }

    /// Penultimate (post-ReLU dense) features of the mood branch.
    pub fn branch_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let out = self.mood_branch().forward(&mut g, &self.store, x);
        Ok(g.value(out.features).clone())
    }

    /// Replaces every parameter named `SINGLE_PREFIX*` in `source` into this
    /// network under `prefix`.
    fn import_branch(&mut self, prefix: &str, source: &Network) -> Result<()> {
        for e in source.store.entries() {
            let Some(rest) = e.name.strip_prefix(SINGLE_PREFIX) else {
                continue;
            };
            self.store.assign(&format!("{prefix}{rest}"), e.value.clone())?;
        }
        Ok(())
    }
}

pub fn argmax_class(p: &[f64; 3]) -> MoodClass {
    let mut best = 0;
    for i in 1..3 {
        if p[i] > p[best] {
            best = i;
        }
    }
    MoodClass::from_index(best).unwrap()
}

/// A network together with how it was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub fold: Option<usize>,
    pub hyper: Hyperparams,
    pub epochs_run: usize,
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

/// Builds a 1-CNN with the given spec.
pub fn build_1cnn(spec: &CnnBranchSpec, attention: &AttentionConfig, init_seed: u64) -> Result<Network> {
    let cfg = ModelConfig {
        architecture: Architecture::OneCnn,
        attention: *attention,
        branch: *spec,
        fusion: FusionSpec::for_branch(spec),
        distillation: None,
    };
    Network::new(&cfg, init_seed)
}

/// Builds a two-headed 2-CNN.
pub fn build_2cnn(spec: &CnnBranchSpec, attention: &AttentionConfig, init_seed: u64) -> Result<Network> {
    let cfg = ModelConfig {
        architecture: Architecture::TwoCnn,
        ..ModelConfig::new(Architecture::TwoCnn, *attention)
    };
    Network::new(&ModelConfig { branch: *spec, ..cfg }, init_seed)
}

/// Fuses a mood-trained and a delta-trained 1-CNN. The branches are copied in
/// and frozen; only the MLP is left trainable.
pub fn build_2cnn_mlp(
    mood_branch: &Network,
    delta_branch: &Network,
    fusion: &FusionSpec,
    init_seed: u64,
) -> Result<Network> {
    for (name, b) in [("mood", mood_branch), ("delta", delta_branch)] {
        if !matches!(b.architecture(), Architecture::OneCnn | Architecture::TsNet) {
            return Err(Error::Construction(format!("{name} branch must be a 1-CNN")));
        }
        if fusion.fused_feature_width != 2 * b.config.branch.dense_units {
            return Err(Error::Construction(format!(
                "{name} branch has penultimate width {}, fusion expects {}",
                b.config.branch.dense_units,
                fusion.fused_feature_width / 2
            )));
        }
    }
    if mood_branch.config.branch != delta_branch.config.branch
        || mood_branch.config.attention != delta_branch.config.attention
    {
        return Err(Error::Construction("mood and delta branches must share one spec".into()));
    }
    let cfg = ModelConfig {
        architecture: Architecture::TwoCnnMlp,
        attention: mood_branch.config.attention,
        branch: mood_branch.config.branch,
        fusion: *fusion,
        distillation: None,
    };
    let mut net = Network::new(&cfg, init_seed)?;
    net.import_branch(MOOD_PREFIX, mood_branch)?;
    net.import_branch(DELTA_PREFIX, delta_branch)?;
    Ok(net)
}

/// Builds the TS-Net student. The teacher must be a trained 2-CNN+MLP.
pub fn build_tsnet(
    teacher: &TrainedModel,
    student_spec: &CnnBranchSpec,
    cfg: &DistillationConfig,
    init_seed: u64,
) -> Result<Network> {
    cfg.validate()?;
    if teacher.network.architecture() != Architecture::TwoCnnMlp {
        return Err(Error::Construction(format!(
            "teacher must be a 2-CNN+MLP, got {}",
            teacher.network.architecture().tag()
        )));
    }
    if teacher.meta.epochs_run == 0 {
        return Err(Error::Construction("teacher has not been trained".into()));
    }
    if student_spec.input_shape != teacher.network.input_shape() {
        return Err(Error::Construction("student and teacher input shapes differ".into()));
    }
    let model = ModelConfig {
        architecture: Architecture::TsNet,
        attention: teacher.network.config.attention,
        branch: *student_spec,
        fusion: FusionSpec::for_branch(student_spec),
        distillation: Some(*cfg),
    };
    Network::new(&model, init_seed)
}

/// Builds the architecture-appropriate training loss for one batch.
pub fn training_loss(
    g: &mut Graph,
    net: &Network,
    fwd: &Forward,
    mood: &[usize],
    delta: &[usize],
    teacher_logits: Option<&Tensor>,
) -> Result<Var> {
    Ok(match net.architecture() {
        Architecture::OneCnn | Architecture::TwoCnnMlp => loss::graph_cross_entropy(g, fwd.mood_logits, mood),
        Architecture::TwoCnn => {
            let lm = loss::graph_cross_entropy(g, fwd.mood_logits, mood);
            let ld = loss::graph_cross_entropy(g, fwd.delta_logits.unwrap(), delta);
            g.add(lm, ld)
        }
        Architecture::TsNet => {
            let cfg = net
                .config
                .distillation
                .ok_or_else(|| Error::Construction("TS-Net without distillation config".into()))?;
            let t = teacher_logits.ok_or_else(|| Error::Construction("TS-Net loss needs teacher logits".into()))?;
            loss::graph_distillation(g, fwd.mood_logits, t, mood, &cfg)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::train::Hyperparams;
    use alloc::vec;
    use rand::Rng;

    fn tiny_spec() -> CnnBranchSpec {
        CnnBranchSpec {
            input_shape: [5, 12, 12, 3],
            conv_channels: [4, 6, 6],
            dense_units: 8,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    fn random_batch(n: usize, shape: [usize; 4], seed_: u64) -> Tensor {
        let mut rng = seed::rng(seed_);
        let total = n * shape.iter().product::<usize>();
        let data = (0..total).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(&[n, shape[0], shape[1], shape[2], shape[3]], data).unwrap()
    }

    fn meta() -> TrainingMeta {
        TrainingMeta {
            seed: 0,
            fold: None,
            hyper: Hyperparams::default(),
            epochs_run: 1,
            loss_curve: vec![1.0],
            train_accuracy: 0.0,
        }
    }

    #[test]
    fn default_shape_trace_matches_hand_table() {
        // Hand-traced: "same" conv stride 3 -> ceil(n/3); "same" pool 2 -> ceil(n/2).
        let expected: [(&str, &[usize]); 12] = [
            ("input", &[5, 32, 32, 3]),
            ("conv1", &[2, 11, 11, 16]),
            ("pool1", &[1, 6, 6, 16]),
            ("conv2", &[1, 2, 2, 32]),
            ("pool2", &[1, 1, 1, 32]),
            ("conv3", &[1, 1, 1, 32]),
            ("pool3", &[1, 1, 1, 32]),
            ("flatten", &[32]),
            ("batch_norm", &[32]),
            ("dense", &[512]),
            ("softmax", &[3]),
            ("", &[]),
        ];
        let trace = CnnBranchSpec::default().shape_trace();
        assert_eq!(trace.len(), 11);
        for ((name, shape), (en, es)) in trace.iter().zip(expected.iter()) {
            assert_eq!((name, shape.as_slice()), (en, *es));
        }
    }

    #[test]
    fn forward_taps_follow_the_trace() {
        let net = build_1cnn(&CnnBranchSpec::default(), &AttentionConfig::default(), 3).unwrap();
        let mut g = Graph::inference();
        let x = g.input(random_batch(2, CLIP_SHAPE, 1));
        let f = net.forward(&mut g, x);
        assert_eq!(g.shape(f.mood_branch.conv[0]), &[2, 2, 11, 11, 16]);
        assert_eq!(g.shape(f.mood_branch.conv[1]), &[2, 1, 2, 2, 32]);
        assert_eq!(g.shape(f.mood_branch.conv[2]), &[2, 1, 1, 1, 32]);
        assert_eq!(g.shape(f.mood_branch.features), &[2, 512]);
        assert_eq!(g.shape(f.mood_logits), &[2, 3]);
    }

    #[test]
    fn predictions_are_distributions() {
        for kind in [AttentionKind::None, AttentionKind::Spatial, AttentionKind::Pst] {
            let mut att = AttentionConfig::of(kind);
            att.lstm_hidden = 8;
            let net = build_1cnn(&CnnBranchSpec::default(), &att, 5).unwrap();
            let batch = random_batch(3, CLIP_SHAPE, 2);
            for p in net.predict_batch(&batch).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let a = build_1cnn(&CnnBranchSpec::default(), &AttentionConfig::default(), 9).unwrap();
        let b = build_1cnn(&CnnBranchSpec::default(), &AttentionConfig::default(), 9).unwrap();
        let c = build_1cnn(&CnnBranchSpec::default(), &AttentionConfig::default(), 10).unwrap();
        assert_eq!(a.params().fingerprint(), b.params().fingerprint());
        assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    }

    #[test]
    fn predict_is_pure_and_checks_shape() {
        let net = build_1cnn(&tiny_spec(), &AttentionConfig::default(), 1).unwrap();
        let clip = FrameClip::new("z", 0, Tensor::zeros(&[5, 12, 12, 3])).unwrap();
        assert_eq!(net.predict(&clip).unwrap(), net.predict(&clip).unwrap());
        let wrong = FrameClip::new("z", 0, Tensor::zeros(&[5, 10, 12, 3])).unwrap();
        assert!(matches!(net.predict(&wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn invalid_specs_fail_construction() {
        let bad = CnnBranchSpec {
            classes: 4,
            ..tiny_spec()
        };
        assert!(build_1cnn(&bad, &AttentionConfig::default(), 0).is_err());
        let bad = CnnBranchSpec {
            dropout_rate: 1.0,
            ..tiny_spec()
        };
        assert!(build_1cnn(&bad, &AttentionConfig::default(), 0).is_err());
    }

    #[test]
    fn fusion_concatenates_mood_then_delta() {
        let spec = tiny_spec();
        let att = AttentionConfig::default();
        let m = build_1cnn(&spec, &att, 1).unwrap();
        let d = build_1cnn(&spec, &att, 2).unwrap();
        let fusion = FusionSpec::for_branch(&spec);
        let net = build_2cnn_mlp(&m, &d, &fusion, 3).unwrap();
        let clip = FrameClip::new("c", 0, random_batch(1, spec.input_shape, 4).reshape(&[5, 12, 12, 3]).unwrap()).unwrap();
        let fused = net.fused_features(&clip).unwrap();
        let fm = m.branch_features(&clip.as_batch()).unwrap();
        let fd = d.branch_features(&clip.as_batch()).unwrap();
        assert_eq!(fused.shape(), &[1, 16]);
        assert_eq!(&fused.data()[..8], fm.data());
        assert_eq!(&fused.data()[8..], fd.data());
        // Branches are frozen, MLP is not.
        let p = net.params();
        assert!(!p.is_trainable(p.id_of("mood.conv1.weight").unwrap()));
        assert!(!p.is_trainable(p.id_of("delta.head.bias").unwrap()));
        assert!(p.is_trainable(p.id_of("mlp.hidden.weight").unwrap()));
    }

    #[test]
    fn default_fusion_width_is_1024() {
        assert_eq!(FusionSpec::default().fused_feature_width, 1024);
        assert_eq!(FusionSpec::for_branch(&CnnBranchSpec::default()), FusionSpec::default());
    }

    #[test]
    fn fusion_rejects_wrong_branch_width() {
        let att = AttentionConfig::default();
        let narrow = CnnBranchSpec {
            dense_units: 4,
            ..tiny_spec()
        };
        let m = build_1cnn(&narrow, &att, 1).unwrap();
        let d = build_1cnn(&narrow, &att, 2).unwrap();
        let err = build_2cnn_mlp(&m, &d, &FusionSpec::for_branch(&tiny_spec()), 0).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn zero_mlp_head_is_uniform() {
        let spec = tiny_spec();
        let att = AttentionConfig::default();
        let m = build_1cnn(&spec, &att, 1).unwrap();
        let d = build_1cnn(&spec, &att, 2).unwrap();
        let mut net = build_2cnn_mlp(&m, &d, &FusionSpec::for_branch(&spec), 3).unwrap();
        let p = net.params_mut();
        p.assign("mlp.head.weight", Tensor::zeros(&[8, 3])).unwrap();
        p.assign("mlp.head.bias", Tensor::zeros(&[3])).unwrap();
        for probs in net.predict_batch(&random_batch(2, spec.input_shape, 5)).unwrap() {
            assert!(probs.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn two_cnn_loss_is_sum_of_head_losses() {
        let spec = tiny_spec();
        let net = build_2cnn(&spec, &AttentionConfig::default(), 4).unwrap();
        let batch = random_batch(4, spec.input_shape, 6);
        let (mood, delta) = (vec![0, 1, 2, 1], vec![2, 2, 0, 1]);
        let mut g = Graph::new(true, 0);
        let x = g.input(batch);
        let f = net.forward(&mut g, x);
        let total = training_loss(&mut g, &net, &f, &mood, &delta, None).unwrap();
        let rows = |v: Var| -> Vec<Vec<f64>> { g.value(v).data().chunks(3).map(|r| r.to_vec()).collect() };
        let lm = loss::cross_entropy(&rows(f.mood_logits), &mood);
        let ld = loss::cross_entropy(&rows(f.delta_logits.unwrap()), &delta);
        assert_eq!(g.value(total).data()[0], lm + ld);
        // Inference reads only the mood head.
        assert_eq!(net.predict_batch(&random_batch(1, spec.input_shape, 7)).unwrap().len(), 1);
    }

    /// Gradient of the delta-head loss alone with respect to every parameter.
    fn delta_only_grads(net: &Network) -> Vec<(String, f64)> {
        let spec = net.config.branch;
        let mut g = Graph::new(true, 0);
        let x = g.input(random_batch(4, spec.input_shape, 8));
        let f = net.forward(&mut g, x);
        let l = loss::graph_cross_entropy(&mut g, f.delta_logits.unwrap(), &[2, 0, 1, 1]);
        let grads = g.backward(l);
        net.store
            .ids()
            .map(|id| {
                let mag = grads.param(id).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
                (net.store.name(id).into(), mag)
            })
            .collect()
    }

    #[test]
    fn delta_loss_reaches_mood_head_only_through_shared_gate() {
        let spec = tiny_spec();
        let plain = build_2cnn(&spec, &AttentionConfig::default(), 4).unwrap();
        assert!(delta_only_grads(&plain)
            .iter()
            .all(|(n, m)| !n.starts_with(MOOD_PREFIX) || *m == 0.0));
        let mut att = AttentionConfig::of(AttentionKind::Sst);
        att.lstm_hidden = 4;
        let gated = build_2cnn(&spec, &att, 4).unwrap();
        assert!(matches!(gated.layout(), Layout::Dual { gate: Some(_), .. }));
        let grads = delta_only_grads(&gated);
        assert!(grads.iter().any(|(n, m)| n.starts_with(SHARED_PREFIX) && *m > 0.0));
        assert!(grads.iter().all(|(n, m)| !n.starts_with(MOOD_PREFIX) || *m == 0.0));
        // Gates applied after the first conv stay inside each branch.
        att.site = AttentionSite::AfterFirstConv;
        let inner = build_2cnn(&spec, &att, 4).unwrap();
        assert!(matches!(inner.layout(), Layout::Dual { gate: None, .. }));
        assert!(inner.params().entries().iter().all(|e| !e.name.starts_with(SHARED_PREFIX)));
    }

    #[test]
    fn perfect_heads_have_near_zero_loss() {
        let mut g = Graph::new(true, 0);
        let z = g.input(Tensor::from_vec(&[2, 3], vec![60.0, 0.0, 0.0, 0.0, 0.0, 60.0]).unwrap());
        let lm = loss::graph_cross_entropy(&mut g, z, &[0, 2]);
        let ld = loss::graph_cross_entropy(&mut g, z, &[0, 2]);
        let total = g.add(lm, ld);
        assert!(g.value(total).data()[0] < 1e-20);
    }

    #[test]
    fn tsnet_requires_trained_fusion_teacher() {
        let spec = tiny_spec();
        let att = AttentionConfig::default();
        let cfg = DistillationConfig::new(3.0, 0.1).unwrap();
        let m = build_1cnn(&spec, &att, 1).unwrap();
        let d = build_1cnn(&spec, &att, 2).unwrap();
        let fusion = build_2cnn_mlp(&m, &d, &FusionSpec::for_branch(&spec), 3).unwrap();
        let untrained = TrainedModel {
            network: fusion.clone(),
            meta: TrainingMeta { epochs_run: 0, ..meta() },
        };
        assert!(build_tsnet(&untrained, &spec, &cfg, 0).is_err());
        let wrong_arch = TrainedModel { network: m, meta: meta() };
        assert!(build_tsnet(&wrong_arch, &spec, &cfg, 0).is_err());
        let teacher = TrainedModel { network: fusion, meta: meta() };
        let student = build_tsnet(&teacher, &spec, &cfg, 0).unwrap();
        assert_eq!(student.architecture(), Architecture::TsNet);
        assert!(matches!(student.layout(), Layout::Single(_)));
    }

    #[test]
    fn attention_after_first_conv() {
        let mut att = AttentionConfig::of(AttentionKind::Sst);
        att.site = AttentionSite::AfterFirstConv;
        att.lstm_hidden = 4;
        let net = build_1cnn(&tiny_spec(), &att, 1).unwrap();
        let p = net.params();
        let k = p.get(p.id_of("branch.temporal.lstm1.input_kernel").unwrap());
        assert_eq!(k.shape(), &[4, 16]);
        let out = net.predict_batch(&random_batch(2, [5, 12, 12, 3], 3)).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn temperature_preserves_argmax() {
        let mut rng = seed::rng(77);
        for _ in 0..2000 {
            let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            let a = loss::softmax_t(&z, 1.0);
            let b = loss::softmax_t(&z, 7.0);
            let am = |p: &[f64]| argmax_class(&[p[0], p[1], p[2]]);
            assert_eq!(am(&a), am(&b));
        }
    }

    #[test]
    fn softmax_is_permutation_equivariant() {
        let z = [0.3, -1.1, 2.4];
        let p = loss::softmax(&z);
        let q = loss::softmax(&[z[2], z[0], z[1]]);
        assert!((q[0] - p[2]).abs() < 1e-15 && (q[1] - p[0]).abs() < 1e-15 && (q[2] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn architecture_tags_parse() {
        for a in [
            Architecture::OneCnn,
            Architecture::TwoCnnMlp,
            Architecture::TwoCnn,
            Architecture::TsNet,
        ] {
            assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
        }
    }
}
