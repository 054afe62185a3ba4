//! Subject-independent cross-validation training.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ChunkDataset;
use crate::error::{Error, Result};
use crate::eval::{chunk_accuracy, predict_chunks, ChunkPrediction, EvalReport};
use crate::graph::{Graph, Var};
use crate::labels::{LabeledChunk, MoodClass, NUM_CLASSES};
use crate::loss::{self, DistillationConfig};
use crate::models::{
    build_1cnn, build_2cnn_mlp, build_tsnet, training_loss, Architecture, Layout, ModelConfig, Network,
    TrainedModel, TrainingMeta,
};
use crate::nn::{apply_batch_stats, set_population_stats, Adam, ParamStore};
use crate::seed;
use crate::stats::mean_std;
use crate::tensor::Tensor;

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    #[serde(default)]
    pub distillation: Option<DistillationConfig>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            batch_size: 64,
            dropout: 0.4,
            distillation: None,
        }
    }
}

impl Hyperparams {
    /// Directory-safe name, e.g. `lr1e-3_bs64_do0.4` or `..._T3_a0.1`.
    pub fn tag(&self) -> String {
        let mut s = format!("lr{:e}_bs{}_do{}", self.learning_rate, self.batch_size, self.dropout);
        if let Some(d) = &self.distillation {
            s.push_str(&format!("_T{}_a{}", d.temperature, d.alpha));
            if d.t_squared {
                s.push_str("_t2");
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(d) = &self.distillation {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    /// Empty unless the grid is for TS-Net.
    #[serde(default)]
    pub temperatures: Vec<f64>,
    #[serde(default)]
    pub alphas: Vec<f64>,
}

impl HyperGrid {
    /// The complete search space for `arch`.
    pub fn full(arch: Architecture) -> Self {
        let ts = arch == Architecture::TsNet;
        HyperGrid {
            learning_rates: alloc::vec![1e-3, 1e-5],
            batch_sizes: if ts { alloc::vec![16, 64, 128] } else { alloc::vec![64, 128, 256] },
            dropout_rates: alloc::vec![0.4, 0.5],
            temperatures: if ts { alloc::vec![3.0, 5.0, 7.0] } else { Vec::new() },
            alphas: if ts {
                alloc::vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
            } else {
                Vec::new()
            },
        }
    }

    pub fn singleton(h: &Hyperparams) -> Self {
        HyperGrid {
            learning_rates: alloc::vec![h.learning_rate],
            batch_sizes: alloc::vec![h.batch_size],
            dropout_rates: alloc::vec![h.dropout],
            temperatures: h.distillation.iter().map(|d| d.temperature).collect(),
            alphas: h.distillation.iter().map(|d| d.alpha).collect(),
        }
    }

    pub fn is_distillation(&self) -> bool {
        !self.temperatures.is_empty() || !self.alphas.is_empty()
    }

    pub fn validate(&self, arch: Architecture) -> Result<()> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.dropout_rates.is_empty() {
            return Err(Error::Validation("hyperparameter grid has an empty axis".into()));
        }
        let ts = arch == Architecture::TsNet;
        if ts && (self.temperatures.is_empty() || self.alphas.is_empty()) {
            return Err(Error::Validation("TS-Net grid needs temperatures and alphas".into()));
        }
        if !ts && self.is_distillation() {
            return Err(Error::Validation(format!(
                "distillation grid given for {}",
                arch.tag()
            )));
        }
        for h in self.points() {
            h.validate()?;
        }
        Ok(())
    }

    /// All grid points in a fixed order.
    pub fn points(&self) -> Vec<Hyperparams> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &bs in &self.batch_sizes {
                for &dr in &self.dropout_rates {
                    if self.is_distillation() {
                        for &t in &self.temperatures {
                            for &a in &self.alphas {
                                out.push(Hyperparams {
                                    learning_rate: lr,
                                    batch_size: bs,
                                    dropout: dr,
                                    distillation: Some(DistillationConfig {
                                        temperature: t,
                                        alpha: a,
                                        t_squared: false,
                                    }),
                                });
                            }
                        }
                    } else {
                        out.push(Hyperparams {
                            learning_rate: lr,
                            batch_size: bs,
                            dropout: dr,
                            distillation: None,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Loop controls not covered by the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Stop after this many epochs without a new best training loss (0 disables).
    pub patience: usize,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            patience: 10,
            eval_batch: 64,
        }
    }
}

/// Subject to fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    pub fn test_subjects(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// `(train, test)` chunk indices for `fold`, with the leakage guard applied.
    pub fn split(&self, data: &ChunkDataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.folds {
            return Err(Error::Planning(format!("fold {fold} out of range 0..{}", self.folds)));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, c) in data.chunks().iter().enumerate() {
            match self.fold_of(&c.subject_id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::Planning(format!("subject {} is not in the fold plan", c.subject_id)));
                }
            }
        }
        let train_subj: BTreeSet<&str> = train.iter().map(|&i| data.chunk(i).subject_id.as_str()).collect();
        if let Some(s) = test.iter().map(|&i| data.chunk(i).subject_id.as_str()).find(|s| train_subj.contains(s)) {
            return Err(Error::Planning(format!("subject {s} leaks between train and test of fold {fold}")));
        }
        Ok((train, test))
    }
}

/// Majority mood of each subject's chunks (ties to the earlier class).
pub fn subject_majorities(chunks: &[LabeledChunk]) -> BTreeMap<String, MoodClass> {
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for c in chunks {
        counts.entry(&c.subject_id).or_default()[c.mood_label.index()] += 1;
    }
    counts
        .into_iter()
        .map(|(s, n)| {
            let mut best = 0;
            for k in 1..3 {
                if n[k] > n[best] {
                    best = k;
                }
            }
            (String::from(s), MoodClass::from_index(best).unwrap())
        })
        .collect()
}

/// Stratified subject partition. Subjects are grouped by majority mood,
/// shuffled within each group from `seed`, and dealt round-robin across folds
/// in class order, so fold sizes differ by at most one.
pub fn plan_folds(subjects: &BTreeMap<String, MoodClass>, folds: usize, seed_: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::Planning(format!("need at least 2 folds, got {folds}")));
    }
    if subjects.len() < folds {
        return Err(Error::Planning(format!(
            "{} subjects cannot fill {folds} subject-independent folds",
            subjects.len()
        )));
    }
    let mut rng = seed::rng(seed::derive_str(seed_, "folds"));
    let mut assignment = BTreeMap::new();
    let mut next = 0;
    for class in MoodClass::ALL {
        let mut group: Vec<&String> = subjects.iter().filter(|(_, &c)| c == class).map(|(s, _)| s).collect();
        group.shuffle(&mut rng);
        for s in group {
            assignment.insert(s.clone(), next % folds);
            next += 1;
        }
    }
    Ok(FoldPlan { folds, assignment })
}

/// Result of one optimisation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Element 0 is the loss before any update; element `e` the mean loss of epoch `e`.
    pub loss_curve: Vec<f64>,
    pub epochs_run: usize,
    pub train_accuracy: f64,
}

/// A trainable objective over `len()` items addressed by position.
trait Objective {
    fn len(&self) -> usize;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, g: &mut Graph, items: &[usize]) -> Result<Var>;
    fn mood_logits(&self, items: &[usize]) -> Result<Tensor>;
    fn mood_labels(&self) -> &[usize];
}

struct NetObjective<'a> {
    net: Network,
    data: &'a ChunkDataset,
    index: &'a [usize],
    mood: Vec<usize>,
    delta: Vec<usize>,
    teacher: Option<Tensor>,
}

impl NetObjective<'_> {
    fn picks(&self, items: &[usize]) -> Vec<usize> {
        items.iter().map(|&i| self.index[i]).collect()
    }
}

impl Objective for NetObjective<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    fn loss(&self, g: &mut Graph, items: &[usize]) -> Result<Var> {
        let x = g.input(self.data.batch(&self.picks(items)));
        let f = self.net.forward(g, x);
        let mood: Vec<usize> = items.iter().map(|&i| self.mood[i]).collect();
        let delta: Vec<usize> = items.iter().map(|&i| self.delta[i]).collect();
        let teacher = self.teacher.as_ref().map(|t| rows(t, items));
        training_loss(g, &self.net, &f, &mood, &delta, teacher.as_ref())
    }

    fn mood_logits(&self, items: &[usize]) -> Result<Tensor> {
        self.net.logits(&self.data.batch(&self.picks(items)))
    }

    fn mood_labels(&self) -> &[usize] {
        &self.mood
    }
}

/// The fusion MLP trained on fixed branch features.
struct MlpObjective {
    net: Network,
    features: Tensor,
    labels: Vec<usize>,
}

impl MlpObjective {
    fn head(&self, g: &mut Graph, items: &[usize]) -> Var {
        let Layout::Fusion {
            hidden, head, dropout, ..
        } = self.net.layout()
        else {
            unreachable!("MLP objective over a non-fusion network")
        };
        let x = g.input(rows(&self.features, items));
        let st = self.net.params();
        let h = hidden.forward(g, st, x);
        let h = g.relu(h);
        let h = g.dropout(h, *dropout);
        head.forward(g, st, h)
    }
}

impl Objective for MlpObjective {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    fn loss(&self, g: &mut Graph, items: &[usize]) -> Result<Var> {
        let z = self.head(g, items);
        let y: Vec<usize> = items.iter().map(|&i| self.labels[i]).collect();
        Ok(loss::graph_cross_entropy(g, z, &y))
    }

    fn mood_logits(&self, items: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let z = self.head(&mut g, items);
        Ok(g.value(z).clone())
    }

    fn mood_labels(&self) -> &[usize] {
        &self.labels
    }
}

fn rows(t: &Tensor, items: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(items.len() * w);
    for &i in items {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::from_vec(&[items.len(), w], data).unwrap()
}

fn require_all_classes(labels: &[usize], what: &str) -> Result<()> {
    let mut seen = [false; NUM_CLASSES];
    for &y in labels {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "class {} is absent from the {what} training labels",
            MoodClass::from_index(missing).unwrap()
        )));
    }
    Ok(())
}

fn mean_loss(obj: &dyn Objective, batch: usize) -> Result<f64> {
    let all: Vec<usize> = (0..obj.len()).collect();
    let mut total = 0.0;
    for part in all.chunks(batch.max(1)) {
        let mut g = Graph::inference();
        let l = obj.loss(&mut g, part)?;
        total += g.value(l).data()[0] * part.len() as f64;
    }
    Ok(total / obj.len() as f64)
}

fn accuracy(obj: &dyn Objective, batch: usize) -> Result<f64> {
    let all: Vec<usize> = (0..obj.len()).collect();
    let labels = obj.mood_labels();
    let mut correct = 0;
    for part in all.chunks(batch.max(1)) {
        let z = obj.mood_logits(part)?;
        for (row, &i) in z.data().chunks_exact(NUM_CLASSES).zip(part) {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if row[k] > row[best] {
                    best = k;
                }
            }
            correct += usize::from(best == labels[i]);
        }
    }
    Ok(correct as f64 / obj.len() as f64)
}

/// Running averages trail the final weights; re-estimate them in one pass.
fn recalibrate(obj: &mut dyn Objective, batch: usize) -> Result<()> {
    let all: Vec<usize> = (0..obj.len()).collect();
    let mut stats = Vec::new();
    for part in all.chunks(batch.max(1)) {
        let mut g = Graph::new(true, 0);
        obj.loss(&mut g, part)?;
        stats.extend(g.take_batch_stats());
    }
    set_population_stats(obj.store_mut(), &stats);
    Ok(())
}

fn fit(obj: &mut dyn Objective, hyper: &Hyperparams, run_seed: u64, opts: &TrainOptions) -> Result<FitReport> {
    if obj.len() == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let initial = mean_loss(obj, opts.eval_batch)?;
    if !initial.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut curve = alloc::vec![initial];
    let mut adam = Adam::new(hyper.learning_rate);
    let mut order: Vec<usize> = (0..obj.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0u64;
    let mut epochs_run = 0;
    for epoch in 0..opts.epochs {
        let mut rng = seed::rng(seed::derive(seed::derive_str(run_seed, "shuffle"), epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for part in order.chunks(hyper.batch_size) {
            let mut g = Graph::new(true, seed::derive(seed::derive_str(run_seed, "dropout"), step));
            step += 1;
            let l = obj.loss(&mut g, part)?;
            let v = g.value(l).data()[0];
            if !v.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            total += v * part.len() as f64;
            let grads = g.backward(l);
            let stats = g.take_batch_stats();
            let store = obj.store_mut();
            adam.step(store, &grads);
            apply_batch_stats(store, &stats);
        }
        let epoch_loss = total / obj.len() as f64;
        curve.push(epoch_loss);
        epochs_run = epoch + 1;
        if epoch_loss < best {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if opts.patience > 0 && stale >= opts.patience {
                break;
            }
        }
    }
    recalibrate(obj, opts.eval_batch)?;
    Ok(FitReport {
        loss_curve: curve,
        epochs_run,
        train_accuracy: accuracy(obj, opts.eval_batch)?,
    })
}

/// A labelled training stage of a (possibly multi-stage) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub fit: FitReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// The teacher used by TS-Net.
    pub teacher: Option<TrainedModel>,
    pub stages: Vec<StageReport>,
    /// Teacher parameter fingerprint before and after student training.
    pub teacher_checksum: Option<(u64, u64)>,
}

fn with_dropout(cfg: &ModelConfig, hyper: &Hyperparams) -> ModelConfig {
    let mut c = *cfg;
    c.branch.dropout_rate = hyper.dropout;
    c
}

fn labels_of(data: &ChunkDataset, index: &[usize]) -> (Vec<usize>, Vec<usize>) {
    index
        .iter()
        .map(|&i| {
            let c = data.chunk(i);
            (c.mood_label.index(), c.delta_label.index())
        })
        .unzip()
}

fn meta(run_seed: u64, fold: Option<usize>, hyper: &Hyperparams, fit: &FitReport) -> TrainingMeta {
    TrainingMeta {
        seed: run_seed,
        fold,
        hyper: *hyper,
        epochs_run: fit.epochs_run,
        loss_curve: fit.loss_curve.clone(),
        train_accuracy: fit.train_accuracy,
    }
}

/// Trains one 1-CNN on mood (`on_delta = false`) or delta labels.
fn train_single(
    cfg: &ModelConfig,
    data: &ChunkDataset,
    index: &[usize],
    hyper: &Hyperparams,
    run_seed: u64,
    opts: &TrainOptions,
    on_delta: bool,
) -> Result<(Network, FitReport)> {
    let (mood, delta) = labels_of(data, index);
    let target = if on_delta { delta.clone() } else { mood };
    require_all_classes(&target, if on_delta { "delta" } else { "mood" })?;
    let net = build_1cnn(&cfg.branch, &cfg.attention, seed::derive_str(run_seed, "init"))?;
    let mut obj = NetObjective {
        net,
        data,
        index,
        mood: target,
        delta,
        teacher: None,
    };
    let fit = fit(&mut obj, hyper, run_seed, opts)?;
    Ok((obj.net, fit))
}

fn train_fusion(
    cfg: &ModelConfig,
    data: &ChunkDataset,
    index: &[usize],
    hyper: &Hyperparams,
    run_seed: u64,
    opts: &TrainOptions,
    stages: &mut Vec<StageReport>,
) -> Result<(Network, FitReport)> {
    let (m, fm) = train_single(cfg, data, index, hyper, seed::derive_str(run_seed, "mood"), opts, false)?;
    stages.push(StageReport {
        stage: "mood-branch".into(),
        fit: fm,
    });
    let (d, fd) = train_single(cfg, data, index, hyper, seed::derive_str(run_seed, "delta"), opts, true)?;
    stages.push(StageReport {
        stage: "delta-branch".into(),
        fit: fd,
    });
    let net = build_2cnn_mlp(&m, &d, &cfg.fusion, seed::derive_str(run_seed, "mlp-init"))?;
    // Frozen branches run in inference mode, so their features are fixed.
    let mut feats = Vec::new();
    for part in index.chunks(opts.eval_batch.max(1)) {
        let batch = data.batch(part);
        let a = m.branch_features(&batch)?;
        let b = d.branch_features(&batch)?;
        let w = a.shape()[1];
        for r in 0..part.len() {
            feats.extend_from_slice(&a.data()[r * w..(r + 1) * w]);
            feats.extend_from_slice(&b.data()[r * w..(r + 1) * w]);
        }
    }
    let width = cfg.fusion.fused_feature_width;
    let features = Tensor::from_vec(&[index.len(), width], feats)?;
    let (mood, _) = labels_of(data, index);
    let mut obj = MlpObjective {
        net,
        features,
        labels: mood,
    };
    let before = branch_fingerprint(obj.net.params());
    let f = fit(&mut obj, hyper, seed::derive_str(run_seed, "mlp"), opts)?;
    debug_assert_eq!(before, branch_fingerprint(obj.net.params()));
    stages.push(StageReport {
        stage: "fusion-mlp".into(),
        fit: f.clone(),
    });
    Ok((obj.net, f))
}

/// Fingerprint of the frozen (non-trainable) parameters.
pub fn branch_fingerprint(store: &ParamStore) -> u64 {
    let mut s = ParamStore::new();
    for e in store.entries().iter().filter(|e| !e.trainable) {
        s.add(&e.name, e.value.clone(), false);
    }
    s.fingerprint()
}

/// Trains `cfg.architecture` on the chunks at `index`.
pub fn train_model(
    cfg: &ModelConfig,
    data: &ChunkDataset,
    index: &[usize],
    hyper: &Hyperparams,
    run_seed: u64,
    fold: Option<usize>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    cfg.validate()?;
    if index.is_empty() {
        return Err(Error::Data("training fold has no chunks".into()));
    }
    let cfg = with_dropout(cfg, hyper);
    let mut stages = Vec::new();
    let (mood, delta) = labels_of(data, index);
    require_all_classes(&mood, "mood")?;
    let outcome = match cfg.architecture {
        Architecture::OneCnn => {
            let (net, f) = train_single(&cfg, data, index, hyper, run_seed, opts, false)?;
            stages.push(StageReport {
                stage: "1cnn".into(),
                fit: f.clone(),
            });
            TrainOutcome {
                model: TrainedModel {
                    network: net,
                    meta: meta(run_seed, fold, hyper, &f),
                },
                teacher: None,
                stages,
                teacher_checksum: None,
            }
        }
        Architecture::TwoCnn => {
            require_all_classes(&delta, "delta")?;
            let net = Network::new(&cfg, seed::derive_str(run_seed, "init"))?;
            let mut obj = NetObjective {
                net,
                data,
                index,
                mood,
                delta,
                teacher: None,
            };
            let f = fit(&mut obj, hyper, run_seed, opts)?;
            stages.push(StageReport {
                stage: "2cnn".into(),
                fit: f.clone(),
            });
            TrainOutcome {
                model: TrainedModel {
                    network: obj.net,
                    meta: meta(run_seed, fold, hyper, &f),
                },
                teacher: None,
                stages,
                teacher_checksum: None,
            }
        }
        Architecture::TwoCnnMlp => {
            require_all_classes(&delta, "delta")?;
            let (net, f) = train_fusion(&cfg, data, index, hyper, run_seed, opts, &mut stages)?;
            TrainOutcome {
                model: TrainedModel {
                    network: net,
                    meta: meta(run_seed, fold, hyper, &f),
                },
                teacher: None,
                stages,
                teacher_checksum: None,
            }
        }
        Architecture::TsNet => {
            let dist = hyper
                .distillation
                .or(cfg.distillation)
                .ok_or_else(|| Error::Validation("TS-Net needs a temperature and alpha".into()))?;
            require_all_classes(&delta, "delta")?;
            let teacher_cfg = ModelConfig {
                architecture: Architecture::TwoCnnMlp,
                distillation: None,
                ..cfg
            };
            let tseed = seed::derive_str(run_seed, "teacher");
            let (tnet, tf) = train_fusion(&teacher_cfg, data, index, hyper, tseed, opts, &mut stages)?;
            let teacher = TrainedModel {
                network: tnet,
                meta: meta(tseed, fold, hyper, &tf),
            };
            let before = teacher.network.params().fingerprint();
            let mut tl = Vec::new();
            for part in index.chunks(opts.eval_batch.max(1)) {
                tl.extend_from_slice(teacher.network.logits(&data.batch(part))?.data());
            }
            let teacher_logits = Tensor::from_vec(&[index.len(), NUM_CLASSES], tl)?;
            let student = build_tsnet(&teacher, &cfg.branch, &dist, seed::derive_str(run_seed, "init"))?;
            let mut obj = NetObjective {
                net: student,
                data,
                index,
                mood,
                delta,
                teacher: Some(teacher_logits),
            };
            let f = fit(&mut obj, hyper, run_seed, opts)?;
            stages.push(StageReport {
                stage: "student".into(),
                fit: f.clone(),
            });
            let after = teacher.network.params().fingerprint();
            TrainOutcome {
                model: TrainedModel {
                    network: obj.net,
                    meta: meta(run_seed, fold, hyper, &f),
                },
                teacher: Some(teacher),
                stages,
                teacher_checksum: Some((before, after)),
            }
        }
    };
    Ok(outcome)
}

/// Seed of fold `k` under run seed `seed_`.
pub fn fold_seed(seed_: u64, fold: usize) -> u64 {
    seed::derive(seed::derive_str(seed_, "fold"), fold as u64)
}

/// One trained and scored fold.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub hyper: Hyperparams,
    pub outcome: TrainOutcome,
    pub predictions: Vec<ChunkPrediction>,
    pub report: EvalReport,
}

pub fn train_fold(
    cfg: &ModelConfig,
    data: &ChunkDataset,
    plan: &FoldPlan,
    fold: usize,
    hyper: &Hyperparams,
    seed_: u64,
    opts: &TrainOptions,
) -> Result<FoldResult> {
    let (train, test) = plan.split(data, fold)?;
    if test.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no test chunks")));
    }
    let outcome = train_model(cfg, data, &train, hyper, fold_seed(seed_, fold), Some(fold), opts)?;
    let predictions = predict_chunks(&outcome.model.network, data, &test, opts.eval_batch)?;
    let report = chunk_accuracy(&predictions)?;
    Ok(FoldResult {
        fold,
        hyper: *hyper,
        outcome,
        predictions,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: Architecture,
    pub attention: String,
    pub hyper: Hyperparams,
    pub seed: u64,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
}

impl RunRecord {
    pub fn new(cfg: &ModelConfig, hyper: &Hyperparams, seed_: u64, fold_accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&fold_accuracies);
        RunRecord {
            architecture: cfg.architecture,
            attention: cfg.attention.tag().to_string(),
            hyper: *hyper,
            seed: seed_,
            fold_accuracies,
            mean,
            std,
        }
    }
}

/// Index of the best record: highest mean, then lower learning rate, then smaller batch.
pub fn select_best(records: &[RunRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let o = &records[b];
                r.mean > o.mean
                    || (r.mean == o.mean
                        && (r.hyper.learning_rate < o.hyper.learning_rate
                            || (r.hyper.learning_rate == o.hyper.learning_rate
                                && r.hyper.batch_size < o.hyper.batch_size)))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub records: Vec<RunRecord>,
    pub best: usize,
}

impl GridOutcome {
    pub fn best_record(&self) -> &RunRecord {
        &self.records[self.best]
    }
}

/// Trains every grid point on every fold. `sink` sees each fold as it
/// finishes (for checkpointing).
pub fn run_grid(
    cfg: &ModelConfig,
    data: &ChunkDataset,
    grid: &HyperGrid,
    plan: &FoldPlan,
    seed_: u64,
    opts: &TrainOptions,
    sink: &mut dyn FnMut(&FoldResult) -> Result<()>,
) -> Result<GridOutcome> {
    grid.validate(cfg.architecture)?;
    let mut records = Vec::new();
    for hyper in grid.points() {
        let mut accs = Vec::with_capacity(plan.folds);
        for fold in 0..plan.folds {
            let r = train_fold(cfg, data, plan, fold, &hyper, seed_, opts)?;
            accs.push(r.report.accuracy);
            sink(&r)?;
        }
        records.push(RunRecord::new(cfg, &hyper, seed_, accs));
    }
    let best = select_best(&records).expect("validated grid is non-empty");
    Ok(GridOutcome { records, best })
}
