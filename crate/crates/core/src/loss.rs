//! Softmax, cross-entropy and the teacher-student distillation objective.
//!
//! Plain-slice versions are used for reporting and tests; the `graph_*`
//! variants build the same quantities on a [`Graph`] so they can be
//! differentiated.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|z| libm::exp(z - max)).sum::<f64>());
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(libm::exp).collect()
}

/// Softmax of `logits / temperature`.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax(&scaled)
}

/// Sparse categorical cross-entropy averaged over a batch of logit rows.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| -log_softmax(z)[y])
        .sum::<f64>()
        / n
}

/// `KL(p || q) = sum p (log p - log q)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (libm::log(*pv) - libm::log(*qv)))
        .sum()
}

/// Temperature and mixing weight for teacher-student training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub alpha: f64,
    /// Multiply the distillation term by `T^2` (off by default).
    #[serde(default)]
    pub t_squared: bool,
}

impl DistillationConfig {
    pub fn new(temperature: f64, alpha: f64) -> Result<Self> {
        let cfg = DistillationConfig {
            temperature,
            alpha,
            t_squared: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(alloc::format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(alloc::format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Components of the teacher-student loss for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillationLoss {
    pub student: f64,
    pub distillation: f64,
    pub total: f64,
}

/// Batch-mean distillation divergence `KL(teacher_T || student_T)`.
pub fn distillation_divergence(student: &[Vec<f64>], teacher: &[Vec<f64>], t: f64) -> f64 {
    let n = student.len() as f64;
    student
        .iter()
        .zip(teacher)
        .map(|(s, te)| kl_divergence(&softmax_t(te, t), &softmax_t(s, t)))
        .sum::<f64>()
        / n
}

/// `alpha * L_stu + (1 - alpha) * L_dis`, where `L_stu` is the cross-entropy of
/// the student at temperature 1 against hard labels and `L_dis` the divergence
/// between temperature-softened teacher and student distributions.
pub fn distillation_loss(
    student: &[Vec<f64>],
    teacher: &[Vec<f64>],
    labels: &[usize],
    cfg: &DistillationConfig,
) -> DistillationLoss {
    let l_stu = cross_entropy(student, labels);
    let mut l_dis = distillation_divergence(student, teacher, cfg.temperature);
    if cfg.t_squared {
        l_dis *= cfg.temperature * cfg.temperature;
    }
    DistillationLoss {
        student: l_stu,
        distillation: l_dis,
        total: cfg.alpha * l_stu + (1.0 - cfg.alpha) * l_dis,
    }
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

pub fn graph_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let k = g.shape(logits)[1];
    g.softmax_cross_entropy(logits, one_hot(labels, k))
}

/// Distillation objective on the tape. `teacher_logits` is a constant.
pub fn graph_distillation(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    cfg: &DistillationConfig,
) -> Var {
    let l_stu = graph_cross_entropy(g, student_logits, labels);
    let k = teacher_logits.shape()[1];
    let n = teacher_logits.shape()[0];
    let mut soft = Vec::with_capacity(n * k);
    let mut entropy = 0.0;
    for row in teacher_logits.data().chunks_exact(k) {
        let p = softmax_t(row, cfg.temperature);
        entropy -= p
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| v * libm::log(*v))
            .sum::<f64>();
        soft.extend(p);
    }
    let soft = Tensor::from_vec(&[n, k], soft).unwrap();
    let scaled = g.scale(student_logits, 1.0 / cfg.temperature);
    let xent = g.softmax_cross_entropy(scaled, soft);
    // KL = cross-entropy - H(teacher)
    let offset = g.input(Tensor::scalar(-entropy / n as f64));
    let mut l_dis = g.add(xent, offset);
    if cfg.t_squared {
        l_dis = g.scale(l_dis, cfg.temperature * cfg.temperature);
    }
    let a = g.scale(l_stu, cfg.alpha);
    let b = g.scale(l_dis, 1.0 - cfg.alpha);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn batch() -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
        (
            vec![vec![0.3, -1.2, 2.0], vec![1.5, 0.1, -0.4], vec![-0.7, 0.9, 0.2]],
            vec![vec![1.1, 0.2, -0.5], vec![-0.3, 2.2, 0.4], vec![0.0, 0.5, 1.9]],
            vec![2, 0, 1],
        )
    }

    #[test]
    fn uniform_logits_soften_to_thirds() {
        for t in [0.5, 1.0, 3.0, 7.0] {
            for p in softmax_t(&[0.0, 0.0, 0.0], t) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn alpha_one_is_student_loss() {
        let (s, t, y) = batch();
        let cfg = DistillationConfig::new(5.0, 1.0).unwrap();
        let l = distillation_loss(&s, &t, &y, &cfg);
        assert!((l.total - cross_entropy(&s, &y)).abs() < 1e-12);
    }

    #[test]
    fn matched_logits_have_zero_divergence() {
        let (s, _, y) = batch();
        let cfg = DistillationConfig::new(3.0, 0.0).unwrap();
        let l = distillation_loss(&s, &s, &y, &cfg);
        assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn graph_and_slice_versions_agree() {
        let (s, t, y) = batch();
        for t_squared in [false, true] {
            let cfg = DistillationConfig {
                temperature: 3.0,
                alpha: 0.2,
                t_squared,
            };
            let expected = distillation_loss(&s, &t, &y, &cfg).total;
            let mut g = Graph::new(true, 0);
            let flat: Vec<f64> = s.iter().flatten().copied().collect();
            let z = g.input(Tensor::from_vec(&[3, 3], flat).unwrap());
            let tl = Tensor::from_vec(&[3, 3], t.iter().flatten().copied().collect()).unwrap();
            let l = graph_distillation(&mut g, z, &tl, &y, &cfg);
            assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DistillationConfig::new(0.0, 0.5).is_err());
        assert!(DistillationConfig::new(3.0, 1.5).is_err());
        assert!(DistillationConfig::new(3.0, -0.1).is_err());
    }
}
