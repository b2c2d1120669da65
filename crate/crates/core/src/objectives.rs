//! Loss functions for the three self-supervised tasks, the distillation
//! term, and their weighted combination
//! `L_final = L_KD + α·L_TS + β·L_CI + γ·L_WR`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

pub(crate) fn bce(p: f64, y: f64) -> f64 {
    let p = clamp(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d/dp of [`bce`]; zero where the clamp is active.
pub(crate) fn bce_grad(p: f64, y: f64) -> f64 {
    if !(EPS..=1.0 - EPS).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

pub(crate) fn bce_mean(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum();
    Ok(total / probs.len() as f64)
}

fn as_f64(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| f64::from(l)).collect()
}

/// Topic segmentation loss: mean BCE over utterances.
pub fn loss_ts(probs: &[f64], labels: &[u8]) -> Result<f64> {
    bce_mean(probs, &as_f64(labels))
}

/// Coreference loss: mean BCE over the context utterances.
pub fn loss_ci(probs: &[f64], labels: &[u8]) -> Result<f64> {
    bce_mean(probs, &as_f64(labels))
}

fn distance(a: &[f64], b: &[f64], squared: bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} entries", a.len(), b.len())));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(if squared { ss } else { ss.sqrt() })
}

/// Word reconstruction loss `‖ŷ − y‖₂`.
pub fn loss_wr(reconstruction: &[f64], target: &[u8]) -> Result<f64> {
    distance(reconstruction, &as_f64(target), false)
}

/// Distillation loss `‖E_[CLS] − E*_[CLS]‖₂`.
pub fn loss_kd(student: &[f64], teacher: &[f64]) -> Result<f64> {
    distance(student, teacher, false)
}

/// Sum-of-squares variants of the two norm losses (the "mean squared error"
/// reading, enabled by `squared_norms`).
pub fn loss_wr_squared(reconstruction: &[f64], target: &[u8]) -> Result<f64> {
    distance(reconstruction, &as_f64(target), true)
}

pub fn loss_kd_squared(student: &[f64], teacher: &[f64]) -> Result<f64> {
    distance(student, teacher, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn kd_only() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-2,
            beta: 1e-3,
            gamma: 1e-2,
        }
    }
}

/// Which terms an instance contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask {
    pub topic: bool,
    pub coref: bool,
    pub wr: bool,
    pub kd: bool,
}

impl TaskMask {
    pub const ALL: TaskMask = TaskMask {
        topic: true,
        coref: true,
        wr: true,
        kd: true,
    };

    pub fn intersect(self, other: TaskMask) -> TaskMask {
        TaskMask {
            topic: self.topic && other.topic,
            coref: self.coref && other.coref,
            wr: self.wr && other.wr,
            kd: self.kd && other.kd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ts: f64,
    pub l_ci: f64,
    pub l_wr: f64,
    pub l_kd: f64,
    pub l_final: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_ts", self.l_ts),
            ("l_ci", self.l_ci),
            ("l_wr", self.l_wr),
            ("l_kd", self.l_kd),
            ("l_final", self.l_final),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub(crate) fn accumulate(&mut self, other: &LossReport) {
        self.l_ts += other.l_ts;
        self.l_ci += other.l_ci;
        self.l_wr += other.l_wr;
        self.l_kd += other.l_kd;
        self.l_final += other.l_final;
    }

    pub(crate) fn scaled(mut self, f: f64) -> Self {
        self.l_ts *= f;
        self.l_ci *= f;
        self.l_wr *= f;
        self.l_kd *= f;
        self.l_final *= f;
        self
    }
}

/// Combines individual loss values. Masked-off terms are reported and
/// counted as exactly zero.
pub fn loss_final(
    l_ts: f64,
    l_ci: f64,
    l_wr: f64,
    l_kd: f64,
    weights: &LossWeights,
    mask: TaskMask,
) -> LossReport {
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let l_ts = pick(mask.topic, l_ts);
    let l_ci = pick(mask.coref, l_ci);
    let l_wr = pick(mask.wr, l_wr);
    let l_kd = pick(mask.kd, l_kd);
    LossReport {
        l_ts,
        l_ci,
        l_wr,
        l_kd,
        l_final: l_kd + weights.alpha * l_ts + weights.beta * l_ci + weights.gamma * l_wr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn topic_loss_cases() {
        let perfect = loss_ts(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap();
        assert!(perfect < 1e-6);
        let half = loss_ts(&[0.5, 0.5], &[1, 0]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let v = loss_ts(&[0.9, 0.2], &[1, 0]).unwrap();
        let oracle = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.1643).abs() < 5e-5);
        assert!(loss_ts(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn coref_loss_cases() {
        assert!(loss_ci(&[1.0 - 1e-12, 1e-12, 1e-12], &[1, 0, 0]).unwrap() < 1e-6);
        let half = loss_ci(&[0.5, 0.5, 0.5], &[0, 1, 0]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let v = loss_ci(&[0.7, 0.1, 0.1], &[1, 0, 0]).unwrap();
        assert!((v - 0.1891).abs() < 5e-5);
    }

    #[test]
    fn norm_losses() {
        assert_eq!(loss_wr(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
        assert!((loss_wr(&[1.3, 0.4, 0.0], &[1, 0, 0]).unwrap() - 0.5).abs() < 1e-12);
        let v = 10;
        let half = vec![0.5; v];
        let mut target = vec![0u8; v];
        target[2] = 1;
        target[7] = 1;
        let expected = 0.5 * (v as f64).sqrt();
        assert!((loss_wr(&half, &target).unwrap() - expected).abs() < 1e-12);
        assert_eq!(loss_kd(&[3.0, 4.0, 0.0], &[0.0; 3]).unwrap(), 5.0);
        assert!(loss_kd(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(loss_kd_squared(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
    }

    #[test]
    fn combined_loss() {
        let w = LossWeights::default();
        let r = loss_final(2.0, 3.0, 4.0, 1.0, &w, TaskMask::ALL);
        assert!((r.l_final - 1.063).abs() < 1e-12);
        let zero = LossWeights::kd_only();
        assert_eq!(loss_final(2.0, 3.0, 4.0, 1.0, &zero, TaskMask::ALL).l_final, 1.0);
        let kd_only = TaskMask {
            topic: false,
            coref: false,
            wr: false,
            kd: true,
        };
        let r = loss_final(2.0, 3.0, 4.0, 1.0, &w, kd_only);
        assert_eq!(r.l_final, 1.0);
        assert_eq!((r.l_ts, r.l_ci, r.l_wr), (0.0, 0.0, 0.0));
    }

    #[test]
    fn weights_reject_negative() {
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(p in proptest::collection::vec(0.0f64..=1.0, 1..8), bits in any::<u8>()) {
            let labels: Vec<u8> = (0..p.len()).map(|i| (bits >> (i % 8)) & 1).collect();
            prop_assert!(loss_ts(&p, &labels).unwrap() >= 0.0);
            prop_assert!(loss_wr(&p, &labels).unwrap() >= 0.0);
        }

        #[test]
        fn kd_is_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assert_eq!(loss_kd(&a, &b).unwrap(), loss_kd(&b, &a).unwrap());
        }

        #[test]
        fn final_is_affine_in_weights(ts in 0.0f64..3.0, ci in 0.0f64..3.0, wr in 0.0f64..3.0, kd in 0.0f64..3.0,
                                      a in 0.0f64..1.0, b in 0.0f64..1.0, g in 0.0f64..1.0) {
            let at = |alpha: f64| loss_final(ts, ci, wr, kd, &LossWeights { alpha, beta: b, gamma: g }, TaskMask::ALL).l_final;
            let mid = at(a / 2.0 + 0.25);
            prop_assert!((mid - (at(a) + at(0.5)) / 2.0).abs() < 1e-12);
        }
    }
}
