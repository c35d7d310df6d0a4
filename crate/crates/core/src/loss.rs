//! Cross-entropy, softmax equalization loss, and the summed training
//! objective over all prediction heads.
//!
//! The equalization loss replaces the softmax denominator by
//! `Σ_k w̃_k e^{z_k}` with `w̃_k = 1 − β_k · T(k) · (1 − y_k)`: `β_k` is a
//! Bernoulli(γ) draw made independently per class and per sample, `T(k)` is 1
//! when class `k`'s training frequency is below λ, and the `(1 − y_k)` factor
//! keeps the ground-truth class in the denominator. A gated class receives
//! exactly zero gradient, so frequent-class samples stop pushing rare-class
//! logits down.

use alloc::vec::Vec;

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;

use crate::data::bottom_quartile_threshold;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EqlConfig {
    /// Probability that `β = 1`.
    pub gamma: f64,
    /// Relative-frequency threshold; classes strictly below it are rare.
    pub lambda: f64,
    /// Relative training frequency per class.
    pub class_frequencies: Vec<f64>,
}

impl EqlConfig {
    pub fn new(gamma: f64, lambda: f64, class_frequencies: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(alloc::format!("gamma must be in [0, 1], got {gamma}")));
        }
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::Config(alloc::format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(EqlConfig {
            gamma,
            lambda,
            class_frequencies,
        })
    }

    /// Relative frequencies from raw counts; an all-zero table stays all zero.
    pub fn from_counts(counts: &[u64], gamma: f64, lambda: f64) -> Result<Self> {
        Self::new(gamma, lambda, relative_frequencies(counts))
    }

    /// λ at the bottom-quartile count boundary of `counts`.
    pub fn bottom_quartile(counts: &[u64], gamma: f64) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        let boundary = bottom_quartile_threshold(counts);
        let lambda = if total == 0 {
            0.0
        } else {
            boundary as f64 / total as f64
        };
        Self::from_counts(counts, gamma, lambda)
    }

    pub fn n_classes(&self) -> usize {
        self.class_frequencies.len()
    }

    pub fn is_rare(&self, class: usize) -> bool {
        self.class_frequencies[class] < self.lambda
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(alloc::format!("gamma must be in [0, 1], got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }
}

pub fn relative_frequencies(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn cross_entropy<S: Real>(tape: &mut Tape<S>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.softmax_nll(logits, targets, None)
}

/// Per-sample, per-class gates `w̃` as a flat `B × C` buffer.
pub fn eql_weights<S: Real, R: Rng + ?Sized>(
    targets: &[usize],
    n_classes: usize,
    cfg: &EqlConfig,
    rng: &mut R,
) -> Result<Vec<S>> {
    if cfg.n_classes() != n_classes {
        return Err(Error::FrequencyLength {
            expected: n_classes,
            actual: cfg.n_classes(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::TargetOutOfRange {
            target: t,
            classes: n_classes,
        });
    }
    let beta = Bernoulli::new(cfg.gamma).map_err(|_| Error::Config("gamma outside [0, 1]".into()))?;
    let mut w = Vec::with_capacity(targets.len() * n_classes);
    for &t in targets {
        for k in 0..n_classes {
            let drawn = beta.sample(rng);
            let gated = drawn && cfg.is_rare(k) && k != t;
            w.push(if gated { S::zero() } else { S::one() });
        }
    }
    Ok(w)
}

pub fn equalization_loss<S: Real, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &[usize],
    cfg: &EqlConfig,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 {
        return Err(Error::shape("equalization_loss", shape, &[targets.len()]));
    }
    let w = eql_weights::<S, R>(targets, shape[1], cfg, rng)?;
    tape.softmax_nll(logits, targets, Some(&w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLossConfigs {
    pub verb: EqlConfig,
    pub noun: EqlConfig,
    pub action: EqlConfig,
}

impl HeadLossConfigs {
    /// Same thresholds with `gamma` on every head; `0.0` gives plain cross-entropy.
    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        Ok(HeadLossConfigs {
            verb: self.verb.with_gamma(gamma)?,
            noun: self.noun.with_gamma(gamma)?,
            action: self.action.with_gamma(gamma)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleTargets {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// Sum over blocks of verb and noun losses plus the action loss, every term
/// unit-weighted and averaged over the batch. `outputs[i]` is sample `i`'s
/// forward pass on the same tape.
pub fn composite_loss<S: Real, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    outputs: &[ForwardOutput],
    targets: &[SampleTargets],
    cfgs: &HeadLossConfigs,
    rng: &mut R,
) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Size {
            op: "composite_loss",
            detail: alloc::format!("{} outputs for {} targets", outputs.len(), targets.len()),
        });
    }
    let n_blocks = outputs[0].per_block_verb_logits.len();
    let verbs: Vec<usize> = targets.iter().map(|t| t.verb).collect();
    let nouns: Vec<usize> = targets.iter().map(|t| t.noun).collect();
    let actions: Vec<usize> = targets.iter().map(|t| t.action).collect();

    let mut terms = Vec::with_capacity(2 * n_blocks + 1);
    for b in 0..n_blocks {
        let v: Vec<Var> = outputs.iter().map(|o| o.per_block_verb_logits[b]).collect();
        let v = tape.concat(&v, 0)?;
        terms.push(equalization_loss(tape, v, &verbs, &cfgs.verb, rng)?);
        let n: Vec<Var> = outputs.iter().map(|o| o.per_block_noun_logits[b]).collect();
        let n = tape.concat(&n, 0)?;
        terms.push(equalization_loss(tape, n, &nouns, &cfgs.noun, rng)?);
    }
    let a: Vec<Var> = outputs.iter().map(|o| o.action_logits).collect();
    let a = tape.concat(&a, 0)?;
    terms.push(equalization_loss(tape, a, &actions, &cfgs.action, rng)?);

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}
