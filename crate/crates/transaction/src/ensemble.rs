//! Per-model class probabilities and their uniform average across checkpoints.

use transaction_core::data::{ActionSpace, ModalitySample};
use transaction_core::kernels::softmax_row;
use transaction_core::metrics::{action_scores_from_probs, ActionMode, TaskScores};
use transaction_core::model::ModelParams;
use transaction_core::{Real, Tape, Tensor};

use crate::error::{AppError, Result};
use crate::train::{prepare, Prepared};

fn softmax_f64<S: Real>(tape: &Tape<S>, logits: transaction_core::Var, out: &mut Vec<f64>) {
    let z: Vec<f64> = tape.value(logits).data().iter().map(|&x| Real::to_f64(x)).collect();
    let mut p = vec![0.0; z.len()];
    softmax_row(&z, &mut p);
    out.extend_from_slice(&p);
}

/// Softmax of the last block's verb and noun heads and of the action head,
/// one row per sample.
pub fn predict<S: Real>(params: &ModelParams<S>, data: &[Prepared<S>]) -> Result<TaskScores> {
    let c = &params.config;
    let mut verb = Vec::with_capacity(data.len() * c.n_verbs);
    let mut noun = Vec::with_capacity(data.len() * c.n_nouns);
    let mut action = Vec::with_capacity(data.len() * c.n_actions);
    let mut tape = Tape::inference();
    for p in data {
        tape.clear();
        let [r, f, o] = &p.features;
        let out = params.forward(&mut tape, [r, f, o])?;
        softmax_f64(&tape, out.final_verb_logits(), &mut verb);
        softmax_f64(&tape, out.final_noun_logits(), &mut noun);
        softmax_f64(&tape, out.action_logits, &mut action);
    }
    let b = data.len();
    Ok(TaskScores {
        verb: Tensor::from_vec(&[b, c.n_verbs], verb)?,
        noun: Tensor::from_vec(&[b, c.n_nouns], noun)?,
        action: Tensor::from_vec(&[b, c.n_actions], action)?,
    })
}

/// Uniform mean of per-model probabilities. Members must agree on shapes.
///
/// Computed as `x0 + sum((xi - x0) / n)`, which returns identical members unchanged.
pub fn average(members: &[TaskScores]) -> Result<TaskScores> {
    let first = members
        .first()
        .ok_or_else(|| AppError::Usage("ensemble needs at least one member".into()))?;
    let n = members.len() as f64;
    let mut mean = first.clone();
    for (i, m) in members.iter().enumerate().skip(1) {
        for (acc, x, x0, name) in [
            (&mut mean.verb, &m.verb, &first.verb, "verb"),
            (&mut mean.noun, &m.noun, &first.noun, "noun"),
            (&mut mean.action, &m.action, &first.action, "action"),
        ] {
            if acc.shape() != x.shape() {
                return Err(AppError::Data(format!(
                    "ensemble member {i} gives {name} scores shaped {:?}, member 0 gives {:?}",
                    x.shape(),
                    acc.shape()
                )));
            }
            for ((a, b), b0) in acc.data_mut().iter_mut().zip(x.data()).zip(x0.data()) {
                *a += (b - b0) / n;
            }
        }
    }
    Ok(mean)
}

/// Errors unless every member predicts the same verb, noun and action vocabularies.
pub fn check_compatible(members: &[ModelParams<f32>]) -> Result<()> {
    let Some(first) = members.first() else {
        return Err(AppError::Usage("ensemble needs at least one checkpoint".into()));
    };
    let vocab = |p: &ModelParams<f32>| (p.config.n_verbs, p.config.n_nouns, p.config.n_actions);
    for (i, m) in members.iter().enumerate().skip(1) {
        if vocab(m) != vocab(first) {
            return Err(AppError::Data(format!(
                "vocabulary mismatch: checkpoint {i} predicts {:?} verb/noun/action classes, checkpoint 0 predicts {:?}",
                vocab(m),
                vocab(first)
            )));
        }
    }
    Ok(())
}

/// Averaged probabilities of every member over `samples`, computed in precision `S`.
pub fn ensemble_predict<S: Real>(members: &[ModelParams<f32>], samples: &[&ModalitySample]) -> Result<TaskScores> {
    check_compatible(members)?;
    let data: Vec<Prepared<S>> = prepare(samples);
    let per_model = members
        .iter()
        .map(|m| predict(&m.cast::<S>(), &data))
        .collect::<Result<Vec<_>>>()?;
    average(&per_model)
}

/// Replaces the action rows according to `mode`.
pub fn with_action_mode(scores: TaskScores, mode: ActionMode, space: &ActionSpace) -> TaskScores {
    if mode == ActionMode::Head {
        return scores;
    }
    let b = scores.verb.rows();
    let mut action = Vec::with_capacity(b * space.n_actions);
    for r in 0..b {
        action.extend(action_scores_from_probs(
            scores.verb.row(r),
            scores.noun.row(r),
            scores.action.row(r),
            mode,
            space,
        ));
    }
    TaskScores {
        action: Tensor::from_vec(&[b, space.n_actions], action).expect("row count matches"),
        ..scores
    }
}
