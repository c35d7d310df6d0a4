//! Central finite-difference checks of tape gradients at 64-bit precision.
//!
//! The reference side only ever evaluates forward passes; it shares no code
//! with any backward rule.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, EncoderLayerParams};
use crate::error::Result;
use crate::loss::{self, EqlConfig, HeadLossConfigs, SampleTargets};
use crate::model::{ModelConfig, ModelParams};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }

    fn merge(&mut self, other: (f64, usize)) {
        self.max_rel_error = self.max_rel_error.max(other.0);
        self.probes += other.1;
    }
}

/// Checks d f / d inputs for every entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| alloc::vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

/// Checks d f / d θ at the given `(parameter, flat index)` probes.
pub fn check_params<F>(store: &ParamStore<f64>, probes: &[(ParamId, usize)], f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grads();
    grads.accumulate_grads(&tape);

    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let l = f(&mut t, s)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for &(id, j) in probes {
        let analytic = grads.get(id).grad().map_or(0.0, |g| g[j]);
        let x0 = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = x0 + STEP;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[j] = x0 - STEP;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[j] = x0;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok((worst, probes.len()))
}

/// Every scalar of every parameter.
pub fn all_probes(store: &ParamStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |j| (id, j)))
        .collect()
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let dist = Uniform::new_inclusive(-scale, scale).expect("finite");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// `Σ y ⊙ r` for a fixed random `r`: a scalar whose gradient exercises every
/// output entry differently.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn dim<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Runs `trials` random small shapes through every differentiable tape op
/// and the attention blocks.
pub fn run_op_suite(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "matmul",
        "add",
        "mul",
        "add_bias",
        "scale",
        "relu",
        "softmax_rows",
        "layer_norm",
        "concat",
        "split",
        "mean_over_axis",
        "transpose_last_two",
        "sum",
        "cross_entropy",
        "equalization_loss",
        "scaled_attention",
        "multi_head_attention",
        "encoder_layer",
    ];
    let mut results: Vec<CheckResult> = names
        .iter()
        .map(|n| CheckResult {
            name: String::from(*n),
            max_rel_error: 0.0,
            probes: 0,
        })
        .collect();

    for _ in 0..trials {
        let (m, k, p) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, p], 1.0);
        let r_mp = random_tensor(&mut rng, &[m, p], 1.0);
        let r_mk = random_tensor(&mut rng, &[m, k], 1.0);
        let b2 = random_tensor(&mut rng, &[m, k], 1.0);
        let bias = random_tensor(&mut rng, &[k], 1.0);
        let c = rng.random_range(-2.0..2.0);

        results[0].merge(check_inputs(&[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, &r_mp)
        })?);
        results[1].merge(check_inputs(&[a.clone(), b2.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, &r_mk)
        })?);
        results[2].merge(check_inputs(&[a.clone(), b2.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, &r_mk)
        })?);
        results[3].merge(check_inputs(&[a.clone(), bias.clone()], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, &r_mk)
        })?);
        results[4].merge(check_inputs(core::slice::from_ref(&a), |t, v| {
            let y = t.scale(v[0], c);
            weighted_sum(t, y, &r_mk)
        })?);
        results[5].merge(check_inputs(core::slice::from_ref(&a), |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &r_mk)
        })?);
        results[6].merge(check_inputs(core::slice::from_ref(&a), |t, v| {
            let y = t.softmax_rows(v[0]);
            weighted_sum(t, y, &r_mk)
        })?);
        let kk = k.max(2);
        let x = random_tensor(&mut rng, &[m, kk], 1.0);
        let gain = random_tensor(&mut rng, &[kk], 1.0);
        let beta = random_tensor(&mut rng, &[kk], 1.0);
        let r_ln = random_tensor(&mut rng, &[m, kk], 1.0);
        results[7].merge(check_inputs(&[x, gain, beta], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, &r_ln)
        })?);
        let other = random_tensor(&mut rng, &[m, p], 1.0);
        let r_cat = random_tensor(&mut rng, &[m, k + p], 1.0);
        results[8].merge(check_inputs(&[a.clone(), other], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, &r_cat)
        })?);
        let rows = dim(&mut rng, 2, 5);
        let whole = random_tensor(&mut rng, &[rows, k], 1.0);
        let first = rng.random_range(1..rows);
        let r_top = random_tensor(&mut rng, &[first, k], 1.0);
        let r_bot = random_tensor(&mut rng, &[rows - first, k], 1.0);
        results[9].merge(check_inputs(core::slice::from_ref(&whole), |t, v| {
            let parts = t.split(v[0], &[first, rows - first], 0)?;
            let s0 = weighted_sum(t, parts[0], &r_top)?;
            let s1 = weighted_sum(t, parts[1], &r_bot)?;
            t.add(s0, s1)
        })?);
        let axis = rng.random_range(0..2);
        let r_mean = random_tensor(&mut rng, &[if axis == 0 { k } else { m }], 1.0);
        results[10].merge(check_inputs(core::slice::from_ref(&a), |t, v| {
            let y = t.mean_over_axis(v[0], axis)?;
            weighted_sum(t, y, &r_mean)
        })?);
        let r_t = random_tensor(&mut rng, &[k, m], 1.0);
        results[11].merge(check_inputs(core::slice::from_ref(&a), |t, v| {
            let y = t.transpose_last_two(v[0])?;
            weighted_sum(t, y, &r_t)
        })?);
        results[12].merge(check_inputs(core::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])))?);

        let classes = dim(&mut rng, 2, 6);
        let logits = random_tensor(&mut rng, &[m, classes], 2.0);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        results[13].merge(check_inputs(core::slice::from_ref(&logits), |t, v| {
            loss::cross_entropy(t, v[0], &targets)
        })?);
        let freqs: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
        let eql = EqlConfig::new(0.7, 0.5, freqs)?;
        let eql_seed = rng.random::<u64>();
        results[14].merge(check_inputs(core::slice::from_ref(&logits), |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(eql_seed);
            loss::equalization_loss(t, v[0], &targets, &eql, &mut r)
        })?);

        let (nq, nk, dk, dv) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
        let q = random_tensor(&mut rng, &[nq, dk], 1.0);
        let kt = random_tensor(&mut rng, &[nk, dk], 1.0);
        let vt = random_tensor(&mut rng, &[nk, dv], 1.0);
        let r_att = random_tensor(&mut rng, &[nq, dv], 1.0);
        results[15].merge(check_inputs(&[q, kt, vt], |t, v| {
            let y = attention::scaled_attention(t, v[0], v[1], v[2])?;
            weighted_sum(t, y, &r_att)
        })?);
    }

    // Layer-level checks probe every parameter plus the input.
    let layer_trials = (trials / 10).max(1);
    for _ in 0..layer_trials {
        let heads = dim(&mut rng, 1, 2);
        let d = 2 * heads * dim(&mut rng, 1, 2);
        let n = dim(&mut rng, 1, 4);
        let mut store = ParamStore::<f64>::new();
        let mha = AttentionParams::init(&mut store, "mha", d, heads, &mut rng)?;
        let x = random_tensor(&mut rng, &[n, d], 1.0);
        let r = random_tensor(&mut rng, &[n, d], 1.0);
        let probes = all_probes(&store);
        let f = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let xv = t.constant(x.clone());
            let y = attention::multi_head_attention(t, s, xv, xv, &mha)?;
            weighted_sum(t, y, &r)
        };
        results[16].merge(check_params(&store, &probes, f)?);
        results[16].merge(check_inputs(core::slice::from_ref(&x), |t, v| {
            let y = attention::multi_head_attention(t, &store, v[0], v[0], &mha)?;
            weighted_sum(t, y, &r)
        })?);

        let mut store = ParamStore::<f64>::new();
        let enc = EncoderLayerParams::init(&mut store, "enc", d, heads, 2 * d, &mut rng)?;
        perturb_norms(&mut store, &enc, &mut rng);
        let add_pe = rng.random_bool(0.5);
        let probes = all_probes(&store);
        let f = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let xv = t.constant(x.clone());
            let y = attention::encoder_layer(t, s, xv, &enc, add_pe)?;
            weighted_sum(t, y, &r)
        };
        results[17].merge(check_params(&store, &probes, f)?);
        results[17].merge(check_inputs(core::slice::from_ref(&x), |t, v| {
            let y = attention::encoder_layer(t, &store, v[0], &enc, add_pe)?;
            weighted_sum(t, y, &r)
        })?);
    }
    Ok(results)
}

/// Moves layer-norm gains and biases off their 1/0 initialisation so their
/// gradients are generic.
fn perturb_norms<R: Rng>(store: &mut ParamStore<f64>, enc: &EncoderLayerParams, rng: &mut R) {
    for id in [enc.norm1_gain, enc.norm1_bias, enc.norm2_gain, enc.norm2_bias, enc.mlp_b1, enc.mlp_b2] {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

/// End-to-end check of the cascaded model with the composite loss on random
/// features, probing `n_probes` random parameter entries.
pub fn check_model(config: ModelConfig, seed: u64, n_probes: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut params = ModelParams::<f64>::init(config, seed)?;
    for p in params.store.iter_mut() {
        if p.name.contains("norm") || p.name.ends_with(".bias") || p.name.contains(".b") {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let n = config.n_frames;
    let feats = [
        random_tensor(&mut rng, &[n, config.d_rgb], 1.0),
        random_tensor(&mut rng, &[n, config.d_flow], 1.0),
        random_tensor(&mut rng, &[n, config.d_obj], 1.0),
    ];
    let targets = [SampleTargets {
        verb: rng.random_range(0..config.n_verbs),
        noun: rng.random_range(0..config.n_nouns),
        action: rng.random_range(0..config.n_actions),
    }];
    let uniform = |c: usize| EqlConfig::new(0.9, 0.5 / c as f64, (0..c).map(|i| (i % 2) as f64 / c as f64).collect());
    let cfgs = HeadLossConfigs {
        verb: uniform(config.n_verbs)?,
        noun: uniform(config.n_nouns)?,
        action: uniform(config.n_actions)?,
    };
    let eql_seed = rng.random::<u64>();
    let all = all_probes(&params.store);
    let probes: Vec<(ParamId, usize)> = (0..n_probes).map(|_| all[rng.random_range(0..all.len())]).collect();
    let wiring = params.clone();
    let f = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let model = ModelParams {
            store: s.clone(),
            ..wiring.clone()
        };
        let out = model.forward(t, [&feats[0], &feats[1], &feats[2]])?;
        let mut r = ChaCha8Rng::seed_from_u64(eql_seed);
        loss::composite_loss(t, core::slice::from_ref(&out), &targets, &cfgs, &mut r)
    };
    let (err, count) = check_params(&params.store, &probes, f)?;
    params.store.zero_grads();
    Ok(CheckResult {
        name: format!("model[{}]", config.variant),
        max_rel_error: err,
        probes: count,
    })
}
