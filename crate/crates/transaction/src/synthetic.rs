//! Seeded synthetic stand-in for precomputed video features.
//!
//! Actions follow a Zipf law over their index. Each verb and noun owns a
//! Gaussian prototype per modality (verbs drive rgb and flow, nouns drive rgb
//! and obj), and each class also plants a one-frame signature early in the
//! window, so some of the label signal lives at a specific time step.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use transaction_core::data::{ModalitySample, Split, TailRule, Vocab};
use transaction_core::Tensor;

use crate::dataset::{annotation_of, record_of, Dataset};
use crate::error::{AppError, Result};
use crate::features::FeatureHeader;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_frames: usize,
    pub d_rgb: usize,
    pub d_flow: usize,
    pub d_obj: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub n_actions: usize,
    pub zipf_exponent: f64,
    pub n_participants: usize,
    /// Share of participants that only appear in val/test.
    pub unseen_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Standard deviation of the per-entry noise.
    pub noise: f64,
    /// Scale of the class prototypes present in every frame.
    pub class_scale: f64,
    /// Scale of the one-frame class signature.
    pub signal: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_samples: 512,
            n_frames: 8,
            d_rgb: 32,
            d_flow: 32,
            d_obj: 32,
            n_verbs: 12,
            n_nouns: 24,
            n_actions: 48,
            zipf_exponent: 1.0,
            n_participants: 8,
            unseen_fraction: 0.25,
            val_fraction: 0.2,
            test_fraction: 0.1,
            noise: 1.0,
            class_scale: 0.5,
            signal: 1.5,
        }
    }
}

impl SyntheticConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_verbs: self.n_verbs,
            n_nouns: self.n_nouns,
            n_actions: self.n_actions,
        }
    }

    pub fn n_unseen_participants(&self) -> usize {
        if self.unseen_fraction <= 0.0 {
            0
        } else {
            ((self.unseen_fraction * self.n_participants as f64).round() as usize).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AppError::Usage(m));
        for (name, v) in [
            ("n_samples", self.n_samples),
            ("n_frames", self.n_frames),
            ("d_rgb", self.d_rgb),
            ("d_flow", self.d_flow),
            ("d_obj", self.d_obj),
            ("n_verbs", self.n_verbs),
            ("n_nouns", self.n_nouns),
            ("n_participants", self.n_participants),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        let lo = self.n_verbs.max(self.n_nouns);
        let hi = self.n_verbs * self.n_nouns;
        if self.n_actions < lo || self.n_actions > hi {
            return bad(format!(
                "n_actions = {} must lie in [{lo}, {hi}] so every verb and noun occurs in some distinct pair",
                self.n_actions
            ));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return bad(format!("zipf_exponent must be finite and >= 0, got {}", self.zipf_exponent));
        }
        for (name, v) in [
            ("unseen_fraction", self.unseen_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return bad(format!(
                "val_fraction + test_fraction = {} leaves no training samples",
                self.val_fraction + self.test_fraction
            ));
        }
        if self.n_unseen_participants() > 0 && self.val_fraction + self.test_fraction == 0.0 {
            return bad("unseen_fraction > 0 needs val_fraction or test_fraction > 0".into());
        }
        if self.n_unseen_participants() >= self.n_participants {
            return bad(format!(
                "unseen_fraction {} of {} participants leaves none for training",
                self.unseen_fraction, self.n_participants
            ));
        }
        for (name, v) in [("noise", self.noise), ("class_scale", self.class_scale), ("signal", self.signal)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Distinct `(verb, noun)` pairs, the first `max(V, O)` covering every verb
/// and noun, the rest drawn without replacement.
fn action_pairs<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Vec<(usize, usize)> {
    let cover = cfg.n_verbs.max(cfg.n_nouns);
    let mut pairs: Vec<(usize, usize)> = (0..cover).map(|a| (a % cfg.n_verbs, a % cfg.n_nouns)).collect();
    let mut rest: Vec<(usize, usize)> = (0..cfg.n_verbs)
        .flat_map(|v| (0..cfg.n_nouns).map(move |n| (v, n)))
        .filter(|p| !pairs.contains(p))
        .collect();
    rest.shuffle(rng);
    pairs.extend(rest.into_iter().take(cfg.n_actions - cover));
    // Spread the covering pairs over the frequency ranks.
    pairs.shuffle(rng);
    pairs
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Prototypes {
    /// `[class][modality]` full-window mean.
    mean: Vec<[Vec<f64>; 3]>,
    /// `[class][modality]` one-frame signature.
    signature: Vec<[Vec<f64>; 3]>,
    /// Frame index carrying the signature.
    frame: Vec<usize>,
}

fn prototypes<R: Rng>(rng: &mut R, n_classes: usize, widths: [usize; 3], active: [bool; 3], n_frames: usize) -> Prototypes {
    let early = (n_frames / 4).max(1);
    let mut p = Prototypes {
        mean: Vec::with_capacity(n_classes),
        signature: Vec::with_capacity(n_classes),
        frame: Vec::with_capacity(n_classes),
    };
    for _ in 0..n_classes {
        let mk = |rng: &mut R, m: usize| if active[m] { gaussian(rng, widths[m]) } else { vec![0.0; widths[m]] };
        p.mean.push([mk(rng, 0), mk(rng, 1), mk(rng, 2)]);
        p.signature.push([mk(rng, 0), mk(rng, 1), mk(rng, 2)]);
        p.frame.push(rng.random_range(0..early));
    }
    p
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let widths = [cfg.d_rgb, cfg.d_flow, cfg.d_obj];
    let pairs = action_pairs(cfg, &mut rng);
    let verbs = prototypes(&mut rng, cfg.n_verbs, widths, [true, true, false], cfg.n_frames);
    let nouns = prototypes(&mut rng, cfg.n_nouns, widths, [true, false, true], cfg.n_frames);

    let weights: Vec<f64> = (0..cfg.n_actions)
        .map(|a| ((a + 1) as f64).powf(-cfg.zipf_exponent))
        .collect();
    let actions = WeightedIndex::new(&weights).map_err(|e| AppError::Usage(format!("zipf weights: {e}")))?;

    let n_unseen = cfg.n_unseen_participants();
    let participants: Vec<String> = (0..cfg.n_participants).map(|p| format!("P{:02}", p + 1)).collect();
    let n_seen = cfg.n_participants - n_unseen;

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let u: f64 = rng.random();
        let split = if u < cfg.val_fraction {
            Split::Val
        } else if u < cfg.val_fraction + cfg.test_fraction {
            Split::Test
        } else {
            Split::Train
        };
        let participant = match split {
            Split::Train => rng.random_range(0..n_seen),
            _ => rng.random_range(0..cfg.n_participants),
        };
        let action = actions.sample(&mut rng);
        let (verb, noun) = pairs[action];

        let mut seqs: Vec<Tensor<f32>> = Vec::with_capacity(3);
        for (m, &d) in widths.iter().enumerate() {
            let mut data = Vec::with_capacity(cfg.n_frames * d);
            for t in 0..cfg.n_frames {
                for j in 0..d {
                    let mut x = cfg.noise * rng.sample::<f64, _>(StandardNormal);
                    x += cfg.class_scale * (verbs.mean[verb][m][j] + nouns.mean[noun][m][j]);
                    if t == verbs.frame[verb] {
                        x += cfg.signal * verbs.signature[verb][m][j];
                    }
                    if t == nouns.frame[noun] {
                        x += cfg.signal * nouns.signature[noun][m][j];
                    }
                    data.push(x as f32);
                }
            }
            seqs.push(Tensor::from_vec(&[cfg.n_frames, d], data)?);
        }
        let obj = seqs.pop().unwrap();
        let flow = seqs.pop().unwrap();
        let rgb = seqs.pop().unwrap();
        samples.push(ModalitySample {
            sample_id: format!("s{i:06}"),
            rgb,
            flow,
            obj,
            verb,
            noun,
            action,
            participant_id: participants[participant].clone(),
            split,
        });
    }
    let header = FeatureHeader {
        n_samples: cfg.n_samples,
        n_frames: cfg.n_frames,
        d_rgb: cfg.d_rgb,
        d_flow: cfg.d_flow,
        d_obj: cfg.d_obj,
    };
    let records = samples.iter().map(record_of).collect();
    let rows: Vec<_> = samples.iter().map(annotation_of).collect();
    Dataset::assemble(header, records, &rows, Some(cfg.vocab()), TailRule::default())
}
