//! Samples, vocabularies and the overall / unseen / tail partitions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::SampleTargets;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Verb, Task::Noun, Task::Action];

    pub fn name(self) -> &'static str {
        match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One anticipation instance: three frame-feature sequences and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub sample_id: String,
    pub rgb: Tensor<f32>,
    pub flow: Tensor<f32>,
    pub obj: Tensor<f32>,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    pub participant_id: String,
    pub split: Split,
}

impl ModalitySample {
    pub fn n_frames(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn label(&self, task: Task) -> usize {
        match task {
            Task::Verb => self.verb,
            Task::Noun => self.noun,
            Task::Action => self.action,
        }
    }

    pub fn targets(&self) -> SampleTargets {
        SampleTargets {
            verb: self.verb,
            noun: self.noun,
            action: self.action,
        }
    }

    pub fn features<S: Real>(&self) -> [Tensor<S>; 3] {
        [self.rgb.cast(), self.flow.cast(), self.obj.cast()]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_frames();
        for (name, t) in [("rgb", &self.rgb), ("flow", &self.flow), ("obj", &self.obj)] {
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::Config(format!(
                    "sample {}: {name} has shape {:?}, expected {n} frames",
                    self.sample_id,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub n_actions: usize,
}

impl Vocab {
    /// Smallest vocabulary covering every label in `samples`.
    pub fn covering(samples: &[ModalitySample]) -> Self {
        let max = |f: fn(&ModalitySample) -> usize| samples.iter().map(f).max().map_or(0, |m| m + 1);
        Vocab {
            n_verbs: max(|s| s.verb),
            n_nouns: max(|s| s.noun),
            n_actions: max(|s| s.action),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailRule {
    /// Classes below the count found a quarter of the way up the sorted
    /// count table.
    #[default]
    BottomQuartile,
    /// Classes with fewer than this many training instances.
    Below(u64),
}

impl TailRule {
    pub fn threshold(self, counts: &[u64]) -> u64 {
        match self {
            TailRule::BottomQuartile => bottom_quartile_threshold(counts),
            TailRule::Below(c) => c,
        }
    }
}

/// `sorted(counts)[len / 4]`: a class is tail when its count is strictly below this.
pub fn bottom_quartile_threshold(counts: &[u64]) -> u64 {
    if counts.is_empty() {
        return 0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    sorted[counts.len() / 4]
}

/// Vocabularies, action table and training-split statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub n_actions: usize,
    /// `(verb, noun)` of each action, when the action is annotated anywhere.
    pub action_table: Vec<Option<(usize, usize)>>,
    /// Training-split instance counts per verb, noun and action class.
    pub train_counts: [Vec<u64>; 3],
    pub tail_thresholds: [u64; 3],
    pub tail_mask: [Vec<bool>; 3],
    /// Participants present outside the training split only.
    pub unseen_participants: BTreeSet<String>,
}

impl ActionSpace {
    pub fn build(samples: &[ModalitySample], vocab: Vocab, rule: TailRule) -> Result<Self> {
        let mut table: Vec<Option<(usize, usize)>> = vec![None; vocab.n_actions];
        let mut pair_owner: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for s in samples {
            if s.verb >= vocab.n_verbs || s.noun >= vocab.n_nouns || s.action >= vocab.n_actions {
                return Err(Error::Config(format!(
                    "sample {}: labels (verb {}, noun {}, action {}) outside vocabulary {}x{}x{}",
                    s.sample_id, s.verb, s.noun, s.action, vocab.n_verbs, vocab.n_nouns, vocab.n_actions
                )));
            }
            let pair = (s.verb, s.noun);
            match table[s.action] {
                Some(p) if p != pair => {
                    return Err(Error::Config(format!(
                        "sample {}: action {} maps to {:?} elsewhere, got {:?}",
                        s.sample_id, s.action, p, pair
                    )))
                }
                _ => table[s.action] = Some(pair),
            }
            if let Some(&other) = pair_owner.get(&pair) {
                if other != s.action {
                    return Err(Error::Config(format!(
                        "sample {}: pair {:?} labelled as actions {other} and {}",
                        s.sample_id, pair, s.action
                    )));
                }
            }
            pair_owner.insert(pair, s.action);
        }

        let sizes = [vocab.n_verbs, vocab.n_nouns, vocab.n_actions];
        let mut counts: [Vec<u64>; 3] = sizes.map(|n| vec![0u64; n]);
        let mut train_participants = BTreeSet::new();
        for s in samples.iter().filter(|s| s.split == Split::Train) {
            for task in Task::ALL {
                counts[task.index()][s.label(task)] += 1;
            }
            train_participants.insert(s.participant_id.clone());
        }
        let unseen_participants = samples
            .iter()
            .filter(|s| s.split != Split::Train && !train_participants.contains(&s.participant_id))
            .map(|s| s.participant_id.clone())
            .collect();
        let tail_thresholds = [0, 1, 2].map(|i| rule.threshold(&counts[i]));
        let tail_mask = [0, 1, 2].map(|i| counts[i].iter().map(|&c| c < tail_thresholds[i]).collect());
        Ok(ActionSpace {
            n_verbs: vocab.n_verbs,
            n_nouns: vocab.n_nouns,
            n_actions: vocab.n_actions,
            action_table: table,
            train_counts: counts,
            tail_thresholds,
            tail_mask,
            unseen_participants,
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_verbs: self.n_verbs,
            n_nouns: self.n_nouns,
            n_actions: self.n_actions,
        }
    }

    pub fn n_classes(&self, task: Task) -> usize {
        match task {
            Task::Verb => self.n_verbs,
            Task::Noun => self.n_nouns,
            Task::Action => self.n_actions,
        }
    }

    pub fn counts(&self, task: Task) -> &[u64] {
        &self.train_counts[task.index()]
    }

    pub fn is_tail(&self, task: Task, class: usize) -> bool {
        self.tail_mask[task.index()][class]
    }

    pub fn tail_classes(&self, task: Task) -> BTreeSet<usize> {
        self.tail_mask[task.index()]
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn pair_of(&self, action: usize) -> Option<(usize, usize)> {
        self.action_table.get(action).copied().flatten()
    }
}

/// Index sets into an evaluation sample list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalPartitions {
    pub overall: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Samples whose verb, noun or action label is a tail class.
    pub tail: [Vec<usize>; 3],
}

impl EvalPartitions {
    pub fn tail(&self, task: Task) -> &[usize] {
        &self.tail[task.index()]
    }
}

pub fn partition_eval(samples: &[ModalitySample], space: &ActionSpace) -> EvalPartitions {
    let mut p = EvalPartitions {
        overall: (0..samples.len()).collect(),
        ..EvalPartitions::default()
    };
    for (i, s) in samples.iter().enumerate() {
        if space.unseen_participants.contains(&s.participant_id) {
            p.unseen.push(i);
        }
        for task in Task::ALL {
            if space.is_tail(task, s.label(task)) {
                p.tail[task.index()].push(i);
            }
        }
    }
    p
}
