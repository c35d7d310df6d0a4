//! Mean top-k recall: per-class recall@k macro-averaged over the classes that
//! have at least one instance in the evaluated set.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::str::FromStr;

use crate::data::{ActionSpace, EvalPartitions, Task};
use crate::error::{Error, Result};
use crate::kernels;
use crate::loss::SampleTargets;
use crate::real::Real;
use crate::tensor::Tensor;

pub const TOP_K: usize = 5;

/// Higher score first, then lower class index.
fn ranks_before<S: Real>(a: (usize, S), b: (usize, S)) -> bool {
    match a.1.partial_cmp(&b.1) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a.0 < b.0,
    }
}

/// The `k` best classes of one row ordered by (score descending, index
/// ascending). Returns every class when `k` exceeds the row length.
pub fn tie_break_topk<S: Real>(scores: &[S], k: usize) -> Vec<usize> {
    let mut best: Vec<(usize, S)> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        if best.len() == k && !ranks_before((i, s), best[k - 1]) {
            continue;
        }
        let pos = best
            .iter()
            .position(|&b| ranks_before((i, s), b))
            .unwrap_or(best.len());
        best.insert(pos, (i, s));
        best.truncate(k);
    }
    best.into_iter().map(|(i, _)| i).collect()
}

/// Recall@k for each class of `class_set` that has at least one instance
/// among `rows` (all rows when `None`).
pub fn topk_recall_per_class<S: Real>(
    scores: &Tensor<S>,
    targets: &[usize],
    k: usize,
    class_set: &BTreeSet<usize>,
    rows: Option<&[usize]>,
) -> Result<BTreeMap<usize, f64>> {
    let c = scores.cols();
    if k == 0 || k > c {
        return Err(Error::TopK { k, classes: c });
    }
    if targets.len() != scores.rows() {
        return Err(Error::shape("topk_recall", scores.shape(), &[targets.len()]));
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..targets.len()).collect();
            &all
        }
    };
    let mut hits: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for &r in rows {
        let t = targets[r];
        if !class_set.contains(&t) {
            continue;
        }
        let top = tie_break_topk(scores.row(r), k);
        let e = hits.entry(t).or_insert((0, 0));
        e.1 += 1;
        if top.contains(&t) {
            e.0 += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|(cls, (h, n))| (cls, h as f64 / n as f64))
        .collect())
}

/// Macro average of [`topk_recall_per_class`], or `None` when no class of
/// `class_set` has an instance.
pub fn mean_topk_recall<S: Real>(
    scores: &Tensor<S>,
    targets: &[usize],
    k: usize,
    class_set: &BTreeSet<usize>,
    rows: Option<&[usize]>,
) -> Result<Option<f64>> {
    let per_class = topk_recall_per_class(scores, targets, k, class_set, rows)?;
    if per_class.is_empty() {
        return Ok(None);
    }
    Ok(Some(per_class.values().sum::<f64>() / per_class.len() as f64))
}

pub fn top1_accuracy<S: Real>(scores: &Tensor<S>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| tie_break_topk(scores.row(r), 1)[0] == t)
        .count();
    correct as f64 / targets.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActionMode {
    /// Softmax of the dedicated action head.
    #[default]
    Head,
    /// Verb probability times noun probability for each action's pair,
    /// renormalised over the action table.
    Product,
}

impl ActionMode {
    pub fn name(self) -> &'static str {
        match self {
            ActionMode::Head => "head",
            ActionMode::Product => "product",
        }
    }
}

impl FromStr for ActionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(ActionMode::Head),
            "product" => Ok(ActionMode::Product),
            other => Err(Error::UnknownMode(String::from(other))),
        }
    }
}

/// Action distribution of one sample.
pub fn action_scores(
    verb_probs: &[f64],
    noun_probs: &[f64],
    action_logits: &[f64],
    mode: ActionMode,
    space: &ActionSpace,
) -> Vec<f64> {
    match mode {
        ActionMode::Head => {
            let mut out = alloc::vec![0.0; action_logits.len()];
            kernels::softmax_row(action_logits, &mut out);
            out
        }
        ActionMode::Product => product_scores(verb_probs, noun_probs, space),
    }
}

/// Falls back to uniform over known pairs if every product underflows.
fn product_scores(verb_probs: &[f64], noun_probs: &[f64], space: &ActionSpace) -> Vec<f64> {
    let mut out: Vec<f64> = (0..space.n_actions)
        .map(|a| match space.pair_of(a) {
            Some((v, n)) => verb_probs[v] * noun_probs[n],
            None => 0.0,
        })
        .collect();
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for v in &mut out {
            *v /= total;
        }
    } else {
        let known = space.action_table.iter().filter(|p| p.is_some()).count().max(1);
        for (a, v) in out.iter_mut().enumerate() {
            *v = if space.pair_of(a).is_some() {
                1.0 / known as f64
            } else {
                0.0
            };
        }
    }
    out
}

/// Action distribution from already-averaged verb, noun and action-head
/// probabilities.
pub fn action_scores_from_probs(
    verb_probs: &[f64],
    noun_probs: &[f64],
    action_probs: &[f64],
    mode: ActionMode,
    space: &ActionSpace,
) -> Vec<f64> {
    match mode {
        ActionMode::Head => action_probs.to_vec(),
        ActionMode::Product => product_scores(verb_probs, noun_probs, space),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Overall,
    Unseen,
    Tail,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Overall, Partition::Unseen, Partition::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Overall => "overall",
            Partition::Unseen => "unseen",
            Partition::Tail => "tail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReportCell {
    /// Mean top-k recall in percent; `None` when no class is eligible.
    pub value: Option<f64>,
    pub n_samples: usize,
    pub n_classes: usize,
}

/// Mean top-k recall for every task × partition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    /// Indexed `[task][partition]`.
    pub cells: [[ReportCell; 3]; 3],
}

impl EvalReport {
    pub fn cell(&self, task: Task, partition: Partition) -> &ReportCell {
        &self.cells[task.index()][partition as usize]
    }
}

/// Per-task score matrices for an evaluation set, each `B × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub verb: Tensor<f64>,
    pub noun: Tensor<f64>,
    pub action: Tensor<f64>,
}

impl TaskScores {
    pub fn get(&self, task: Task) -> &Tensor<f64> {
        match task {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }
}

/// Overall cells use every class; unseen cells restrict the samples to
/// unseen participants; tail cells restrict the classes to the tail set.
pub fn evaluate_scores(
    scores: &TaskScores,
    labels: &[SampleTargets],
    partitions: &EvalPartitions,
    space: &ActionSpace,
    k: usize,
) -> Result<EvalReport> {
    let mut cells = [[ReportCell::default(); 3]; 3];
    for task in Task::ALL {
        let s = scores.get(task);
        let targets: Vec<usize> = labels
            .iter()
            .map(|l| match task {
                Task::Verb => l.verb,
                Task::Noun => l.noun,
                Task::Action => l.action,
            })
            .collect();
        let all_classes: BTreeSet<usize> = (0..space.n_classes(task)).collect();
        let tail_classes = space.tail_classes(task);
        for part in Partition::ALL {
            let (classes, rows): (&BTreeSet<usize>, &[usize]) = match part {
                Partition::Overall => (&all_classes, &partitions.overall),
                Partition::Unseen => (&all_classes, &partitions.unseen),
                Partition::Tail => (&tail_classes, partitions.tail(task)),
            };
            let per_class = topk_recall_per_class(s, &targets, k, classes, Some(rows))?;
            let value = if per_class.is_empty() {
                None
            } else {
                Some(100.0 * per_class.values().sum::<f64>() / per_class.len() as f64)
            };
            cells[task.index()][part as usize] = ReportCell {
                value,
                n_samples: rows.iter().filter(|&&r| classes.contains(&targets[r])).count(),
                n_classes: per_class.len(),
            };
        }
    }
    Ok(EvalReport { k, cells })
}
