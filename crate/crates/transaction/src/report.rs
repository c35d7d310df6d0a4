//! Text tables and JSON files for evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use transaction_core::data::{ActionSpace, Task};
use transaction_core::metrics::{ActionMode, EvalReport, Partition};

use crate::error::{AppError, Result};

const LABEL_WIDTH: usize = 14;
const CELL_WIDTH: usize = 7;

fn cell_text(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "-".into(),
    }
}

/// One row per `(label, report)`: three partition groups of verb, noun and action.
/// Absent cells print as `-`.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let k = rows.first().map_or(transaction_core::metrics::TOP_K, |(_, r)| r.k);
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(LABEL_WIDTH);
    let group_w = 3 * CELL_WIDTH + 2;
    let mut out = String::new();
    writeln!(out, "Mean Top-{k} Recall (%)").unwrap();
    write!(out, "{:label_w$}", "").unwrap();
    for part in Partition::ALL {
        let title = match part {
            Partition::Overall => "Overall",
            Partition::Unseen => "Unseen",
            Partition::Tail => "Tail",
        };
        write!(out, " | {title:^group_w$}").unwrap();
    }
    out.push('\n');
    write!(out, "{:label_w$}", "").unwrap();
    for _ in Partition::ALL {
        write!(out, " | ").unwrap();
        let names: Vec<String> = ["Verb", "Noun", "Action"].iter().map(|n| format!("{n:>CELL_WIDTH$}")).collect();
        write!(out, "{}", names.join(" ")).unwrap();
    }
    out.push('\n');
    let width = label_w + 3 * (group_w + 3);
    writeln!(out, "{}", "-".repeat(width)).unwrap();
    for (label, report) in rows {
        write!(out, "{label:<label_w$}").unwrap();
        for part in Partition::ALL {
            write!(out, " | ").unwrap();
            let cells: Vec<String> = Task::ALL
                .iter()
                .map(|&t| format!("{:>CELL_WIDTH$}", cell_text(report.cell(t, part).value)))
                .collect();
            write!(out, "{}", cells.join(" ")).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct Restrictions {
    overall: &'static str,
    unseen: &'static str,
    tail: &'static str,
}

const RESTRICTIONS: Restrictions = Restrictions {
    overall: "all evaluation samples, macro average over every class with at least one sample",
    unseen: "samples restricted to participants absent from the train split; all classes",
    tail: "classes restricted to the tail set (fewer train instances than the per-task threshold); all samples of those classes",
};

#[derive(Serialize)]
struct TaskCounts {
    verb: u64,
    noun: u64,
    action: u64,
}

#[derive(Serialize)]
struct Header<'a> {
    metric: String,
    unit: &'static str,
    k: usize,
    split: &'a str,
    action_mode: &'static str,
    members: &'a [String],
    restrictions: Restrictions,
    tail_thresholds: TaskCounts,
    unseen_participants: Vec<&'a str>,
    absent_cells: &'static str,
}

#[derive(Serialize)]
struct Cell {
    task: &'static str,
    partition: &'static str,
    value: Option<f64>,
    n_samples: usize,
    n_classes: usize,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    header: Header<'a>,
    cells: Vec<Cell>,
}

fn cells(report: &EvalReport) -> Vec<Cell> {
    let mut out = Vec::with_capacity(9);
    for task in Task::ALL {
        for part in Partition::ALL {
            let c = report.cell(task, part);
            out.push(Cell {
                task: task.name(),
                partition: part.name(),
                value: c.value,
                n_samples: c.n_samples,
                n_classes: c.n_classes,
            });
        }
    }
    out
}

pub struct ReportContext<'a> {
    pub split: &'a str,
    pub mode: ActionMode,
    pub members: &'a [String],
    pub space: &'a ActionSpace,
}

fn header<'a>(k: usize, ctx: &ReportContext<'a>) -> Header<'a> {
    let t = ctx.space.tail_thresholds;
    Header {
        metric: format!("mean top-{k} recall"),
        unit: "percent",
        k,
        split: ctx.split,
        action_mode: ctx.mode.name(),
        members: ctx.members,
        restrictions: RESTRICTIONS,
        tail_thresholds: TaskCounts {
            verb: t[0],
            noun: t[1],
            action: t[2],
        },
        unseen_participants: ctx.space.unseen_participants.iter().map(String::as_str).collect(),
        absent_cells: "null value: no class of the cell has an evaluation sample",
    }
}

pub fn report_json(report: &EvalReport, ctx: &ReportContext<'_>) -> String {
    let file = ReportFile {
        header: header(report.k, ctx),
        cells: cells(report),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct AblationRow<'a> {
    name: &'a str,
    cells: Vec<Cell>,
}

#[derive(Serialize)]
struct AblationFile<'a> {
    header: Header<'a>,
    rows: Vec<AblationRow<'a>>,
}

pub fn ablation_json(rows: &[(String, &EvalReport)], ctx: &ReportContext<'_>) -> String {
    let k = rows.first().map_or(transaction_core::metrics::TOP_K, |(_, r)| r.k);
    let file = AblationFile {
        header: header(k, ctx),
        rows: rows
            .iter()
            .map(|(name, r)| AblationRow { name, cells: cells(r) })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(AppError::io(path))
}
