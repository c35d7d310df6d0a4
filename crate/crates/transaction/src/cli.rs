//! Subcommand dispatch for the `transaction` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction};
use transaction_core::data::{Split, Vocab};
use transaction_core::gradcheck::{self, CheckResult, TOLERANCE};
use transaction_core::metrics::EvalReport;
use transaction_core::model::{ModelConfig, ModelParams, Variant};

use crate::checkpoint::Checkpoint;
use crate::config::{Command, Resolved, KEYS};
use crate::dataset::Dataset;
use crate::error::{AppError, Result};
use crate::evaluate::{evaluate, Evaluation};
use crate::report::{self, ReportContext};
use crate::synthetic;
use crate::train::{self, Precision, RunDirs, Trainer};

pub const FEATURES_FILE: &str = "features.tact";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";

fn command() -> clap::Command {
    let mut app = clap::Command::new("transaction")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Hierarchical attention for verb, noun and action anticipation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("read `key = value` settings from FILE; flags win"),
        );
        for key in cmd.keys() {
            let help = KEYS.iter().find(|(k, _)| *k == key).map(|(_, h)| *h).unwrap_or("");
            let flag = key.replace('_', "-");
            let mut arg = Arg::new(key)
                .long(flag.clone())
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(help);
            if flag != key {
                arg = arg.alias(key);
            }
            sub = sub.arg(arg);
        }
        app = app.subcommand(sub);
    }
    app
}

/// Flags override the config file, which overrides defaults.
pub fn resolve<I, T>(args: I) -> std::result::Result<Resolved, ParseOutcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(ParseOutcome::Clap)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = Command::ALL.into_iter().find(|c| c.name() == name).expect("registered subcommand");
    let mut r = Resolved::new(cmd);
    if let Some(path) = sub.get_one::<String>("config") {
        r.apply_file(Path::new(path)).map_err(ParseOutcome::App)?;
    }
    for key in cmd.keys() {
        if let Some(v) = sub.get_one::<String>(key) {
            r.set(key, v, &format!("--{}", key.replace('_', "-"))).map_err(ParseOutcome::App)?;
        }
    }
    r.finish().map_err(ParseOutcome::App)
}

pub enum ParseOutcome {
    Clap(clap::Error),
    App(AppError),
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let resolved = match resolve(args) {
        Ok(r) => r,
        Err(ParseOutcome::Clap(e)) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("error: bad arguments");
            eprintln!("{first} (see --help)");
            return 1;
        }
        Err(ParseOutcome::App(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match run(resolved) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(r: Resolved) -> Result<()> {
    match r.command {
        Command::Generate => generate(&r),
        Command::Train => train_cmd(r),
        Command::Evaluate => evaluate_cmd(&r),
        Command::Gradcheck => gradcheck_cmd(&r),
        Command::Ablate => ablate(&r),
    }
}

fn generate(r: &Resolved) -> Result<()> {
    let ds = synthetic::generate(&r.synthetic())?;
    let out = &r.config.out;
    std::fs::create_dir_all(out).map_err(AppError::io(out))?;
    let fp = out.join(FEATURES_FILE);
    let ap = out.join(ANNOTATIONS_FILE);
    ds.write(&fp, &ap)?;
    r.write_echo()?;
    let n = |s: Split| ds.samples.iter().filter(|x| x.split == s).count();
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {} and {}",
        ds.samples.len(),
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        fp.display(),
        ap.display()
    );
    Ok(())
}

fn load_dataset(r: &Resolved, vocab: Vocab) -> Result<Dataset> {
    Dataset::load(&r.config.features, &r.config.annotations, Some(vocab), r.tail_rule())
}

fn check_features(ds: &Dataset, m: &ModelConfig) -> Result<()> {
    let h = &ds.header;
    let want = (m.n_frames, m.d_rgb, m.d_flow, m.d_obj);
    let have = (h.n_frames, h.d_rgb, h.d_flow, h.d_obj);
    if want != have {
        return Err(AppError::Data(format!(
            "feature file has frames/rgb/flow/obj = {have:?}, model expects {want:?}"
        )));
    }
    Ok(())
}

struct TrainSummary {
    final_checkpoint: PathBuf,
    epochs_completed: usize,
    stopped_early: bool,
}

fn train_into<S: transaction_core::Real>(
    model: ModelConfig,
    cfg: train::TrainConfig,
    resume: Option<&Checkpoint>,
    ds: &Dataset,
    dirs: &RunDirs,
) -> Result<TrainSummary> {
    let trainer = match resume {
        Some(ckpt) => Trainer::<S>::resume(ckpt, cfg, &ds.space)?,
        None => Trainer::new(ModelParams::<S>::init(model, cfg.seed)?, cfg, &ds.space)?,
    };
    let out = train::run(trainer, &ds.samples, &ds.space, dirs)?;
    Ok(TrainSummary {
        final_checkpoint: out.final_checkpoint,
        epochs_completed: out.epochs_completed,
        stopped_early: out.stopped_early,
    })
}

fn train_dispatch(
    model: ModelConfig,
    cfg: train::TrainConfig,
    resume: Option<&Checkpoint>,
    ds: &Dataset,
    dirs: &RunDirs,
) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_into::<f32>(model, cfg, resume, ds, dirs),
        Precision::F64 => train_into::<f64>(model, cfg, resume, ds, dirs),
    }
}

fn train_cmd(mut r: Resolved) -> Result<()> {
    let resume = match &r.config.resume {
        Some(p) => Some(Checkpoint::read(p)?),
        None => None,
    };
    if let Some(ckpt) = &resume {
        r.adopt_model(&ckpt.params.config)?;
    }
    let model = r.model();
    let ds = load_dataset(&r, Vocab {
        n_verbs: model.n_verbs,
        n_nouns: model.n_nouns,
        n_actions: model.n_actions,
    })?;
    check_features(&ds, &model)?;
    let dirs = RunDirs::create(&r.config.out)?;
    r.write_echo()?;
    let s = train_dispatch(model, r.train(), resume.as_ref(), &ds, &dirs)?;
    println!(
        "trained {} epochs{}; checkpoint {}, log {}",
        s.epochs_completed,
        if s.stopped_early { " (stopped at the train-accuracy target)" } else { "" },
        s.final_checkpoint.display(),
        dirs.log().display()
    );
    Ok(())
}

fn eval_with(precision: Precision, members: &[ModelParams<f32>], ds: &Dataset, r: &Resolved) -> Result<Evaluation> {
    match precision {
        Precision::F32 => evaluate::<f32>(members, ds, r.config.split, r.config.action_mode),
        Precision::F64 => evaluate::<f64>(members, ds, r.config.split, r.config.action_mode),
    }
}

fn evaluate_cmd(r: &Resolved) -> Result<()> {
    let members: Vec<ModelParams<f32>> = r
        .config
        .checkpoints
        .iter()
        .map(|p| Checkpoint::read(Path::new(p)).map(|c| c.params))
        .collect::<Result<_>>()?;
    crate::ensemble::check_compatible(&members)?;
    let m = &members[0].config;
    let ds = load_dataset(r, Vocab {
        n_verbs: m.n_verbs,
        n_nouns: m.n_nouns,
        n_actions: m.n_actions,
    })?;
    for member in &members {
        check_features(&ds, &member.config)?;
    }
    let ev = eval_with(r.config.precision, &members, &ds, r)?;
    let dirs = RunDirs::create(&r.config.out)?;
    r.write_echo()?;
    let label = if members.len() == 1 {
        "model".to_string()
    } else {
        format!("ensemble of {}", members.len())
    };
    let table = report::render_table(&[(label, &ev.report)]);
    let ctx = ReportContext {
        split: r.config.split.name(),
        mode: r.config.action_mode,
        members: &r.config.checkpoints,
        space: &ds.space,
    };
    report::write_text(&dirs.reports().join("report.txt"), &table)?;
    report::write_text(&dirs.reports().join("report.json"), &report::report_json(&ev.report, &ctx))?;
    print!("{table}");
    Ok(())
}

fn gradcheck_report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|c| c.name.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    writeln!(out, "{:width$}  {:>12}  {:>7}  status", "operation", "max rel err", "probes").unwrap();
    for c in results {
        writeln!(
            out,
            "{:width$}  {:>12.3e}  {:>7}  {}",
            c.name,
            c.max_rel_error,
            c.probes,
            if c.passed() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

fn gradcheck_cmd(r: &Resolved) -> Result<()> {
    let c = &r.config;
    let mut results = gradcheck::run_op_suite(c.seed, c.trials)?;
    let model = ModelConfig {
        d_rgb: c.check_width,
        d_flow: c.check_width,
        d_obj: c.check_width,
        n_frames: c.check_frames,
        n_blocks: 2,
        heads: c.check_heads,
        ff_mult: 2,
        n_verbs: 3,
        n_nouns: 4,
        n_actions: 5,
        variant: Variant::Full,
    };
    model.validate()?;
    results.push(gradcheck::check_model(model, c.seed, c.probes)?);
    let text = gradcheck_report(&results);
    let dirs = RunDirs::create(&c.out)?;
    r.write_echo()?;
    report::write_text(&dirs.reports().join("gradcheck.txt"), &text)?;
    print!("{text}");
    if let Some(bad) = results.iter().find(|c| !c.passed()) {
        return Err(AppError::Numeric(format!(
            "gradient check failed for `{}`: max relative error {:.3e} exceeds {TOLERANCE:e}",
            bad.name, bad.max_rel_error
        )));
    }
    Ok(())
}

fn ablate(r: &Resolved) -> Result<()> {
    let base = r.model();
    let ds = load_dataset(r, Vocab {
        n_verbs: base.n_verbs,
        n_nouns: base.n_nouns,
        n_actions: base.n_actions,
    })?;
    check_features(&ds, &base)?;
    let root = RunDirs::create(&r.config.out)?;
    r.write_echo()?;
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for name in &r.config.variants {
        let (variant, gamma) = match name.as_str() {
            "gamma0" => (Variant::Full, 0.0),
            other => (other.parse::<Variant>()?, r.config.gamma),
        };
        let model = base.with_variant(variant);
        let cfg = train::TrainConfig {
            gamma,
            ..r.train()
        };
        let dirs = RunDirs::create(&root.root.join(name))?;
        let s = train_dispatch(model, cfg, None, &ds, &dirs)?;
        let members = vec![Checkpoint::read(&s.final_checkpoint)?.params];
        let ev = eval_with(r.config.precision, &members, &ds, r)?;
        eprintln!("{name}: trained {} epochs", s.epochs_completed);
        reports.push((name.clone(), ev.report));
    }
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(n, e)| (n.clone(), e)).collect();
    let table = report::render_table(&rows);
    let members: Vec<String> = r
        .config
        .variants
        .iter()
        .map(|v| root.root.join(v).join(train::CHECKPOINT_DIR).join(train::FINAL_CHECKPOINT).display().to_string())
        .collect();
    let ctx = ReportContext {
        split: r.config.split.name(),
        mode: r.config.action_mode,
        members: &members,
        space: &ds.space,
    };
    report::write_text(&root.reports().join("ablation.txt"), &table)?;
    report::write_text(&root.reports().join("ablation.json"), &report::ablation_json(&rows, &ctx))?;
    print!("{table}");
    Ok(())
}
