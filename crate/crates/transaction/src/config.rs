//! Flat run configuration: `key = value` files with flag overrides.
//!
//! Every key has a default. A run echoes the keys its subcommand reads to
//! `effective.cfg` in the output directory, and that file can be passed back
//! with `--config` to repeat the run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use transaction_core::data::{Split, TailRule};
use transaction_core::metrics::ActionMode;
use transaction_core::model::{ModelConfig, Variant};

use crate::error::{AppError, Result};
use crate::synthetic::SyntheticConfig;
use crate::train::{Precision, TrainConfig};

pub const ECHO_FILE: &str = "effective.cfg";

/// A value that round-trips through its config-file text.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, String, Variant, Precision);

impl ConfigValue for ActionMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("unknown action mode `{s}`, expected head or product"))
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for Split {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("unknown split `{s}`, expected train, val or test"))
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// `none` stands for an absent value.
impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        match self {
            Some(v) => v.render(),
            None => "none".into(),
        }
    }
}

/// Comma-separated, no empty items.
impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let items: Vec<String> = s.split(',').map(|x| x.trim().to_string()).collect();
        if items.iter().any(String::is_empty) {
            return Err("empty item in comma-separated list".into());
        }
        Ok(items)
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr ; $help:literal )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $help] pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)* }
            }
        }

        /// Every key with its help text, in echo order.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($field), $help),)*];

        impl RunConfig {
            fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($field) => self.$field = <$ty as ConfigValue>::parse_value(value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    seed: u64 = 0; "seed for data generation, initialisation, shuffling and loss gates"
    out: PathBuf = PathBuf::new(); "output directory (default: data for generate, runs/<subcommand> otherwise)"
    features: PathBuf = PathBuf::from("data/features.tact"); "feature file"
    annotations: PathBuf = PathBuf::from("data/annotations.csv"); "annotation CSV"
    n_samples: usize = 512; "number of synthetic samples"
    zipf_exponent: f64 = 1.0; "Zipf exponent of the synthetic action frequencies"
    n_participants: usize = 8; "number of synthetic participants"
    unseen_fraction: f64 = 0.25; "share of participants held out of the train split"
    val_fraction: f64 = 0.2; "probability that a synthetic sample lands in val"
    test_fraction: f64 = 0.1; "probability that a synthetic sample lands in test"
    noise: f64 = 1.0; "standard deviation of synthetic feature noise"
    class_scale: f64 = 0.5; "scale of the per-class prototypes present in every frame"
    signal: f64 = 1.5; "scale of the one-frame class signature"
    d_rgb: usize = 32; "rgb feature width"
    d_flow: usize = 32; "flow feature width"
    d_obj: usize = 32; "object feature width"
    n_frames: usize = 8; "frames per sample"
    n_verbs: usize = 12; "verb classes"
    n_nouns: usize = 24; "noun classes"
    n_actions: usize = 48; "action classes"
    tail_threshold: Option<u64> = None; "classes with fewer train instances are tail (none: bottom-quartile boundary)"
    n_blocks: usize = 2; "cascaded blocks"
    heads: usize = 4; "attention heads"
    ff_mult: usize = 2; "feed-forward width as a multiple of the layer width"
    variant: Variant = Variant::Full; "model variant: full, tsa_only_rgb, tsa_only_flow, tsa_only_obj, no_cma, no_sa"
    batch_size: usize = 16; "samples per optimizer step"
    epochs: usize = 50; "total epochs, counting any resumed ones"
    learning_rate: f64 = transaction_core::optim::DEFAULT_LEARNING_RATE; "SGD learning rate"
    momentum: f64 = transaction_core::optim::DEFAULT_MOMENTUM; "SGD momentum"
    gamma: f64 = 0.9; "probability of gating a rare class out of the loss (0: cross-entropy)"
    lambda: Option<f64> = None; "rare-class relative-frequency threshold (none: bottom-quartile boundary)"
    checkpoint_every: usize = 0; "also checkpoint every this many epochs (0: final only)"
    eval_every: usize = 1; "log train and val metrics every this many epochs (0: never)"
    stop_at_train_accuracy: Option<f64> = None; "stop when train top-1 on verb and noun reaches this percentage"
    precision: Precision = Precision::F32; "arithmetic precision: f32 or f64"
    resume: Option<PathBuf> = None; "checkpoint to continue training from"
    checkpoints: Vec<String> = vec!["runs/train/checkpoints/final.tack".into()]; "comma-separated checkpoints to ensemble"
    split: Split = Split::Val; "split to evaluate"
    action_mode: ActionMode = ActionMode::Head; "action scores: head or product of verb and noun probabilities"
    variants: Vec<String> = ABLATIONS.iter().map(|s| s.to_string()).collect(); "ablation rows: model variants plus gamma0"
    trials: usize = 3; "random trials per operation"
    probes: usize = 100; "parameter probes for the end-to-end model check"
    check_width: usize = 8; "feature width of each modality in the model check"
    check_frames: usize = 4; "frames in the model check"
    check_heads: usize = 2; "attention heads in the model check"
}

pub const ABLATIONS: [&str; 7] = ["full", "tsa_only_rgb", "tsa_only_flow", "tsa_only_obj", "no_cma", "no_sa", "gamma0"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Evaluate,
    Gradcheck,
    Ablate,
}

const DATA: &[&str] = &["features", "annotations", "n_verbs", "n_nouns", "n_actions", "tail_threshold"];
const MODEL: &[&str] = &["d_rgb", "d_flow", "d_obj", "n_frames", "n_blocks", "heads", "ff_mult"];
const TRAIN: &[&str] = &[
    "batch_size",
    "epochs",
    "learning_rate",
    "momentum",
    "gamma",
    "lambda",
    "checkpoint_every",
    "eval_every",
    "stop_at_train_accuracy",
    "precision",
];

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Generate,
        Command::Train,
        Command::Evaluate,
        Command::Gradcheck,
        Command::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::Generate => "Write a seeded synthetic dataset",
            Command::Train => "Train a model and write checkpoints, logs and frequency tables",
            Command::Evaluate => "Ensemble checkpoints and report mean top-k recall",
            Command::Gradcheck => "Compare tape gradients with finite differences at 64-bit",
            Command::Ablate => "Train and evaluate every ablation variant",
        }
    }

    /// Keys the subcommand reads, in echo order.
    pub fn keys(self) -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = match self {
            Command::Generate => vec![
                "seed",
                "out",
                "n_samples",
                "zipf_exponent",
                "n_participants",
                "unseen_fraction",
                "val_fraction",
                "test_fraction",
                "noise",
                "class_scale",
                "signal",
                "d_rgb",
                "d_flow",
                "d_obj",
                "n_frames",
                "n_verbs",
                "n_nouns",
                "n_actions",
            ],
            Command::Train => {
                let mut k = vec!["seed", "out"];
                k.extend(DATA);
                k.extend(MODEL);
                k.push("variant");
                k.extend(TRAIN);
                k.push("resume");
                k
            }
            Command::Evaluate => vec![
                "out",
                "features",
                "annotations",
                "tail_threshold",
                "checkpoints",
                "split",
                "action_mode",
                "precision",
            ],
            Command::Gradcheck => vec!["seed", "out", "trials", "probes", "check_width", "check_frames", "check_heads"],
            Command::Ablate => {
                let mut k = vec!["seed", "out"];
                k.extend(DATA);
                k.extend(MODEL);
                k.extend(TRAIN);
                k.extend(["variants", "split", "action_mode"]);
                k
            }
        };
        // Table order keeps echoes stable regardless of how the lists are written.
        keys.sort_by_key(|k| KEYS.iter().position(|(name, _)| name == k));
        keys
    }

    fn default_out(self) -> PathBuf {
        match self {
            Command::Generate => PathBuf::from("data"),
            other => Path::new("runs").join(other.name()),
        }
    }
}

/// A configuration plus the keys the user set explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub command: Command,
    pub config: RunConfig,
    pub explicit: BTreeSet<&'static str>,
}

pub fn canonical_key(key: &str) -> Option<&'static str> {
    let k = key.trim().replace('-', "_");
    KEYS.iter().map(|(name, _)| *name).find(|name| *name == k)
}

impl Resolved {
    pub fn new(command: Command) -> Self {
        Resolved {
            command,
            config: RunConfig::default(),
            explicit: BTreeSet::new(),
        }
    }

    /// Sets one key. `origin` prefixes error messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let name = canonical_key(key).ok_or_else(|| AppError::Usage(format!("{origin}: unknown key `{key}`")))?;
        if !self.command.keys().contains(&name) {
            return Err(AppError::Usage(format!(
                "{origin}: key `{name}` does not apply to `{}`",
                self.command.name()
            )));
        }
        self.config
            .set_raw(name, value.trim())
            .map_err(|m| AppError::Usage(format!("{origin}: {name} = {value}: {m}")))?;
        self.explicit.insert(name);
        Ok(())
    }

    pub fn apply_file_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let origin = format!("{source} line {}", n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Usage(format!("{origin}: expected `key = value`, found `{line}`")))?;
            self.set(k, v, &origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(AppError::io(path))?;
        self.apply_file_text(&text, &path.display().to_string())
    }

    /// Fills subcommand-dependent defaults and rejects contradictory settings.
    pub fn finish(mut self) -> Result<Self> {
        if self.config.out.as_os_str().is_empty() {
            self.config.out = self.command.default_out();
        }
        let c = &self.config;
        let keys = self.command.keys();
        if keys.contains(&"stop_at_train_accuracy") && c.stop_at_train_accuracy.is_some() && c.eval_every == 0 {
            return Err(AppError::Usage(
                "config contradiction: stop_at_train_accuracy needs eval_every >= 1".into(),
            ));
        }
        if self.command == Command::Ablate {
            for v in &c.variants {
                if !ABLATIONS.contains(&v.as_str()) {
                    return Err(AppError::Usage(format!(
                        "unknown ablation `{v}`, expected one of {}",
                        ABLATIONS.join(", ")
                    )));
                }
            }
        }
        if self.command == Command::Generate {
            self.synthetic().validate()?;
        }
        if matches!(self.command, Command::Train | Command::Ablate) {
            self.model().validate()?;
            self.train().validate()?;
        }
        Ok(self)
    }

    /// `key = value` for every key the subcommand reads.
    pub fn echo(&self) -> String {
        let mut out = format!("# transaction {}\n", self.command.name());
        for key in self.command.keys() {
            writeln!(out, "{key} = {}", self.config.get(key).expect("known key")).unwrap();
        }
        out
    }

    pub fn write_echo(&self) -> Result<PathBuf> {
        let dir = &self.config.out;
        std::fs::create_dir_all(dir).map_err(AppError::io(dir))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.echo()).map_err(AppError::io(&path))?;
        Ok(path)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let c = &self.config;
        SyntheticConfig {
            seed: c.seed,
            n_samples: c.n_samples,
            n_frames: c.n_frames,
            d_rgb: c.d_rgb,
            d_flow: c.d_flow,
            d_obj: c.d_obj,
            n_verbs: c.n_verbs,
            n_nouns: c.n_nouns,
            n_actions: c.n_actions,
            zipf_exponent: c.zipf_exponent,
            n_participants: c.n_participants,
            unseen_fraction: c.unseen_fraction,
            val_fraction: c.val_fraction,
            test_fraction: c.test_fraction,
            noise: c.noise,
            class_scale: c.class_scale,
            signal: c.signal,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let c = &self.config;
        ModelConfig {
            d_rgb: c.d_rgb,
            d_flow: c.d_flow,
            d_obj: c.d_obj,
            n_frames: c.n_frames,
            n_blocks: c.n_blocks,
            heads: c.heads,
            ff_mult: c.ff_mult,
            n_verbs: c.n_verbs,
            n_nouns: c.n_nouns,
            n_actions: c.n_actions,
            variant: c.variant,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let c = &self.config;
        TrainConfig {
            batch_size: c.batch_size,
            epochs: c.epochs,
            seed: c.seed,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            gamma: c.gamma,
            lambda: c.lambda,
            checkpoint_every: c.checkpoint_every,
            eval_every: c.eval_every,
            stop_at_train_accuracy: c.stop_at_train_accuracy,
            precision: c.precision,
        }
    }

    pub fn tail_rule(&self) -> TailRule {
        match self.config.tail_threshold {
            Some(n) => TailRule::Below(n),
            None => TailRule::BottomQuartile,
        }
    }

    /// Adopts a checkpoint's model settings, rejecting explicit settings that disagree.
    pub fn adopt_model(&mut self, m: &ModelConfig) -> Result<()> {
        let pairs: [(&'static str, String); 11] = [
            ("d_rgb", m.d_rgb.to_string()),
            ("d_flow", m.d_flow.to_string()),
            ("d_obj", m.d_obj.to_string()),
            ("n_frames", m.n_frames.to_string()),
            ("n_blocks", m.n_blocks.to_string()),
            ("heads", m.heads.to_string()),
            ("ff_mult", m.ff_mult.to_string()),
            ("n_verbs", m.n_verbs.to_string()),
            ("n_nouns", m.n_nouns.to_string()),
            ("n_actions", m.n_actions.to_string()),
            ("variant", m.variant.to_string()),
        ];
        for (key, value) in pairs {
            let current = self.config.get(key).expect("known key");
            if self.explicit.contains(key) && current != value {
                return Err(AppError::Usage(format!(
                    "config contradiction: {key} = {current} but the resumed checkpoint has {key} = {value}"
                )));
            }
            self.config.set_raw(key, &value).expect("checkpoint values parse");
        }
        Ok(())
    }
}
