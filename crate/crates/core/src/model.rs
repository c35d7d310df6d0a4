//! The cascaded verb/noun/action model.
//!
//! One block runs a temporal encoder per modality stream, fuses the streams
//! of each branch by channel concatenation and a cross-modality encoder,
//! lets the two branches attend to each other through a symbiotic encoder
//! over their time-concatenated sequences (`2N` rows), and emits verb and
//! noun logits. Block `i + 1` consumes block `i`'s branch features re-split
//! along the original channel layout. After the last block the two branch
//! features are channel-concatenated and passed through one more temporal
//! encoder feeding the action head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{encoder_layer, EncoderLayerParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Flow,
    Obj,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Obj];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Obj => "obj",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Model wiring: the full cascade or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Single modality; no cross-modality or symbiotic attention.
    TsaOnly(Modality),
    /// Cross-modality encoder replaced by the identity.
    NoCma,
    /// Symbiotic encoder replaced by the identity; branches never interact.
    NoSa,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::TsaOnly(Modality::Rgb),
        Variant::TsaOnly(Modality::Flow),
        Variant::TsaOnly(Modality::Obj),
        Variant::NoCma,
        Variant::NoSa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TsaOnly(Modality::Rgb) => "tsa_only_rgb",
            Variant::TsaOnly(Modality::Flow) => "tsa_only_flow",
            Variant::TsaOnly(Modality::Obj) => "tsa_only_obj",
            Variant::NoCma => "no_cma",
            Variant::NoSa => "no_sa",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Variant::Full => 0,
            Variant::TsaOnly(Modality::Rgb) => 1,
            Variant::TsaOnly(Modality::Flow) => 2,
            Variant::TsaOnly(Modality::Obj) => 3,
            Variant::NoCma => 4,
            Variant::NoSa => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Variant::TsaOnly(m) => vec![m],
            _ => Modality::ALL.to_vec(),
        }
    }

    pub fn uses_cma(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSa)
    }

    pub fn uses_sa(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCma)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(String::from(s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_rgb: usize,
    pub d_flow: usize,
    pub d_obj: usize,
    pub n_frames: usize,
    pub n_blocks: usize,
    pub heads: usize,
    /// Feedforward width of every encoder layer is `ff_mult · d_model`.
    pub ff_mult: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub n_actions: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_rgb: 32,
            d_flow: 32,
            d_obj: 32,
            n_frames: 8,
            n_blocks: 2,
            heads: crate::attention::DEFAULT_HEADS,
            ff_mult: 2,
            n_verbs: 12,
            n_nouns: 24,
            n_actions: 48,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Feature widths and vocabulary sizes of the RULSTM EPIC-Kitchens-100
    /// feature release (TSN rgb/flow 1024, object scores 352).
    pub fn epic_preset() -> Self {
        ModelConfig {
            d_rgb: 1024,
            d_flow: 1024,
            d_obj: 352,
            n_verbs: 97,
            n_nouns: 300,
            n_actions: 3806,
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn modality_width(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.d_rgb,
            Modality::Flow => self.d_flow,
            Modality::Obj => self.d_obj,
        }
    }

    /// Widths of the modality streams this variant uses, in rgb/flow/obj order.
    pub fn stream_widths(&self) -> Vec<usize> {
        self.variant
            .modalities()
            .into_iter()
            .map(|m| self.modality_width(m))
            .collect()
    }

    /// Channel width of one branch feature.
    pub fn d_sum(&self) -> usize {
        self.stream_widths().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_rgb", self.d_rgb),
            ("d_flow", self.d_flow),
            ("d_obj", self.d_obj),
            ("n_frames", self.n_frames),
            ("n_blocks", self.n_blocks),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("n_verbs", self.n_verbs),
            ("n_nouns", self.n_nouns),
            ("n_actions", self.n_actions),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        for w in self.stream_widths() {
            if w % 2 != 0 {
                return Err(Error::OddModelWidth(w));
            }
        }
        let mut widths = self.stream_widths();
        widths.push(self.d_sum());
        widths.push(2 * self.d_sum());
        for w in widths {
            if w % self.heads != 0 {
                return Err(Error::HeadSplit {
                    dim: w,
                    heads: self.heads,
                });
            }
        }
        Ok(())
    }
}

/// `x · weight + bias`, applied to a `1 × d_in` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    fn init<S: Real, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Affine {
            weight: store.add_uniform(format!("{prefix}.weight"), &[d_in, d_out], rng),
            bias: store.add_full(format!("{prefix}.bias"), &[d_out], 0.0),
        }
    }

    pub fn apply<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Temporal encoders of one block.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamEncoders {
    /// First block: one encoder per modality, used by both branches.
    Shared(Vec<EncoderLayerParams>),
    /// Later blocks: each branch owns an encoder per channel segment.
    PerBranch {
        verb: Vec<EncoderLayerParams>,
        noun: Vec<EncoderLayerParams>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub tsa: StreamEncoders,
    pub cma_verb: Option<EncoderLayerParams>,
    pub cma_noun: Option<EncoderLayerParams>,
    pub sa: Option<EncoderLayerParams>,
    pub verb_head: Affine,
    pub noun_head: Affine,
}

/// Parameter values plus the wiring that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub blocks: Vec<BlockParams>,
    pub final_tsa: EncoderLayerParams,
    pub action_head: Affine,
}

impl<S: Real> ModelParams<S> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let modalities = config.variant.modalities();
        let d_sum = config.d_sum();
        let h = config.heads;
        let ff = config.ff_mult;
        let enc = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: String, d: usize| {
            EncoderLayerParams::init(store, &name, d, h, ff * d, rng)
        };

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let tsa = if b == 0 {
                let mut encs = Vec::new();
                for &m in &modalities {
                    let d = config.modality_width(m);
                    encs.push(enc(&mut store, &mut rng, format!("block{b}.tsa.{}", m.name()), d)?);
                }
                StreamEncoders::Shared(encs)
            } else {
                let mut verb = Vec::new();
                let mut noun = Vec::new();
                for (branch, list) in [("verb", &mut verb), ("noun", &mut noun)] {
                    for &m in &modalities {
                        let d = config.modality_width(m);
                        let name = format!("block{b}.tsa.{branch}.{}", m.name());
                        list.push(enc(&mut store, &mut rng, name, d)?);
                    }
                }
                StreamEncoders::PerBranch { verb, noun }
            };
            let (cma_verb, cma_noun) = if config.variant.uses_cma() {
                (
                    Some(enc(&mut store, &mut rng, format!("block{b}.cma.verb"), d_sum)?),
                    Some(enc(&mut store, &mut rng, format!("block{b}.cma.noun"), d_sum)?),
                )
            } else {
                (None, None)
            };
            let sa = if config.variant.uses_sa() {
                Some(enc(&mut store, &mut rng, format!("block{b}.sa"), d_sum)?)
            } else {
                None
            };
            let verb_head = Affine::init(&mut store, &format!("block{b}.verb_head"), d_sum, config.n_verbs, &mut rng);
            let noun_head = Affine::init(&mut store, &format!("block{b}.noun_head"), d_sum, config.n_nouns, &mut rng);
            blocks.push(BlockParams {
                tsa,
                cma_verb,
                cma_noun,
                sa,
                verb_head,
                noun_head,
            });
        }
        let final_tsa = enc(&mut store, &mut rng, "final_tsa".into(), 2 * d_sum)?;
        let action_head = Affine::init(&mut store, "action_head", 2 * d_sum, config.n_actions, &mut rng);
        Ok(ModelParams {
            config,
            store,
            blocks,
            final_tsa,
            action_head,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same wiring and values in another precision.
    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config,
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            final_tsa: self.final_tsa.clone(),
            action_head: self.action_head.clone(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, features: [&Tensor<S>; 3]) -> Result<ForwardOutput> {
        model_forward(tape, self, features)
    }
}

/// Builds parameters for a named ablation of `cfg`.
pub fn ablation_variant<S: Real>(cfg: &ModelConfig, which: &str, seed: u64) -> Result<ModelParams<S>> {
    let variant: Variant = which.parse()?;
    ModelParams::init(cfg.with_variant(variant), seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub streams_verb: Vec<Var>,
    pub streams_noun: Vec<Var>,
    pub verb_feat: Var,
    pub noun_feat: Var,
    /// Row count of the symbiotic encoder's input, when the block has one.
    pub sa_input_rows: Option<usize>,
}

/// Logits on the tape, each shaped `1 × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub per_block_verb_logits: Vec<Var>,
    pub per_block_noun_logits: Vec<Var>,
    pub action_logits: Var,
    pub sa_input_rows: Vec<Option<usize>>,
}

impl ForwardOutput {
    pub fn final_verb_logits(&self) -> Var {
        *self.per_block_verb_logits.last().expect("n_blocks >= 1")
    }

    pub fn final_noun_logits(&self) -> Var {
        *self.per_block_noun_logits.last().expect("n_blocks >= 1")
    }
}

fn merge_streams<S: Real>(tape: &mut Tape<S>, streams: &[Var]) -> Result<Var> {
    if streams.len() == 1 {
        Ok(streams[0])
    } else {
        tape.concat(streams, 1)
    }
}

fn apply_optional<S: Real>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    layer: Option<&EncoderLayerParams>,
) -> Result<Var> {
    match layer {
        Some(p) => encoder_layer(tape, store, x, p, false),
        None => Ok(x),
    }
}

/// One cascade block. In the first block both branches normally receive the
/// same raw streams; they are encoded once when the handles coincide.
pub fn block_forward<S: Real>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    block: usize,
    streams_verb: &[Var],
    streams_noun: &[Var],
    first_block: bool,
) -> Result<BlockOutput> {
    let store = &params.store;
    let bp = &params.blocks[block];
    let widths = params.config.stream_widths();
    if streams_verb.len() != widths.len() || streams_noun.len() != widths.len() {
        return Err(Error::Size {
            op: "block_forward",
            detail: format!(
                "expected {} streams per branch, got {} and {}",
                widths.len(),
                streams_verb.len(),
                streams_noun.len()
            ),
        });
    }
    let n = tape.shape(streams_verb[0])[0];

    let encode = |tape: &mut Tape<S>, encs: &[EncoderLayerParams], xs: &[Var]| -> Result<Vec<Var>> {
        xs.iter()
            .zip(encs)
            .map(|(&x, p)| encoder_layer(tape, store, x, p, first_block))
            .collect()
    };
    let (tsa_verb, tsa_noun) = match &bp.tsa {
        StreamEncoders::Shared(encs) => {
            let v = encode(tape, encs, streams_verb)?;
            let nn = if streams_noun == streams_verb {
                v.clone()
            } else {
                encode(tape, encs, streams_noun)?
            };
            (v, nn)
        }
        StreamEncoders::PerBranch { verb, noun } => {
            (encode(tape, verb, streams_verb)?, encode(tape, noun, streams_noun)?)
        }
    };

    let fused_verb = merge_streams(tape, &tsa_verb)?;
    let fused_noun = merge_streams(tape, &tsa_noun)?;
    let cma_verb = apply_optional(tape, store, fused_verb, bp.cma_verb.as_ref())?;
    let cma_noun = apply_optional(tape, store, fused_noun, bp.cma_noun.as_ref())?;

    let (verb_feat, noun_feat, sa_input_rows) = match &bp.sa {
        Some(sa) => {
            let joint = tape.concat(&[cma_verb, cma_noun], 0)?;
            let rows = tape.shape(joint)[0];
            let out = encoder_layer(tape, store, joint, sa, false)?;
            let halves = tape.split(out, &[n, n], 0)?;
            (halves[0], halves[1], Some(rows))
        }
        None => (cma_verb, cma_noun, None),
    };

    let resplit = |tape: &mut Tape<S>, feat: Var| -> Result<Vec<Var>> {
        if widths.len() == 1 {
            Ok(vec![feat])
        } else {
            tape.split(feat, &widths, 1)
        }
    };
    let streams_verb = resplit(tape, verb_feat)?;
    let streams_noun = resplit(tape, noun_feat)?;
    Ok(BlockOutput {
        streams_verb,
        streams_noun,
        verb_feat,
        noun_feat,
        sa_input_rows,
    })
}

/// Mean over time, then an affine head: `N × d` → `1 × classes`.
fn pooled_head<S: Real>(tape: &mut Tape<S>, store: &ParamStore<S>, feat: Var, head: &Affine) -> Result<Var> {
    let pooled = tape.mean_over_axis(feat, 0)?;
    let d = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, d])?;
    head.apply(tape, store, row)
}

/// Full forward pass for one sample; `features` are the rgb, flow and obj
/// sequences, each `N × d_m`. Streams a variant does not use are ignored.
pub fn model_forward<S: Real>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    features: [&Tensor<S>; 3],
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let n = features[0].shape()[0];
    for (m, f) in Modality::ALL.iter().zip(features) {
        let expected = [n, cfg.modality_width(*m)];
        if f.shape() != expected {
            return Err(Error::shape("model_forward", f.shape(), &expected));
        }
    }
    let streams: Vec<Var> = cfg
        .variant
        .modalities()
        .into_iter()
        .map(|m| tape.constant(features[m.index()].clone()))
        .collect();

    let mut out = ForwardOutput {
        per_block_verb_logits: Vec::with_capacity(cfg.n_blocks),
        per_block_noun_logits: Vec::with_capacity(cfg.n_blocks),
        action_logits: streams[0],
        sa_input_rows: Vec::with_capacity(cfg.n_blocks),
    };
    let mut streams_verb = streams.clone();
    let mut streams_noun = streams;
    let mut last = None;
    for b in 0..cfg.n_blocks {
        let bo = block_forward(tape, params, b, &streams_verb, &streams_noun, b == 0)?;
        let bp = &params.blocks[b];
        out.per_block_verb_logits
            .push(pooled_head(tape, &params.store, bo.verb_feat, &bp.verb_head)?);
        out.per_block_noun_logits
            .push(pooled_head(tape, &params.store, bo.noun_feat, &bp.noun_head)?);
        out.sa_input_rows.push(bo.sa_input_rows);
        streams_verb = bo.streams_verb.clone();
        streams_noun = bo.streams_noun.clone();
        last = Some(bo);
    }
    let last = last.expect("n_blocks >= 1");
    let joint = tape.concat(&[last.verb_feat, last.noun_feat], 1)?;
    let fused = encoder_layer(tape, &params.store, joint, &params.final_tsa, false)?;
    out.action_logits = pooled_head(tape, &params.store, fused, &params.action_head)?;
    Ok(out)
}
