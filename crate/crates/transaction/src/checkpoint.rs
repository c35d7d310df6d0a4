//! The TACK checkpoint container.
//!
//! ```text
//! "TACK"  u16 version
//! u32 × 12: d_rgb d_flow d_obj n_frames n_blocks heads ff_mult n_verbs n_nouns n_actions variant epochs_completed
//! u32 tensor count, then per tensor:
//!     u16 name length, UTF-8 name, u32 rank, u32 × rank dims, f32 LE data
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Optimizer velocity buffers, when saved, are stored as extra tensors named
//! `velocity/<parameter>`.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use transaction_core::model::{ModelConfig, ModelParams, Variant};

use crate::bytes::{self, Reader};
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"TACK";
pub const VERSION: u16 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub epochs_completed: usize,
    /// One buffer per parameter, in store order.
    pub velocity: Option<Vec<Vec<f32>>>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn config_fields(cfg: &ModelConfig, epochs: usize) -> [(&'static str, usize); 12] {
    [
        ("d_rgb", cfg.d_rgb),
        ("d_flow", cfg.d_flow),
        ("d_obj", cfg.d_obj),
        ("n_frames", cfg.n_frames),
        ("n_blocks", cfg.n_blocks),
        ("heads", cfg.heads),
        ("ff_mult", cfg.ff_mult),
        ("n_verbs", cfg.n_verbs),
        ("n_nouns", cfg.n_nouns),
        ("n_actions", cfg.n_actions),
        ("variant", cfg.variant.code() as usize),
        ("epochs_completed", epochs),
    ]
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    bytes::put_string_u16(out, name, "tensor name")?;
    bytes::put_u32(out, bytes::u32_field(shape.len(), "rank")?);
    for &d in shape {
        bytes::put_u32(out, bytes::u32_field(d, "dimension")?);
    }
    bytes::put_f32s(out, data);
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let store = &self.params.store;
        let mut out = Vec::with_capacity(64 + store.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        bytes::put_u16(&mut out, VERSION);
        for (field, v) in config_fields(&self.params.config, self.epochs_completed) {
            bytes::put_u32(&mut out, bytes::u32_field(v, field)?);
        }
        let n_tensors = store.len() * if self.velocity.is_some() { 2 } else { 1 };
        bytes::put_u32(&mut out, bytes::u32_field(n_tensors, "tensor count")?);
        for p in store.iter() {
            put_tensor(&mut out, &p.name, p.tensor.shape(), p.tensor.data())?;
        }
        if let Some(vel) = &self.velocity {
            if vel.len() != store.len() {
                return Err(AppError::Data(format!(
                    "{} velocity buffers for {} parameters",
                    vel.len(),
                    store.len()
                )));
            }
            for (p, v) in store.iter().zip(vel) {
                put_tensor(&mut out, &format!("{VELOCITY_PREFIX}{}", p.name), p.tensor.shape(), v)?;
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 {
            return Err(AppError::Data(format!(
                "checkpoint truncated: {} bytes is shorter than the checksum",
                buf.len()
            )));
        }
        let (payload, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let actual = checksum(payload);
        if stored != actual {
            return Err(AppError::Data(format!(
                "checkpoint checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let mut r = Reader::new(payload, "checkpoint");
        if r.take(4, "magic")? != MAGIC {
            return Err(AppError::Data("checkpoint at byte 0: bad magic, expected \"TACK\"".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut f = [0usize; 12];
        for (slot, (field, _)) in f.iter_mut().zip(config_fields(&ModelConfig::default(), 0)) {
            *slot = r.u32(field)? as usize;
        }
        let variant = Variant::from_code(f[10] as u32).ok_or_else(|| r.error(format!("unknown variant code {}", f[10])))?;
        let config = ModelConfig {
            d_rgb: f[0],
            d_flow: f[1],
            d_obj: f[2],
            n_frames: f[3],
            n_blocks: f[4],
            heads: f[5],
            ff_mult: f[6],
            n_verbs: f[7],
            n_nouns: f[8],
            n_actions: f[9],
            variant,
        };
        let epochs_completed = f[11];
        let mut params = ModelParams::<f32>::init(config, 0).map_err(|e| AppError::Data(format!("checkpoint config: {e}")))?;
        let n_tensors = r.u32("tensor count")? as usize;
        let mut seen = vec![false; params.store.len()];
        let mut velocity: Vec<Option<Vec<f32>>> = vec![None; params.store.len()];
        for _ in 0..n_tensors {
            let at = r.offset();
            let name = r.string_u16("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(AppError::Data(format!("checkpoint at byte {at}: tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel, &format!("tensor `{name}` data"))?;
            let (target, is_velocity) = match name.strip_prefix(VELOCITY_PREFIX) {
                Some(rest) => (rest, true),
                None => (name.as_str(), false),
            };
            let id = params
                .store
                .find(target)
                .ok_or_else(|| AppError::Data(format!("checkpoint at byte {at}: unknown tensor `{name}`")))?;
            if params.store.get(id).shape() != shape.as_slice() {
                return Err(AppError::Data(format!(
                    "checkpoint at byte {at}: tensor `{name}` has shape {shape:?}, model expects {:?}",
                    params.store.get(id).shape()
                )));
            }
            let i = id.index();
            if is_velocity {
                if velocity[i].replace(data).is_some() {
                    return Err(AppError::Data(format!("checkpoint: tensor `{name}` appears twice")));
                }
            } else {
                if seen[i] {
                    return Err(AppError::Data(format!("checkpoint: tensor `{name}` appears twice")));
                }
                seen[i] = true;
                params.store.get_mut(id).data_mut().copy_from_slice(&data);
            }
        }
        r.finish()?;
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(AppError::Data(format!(
                "checkpoint is missing tensor `{}`",
                params.store.iter().nth(i).unwrap().name
            )));
        }
        let velocity = if velocity.iter().all(Option::is_none) {
            None
        } else if velocity.iter().all(Option::is_some) {
            Some(velocity.into_iter().map(Option::unwrap).collect())
        } else {
            return Err(AppError::Data("checkpoint has velocity for only some parameters".into()));
        };
        Ok(Checkpoint {
            params,
            epochs_completed,
            velocity,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(AppError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(AppError::io(path))?;
        Self::decode(&buf).map_err(|e| match e {
            AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
