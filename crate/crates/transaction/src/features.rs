//! The TACT feature file.
//!
//! ```text
//! "TACT"  u16 version  u32 n_samples  u32 n_frames  u32 d_rgb  u32 d_flow  u32 d_obj
//! per sample: u16 id length, UTF-8 id, rgb, flow, obj (row-major f32 LE)
//! ```

use std::fs;
use std::path::Path;

use transaction_core::Tensor;

use crate::bytes::{self, Reader};
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"TACT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub n_samples: usize,
    pub n_frames: usize,
    pub d_rgb: usize,
    pub d_flow: usize,
    pub d_obj: usize,
}

impl FeatureHeader {
    pub fn widths(&self) -> [usize; 3] {
        [self.d_rgb, self.d_flow, self.d_obj]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub rgb: Tensor<f32>,
    pub flow: Tensor<f32>,
    pub obj: Tensor<f32>,
}

pub fn encode(header: &FeatureHeader, records: &[FeatureRecord]) -> Result<Vec<u8>> {
    if records.len() != header.n_samples {
        return Err(AppError::Data(format!(
            "header declares {} samples, {} given",
            header.n_samples,
            records.len()
        )));
    }
    let per_sample = header.n_frames * header.widths().iter().sum::<usize>() * 4;
    let mut out = Vec::with_capacity(22 + records.len() * (per_sample + 16));
    out.extend_from_slice(MAGIC);
    bytes::put_u16(&mut out, VERSION);
    for (field, v) in [
        ("n_samples", header.n_samples),
        ("n_frames", header.n_frames),
        ("d_rgb", header.d_rgb),
        ("d_flow", header.d_flow),
        ("d_obj", header.d_obj),
    ] {
        bytes::put_u32(&mut out, bytes::u32_field(v, field)?);
    }
    for r in records {
        bytes::put_string_u16(&mut out, &r.sample_id, "sample id")?;
        for (name, t, d) in [("rgb", &r.rgb, header.d_rgb), ("flow", &r.flow, header.d_flow), ("obj", &r.obj, header.d_obj)] {
            if t.shape() != [header.n_frames, d] {
                return Err(AppError::Data(format!(
                    "sample {}: {name} has shape {:?}, header expects [{}, {d}]",
                    r.sample_id,
                    t.shape(),
                    header.n_frames
                )));
            }
            bytes::put_f32s(&mut out, t.data());
        }
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<(FeatureHeader, Vec<FeatureRecord>)> {
    let mut r = Reader::new(buf, "feature file");
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(AppError::Data(format!(
            "feature file at byte 0: bad magic {magic:?}, expected \"TACT\""
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut dims = [0usize; 5];
    for (d, field) in dims.iter_mut().zip(["n_samples", "n_frames", "d_rgb", "d_flow", "d_obj"]) {
        *d = r.u32(field)? as usize;
    }
    let header = FeatureHeader {
        n_samples: dims[0],
        n_frames: dims[1],
        d_rgb: dims[2],
        d_flow: dims[3],
        d_obj: dims[4],
    };
    if dims[1..].contains(&0) {
        return Err(AppError::Data(format!("feature file header has a zero extent: {header:?}")));
    }
    let mut records = Vec::with_capacity(header.n_samples.min(1 << 20));
    for i in 0..header.n_samples {
        let sample_id = r.string_u16(&format!("sample {i} id"))?;
        let mut seqs = Vec::with_capacity(3);
        for (name, d) in ["rgb", "flow", "obj"].into_iter().zip(header.widths()) {
            let data = r.f32s(header.n_frames * d, &format!("sample {i} ({sample_id}) {name} payload"))?;
            seqs.push(Tensor::from_vec(&[header.n_frames, d], data)?);
        }
        let obj = seqs.pop().unwrap();
        let flow = seqs.pop().unwrap();
        let rgb = seqs.pop().unwrap();
        records.push(FeatureRecord {
            sample_id,
            rgb,
            flow,
            obj,
        });
    }
    r.finish()?;
    Ok((header, records))
}

pub fn write(path: &Path, header: &FeatureHeader, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode(header, records)?;
    fs::write(path, bytes).map_err(AppError::io(path))
}

pub fn read(path: &Path) -> Result<(FeatureHeader, Vec<FeatureRecord>)> {
    let buf = fs::read(path).map_err(AppError::io(path))?;
    decode(&buf).map_err(|e| match e {
        AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
