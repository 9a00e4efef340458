//! Checkpoint files.
//!
//! ```text
//! DFCKPT1\n
//! <header byte length>\n
//! <JSON header: run metadata and a tensor manifest>
//! <raw little-endian f32 data>
//! ```
//!
//! Each manifest entry names a tensor, its shape and its byte offset into the
//! data section, so any language can read the file without this crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::encoding::FourierBasis;
use crate::error::{Error, Result};
use crate::field::{FieldArch, FieldParams, OriginTracker};

pub const MAGIC: &[u8] = b"DFCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: FieldParams<f32>,
    pub basis: FourierBasis,
    pub origin: OriginTracker,
    pub adam: AdamState<f32>,
    /// Number of completed iterations.
    pub iteration: u64,
    pub caption: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub iteration: u64,
    pub adam_step: u64,
    pub seed: u64,
    pub caption: String,
    pub arch: FieldArch,
    pub encoding_levels: f64,
    pub tensors: Vec<TensorEntry>,
}

fn entries(state: &TrainState) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (prefix, p) in [("field", &state.params), ("adam_m", &state.adam.m), ("adam_v", &state.adam.v)] {
        for t in &p.tensors {
            out.push((format!("{prefix}/{}", t.name), t.shape.clone(), t.data.clone()));
        }
    }
    out.push(("basis/frequencies".into(), vec![state.basis.count(), 3], state.basis.to_f32()));
    out.push(("origin/center".into(), vec![3], state.origin.origin.to_vec()));
    out.push(("origin/decay".into(), vec![1], vec![state.origin.decay]));
    out
}

/// Writes `state` atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (name, shape, values) in entries(state) {
        tensors.push(TensorEntry { name, shape, dtype: "f32".into(), offset: data.len() as u64 });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        iteration: state.iteration,
        adam_step: state.adam.step,
        seed: state.seed,
        caption: state.caption.clone(),
        arch: state.params.arch,
        encoding_levels: state.basis.levels,
        tensors,
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        writeln!(f, "{}", json.len())?;
        f.write_all(&json)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(path: &Path, why: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: not a version {FORMAT_VERSION} checkpoint ({why})", path.display()))
}

/// Reads the header without the tensor data.
pub fn read_header(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(MAGIC) {
        return Err(corrupt(path, "bad magic"));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt(path, "missing header length"))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| corrupt(path, "bad header length"))?;
    let start = nl + 1;
    if rest.len() < start + len {
        return Err(corrupt(path, "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[start..start + len]).map_err(|e| corrupt(path, e))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(path, format!("version {}", header.version)));
    }
    Ok((header, rest[start + len..].to_vec()))
}

fn tensor<'a>(path: &Path, header: &'a CheckpointHeader, data: &[u8], name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let entry: &'a TensorEntry =
        header.tensors.iter().find(|t| t.name == name).ok_or_else(|| corrupt(path, format!("missing tensor {name}")))?;
    if entry.shape != shape {
        return Err(Error::Shape(format!(
            "{}: tensor {name} has shape {:?}, expected {:?}",
            path.display(),
            entry.shape,
            shape
        )));
    }
    if entry.dtype != "f32" {
        return Err(corrupt(path, format!("tensor {name} has dtype {}", entry.dtype)));
    }
    let count: usize = shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 4 * count;
    if end > data.len() {
        return Err(corrupt(path, format!("tensor {name} runs past the end of the file")));
    }
    Ok(data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn fill(path: &Path, header: &CheckpointHeader, data: &[u8], prefix: &str, arch: FieldArch) -> Result<FieldParams<f32>> {
    let mut p = FieldParams::<f32>::zeros(arch);
    for t in &mut p.tensors {
        t.data = tensor(path, header, data, &format!("{prefix}/{}", t.name), &t.shape)?;
    }
    Ok(p)
}

/// Loads a checkpoint whose field must match `expected` when given.
pub fn load_checkpoint(path: &Path, expected: Option<FieldArch>) -> Result<TrainState> {
    let (header, data) = read_header(path)?;
    if let Some(arch) = expected {
        if arch != header.arch {
            return Err(Error::Shape(format!(
                "{}: checkpoint field is {:?} but the run expects {:?}",
                path.display(),
                header.arch,
                arch
            )));
        }
    }
    let arch = header.arch;
    let params = fill(path, &header, &data, "field", arch)?;
    let m = fill(path, &header, &data, "adam_m", arch)?;
    let v = fill(path, &header, &data, "adam_v", arch)?;
    let features = arch.input_dim / 2;
    let freqs = tensor(path, &header, &data, "basis/frequencies", &[features, 3])?;
    let basis = FourierBasis::from_f32(header.encoding_levels, &freqs)?;
    let center = tensor(path, &header, &data, "origin/center", &[3])?;
    let decay = tensor(path, &header, &data, "origin/decay", &[1])?;
    Ok(TrainState {
        params,
        basis,
        origin: OriginTracker { origin: [center[0], center[1], center[2]], decay: decay[0] },
        adam: AdamState { m, v, step: header.adam_step },
        iteration: header.iteration,
        caption: header.caption,
        seed: header.seed,
    })
}
