//! Binary checkpoints for classifiers and surrogates.
//!
//! Layout (little endian throughout):
//!   magic "GTCKPT01"
//!   arch string (u32 len + utf8)
//!   u32 meta count, then per entry: name string, i64 value
//!   u32 tensor count, then per tensor: name string, u32 ndim, u32 dims...,
//!     f64 payload
//!   sha256 digest of everything above (32 bytes)
//!
//! Values are stored as raw f64 bits, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::binio::{read_exact_buf, read_string, read_u32, write_string, write_u32};
use crate::error::{GtaError, Result};
use crate::models::{build_classifier, build_surrogate_with, Classifier, SurrogateModel};

const MAGIC: &[u8; 8] = b"GTCKPT01";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: Vec<(String, i64)>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn meta_value(&self, name: &str) -> Result<i64> {
        self.meta
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| GtaError::Corrupt(format!("checkpoint missing meta entry '{name}'")))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_string(&mut buf, &ck.arch);
    write_u32(&mut buf, ck.meta.len() as u32);
    for (name, v) in &ck.meta {
        write_string(&mut buf, name);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_u32(&mut buf, ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        write_string(&mut buf, name);
        write_u32(&mut buf, t.ndim() as u32);
        for &d in t.shape() {
            write_u32(&mut buf, d as u32);
        }
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&buf)?;
    f.write_all(&digest)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 32 {
        return Err(GtaError::Corrupt("checkpoint file is truncated".into()));
    }
    let (body, stored) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(GtaError::Corrupt("checkpoint checksum mismatch".into()));
    }
    let mut cur = body;
    let mut magic = [0u8; 8];
    read_exact_buf(&mut cur, &mut magic)?;
    if &magic != MAGIC {
        return Err(GtaError::UnknownFormat("not a checkpoint file".into()));
    }
    let arch = read_string(&mut cur)?;
    let n_meta = read_u32(&mut cur)? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let name = read_string(&mut cur)?;
        let mut b = [0u8; 8];
        read_exact_buf(&mut cur, &mut b)?;
        meta.push((name, i64::from_le_bytes(b)));
    }
    let n_tensors = read_u32(&mut cur)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = read_string(&mut cur)?;
        let ndim = read_u32(&mut cur)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut cur)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 8];
            read_exact_buf(&mut cur, &mut b)?;
            vals.push(f64::from_le_bytes(b));
        }
        let t = ArrayD::from_shape_vec(IxDyn(&dims), vals)
            .map_err(|e| GtaError::Corrupt(format!("bad tensor shape in checkpoint: {e}")))?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { arch, meta, tensors })
}

fn restore_params(net_params: &mut Vec<(String, ArrayD<f64>)>, ck: &Checkpoint) -> Result<()> {
    if net_params.len() != ck.tensors.len() {
        return Err(GtaError::Corrupt(format!(
            "checkpoint has {} tensors, architecture expects {}",
            ck.tensors.len(),
            net_params.len()
        )));
    }
    for (slot, (name, t)) in net_params.iter_mut().zip(&ck.tensors) {
        if &slot.0 != name || slot.1.shape() != t.shape() {
            return Err(GtaError::Corrupt(format!(
                "checkpoint tensor '{name}' does not match slot '{}'",
                slot.0
            )));
        }
        slot.1 = t.clone();
    }
    Ok(())
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        arch: model.architecture_id.clone(),
        meta: vec![
            ("num_classes".into(), model.num_classes as i64),
            ("input_h".into(), model.input_resolution.0 as i64),
            ("input_w".into(), model.input_resolution.1 as i64),
        ],
        tensors: model.net.params.clone(),
    };
    save_checkpoint(&ck, path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ck = load_checkpoint(path)?;
    let num_classes = ck.meta_value("num_classes")? as usize;
    let h = ck.meta_value("input_h")? as usize;
    let w = ck.meta_value("input_w")? as usize;
    let mut model = build_classifier(&ck.arch, num_classes, (h, w), 0)?;
    restore_params(&mut model.net.params, &ck)?;
    Ok(model)
}

pub fn save_surrogate(model: &SurrogateModel, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        arch: "surrogate".into(),
        meta: vec![
            ("output_dim".into(), model.output_dim as i64),
            ("m1".into(), model.block_widths[0] as i64),
            ("m2".into(), model.block_widths[1] as i64),
            ("m3".into(), model.block_widths[2] as i64),
            ("m4".into(), model.block_widths[3] as i64),
        ],
        tensors: model.net.params.clone(),
    };
    save_checkpoint(&ck, path)
}

pub fn load_surrogate(path: &Path) -> Result<SurrogateModel> {
    let ck = load_checkpoint(path)?;
    if ck.arch != "surrogate" {
        return Err(GtaError::UnknownArchitecture(ck.arch.clone()));
    }
    let output_dim = ck.meta_value("output_dim")? as usize;
    let widths = [
        ck.meta_value("m1")? as usize,
        ck.meta_value("m2")? as usize,
        ck.meta_value("m3")? as usize,
        ck.meta_value("m4")? as usize,
    ];
    let mut model = build_surrogate_with(output_dim, widths, 0)?;
    restore_params(&mut model.net.params, &ck)?;
    Ok(model)
}
