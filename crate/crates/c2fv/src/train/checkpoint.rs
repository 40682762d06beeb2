//! Versioned checkpoint container: config header, training state, metric
//! log and raw little-endian f64 parameter blobs (bit-exact round trips).

use super::MetricRecord;
use crate::codec::VideoModel;
use crate::config::ModelConfig;
use crate::graph::Arr;
use crate::nn::Module;
use crate::{Error, Result};
use ndarray::IxDyn;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"C2FC";
const VERSION: u8 = 1;

/// Training state carried alongside the parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    pub stage: u8,
    pub step: u64,
    pub lambda: f64,
    pub seed: u64,
    pub log: Vec<MetricRecord>,
}

pub fn save(path: &Path, model: &mut VideoModel, state: &TrainState) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(model.modes_enabled as u8);
    out.push(model.c2f_enabled as u8);

    let cfg_json = serde_json::to_vec(&model.cfg).expect("config serializes");
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);

    let state_json = serde_json::to_vec(state).expect("state serializes");
    out.extend_from_slice(&(state_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&state_json);

    let mut entries: Vec<(String, Arr)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        entries.push((name, p.value.as_ref().clone()));
    });
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, value) in &entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(value.ndim() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.as_standard_layout().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<(VideoModel, TrainState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if c.u8()? != VERSION {
        return Err(Error::Checkpoint("unsupported version".into()));
    }
    let modes_enabled = c.u8()? != 0;
    let c2f_enabled = c.u8()? != 0;
    let cfg_len = c.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let state_len = c.u32()? as usize;
    let state: TrainState = serde_json::from_slice(c.take(state_len)?)
        .map_err(|e| Error::Checkpoint(format!("state: {e}")))?;

    let count = c.u32()? as usize;
    let mut blobs: HashMap<String, Arr> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("param name: {e}")))?;
        let ndim = c.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(8 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        blobs.insert(
            name,
            Arr::from_shape_vec(IxDyn(&dims), data).expect("length checked"),
        );
    }

    let mut model = VideoModel::new(cfg, 0);
    model.modes_enabled = modes_enabled;
    model.c2f_enabled = c2f_enabled;
    let mut missing = Vec::new();
    model.visit_params("", &mut |name, p| match blobs.remove(&name) {
        Some(arr) => {
            if arr.shape() != p.value.shape() {
                missing.push(format!("{name}: shape mismatch"));
            } else {
                p.set(arr);
            }
        }
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint: {}",
            missing.join(", ")
        )));
    }
    if !blobs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} unknown parameters",
            blobs.len()
        )));
    }
    Ok((model, state))
}
