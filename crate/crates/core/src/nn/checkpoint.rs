//! Checkpoints: a directory holding `spec.json` (the network description and
//! init seed) and `params.bin` (a named-parameter archive).
//!
//! `params.bin` layout, little endian: magic `SSLSEGW1`, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and
//! `f32` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{NetworkState, Param};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::io::atomic_write;

const MAGIC: &[u8; 8] = b"SSLSEGW1";

#[derive(Serialize, Deserialize)]
struct SpecFile {
    spec: NetworkSpec,
    init_seed: u64,
    num_parameters: usize,
}

pub fn save_checkpoint(state: &NetworkState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(state.num_parameters() * 4 + 1024);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(state.params().len() as u32).to_le_bytes());
    for p in state.params() {
        bytes.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(p.name.as_bytes());
        bytes.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(&dir.join("params.bin"), &bytes)?;
    let spec = SpecFile {
        spec: state.spec().clone(),
        init_seed: state.init_seed(),
        num_parameters: state.num_parameters(),
    };
    let text = serde_json::to_string_pretty(&spec).expect("spec serializes");
    atomic_write(&dir.join("spec.json"), text.as_bytes())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("params", "truncated archive"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<NetworkState> {
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SpecFile = serde_json::from_str(&text).map_err(|e| Error::format("spec", e.to_string()))?;

    let path = dir.join("params.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("params", "bad magic"));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("params", "non-UTF-8 name"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("params", "trailing bytes after last tensor"));
    }
    let state = NetworkState::from_parts(spec.spec, spec.init_seed, params)?;
    if state.num_parameters() != spec.num_parameters {
        return Err(Error::format(
            "num_parameters",
            format!("header says {}, archive holds {}", spec.num_parameters, state.num_parameters()),
        ));
    }
    Ok(state)
}
