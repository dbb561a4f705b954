//! Student parameter snapshots.
//!
//! Layout: one ASCII header line
//! `SOVSCKPT v1 <config_hash> <param_count> <epoch> <width> <classes>\n`
//! followed by `param_count` little-endian `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{ConvNet, StudentModel};

const MAGIC: &str = "SOVSCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub width: usize,
    pub classes: usize,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &ConvNet<f32>, config_hash: &str, epoch: usize) -> Self {
        Checkpoint {
            config_hash: config_hash.to_string(),
            epoch,
            width: model.width(),
            classes: model.num_classes(),
            params: model.params().to_vec(),
        }
    }

    /// Rebuild the network; fails if the parameter count does not match.
    pub fn to_model(&self) -> Result<ConvNet<f32>> {
        let mut net = ConvNet::<f32>::new(self.width, self.classes, 0);
        if net.num_params() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters, a width-{} {}-class network needs {}",
                self.params.len(),
                self.width,
                self.classes,
                net.num_params()
            )));
        }
        net.params_mut().copy_from_slice(&self.params);
        Ok(net)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = format!(
            "{MAGIC} v1 {} {} {} {} {}\n",
            self.config_hash,
            self.params.len(),
            self.epoch,
            self.width,
            self.classes
        )
        .into_bytes();
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "header is not ASCII"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 7 || parts[0] != MAGIC || parts[1] != "v1" {
            return Err(Error::format(path, format!("bad checkpoint header {header:?}")));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad header field {s:?}")))
        };
        let count = num(parts[3])?;
        let body = &bytes[nl + 1..];
        if body.len() != count * 4 {
            return Err(Error::format(
                path,
                format!("expected {} parameter bytes, found {}", count * 4, body.len()),
            ));
        }
        Ok(Checkpoint {
            config_hash: parts[2].to_string(),
            epoch: num(parts[4])?,
            width: num(parts[5])?,
            classes: num(parts[6])?,
            params: body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, path)
    }
}
