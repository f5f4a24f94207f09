//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "DDPC"
//! 4       format version (currently 1)
//! 5       kind tag: 0 = diffusion predictor, 1 = prior denoiser
//! 6..10   header length in bytes (u32)
//! ..      UTF-8 JSON header: network shape, conditioning, data scale
//! ..      parameter count (u64)
//! ..      parameters as f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Conditioning, EpsilonNet, TinyUNet, UNetConfig};
use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"DDPC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Predictor,
    Prior,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Predictor => 0,
            ModelKind::Prior => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Predictor),
            1 => Ok(ModelKind::Prior),
            other => Err(Error::Format(format!("unknown checkpoint kind tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub unet: UNetConfig,
    pub conditioning: Conditioning,
    pub data_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(18 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind.tag());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 10 && &bytes[..4] == MAGIC,
            Format,
            "not a checkpoint (bad magic)"
        );
        ensure!(
            bytes[4] == VERSION,
            Format,
            "unsupported checkpoint version {}",
            bytes[4]
        );
        let kind = ModelKind::from_tag(bytes[5])?;
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = &bytes[10..];
        ensure!(
            body.len() >= hlen + 8,
            Format,
            "checkpoint truncated inside header (need {} bytes, have {})",
            hlen + 8,
            body.len()
        );
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Format(format!("checkpoint header at byte 10: {e}")))?;
        let count = u64::from_le_bytes(body[hlen..hlen + 8].try_into().expect("8 bytes")) as usize;
        let payload = &body[hlen + 8..];
        ensure!(
            payload.len() == count * 4,
            Format,
            "checkpoint payload is {} bytes, header declares {} parameters ({} bytes)",
            payload.len(),
            count,
            count * 4
        );
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self {
            kind,
            header,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuild the network; fails if the parameter count does not fit the shape.
    pub fn network(&self) -> Result<TinyUNet> {
        let mut net = TinyUNet::zeros(self.header.unet);
        ensure!(
            net.num_params() == self.params.len(),
            Format,
            "checkpoint has {} parameters, architecture needs {}",
            self.params.len(),
            net.num_params()
        );
        net.params_mut().copy_from_slice(&self.params);
        Ok(net)
    }
}

impl EpsilonNet {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Predictor,
            header: CheckpointHeader {
                unet: *self.net.config(),
                conditioning: self.conditioning,
                data_scale: self.data_scale,
            },
            params: self.net.params().to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure!(
            ckpt.kind == ModelKind::Predictor,
            Format,
            "checkpoint holds a {:?}, not a diffusion predictor",
            ckpt.kind
        );
        Ok(Self {
            net: ckpt.network()?,
            conditioning: ckpt.header.conditioning,
            data_scale: ckpt.header.data_scale,
        })
    }
}
