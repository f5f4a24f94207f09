//! Step-and-dose condition encoding.
//!
//! In `paper` mode the dose (in Bq) is folded into the step index as the
//! scalar `t + sin(dose) + cos(dose)` before the sinusoidal encoding. In
//! `fraction` mode the step and `1000 * count_fraction` are encoded
//! separately and summed. Either encoding then goes through the learned
//! two-layer MLP (SiLU in between) of the network.

use std::fmt;
use std::str::FromStr;

use super::network::TinyUNet;
use super::DoseContext;
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 64;
/// Lowest frequency of the geometric ladder is `1 / MAX_PERIOD_SCALE`.
const MAX_PERIOD_SCALE: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingMode {
    #[default]
    Paper,
    Fraction,
}

impl FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(EmbeddingMode::Paper),
            "fraction" => Ok(EmbeddingMode::Fraction),
            other => Err(Error::Config(format!("unknown embedding mode '{other}'"))),
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Paper => "paper",
            EmbeddingMode::Fraction => "fraction",
        })
    }
}

/// `[sin(u f_0) .. sin(u f_{h-1}), cos(u f_0) .. cos(u f_{h-1})]` with the
/// frequencies `f_i` spaced geometrically from 1 down to 1e-4.
pub fn sinusoidal_encoding(u: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| {
        if half <= 1 {
            1.0
        } else {
            MAX_PERIOD_SCALE.powf(-(i as f64) / (half - 1) as f64)
        }
    };
    let mut out: Vec<f64> = (0..half).map(|i| (u * freq(i)).sin()).collect();
    out.extend((0..half).map(|i| (u * freq(i)).cos()));
    out.resize(dim, 0.0);
    out
}

/// Pre-MLP encoding of `(t, dose)`. `dose = None` drops the dose term.
pub fn encode_condition(t: f64, dose: Option<&DoseContext>, mode: EmbeddingMode, dim: usize) -> Vec<f64> {
    match (mode, dose) {
        (_, None) => sinusoidal_encoding(t, dim),
        (EmbeddingMode::Paper, Some(d)) => {
            sinusoidal_encoding(t + d.dose_bq.sin() + d.dose_bq.cos(), dim)
        }
        (EmbeddingMode::Fraction, Some(d)) => {
            let mut e = sinusoidal_encoding(t, dim);
            for (a, b) in e.iter_mut().zip(sinusoidal_encoding(1000.0 * d.count_fraction, dim)) {
                *a += b;
            }
            e
        }
    }
}

/// The embedding vector fed to every resolution level of `net`.
pub fn embed_condition(t: usize, dose: &DoseContext, mode: EmbeddingMode, net: &TinyUNet) -> Vec<f64> {
    let enc = encode_condition(t as f64, Some(dose), mode, net.config().emb_dim);
    net.embed(&enc)
}
