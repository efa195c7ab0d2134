//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `NACK`                            |
//! | 4      | 4    | version (u32, currently 1)              |
//! | 8      | 4    | feature dim D (u32)                     |
//! | 12     | 4    | classes K (u32)                         |
//! | 16     | 4    | hidden width (u32, 128 by default)      |
//! | 20     | 4    | dropout rate (f32)                      |
//! | 24     | 32   | SHA-256 of the encoder spec             |
//! | 56     | ...  | f32 blocks: γ, β, W1, b1, W2, b2        |
//!
//! Matrices are row-major (`W1` is `D × hidden`, `W2` is `hidden × K`).

use alloc::format;
use alloc::vec::Vec;

use super::HeadParams;
use crate::hash::{sha256, Fingerprint};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NACK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 56;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: HeadParams<f32>,
    pub encoder: Fingerprint,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.head;
        let floats: usize = h.tensor_lens().iter().sum();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * floats);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            h.feature_dim() as u32,
            h.num_classes() as u32,
            h.hidden_dim() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(h.dropout_rate as f32).to_le_bytes());
        out.extend_from_slice(&self.encoder);
        for t in h.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: alloc::string::String| Error::Format {
            what: "checkpoint",
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "expected at least {HEADER_LEN} header bytes, got {}",
                bytes.len()
            )));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (d, k, hidden) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let dropout = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let mut encoder = [0u8; 32];
        encoder.copy_from_slice(&bytes[24..56]);
        let lens = [d, d, d * hidden, hidden, hidden * k, k];
        let expected = HEADER_LEN + 4 * lens.iter().sum::<usize>();
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
        let ln_gamma = take(d);
        let ln_beta = take(d);
        let w1 = Matrix::from_vec(d, hidden, take(d * hidden))?;
        let b1 = take(hidden);
        let w2 = Matrix::from_vec(hidden, k, take(hidden * k))?;
        let b2 = take(k);
        let head = HeadParams {
            ln_gamma,
            ln_beta,
            w1,
            b1,
            w2,
            b2,
            dropout_rate: f64::from(dropout),
        };
        head.validate()?;
        Ok(Self { head, encoder })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> Fingerprint {
        sha256(&self.to_bytes())
    }
}
