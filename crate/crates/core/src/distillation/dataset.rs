//! Teacher-labelled transitions and the `HDD1` file format.
//!
//! ```text
//! "HDD1" version:u8 count:u64
//! { id_len:u32 id N:u32 S:u32 A:u32 states:f64[N·S] mean:f64[N·A] log_std:f64[N·A] }*
//! ```

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HDD1";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub morphology_id: String,
    pub n_limbs: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// `N·S`, limbs in DFS order.
    pub states: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl TransitionRecord {
    pub fn validate(&self) -> Result<()> {
        let (n, s, a) = (self.n_limbs, self.state_dim, self.action_dim);
        if self.states.len() != n * s || self.mean.len() != n * a || self.log_std.len() != n * a {
            return Err(Error::Format(format!(
                "record for `{}` has inconsistent lengths",
                self.morphology_id
            )));
        }
        let finite = self
            .states
            .iter()
            .chain(&self.mean)
            .chain(&self.log_std)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("record for `{}`", self.morphology_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<TransitionRecord>,
}

impl Dataset {
    pub fn new(records: Vec<TransitionRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.morphology_id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.morphology_id.as_bytes());
            for d in [r.n_limbs, r.state_dim, r.action_dim] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in r.states.iter().chain(&r.mean).chain(&r.log_std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| Error::Format(format!("truncated dataset at byte {pos}")))?;
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("not an HDD1 dataset".into()));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let mut records = Vec::with_capacity(count.min(buf.len() / 16));
        for _ in 0..count {
            let len = u32_at(take(4)?);
            let id = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Format("invalid utf-8 in morphology id".into()))?;
            let n = u32_at(take(4)?);
            let s = u32_at(take(4)?);
            let a = u32_at(take(4)?);
            let mut floats = |k: usize| -> Result<Vec<f64>> {
                let bytes = take(k.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            };
            let states = floats(n * s)?;
            let mean = floats(n * a)?;
            let log_std = floats(n * a)?;
            let r = TransitionRecord {
                morphology_id: id,
                n_limbs: n,
                state_dim: s,
                action_dim: a,
                states,
                mean,
                log_std,
            };
            r.validate()?;
            records.push(r);
        }
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Self { records })
    }
}
