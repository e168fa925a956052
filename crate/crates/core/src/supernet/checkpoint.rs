//! Versioned JSON container for config, spaces, logits and weights.
//!
//! Tensor payloads are hex-encoded little-endian bit patterns, so reloads
//! are bit-exact regardless of float formatting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchMatrix, ArchParams, Supernet, SupernetConfig};
use crate::error::{Error, Result};
use crate::opspace::{Component, SearchSpace};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "trinas-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredMatrix {
    pub component: Component,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub precision: String,
    /// `supernet` or `detector`.
    pub kind: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub config: SupernetConfig,
    pub spaces: Vec<String>,
    pub architecture: Option<String>,
    pub arch: Vec<StoredMatrix>,
    pub params: Vec<StoredTensor>,
}

pub fn encode<T: Real>(data: &[T]) -> String {
    let mut bytes = Vec::with_capacity(std::mem::size_of_val(data));
    for &v in data {
        v.put_le(&mut bytes);
    }
    hex::encode(bytes)
}

pub fn decode<T: Real>(s: &str) -> Result<Vec<T>> {
    let bytes = hex::decode(s).map_err(|e| Error::Format(format!("tensor payload: {e}")))?;
    let w = std::mem::size_of::<T>();
    if bytes.len() % w != 0 {
        return Err(Error::Format(format!("payload length {} not a multiple of {w}", bytes.len())));
    }
    Ok(bytes.chunks(w).map(T::get_le).collect())
}

impl Checkpoint {
    pub fn new<T: Real>(kind: &str, cfg: &SupernetConfig, seed: u64, store: &ParamStore<T>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            precision: T::NAME.into(),
            kind: kind.into(),
            seed,
            epoch: None,
            config: cfg.clone(),
            spaces: Vec::new(),
            architecture: None,
            arch: Vec::new(),
            params: store
                .iter()
                .map(|(_, name, t)| StoredTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: encode(t.data()),
                })
                .collect(),
        }
    }

    pub fn from_supernet<T: Real>(sn: &Supernet<T>, seed: u64, epoch: Option<usize>) -> Self {
        let mut ck = Self::new("supernet", &sn.cfg, seed, &sn.store);
        ck.epoch = epoch;
        ck.spaces = sn.spaces.iter().map(SearchSpace::to_line).collect();
        ck.arch = sn
            .arch
            .matrices
            .iter()
            .map(|m| StoredMatrix {
                component: m.component,
                rows: m.rows.clone(),
                cols: m.cols.clone(),
                data: encode(m.logits.data()),
            })
            .collect();
        ck
    }

    fn check<T: Real>(&self, kind: &str) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Format(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        if self.precision != T::NAME {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, requested {}",
                self.precision,
                T::NAME
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Overwrites every parameter of `store` with the stored tensor of the
    /// same name. Extra stored names are ignored; missing ones are errors.
    pub fn load_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let by_name: std::collections::BTreeMap<&str, &StoredTensor> =
            self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let keys: Vec<_> = store.iter().map(|(k, n, _)| (k, n.to_string())).collect();
        for (key, name) in keys {
            let st = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            let t = store.get_mut(key);
            if st.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: stored shape {:?} vs {:?}",
                    st.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(st.shape.clone(), decode(&st.data)?)?;
        }
        Ok(())
    }

    pub fn spaces(&self) -> Result<[SearchSpace; 3]> {
        if self.spaces.len() != 3 {
            return Err(Error::Format(format!("expected 3 spaces, found {}", self.spaces.len())));
        }
        let parsed = self
            .spaces
            .iter()
            .map(|l| SearchSpace::parse_line(l).map_err(Error::Format))
            .collect::<Result<Vec<_>>>()?;
        Ok(parsed.try_into().expect("length checked"))
    }

    pub fn to_supernet<T: Real>(&self) -> Result<Supernet<T>> {
        self.check::<T>("supernet")?;
        let mut sn = Supernet::build(&self.config, self.spaces()?, self.seed)?;
        self.load_params(&mut sn.store)?;
        let mut mats = Vec::with_capacity(self.arch.len());
        for (m, fresh) in self.arch.iter().zip(&sn.arch.matrices) {
            if m.component != fresh.component || m.rows != fresh.rows || m.cols != fresh.cols {
                return Err(Error::Format(format!("{} logits do not match the rebuilt supernet", m.component)));
            }
            let logits = Tensor::new(vec![m.rows.len(), m.cols.len()], decode(&m.data)?)?;
            mats.push(ArchMatrix {
                component: m.component,
                rows: m.rows.clone(),
                cols: m.cols.clone(),
                logits,
            });
        }
        if mats.len() != sn.arch.matrices.len() {
            return Err(Error::Format("architecture matrix count mismatch".into()));
        }
        sn.arch = ArchParams::new(mats);
        Ok(sn)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized form; recorded as provenance.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip_is_bitwise() {
        let v = [0.1f32, -0.0, f32::MIN_POSITIVE, 1e-45, 3.4e38];
        let back: Vec<f32> = decode(&encode(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode::<f64>("abcd").is_err());
    }
}
