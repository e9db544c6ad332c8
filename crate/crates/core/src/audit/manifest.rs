use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AuditError;
use crate::numerics::{Params, Scalar};

/// Provenance record written next to run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full configuration snapshot.
    pub config: serde_json::Value,
    pub seed: u64,
    /// [`content_hash`] of the parameters.
    pub content_hash: String,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new<T: Scalar>(config: &impl Serialize, seed: u64, params: &Params<T>) -> Result<Self, AuditError> {
        let config = serde_json::to_value(config).map_err(|e| AuditError::Manifest(e.to_string()))?;
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            config,
            seed,
            content_hash: content_hash(params),
            created_unix,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AuditError> {
        serde_json::from_str(text).map_err(|e| AuditError::Manifest(e.to_string()))
    }
}

/// SHA-256 over every parameter's name, shape, dtype and little-endian
/// values, in registration order, as lowercase hex.
pub fn content_hash<T: Scalar>(params: &Params<T>) -> String {
    let mut h = Sha256::new();
    h.update(T::DTYPE.name().as_bytes());
    let mut buf = Vec::new();
    for (_, name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn params(v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("a", Tensor::from_f64(&[2], &[1.0, v]).unwrap());
        p
    }

    #[test]
    fn hash_tracks_values_and_names() {
        assert_eq!(content_hash(&params(2.0)), content_hash(&params(2.0)));
        assert_ne!(content_hash(&params(2.0)), content_hash(&params(2.5)));
        let mut renamed = Params::<f64>::new();
        renamed.insert("b", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert_ne!(content_hash(&params(2.0)), content_hash(&renamed));
        assert_ne!(content_hash(&params(2.0)), content_hash(&params(2.0).cast::<f32>()));
        assert_eq!(content_hash(&params(2.0)).len(), 64);
    }

    #[test]
    fn json_round_trip() {
        let m = RunManifest::new(&serde_json::json!({"lr": 2.5e-5, "stages": [1, 2]}), 7, &params(1.0)).unwrap();
        assert_eq!(RunManifest::from_json(&m.to_json()).unwrap(), m);
        assert!(RunManifest::from_json("{}").is_err());
    }
}
