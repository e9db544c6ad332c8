//! Closed-form parameter and FLOP accounting, and run manifests.

mod flops;
mod manifest;
mod params;

pub use flops::{estimate_flops, FlopEstimate, StageFlops};
pub use manifest::{content_hash, RunManifest};
pub use params::{count_params, AuditRow, Group, ParamAudit, PROPOSALS_ROW};

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("closed-form count disagrees with the instantiated model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Decoder(#[from] crate::decoder::DecoderError),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Integer count in millions with one decimal, e.g. `8421376 → "8.4"`.
pub fn millions(n: u64) -> String {
    format!("{:.1}", n as f64 / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn millions_rounding() {
        assert_eq!(millions(8_421_376), "8.4");
        assert_eq!(millions(3_211_520), "3.2");
        assert_eq!(millions(49_999), "0.0");
        assert_eq!(millions(50_001), "0.1");
    }
}
