//! Sinusoidal encodings of the diffusion timestep and the injected dose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the injected activity enters the sinusoidal encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DoseEncoding {
    /// Encode `log10(1 + dose_bq)`.
    #[default]
    Log10,
    /// Encode the raw Becquerel value.
    Raw,
}

impl DoseEncoding {
    pub fn scalar(self, dose_bq: f64) -> f64 {
        match self {
            DoseEncoding::Log10 => (1.0 + dose_bq).log10(),
            DoseEncoding::Raw => dose_bq,
        }
    }
}

fn frequency(k: usize, half: usize) -> f64 {
    (-(10_000f64.ln()) * k as f64 / half as f64).exp()
}

/// `[sin(v w_0) .. sin(v w_{h-1}), cos(v w_0) .. cos(v w_{h-1})]` with
/// geometrically spaced frequencies `w_k = 10000^(-k/h)`.
pub fn sinusoidal_features(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "embedding dimension must be even and > 0, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let a = value * frequency(k, half);
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    Ok(out)
}

/// Timestep features plus dose features, frequency by frequency.
pub fn dose_time_features(t: usize, dose_bq: f64, dim: usize, encoding: DoseEncoding) -> Result<Vec<f64>> {
    if !(dose_bq >= 0.0) {
        return Err(Error::Domain(format!("dose must be >= 0, got {dose_bq}")));
    }
    let time = sinusoidal_features(t as f64, dim)?;
    let dose = sinusoidal_features(encoding.scalar(dose_bq), dim)?;
    Ok(time.iter().zip(&dose).map(|(a, b)| a + b).collect())
}
