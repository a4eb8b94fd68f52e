use serde::{Deserialize, Serialize};

use crate::coefficients::{DiffusionSpec, Drift};
use crate::error::{Error, Result};
use crate::spectral::SpectralField;

/// Initial datum `X₀`, given by its sine coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Zero,
    /// `amplitude · 2^{-(j-1)}` on modes `1..=4`.
    Smooth {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Coefficients `(-1)^{j+1} j^{-(γ+1/2)}` rescaled so the first `normalize_modes` have ℍ⁰
    /// norm `amplitude`; the datum lies in `ℍ^s` exactly for `s < γ`.
    Rough {
        gamma: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_normalize_modes")]
        normalize_modes: usize,
    },
    Coefficients { coeffs: Vec<f64> },
}

fn default_amplitude() -> f64 {
    0.5
}

fn default_normalize_modes() -> usize {
    1024
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Smooth {
            amplitude: default_amplitude(),
        }
    }
}

impl InitialCondition {
    /// Coefficient of mode `j` (1-based).
    pub fn coefficient(&self, j: usize) -> f64 {
        match self {
            InitialCondition::Zero => 0.0,
            InitialCondition::Smooth { amplitude } => {
                if j <= 4 {
                    amplitude * 0.5f64.powi(j as i32 - 1)
                } else {
                    0.0
                }
            }
            InitialCondition::Rough {
                gamma,
                amplitude,
                normalize_modes,
            } => {
                let raw = |m: usize| (m as f64).powf(-(gamma + 0.5));
                let norm = (1..=*normalize_modes).map(|m| raw(m).powi(2)).sum::<f64>().sqrt();
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                sign * amplitude * raw(j) / norm
            }
            InitialCondition::Coefficients { coeffs } => coeffs.get(j - 1).copied().unwrap_or(0.0),
        }
    }

    /// `P^N X₀`.
    pub fn project(&self, modes: usize) -> SpectralField {
        SpectralField::from_coeffs((1..=modes).map(|j| self.coefficient(j)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialCondition::Rough {
                gamma,
                amplitude,
                normalize_modes,
            } => {
                if !(*gamma > 0.0) || !amplitude.is_finite() || *normalize_modes == 0 {
                    return Err(Error::invalid("initial", "rough datum needs gamma > 0 and finite amplitude"));
                }
            }
            InitialCondition::Smooth { amplitude } if !amplitude.is_finite() => {
                return Err(Error::invalid("initial", "amplitude must be finite"));
            }
            InitialCondition::Coefficients { coeffs } if coeffs.iter().any(|c| !c.is_finite()) => {
                return Err(Error::invalid("initial", "coefficients must be finite"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// The continuous problem: drift, diffusion, domain `(0, L)`, horizon `T` and `X₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    #[serde(default = "Drift::double_well")]
    pub drift: Drift,
    #[serde(default = "default_diffusion")]
    pub diffusion: DiffusionSpec,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub initial: InitialCondition,
}

fn default_length() -> f64 {
    1.0
}

fn default_horizon() -> f64 {
    0.5
}

fn default_diffusion() -> DiffusionSpec {
    DiffusionSpec::SublinearPower {
        a: 0.5,
        b: 0.25,
        alpha: 0.5,
    }
}

impl Model {
    /// Double well with `σ(ξ) = 0.5 + 0.25(1+ξ²)^{1/4}` and the smooth datum on `(0,1)`, `T = 0.5`.
    pub fn reference() -> Self {
        Self {
            drift: Drift::double_well(),
            diffusion: default_diffusion(),
            length: default_length(),
            horizon: default_horizon(),
            initial: InitialCondition::default(),
        }
    }

    /// `F = 0` with constant diffusion `a` (additive noise for `a > 0`).
    pub fn linear(a: f64) -> Self {
        Self {
            drift: Drift::Zero,
            diffusion: DiffusionSpec::Constant { a },
            length: default_length(),
            horizon: default_horizon(),
            initial: InitialCondition::Zero,
        }
    }

    pub fn with_initial(mut self, initial: InitialCondition) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_domain(mut self, length: f64, horizon: f64) -> Self {
        self.length = length;
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) || !self.length.is_finite() {
            return Err(Error::invalid("length", format!("must be positive, got {}", self.length)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::invalid("horizon", format!("must be positive, got {}", self.horizon)));
        }
        self.drift.validate()?;
        self.diffusion.validate()?;
        self.initial.validate()
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("serializable value");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}
