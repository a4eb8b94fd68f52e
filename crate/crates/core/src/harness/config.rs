use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::density::GridSpec;
use crate::error::{Error, Result};
use crate::integrator::{ErrorNorm, SchemeConfig};
use crate::model::Model;
use crate::noise::ShiftSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    TemporalRate,
    SpatialRate,
    Regularity,
    MalliavinProbe,
    DensityStudy,
    SingleRun,
}

impl StudyKind {
    pub const ALL: [StudyKind; 6] = [
        StudyKind::TemporalRate,
        StudyKind::SpatialRate,
        StudyKind::Regularity,
        StudyKind::MalliavinProbe,
        StudyKind::DensityStudy,
        StudyKind::SingleRun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::TemporalRate => "temporal_rate",
            StudyKind::SpatialRate => "spatial_rate",
            StudyKind::Regularity => "regularity",
            StudyKind::MalliavinProbe => "malliavin_probe",
            StudyKind::DensityStudy => "density_study",
            StudyKind::SingleRun => "single_run",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("study", format!("unknown study `{s}`")))
    }
}

/// A study description as read from JSON. Empty lists are filled with per-study defaults by
/// [`StudyConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default)]
    pub study: Option<StudyKind>,
    #[serde(default = "Model::reference")]
    pub model: Model,
    /// Step sizes `δt = T·2^{-e}`, i.e. `K = 2^e` steps.
    #[serde(default)]
    pub dt_exponents: Vec<u32>,
    #[serde(default)]
    pub modes: Vec<usize>,
    /// `δt_ref = min δt / factor` in the temporal study; the spatial study keeps `δt`.
    #[serde(default = "defaults::time_factor")]
    pub reference_time_factor: usize,
    /// `N_ref = factor · max N` in both rate studies.
    #[serde(default = "defaults::mode_factor")]
    pub reference_mode_factor: usize,
    /// `M_noise = factor · N` for every discretization.
    #[serde(default = "defaults::noise_factor")]
    pub noise_factor: usize,
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub norm: ErrorNorm,
    /// Regularity lags in steps.
    #[serde(default)]
    pub lags: Vec<usize>,
    /// Evaluation points for the probe and density studies.
    #[serde(default)]
    pub points: Vec<f64>,
    /// Thresholds of the non-degeneracy probe.
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Positivity threshold relative to the density peak.
    #[serde(default = "defaults::tau_rel")]
    pub tau_rel: f64,
    /// Positivity region as sample quantiles per coordinate.
    #[serde(default = "defaults::region_quantiles")]
    pub region_quantiles: (f64, f64),
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
}

mod defaults {
    pub fn time_factor() -> usize {
        8
    }
    pub fn mode_factor() -> usize {
        2
    }
    pub fn noise_factor() -> usize {
        2
    }
    pub fn samples() -> usize {
        200
    }
    pub fn tau_rel() -> f64 {
        1e-6
    }
    pub fn region_quantiles() -> (f64, f64) {
        (0.05, 0.95)
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = unknown_field(&inner.to_string()).unwrap_or(path);
            let field = if field.is_empty() || field == "?" { ".".to_string() } else { field };
            Error::config(field, inner.to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Fill empty lists with the defaults of `kind` and check every invariant.
    pub fn resolve(&self, kind: StudyKind) -> Result<Self> {
        if let Some(k) = self.study {
            if k != kind {
                return Err(Error::config("study", format!("config is for `{k}` but `{kind}` was requested")));
            }
        }
        let mut c = self.clone();
        c.study = Some(kind);
        let len = c.model.length;
        let (dts, modes): (Vec<u32>, Vec<usize>) = match kind {
            StudyKind::TemporalRate => ((6..=10).collect(), vec![64]),
            StudyKind::SpatialRate => (vec![12], vec![8, 16, 32, 64]),
            StudyKind::Regularity => (vec![10], vec![32]),
            _ => (vec![6], vec![16]),
        };
        if c.dt_exponents.is_empty() {
            c.dt_exponents = dts;
        }
        if c.modes.is_empty() {
            c.modes = modes;
        }
        c.dt_exponents.sort_unstable();
        c.modes.sort_unstable();
        if kind == StudyKind::Regularity && c.lags.is_empty() {
            c.lags = (0..=8).map(|p| 1 << p).collect();
        }
        if c.points.is_empty() {
            c.points = match kind {
                StudyKind::MalliavinProbe => vec![0.3 * len, 0.7 * len],
                _ => vec![0.5 * len],
            };
        }
        if kind == StudyKind::MalliavinProbe && c.eps.is_empty() {
            c.eps = (0..=24).map(|i| 10f64.powf(-12.0 + 0.5 * i as f64)).collect();
        }
        c.validate(kind)?;
        Ok(c)
    }

    fn validate(&self, kind: StudyKind) -> Result<()> {
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        if self.samples == 0 {
            return Err(Error::config("samples", "need at least one sample"));
        }
        if let Some(&e) = self.dt_exponents.iter().find(|&&e| e > 24) {
            return Err(Error::config("dt_exponents", format!("2^{e} steps is beyond desk scale")));
        }
        if self.dt_exponents.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("dt_exponents", "levels must be distinct"));
        }
        if self.modes.contains(&0) || self.modes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("modes", "mode counts must be positive and distinct"));
        }
        if self.noise_factor == 0 {
            return Err(Error::config("noise_factor", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        let rate = matches!(kind, StudyKind::TemporalRate | StudyKind::SpatialRate | StudyKind::Regularity);
        if rate && self.samples < 2 {
            return Err(Error::config("samples", "rate studies need at least 2 samples for standard errors"));
        }
        match kind {
            StudyKind::TemporalRate => {
                if self.dt_exponents.len() < 3 {
                    return Err(Error::config("dt_exponents", "a rate fit needs at least 3 step sizes"));
                }
                if self.reference_time_factor < 8 || !self.reference_time_factor.is_power_of_two() {
                    return Err(Error::config(
                        "reference_time_factor",
                        format!("must be a power of two >= 8, got {}", self.reference_time_factor),
                    ));
                }
            }
            StudyKind::SpatialRate => {
                if self.modes.len() < 3 {
                    return Err(Error::config("modes", "a rate fit needs at least 3 mode counts"));
                }
                if self.reference_mode_factor < 2 {
                    return Err(Error::config(
                        "reference_mode_factor",
                        format!("must be >= 2, got {}", self.reference_mode_factor),
                    ));
                }
            }
            StudyKind::Regularity => {
                let steps = 1usize << self.dt_exponents[self.dt_exponents.len() - 1];
                let (lo, hi) = (
                    self.lags.iter().copied().min().unwrap_or(0),
                    self.lags.iter().copied().max().unwrap_or(0),
                );
                if lo == 0 || hi >= steps {
                    return Err(Error::config("lags", format!("lags must lie in 1..{steps}")));
                }
                if self.lags.len() < 3 || hi < 100 * lo {
                    return Err(Error::config("lags", "lag grid must have 3 lags spanning at least 2 decades"));
                }
            }
            StudyKind::MalliavinProbe | StudyKind::DensityStudy => {
                crate::malliavin::validate_points(&self.points, self.model.length)
                    .map_err(|e| Error::config("points", e.to_string()))?;
                if kind == StudyKind::DensityStudy {
                    if self.points.len() > crate::density::MAX_DIM {
                        return Err(Error::config("points", "density estimation supports at most 3 points"));
                    }
                    let (a, b) = self.region_quantiles;
                    if !(0.0 <= a && a < b && b <= 1.0) {
                        return Err(Error::config("region_quantiles", "need 0 <= lo < hi <= 1"));
                    }
                    if !(self.tau_rel >= 0.0) {
                        return Err(Error::config("tau_rel", "must be non-negative"));
                    }
                    if let Some(s) = &self.shift {
                        s.validate(self.model.length, self.model.horizon)
                            .map_err(|e| Error::config("shift", e.to_string()))?;
                    }
                }
                if kind == StudyKind::MalliavinProbe && self.model.diffusion.infimum() <= 0.0 {
                    return Err(Error::config("model.diffusion", "the probe needs a diffusion bounded away from 0"));
                }
            }
            StudyKind::SingleRun => {}
        }
        for &n in &self.modes {
            for &e in &self.dt_exponents {
                self.scheme(n, 1 << e)
                    .validate()
                    .map_err(|err| Error::config("modes", err.to_string()))?;
            }
        }
        Ok(())
    }

    /// Scheme settings for `n` modes and `k` steps under this config's noise factor.
    pub fn scheme(&self, n: usize, k: usize) -> SchemeConfig {
        SchemeConfig::new(n, k).with_noise_modes(self.noise_factor * n)
    }

    pub fn finest_steps(&self) -> usize {
        1 << self.dt_exponents[self.dt_exponents.len() - 1]
    }

    pub fn coarsest_steps(&self) -> usize {
        1 << self.dt_exponents[0]
    }

    pub fn max_modes(&self) -> usize {
        self.modes[self.modes.len() - 1]
    }

    pub fn fingerprint(&self) -> String {
        crate::model::fingerprint(self)
    }
}

// serde reports unknown fields as "unknown field `name`, expected ..."
fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}
