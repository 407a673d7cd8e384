//! Run configuration as read from TOML.
//!
//! Frequencies are written in MHz (ordinary frequency, the paper's "/2π"
//! values) and multiplied by 2π on the way into the simulator.

use std::path::{Path, PathBuf};

use qtele_core::protocol::NUMERIC_FOCK_CUTOFF;
use qtele_core::{Backend, PhysicalParams, ProtocolConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// (Δ; Ω; Ω′; g; γ; κ)/2π = (2000; 10; 0.84; 0.07; 1e-4; 1e-7) MHz.
    #[default]
    Paper,
    /// Parameters for numeric ensembles; currently identical to `paper`.
    Desk,
}

impl Profile {
    pub fn params(self) -> PhysicalParams {
        match self {
            Profile::Paper => PhysicalParams::paper(),
            Profile::Desk => PhysicalParams::desk(),
        }
    }

    /// The profile's values as written in a config file.
    pub fn mhz(self) -> ParamsMhz {
        match self {
            Profile::Paper | Profile::Desk => ParamsMhz {
                delta: 2000.0,
                omega: 10.0,
                omega_prime: 0.84,
                g: 0.07,
                gamma: 1e-4,
                kappa: 1e-7,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    Ideal,
    EffectiveNumeric,
    FullNumeric,
}

impl From<BackendName> for Backend {
    fn from(b: BackendName) -> Self {
        match b {
            BackendName::Ideal => Backend::Ideal,
            BackendName::EffectiveNumeric => Backend::EffectiveNumeric,
            BackendName::FullNumeric => Backend::FullNumeric,
        }
    }
}

/// Physical parameters in MHz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsMhz {
    pub delta: f64,
    pub omega: f64,
    pub omega_prime: f64,
    pub g: f64,
    pub gamma: f64,
    pub kappa: f64,
}

/// Partial parameter block; missing entries come from the profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsOverride {
    delta: Option<f64>,
    omega: Option<f64>,
    omega_prime: Option<f64>,
    g: Option<f64>,
    gamma: Option<f64>,
    kappa: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    params: ParamsOverride,
    backend: Option<BackendName>,
    fock_cutoff: Option<usize>,
    trajectory_count: Option<usize>,
    max_reps: Option<u32>,
    t_d_multiplier: Option<f64>,
    master_seed: Option<u64>,
    output_dir: Option<PathBuf>,
    threads: Option<usize>,
}

/// Fully resolved configuration. Serializing it gives a file that parses
/// back to the same value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub backend: BackendName,
    pub fock_cutoff: usize,
    pub trajectory_count: usize,
    pub max_reps: u32,
    pub t_d_multiplier: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub params: ParamsMhz,
}

pub const DEFAULT_TRAJECTORY_COUNT: usize = 1000;
pub const DEFAULT_OUTPUT_DIR: &str = "out";

impl RunConfig {
    /// Defaults of a profile: effective backend, 1000 trajectories, six repetitions.
    pub fn profile(profile: Profile) -> Self {
        let base = ProtocolConfig::new(profile.params(), Backend::EffectiveNumeric);
        Self {
            profile,
            backend: BackendName::EffectiveNumeric,
            fock_cutoff: NUMERIC_FOCK_CUTOFF,
            trajectory_count: DEFAULT_TRAJECTORY_COUNT,
            max_reps: base.max_reps,
            t_d_multiplier: base.t_d_multiplier,
            master_seed: 0,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            threads: None,
            params: profile.mhz(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let mut cfg = Self::profile(raw.profile);
        let o = raw.params;
        let p = &mut cfg.params;
        p.delta = o.delta.unwrap_or(p.delta);
        p.omega = o.omega.unwrap_or(p.omega);
        p.omega_prime = o.omega_prime.unwrap_or(p.omega_prime);
        p.g = o.g.unwrap_or(p.g);
        p.gamma = o.gamma.unwrap_or(p.gamma);
        p.kappa = o.kappa.unwrap_or(p.kappa);
        if let Some(b) = raw.backend {
            cfg.backend = b;
            cfg.fock_cutoff = ProtocolConfig::new(cfg.profile.params(), b.into()).fock_cutoff;
        }
        cfg.fock_cutoff = raw.fock_cutoff.unwrap_or(cfg.fock_cutoff);
        cfg.trajectory_count = raw.trajectory_count.unwrap_or(cfg.trajectory_count);
        cfg.max_reps = raw.max_reps.unwrap_or(cfg.max_reps);
        cfg.t_d_multiplier = raw.t_d_multiplier.unwrap_or(cfg.t_d_multiplier);
        cfg.master_seed = raw.master_seed.unwrap_or(cfg.master_seed);
        cfg.output_dir = raw.output_dir.unwrap_or(cfg.output_dir);
        cfg.threads = raw.threads.or(cfg.threads);
        cfg.physical()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved configs always serialize")
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.to_string()));
        if self.trajectory_count == 0 {
            return bad("trajectory_count must be at least 1");
        }
        if self.fock_cutoff < 2 {
            return bad("fock_cutoff must be at least 2");
        }
        if !(self.t_d_multiplier > 0.0) {
            return bad("t_d_multiplier must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        Ok(())
    }

    /// Angular-frequency parameters (MHz × 2π).
    pub fn physical(&self) -> Result<PhysicalParams, CliError> {
        let p = &self.params;
        let params = PhysicalParams::from_mhz(p.delta, p.omega, p.omega_prime, p.g, p.gamma, p.kappa)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(params.with_emission(self.profile.params().emission))
    }

    pub fn protocol(&self) -> Result<ProtocolConfig, CliError> {
        let mut cfg = ProtocolConfig::new(self.physical()?, self.backend.into());
        cfg.fock_cutoff = self.fock_cutoff;
        cfg.max_reps = self.max_reps;
        cfg.t_d_multiplier = self.t_d_multiplier;
        Ok(cfg)
    }
}
