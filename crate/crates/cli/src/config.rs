//! File configuration. Every command reads an optional TOML file whose keys
//! mirror its long flags (with underscores); flags given on the command line
//! win over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nucdiff_core::diffusion::{GuidanceMode, GuidanceStep, Renoise, ScheduleKind, ScheduleSpec};
use nucdiff_core::nucdiff::{BackgroundUpdate, NucDiffConfig};
use nucdiff_core::proxops::DEFAULT_RANK_TOL;
use nucdiff_core::rpca::{default_lambda, RpcaConfig};
use nucdiff_core::synth::SynthSpec;

use crate::error::{CliError, Result};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFile {
    pub scene: SynthSpec,
    /// One instance per level over a shared scene instead of a single one.
    pub motion_levels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpcaOptions {
    /// `None` means `1/√max(n, p)`.
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub max_iters: Option<usize>,
    pub rel_tol: Option<f64>,
}

impl RpcaOptions {
    pub fn resolve(&self, n: usize, p: usize, default_max_iters: usize) -> RpcaConfig {
        RpcaConfig {
            lambda: self.lambda.unwrap_or_else(|| default_lambda(n, p)),
            mu: self.mu.unwrap_or(RpcaConfig::DEFAULT_MU),
            max_iters: self.max_iters.unwrap_or(default_max_iters),
            rel_tol: self.rel_tol.unwrap_or(RpcaConfig::DEFAULT_REL_TOL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NucdiffOptions {
    /// `gaussian`, `gaussian:<prior.json>`, `gmm:<prior.json>` or `weights:<file.ndw>`.
    pub model: Option<String>,
    pub gamma: f64,
    pub mu: f64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub total_steps: usize,
    pub background_step_size: Option<f64>,
    pub background_update: BackgroundUpdate,
    pub warm_start_fraction: f64,
    pub literal_indexing: bool,
    pub seed: u64,
    pub guidance_mode: GuidanceMode,
    pub guidance_step: GuidanceStep,
    /// `ddpm`, `fresh`, `ddim` or `ddim:<eta>`.
    pub renoise: String,
    pub rank_tol: f64,
}

impl Default for NucdiffOptions {
    fn default() -> Self {
        let d = NucDiffConfig::default();
        Self {
            model: None,
            gamma: d.gamma,
            mu: d.mu,
            steps: d.steps,
            schedule: d.schedule.kind,
            total_steps: d.schedule.total_steps,
            background_step_size: d.background_step_size,
            background_update: d.background_update,
            warm_start_fraction: d.warm_start_fraction,
            literal_indexing: d.literal_indexing,
            seed: d.seed,
            guidance_mode: d.guidance_mode,
            guidance_step: d.guidance_step,
            renoise: "ddpm".into(),
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl NucdiffOptions {
    pub fn resolve(&self) -> Result<NucDiffConfig> {
        let renoise: Renoise = self.renoise.parse()?;
        let cfg = NucDiffConfig {
            gamma: self.gamma,
            mu: self.mu,
            steps: self.steps,
            schedule: ScheduleSpec {
                kind: self.schedule,
                total_steps: self.total_steps,
            },
            background_step_size: self.background_step_size,
            background_update: self.background_update,
            warm_start_fraction: self.warm_start_fraction,
            literal_indexing: self.literal_indexing,
            seed: self.seed,
            guidance_mode: self.guidance_mode,
            guidance_step: self.guidance_step,
            renoise,
            rank_tol: self.rank_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rpca,
    Nucdiff,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rpca => "rpca",
            Method::Nucdiff => "nucdiff",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rpca" => Ok(Method::Rpca),
            "nucdiff" => Ok(Method::Nucdiff),
            other => Err(format!("unknown method {other:?} (rpca, nucdiff)")),
        }
    }
}

/// The baseline is compared at convergence, which takes a few thousand
/// iterations on 32×32×7 scenes.
pub const SWEEP_RPCA_MAX_ITERS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub scene: SynthSpec,
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    /// Number of equal-count inter-frame PSNR bins, capped at the level
    /// count; `None` uses one per level.
    pub psnr_bins: Option<usize>,
    pub psnr_peak: f64,
    pub gcnr_bins: usize,
    pub rpca: RpcaOptions,
    pub nucdiff: NucdiffOptions,
}

impl Default for SweepFile {
    fn default() -> Self {
        Self {
            scene: SynthSpec::default(),
            levels: vec![0.0, 0.04, 0.08, 0.12, 0.16, 0.2],
            methods: vec![Method::Rpca, Method::Nucdiff],
            psnr_bins: None,
            psnr_peak: 1.0,
            gcnr_bins: nucdiff_core::metrics::DEFAULT_GCNR_BINS,
            rpca: RpcaOptions::default(),
            nucdiff: NucdiffOptions::default(),
        }
    }
}
