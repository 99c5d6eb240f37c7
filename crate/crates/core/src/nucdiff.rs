//! Nuclear diffusion posterior sampling.
//!
//! Samples `(X, L)` from `p(X, L | Y) ∝ N(Y; L + X, μ⁻¹I) · exp(−γ‖L‖_*) · Π_t p_θ(xᵗ)`
//! by interleaving, at every reverse step `τ`:
//!
//! 1. per-frame noise prediction and Tweedie denoising of `X_τ`,
//! 2. guidance of `X₀|τ` towards `Y − L`,
//! 3. ancestral re-noising to `X_{τ−1}`,
//! 4. a background step on `ℰ_τ + γ‖L‖_*`, with `∇_L ℰ_τ = −μ(Y − L − X₀|τ)`
//!    evaluated at the guided estimate.
//!
//! Frames only interact through `L`; the foreground prior acts on each frame
//! independently.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    check_model_len, GuidanceConfig, GuidanceMode, GuidanceStep, NoiseSchedule, Renoise,
    ReverseProcess, SamplerSettings, ScheduleKind, ScheduleSpec,
};
use crate::error::{Error, Result};
use crate::proxops::{nuclear_subgradient_with_rank, svd, svt_with_rank, DEFAULT_RANK_TOL};
use crate::rpca::Decomposition;
use crate::score_models::{predict_columns, ScoreModel};
use crate::tensors::CasoratiMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundUpdate {
    /// `L − η_L(∇_L ℰ + γ·∂‖L‖_*)`.
    Subgradient,
    /// `svt(L − η_L ∇_L ℰ, η_L γ)`.
    Proximal,
}

impl std::str::FromStr for BackgroundUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subgradient" => Ok(BackgroundUpdate::Subgradient),
            "proximal" => Ok(BackgroundUpdate::Proximal),
            other => Err(Error::argument(format!("unknown background update {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NucDiffConfig {
    pub gamma: f64,
    pub mu: f64,
    pub steps: usize,
    pub schedule: ScheduleSpec,
    /// `η_L`; `None` means `1/μ`.
    pub background_step_size: Option<f64>,
    pub background_update: BackgroundUpdate,
    pub warm_start_fraction: f64,
    pub literal_indexing: bool,
    pub seed: u64,
    pub guidance_mode: GuidanceMode,
    pub guidance_step: GuidanceStep,
    pub renoise: Renoise,
    pub rank_tol: f64,
}

impl Default for NucDiffConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            mu: 2.0,
            steps: 500,
            schedule: ScheduleSpec {
                kind: ScheduleKind::VpCosine,
                total_steps: 5000,
            },
            background_step_size: None,
            background_update: BackgroundUpdate::Subgradient,
            warm_start_fraction: 0.0,
            literal_indexing: false,
            seed: 0,
            guidance_mode: GuidanceMode::DenoisedEstimate,
            guidance_step: GuidanceStep::Precision,
            renoise: Renoise::Ddpm,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl NucDiffConfig {
    pub fn eta_l(&self) -> f64 {
        self.background_step_size.unwrap_or(1.0 / self.mu)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("mu", self.mu), ("eta_L", self.eta_l())] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::argument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rank_tol.is_finite() && self.rank_tol >= 0.0) {
            return Err(Error::argument("rank_tol must be non-negative"));
        }
        self.sampler_settings().validate()
    }

    /// The settings of the foreground sampler, shared with plain DPS.
    pub fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            schedule: self.schedule,
            steps: self.steps,
            warm_start_fraction: self.warm_start_fraction,
            literal_indexing: self.literal_indexing,
            seed: self.seed,
            guidance: GuidanceConfig {
                mu: self.mu,
                mode: self.guidance_mode,
                step: self.guidance_step,
            },
            renoise: self.renoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based execution index.
    pub step: usize,
    /// Step on the respaced grid.
    pub tau: usize,
    /// `ℰ_τ = (μ/2)‖Y − L − X₀|τ‖²` before guidance.
    pub measurement_error: f64,
    /// `ℛ_τ = γ‖L‖_*` of the background entering the step.
    pub low_rank_penalty: f64,
    /// Rank of the background entering the step.
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub records: Vec<StepRecord>,
}

/// Noise predictions of every frame, stacked as columns.
pub fn stacked_score(
    frames_tau: &CasoratiMatrix,
    tau: usize,
    sched: &NoiseSchedule,
    model: &dyn ScoreModel,
) -> Result<CasoratiMatrix> {
    if tau == 0 {
        return Err(Error::argument("stacked_score needs tau >= 1"));
    }
    frames_tau.with_values(predict_columns(model, frames_tau.values(), tau, sched)?)
}

fn update_background(
    l: &DMatrix<f64>,
    residual_grad: &DMatrix<f64>,
    cfg: &NucDiffConfig,
) -> Result<DMatrix<f64>> {
    let eta = cfg.eta_l();
    match cfg.background_update {
        BackgroundUpdate::Subgradient => {
            let (g, _) = nuclear_subgradient_with_rank(l, cfg.rank_tol)?;
            Ok(l - (residual_grad + g * cfg.gamma) * eta)
        }
        BackgroundUpdate::Proximal => Ok(svt_with_rank(&(l - residual_grad * eta), eta * cfg.gamma)?.0),
    }
}

/// One background step on `ℰ_τ + γ‖L‖_*` given `∇_L ℰ_τ`.
pub fn background_update(
    l: &CasoratiMatrix,
    residual_grad: &CasoratiMatrix,
    cfg: &NucDiffConfig,
) -> Result<CasoratiMatrix> {
    cfg.validate()?;
    l.check_same_shape(residual_grad, "background update")?;
    l.with_values(update_background(l.values(), residual_grad.values(), cfg)?)
}

/// Step-by-step sampler; [`nuclear_diffusion_sample`] runs it to completion.
pub struct NucDiffSampler<'a> {
    y: &'a CasoratiMatrix,
    model: &'a dyn ScoreModel,
    cfg: NucDiffConfig,
    process: ReverseProcess,
    l: DMatrix<f64>,
    trace: SamplerTrace,
}

impl<'a> NucDiffSampler<'a> {
    pub fn new(y: &'a CasoratiMatrix, model: &'a dyn ScoreModel, cfg: &NucDiffConfig) -> Result<Self> {
        cfg.validate()?;
        check_model_len(model, y.n())?;
        if y.p() == 1 {
            log::warn!("nuclear diffusion on a single frame: the background is unidentifiable");
        }
        let process = ReverseProcess::new(y.n(), y.p(), Some(y.values()), cfg.sampler_settings())?;
        Ok(Self {
            y,
            model,
            cfg: *cfg,
            process,
            l: DMatrix::zeros(y.n(), y.p()),
            trace: SamplerTrace::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.process.is_done()
    }

    pub fn config(&self) -> &NucDiffConfig {
        &self.cfg
    }

    /// Current background estimate.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Current foreground iterate `X_τ`.
    pub fn x(&self) -> &DMatrix<f64> {
        self.process.state()
    }

    pub fn trace(&self) -> &SamplerTrace {
        &self.trace
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let tau = self.process.tau();
        let target = self.y.values() - &self.l;
        let out = self.process.step(self.model, Some(&target))?;

        let factors = svd(&self.l).map_err(|e| e.at_step(tau))?;
        let penalty = self.cfg.gamma * factors.s.sum();
        let rank = factors.rank(self.cfg.rank_tol);

        let grad = (target - &out.x0) * -self.cfg.mu;
        let next = update_background(&self.l, &grad, &self.cfg).map_err(|e| e.at_step(tau))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(Some(tau), "non-finite background iterate"));
        }
        self.l = next;

        let record = StepRecord {
            step: self.trace.records.len() + 1,
            tau,
            measurement_error: out.measurement_error,
            low_rank_penalty: penalty,
            rank,
        };
        self.trace.records.push(record);
        Ok(record)
    }

    pub fn run(mut self) -> Result<(Decomposition, SamplerTrace)> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }

    /// Current `(L, X)` split. `X` is the sample once all steps have run.
    pub fn finish(self) -> Result<(Decomposition, SamplerTrace)> {
        let objective_trace = self
            .trace
            .records
            .iter()
            .map(|r| r.measurement_error + r.low_rank_penalty)
            .collect();
        let decomposition = Decomposition {
            l: self.y.with_values(self.l)?,
            x: self.y.with_values(self.process.sample().clone())?,
            objective_trace,
            iterations: self.trace.records.len(),
            converged: self.process.is_done(),
        };
        Ok((decomposition, self.trace))
    }
}

pub fn nuclear_diffusion_sample(
    y: &CasoratiMatrix,
    model: &dyn ScoreModel,
    cfg: &NucDiffConfig,
) -> Result<(Decomposition, SamplerTrace)> {
    NucDiffSampler::new(y, model, cfg)?.run()
}
