//! Noise schedules, Tweedie denoising, ancestral re-noising and measurement
//! guidance for diffusion posterior sampling.
//!
//! A variance-preserving schedule corrupts `x₀` as `x_τ = α_τ x₀ + σ_τ ε` with
//! `α_τ² + σ_τ² = 1`. Samplers run on a respaced copy of the schedule: with
//! `steps` sampling steps over `𝒯` training steps, grid point `i` maps to
//! training step `round(i·𝒯/steps)`, and the reverse loop visits
//! `τ = steps, …, 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_matrix, seeded_rng, SamplerRng};
use crate::score_models::{predict_columns, ScoreModel};
use crate::tensors::{CasoratiMatrix, Frame};

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VpLinear,
    VpCosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vp-linear" | "linear" => Ok(ScheduleKind::VpLinear),
            "vp-cosine" | "cosine" => Ok(ScheduleKind::VpCosine),
            other => Err(Error::argument(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.total_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Betas of the linear schedule, scaled so that `𝒯 = 1000` gives the usual
/// `1e-4 … 0.02` range.
pub fn linear_betas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let (b0, b1) = (1e-4 * scale, 0.02 * scale);
    let denom = (steps.max(2) - 1) as f64;
    (1..=steps)
        .map(|t| (b0 + (b1 - b0) * (t - 1) as f64 / denom).min(MAX_BETA))
        .collect()
}

pub fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    (1..=steps)
        .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
        .collect()
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::argument("schedule needs at least one step"));
    }
    let betas = match kind {
        ScheduleKind::VpLinear => linear_betas(steps),
        ScheduleKind::VpCosine => cosine_betas(steps),
    };
    let mut alpha = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    let mut alpha_bar = 1.0f64;
    alpha.push(1.0);
    sigma.push(0.0);
    for b in betas {
        alpha_bar *= 1.0 - b;
        alpha.push(alpha_bar.sqrt());
        sigma.push((1.0 - alpha_bar).sqrt());
    }
    Ok(NoiseSchedule {
        total_steps: steps,
        alpha,
        sigma,
    })
}

impl NoiseSchedule {
    /// Builds a schedule from explicit coefficient tables.
    pub fn from_coefficients(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.len() != sigma.len() || alpha.len() < 2 {
            return Err(Error::argument(
                "alpha and sigma need equal length of at least 2",
            ));
        }
        if alpha[0] != 1.0 || sigma[0] != 0.0 {
            return Err(Error::argument("schedule must start at alpha=1, sigma=0"));
        }
        let ok = alpha.iter().all(|&a| a > 0.0 && a <= 1.0)
            && sigma.iter().all(|&s| s.is_finite() && s >= 0.0)
            && alpha.windows(2).all(|w| w[1] <= w[0])
            && sigma.windows(2).all(|w| w[1] >= w[0]);
        if !ok {
            return Err(Error::argument(
                "alpha must be non-increasing in (0, 1] and sigma non-decreasing",
            ));
        }
        Ok(Self {
            total_steps: alpha.len() - 1,
            alpha,
            sigma,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau]
    }

    pub fn sigma(&self, tau: usize) -> f64 {
        self.sigma[tau]
    }

    pub fn check_tau(&self, tau: usize) -> Result<()> {
        if tau > self.total_steps {
            Err(Error::argument(format!(
                "step {tau} outside schedule of {} steps",
                self.total_steps
            )))
        } else {
            Ok(())
        }
    }

    fn check_reverse_tau(&self, tau: usize) -> Result<()> {
        if tau == 0 {
            return Err(Error::argument("reverse steps need tau >= 1"));
        }
        self.check_tau(tau)
    }

    /// Training step of sampling grid point `i` for `steps` sampling steps.
    pub fn grid_point(&self, i: usize, steps: usize) -> usize {
        ((i as f64) * self.total_steps as f64 / steps as f64).round() as usize
    }

    /// Subsamples the schedule onto `steps` evenly spaced points.
    pub fn respace(&self, steps: usize) -> Result<NoiseSchedule> {
        if steps == 0 || steps > self.total_steps {
            return Err(Error::argument(format!(
                "cannot respace {} steps onto {steps}",
                self.total_steps
            )));
        }
        let idx: Vec<usize> = (0..=steps).map(|i| self.grid_point(i, steps)).collect();
        Ok(NoiseSchedule {
            total_steps: steps,
            alpha: idx.iter().map(|&t| self.alpha[t]).collect(),
            sigma: idx.iter().map(|&t| self.sigma[t]).collect(),
        })
    }
}

fn check_len(a: &Frame, b: &Frame, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{what}: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `α_τ x₀ + σ_τ ε`.
pub fn diffuse_forward(x0: &Frame, tau: usize, sched: &NoiseSchedule, noise: &Frame) -> Result<Frame> {
    sched.check_tau(tau)?;
    check_len(x0, noise, "diffuse_forward")?;
    let (a, s) = (sched.alpha(tau), sched.sigma(tau));
    x0.with_values(
        x0.values()
            .iter()
            .zip(noise.values())
            .map(|(&x, &e)| a * x + s * e)
            .collect(),
    )
}

/// Posterior mean `(x_τ − σ_τ ε̂)/α_τ`.
pub fn tweedie_denoise(
    x_tau: &Frame,
    tau: usize,
    sched: &NoiseSchedule,
    model: &dyn ScoreModel,
) -> Result<Frame> {
    sched.check_reverse_tau(tau)?;
    let eps = model
        .predict_noise(x_tau.values(), tau, sched)
        .map_err(|e| e.at_step(tau))?;
    let (a, s) = (sched.alpha(tau), sched.sigma(tau));
    x_tau.with_values(
        x_tau
            .values()
            .iter()
            .zip(&eps)
            .map(|(&x, &e)| (x - s * e) / a)
            .collect(),
    )
}

/// Coefficients used to move from step `τ` to the next iterate.
fn step_coefficients(tau: usize, sched: &NoiseSchedule, literal: bool) -> (f64, f64) {
    if literal {
        (sched.alpha(tau), sched.sigma(tau))
    } else {
        (sched.alpha(tau - 1), sched.sigma(tau - 1))
    }
}

/// `α_{τ−1} x̂₀ + σ_{τ−1} noise`, or `α_τ x̂₀ + σ_τ noise` in literal mode.
pub fn ancestral_step(
    x0_hat: &Frame,
    tau: usize,
    sched: &NoiseSchedule,
    noise: &Frame,
    literal_indexing: bool,
) -> Result<Frame> {
    sched.check_reverse_tau(tau)?;
    check_len(x0_hat, noise, "ancestral_step")?;
    let (a, s) = step_coefficients(tau, sched, literal_indexing);
    x0_hat.with_values(
        x0_hat
            .values()
            .iter()
            .zip(noise.values())
            .map(|(&x, &e)| a * x + s * e)
            .collect(),
    )
}

/// Direction `d` handed to the ancestral step, `X_{τ−1} = α_{τ−1} X̂₀ + σ_{τ−1} d`.
///
/// `Fresh` uses an independent standard normal draw. `Ddim` mixes the implied
/// noise `ε̂ = (x_τ − α_τ X̂₀)/σ_τ` with fresh noise at DDIM stochasticity
/// `eta`. `Ddpm` is the ancestral DDPM posterior with the large variance
/// `β_τ = 1 − α_τ²/α_{τ−1}²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Renoise {
    Fresh,
    Ddim { eta: f64 },
    Ddpm,
}

impl Default for Renoise {
    fn default() -> Self {
        Renoise::Ddpm
    }
}

impl std::str::FromStr for Renoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Renoise::Fresh),
            "ddpm" => Ok(Renoise::Ddpm),
            "ddim" => Ok(Renoise::Ddim { eta: 0.0 }),
            _ => match s.strip_prefix("ddim:").map(str::parse::<f64>) {
                Some(Ok(eta)) if (0.0..=1.0).contains(&eta) => Ok(Renoise::Ddim { eta }),
                _ => Err(Error::argument(format!(
                    "unknown re-noise rule {s:?} (fresh, ddpm, ddim, ddim:<eta>)"
                ))),
            },
        }
    }
}

impl Renoise {
    /// Weights `(w_eps, w_z)` with `d = w_eps·ε̂ + w_z·z`.
    pub fn weights(&self, tau: usize, sched: &NoiseSchedule) -> (f64, f64) {
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));
        let (ap, sp) = (sched.alpha(tau - 1), sched.sigma(tau - 1));
        if sp <= 0.0 {
            return (0.0, 0.0);
        }
        let beta = (1.0 - (a / ap).powi(2)).max(0.0);
        match *self {
            Renoise::Fresh => (0.0, 1.0),
            Renoise::Ddim { eta } => {
                let c = eta * sp / s * beta.sqrt();
                ((sp * sp - c * c).max(0.0).sqrt() / sp, c / sp)
            }
            Renoise::Ddpm => {
                let c = sp / s * beta.sqrt();
                ((sp * sp - c * c).max(0.0).sqrt() / sp, beta.sqrt() / sp)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Gradient with respect to the denoised estimate `X₀|τ`.
    DenoisedEstimate,
    /// Gradient pulled back through `∂X₀|τ/∂X_τ` and applied to the iterate.
    ChainRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceStep {
    /// Step `v/(1 + μv)` with `v = σ_τ²/α_τ²`, the weight that combines the
    /// Tweedie estimate with the `N(target, 1/μ)` likelihood.
    Precision,
    /// Unit step on `∇ℰ_τ`.
    Unit,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoised-estimate" | "denoised" => Ok(GuidanceMode::DenoisedEstimate),
            "chain-rule" => Ok(GuidanceMode::ChainRule),
            other => Err(Error::argument(format!(
                "unknown guidance mode {other:?} (denoised-estimate, chain-rule)"
            ))),
        }
    }
}

impl std::str::FromStr for GuidanceStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precision" => Ok(GuidanceStep::Precision),
            "unit" => Ok(GuidanceStep::Unit),
            other => Err(Error::argument(format!(
                "unknown guidance step {other:?} (precision, unit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mu: f64,
    pub mode: GuidanceMode,
    pub step: GuidanceStep,
}

impl GuidanceConfig {
    pub fn new(mu: f64) -> Self {
        Self {
            mu,
            mode: GuidanceMode::DenoisedEstimate,
            step: GuidanceStep::Precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_finite() && self.mu > 0.0 {
            Ok(())
        } else {
            Err(Error::argument(format!("mu must be positive, got {}", self.mu)))
        }
    }

    pub fn step_size(&self, tau: usize, sched: &NoiseSchedule) -> f64 {
        match self.step {
            GuidanceStep::Unit => 1.0,
            GuidanceStep::Precision => {
                let v = (sched.sigma(tau) / sched.alpha(tau)).powi(2);
                v / (1.0 + self.mu * v)
            }
        }
    }
}

/// `ℰ_τ = (μ/2)‖Y − L − X₀|τ‖²_F`.
pub fn measurement_error(
    y: &CasoratiMatrix,
    l: &CasoratiMatrix,
    x0_hat: &CasoratiMatrix,
    mu: f64,
) -> Result<f64> {
    y.check_same_shape(l, "measurement error (Y vs L)")?;
    y.check_same_shape(x0_hat, "measurement error (Y vs X0)")?;
    Ok(0.5 * mu * (y.values() - l.values() - x0_hat.values()).norm_squared())
}

/// `∇_X ℰ_τ = −μ(Y − L − X₀|τ)`.
pub fn guidance_gradient(
    y: &CasoratiMatrix,
    l: &CasoratiMatrix,
    x0_hat: &CasoratiMatrix,
    cfg: &GuidanceConfig,
) -> Result<CasoratiMatrix> {
    cfg.validate()?;
    y.check_same_shape(l, "guidance gradient (Y vs L)")?;
    y.check_same_shape(x0_hat, "guidance gradient (Y vs X0)")?;
    y.with_values((y.values() - l.values() - x0_hat.values()) * -cfg.mu)
}

/// Settings shared by every posterior sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub schedule: ScheduleSpec,
    pub steps: usize,
    pub warm_start_fraction: f64,
    pub literal_indexing: bool,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub renoise: Renoise,
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.steps == 0 {
            return Err(Error::argument("steps must be at least 1"));
        }
        if self.steps > self.schedule.total_steps {
            return Err(Error::argument(format!(
                "steps {} exceed schedule length {}",
                self.steps, self.schedule.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.warm_start_fraction) {
            return Err(Error::argument(format!(
                "warm start fraction {} outside [0, 1]",
                self.warm_start_fraction
            )));
        }
        if let Renoise::Ddim { eta } = self.renoise {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::argument(format!("ddim eta {eta} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// First reverse step on the respaced grid.
    pub fn start_step(&self) -> usize {
        if self.warm_start_fraction > 0.0 {
            ((self.warm_start_fraction * self.steps as f64).ceil() as usize).clamp(1, self.steps)
        } else {
            self.steps
        }
    }
}

/// Result of one reverse step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Grid index of the step just executed.
    pub tau: usize,
    /// Tweedie estimate before guidance.
    pub x0_prior: DMatrix<f64>,
    /// Denoised estimate after guidance (equal to `x0_prior` in chain-rule mode).
    pub x0: DMatrix<f64>,
    /// `ℰ_τ` at `x0_prior`, zero for unguided steps.
    pub measurement_error: f64,
}

/// Reverse-diffusion state shared by unconditional sampling, plain DPS and
/// the nuclear diffusion sampler.
#[derive(Debug, Clone)]
pub struct ReverseProcess {
    x: DMatrix<f64>,
    tau: usize,
    sched: NoiseSchedule,
    settings: SamplerSettings,
    rng: SamplerRng,
    last_x0: Option<DMatrix<f64>>,
}

impl ReverseProcess {
    /// Starts from `σ_T·N(0, I)`, or from `α_τ Y + σ_τ ε` at the warm-start step
    /// when `warm` is given and the warm-start fraction is positive.
    pub fn new(
        rows: usize,
        cols: usize,
        warm: Option<&DMatrix<f64>>,
        settings: SamplerSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let sched = settings.schedule.build()?.respace(settings.steps)?;
        let mut rng = seeded_rng(settings.seed);
        let tau = settings.start_step();
        let noise = normal_matrix(&mut rng, rows, cols);
        let x = match warm {
            Some(y) if settings.warm_start_fraction > 0.0 => {
                if y.shape() != (rows, cols) {
                    return Err(Error::shape("warm start matrix has the wrong shape"));
                }
                y * sched.alpha(tau) + noise * sched.sigma(tau)
            }
            _ => noise * sched.sigma(tau),
        };
        Ok(Self {
            x,
            tau,
            sched,
            settings,
            rng,
            last_x0: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.tau == 0
    }

    /// Grid index of the next step to execute (0 when finished).
    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn settings(&self) -> &SamplerSettings {
        &self.settings
    }

    /// Current iterate `X_τ`.
    pub fn state(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// The sample: `X₀` after the final step, or the final denoised estimate
    /// in literal indexing mode, where the last step does not land on `α = 1`.
    pub fn sample(&self) -> &DMatrix<f64> {
        match (&self.last_x0, self.settings.literal_indexing) {
            (Some(x0), true) => x0,
            _ => &self.x,
        }
    }

    /// One reverse step towards `target` (`None` for unconditional sampling).
    pub fn step(
        &mut self,
        model: &dyn ScoreModel,
        target: Option<&DMatrix<f64>>,
    ) -> Result<StepOutput> {
        let tau = self.tau;
        if tau == 0 {
            return Err(Error::argument("sampler already finished"));
        }
        let out = self.step_inner(model, target).map_err(|e| match e {
            Error::Numerical { step: None, msg } => Error::numerical(Some(tau), msg),
            Error::AtStep { .. } => e,
            other => other.at_step(tau),
        })?;
        Ok(out)
    }

    fn step_inner(
        &mut self,
        model: &dyn ScoreModel,
        target: Option<&DMatrix<f64>>,
    ) -> Result<StepOutput> {
        let tau = self.tau;
        let sched = &self.sched;
        let guidance = self.settings.guidance;
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));

        let eps = predict_columns(model, &self.x, tau, sched)?;
        let x0_prior = (&self.x - &eps * s) / a;

        let mut energy = 0.0;
        let mut grad = None;
        let mut x0 = x0_prior.clone();
        if let Some(target) = target {
            if target.shape() != self.x.shape() {
                return Err(Error::shape("guidance target has the wrong shape"));
            }
            let residual = target - &x0_prior;
            energy = 0.5 * guidance.mu * residual.norm_squared();
            let g = residual * -guidance.mu;
            if guidance.mode == GuidanceMode::DenoisedEstimate {
                x0 -= &g * guidance.step_size(tau, sched);
            }
            grad = Some(g);
        }

        let (w_eps, w_z) = self.settings.renoise.weights(tau, sched);
        let z = normal_matrix(&mut self.rng, self.x.nrows(), self.x.ncols());
        let eps_hat = (&self.x - &x0 * a) / s;
        let direction = eps_hat * w_eps + z * w_z;
        let (ca, cs) = step_coefficients(tau, sched, self.settings.literal_indexing);
        let mut next = &x0 * ca + direction * cs;

        if let (Some(g), GuidanceMode::ChainRule) = (&grad, guidance.mode) {
            // ∂X₀/∂X_τ = (I − σ ∂ε/∂x)/α, applied column by column.
            let zeta = guidance.step_size(tau, sched);
            for j in 0..next.ncols() {
                let xj: Vec<f64> = self.x.column(j).iter().copied().collect();
                let gj: Vec<f64> = g.column(j).iter().copied().collect();
                let jt = model
                    .jacobian_vector_transpose(&xj, tau, sched, &gj)
                    .map_err(|e| e.in_frame(j))?;
                for (i, (&gi, &ji)) in gj.iter().zip(&jt).enumerate() {
                    next[(i, j)] -= zeta * (gi - s * ji) / a;
                }
            }
        }

        if let Some(idx) = next.iter().chain(x0.iter()).position(|v| !v.is_finite()) {
            let n = next.nrows();
            return Err(Error::numerical(
                Some(tau),
                format!("non-finite iterate in frame {}", (idx % (n * next.ncols())) / n),
            ));
        }
        self.x = next;
        self.tau -= 1;
        self.last_x0 = Some(x0.clone());
        Ok(StepOutput {
            tau,
            x0_prior,
            x0,
            measurement_error: energy,
        })
    }
}

/// Diffusion posterior sampling for the identity forward model `Y = X + n`.
pub fn dps_sample(
    y: &CasoratiMatrix,
    model: &dyn ScoreModel,
    settings: &SamplerSettings,
) -> Result<CasoratiMatrix> {
    check_model_len(model, y.n())?;
    let mut process = ReverseProcess::new(y.n(), y.p(), Some(y.values()), *settings)?;
    while !process.is_done() {
        process.step(model, Some(y.values()))?;
    }
    y.with_values(process.sample().clone())
}

/// Unconditional ancestral sampling of `chains` independent frames.
pub fn sample_prior(
    model: &dyn ScoreModel,
    chains: usize,
    settings: &SamplerSettings,
) -> Result<DMatrix<f64>> {
    if chains == 0 {
        return Err(Error::argument("need at least one chain"));
    }
    let mut settings = *settings;
    settings.warm_start_fraction = 0.0;
    let mut process = ReverseProcess::new(model.frame_len(), chains, None, settings)?;
    while !process.is_done() {
        process.step(model, None)?;
    }
    Ok(process.sample().clone())
}

pub(crate) fn check_model_len(model: &dyn ScoreModel, n: usize) -> Result<()> {
    if model.frame_len() != n {
        return Err(Error::shape(format!(
            "model expects frames of {} pixels, data has {n}",
            model.frame_len()
        )));
    }
    Ok(())
}
