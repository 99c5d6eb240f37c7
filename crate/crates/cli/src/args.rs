use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use nucdiff_core::diffusion::{GuidanceMode, GuidanceStep, ScheduleKind};
use nucdiff_core::nucdiff::BackgroundUpdate;
use nucdiff_core::synth::{ForegroundKind, SynthSpec};

use crate::config::{Method, NucdiffOptions, RpcaOptions};
use crate::model_spec::ModelSpec;

#[derive(Debug, Parser)]
#[command(name = "nucdiff", version, about = "Low-rank plus diffusion-prior video decomposition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic video (or one per motion level).
    Synth(SynthArgs),
    /// Robust PCA baseline.
    Rpca(RpcaArgs),
    /// Nuclear diffusion posterior sampling.
    Nucdiff(NucdiffArgs),
    /// gCNR and KS metrics of a denoised video.
    Metrics(MetricsArgs),
    /// Motion sweep comparing methods across inter-frame PSNR bins.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub background_amplitude: Option<f64>,
    /// sparse, gaussian or gmm-blobs.
    #[arg(long)]
    pub foreground: Option<ForegroundKind>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub texture_std: Option<f64>,
    #[arg(long)]
    pub sparse_density: Option<f64>,
    #[arg(long)]
    pub blob_shapes: Option<usize>,
    /// Per-frame blob displacement as a fraction of the frame width.
    #[arg(long)]
    pub motion: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scene_seed: Option<u64>,
}

impl SceneArgs {
    pub fn apply(&self, spec: &mut SynthSpec) {
        let fp = &mut spec.foreground_params;
        set(&mut spec.frame_height, self.height);
        set(&mut spec.frame_width, self.width);
        set(&mut spec.num_frames, self.frames);
        set(&mut spec.background_rank, self.rank);
        set(&mut spec.background_amplitude, self.background_amplitude);
        set(&mut spec.foreground_kind, self.foreground);
        set(&mut fp.amplitude, self.amplitude);
        set(&mut fp.texture_std, self.texture_std);
        set(&mut fp.sparse_density, self.sparse_density);
        set(&mut fp.blob_shapes, self.blob_shapes);
        set(&mut spec.motion_level, self.motion);
        set(&mut spec.observation_noise_std, self.noise_std);
        set(&mut spec.seed, self.seed);
        if self.scene_seed.is_some() {
            spec.scene_seed = self.scene_seed;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Comma-separated motion levels; writes one subdirectory per level.
    #[arg(long, value_delimiter = ',')]
    pub motion_levels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RpcaFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
}

impl RpcaFlags {
    pub fn apply(&self, o: &mut RpcaOptions) {
        o.lambda = self.lambda.or(o.lambda);
        o.mu = self.mu.or(o.mu);
        o.max_iters = self.max_iters.or(o.max_iters);
        o.rel_tol = self.rel_tol.or(o.rel_tol);
    }
}

#[derive(Debug, Clone, Args)]
pub struct RpcaArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Observation tensor (frames × height × width).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: RpcaFlags,
    /// Ground-truth background, for recovery errors in the summary.
    #[arg(long)]
    pub truth_l: Option<PathBuf>,
    /// Ground-truth foreground, for recovery errors in the summary.
    #[arg(long)]
    pub truth_x: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct NucdiffFlags {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// vp-linear or vp-cosine.
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub background_step_size: Option<f64>,
    /// subgradient or proximal.
    #[arg(long)]
    pub background_update: Option<BackgroundUpdate>,
    #[arg(long)]
    pub warm_start: Option<f64>,
    #[arg(long)]
    pub literal_indexing: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// denoised-estimate or chain-rule.
    #[arg(long)]
    pub guidance_mode: Option<GuidanceMode>,
    /// precision or unit.
    #[arg(long)]
    pub guidance_step: Option<GuidanceStep>,
    /// ddpm, fresh, ddim or ddim:<eta>.
    #[arg(long)]
    pub renoise: Option<String>,
}

impl NucdiffFlags {
    pub fn apply(&self, o: &mut NucdiffOptions) {
        set(&mut o.gamma, self.gamma);
        set(&mut o.mu, self.mu);
        set(&mut o.steps, self.steps);
        set(&mut o.schedule, self.schedule);
        set(&mut o.total_steps, self.total_steps);
        o.background_step_size = self.background_step_size.or(o.background_step_size);
        set(&mut o.background_update, self.background_update);
        set(&mut o.warm_start_fraction, self.warm_start);
        o.literal_indexing |= self.literal_indexing;
        set(&mut o.seed, self.seed);
        set(&mut o.guidance_mode, self.guidance_mode);
        set(&mut o.guidance_step, self.guidance_step);
        set(&mut o.renoise, self.renoise.clone());
    }
}

#[derive(Debug, Clone, Args)]
pub struct NucdiffArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// gaussian, gaussian:<prior.json>, gmm:<prior.json> or weights:<file.ndw>.
    #[arg(long)]
    pub model: Option<ModelSpec>,
    #[command(flatten)]
    pub flags: NucdiffFlags,
    #[arg(long)]
    pub truth_x: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub denoised: PathBuf,
    #[arg(long)]
    pub ventricle: PathBuf,
    #[arg(long)]
    pub septum: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = nucdiff_core::metrics::DEFAULT_GCNR_BINS)]
    pub bins: usize,
    /// Also write per-frame SVG plots.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub psnr_bins: Option<usize>,
    #[arg(long)]
    pub psnr_peak: Option<f64>,
    /// Baseline iteration cap.
    #[arg(long)]
    pub rpca_max_iters: Option<usize>,
    /// Data-fit weight shared by both methods.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}
