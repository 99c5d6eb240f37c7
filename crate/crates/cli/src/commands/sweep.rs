use rayon::prelude::*;
use serde::Serialize;

use nucdiff_core::metrics::mean_interframe_psnr;
use nucdiff_core::nucdiff::nuclear_diffusion_sample;
use nucdiff_core::rpca::rpca_solve;
use nucdiff_core::score_models::ScoreModel;
use nucdiff_core::synth::{motion_sweep, sweep_seed, SynthInstance, SynthPrior};
use nucdiff_core::CasoratiMatrix;

use crate::args::SweepArgs;
use crate::commands::metrics::{frame_metrics, mean_metrics};
use crate::commands::mse;
use crate::config::{self, Method, SweepFile, SWEEP_RPCA_MAX_ITERS};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, RunOutputs};
use crate::model_spec::ModelSpec;
use crate::plot::{LinePlot, Series};

pub const THREADS_ENV: &str = "NUCDIFF_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub level_index: usize,
    pub motion_level: f64,
    pub seed: u64,
    pub psnr: f64,
    pub bin: usize,
    pub method: &'static str,
    /// `ok`, `not-converged` or `failed`.
    pub status: &'static str,
    pub ks_septum: Option<f64>,
    pub gcnr: Option<f64>,
    pub x_mse: Option<f64>,
    pub iterations: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub bin: usize,
    pub psnr_lo: f64,
    pub psnr_hi: f64,
    pub method: &'static str,
    pub runs: usize,
    pub mean_ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub bins: Vec<BinRow>,
}

impl SweepReport {
    pub fn mean_ks(&self, bin: usize, method: Method) -> Option<f64> {
        self.bins
            .iter()
            .find(|b| b.bin == bin && b.method == method.name())
            .and_then(|b| b.mean_ks)
    }
}

struct RunResult {
    x: CasoratiMatrix,
    iterations: usize,
    converged: bool,
}

fn run_method(
    method: Method,
    index: usize,
    inst: &SynthInstance,
    file: &SweepFile,
    loaded: Option<&dyn ScoreModel>,
) -> Result<RunResult> {
    match method {
        Method::Rpca => {
            let cfg = file.rpca.resolve(inst.y.n(), inst.y.p(), SWEEP_RPCA_MAX_ITERS);
            let d = rpca_solve(&inst.y, &cfg)?;
            Ok(RunResult { x: d.x, iterations: d.iterations, converged: d.converged })
        }
        Method::Nucdiff => {
            let mut cfg = file.nucdiff.resolve()?;
            cfg.seed = sweep_seed(cfg.seed, index);
            let model: &dyn ScoreModel = match (loaded, &inst.prior) {
                (Some(m), _) => m,
                (None, Some(SynthPrior::Gmm(g))) => g,
                (None, Some(SynthPrior::Gaussian(g))) => g,
                (None, None) => {
                    return Err(CliError::Usage(
                        "sparse scenes have no analytic prior; set nucdiff.model".into(),
                    ))
                }
            };
            let (d, _) = nuclear_diffusion_sample(&inst.y, model, &cfg)?;
            Ok(RunResult { x: d.x, iterations: d.iterations, converged: true })
        }
    }
}

/// Equal-count bins over levels ordered by PSNR, so no bin is empty.
/// Returns the bin of each level and the PSNR range of each bin.
fn assign_bins(psnr: &[f64], bins: usize) -> (Vec<usize>, Vec<(f64, f64)>) {
    let nb = bins.min(psnr.len());
    let mut order: Vec<usize> = (0..psnr.len()).collect();
    order.sort_by(|&a, &b| psnr[a].total_cmp(&psnr[b]));
    let mut bin_of = vec![0; psnr.len()];
    let mut edges = vec![(f64::INFINITY, f64::NEG_INFINITY); nb];
    for (rank, &i) in order.iter().enumerate() {
        let b = rank * nb / psnr.len();
        bin_of[i] = b;
        edges[b] = (edges[b].0.min(psnr[i]), edges[b].1.max(psnr[i]));
    }
    (bin_of, edges)
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

/// Reads the thread cap from the environment; unset or empty means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every method on every level. Returns the first failure only when no
/// sub-run succeeded.
pub fn run_sweep(file: &SweepFile, threads: Option<usize>) -> Result<SweepReport> {
    if file.levels.is_empty() || file.methods.is_empty() {
        return Err(CliError::Usage("sweep needs at least one level and one method".into()));
    }
    let nbins = file.psnr_bins.unwrap_or(file.levels.len());
    if nbins == 0 {
        return Err(CliError::Usage("psnr_bins must be at least 1".into()));
    }
    file.scene.validate()?;
    file.nucdiff.resolve()?;
    let loaded = match &file.nucdiff.model {
        Some(s) if file.methods.contains(&Method::Nucdiff) => Some(s.parse::<ModelSpec>()?.load(file.scene.n())?),
        _ => None,
    };

    let instances = motion_sweep(&file.scene, &file.levels)?;
    let psnr = instances
        .iter()
        .map(|(_, inst)| mean_interframe_psnr(&inst.y, file.psnr_peak))
        .collect::<nucdiff_core::Result<Vec<_>>>()?;
    let (bin_of, edges) = assign_bins(&psnr, nbins);

    let tasks: Vec<(usize, Method)> = (0..instances.len())
        .flat_map(|i| file.methods.iter().map(move |&m| (i, m)))
        .collect();
    let results: Vec<Result<RunResult>> = thread_pool(threads)?.install(|| {
        tasks
            .par_iter()
            .map(|&(i, m)| run_method(m, i, &instances[i].1, file, loaded.as_ref().map(|l| l.as_score())))
            .collect()
    });

    let mut rows = Vec::with_capacity(tasks.len());
    let mut first_error = None;
    let mut any_ok = false;
    for (&(i, method), result) in tasks.iter().zip(results) {
        let (level, inst) = &instances[i];
        let mut row = SweepRow {
            level_index: i,
            motion_level: *level,
            seed: inst.spec.seed,
            psnr: psnr[i],
            bin: bin_of[i],
            method: method.name(),
            status: "failed",
            ks_septum: None,
            gcnr: None,
            x_mse: None,
            iterations: None,
            message: String::new(),
        };
        let scored = result.and_then(|r| {
            let m = mean_metrics(&frame_metrics(&inst.y, &r.x, &inst.ventricle, &inst.septum, file.gcnr_bins)?);
            Ok((r, m))
        });
        match scored {
            Ok((r, m)) => {
                any_ok = true;
                row.status = if r.converged { "ok" } else { "not-converged" };
                row.ks_septum = Some(m.ks);
                row.gcnr = Some(m.gcnr);
                row.x_mse = Some(mse(&r.x, &inst.x_true));
                row.iterations = Some(r.iterations);
            }
            Err(e) => {
                log::warn!("level {i} ({}) failed: {e}", method.name());
                row.message = e.to_string();
                first_error.get_or_insert(e);
            }
        }
        rows.push(row);
    }
    if !any_ok {
        return Err(first_error.expect("failed sweep has an error").context("every sweep run failed"));
    }

    let mut bins = Vec::new();
    for (b, &(psnr_lo, psnr_hi)) in edges.iter().enumerate() {
        for &method in &file.methods {
            let ks: Vec<f64> = rows
                .iter()
                .filter(|r| r.bin == b && r.method == method.name())
                .filter_map(|r| r.ks_septum)
                .collect();
            bins.push(BinRow {
                bin: b,
                psnr_lo,
                psnr_hi,
                method: method.name(),
                runs: ks.len(),
                mean_ks: (!ks.is_empty()).then(|| ks.iter().sum::<f64>() / ks.len() as f64),
            });
        }
    }
    Ok(SweepReport { rows, bins })
}

pub fn plot(report: &SweepReport, methods: &[Method]) -> LinePlot {
    let series = methods
        .iter()
        .map(|&m| Series {
            name: m.name().into(),
            points: report
                .bins
                .iter()
                .filter(|b| b.method == m.name())
                .filter_map(|b| b.mean_ks.map(|ks| (0.5 * (b.psnr_lo + b.psnr_hi), ks)))
                .collect(),
        })
        .collect();
    LinePlot {
        title: "Septum KS against inter-frame PSNR".into(),
        x_label: "inter-frame PSNR bin centre (dB)".into(),
        y_label: "KS(septum, original vs denoised)".into(),
        series,
    }
}

pub fn run(args: &SweepArgs) -> Result<RunManifest> {
    let mut file: SweepFile = config::load(args.config.as_deref())?;
    args.scene.apply(&mut file.scene);
    if let Some(l) = &args.levels {
        file.levels = l.clone();
    }
    if let Some(m) = &args.methods {
        file.methods = m.clone();
    }
    file.psnr_bins = args.psnr_bins.or(file.psnr_bins);
    if let Some(p) = args.psnr_peak {
        file.psnr_peak = p;
    }
    file.rpca.max_iters = args.rpca_max_iters.or(file.rpca.max_iters);
    if let Some(mu) = args.mu {
        file.rpca.mu = Some(mu);
        file.nucdiff.mu = mu;
    }
    if let Some(g) = args.gamma {
        file.nucdiff.gamma = g;
    }
    if let Some(s) = args.steps {
        file.nucdiff.steps = s;
    }
    if !(file.psnr_peak.is_finite() && file.psnr_peak > 0.0) {
        return Err(CliError::Usage(format!("psnr_peak must be positive, got {}", file.psnr_peak)));
    }

    let mut outputs = RunOutputs::create(&args.out)?;
    if let Some(c) = &args.config {
        outputs.record_input(c)?;
    }
    let report = run_sweep(&file, threads_from_env()?)?;
    outputs.write_csv("sweep.csv", &report.rows)?;
    outputs.write_csv("sweep_bins.csv", &report.bins)?;
    outputs.write("ks_vs_psnr.svg", plot(&report, &file.methods).render().as_bytes())?;
    outputs.finish("sweep", &file, Some(file.scene.seed))
}
