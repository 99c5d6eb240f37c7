use serde::Serialize;

use nucdiff_core::nucdiff::{nuclear_diffusion_sample, NucDiffConfig};
use nucdiff_core::proxops::svd;
use nucdiff_core::tensors::{read_casorati, Tensor};

use crate::args::NucdiffArgs;
use crate::commands::{check_truth, mse, read_video, relative_error};
use crate::config::{self, NucdiffOptions};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, RunOutputs};
use crate::model_spec::ModelSpec;

#[derive(Debug, Serialize)]
struct TraceRow {
    step: usize,
    tau: usize,
    measurement_error: f64,
    low_rank_penalty: f64,
    rank: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NucdiffSummary {
    pub steps: usize,
    pub final_measurement_error: f64,
    pub final_rank: usize,
    pub x_rel_error: Option<f64>,
    pub x_mse: Option<f64>,
}

#[derive(Serialize)]
struct Echo<'a> {
    model: String,
    config: &'a NucDiffConfig,
}

pub fn run(args: &NucdiffArgs) -> Result<RunManifest> {
    let mut opts: NucdiffOptions = config::load(args.config.as_deref())?;
    args.flags.apply(&mut opts);
    let spec: ModelSpec = match (&args.model, &opts.model) {
        (Some(m), _) => m.clone(),
        (None, Some(s)) => s.parse()?,
        (None, None) => return Err(CliError::Usage("no model given (--model)".into())),
    };
    let cfg = opts.resolve()?;

    let mut outputs = RunOutputs::create(&args.out)?;
    if let Some(c) = &args.config {
        outputs.record_input(c)?;
    }
    let y = read_video(&args.input, &mut outputs)?;
    let model = spec.load(y.n())?;
    if let Some(p) = spec.path() {
        outputs.record_input(p)?;
    }

    let (d, trace) = nuclear_diffusion_sample(&y, model.as_score(), &cfg)?;

    let final_rank = svd(d.l.values())?.rank(cfg.rank_tol);
    let mut summary = NucdiffSummary {
        steps: trace.records.len(),
        final_measurement_error: trace.records.last().map_or(0.0, |r| r.measurement_error),
        final_rank,
        x_rel_error: None,
        x_mse: None,
    };
    if let Some(path) = &args.truth_x {
        let x0 = read_casorati(path).map_err(|e| CliError::from(e).context(path.display()))?;
        check_truth(&y, &x0, path)?;
        outputs.record_input(path)?;
        summary.x_rel_error = Some(relative_error(&d.x, &x0));
        summary.x_mse = Some(mse(&d.x, &x0));
    }

    outputs.write_tensor("l.ndt", &Tensor::from_casorati(&d.l))?;
    outputs.write_tensor("x.ndt", &Tensor::from_casorati(&d.x))?;
    let rows: Vec<TraceRow> = trace
        .records
        .iter()
        .map(|r| TraceRow {
            step: r.step,
            tau: r.tau,
            measurement_error: r.measurement_error,
            low_rank_penalty: r.low_rank_penalty,
            rank: r.rank,
        })
        .collect();
    outputs.write_csv("trace.csv", &rows)?;
    outputs.write_json("summary.json", &summary)?;
    let echo = Echo {
        model: format!("{spec:?}"),
        config: &cfg,
    };
    outputs.finish("nucdiff", &echo, Some(cfg.seed))
}
