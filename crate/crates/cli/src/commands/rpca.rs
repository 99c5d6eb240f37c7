use serde::Serialize;

use nucdiff_core::rpca::{rpca_solve, RpcaConfig};
use nucdiff_core::tensors::{read_casorati, Tensor};

use crate::args::RpcaArgs;
use crate::commands::{check_truth, mse, read_video, relative_error};
use crate::config::{self, RpcaOptions};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, RunOutputs};

#[derive(Debug, Serialize)]
struct TraceRow {
    iteration: usize,
    objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RpcaSummary {
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    pub l_rel_error: Option<f64>,
    pub x_rel_error: Option<f64>,
    pub x_mse: Option<f64>,
}

pub fn run(args: &RpcaArgs) -> Result<RunManifest> {
    let mut opts: RpcaOptions = config::load(args.config.as_deref())?;
    args.flags.apply(&mut opts);

    let mut outputs = RunOutputs::create(&args.out)?;
    if let Some(c) = &args.config {
        outputs.record_input(c)?;
    }
    let y = read_video(&args.input, &mut outputs)?;
    let cfg = opts.resolve(y.n(), y.p(), RpcaConfig::DEFAULT_MAX_ITERS);
    let d = rpca_solve(&y, &cfg)?;

    let mut summary = RpcaSummary {
        converged: d.converged,
        iterations: d.iterations,
        final_objective: *d.objective_trace.last().unwrap_or(&0.0),
        l_rel_error: None,
        x_rel_error: None,
        x_mse: None,
    };
    if let Some(path) = &args.truth_l {
        let l0 = read_casorati(path).map_err(|e| CliError::from(e).context(path.display()))?;
        check_truth(&y, &l0, path)?;
        outputs.record_input(path)?;
        summary.l_rel_error = Some(relative_error(&d.l, &l0));
    }
    if let Some(path) = &args.truth_x {
        let x0 = read_casorati(path).map_err(|e| CliError::from(e).context(path.display()))?;
        check_truth(&y, &x0, path)?;
        outputs.record_input(path)?;
        summary.x_rel_error = Some(relative_error(&d.x, &x0));
        summary.x_mse = Some(mse(&d.x, &x0));
    }

    outputs.write_tensor("l.ndt", &Tensor::from_casorati(&d.l))?;
    outputs.write_tensor("x.ndt", &Tensor::from_casorati(&d.x))?;
    let rows: Vec<TraceRow> = d
        .objective_trace
        .iter()
        .enumerate()
        .map(|(iteration, &objective)| TraceRow { iteration, objective })
        .collect();
    outputs.write_csv("objective.csv", &rows)?;
    outputs.write_json("summary.json", &summary)?;
    let manifest = outputs.finish("rpca", &cfg, None)?;
    if !d.converged {
        return Err(CliError::NotConverged(format!(
            "rpca did not converge within {} iterations (outputs written)",
            cfg.max_iters
        )));
    }
    Ok(manifest)
}
