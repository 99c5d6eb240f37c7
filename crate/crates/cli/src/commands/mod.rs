pub mod metrics;
pub mod nucdiff;
pub mod rpca;
pub mod sweep;
pub mod synth;

use std::path::Path;

use nucdiff_core::tensors::{read_casorati, read_tensor};
use nucdiff_core::{CasoratiMatrix, RoiLabel, RoiMask};

use crate::error::{CliError, Result};
use crate::manifest::RunOutputs;

/// Reads a frame-stack tensor and records it as a run input.
pub(crate) fn read_video(path: &Path, outputs: &mut RunOutputs) -> Result<CasoratiMatrix> {
    let m = read_casorati(path).map_err(|e| CliError::from(e).context(path.display()))?;
    outputs.record_input(path)?;
    Ok(m)
}

pub(crate) fn read_mask(path: &Path, label: RoiLabel, outputs: &mut RunOutputs) -> Result<RoiMask> {
    let t = read_tensor(path).map_err(|e| CliError::from(e).context(path.display()))?;
    let mask = RoiMask::from_tensor(&t, label).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    outputs.record_input(path)?;
    Ok(mask)
}

pub(crate) fn check_truth(y: &CasoratiMatrix, truth: &CasoratiMatrix, path: &Path) -> Result<()> {
    if y.same_shape(truth) {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{}: {}x{} does not match the input's {}x{}",
            path.display(),
            truth.n(),
            truth.p(),
            y.n(),
            y.p()
        )))
    }
}

pub(crate) fn relative_error(estimate: &CasoratiMatrix, truth: &CasoratiMatrix) -> f64 {
    let norm = truth.values().norm();
    let diff = (estimate.values() - truth.values()).norm();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

pub(crate) fn mse(estimate: &CasoratiMatrix, truth: &CasoratiMatrix) -> f64 {
    (estimate.values() - truth.values()).norm_squared() / truth.values().len() as f64
}
