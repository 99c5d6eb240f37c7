use serde::Serialize;

use nucdiff_core::synth::{generate, motion_sweep, SynthInstance};
use nucdiff_core::tensors::Tensor;

use crate::args::SynthArgs;
use crate::config::{self, SynthFile};
use crate::error::Result;
use crate::manifest::{RunManifest, RunOutputs};
use crate::model_spec::PriorFile;

pub const OBSERVATION: &str = "y.ndt";
pub const TRUE_BACKGROUND: &str = "l_true.ndt";
pub const TRUE_FOREGROUND: &str = "x_true.ndt";
pub const VENTRICLE: &str = "ventricle.ndt";
pub const SEPTUM: &str = "septum.ndt";
pub const PRIOR: &str = "prior.json";
pub const SPEC: &str = "spec.json";

fn write_instance(outputs: &mut RunOutputs, prefix: &str, inst: &SynthInstance) -> Result<()> {
    let (h, w) = (inst.spec.frame_height, inst.spec.frame_width);
    outputs.write_tensor(&format!("{prefix}{OBSERVATION}"), &Tensor::from_casorati(&inst.y))?;
    outputs.write_tensor(&format!("{prefix}{TRUE_BACKGROUND}"), &Tensor::from_casorati(&inst.l_true))?;
    outputs.write_tensor(&format!("{prefix}{TRUE_FOREGROUND}"), &Tensor::from_casorati(&inst.x_true))?;
    outputs.write_tensor(&format!("{prefix}{VENTRICLE}"), &inst.ventricle.to_tensor(h, w)?)?;
    outputs.write_tensor(&format!("{prefix}{SEPTUM}"), &inst.septum.to_tensor(h, w)?)?;
    if let Some(prior) = &inst.prior {
        outputs.write_json(&format!("{prefix}{PRIOR}"), &PriorFile::from_synth(prior))?;
    }
    outputs.write_json(&format!("{prefix}{SPEC}"), &inst.spec)?;
    Ok(())
}

/// Subdirectory of motion level `index`.
pub fn level_dir(index: usize) -> String {
    format!("level_{index}")
}

#[derive(Serialize)]
struct Echo<'a> {
    #[serde(flatten)]
    file: &'a SynthFile,
}

pub fn run(args: &SynthArgs) -> Result<RunManifest> {
    let mut file: SynthFile = config::load(args.config.as_deref())?;
    args.scene.apply(&mut file.scene);
    if args.motion_levels.is_some() {
        file.motion_levels = args.motion_levels.clone();
    }
    file.scene.validate()?;

    let mut outputs = RunOutputs::create(&args.out)?;
    if let Some(c) = &args.config {
        outputs.record_input(c)?;
    }
    match &file.motion_levels {
        None => write_instance(&mut outputs, "", &generate(&file.scene)?)?,
        Some(levels) => {
            for (i, (_, inst)) in motion_sweep(&file.scene, levels)?.iter().enumerate() {
                write_instance(&mut outputs, &format!("{}/", level_dir(i)), inst)?;
            }
        }
    }
    outputs.finish("synth", &Echo { file: &file }, Some(file.scene.seed))
}
