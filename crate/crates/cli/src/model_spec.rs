//! Foreground model selection: analytic priors stored as JSON, or MLP weights.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nucdiff_core::score_models::{load_weights, GaussianPrior, GmmComponent, GmmPrior, MlpDenoiser, ScoreModel};
use nucdiff_core::synth::SynthPrior;
use nucdiff_core::Frame;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFile {
    pub weight: f64,
    pub stddev: f64,
    pub mean: Vec<f64>,
}

/// On-disk form of an analytic prior; means are flattened frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorFile {
    Gaussian { stddev: f64, mean: Vec<f64> },
    Gmm { components: Vec<ComponentFile> },
}

impl PriorFile {
    pub fn from_synth(prior: &SynthPrior) -> Self {
        match prior {
            SynthPrior::Gaussian(g) => PriorFile::Gaussian {
                stddev: g.stddev(),
                mean: g.mean().values().to_vec(),
            },
            SynthPrior::Gmm(g) => PriorFile::Gmm {
                components: g
                    .components()
                    .iter()
                    .map(|c| ComponentFile {
                        weight: c.weight,
                        stddev: c.stddev,
                        mean: c.mean.values().to_vec(),
                    })
                    .collect(),
            },
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Builds the prior; invalid parameters count as malformed input.
    pub fn build(&self) -> Result<Model> {
        self.build_inner().map_err(|e| CliError::Input(e.to_string()))
    }

    fn build_inner(&self) -> nucdiff_core::Result<Model> {
        match self {
            PriorFile::Gaussian { stddev, mean } => Ok(Model::Gaussian(GaussianPrior::new(
                Frame::from_vec(mean.clone())?,
                *stddev,
            )?)),
            PriorFile::Gmm { components } => {
                let comps = components
                    .iter()
                    .map(|c| {
                        Ok(GmmComponent {
                            weight: c.weight,
                            mean: Frame::from_vec(c.mean.clone())?,
                            stddev: c.stddev,
                        })
                    })
                    .collect::<nucdiff_core::Result<Vec<_>>>()?;
                Ok(Model::Gmm(GmmPrior::new(comps)?))
            }
        }
    }
}

pub enum Model {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Mlp(MlpDenoiser),
}

impl Model {
    pub fn as_score(&self) -> &dyn ScoreModel {
        match self {
            Model::Gaussian(m) => m,
            Model::Gmm(m) => m,
            Model::Mlp(m) => m,
        }
    }
}

/// Parsed `--model` argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    /// Zero-mean, unit-variance Gaussian over frames of the input's size.
    StandardGaussian,
    Gaussian(PathBuf),
    Gmm(PathBuf),
    Weights(PathBuf),
}

impl std::str::FromStr for ModelSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gaussian" {
            return Ok(ModelSpec::StandardGaussian);
        }
        let (kind, path) = s.split_once(':').ok_or_else(|| {
            CliError::Usage(format!(
                "bad model {s:?}: expected gaussian, gaussian:<json>, gmm:<json> or weights:<ndw>"
            ))
        })?;
        let path = PathBuf::from(path);
        match kind {
            "gaussian" => Ok(ModelSpec::Gaussian(path)),
            "gmm" => Ok(ModelSpec::Gmm(path)),
            "weights" => Ok(ModelSpec::Weights(path)),
            other => Err(CliError::Usage(format!("unknown model kind {other:?}"))),
        }
    }
}

impl ModelSpec {
    pub fn path(&self) -> Option<&Path> {
        match self {
            ModelSpec::StandardGaussian => None,
            ModelSpec::Gaussian(p) | ModelSpec::Gmm(p) | ModelSpec::Weights(p) => Some(p),
        }
    }

    /// Loads the model; `frame_len` sizes the standard Gaussian.
    pub fn load(&self, frame_len: usize) -> Result<Model> {
        let model = match self {
            ModelSpec::StandardGaussian => {
                Model::Gaussian(GaussianPrior::new(Frame::from_vec(vec![0.0; frame_len])?, 1.0)?)
            }
            ModelSpec::Weights(p) => {
                Model::Mlp(load_weights(p).map_err(|e| CliError::from(e).context(p.display()))?)
            }
            ModelSpec::Gaussian(p) | ModelSpec::Gmm(p) => {
                let file = PriorFile::read(p)?;
                let matches = matches!(
                    (self, &file),
                    (ModelSpec::Gaussian(_), PriorFile::Gaussian { .. }) | (ModelSpec::Gmm(_), PriorFile::Gmm { .. })
                );
                if !matches {
                    return Err(CliError::Input(format!(
                        "{}: prior kind does not match the requested model",
                        p.display()
                    )));
                }
                file.build().map_err(|e| e.context(p.display()))?
            }
        };
        let len = model.as_score().frame_len();
        if len != frame_len {
            return Err(CliError::Input(format!(
                "model expects frames of {len} pixels, input has {frame_len}"
            )));
        }
        Ok(model)
    }
}
