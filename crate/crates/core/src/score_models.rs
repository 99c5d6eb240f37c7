//! Noise-prediction models `ε(x_τ, τ)`.
//!
//! Two analytic priors with exact scores (isotropic Gaussian and Gaussian
//! mixture) and a small multilayer perceptron read from an `NDW1` weight file:
//!
//! ```text
//! "NDW1" | u32 layer count
//!        | per layer: u32 in_dim | u32 out_dim | out×in f32 weights (row-major) | out f32 biases
//!        | u8 activation (0 = relu, 1 = silu)
//! ```
//!
//! All integers and floats are little-endian. A layer computes `W h + b`; the
//! activation is applied between layers, not after the last one. The network
//! input is the frame followed by one time channel holding `τ/𝒯`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::tensors::{read_tensor, Frame};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NDW1";

pub trait ScoreModel: Send + Sync {
    /// Pixels per frame.
    fn frame_len(&self) -> usize;

    fn predict_noise(&self, x_tau: &[f64], tau: usize, sched: &NoiseSchedule) -> Result<Vec<f64>>;

    fn supports_jvt(&self) -> bool {
        false
    }

    /// `(∂ε/∂x)ᵀ v` at `x_tau`.
    fn jacobian_vector_transpose(
        &self,
        _x_tau: &[f64],
        _tau: usize,
        _sched: &NoiseSchedule,
        _v: &[f64],
    ) -> Result<Vec<f64>> {
        Err(Error::argument(
            "this model does not provide Jacobian-vector products",
        ))
    }

    fn predict_noise_frame(&self, x_tau: &Frame, tau: usize, sched: &NoiseSchedule) -> Result<Frame> {
        x_tau.with_values(self.predict_noise(x_tau.values(), tau, sched)?)
    }
}

fn check_input(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "model expects {expected} pixels, got {got}"
        )))
    }
}

fn check_reverse_tau(tau: usize, sched: &NoiseSchedule) -> Result<()> {
    if tau == 0 || tau > sched.total_steps() {
        Err(Error::argument(format!(
            "noise prediction needs 1 <= tau <= {}, got {tau}",
            sched.total_steps()
        )))
    } else {
        Ok(())
    }
}

/// Applies `model` to every column of `x`.
pub fn predict_columns(
    model: &dyn ScoreModel,
    x: &DMatrix<f64>,
    tau: usize,
    sched: &NoiseSchedule,
) -> Result<DMatrix<f64>> {
    check_input(model.frame_len(), x.nrows())?;
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let eps = model
            .predict_noise(x.column(j).as_slice(), tau, sched)
            .map_err(|e| e.in_frame(j))?;
        out.column_mut(j).copy_from_slice(&eps);
    }
    Ok(out)
}

/// Prior `N(mean, stddev² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Frame,
    stddev: f64,
}

impl GaussianPrior {
    pub fn new(mean: Frame, stddev: f64) -> Result<Self> {
        if !(stddev.is_finite() && stddev > 0.0) {
            return Err(Error::argument(format!(
                "prior stddev must be positive, got {stddev}"
            )));
        }
        Ok(Self { mean, stddev })
    }

    pub fn mean(&self) -> &Frame {
        &self.mean
    }

    pub fn stddev(&self) -> f64 {
        self.stddev
    }

    /// Variance of the noisy marginal at step `tau`.
    fn marginal_var(&self, tau: usize, sched: &NoiseSchedule) -> f64 {
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));
        a * a * self.stddev * self.stddev + s * s
    }
}

impl ScoreModel for GaussianPrior {
    fn frame_len(&self) -> usize {
        self.mean.len()
    }

    fn predict_noise(&self, x: &[f64], tau: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        check_input(self.mean.len(), x.len())?;
        check_reverse_tau(tau, sched)?;
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));
        let scale = s / self.marginal_var(tau, sched);
        Ok(x.iter()
            .zip(self.mean.values())
            .map(|(&xi, &mi)| scale * (xi - a * mi))
            .collect())
    }

    fn supports_jvt(&self) -> bool {
        true
    }

    fn jacobian_vector_transpose(
        &self,
        x: &[f64],
        tau: usize,
        sched: &NoiseSchedule,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        check_input(self.mean.len(), x.len())?;
        check_input(self.mean.len(), v.len())?;
        check_reverse_tau(tau, sched)?;
        let scale = sched.sigma(tau) / self.marginal_var(tau, sched);
        Ok(v.iter().map(|&vi| scale * vi).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Frame,
    pub stddev: f64,
}

/// Mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
    log_weights: Vec<f64>,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::argument("a mixture needs at least one component"))?;
        let n = first.mean.len();
        for (k, c) in components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::argument(format!(
                    "component {k}: weight must be positive, got {}",
                    c.weight
                )));
            }
            if !(c.stddev.is_finite() && c.stddev > 0.0) {
                return Err(Error::argument(format!(
                    "component {k}: stddev must be positive, got {}",
                    c.stddev
                )));
            }
            if c.mean.len() != n {
                return Err(Error::shape(format!(
                    "component {k}: mean has {} pixels, expected {n}",
                    c.mean.len()
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::argument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            components,
            log_weights,
        })
    }

    /// Equal-weight mixture with a shared stddev.
    pub fn uniform(means: Vec<Frame>, stddev: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .map(|mean| GmmComponent {
                    weight: w,
                    mean,
                    stddev,
                })
                .collect(),
        )
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Responsibilities and per-component scores `g_k = −(x − α m_k)/v_k`.
    fn posterior_terms(
        &self,
        x: &[f64],
        tau: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_input(self.frame_len(), x.len())?;
        check_reverse_tau(tau, sched)?;
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));
        let n = x.len() as f64;
        let mut logp = Vec::with_capacity(self.components.len());
        let mut scores = Vec::with_capacity(self.components.len());
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            let v = a * a * c.stddev * c.stddev + s * s;
            let g: Vec<f64> = x
                .iter()
                .zip(c.mean.values())
                .map(|(&xi, &mi)| -(xi - a * mi) / v)
                .collect();
            let d2: f64 = g.iter().map(|gi| gi * gi).sum::<f64>() * v * v;
            logp.push(lw - 0.5 * n * v.ln() - 0.5 * d2 / v);
            scores.push(g);
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::numerical(
                None,
                "mixture responsibilities underflow for every component",
            ));
        }
        let mut r: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = r.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::numerical(None, "mixture responsibilities underflow"));
        }
        r.iter_mut().for_each(|ri| *ri /= total);
        Ok((r, scores))
    }
}

fn weighted_sum(r: &[f64], vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for (rk, v) in r.iter().zip(vs) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += rk * vi;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ScoreModel for GmmPrior {
    fn frame_len(&self) -> usize {
        self.components[0].mean.len()
    }

    fn predict_noise(&self, x: &[f64], tau: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let (r, g) = self.posterior_terms(x, tau, sched)?;
        let s = sched.sigma(tau);
        Ok(weighted_sum(&r, &g).into_iter().map(|v| -s * v).collect())
    }

    fn supports_jvt(&self) -> bool {
        true
    }

    fn jacobian_vector_transpose(
        &self,
        x: &[f64],
        tau: usize,
        sched: &NoiseSchedule,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        check_input(self.frame_len(), v.len())?;
        let (r, g) = self.posterior_terms(x, tau, sched)?;
        let (a, s) = (sched.alpha(tau), sched.sigma(tau));
        // Hessian of log p: Σ r_k(−I/v_k + g_k g_kᵀ) − ḡ ḡᵀ, symmetric.
        let gbar = weighted_sum(&r, &g);
        let gbar_v = dot(&gbar, v);
        let mut hv = vec![0.0; v.len()];
        for ((rk, gk), c) in r.iter().zip(&g).zip(&self.components) {
            let vk = a * a * c.stddev * c.stddev + s * s;
            let gk_v = dot(gk, v);
            for i in 0..v.len() {
                hv[i] += rk * (gk[i] * gk_v - v[i] / vk);
            }
        }
        Ok(hv
            .iter()
            .zip(&gbar)
            .map(|(h, gb)| -s * (h - gb * gbar_v))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }
}

/// Fully connected layer `W h + b` with `W` stored `out_dim × in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f32>,
    biases: Vec<f32>,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::shape(format!(
                "layer dims must be positive, got {in_dim}x{out_dim}"
            )));
        }
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(Error::shape(format!(
                "{in_dim}->{out_dim} layer needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weights.len(),
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::argument("non-finite weight"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    fn forward(&self, h: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.biases)
            .map(|(row, &b)| {
                row.iter().zip(h).map(|(&w, &x)| w as f64 * x).sum::<f64>() + b as f64
            })
            .collect()
    }

    /// `Wᵀ g`.
    fn backward(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, &gi) in self.weights.chunks_exact(self.in_dim).zip(g) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w as f64 * gi;
            }
        }
        out
    }
}

/// Small noise-prediction network with a `τ/𝒯` time channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    layers: Vec<DenseLayer>,
    activation: Activation,
}

impl MlpDenoiser {
    pub fn new(layers: Vec<DenseLayer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::shape("network needs at least one layer"))?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer {}: input dim {} does not match layer {i} output dim {}",
                    i + 1,
                    pair[1].in_dim,
                    pair[0].out_dim
                )));
            }
        }
        let last = layers.last().unwrap();
        if first.in_dim < 2 || last.out_dim != first.in_dim - 1 {
            return Err(Error::shape(format!(
                "layer {}: output dim {} must equal frame length {} (input dim minus the time channel)",
                layers.len() - 1,
                last.out_dim,
                first.in_dim.saturating_sub(1)
            )));
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    fn input(&self, x: &[f64], tau: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        check_input(self.frame_len(), x.len())?;
        if tau > sched.total_steps() {
            return Err(Error::argument(format!(
                "tau {tau} outside schedule of {} steps",
                sched.total_steps()
            )));
        }
        let mut h = Vec::with_capacity(x.len() + 1);
        h.extend_from_slice(x);
        h.push(tau as f64 / sched.total_steps() as f64);
        Ok(h)
    }

    /// Pre-activations of every layer.
    fn forward_trace(&self, input: Vec<f64>) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
            for v in l.weights.iter().chain(&l.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(self.activation.code());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"NDW1\"")));
        }
        let count = r.u32("layer count")? as usize;
        if count == 0 {
            return Err(Error::format(4, "weight file declares zero layers"));
        }
        let mut layers = Vec::with_capacity(count.min(1024));
        let mut prev_out: Option<usize> = None;
        for i in 0..count {
            let start = r.pos as u64;
            let in_dim = r.u32(&format!("layer {i} in_dim"))? as usize;
            let out_dim = r.u32(&format!("layer {i} out_dim"))? as usize;
            if in_dim == 0 || out_dim == 0 {
                return Err(Error::format(start, format!("layer {i}: zero dimension {in_dim}x{out_dim}")));
            }
            if let Some(p) = prev_out {
                if p != in_dim {
                    return Err(Error::format(
                        start,
                        format!("layer {i}: input dim {in_dim} does not match previous output dim {p}"),
                    ));
                }
            }
            let nw = in_dim
                .checked_mul(out_dim)
                .ok_or_else(|| Error::format(start, format!("layer {i}: dimension overflow")))?;
            let wpos = r.pos as u64;
            let weights = r.f32s(nw, &format!("layer {i} weights"))?;
            let biases = r.f32s(out_dim, &format!("layer {i} biases"))?;
            if let Some(k) = weights.iter().chain(&biases).position(|v| !v.is_finite()) {
                return Err(Error::format(
                    wpos + 4 * k as u64,
                    format!("layer {i}: non-finite parameter {k}"),
                ));
            }
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                weights,
                biases,
            });
            prev_out = Some(out_dim);
        }
        let apos = r.pos as u64;
        let code = r.take(1, "activation code")?[0];
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::format(apos, format!("unknown activation code {code}")))?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after activation code", bytes.len() - r.pos),
            ));
        }
        Self::new(layers, activation).map_err(|e| Error::format(apos, e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what}: size overflow")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<MlpDenoiser> {
    MlpDenoiser::decode(&fs::read(path)?)
}

pub fn save_weights(path: impl AsRef<Path>, model: &MlpDenoiser) -> Result<()> {
    fs::write(path, model.encode())?;
    Ok(())
}

impl ScoreModel for MlpDenoiser {
    fn frame_len(&self) -> usize {
        self.layers[0].in_dim - 1
    }

    fn predict_noise(&self, x: &[f64], tau: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let input = self.input(x, tau, sched)?;
        let out = self.forward_trace(input).pop().unwrap();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(None, "network produced a non-finite output"));
        }
        Ok(out)
    }

    fn supports_jvt(&self) -> bool {
        true
    }

    fn jacobian_vector_transpose(
        &self,
        x: &[f64],
        tau: usize,
        sched: &NoiseSchedule,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        check_input(self.frame_len(), v.len())?;
        let pre = self.forward_trace(self.input(x, tau, sched)?);
        let mut g = v.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (gj, &z) in g.iter_mut().zip(&pre[i]) {
                    *gj *= self.activation.derivative(z);
                }
            }
            g = self.layers[i].backward(&g);
        }
        g.pop();
        Ok(g)
    }
}

/// Cross-language forward-pass fixture: the model applied to the frame in
/// `input_path` at step `tau` of a `total_steps` schedule must reproduce
/// `expected_output_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub input_path: PathBuf,
    pub tau: usize,
    pub expected_output_path: PathBuf,
    #[serde(default = "default_fixture_steps")]
    pub total_steps: usize,
}

fn default_fixture_steps() -> usize {
    5000
}

impl GoldenFixture {
    /// Reads the JSON fixture; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut fixture: GoldenFixture = serde_json::from_str(&text).map_err(|e| {
            Error::format(0, format!("{}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        fixture.input_path = base.join(&fixture.input_path);
        fixture.expected_output_path = base.join(&fixture.expected_output_path);
        Ok(fixture)
    }

    /// Largest absolute deviation between the model and the expected output.
    pub fn max_abs_error(&self, model: &dyn ScoreModel) -> Result<f64> {
        let input = read_tensor(&self.input_path)?;
        let expected = read_tensor(&self.expected_output_path)?;
        let x: Vec<f64> = input.data.iter().map(|&v| v as f64).collect();
        if expected.data.len() != x.len() {
            return Err(Error::shape(format!(
                "fixture input has {} values, expected output {}",
                x.len(),
                expected.data.len()
            )));
        }
        let sched = make_schedule(ScheduleKind::VpCosine, self.total_steps)?;
        let out = model.predict_noise(&x, self.tau, &sched)?;
        Ok(out
            .iter()
            .zip(&expected.data)
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max))
    }
}
