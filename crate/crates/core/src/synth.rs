//! Planted synthetic videos `Y = L + X + σε`.
//!
//! The background `L` is an exact rank-`r` haze: non-negative smooth spatial
//! factors concentrated over the lower (cavity) rows, with slowly drifting
//! temporal factors. The foreground is one of
//!
//! * `GmmBlobs`: a smooth elliptical blob translating horizontally by
//!   `motion_level · width` pixels per frame (wrapping around), plus Gaussian
//!   texture. Every frame is a draw from a Gaussian mixture with one component
//!   per trajectory position, which is returned as the matching prior.
//! * `Gaussian`: per-frame draws from `N(m, s²I)` around a static blob.
//! * `Sparse`: a Bernoulli support with positive amplitudes, translated like
//!   the blob.
//!
//! The septum ROI `Ω_S` covers the foreground of frame 0; the ventricle ROI
//! `Ω_V` is a fixed window in the lower half of the frame outside `Ω_S`.
//!
//! Scene geometry (haze factors, blob shapes) is drawn from `scene_seed`,
//! per-sample noise from `seed`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_models::{GaussianPrior, GmmPrior};
use crate::tensors::{CasoratiMatrix, Frame, RoiLabel, RoiMask};

const SCENE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const SWEEP_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForegroundKind {
    Sparse,
    Gaussian,
    GmmBlobs,
}

impl std::str::FromStr for ForegroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(ForegroundKind::Sparse),
            "gaussian" => Ok(ForegroundKind::Gaussian),
            "gmm-blobs" | "gmm" => Ok(ForegroundKind::GmmBlobs),
            other => Err(Error::argument(format!("unknown foreground kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForegroundParams {
    /// Peak blob intensity; sparse amplitudes are drawn around it.
    pub amplitude: f64,
    /// Per-pixel texture stddev, also the stddev of the matching prior.
    pub texture_std: f64,
    /// Bernoulli rate of the sparse support.
    pub sparse_density: f64,
    /// Candidate blob shapes; the video uses one, the prior covers all.
    pub blob_shapes: usize,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        Self {
            amplitude: 4.0,
            texture_std: 0.2,
            sparse_density: 0.05,
            blob_shapes: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub frame_height: usize,
    pub frame_width: usize,
    pub num_frames: usize,
    pub background_rank: usize,
    pub background_amplitude: f64,
    pub foreground_kind: ForegroundKind,
    pub foreground_params: ForegroundParams,
    pub motion_level: f64,
    pub observation_noise_std: f64,
    pub seed: u64,
    /// Seed of the scene geometry; `None` uses `seed`.
    pub scene_seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frame_height: 32,
            frame_width: 32,
            num_frames: 7,
            background_rank: 2,
            background_amplitude: 1.0,
            foreground_kind: ForegroundKind::GmmBlobs,
            foreground_params: ForegroundParams::default(),
            motion_level: 0.1,
            observation_noise_std: 0.1,
            seed: 0,
            scene_seed: None,
        }
    }
}

impl SynthSpec {
    pub fn n(&self) -> usize {
        self.frame_height * self.frame_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_height == 0 || self.frame_width == 0 || self.num_frames == 0 {
            return Err(Error::argument("frame size and frame count must be positive"));
        }
        if self.background_rank > self.n().min(self.num_frames) {
            return Err(Error::argument(format!(
                "background rank {} exceeds min(n, p) = {}",
                self.background_rank,
                self.n().min(self.num_frames)
            )));
        }
        if !(0.0..=1.0).contains(&self.motion_level) {
            return Err(Error::argument(format!(
                "motion level {} outside [0, 1]",
                self.motion_level
            )));
        }
        let fp = &self.foreground_params;
        let non_negative = [
            ("observation noise std", self.observation_noise_std),
            ("background amplitude", self.background_amplitude),
            ("foreground amplitude", fp.amplitude),
            ("texture std", fp.texture_std),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::argument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&fp.sparse_density) {
            return Err(Error::argument(format!(
                "sparse density {} outside [0, 1]",
                fp.sparse_density
            )));
        }
        if fp.blob_shapes == 0 {
            return Err(Error::argument("blob_shapes must be at least 1"));
        }
        if self.foreground_kind != ForegroundKind::Sparse && fp.texture_std <= 0.0 {
            return Err(Error::argument(
                "texture std must be positive for prior-driven foregrounds",
            ));
        }
        Ok(())
    }
}

/// The analytic prior matching a generated foreground.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthPrior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub spec: SynthSpec,
    pub y: CasoratiMatrix,
    pub l_true: CasoratiMatrix,
    pub x_true: CasoratiMatrix,
    pub ventricle: RoiMask,
    pub septum: RoiMask,
    pub prior: Option<SynthPrior>,
}

#[derive(Debug, Clone, Copy)]
struct BlobShape {
    rx: f64,
    ry: f64,
    amplitude: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth elliptical bump centered at `(cx, cy)` on a torus.
fn blob(h: usize, w: usize, cx: f64, cy: f64, shape: BlobShape) -> Vec<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let dx = (col as f64 - cx + wf / 2.0).rem_euclid(wf) - wf / 2.0;
            let dy = (row as f64 - cy + hf / 2.0).rem_euclid(hf) - hf / 2.0;
            let rho = ((dx / shape.rx).powi(2) + (dy / shape.ry).powi(2)).sqrt();
            out.push(shape.amplitude / (1.0 + (4.0 * (rho - 1.0)).exp()));
        }
    }
    out
}

/// Rank-`r` non-negative haze.
fn haze(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (h, w, p) = (spec.frame_height, spec.frame_width, spec.num_frames);
    let n = h * w;
    let scale = spec.background_amplitude * ((n * p) as f64).sqrt();
    let mut l = DMatrix::zeros(n, p);
    let tau = std::f64::consts::TAU;
    for i in 0..spec.background_rank {
        let terms: Vec<(f64, f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let fx = rng.random_range(0..3) as f64;
                let fy = rng.random_range(0..3) as f64;
                let px = rng.random_range(0.0..tau);
                let py = rng.random_range(0.0..tau);
                let c = rng.random_range(-0.25..0.25);
                (fx, fy, px, py, c)
            })
            .collect();
        let mut u = DVector::zeros(n);
        for row in 0..h {
            let y = row as f64 / h as f64;
            let envelope = 0.15 + 0.85 * sigmoid((y - 0.6) / 0.06);
            for col in 0..w {
                let x = col as f64 / h as f64;
                let texture: f64 = terms
                    .iter()
                    .map(|&(fx, fy, px, py, c)| {
                        c * (std::f64::consts::PI * fx * x + px).cos()
                            * (std::f64::consts::PI * fy * y + py).cos()
                    })
                    .sum();
                u[row * w + col] = envelope * (1.0 + texture);
            }
        }
        u /= u.norm();
        let offset = rng.random_range(0.5..1.0);
        let freq = rng.random_range(0.2..0.6);
        let phase = rng.random_range(0.0..tau);
        let mut v = DVector::from_fn(p, |t, _| {
            offset + 0.3 * (tau * freq * t as f64 / p as f64 + phase).sin()
        });
        v /= v.norm();
        l += (&u * v.transpose()) * (scale * 0.5f64.powi(i as i32));
    }
    l
}

fn draw_shapes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<BlobShape> {
    let (sx, sy) = (spec.frame_width as f64 / 32.0, spec.frame_height as f64 / 32.0);
    let a = spec.foreground_params.amplitude;
    (0..spec.foreground_params.blob_shapes)
        .map(|_| BlobShape {
            rx: rng.random_range(6.0..9.0) * sx,
            ry: rng.random_range(3.5..5.0) * sy,
            amplitude: rng.random_range(0.75..1.25) * a,
        })
        .collect()
}

/// Horizontal blob centers of every frame.
fn trajectory(spec: &SynthSpec) -> Vec<f64> {
    let w = spec.frame_width as f64;
    (0..spec.num_frames)
        .map(|t| (0.5 * w + t as f64 * spec.motion_level * w).rem_euclid(w))
        .collect()
}

fn ventricle_window(spec: &SynthSpec) -> Vec<bool> {
    let (h, w) = (spec.frame_height, spec.frame_width);
    let (r0, r1) = ((0.7 * h as f64) as usize, (0.9 * h as f64) as usize);
    let (c0, c1) = ((0.35 * w as f64) as usize, (0.65 * w as f64) as usize);
    (0..h * w)
        .map(|k| {
            let (r, c) = (k / w, k % w);
            (r0..r1).contains(&r) && (c0..c1).contains(&c)
        })
        .collect()
}

fn half_max_mask(values: &[f64]) -> Vec<bool> {
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|&v| peak > 0.0 && v > 0.5 * peak).collect()
}

fn gaussian_columns(rng: &mut ChaCha8Rng, n: usize, p: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthInstance> {
    spec.validate()?;
    let (h, w, p) = (spec.frame_height, spec.frame_width, spec.num_frames);
    let n = h * w;
    let fp = spec.foreground_params;
    let mut scene = stream_rng(spec.scene_seed.unwrap_or(spec.seed), SCENE_STREAM);
    let mut sample = stream_rng(spec.seed, SAMPLE_STREAM);

    let l = haze(spec, &mut scene);
    let shapes = draw_shapes(spec, &mut scene);
    let chosen = scene.random_range(0..shapes.len());
    let cy = 0.35 * h as f64;
    let centers = trajectory(spec);
    let blob0 = blob(h, w, centers[0], cy, shapes[chosen]);

    let (x, septum, prior) = match spec.foreground_kind {
        ForegroundKind::GmmBlobs => {
            let mut distinct: Vec<f64> = Vec::new();
            for &c in &centers {
                if !distinct.iter().any(|d| (d - c).abs() < 1e-9) {
                    distinct.push(c);
                }
            }
            let means = shapes
                .iter()
                .flat_map(|&s| distinct.iter().map(move |&c| (s, c)))
                .map(|(s, c)| Frame::new(blob(h, w, c, cy, s), h, w))
                .collect::<Result<Vec<_>>>()?;
            let texture = gaussian_columns(&mut sample, n, p, fp.texture_std);
            let mut x = texture;
            for (t, &c) in centers.iter().enumerate() {
                let b = blob(h, w, c, cy, shapes[chosen]);
                for (k, bk) in b.into_iter().enumerate() {
                    x[(k, t)] += bk;
                }
            }
            let prior = GmmPrior::uniform(means, fp.texture_std)?;
            (x, half_max_mask(&blob0), Some(SynthPrior::Gmm(prior)))
        }
        ForegroundKind::Gaussian => {
            let mut x = gaussian_columns(&mut sample, n, p, fp.texture_std);
            for t in 0..p {
                for (k, bk) in blob0.iter().enumerate() {
                    x[(k, t)] += bk;
                }
            }
            let prior = GaussianPrior::new(Frame::new(blob0.clone(), h, w)?, fp.texture_std)?;
            (x, half_max_mask(&blob0), Some(SynthPrior::Gaussian(prior)))
        }
        ForegroundKind::Sparse => {
            let support: Vec<Option<f64>> = (0..n)
                .map(|_| {
                    let on = sample.random_bool(fp.sparse_density);
                    let amp = fp.amplitude * sample.random_range(0.5..1.5);
                    on.then_some(amp)
                })
                .collect();
            let mut x = DMatrix::zeros(n, p);
            for t in 0..p {
                let shift = (t as f64 * spec.motion_level * w as f64).round() as usize;
                for (k, a) in support.iter().enumerate() {
                    if let Some(a) = a {
                        let (r, c) = (k / w, k % w);
                        x[(r * w + (c + shift) % w, t)] = *a;
                    }
                }
            }
            let mut mask: Vec<bool> = support.iter().map(Option::is_some).collect();
            if !mask.iter().any(|&m| m) {
                mask = half_max_mask(&blob0);
            }
            (x, mask, None)
        }
    };

    let noise = gaussian_columns(&mut sample, n, p, spec.observation_noise_std);
    let y = &l + &x + noise;

    let septum = RoiMask::new(septum, RoiLabel::Septum)?;
    let ventricle: Vec<bool> = ventricle_window(spec)
        .iter()
        .zip(septum.mask())
        .map(|(&v, &s)| v && !s)
        .collect();
    let ventricle = RoiMask::new(ventricle, RoiLabel::Ventricle)
        .map_err(|_| Error::argument("ventricle window is empty for this frame size"))?;

    Ok(SynthInstance {
        spec: *spec,
        y: CasoratiMatrix::new(y, h, w)?,
        l_true: CasoratiMatrix::new(l, h, w)?,
        x_true: CasoratiMatrix::new(x, h, w)?,
        ventricle,
        septum,
        prior,
    })
}

/// Seed of sweep level `index`; level 0 keeps the base seed.
pub fn sweep_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(SWEEP_SEED_STRIDE))
}

/// One instance per motion level over a shared scene.
pub fn motion_sweep(base: &SynthSpec, levels: &[f64]) -> Result<Vec<(f64, SynthInstance)>> {
    if let Some(bad) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::argument(format!("motion level {bad} outside [0, 1]")));
    }
    levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let spec = SynthSpec {
                motion_level: level,
                seed: sweep_seed(base.seed, i),
                scene_seed: Some(base.scene_seed.unwrap_or(base.seed)),
                ..*base
            };
            Ok((level, generate(&spec)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mean_interframe_psnr;
    use crate::proxops::svd;

    #[test]
    fn empty_scene_is_zero() {
        let spec = SynthSpec {
            background_rank: 0,
            observation_noise_std: 0.0,
            foreground_kind: ForegroundKind::Sparse,
            foreground_params: ForegroundParams {
                sparse_density: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let inst = generate(&spec).unwrap();
        assert!(inst.y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_has_exact_rank() {
        for r in 1..=3 {
            let spec = SynthSpec {
                background_rank: r,
                ..Default::default()
            };
            let s = svd(generate(&spec).unwrap().l_true.values()).unwrap().s;
            assert!(s[r - 1] > 1e-6 * s[0]);
            if r < s.len() {
                assert!(s[r] <= 1e-10 * s[0], "rank {r}: {s}");
            }
        }
    }

    #[test]
    fn rank_above_frame_count_is_rejected() {
        let spec = SynthSpec {
            background_rank: 8,
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Argument(_))));
    }

    #[test]
    fn masks_are_disjoint_and_non_empty() {
        for kind in [ForegroundKind::GmmBlobs, ForegroundKind::Gaussian, ForegroundKind::Sparse] {
            for seed in 0..5 {
                let spec = SynthSpec {
                    foreground_kind: kind,
                    seed,
                    ..Default::default()
                };
                let inst = generate(&spec).unwrap();
                assert!(inst.septum.count() > 0 && inst.ventricle.count() > 0);
                assert!(!inst.septum.intersects(&inst.ventricle));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            seed: 17,
            ..Default::default()
        };
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.y, b.y);
        assert_eq!(a.x_true, b.x_true);
        assert_eq!(a.prior, b.prior);
    }

    #[test]
    fn noise_residual_statistics() {
        let spec = SynthSpec {
            num_frames: 20,
            seed: 3,
            ..Default::default()
        };
        let inst = generate(&spec).unwrap();
        let r = inst.y.values() - inst.l_true.values() - inst.x_true.values();
        let m = r.len() as f64;
        let mean = r.sum() / m;
        let std = ((r.map(|v| (v - mean).powi(2)).sum()) / (m - 1.0)).sqrt();
        let sigma = spec.observation_noise_std;
        assert!(mean.abs() < 3.0 * sigma / m.sqrt(), "mean {mean}");
        assert!((std - sigma).abs() < 3.0 * sigma / (2.0 * m).sqrt(), "std {std}");
    }

    #[test]
    fn gmm_prior_has_one_component_per_position() {
        let spec = SynthSpec {
            motion_level: 0.0,
            ..Default::default()
        };
        match generate(&spec).unwrap().prior {
            Some(SynthPrior::Gmm(g)) => assert_eq!(g.components().len(), 1),
            other => panic!("unexpected prior {other:?}"),
        }
        let spec = SynthSpec {
            motion_level: 0.5,
            ..Default::default()
        };
        match generate(&spec).unwrap().prior {
            Some(SynthPrior::Gmm(g)) => assert_eq!(g.components().len(), 2),
            other => panic!("unexpected prior {other:?}"),
        }
    }

    #[test]
    fn single_level_sweep_matches_generate() {
        let base = SynthSpec {
            seed: 9,
            ..Default::default()
        };
        let sweep = motion_sweep(&base, &[0.3]).unwrap();
        let direct = generate(&SynthSpec {
            motion_level: 0.3,
            ..base
        })
        .unwrap();
        assert_eq!(sweep[0].1.y, direct.y);
        assert!(motion_sweep(&base, &[1.5]).is_err());
    }

    #[test]
    fn psnr_falls_with_motion() {
        let levels = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        for seed in 0..4 {
            let base = SynthSpec {
                seed,
                ..Default::default()
            };
            let psnr: Vec<f64> = motion_sweep(&base, &levels)
                .unwrap()
                .iter()
                .map(|(_, inst)| mean_interframe_psnr(&inst.y, 1.0).unwrap())
                .collect();
            assert!(psnr.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {psnr:?}");
        }
    }
}
