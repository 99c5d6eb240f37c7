//! Evaluation metrics: KS statistic, gCNR and inter-frame PSNR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{CasoratiMatrix, Frame, RoiMask};

pub const DEFAULT_GCNR_BINS: usize = 100;

fn sorted_finite(samples: &[f64], what: &str) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::argument(format!("{what}: empty sample")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument(format!("{what}: non-finite sample")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Right-continuous empirical distribution function.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        Ok(Self {
            sorted: sorted_finite(samples, "empirical cdf")?,
        })
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of samples `≤ z`.
    pub fn evaluate(&self, z: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= z) as f64 / self.sorted.len() as f64
    }
}

/// Two-sample Kolmogorov–Smirnov distance `sup_z |F_a(z) − F_b(z)|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    let a = sorted_finite(a, "ks_statistic")?;
    let b = sorted_finite(b, "ks_statistic")?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < a.len() && j < b.len() {
        let z = a[i].min(b[j]);
        while i < a.len() && a[i] <= z {
            i += 1;
        }
        while j < b.len() && b[j] <= z {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnrResult {
    pub value: f64,
    /// All pooled samples were equal, so no histogram could be formed.
    pub degenerate: bool,
    pub bins: usize,
}

/// Generalized contrast-to-noise ratio `1 − Σ_k min(h_a[k], h_b[k])` over
/// shared bins spanning the pooled range.
pub fn gcnr(a: &[f64], b: &[f64], bins: usize) -> Result<GcnrResult> {
    if bins < 2 {
        return Err(Error::argument(format!("gcnr needs at least 2 bins, got {bins}")));
    }
    let a = sorted_finite(a, "gcnr")?;
    let b = sorted_finite(b, "gcnr")?;
    let lo = a[0].min(b[0]);
    let hi = a[a.len() - 1].max(b[b.len() - 1]);
    if hi <= lo {
        return Ok(GcnrResult {
            value: 0.0,
            degenerate: true,
            bins,
        });
    }
    let width = (hi - lo) / bins as f64;
    // Edges are authoritative: the division only guesses the bin, which is
    // then corrected against the edges (bins are [e_k, e_{k+1}), last closed).
    let edge = |k: usize| if k == bins { hi } else { lo + k as f64 * width };
    let histogram = |s: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in s {
            let mut k = (((v - lo) / width).floor() as usize).min(bins - 1);
            if k > 0 && v < edge(k) {
                k -= 1;
            } else if k + 1 < bins && v >= edge(k + 1) {
                k += 1;
            }
            h[k] += 1.0;
        }
        let n = s.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (histogram(&a), histogram(&b));
    let overlap: f64 = ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum();
    Ok(GcnrResult {
        value: (1.0 - overlap).clamp(0.0, 1.0),
        degenerate: false,
        bins,
    })
}

/// Frame values under the mask, in pixel order.
pub fn extract_roi(frame: &Frame, mask: &RoiMask) -> Result<Vec<f64>> {
    if frame.len() != mask.len() {
        return Err(Error::shape(format!(
            "{:?} mask has {} pixels, frame has {}",
            mask.label(),
            mask.len(),
            frame.len()
        )));
    }
    Ok(frame
        .values()
        .iter()
        .zip(mask.mask())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect())
}

/// `10·log10(peak²/MSE)`; `+∞` for identical frames.
pub fn motion_psnr(y_t: &Frame, y_prev: &Frame, peak: f64) -> Result<f64> {
    if y_t.height() != y_prev.height() || y_t.width() != y_prev.width() {
        return Err(Error::shape(format!(
            "psnr of {}x{} vs {}x{} frames",
            y_t.height(),
            y_t.width(),
            y_prev.height(),
            y_prev.width()
        )));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::argument(format!("peak must be positive, got {peak}")));
    }
    let mse = y_t
        .values()
        .iter()
        .zip(y_prev.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y_t.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean of `motion_psnr` over consecutive frame pairs.
pub fn mean_interframe_psnr(y: &CasoratiMatrix, peak: f64) -> Result<f64> {
    if y.p() < 2 {
        return Err(Error::argument("inter-frame psnr needs at least two frames"));
    }
    let mut total = 0.0;
    for t in 1..y.p() {
        total += motion_psnr(&y.frame(t), &y.frame(t - 1), peak)?;
    }
    Ok(total / (y.p() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded_rng};
    use crate::tensors::RoiLabel;
    use proptest::prelude::*;

    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], z: f64| s.iter().filter(|&&v| v <= z).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&z| (cdf(a, z) - cdf(b, z)).abs())
            .fold(0.0, f64::max)
    }

    fn samples(seed: u64, n: usize) -> Vec<f64> {
        normal_matrix(&mut seeded_rng(seed), n, 1).iter().copied().collect()
    }

    #[test]
    fn ks_examples() {
        let a = samples(1, 50);
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert!(ks_statistic(&[], &a).is_err());
    }

    #[test]
    fn ks_handles_ties() {
        let a = [1.0, 1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 2.0, 2.0, 5.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), brute_ks(&a, &b));
    }

    #[test]
    fn ks_matches_brute_force_on_random_pairs() {
        let a = samples(2, 100);
        let b: Vec<f64> = samples(3, 120).iter().map(|v| v + 0.3).collect();
        assert_eq!(ks_statistic(&a, &b).unwrap(), brute_ks(&a, &b));
    }

    #[test]
    fn cdf_is_right_continuous() {
        let cdf = EmpiricalCdf::new(&[1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(cdf.evaluate(0.5), 0.0);
        assert_eq!(cdf.evaluate(2.0), 0.75);
        assert_eq!(cdf.evaluate(3.9), 0.75);
        assert_eq!(cdf.evaluate(4.0), 1.0);
    }

    #[test]
    fn gcnr_examples() {
        let a = samples(4, 200);
        assert_eq!(gcnr(&a, &a, 100).unwrap().value, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        assert_eq!(gcnr(&a, &b, 100).unwrap().value, 1.0);
        let d = gcnr(&[3.0, 3.0], &[3.0], 100).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(gcnr(&[], &a, 100).is_err());
        assert!(gcnr(&a, &a, 1).is_err());
    }

    #[test]
    fn extract_roi_examples() {
        let f = Frame::new(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let all = RoiMask::new(vec![true; 4], RoiLabel::Other).unwrap();
        assert_eq!(extract_roi(&f, &all).unwrap(), f.values());
        let one = RoiMask::new(vec![false, false, true, false], RoiLabel::Septum).unwrap();
        assert_eq!(extract_roi(&f, &one).unwrap(), vec![3.0]);
        let short = RoiMask::new(vec![true; 3], RoiLabel::Septum).unwrap();
        assert!(matches!(extract_roi(&f, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = Frame::from_vec(vec![0.0; 4]).unwrap();
        assert_eq!(motion_psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Frame::from_vec(vec![0.1; 4]).unwrap();
        assert!((motion_psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-10);
        let c = Frame::from_vec(vec![0.0; 3]).unwrap();
        assert!(matches!(motion_psnr(&a, &c, 1.0), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), n in 1usize..40, m in 1usize..40) {
            let (a, b) = (samples(s1, n), samples(s2, m));
            let ab = ks_statistic(&a, &b).unwrap();
            prop_assert_eq!(ab, ks_statistic(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, brute_ks(&a, &b));
        }

        #[test]
        fn ks_duplication_invariance(s in any::<u64>(), n in 1usize..40) {
            let a = samples(s, n);
            let aa: Vec<f64> = a.iter().chain(&a).copied().collect();
            prop_assert_eq!(ks_statistic(&a, &aa).unwrap(), 0.0);
        }

        #[test]
        fn gcnr_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), n in 1usize..60, m in 1usize..60, bins in 2usize..150) {
            let (a, b) = (samples(s1, n), samples(s2, m));
            let ab = gcnr(&a, &b, bins).unwrap().value;
            prop_assert_eq!(ab, gcnr(&b, &a, bins).unwrap().value);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn gcnr_invariant_under_power_of_two_rescaling(s1 in any::<u64>(), s2 in any::<u64>(), k in -4i32..4) {
            let (a, b) = (samples(s1, 50), samples(s2, 70));
            let c = 2f64.powi(k);
            let sa: Vec<f64> = a.iter().map(|v| c * v).collect();
            let sb: Vec<f64> = b.iter().map(|v| c * v).collect();
            prop_assert_eq!(gcnr(&a, &b, 64).unwrap().value, gcnr(&sa, &sb, 64).unwrap().value);
        }
    }
}
