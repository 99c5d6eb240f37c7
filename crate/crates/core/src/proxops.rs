//! Proximal operators for the ℓ₁ and nuclear norms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative cut-off below which singular values count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Thin SVD with singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    /// `U diag(s) Vᵀ` with the given singular values.
    pub fn recompose_with(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, &sj) in s.iter().enumerate() {
            us.column_mut(j).scale_mut(sj);
        }
        us * self.v.transpose()
    }

    /// Number of singular values above `rank_tol · s₁`.
    pub fn rank(&self, rank_tol: f64) -> usize {
        let s1 = self.s.get(0).copied().unwrap_or(0.0);
        if s1 <= 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > rank_tol * s1).count()
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(idx) => Err(Error::numerical(
            None,
            format!(
                "{what}: non-finite entry at ({}, {})",
                idx % m.nrows().max(1),
                idx / m.nrows().max(1)
            ),
        )),
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "threshold must be finite and non-negative, got {t}"
        )))
    }
}

#[inline]
fn shrink(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Entrywise `sign(x)·max(|x| − t, 0)`.
pub fn soft_threshold(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_threshold(t)?;
    Ok(m.map(|x| if x == 0.0 { 0.0 } else { shrink(x, t) }))
}

pub fn svd(m: &DMatrix<f64>) -> Result<SvdFactors> {
    check_finite(m, "svd")?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdFactors {
            u: DMatrix::zeros(rows, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
        });
    }
    // nalgebra's own SVD loses accuracy on rank-deficient inputs, which are the
    // norm here (SVT outputs, low-rank iterates), so the factorization runs in faer.
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let d = fm
        .thin_svd()
        .map_err(|e| Error::numerical(None, format!("svd did not converge: {e:?}")))?;
    let (fu, fs, fv) = (d.U(), d.S().column_vector(), d.V());
    let u = DMatrix::from_fn(rows, k, |i, j| fu[(i, j)]);
    let v = DMatrix::from_fn(cols, k, |i, j| fv[(i, j)]);
    let s = DVector::from_fn(k, |i, _| fs[i]);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(None, "svd did not converge"));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Ok(SvdFactors {
        u: u.select_columns(order.iter()),
        s: DVector::from_iterator(k, order.iter().map(|&i| s[i])),
        v: v.select_columns(order.iter()),
    })
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("nuclear norm of a non-finite matrix"));
    }
    Ok(svd(m)?.s.sum())
}

/// Singular value thresholding, the prox of `t‖·‖_*`.
pub fn svt(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_threshold(t)?;
    let f = svd(m)?;
    let s = f.s.map(|v| (v - t).max(0.0));
    Ok(f.recompose_with(&s))
}

/// `SVT` together with the rank of the result.
pub fn svt_with_rank(m: &DMatrix<f64>, t: f64) -> Result<(DMatrix<f64>, usize)> {
    check_threshold(t)?;
    let f = svd(m)?;
    let s = f.s.map(|v| (v - t).max(0.0));
    let rank = s.iter().filter(|&&v| v > 0.0).count();
    Ok((f.recompose_with(&s), rank))
}

/// `U_r V_rᵀ`, an element of `∂‖M‖_*`, over the singular triplets with
/// `sᵢ > rank_tol · s₁`. The zero matrix maps to zero.
pub fn nuclear_subgradient(m: &DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>> {
    Ok(nuclear_subgradient_with_rank(m, rank_tol)?.0)
}

pub fn nuclear_subgradient_with_rank(
    m: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<(DMatrix<f64>, usize)> {
    if !(rank_tol.is_finite() && rank_tol >= 0.0) {
        return Err(Error::argument(format!(
            "rank tolerance must be finite and non-negative, got {rank_tol}"
        )));
    }
    let f = svd(m)?;
    let r = f.rank(rank_tol);
    if r == 0 {
        return Ok((DMatrix::zeros(m.nrows(), m.ncols()), 0));
    }
    let g = f.u.columns(0, r) * f.v.columns(0, r).transpose();
    Ok((g, r))
}
