//! Singular spectra of normalized co-occurrence matrices, the closed-form toy
//! spectra, and the unscaled components of the downstream classification
//! bound (tail singular energy and labeling error).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cooccurrence::{JointDistribution, NormalizedMatrix};
use crate::error::{LabError, Result};
use crate::objectives::unmasked_count;
use crate::toy::{ToyParams, TokenId};

/// Largest dimension accepted by the dense SVD.
pub const DEFAULT_SVD_BUDGET: usize = 4000;
/// Singular values below this are reported as exactly zero.
pub const ZERO_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingularSpectrum {
    values: Vec<f64>,
    /// Number of values above the zero clamp.
    pub rank_hint: usize,
}

impl SingularSpectrum {
    /// Sorts descending and clamps values below `ZERO_CLAMP` to zero.
    pub fn from_values(mut values: Vec<f64>) -> Self {
        for v in values.iter_mut() {
            if *v < ZERO_CLAMP {
                *v = 0.0;
            }
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let rank_hint = values.iter().filter(|&&v| v > 0.0).count();
        SingularSpectrum { values, rank_hint }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// j-th largest value, 1-based; zero past the end.
    pub fn sigma(&self, j: usize) -> f64 {
        self.values.get(j.wrapping_sub(1)).copied().unwrap_or(0.0)
    }

    /// Max elementwise |a − b|, padding the shorter spectrum with zeros.
    pub fn max_abs_diff(&self, other: &SingularSpectrum) -> f64 {
        let n = self.len().max(other.len());
        (1..=n)
            .map(|j| (self.sigma(j) - other.sigma(j)).abs())
            .fold(0.0, f64::max)
    }
}

pub fn singular_spectrum(m: &NormalizedMatrix) -> Result<SingularSpectrum> {
    matrix_spectrum(&m.matrix, DEFAULT_SVD_BUDGET)
}

pub fn matrix_spectrum(m: &DMatrix<f64>, budget: usize) -> Result<SingularSpectrum> {
    let (rows, cols) = m.shape();
    if rows > budget || cols > budget {
        return Err(LabError::Resource {
            what: "dense SVD dimension".into(),
            needed: rows.max(cols),
            limit: budget,
        });
    }
    if rows == 0 || cols == 0 {
        return Ok(SingularSpectrum::from_values(Vec::new()));
    }
    let values = m.clone().singular_values();
    Ok(SingularSpectrum::from_values(values.iter().copied().collect()))
}

fn ar_min_dim(p: &ToyParams) -> usize {
    // rows r·(T + … + T^{s-1}) always dominate cols r·(s-1)·T
    p.classes * (p.length - 1) * p.slots
}

fn masked_min_dim(p: &ToyParams, u: usize) -> usize {
    let binom = (0..u).fold(1usize, |acc, i| acc * (p.length - i) / (i + 1));
    let rows = p.classes * binom * p.slots.pow(u as u32);
    rows.min(p.vocab_size())
}

fn padded(mut head: Vec<f64>, len: usize) -> SingularSpectrum {
    head.resize(len.max(head.len()), 0.0);
    SingularSpectrum::from_values(head)
}

/// Closed-form spectrum of the AR matrix built with prefix lengths 1..s-1:
/// one unit singular value per (class, prefix length) block.
pub fn theorem3_ar_spectrum(params: &ToyParams) -> SingularSpectrum {
    let ones = params.classes * (params.length - 1);
    padded(vec![1.0; ones], ar_min_dim(params))
}

/// The AR closed form as printed, r·s unit values. Kept for reporting next
/// to `theorem3_ar_spectrum`; it is not realized by the built matrix.
pub fn paper_ar_spectrum(params: &ToyParams) -> SingularSpectrum {
    padded(vec![1.0; params.classes * params.length], ar_min_dim(params))
}

/// Closed-form masked spectrum: r unit values, then r(s-1) copies of
/// sqrt(u / ((s-u)(s-1))), then zeros.
pub fn theorem3_masked_spectrum(params: &ToyParams, rho: f64) -> Result<SingularSpectrum> {
    let s = params.length;
    let u = unmasked_count(s, rho)?;
    if s - u <= 1 {
        return Err(LabError::domain(format!(
            "closed form needs s·rho > 1 (masked length {}); got rho={rho}, s={s}",
            s - u
        )));
    }
    let r = params.classes;
    let mid = masked_middle_value(s, u);
    let mut head = vec![1.0; r];
    head.extend(std::iter::repeat_n(mid, r * (s - 1)));
    Ok(padded(head, masked_min_dim(params, u)))
}

/// sqrt(u / ((s-u)(s-1))) for unmasked count u.
pub fn masked_middle_value(s: usize, u: usize) -> f64 {
    (u as f64 / ((s - u) as f64 * (s - 1) as f64)).sqrt()
}

/// Square block matrix with s_b diagonal blocks of size s_a filled with p_a
/// and p_b elsewhere.
pub fn block_matrix(p_a: f64, p_b: f64, s_a: usize, s_b: usize) -> DMatrix<f64> {
    let n = s_a * s_b;
    DMatrix::from_fn(n, n, |i, j| if i / s_a == j / s_a { p_a } else { p_b })
}

/// Singular values of `block_matrix` in closed form.
pub fn block_matrix_spectrum(p_a: f64, p_b: f64, s_a: usize, s_b: usize) -> Result<SingularSpectrum> {
    if s_a < 1 || s_b < 1 {
        return Err(LabError::domain("block sizes must be >= 1"));
    }
    let n = s_a * s_b;
    let mut v = vec![0.0; n];
    v[0] = (s_a as f64 * p_a + (s_b - 1) as f64 * s_a as f64 * p_b).abs();
    for x in v.iter_mut().take(s_b).skip(1) {
        *x = s_a as f64 * (p_b - p_a).abs();
    }
    Ok(SingularSpectrum::from_values(v))
}

/// Σ_{j>t} σ_j⁴, without the unspecified leading constant.
pub fn tail_energy(spec: &SingularSpectrum, t: usize) -> f64 {
    spec.values().iter().skip(t).map(|s| s.powi(4)).sum()
}

/// Probability mass of pairs whose conditional text and target carry
/// different labels.
pub fn labeling_error(joint: &JointDistribution, labeler: impl Fn(TokenId) -> usize) -> Result<f64> {
    let row_labels = joint
        .rows()
        .iter()
        .map(|r| r.class(&labeler))
        .collect::<Result<Vec<_>>>()?;
    let total = joint.total();
    let mismatched: f64 = joint
        .entries()
        .iter()
        .filter(|&&(i, j, _)| row_labels[i] != labeler(joint.cols()[j]))
        .map(|e| e.2)
        .sum();
    Ok(mismatched / total)
}

/// Mean of the `k` largest pairwise inner products (all pairs if fewer).
pub fn connectivity_estimate(features: &[DVector<f64>], k: usize) -> Result<f64> {
    if features.len() < 2 {
        return Err(LabError::domain("connectivity needs at least two feature vectors"));
    }
    let mut dots = Vec::with_capacity(features.len() * (features.len() - 1) / 2);
    for (i, a) in features.iter().enumerate() {
        for b in &features[i + 1..] {
            dots.push(a.dot(b));
        }
    }
    dots.sort_by(|a, b| b.total_cmp(a));
    let k = k.clamp(1, dots.len());
    Ok(dots[..k].iter().sum::<f64>() / k as f64)
}

/// Bound components as exported to JSON.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundComponents {
    pub tail_energy: f64,
    pub alpha: f64,
    pub t: usize,
}
