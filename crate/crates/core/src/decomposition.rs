//! Spectral loss over an encoder/embedding pair, its equivalence with the
//! low-rank factorization objective ‖Ā − F W′ᵀ‖², Eckart–Young optimal
//! factors, a gradient-descent factorizer and a ridge linear probe.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cooccurrence::{ConditionalText, JointDistribution, NormalizedMatrix};
use crate::error::{LabError, Result};
use crate::toy::TokenId;

/// Encoder outputs f(X) for a catalog of conditional texts; row i of
/// `features` belongs to `rows[i]`.
#[derive(Clone, Debug)]
pub struct EncoderTable {
    pub rows: Vec<ConditionalText>,
    pub features: DMatrix<f64>,
}

impl EncoderTable {
    pub fn new(rows: Vec<ConditionalText>, features: DMatrix<f64>) -> Result<Self> {
        if rows.len() != features.nrows() {
            return Err(LabError::domain(format!(
                "encoder has {} rows but {} feature vectors",
                rows.len(),
                features.nrows()
            )));
        }
        Ok(EncoderTable { rows, features })
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// Features re-ordered to match `catalog`.
    fn aligned(&self, catalog: &[ConditionalText]) -> Result<DMatrix<f64>> {
        if self.rows == catalog {
            return Ok(self.features.clone());
        }
        let index: HashMap<&ConditionalText, usize> =
            self.rows.iter().enumerate().map(|(i, r)| (r, i)).collect();
        let mut out = DMatrix::zeros(catalog.len(), self.dim());
        for (i, row) in catalog.iter().enumerate() {
            let src = *index.get(row).ok_or_else(|| {
                LabError::domain(format!("encoder has no row for {}", row.key()))
            })?;
            out.row_mut(i).copy_from(&self.features.row(src));
        }
        Ok(out)
    }
}

/// Output embedding W, one column per target token.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub cols: Vec<TokenId>,
    /// t × n_cols.
    pub weights: DMatrix<f64>,
}

impl TokenEmbedding {
    pub fn new(cols: Vec<TokenId>, weights: DMatrix<f64>) -> Result<Self> {
        if cols.len() != weights.ncols() {
            return Err(LabError::domain("embedding column count mismatch"));
        }
        Ok(TokenEmbedding { cols, weights })
    }

    pub fn spectral_norm(&self) -> f64 {
        self.weights.clone().singular_values().max()
    }

    fn aligned(&self, catalog: &[TokenId]) -> Result<DMatrix<f64>> {
        if self.cols == catalog {
            return Ok(self.weights.clone());
        }
        let index: HashMap<TokenId, usize> = self.cols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut out = DMatrix::zeros(self.weights.nrows(), catalog.len());
        for (j, tok) in catalog.iter().enumerate() {
            let src = *index
                .get(tok)
                .ok_or_else(|| LabError::domain(format!("embedding has no column for token {tok}")))?;
            out.column_mut(j).copy_from(&self.weights.column(src));
        }
        Ok(out)
    }
}

/// F (rows × t) and W′ (cols × t).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub f: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl FactorPair {
    pub fn rank(&self) -> usize {
        self.f.ncols()
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.f * self.w.transpose()
    }
}

/// Scores (Wf(X))ᵀ1_j for every catalog row and column.
fn score_matrix(enc: &EncoderTable, emb: &TokenEmbedding, joint: &JointDistribution) -> Result<DMatrix<f64>> {
    let f = enc.aligned(joint.rows())?;
    let w = emb.aligned(joint.cols())?;
    if f.ncols() != w.nrows() {
        return Err(LabError::domain(format!(
            "encoder dim {} does not match embedding dim {}",
            f.ncols(),
            w.nrows()
        )));
    }
    Ok(f * w)
}

/// Spectral loss  −2·E_{(X,X⁺)} (Wf(X))ᵀ1_{X⁺} + E_{X,X⁻} ((Wf(X))ᵀ1_{X⁻})²,
/// evaluated exactly over the catalogs. The factor 2 on the positive term is
/// what makes the loss equal the factorization objective up to a constant.
pub fn spectral_loss(enc: &EncoderTable, emb: &TokenEmbedding, joint: &JointDistribution) -> Result<f64> {
    let scores = score_matrix(enc, emb, joint)?;
    let p_c = joint.row_marginals();
    let p_g = joint.col_marginals();
    let positive: f64 = joint.entries().iter().map(|&(i, j, a)| a * scores[(i, j)]).sum();
    let mut negative = 0.0;
    for (i, pc) in p_c.iter().enumerate() {
        let row: f64 = p_g
            .iter()
            .enumerate()
            .map(|(j, pg)| pg * scores[(i, j)].powi(2))
            .sum();
        negative += pc * row;
    }
    Ok(-2.0 * positive + negative)
}

/// ‖Ā − F W′ᵀ‖²_F.
pub fn decomposition_objective(pair: &FactorPair, m: &NormalizedMatrix) -> Result<f64> {
    let (n, k) = m.shape();
    if pair.f.nrows() != n || pair.w.nrows() != k || pair.f.ncols() != pair.w.ncols() {
        return Err(LabError::domain(format!(
            "factor shapes {:?} / {:?} do not fit a {n}×{k} matrix",
            pair.f.shape(),
            pair.w.shape()
        )));
    }
    Ok((&m.matrix - pair.product()).norm_squared())
}

/// F_X = √P_C(X)·f(X), W′_j = √P_G(j)·W_j.
pub fn assemble_pair(enc: &EncoderTable, emb: &TokenEmbedding, joint: &JointDistribution) -> Result<FactorPair> {
    let mut f = enc.aligned(joint.rows())?;
    let w = emb.aligned(joint.cols())?;
    for (i, pc) in joint.row_marginals().iter().enumerate() {
        f.row_mut(i).scale_mut(pc.sqrt());
    }
    let mut w = w.transpose();
    for (j, pg) in joint.col_marginals().iter().enumerate() {
        w.row_mut(j).scale_mut(pg.sqrt());
    }
    Ok(FactorPair { f, w })
}

/// Σ A² / (P_C·P_G), equal to ‖Ā‖²_F.
pub fn decomposition_constant(joint: &JointDistribution) -> f64 {
    let p_c = joint.row_marginals();
    let p_g = joint.col_marginals();
    joint
        .entries()
        .iter()
        .map(|&(i, j, a)| a * a / (p_c[i] * p_g[j]))
        .sum()
}

/// |spectral_loss − (‖Ā − F W′ᵀ‖² − const)|.
pub fn theorem1_residual(enc: &EncoderTable, emb: &TokenEmbedding, joint: &JointDistribution) -> Result<f64> {
    let loss = spectral_loss(enc, emb, joint)?;
    let pair = assemble_pair(enc, emb, joint)?;
    let m = crate::cooccurrence::normalize(joint)?;
    let objective = decomposition_objective(&pair, &m)?;
    Ok((loss - (objective - decomposition_constant(joint))).abs())
}

/// Thin SVD with singular values sorted descending and the sign of every
/// left singular vector fixed so its largest-magnitude entry is nonnegative.
pub fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = order.len();
    let mut us = DMatrix::zeros(m.nrows(), k);
    let mut vs = DMatrix::zeros(m.ncols(), k);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = u.column(src).into_owned();
        let mut vcol = v_t.row(src).transpose();
        let pivot = ucol.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        us.set_column(dst, &ucol);
        vs.set_column(dst, &vcol);
        sigma.push(svd.singular_values[src]);
    }
    (us, sigma, vs)
}

/// Eckart–Young optimum with the symmetric gauge F = U_t·diag(√σ),
/// W′ = V_t·diag(√σ).
pub fn optimal_features(m: &NormalizedMatrix, t: usize) -> Result<FactorPair> {
    let (n, k) = m.shape();
    if t == 0 || t > n.min(k) {
        return Err(LabError::domain(format!(
            "rank t={t} outside 1..={}",
            n.min(k)
        )));
    }
    let (u, sigma, v) = sorted_svd(&m.matrix);
    let mut f = u.columns(0, t).into_owned();
    let mut w = v.columns(0, t).into_owned();
    for j in 0..t {
        let root = sigma[j].max(0.0).sqrt();
        f.column_mut(j).scale_mut(root);
        w.column_mut(j).scale_mut(root);
    }
    Ok(FactorPair { f, w })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdConfig {
    pub lr: f64,
    pub steps: usize,
    /// Half-width of the uniform initialization.
    pub init_scale: f64,
    /// Stop once ‖∇‖² falls below this.
    pub grad_tol: f64,
    /// Record the objective every this many steps.
    pub record_every: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            lr: 0.05,
            steps: 20000,
            init_scale: 0.1,
            grad_tol: 1e-26,
            record_every: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GdRun {
    pub pair: FactorPair,
    pub objective: f64,
    pub steps_taken: usize,
    /// (step, objective) samples.
    pub trajectory: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceFailure {
    pub objective: f64,
    pub target: f64,
    pub trajectory: Vec<(usize, f64)>,
}

impl GdRun {
    /// Accepts the run when objective ≤ optimum·(1 + rel) + abs_floor.
    pub fn check_against(&self, optimum: f64, rel: f64, abs_floor: f64) -> std::result::Result<(), ConvergenceFailure> {
        let target = optimum * (1.0 + rel) + abs_floor;
        if self.objective <= target {
            Ok(())
        } else {
            Err(ConvergenceFailure {
                objective: self.objective,
                target,
                trajectory: self.trajectory.clone(),
            })
        }
    }
}

/// Gradients of ‖Ā − F W′ᵀ‖²: ∂F = −2 R W′, ∂W′ = −2 Rᵀ F with R the residual.
pub fn factorization_gradients(a: &DMatrix<f64>, pair: &FactorPair) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let residual = a - pair.product();
    let grad_f = &residual * &pair.w * -2.0;
    let grad_w = residual.transpose() * &pair.f * -2.0;
    (residual.norm_squared(), grad_f, grad_w)
}

pub fn gd_factorize<R: Rng + ?Sized>(m: &NormalizedMatrix, t: usize, cfg: &GdConfig, rng: &mut R) -> Result<GdRun> {
    let (n, k) = m.shape();
    if t == 0 || t > n.min(k) {
        return Err(LabError::domain(format!("rank t={t} outside 1..={}", n.min(k))));
    }
    if !(cfg.lr > 0.0) || cfg.steps < 1 {
        return Err(LabError::domain("gd_factorize needs lr > 0 and steps >= 1"));
    }
    let a = cfg.init_scale;
    let mut pair = FactorPair {
        f: DMatrix::from_fn(n, t, |_, _| rng.gen_range(-a..=a)),
        w: DMatrix::from_fn(k, t, |_, _| rng.gen_range(-a..=a)),
    };
    let record = cfg.record_every.max(1);
    let mut trajectory = Vec::new();
    let mut steps_taken = 0;
    for step in 0..cfg.steps {
        let (obj, gf, gw) = factorization_gradients(&m.matrix, &pair);
        if !obj.is_finite() {
            return Err(LabError::numeric(format!(
                "factorization diverged at step {step} (objective {obj}); lower lr={}",
                cfg.lr
            )));
        }
        if step % record == 0 {
            trajectory.push((step, obj));
        }
        if gf.norm_squared() + gw.norm_squared() < cfg.grad_tol {
            break;
        }
        pair.f -= gf * cfg.lr;
        pair.w -= gw * cfg.lr;
        steps_taken = step + 1;
    }
    let final_obj = (&m.matrix - pair.product()).norm_squared();
    if !final_obj.is_finite() {
        return Err(LabError::numeric(format!(
            "factorization diverged (objective {final_obj}); lower lr={}",
            cfg.lr
        )));
    }
    trajectory.push((steps_taken, final_obj));
    Ok(GdRun {
        pair,
        objective: final_obj,
        steps_taken,
        trajectory,
    })
}

/// f(X) = F_X / √P_C(X).
pub fn encoder_from_pair(pair: &FactorPair, rows: &[ConditionalText], p_c: &[f64]) -> Result<EncoderTable> {
    if rows.len() != pair.f.nrows() || p_c.len() != rows.len() {
        return Err(LabError::domain("row catalog does not match factor F"));
    }
    let mut features = pair.f.clone();
    for (i, &pc) in p_c.iter().enumerate() {
        if !(pc > 0.0) {
            return Err(LabError::domain(format!(
                "row {} has zero marginal; cannot invert F",
                rows[i].key()
            )));
        }
        features.row_mut(i).unscale_mut(pc.sqrt());
    }
    EncoderTable::new(rows.to_vec(), features)
}

#[derive(Clone, Debug)]
pub struct ProbeExample {
    pub features: DVector<f64>,
    pub class: usize,
    pub weight: f64,
}

/// One-vs-all ridge classifier with a bias column.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub classes: Vec<usize>,
    /// (t + 1) × classes; last row is the bias.
    pub coefficients: DMatrix<f64>,
}

impl LinearProbe {
    pub fn predict(&self, x: &DVector<f64>) -> usize {
        let t = self.coefficients.nrows() - 1;
        let mut best = (f64::NEG_INFINITY, self.classes[0]);
        for (c, &class) in self.classes.iter().enumerate() {
            let score = self.coefficients.column(c).rows(0, t).dot(x) + self.coefficients[(t, c)];
            if score > best.0 {
                best = (score, class);
            }
        }
        best.1
    }

    /// Weight-normalized misclassification rate.
    pub fn error(&self, examples: &[ProbeExample]) -> f64 {
        let total: f64 = examples.iter().map(|e| e.weight).sum();
        let wrong = examples
            .iter()
            .filter(|e| self.predict(&e.features) != e.class)
            .fold(0.0, |acc, e| acc + e.weight);
        wrong / total
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub t: usize,
    pub reg: f64,
    pub error: f64,
}

pub fn linear_probe(examples: &[ProbeExample], reg: f64) -> Result<(LinearProbe, f64)> {
    let first = examples.first().ok_or_else(|| LabError::domain("probe needs examples"))?;
    let t = first.features.len();
    if examples.iter().any(|e| e.features.len() != t) {
        return Err(LabError::domain("probe features have inconsistent dimension"));
    }
    if reg < 0.0 {
        return Err(LabError::domain("ridge coefficient must be >= 0"));
    }
    let mut classes: Vec<usize> = examples.iter().map(|e| e.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let dim = t + 1;
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, classes.len());
    for e in examples {
        let mut x = DVector::zeros(dim);
        x.rows_mut(0, t).copy_from(&e.features);
        x[t] = 1.0;
        gram += &x * x.transpose() * e.weight;
        let c = classes.binary_search(&e.class).expect("class collected above");
        rhs.column_mut(c).axpy(e.weight, &x, 1.0);
    }
    for i in 0..dim {
        gram[(i, i)] += reg;
    }
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let singular = || LabError::numeric("probe normal equations are singular; use reg > 0");
    let chol = gram.cholesky().ok_or_else(singular)?;
    let pivots = chol.l_dirty().diagonal();
    if pivots.iter().any(|&p| p * p < 1e-13 * scale) {
        return Err(singular());
    }
    let coefficients = chol.solve(&rhs);
    let probe = LinearProbe { classes, coefficients };
    let error = probe.error(examples);
    Ok((probe, error))
}

/// Probe examples from an encoder: one per conditional text, weighted by P_C
/// and labeled by the shared class of its tokens.
pub fn probe_examples(enc: &EncoderTable, p_c: &[f64], labeler: impl Fn(TokenId) -> usize) -> Result<Vec<ProbeExample>> {
    enc.rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Ok(ProbeExample {
                features: enc.feature(i),
                class: row.class(&labeler)?,
                weight: p_c[i],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooccurrence::{build_ar_joint, build_masked_joint, normalize};
    use crate::spectral::{singular_spectrum, theorem3_ar_spectrum};
    use crate::toy::ToyParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pair(joint: &JointDistribution, t: usize, rng: &mut ChaCha8Rng) -> (EncoderTable, TokenEmbedding) {
        let enc = EncoderTable::new(
            joint.rows().to_vec(),
            DMatrix::from_fn(joint.rows().len(), t, |_, _| rng.gen_range(-1.0..1.0)),
        )
        .unwrap();
        let emb = TokenEmbedding::new(
            joint.cols().to_vec(),
            DMatrix::from_fn(t, joint.cols().len(), |_, _| rng.gen_range(-1.0..1.0)),
        )
        .unwrap();
        (enc, emb)
    }

    #[test]
    fn zero_encoder_has_zero_loss() {
        let j = build_ar_joint(&ToyParams::new(1, 3, 2).unwrap()).unwrap();
        let enc = EncoderTable::new(j.rows().to_vec(), DMatrix::zeros(j.rows().len(), 3)).unwrap();
        let emb = TokenEmbedding::new(j.cols().to_vec(), DMatrix::zeros(3, j.cols().len())).unwrap();
        assert_eq!(spectral_loss(&enc, &emb, &j).unwrap(), 0.0);
        let r = theorem1_residual(&enc, &emb, &j).unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn single_entry_one_hot() {
        let row = ConditionalText::Prefix(vec![0]);
        let j = JointDistribution::from_masses([((row.clone(), 5), 1.0)]).unwrap();
        let enc = EncoderTable::new(vec![row], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let emb = TokenEmbedding::new(vec![5], DMatrix::from_element(1, 1, 1.0)).unwrap();
        // −2·1 + 1
        assert_eq!(spectral_loss(&enc, &emb, &j).unwrap(), -1.0);
    }

    #[test]
    fn missing_encoder_row_is_an_error() {
        let j = build_ar_joint(&ToyParams::new(1, 3, 2).unwrap()).unwrap();
        let enc = EncoderTable::new(j.rows()[1..].to_vec(), DMatrix::zeros(j.rows().len() - 1, 2)).unwrap();
        let emb = TokenEmbedding::new(j.cols().to_vec(), DMatrix::zeros(2, j.cols().len())).unwrap();
        assert!(spectral_loss(&enc, &emb, &j).is_err());
    }

    #[test]
    fn residual_is_tiny_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let j = build_ar_joint(&ToyParams::new(1, 3, 2).unwrap()).unwrap();
        for t in [1, 2, 4] {
            let (enc, emb) = random_pair(&j, t, &mut rng);
            assert!(theorem1_residual(&enc, &emb, &j).unwrap() < 1e-9);
            for c in [0.1, 10.0] {
                let scaled = EncoderTable::new(enc.rows.clone(), &enc.features * c).unwrap();
                assert!(theorem1_residual(&scaled, &emb, &j).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn shuffled_encoder_rows_are_realigned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = build_masked_joint(&ToyParams::new(2, 4, 1).unwrap(), 0.5).unwrap();
        let (enc, emb) = random_pair(&j, 3, &mut rng);
        let n = enc.rows.len();
        let rows: Vec<_> = (0..n).rev().map(|i| enc.rows[i].clone()).collect();
        let feats = DMatrix::from_fn(n, 3, |i, k| enc.features[(n - 1 - i, k)]);
        let rev = EncoderTable::new(rows, feats).unwrap();
        let a = spectral_loss(&enc, &emb, &j).unwrap();
        let b = spectral_loss(&rev, &emb, &j).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn objective_edge_values() {
        let p = ToyParams::new(2, 3, 2).unwrap();
        let m = normalize(&build_ar_joint(&p).unwrap()).unwrap();
        let (n, k) = m.shape();
        let zero = FactorPair { f: DMatrix::zeros(n, 2), w: DMatrix::zeros(k, 2) };
        assert!((decomposition_objective(&zero, &m).unwrap() - m.matrix.norm_squared()).abs() < 1e-15);
        let full = optimal_features(&m, k.min(n)).unwrap();
        assert!(decomposition_objective(&full, &m).unwrap() < 1e-18);
        let bad = FactorPair { f: DMatrix::zeros(n + 1, 2), w: DMatrix::zeros(k, 2) };
        assert!(decomposition_objective(&bad, &m).is_err());
    }

    #[test]
    fn random_pairs_respect_eckart_young() {
        let p = ToyParams::new(2, 3, 2).unwrap();
        let m = normalize(&build_ar_joint(&p).unwrap()).unwrap();
        let spec = singular_spectrum(&m).unwrap();
        let floor: f64 = spec.values().iter().skip(3).map(|s| s * s).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k) = m.shape();
        for _ in 0..50 {
            let pair = FactorPair {
                f: DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-0.5..0.5)),
                w: DMatrix::from_fn(k, 3, |_, _| rng.gen_range(-0.5..0.5)),
            };
            assert!(decomposition_objective(&pair, &m).unwrap() >= floor - 1e-12);
        }
    }

    #[test]
    fn optimal_objectives_on_toys() {
        let m = normalize(&build_ar_joint(&ToyParams::new(2, 3, 2).unwrap()).unwrap()).unwrap();
        let ones = theorem3_ar_spectrum(&ToyParams::new(2, 3, 2).unwrap()).rank_hint;
        let obj = decomposition_objective(&optimal_features(&m, 2).unwrap(), &m).unwrap();
        assert!((obj - (ones - 2) as f64).abs() < 1e-9);

        let m = normalize(&build_masked_joint(&ToyParams::new(2, 4, 2).unwrap(), 0.5).unwrap()).unwrap();
        let obj = decomposition_objective(&optimal_features(&m, 2).unwrap(), &m).unwrap();
        assert!((obj - 2.0).abs() < 1e-9);
        assert!(optimal_features(&m, 0).is_err());
        assert!(optimal_features(&m, 1000).is_err());
    }

    #[test]
    fn svd_sign_convention() {
        let m = DMatrix::from_row_slice(3, 2, &[-3.0, 0.0, 0.0, 2.0, -1.0, 0.0]);
        let (u, s, v) = sorted_svd(&m);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        for c in 0..u.ncols() {
            let col = u.column(c);
            let pivot = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot >= 0.0);
        }
        let rebuilt = &u * DMatrix::from_diagonal(&DVector::from_vec(s)) * v.transpose();
        assert!((rebuilt - m).abs().max() < 1e-12);
    }

    #[test]
    fn gd_on_exactly_factorizable_matrix() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
        let m = NormalizedMatrix {
            rows: vec![ConditionalText::Prefix(vec![0]), ConditionalText::Prefix(vec![1])],
            cols: vec![0, 1],
            p_c: vec![0.5, 0.5],
            p_g: vec![0.5, 0.5],
            matrix: a,
        };
        let cfg = GdConfig { lr: 0.1, steps: 20_000, ..GdConfig::default() };
        let run = gd_factorize(&m, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(run.objective < 1e-6, "{}", run.objective);
    }

    #[test]
    fn gd_reaches_masked_optimum() {
        let m = normalize(&build_masked_joint(&ToyParams::new(2, 4, 2).unwrap(), 0.5).unwrap()).unwrap();
        let cfg = GdConfig { lr: 0.05, steps: 5000, ..GdConfig::default() };
        let run = gd_factorize(&m, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(run.objective <= 2.002, "{}", run.objective);
        assert!(run.check_against(2.0, 1e-3, 0.0).is_ok());
    }

    #[test]
    fn gd_divergence_names_lr() {
        let m = normalize(&build_masked_joint(&ToyParams::new(2, 4, 2).unwrap(), 0.5).unwrap()).unwrap();
        let cfg = GdConfig { lr: 50.0, steps: 200, init_scale: 1.0, ..GdConfig::default() };
        let err = gd_factorize(&m, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, LabError::Numeric(_)));
        assert!(err.to_string().contains("lr=50"), "{err}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let m = normalize(&build_masked_joint(&ToyParams::new(2, 4, 1).unwrap(), 0.5).unwrap()).unwrap();
        let (n, k) = m.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let pair = FactorPair {
                f: DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0)),
                w: DMatrix::from_fn(k, 3, |_, _| rng.gen_range(-1.0..1.0)),
            };
            let (_, gf, gw) = factorization_gradients(&m.matrix, &pair);
            let h = 1e-5;
            let obj = |p: &FactorPair| (&m.matrix - p.product()).norm_squared();
            let mut num_f = DMatrix::zeros(n, 3);
            for idx in 0..n * 3 {
                let mut plus = pair.clone();
                let mut minus = pair.clone();
                plus.f[idx] += h;
                minus.f[idx] -= h;
                num_f[idx] = (obj(&plus) - obj(&minus)) / (2.0 * h);
            }
            let mut num_w = DMatrix::zeros(k, 3);
            for idx in 0..k * 3 {
                let mut plus = pair.clone();
                let mut minus = pair.clone();
                plus.w[idx] += h;
                minus.w[idx] -= h;
                num_w[idx] = (obj(&plus) - obj(&minus)) / (2.0 * h);
            }
            let rel_f = (&gf - &num_f).norm() / gf.norm().max(num_f.norm());
            let rel_w = (&gw - &num_w).norm() / gw.norm().max(num_w.norm());
            assert!(rel_f < 1e-5 && rel_w < 1e-5, "{rel_f} {rel_w}");
        }
    }

    #[test]
    fn encoder_inversion() {
        let rows: Vec<_> = (0..4).map(|i| ConditionalText::Prefix(vec![i])).collect();
        let f = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let pair = FactorPair { f: f.clone(), w: DMatrix::zeros(1, 2) };
        let enc = encoder_from_pair(&pair, &rows, &[0.25; 4]).unwrap();
        assert!((&enc.features - &f * 2.0).abs().max() < 1e-15);
        let mut back = enc.features.clone();
        for i in 0..4 {
            back.row_mut(i).scale_mut(0.5);
        }
        assert!((back - f).abs().max() < 1e-15);
        assert!(encoder_from_pair(&pair, &rows, &[0.25, 0.0, 0.25, 0.5]).is_err());
    }

    #[test]
    fn masked_optimal_encoder_groups_classes() {
        let p = ToyParams::new(2, 4, 2).unwrap();
        let m = normalize(&build_masked_joint(&p, 0.5).unwrap()).unwrap();
        let enc = encoder_from_pair(&optimal_features(&m, 2).unwrap(), &m.rows, &m.p_c).unwrap();
        let classes: Vec<usize> = enc.rows.iter().map(|r| r.class(|t| p.class_of(t)).unwrap()).collect();
        let mut min_same = f64::INFINITY;
        let mut max_cross = f64::NEG_INFINITY;
        for i in 0..enc.rows.len() {
            for j in i + 1..enc.rows.len() {
                let d = enc.feature(i).dot(&enc.feature(j));
                if classes[i] == classes[j] {
                    min_same = min_same.min(d);
                } else {
                    max_cross = max_cross.max(d);
                }
            }
        }
        assert!(min_same > max_cross, "{min_same} vs {max_cross}");
    }

    #[test]
    fn probe_separates_clusters() {
        let ex: Vec<ProbeExample> = (0..20)
            .map(|i| {
                let c = i % 2;
                let base = if c == 0 { 2.0 } else { -2.0 };
                ProbeExample {
                    features: DVector::from_vec(vec![base + 0.1 * i as f64 / 20.0, 1.0 - 0.05 * i as f64]),
                    class: c + 1,
                    weight: 1.0,
                }
            })
            .collect();
        let (_, err) = linear_probe(&ex, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn probe_on_masked_optimal_features() {
        let p = ToyParams::new(2, 4, 2).unwrap();
        let m = normalize(&build_masked_joint(&p, 0.5).unwrap()).unwrap();
        let enc = encoder_from_pair(&optimal_features(&m, 2).unwrap(), &m.rows, &m.p_c).unwrap();
        let ex = probe_examples(&enc, &m.p_c, |t| p.class_of(t)).unwrap();
        let (_, err) = linear_probe(&ex, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn probe_at_chance_on_random_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = 3;
        let ex: Vec<ProbeExample> = (0..3000)
            .map(|_| ProbeExample {
                features: DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                class: rng.gen_range(1..=r),
                weight: 1.0,
            })
            .collect();
        let (_, err) = linear_probe(&ex, 1e-3).unwrap();
        let chance = 1.0 - 1.0 / r as f64;
        assert!((err - chance).abs() < 0.05, "{err}");
    }

    #[test]
    fn probe_rejects_singular_system_without_ridge() {
        let ex: Vec<ProbeExample> = (0..6)
            .map(|i| ProbeExample {
                features: DVector::from_vec(vec![i as f64, 2.0 * i as f64]),
                class: i % 2,
                weight: 1.0,
            })
            .collect();
        assert!(matches!(linear_probe(&ex, 0.0), Err(LabError::Numeric(_))));
        assert!(linear_probe(&ex, 1e-3).is_ok());
    }
}
