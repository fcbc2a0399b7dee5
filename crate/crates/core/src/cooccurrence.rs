//! Exact and empirical joint distributions P_M(X, X⁺) over (conditional text,
//! target token) pairs, and the normalized matrix
//! Ā = A / sqrt(P_C · P_G) built from them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{LabError, Result};
use crate::objectives::{admissible_ratios, sample_pair, unmasked_count, ObjectiveSpec};
use crate::toy::{sample_sequence, ToyParams, TokenId};

/// Row-count ceiling for the exact builders.
pub const DEFAULT_ROW_BUDGET: usize = 200_000;
/// Ceiling on rows × cols when materializing a dense Ā.
pub const DEFAULT_DENSE_BUDGET: usize = 16_000_000;

/// Conditioning context. Prefixes are keyed by their token list, unmasked
/// sets by sorted (position, token) pairs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionalText {
    Prefix(Vec<TokenId>),
    Unmasked(Vec<(usize, TokenId)>),
}

impl ConditionalText {
    pub fn len(&self) -> usize {
        match self {
            ConditionalText::Prefix(t) => t.len(),
            ConditionalText::Unmasked(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        match self {
            ConditionalText::Prefix(t) => t.clone(),
            ConditionalText::Unmasked(t) => t.iter().map(|&(_, tok)| tok).collect(),
        }
    }

    /// 1-based positions covered by this context.
    pub fn positions(&self, params: &ToyParams) -> Vec<usize> {
        match self {
            ConditionalText::Prefix(t) => (1..=t.len()).collect(),
            ConditionalText::Unmasked(t) => {
                let _ = params;
                t.iter().map(|&(p, _)| p).collect()
            }
        }
    }

    /// Canonical string key, e.g. `p:0.6` or `u:1=0;3=14`.
    pub fn key(&self) -> String {
        let mut out = String::new();
        match self {
            ConditionalText::Prefix(t) => {
                out.push_str("p:");
                for (i, tok) in t.iter().enumerate() {
                    if i > 0 {
                        out.push('.');
                    }
                    let _ = write!(out, "{tok}");
                }
            }
            ConditionalText::Unmasked(t) => {
                out.push_str("u:");
                for (i, (pos, tok)) in t.iter().enumerate() {
                    if i > 0 {
                        out.push(';');
                    }
                    let _ = write!(out, "{pos}={tok}");
                }
            }
        }
        out
    }

    /// Shared class of every token, or an error if the tokens disagree.
    pub fn class(&self, labeler: impl Fn(TokenId) -> usize) -> Result<usize> {
        let toks = self.tokens();
        let first = *toks
            .first()
            .ok_or_else(|| LabError::domain("empty conditional text has no label"))?;
        let y = labeler(first);
        if toks.iter().any(|&t| labeler(t) != y) {
            return Err(LabError::domain(format!(
                "conditional text {} mixes classes",
                self.key()
            )));
        }
        Ok(y)
    }
}

/// Sparse joint distribution with ordered row and column catalogs.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    rows: Vec<ConditionalText>,
    cols: Vec<TokenId>,
    /// (row index, col index, mass), sorted by row then column.
    entries: Vec<(usize, usize, f64)>,
}

impl JointDistribution {
    /// Accumulates masses per (conditional, target) key; zero masses are
    /// dropped. The result is not renormalized.
    pub fn from_masses<I>(masses: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((ConditionalText, TokenId), f64)>,
    {
        let mut acc: BTreeMap<(ConditionalText, TokenId), f64> = BTreeMap::new();
        for (key, m) in masses {
            if !m.is_finite() || m < 0.0 {
                return Err(LabError::domain(format!("invalid probability mass {m}")));
            }
            *acc.entry(key).or_insert(0.0) += m;
        }
        Ok(Self::from_sorted(acc))
    }

    /// Empirical distribution of the given draws.
    pub fn from_samples<I>(draws: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ConditionalText, TokenId)>,
    {
        let mut counts: BTreeMap<(ConditionalText, TokenId), u64> = BTreeMap::new();
        let mut n = 0u64;
        for key in draws {
            *counts.entry(key).or_insert(0) += 1;
            n += 1;
        }
        if n == 0 {
            return Err(LabError::domain("no samples"));
        }
        let n = n as f64;
        Ok(Self::from_sorted(
            counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        ))
    }

    fn from_sorted(acc: BTreeMap<(ConditionalText, TokenId), f64>) -> Self {
        let mut col_set: Vec<TokenId> = acc
            .iter()
            .filter(|(_, &m)| m > 0.0)
            .map(|((_, c), _)| *c)
            .collect();
        col_set.sort_unstable();
        col_set.dedup();
        let col_index: HashMap<TokenId, usize> =
            col_set.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        let mut rows: Vec<ConditionalText> = Vec::new();
        let mut entries = Vec::with_capacity(acc.len());
        for ((row, col), m) in acc {
            if m <= 0.0 {
                continue;
            }
            if rows.last() != Some(&row) {
                rows.push(row);
            }
            entries.push((rows.len() - 1, col_index[&col], m));
        }
        JointDistribution {
            rows,
            cols: col_set,
            entries,
        }
    }

    pub fn rows(&self) -> &[ConditionalText] {
        &self.rows
    }

    pub fn cols(&self) -> &[TokenId] {
        &self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.2).sum()
    }

    /// P_C per row.
    pub fn row_marginals(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.rows.len()];
        for &(i, _, m) in &self.entries {
            p[i] += m;
        }
        p
    }

    /// P_G per column.
    pub fn col_marginals(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.cols.len()];
        for &(_, j, m) in &self.entries {
            p[j] += m;
        }
        p
    }

    pub fn row_index(&self) -> HashMap<&ConditionalText, usize> {
        self.rows.iter().enumerate().map(|(i, r)| (r, i)).collect()
    }

    pub fn get(&self, row: &ConditionalText, col: TokenId) -> f64 {
        let Ok(i) = self.rows.binary_search(row) else {
            return 0.0;
        };
        let Ok(j) = self.cols.binary_search(&col) else {
            return 0.0;
        };
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// Entries keyed by (conditional, target), in catalog order.
    pub fn iter_keyed(&self) -> impl Iterator<Item = (&ConditionalText, TokenId, f64)> + '_ {
        self.entries
            .iter()
            .map(move |&(i, j, m)| (&self.rows[i], self.cols[j], m))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.2 *= c;
        }
        out
    }

    /// Weighted sum of joints, renormalized to total mass one.
    pub fn mixture(parts: &[(f64, &JointDistribution)]) -> Result<Self> {
        let total_w: f64 = parts.iter().map(|p| p.0).sum();
        if parts.is_empty() || total_w <= 0.0 {
            return Err(LabError::domain("mixture needs positive total weight"));
        }
        JointDistribution::from_masses(parts.iter().flat_map(|(w, j)| {
            j.iter_keyed()
                .map(move |(r, c, m)| ((r.clone(), c), m * w / total_w))
        }))
    }

    /// Total-variation distance ½ Σ |a − b| over the union of supports.
    pub fn tv_distance(&self, other: &JointDistribution) -> f64 {
        let mut diff: BTreeMap<(&ConditionalText, TokenId), f64> = BTreeMap::new();
        for (r, c, m) in self.iter_keyed() {
            *diff.entry((r, c)).or_insert(0.0) += m;
        }
        for (r, c, m) in other.iter_keyed() {
            *diff.entry((r, c)).or_insert(0.0) -= m;
        }
        0.5 * diff.values().map(|d| d.abs()).sum::<f64>()
    }

    /// Sparse triplet CSV `row_key,col_token,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row_key,col_token,value")?;
        for (r, c, m) in self.iter_keyed() {
            writeln!(w, "{},{},{}", r.key(), c, m)?;
        }
        Ok(())
    }
}

/// Exact builders over the enumerated toy support.
#[derive(Clone, Copy, Debug)]
pub struct ExactBuilder {
    pub max_rows: usize,
}

impl Default for ExactBuilder {
    fn default() -> Self {
        ExactBuilder {
            max_rows: DEFAULT_ROW_BUDGET,
        }
    }
}

fn check_rows(what: &str, needed: Option<usize>, limit: usize) -> Result<()> {
    match needed {
        Some(n) if n <= limit => Ok(()),
        other => Err(LabError::Resource {
            what: format!("{what} exact rows (use the sampler path instead)"),
            needed: other.unwrap_or(usize::MAX),
            limit,
        }),
    }
}

fn prefix_rows(p: &ToyParams) -> Option<usize> {
    let mut total = 0usize;
    let mut pow = 1usize;
    for _ in 1..p.length {
        pow = pow.checked_mul(p.slots)?;
        total = total.checked_add(pow)?;
    }
    total.checked_mul(p.classes)
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn masked_rows(p: &ToyParams, u: usize) -> Option<usize> {
    binomial(p.length, u)
        .checked_mul(p.slots.checked_pow(u as u32)?)?
        .checked_mul(p.classes)
}

/// All k-subsets of 0..n in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] != i + n - k) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Slot patterns (0-based) of the given length in lexicographic order.
fn slot_patterns(len: usize, slots: usize) -> impl Iterator<Item = Vec<usize>> {
    let count = slots.pow(len as u32);
    (0..count).map(move |mut idx| {
        let mut v = vec![0; len];
        for x in v.iter_mut().rev() {
            *x = idx % slots;
            idx /= slots;
        }
        v
    })
}

fn tok(p: &ToyParams, pos0: usize, class0: usize, slot0: usize) -> TokenId {
    (pos0 * p.classes + class0) * p.slots + slot0
}

impl ExactBuilder {
    /// Autoregressive joint: prefix lengths 1..s-1 weighted uniformly, target
    /// is the next token.
    pub fn ar(&self, params: &ToyParams) -> Result<JointDistribution> {
        self.dar(params, 1)
    }

    /// Diversity-enhanced AR joint: target position uniform over
    /// k+1..min(k+t, s).
    pub fn dar(&self, params: &ToyParams, t: usize) -> Result<JointDistribution> {
        params.validate()?;
        if t < 1 {
            return Err(LabError::domain("dar lookahead width t must be >= 1"));
        }
        check_rows("prefix", prefix_rows(params), self.max_rows)?;
        let (r, s, big_t) = (params.classes, params.length, params.slots);
        let mut masses = Vec::new();
        for class0 in 0..r {
            for k in 1..s {
                let window = (k + t).min(s) - k;
                let mass = 1.0 / ((s - 1) as f64 * r as f64 * (big_t as f64).powi(k as i32 + 1) * window as f64);
                for pattern in slot_patterns(k, big_t) {
                    let prefix: Vec<TokenId> = pattern
                        .iter()
                        .enumerate()
                        .map(|(pos0, &j)| tok(params, pos0, class0, j))
                        .collect();
                    let row = ConditionalText::Prefix(prefix);
                    for target_pos0 in k..k + window {
                        for j in 0..big_t {
                            masses.push(((row.clone(), tok(params, target_pos0, class0, j)), mass));
                        }
                    }
                }
            }
        }
        JointDistribution::from_masses(masses)
    }

    /// Masked joint at ratio rho: uniform unmasked set of size u = s(1-rho),
    /// target uniform over the masked positions.
    pub fn masked(&self, params: &ToyParams, rho: f64) -> Result<JointDistribution> {
        params.validate()?;
        let u = unmasked_count(params.length, rho)?;
        if u > params.length - 1 {
            return Err(LabError::domain("unmasked count must be <= s-1"));
        }
        check_rows("masked", masked_rows(params, u), self.max_rows)?;
        let (r, s, big_t) = (params.classes, params.length, params.slots);
        let mass = 1.0
            / (r as f64 * binomial(s, u) as f64 * (s - u) as f64 * (big_t as f64).powi(u as i32 + 1));
        let mut masses = Vec::new();
        for class0 in 0..r {
            for keep in combinations(s, u) {
                let masked: Vec<usize> = (0..s).filter(|i| !keep.contains(i)).collect();
                for pattern in slot_patterns(u, big_t) {
                    let row = ConditionalText::Unmasked(
                        keep.iter()
                            .zip(&pattern)
                            .map(|(&pos0, &j)| (pos0 + 1, tok(params, pos0, class0, j)))
                            .collect(),
                    );
                    for &pos0 in &masked {
                        for j in 0..big_t {
                            masses.push(((row.clone(), tok(params, pos0, class0, j)), mass));
                        }
                    }
                }
            }
        }
        JointDistribution::from_masses(masses)
    }

    /// Variable-length masked joint: uniform mixture of the masked joints at
    /// every admissible ratio in [lo, hi].
    pub fn vlm(&self, params: &ToyParams, lo: f64, hi: f64) -> Result<JointDistribution> {
        let ratios = admissible_ratios(params.length, lo, hi)?;
        if ratios.is_empty() {
            ObjectiveSpec::Vlm { lo, hi }.validate(params.length)?;
        }
        let total_rows = ratios
            .iter()
            .map(|&rho| masked_rows(params, unmasked_count(params.length, rho).ok()?))
            .try_fold(0usize, |acc, n| acc.checked_add(n?));
        check_rows("vlm", total_rows, self.max_rows)?;
        let parts = ratios
            .iter()
            .map(|&rho| self.masked(params, rho))
            .collect::<Result<Vec<_>>>()?;
        let weighted: Vec<(f64, &JointDistribution)> = parts.iter().map(|j| (1.0, j)).collect();
        JointDistribution::mixture(&weighted)
    }

    pub fn build(&self, spec: &ObjectiveSpec, params: &ToyParams) -> Result<JointDistribution> {
        match *spec {
            ObjectiveSpec::Ar => self.ar(params),
            ObjectiveSpec::Masked { rho } => self.masked(params, rho),
            ObjectiveSpec::Dar { t } => self.dar(params, t),
            ObjectiveSpec::Vlm { lo, hi } => self.vlm(params, lo, hi),
        }
    }
}

pub fn build_ar_joint(params: &ToyParams) -> Result<JointDistribution> {
    ExactBuilder::default().ar(params)
}

pub fn build_masked_joint(params: &ToyParams, rho: f64) -> Result<JointDistribution> {
    ExactBuilder::default().masked(params, rho)
}

pub fn build_dar_joint(params: &ToyParams, t: usize) -> Result<JointDistribution> {
    ExactBuilder::default().dar(params, t)
}

pub fn build_vlm_joint(params: &ToyParams, lo: f64, hi: f64) -> Result<JointDistribution> {
    ExactBuilder::default().vlm(params, lo, hi)
}

/// Empirical joint from `n` draws: class uniform, sequence sampled, then one
/// (conditional, target) pair from the objective.
pub fn build_joint_from_sampler<R: Rng + ?Sized>(
    spec: &ObjectiveSpec,
    params: &ToyParams,
    n: usize,
    rng: &mut R,
) -> Result<JointDistribution> {
    if n < 1 {
        return Err(LabError::domain("sample count n must be >= 1"));
    }
    spec.validate(params.length)?;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(1..=params.classes);
        let x = sample_sequence(params, class, rng)?;
        draws.push(sample_pair(spec, &x, rng)?);
    }
    JointDistribution::from_samples(draws)
}

/// Ā with its catalogs and marginals.
#[derive(Clone, Debug)]
pub struct NormalizedMatrix {
    pub rows: Vec<ConditionalText>,
    pub cols: Vec<TokenId>,
    pub p_c: Vec<f64>,
    pub p_g: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

impl NormalizedMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row_key,col_token,value")?;
        for (i, row) in self.rows.iter().enumerate() {
            let key = row.key();
            for (j, col) in self.cols.iter().enumerate() {
                let v = self.matrix[(i, j)];
                if v != 0.0 {
                    writeln!(w, "{key},{col},{v}")?;
                }
            }
        }
        Ok(())
    }
}

pub fn normalize(joint: &JointDistribution) -> Result<NormalizedMatrix> {
    normalize_with_budget(joint, DEFAULT_DENSE_BUDGET)
}

pub fn normalize_with_budget(joint: &JointDistribution, budget: usize) -> Result<NormalizedMatrix> {
    if joint.nnz() == 0 {
        return Err(LabError::domain("cannot normalize an empty joint"));
    }
    let (n, m) = (joint.rows().len(), joint.cols().len());
    let cells = n.saturating_mul(m);
    if cells > budget {
        return Err(LabError::Resource {
            what: "dense normalized matrix cells".into(),
            needed: cells,
            limit: budget,
        });
    }
    let p_c = joint.row_marginals();
    let p_g = joint.col_marginals();
    let mut matrix = DMatrix::zeros(n, m);
    for &(i, j, a) in joint.entries() {
        matrix[(i, j)] = a / (p_c[i] * p_g[j]).sqrt();
    }
    Ok(NormalizedMatrix {
        rows: joint.rows().to_vec(),
        cols: joint.cols().to_vec(),
        p_c,
        p_g,
        matrix,
    })
}
