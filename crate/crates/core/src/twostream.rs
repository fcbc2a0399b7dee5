//! Contiguous token groups, content/query causal masks, a two-stream
//! attention layer and the semi-autoregressive loss built on them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LabError, Result};
use crate::generation::LinearAttentionModel;
use crate::toy::{LabeledSequence, TokenId};

/// Group index per position, 1-based and non-decreasing in steps of one.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct GroupAssignment {
    groups: Vec<usize>,
}

impl GroupAssignment {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(LabError::domain("group sizes must be nonempty and positive"));
        }
        let groups = sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| std::iter::repeat_n(g + 1, n))
            .collect();
        Ok(GroupAssignment { groups })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// f(i) for 0-based position i.
    pub fn group_of(&self, i: usize) -> usize {
        self.groups[i]
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.last().copied().unwrap_or(0)
    }

    /// 0-based positions of group g.
    pub fn members(&self, g: usize) -> std::ops::Range<usize> {
        let start = self.groups.partition_point(|&x| x < g);
        let end = self.groups.partition_point(|&x| x <= g);
        start..end
    }

    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.group_count()).map(|g| self.members(g).len()).collect()
    }
}

pub fn partition_groups(s: usize, g1: usize, t: usize) -> Result<GroupAssignment> {
    if t == 0 || g1 == 0 || g1 > t || s < g1 {
        return Err(LabError::domain(format!(
            "grouping needs 1 <= g1 <= t and s >= g1 (got s={s}, g1={g1}, t={t})"
        )));
    }
    let mut sizes = vec![g1];
    let mut covered = g1;
    while covered < s {
        let n = t.min(s - covered);
        sizes.push(n);
        covered += n;
    }
    GroupAssignment::from_sizes(&sizes)
}

/// Every contiguous assignment of s positions (2^(s−1) of them).
pub fn all_assignments(s: usize) -> Vec<GroupAssignment> {
    if s == 0 {
        return Vec::new();
    }
    (0..1usize << (s - 1))
        .map(|cuts| {
            let mut sizes = vec![1];
            for i in 0..s - 1 {
                if cuts >> i & 1 == 1 {
                    sizes.push(1);
                } else {
                    *sizes.last_mut().unwrap() += 1;
                }
            }
            GroupAssignment::from_sizes(&sizes).expect("sizes are positive")
        })
        .collect()
}

/// `g1=1,t=2` as written in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupingSpec {
    pub g1: usize,
    pub t: usize,
}

impl GroupingSpec {
    pub fn realize(&self, s: usize) -> Result<GroupAssignment> {
        partition_groups(s, self.g1, self.t)
    }
}

impl fmt::Display for GroupingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g1={},t={}", self.g1, self.t)
    }
}

impl FromStr for GroupingSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let mut g1 = None;
        let mut t = None;
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| LabError::domain(format!("expected key=value in '{part}'")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| LabError::domain(format!("'{v}' is not a group size")))?;
            match k.trim() {
                "g1" => g1 = Some(v),
                "t" => t = Some(v),
                other => return Err(LabError::domain(format!("unknown grouping key '{other}'"))),
            }
        }
        match (g1, t) {
            (Some(g1), Some(t)) if g1 >= 1 && g1 <= t => Ok(GroupingSpec { g1, t }),
            _ => Err(LabError::domain(format!("grouping '{s}' needs 1 <= g1 <= t"))),
        }
    }
}

impl Serialize for GroupingSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupingSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Additive masks with entries 0 (allowed) or −∞ (forbidden).
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMaskPair {
    pub content: DMatrix<f64>,
    pub query: DMatrix<f64>,
}

pub fn build_masks(a: &GroupAssignment) -> CausalMaskPair {
    let s = a.len();
    let entry = |allowed: bool| if allowed { 0.0 } else { f64::NEG_INFINITY };
    CausalMaskPair {
        content: DMatrix::from_fn(s, s, |i, j| entry(a.group_of(i) >= a.group_of(j))),
        query: DMatrix::from_fn(s, s, |i, j| entry(a.group_of(i) > a.group_of(j))),
    }
}

impl CausalMaskPair {
    pub fn size(&self) -> usize {
        self.content.nrows()
    }

    pub fn content_allows(&self, i: usize, j: usize) -> bool {
        self.content[(i, j)] == 0.0
    }

    pub fn query_allows(&self, i: usize, j: usize) -> bool {
        self.query[(i, j)] == 0.0
    }

    /// Long-format dump, 1-based positions, 0 = allowed and 1 = forbidden.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "stream,row,col,forbidden")?;
        for (name, m) in [("content", &self.content), ("query", &self.query)] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    writeln!(w, "{name},{},{},{}", i + 1, j + 1, u8::from(m[(i, j)] != 0.0))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
}

impl AttentionWeights {
    pub fn random<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || DMatrix::from_fn(d, d, |_, _| rng.gen_range(-scale..=scale));
        AttentionWeights { wq: draw(), wk: draw(), wv: draw() }
    }
}

/// Softmax attention restricted to allowed keys; rows with none output zero.
fn masked_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, mask: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = (q.ncols() as f64).sqrt();
    let mut out = DMatrix::zeros(q.nrows(), v.ncols());
    for i in 0..q.nrows() {
        let allowed: Vec<usize> = (0..k.nrows()).filter(|&j| mask[(i, j)] == 0.0).collect();
        if allowed.is_empty() {
            continue;
        }
        let logits: Vec<f64> = allowed.iter().map(|&j| q.row(i).dot(&k.row(j)) / scale).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut row = out.row_mut(i);
        for (&j, w) in allowed.iter().zip(&weights) {
            row += v.row(j) * (w / z);
        }
    }
    out
}

/// One layer of content (H) and query (G) attention with shared weights.
/// The query stream reads keys and values from H.
pub fn two_stream_layer(
    h: &DMatrix<f64>,
    g: &DMatrix<f64>,
    masks: &CausalMaskPair,
    w: &AttentionWeights,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (s, d) = h.shape();
    if g.shape() != (s, d) || masks.size() != s || masks.query.shape() != (s, s) {
        return Err(LabError::domain(format!(
            "shape mismatch: H {:?}, G {:?}, masks {}×{}",
            h.shape(),
            g.shape(),
            masks.size(),
            masks.content.ncols()
        )));
    }
    for m in [&w.wq, &w.wk, &w.wv] {
        if m.nrows() != d {
            return Err(LabError::domain(format!("weights expect dim {}, states have {d}", m.nrows())));
        }
    }
    let k = h * &w.wk;
    let v = h * &w.wv;
    let h_out = masked_attention(&(h * &w.wq), &k, &v, &masks.content);
    let g_out = masked_attention(&(g * &w.wq), &k, &v, &masks.query);
    Ok((h_out, g_out))
}

/// Token and learned position embeddings feeding one two-stream layer.
/// H⁰ = E[x_i] + P_i and G⁰ = P_i.
#[derive(Clone, Debug)]
pub struct TwoStreamModel {
    pub embed: DMatrix<f64>,
    pub positions: DMatrix<f64>,
    pub weights: AttentionWeights,
    /// d × N.
    pub out: DMatrix<f64>,
}

impl TwoStreamModel {
    pub fn random<R: Rng + ?Sized>(vocab: usize, s: usize, d: usize, scale: f64, rng: &mut R) -> Self {
        TwoStreamModel {
            embed: DMatrix::from_fn(vocab, d, |_, _| rng.gen_range(-scale..=scale)),
            positions: DMatrix::from_fn(s, d, |_, _| rng.gen_range(-scale..=scale)),
            weights: AttentionWeights::random(d, scale, rng),
            out: DMatrix::from_fn(d, vocab, |_, _| rng.gen_range(-scale..=scale)),
        }
    }

    pub fn initial_states(&self, tokens: &[TokenId]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let s = tokens.len();
        if s > self.positions.nrows() {
            return Err(LabError::domain(format!(
                "sequence of {s} exceeds {} learned positions",
                self.positions.nrows()
            )));
        }
        let g = self.positions.rows(0, s).into_owned();
        let mut h = g.clone();
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.embed.nrows() {
                return Err(LabError::domain(format!("token {t} outside vocabulary")));
            }
            let mut row = h.row_mut(i);
            row += self.embed.row(t);
        }
        Ok((h, g))
    }

    pub fn forward(&self, tokens: &[TokenId], a: &GroupAssignment) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if a.len() != tokens.len() {
            return Err(LabError::domain("assignment does not cover the sequence"));
        }
        let (h, g) = self.initial_states(tokens)?;
        two_stream_layer(&h, &g, &build_masks(a), &self.weights)
    }
}

fn normalized(z: DVector<f64>) -> DVector<f64> {
    let n = z.norm();
    if n > 0.0 {
        z / n
    } else {
        z
    }
}

/// Normalized predictions for every position in groups 2..l, each made from
/// the tokens of earlier groups only.
pub trait GroupPredictor {
    fn predict_groups(&self, tokens: &[TokenId], a: &GroupAssignment) -> Result<Vec<(usize, DVector<f64>)>>;
}

impl GroupPredictor for LinearAttentionModel {
    fn predict_groups(&self, tokens: &[TokenId], a: &GroupAssignment) -> Result<Vec<(usize, DVector<f64>)>> {
        if a.len() != tokens.len() {
            return Err(LabError::domain("assignment does not cover the sequence"));
        }
        let mut out = Vec::new();
        for g in 2..=a.group_count() {
            let members = a.members(g);
            let p = self.predict(&tokens[..members.start])?;
            out.extend(members.map(|i| (i, p.clone())));
        }
        Ok(out)
    }
}

impl GroupPredictor for TwoStreamModel {
    fn predict_groups(&self, tokens: &[TokenId], a: &GroupAssignment) -> Result<Vec<(usize, DVector<f64>)>> {
        let (_, g) = self.forward(tokens, a)?;
        let first = a.members(1).end;
        Ok((first..tokens.len())
            .map(|i| (i, normalized(self.out.tr_mul(&g.row(i).transpose()))))
            .collect())
    }
}

fn token_loss(p: &DVector<f64>, target: TokenId, p_g: &[f64]) -> f64 {
    -p[target] + p_g.iter().zip(p.iter()).map(|(g, v)| g * v * v).sum::<f64>()
}

/// Per-group mean token loss for groups 2..l, in group order.
fn group_losses<M: GroupPredictor + ?Sized>(
    model: &M,
    x: &LabeledSequence,
    a: &GroupAssignment,
    p_g: &[f64],
) -> Result<Vec<f64>> {
    let preds = model.predict_groups(&x.tokens, a)?;
    let mut sums = vec![(0.0, 0usize); a.group_count() + 1];
    for (i, p) in &preds {
        let slot = &mut sums[a.group_of(*i)];
        slot.0 += token_loss(p, x.tokens[*i], p_g);
        slot.1 += 1;
    }
    Ok(sums[2..].iter().map(|&(v, n)| v / n as f64).collect())
}

/// Mean over groups 2..l of the mean token loss within each group.
pub fn semi_ar_loss<M: GroupPredictor + ?Sized>(
    model: &M,
    x: &LabeledSequence,
    a: &GroupAssignment,
    p_g: &[f64],
) -> Result<f64> {
    if a.group_count() < 2 {
        return Err(LabError::domain("semi-autoregressive loss needs at least two groups"));
    }
    let losses = group_losses(model, x, a, p_g)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Groups predicted under every first-group size g1 ∈ 1..=t, pooled with
/// equal weight per group. Each prefix length 1..s−1 starts exactly one
/// pooled group, which is what ties this to the windowed next-token target.
pub fn semi_ar_objective<M: GroupPredictor + ?Sized>(
    model: &M,
    x: &LabeledSequence,
    t: usize,
    p_g: &[f64],
) -> Result<f64> {
    let s = x.tokens.len();
    let mut acc = 0.0;
    let mut n = 0usize;
    for g1 in 1..=t.min(s - 1).max(1) {
        let a = partition_groups(s, g1, t)?;
        for loss in group_losses(model, x, &a, p_g)? {
            acc += loss;
            n += 1;
        }
    }
    if n == 0 {
        return Err(LabError::domain("no predicted groups"));
    }
    Ok(acc / n as f64)
}

/// Next-token loss of a two-stream model computed without group masks: the
/// query at position k attends over the k−1 earlier token states with an
/// ordinary softmax.
pub fn plain_causal_loss(model: &TwoStreamModel, x: &LabeledSequence, p_g: &[f64]) -> Result<f64> {
    let s = x.tokens.len();
    if s < 2 {
        return Err(LabError::domain("need s >= 2"));
    }
    let (h, _) = model.initial_states(&x.tokens)?;
    let w = &model.weights;
    let keys = &h * &w.wk;
    let values = &h * &w.wv;
    let scale = (w.wq.nrows() as f64).sqrt();
    let mut total = 0.0;
    for k in 1..s {
        let q = model.positions.row(k) * &w.wq;
        let logits: Vec<f64> = (0..k).map(|j| q.dot(&keys.row(j)) / scale).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut ctx = DVector::zeros(values.ncols());
        for (j, ej) in e.iter().enumerate() {
            ctx += values.row(j).transpose() * (ej / z);
        }
        let p = normalized(model.out.tr_mul(&ctx));
        total += token_loss(&p, x.tokens[k], p_g);
    }
    Ok(total / (s - 1) as f64)
}

/// Exact distribution over (conditioning prefix length, 1-based target
/// position) induced by the pooled semi-AR objective.
pub fn semi_ar_target_distribution(s: usize, t: usize) -> Result<BTreeMap<(usize, usize), f64>> {
    if s < 2 {
        return Err(LabError::domain("need s >= 2"));
    }
    let mut groups = Vec::new();
    for g1 in 1..=t.min(s - 1) {
        let a = partition_groups(s, g1, t)?;
        for g in 2..=a.group_count() {
            groups.push(a.members(g));
        }
    }
    let w = 1.0 / groups.len() as f64;
    let mut dist = BTreeMap::new();
    for m in groups {
        let prefix = m.start;
        let each = w / m.len() as f64;
        for i in m {
            *dist.entry((prefix, i + 1)).or_insert(0.0) += each;
        }
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::sequence_gen_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partitions() {
        assert_eq!(partition_groups(4, 1, 2).unwrap().groups(), &[1, 2, 2, 3]);
        assert_eq!(partition_groups(5, 2, 2).unwrap().sizes(), vec![2, 2, 1]);
        assert_eq!(partition_groups(5, 1, 1).unwrap().groups(), &[1, 2, 3, 4, 5]);
        assert!(partition_groups(4, 3, 2).is_err());
        assert!(partition_groups(4, 0, 2).is_err());
        assert!(partition_groups(1, 2, 2).is_err());
        let a = partition_groups(4, 1, 2).unwrap();
        assert_eq!(a.members(2), 1..3);
        assert_eq!(a.group_count(), 3);
    }

    #[test]
    fn enumerates_compositions() {
        for s in 1..=6 {
            let all = all_assignments(s);
            assert_eq!(all.len(), 1 << (s - 1));
            let unique: std::collections::HashSet<_> = all.iter().collect();
            assert_eq!(unique.len(), all.len());
            assert!(all.iter().all(|a| a.len() == s && a.group_of(0) == 1));
        }
    }

    #[test]
    fn grouping_spec_round_trip() {
        let g: GroupingSpec = "g1=1,t=2".parse().unwrap();
        assert_eq!(g, GroupingSpec { g1: 1, t: 2 });
        assert_eq!(g.to_string(), "g1=1,t=2");
        assert!("g1=3,t=2".parse::<GroupingSpec>().is_err());
        assert!("g1=1".parse::<GroupingSpec>().is_err());
        assert!("g1=1,t=2,x=3".parse::<GroupingSpec>().is_err());
    }

    #[test]
    fn mask_case_split() {
        let m = build_masks(&partition_groups(4, 1, 2).unwrap());
        let content: Vec<usize> = (0..4).filter(|&j| m.content_allows(1, j)).collect();
        let query: Vec<usize> = (0..4).filter(|&j| m.query_allows(1, j)).collect();
        assert_eq!(content, vec![0, 1, 2]);
        assert_eq!(query, vec![0]);
        for i in 0..4 {
            assert!(m.content_allows(i, i));
            assert!(!m.query_allows(i, i));
        }
    }

    #[test]
    fn singleton_groups_give_standard_causal_masks() {
        let m = build_masks(&partition_groups(5, 1, 1).unwrap());
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.content_allows(i, j), j <= i);
                assert_eq!(m.query_allows(i, j), j < i);
            }
        }
    }

    #[test]
    fn query_allowed_set_is_content_minus_same_group() {
        for s in 1..=6 {
            for a in all_assignments(s) {
                let m = build_masks(&a);
                for i in 0..s {
                    for j in 0..s {
                        let same = a.group_of(i) == a.group_of(j);
                        assert_eq!(m.content_allows(i, j) && !same, m.query_allows(i, j));
                        if m.query_allows(i, j) {
                            assert!(a.group_of(j) < a.group_of(i));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn csv_marks_forbidden_with_one() {
        let m = build_masks(&partition_groups(2, 1, 1).unwrap());
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("stream,row,col,forbidden\n"));
        assert!(text.contains("content,1,1,0\n"));
        assert!(text.contains("query,1,1,1\n"));
        assert!(text.contains("query,2,1,0\n"));
        assert_eq!(text.lines().count(), 1 + 8);
    }

    #[test]
    fn length_one_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let h = DMatrix::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
        let g = DMatrix::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
        let masks = build_masks(&partition_groups(1, 1, 1).unwrap());
        let (h2, g2) = two_stream_layer(&h, &g, &masks, &w).unwrap();
        assert!((h2 - &h * &w.wv).abs().max() < 1e-15);
        assert_eq!(g2.norm(), 0.0);
    }

    #[test]
    fn equal_logits_average_allowed_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = AttentionWeights::random(2, 1.0, &mut rng);
        w.wq.fill(0.0);
        let h = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let a = partition_groups(4, 1, 2).unwrap();
        let (h2, g2) = two_stream_layer(&h, &h, &build_masks(&a), &w).unwrap();
        let v = &h * &w.wv;
        let mean = |rows: &[usize]| {
            let mut acc = nalgebra::RowDVector::zeros(2);
            for &r in rows {
                acc += v.row(r);
            }
            acc / rows.len() as f64
        };
        assert!((h2.row(1) - mean(&[0, 1, 2])).abs().max() < 1e-15);
        assert!((g2.row(3) - mean(&[0, 1, 2])).abs().max() < 1e-15);
        assert!((g2.row(2) - mean(&[0])).abs().max() < 1e-15);
    }

    #[test]
    fn layer_rejects_bad_shapes() {
        let w = AttentionWeights::random(2, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let masks = build_masks(&partition_groups(3, 1, 1).unwrap());
        let h = DMatrix::zeros(3, 2);
        assert!(two_stream_layer(&h, &DMatrix::zeros(2, 2), &masks, &w).is_err());
        assert!(two_stream_layer(&DMatrix::zeros(3, 3), &DMatrix::zeros(3, 3), &masks, &w).is_err());
    }

    #[test]
    fn forbidden_positions_do_not_reach_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let a = partition_groups(5, 2, 2).unwrap();
        let masks = build_masks(&a);
        let h = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let g = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let (_, base) = two_stream_layer(&h, &g, &masks, &w).unwrap();
        for i in 0..5 {
            for j in (0..5).filter(|&j| !masks.query_allows(i, j)) {
                let mut h2 = h.clone();
                h2.row_mut(j).iter_mut().for_each(|x| *x += rng.gen_range(-5.0..5.0));
                let (_, moved) = two_stream_layer(&h2, &g, &masks, &w).unwrap();
                assert_eq!(moved.row(i), base.row(i));
            }
        }
    }

    fn seq(tokens: Vec<TokenId>) -> LabeledSequence {
        LabeledSequence { tokens, label: 1 }
    }

    #[test]
    fn reductions_of_semi_ar_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = LinearAttentionModel::random(8, 3, 1.0, &mut rng);
        let x = seq(vec![0, 3, 5, 6, 2]);
        let p_g: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..0.25)).collect();
        let singles = partition_groups(5, 1, 1).unwrap();
        let ar = sequence_gen_loss(&m, &x, &p_g).unwrap();
        assert!((semi_ar_loss(&m, &x, &singles, &p_g).unwrap() - ar).abs() < 1e-12);
        let two = GroupAssignment::from_sizes(&[4, 1]).unwrap();
        let p = m.predict(&x.tokens[..4]).unwrap();
        let last = token_loss(&p, 2, &p_g);
        assert!((semi_ar_loss(&m, &x, &two, &p_g).unwrap() - last).abs() < 1e-15);
        assert!(semi_ar_loss(&m, &x, &GroupAssignment::from_sizes(&[5]).unwrap(), &p_g).is_err());
    }

    #[test]
    fn two_stream_t1_matches_plain_causal_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = TwoStreamModel::random(10, 6, 4, 0.7, &mut rng);
        let x = seq(vec![1, 4, 9, 0, 7, 3]);
        let p_g: Vec<f64> = (0..10).map(|_| 0.1).collect();
        let reference = plain_causal_loss(&model, &x, &p_g).unwrap();
        let a = partition_groups(6, 1, 1).unwrap();
        let got = semi_ar_loss(&model, &x, &a, &p_g).unwrap();
        assert!((got - reference).abs() < 1e-12, "{got} vs {reference}");
    }

    #[test]
    fn target_distribution_is_windowed_next_token() {
        for s in 2..=6 {
            for t in 1..=3 {
                let dist = semi_ar_target_distribution(s, t).unwrap();
                let total: f64 = dist.values().sum();
                assert!((total - 1.0).abs() < 1e-12);
                for k in 1..s {
                    let hi = (k + t).min(s);
                    for pos in k + 1..=hi {
                        let want = 1.0 / ((s - 1) * (hi - k)) as f64;
                        assert!((dist[&(k, pos)] - want).abs() < 1e-12, "s={s} t={t} k={k} pos={pos}");
                    }
                }
                assert_eq!(dist.len(), (1..s).map(|k| (k + t).min(s) - k).sum::<usize>());
            }
        }
    }

    #[test]
    fn pooled_objective_equals_expected_windowed_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = LinearAttentionModel::random(9, 3, 1.0, &mut rng);
        let x = seq(vec![2, 8, 1, 4, 4, 0]);
        let p_g: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..0.2)).collect();
        for t in 1..=3 {
            let dist = semi_ar_target_distribution(6, t).unwrap();
            let mut expected = 0.0;
            for (&(k, pos), w) in &dist {
                let p = m.predict(&x.tokens[..k]).unwrap();
                expected += w * token_loss(&p, x.tokens[pos - 1], &p_g);
            }
            let got = semi_ar_objective(&m, &x, t, &p_g).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
    }
}
