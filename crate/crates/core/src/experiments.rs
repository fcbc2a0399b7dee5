//! JSON-configured experiment runner. Every experiment writes `report.json`
//! and its CSVs into `<out>/<experiment>/`; all randomness comes from
//! substreams of the config seed.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cooccurrence::{normalize, ExactBuilder, NormalizedMatrix};
use crate::decomposition::{
    encoder_from_pair, gd_factorize, linear_probe, optimal_features, probe_examples, theorem1_residual,
    EncoderTable, GdConfig, ProbeExample, TokenEmbedding,
};
use crate::error::{LabError, Result};
use crate::generation::{gen_loss, theorem4_masked_bound, theorem4_terms, train_model, TrainHparams};
use crate::objectives::{unmasked_count, ObjectiveSpec};
use crate::spectral::{
    connectivity_estimate, labeling_error, singular_spectrum, tail_energy, theorem3_ar_spectrum,
    theorem3_masked_spectrum, SingularSpectrum,
};
use crate::toy::{enumerate_sequences, LabeledSequence, ToyParams, DEFAULT_SEQUENCE_BUDGET};
use crate::twostream::{
    all_assignments, build_masks, plain_causal_loss, semi_ar_loss, two_stream_layer, AttentionWeights,
    GroupAssignment, GroupingSpec, TwoStreamModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Spectrum,
    Theorem1,
    Factorize,
    Probe,
    Genbound,
    Masks,
    Sweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Spectrum,
        ExperimentKind::Theorem1,
        ExperimentKind::Factorize,
        ExperimentKind::Probe,
        ExperimentKind::Genbound,
        ExperimentKind::Masks,
        ExperimentKind::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Theorem1 => "theorem1",
            ExperimentKind::Factorize => "factorize",
            ExperimentKind::Probe => "probe",
            ExperimentKind::Genbound => "genbound",
            ExperimentKind::Masks => "masks",
            ExperimentKind::Sweep => "sweep",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            ExperimentKind::Spectrum => "exact joints, singular spectra, closed forms, tail energies",
            ExperimentKind::Theorem1 => "randomized loss/factorization identity residuals",
            ExperimentKind::Factorize => "gradient-descent factorization vs the truncated SVD",
            ExperimentKind::Probe => "linear probe error on optimal features",
            ExperimentKind::Genbound => "trained linear attention: generation loss, bound terms, gap",
            ExperimentKind::Masks => "two-stream mask dumps and perturbation checks",
            ExperimentKind::Sweep => "mask-ratio and lookahead grids",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExperimentList {
    One(ExperimentKind),
    Many(Vec<ExperimentKind>),
}

impl ExperimentList {
    pub fn kinds(&self) -> Vec<ExperimentKind> {
        match self {
            ExperimentList::One(k) => vec![*k],
            ExperimentList::Many(ks) => ks.clone(),
        }
    }
}

fn default_trials() -> usize {
    100
}
fn default_seeds() -> usize {
    10
}
fn default_reg() -> f64 {
    1e-8
}
fn default_pairs() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentList,
    pub params: ToyParams,
    /// Defaults to `ar` plus `masked:<rho_m>` when that ratio fits s.
    #[serde(default)]
    pub objectives: Option<Vec<ObjectiveSpec>>,
    /// Feature rank t; defaults to the class count.
    #[serde(default)]
    pub rank: Option<usize>,
    /// Mask ratio for the generation bound; 0.5 when absent.
    #[serde(default)]
    pub rho_m: Option<f64>,
    #[serde(default)]
    pub rho_grid: Vec<f64>,
    #[serde(default)]
    pub t_grid: Vec<usize>,
    #[serde(default)]
    pub hparams: TrainHparams,
    #[serde(default)]
    pub factorize: GdConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub assignment: Option<GroupingSpec>,
    #[serde(default = "default_reg")]
    pub probe_reg: f64,
    #[serde(default = "default_pairs")]
    pub connectivity_pairs: usize,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

fn at(path: impl Into<String>) -> impl FnOnce(LabError) -> LabError {
    let path = path.into();
    move |e| match e {
        LabError::Config { .. } => e,
        other => LabError::config(path, other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| LabError::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_json(&text)
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(self.params.classes)
    }

    pub fn rho_m(&self) -> f64 {
        self.rho_m.unwrap_or(0.5)
    }

    pub fn objectives(&self) -> Vec<ObjectiveSpec> {
        match &self.objectives {
            Some(list) => list.clone(),
            None => {
                let masked = ObjectiveSpec::Masked { rho: self.rho_m() };
                if masked.validate(self.params.length).is_ok() {
                    vec![ObjectiveSpec::Ar, masked]
                } else {
                    vec![ObjectiveSpec::Ar]
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate().map_err(at("params"))?;
        let s = self.params.length;
        if self.experiment.kinds().is_empty() {
            return Err(LabError::config("experiment", "no experiment named"));
        }
        for (i, o) in self.objectives.iter().flatten().enumerate() {
            o.validate(s).map_err(at(format!("objectives[{i}]")))?;
        }
        if self.rank() == 0 {
            return Err(LabError::config("rank", "rank must be >= 1"));
        }
        if let Some(rho) = self.rho_m {
            unmasked_count(s, rho).map_err(at("rho_m"))?;
        }
        for (i, &rho) in self.rho_grid.iter().enumerate() {
            unmasked_count(s, rho).map_err(at(format!("rho_grid[{i}]")))?;
        }
        if let Some(i) = self.t_grid.iter().position(|&t| t == 0) {
            return Err(LabError::config(format!("t_grid[{i}]"), "lookahead must be >= 1"));
        }
        self.hparams.validate().map_err(at("hparams"))?;
        if !(self.factorize.lr > 0.0) || self.factorize.steps == 0 {
            return Err(LabError::config("factorize", "needs lr > 0 and steps >= 1"));
        }
        if let Some(g) = self.assignment {
            g.realize(s).map_err(at("assignment"))?;
        }
        if self.probe_reg < 0.0 {
            return Err(LabError::config("probe_reg", "must be >= 0"));
        }
        let kinds = self.experiment.kinds();
        if kinds.contains(&ExperimentKind::Genbound) {
            let u = unmasked_count(s, self.rho_m()).map_err(at("rho_m"))?;
            if u < 2 {
                return Err(LabError::config("rho_m", format!("genbound needs s(1-rho_m) >= 2, got {u}")));
            }
        }
        if (kinds.contains(&ExperimentKind::Genbound) || kinds.contains(&ExperimentKind::Sweep)) && self.seeds == 0 {
            return Err(LabError::config("seeds", "must be >= 1"));
        }
        Ok(())
    }
}

/// Generator for trial `index` of the stream `name`, keyed by SHA-256 of
/// (seed, name, index).
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub experiment: ExperimentKind,
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

/// Runs every experiment named in the config under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    cfg.experiment
        .kinds()
        .into_iter()
        .map(|kind| run_one(cfg, kind, out))
        .collect()
}

pub fn run_one(cfg: &ExperimentConfig, kind: ExperimentKind, out: &Path) -> Result<RunOutcome> {
    let dir = out.join(kind.name());
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let report = match kind {
        ExperimentKind::Spectrum => spectrum(cfg)?,
        ExperimentKind::Theorem1 => theorem1(cfg)?,
        ExperimentKind::Factorize => factorize(cfg, &dir, &mut files)?,
        ExperimentKind::Probe => probe(cfg)?,
        ExperimentKind::Genbound => genbound(cfg, &dir, &mut files)?,
        ExperimentKind::Masks => masks(cfg, &dir, &mut files)?,
        ExperimentKind::Sweep => sweep(cfg, &dir, &mut files)?,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    files.insert(0, "report.json".into());
    let mut warnings = Vec::new();
    if matches!(kind, ExperimentKind::Spectrum | ExperimentKind::Genbound | ExperimentKind::Sweep) {
        let emitted = emit_plot_data(&report, &dir)?;
        files.extend(emitted.written);
        warnings = emitted.warnings;
    }
    Ok(RunOutcome { experiment: kind, dir, files, warnings })
}

#[derive(Debug, Default)]
pub struct Emitted {
    pub written: Vec<String>,
    pub warnings: Vec<String>,
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `spectrum.csv`, `perk.csv` and `connectivity.csv` from the matching
/// report sections. Missing sections are skipped with a warning; empty ones
/// produce header-only files.
pub fn emit_plot_data(report: &Value, dir: &Path) -> Result<Emitted> {
    let mut out = Emitted::default();
    let mut missing = Vec::new();
    let bad = |what: &str| LabError::domain(format!("malformed report section: {what}"));

    match report.get("spectra").and_then(Value::as_array) {
        Some(items) => {
            let mut w = csv_writer(&dir.join("spectrum.csv"))?;
            writeln!(w, "objective,rank,sigma")?;
            for item in items {
                let name = item.get("objective").and_then(Value::as_str).ok_or_else(|| bad("spectra.objective"))?;
                let sigma = item.get("sigma").and_then(Value::as_array).ok_or_else(|| bad("spectra.sigma"))?;
                for (j, v) in sigma.iter().enumerate() {
                    writeln!(w, "{name},{},{}", j + 1, v.as_f64().ok_or_else(|| bad("spectra.sigma"))?)?;
                }
            }
            w.flush()?;
            out.written.push("spectrum.csv".into());
        }
        None => missing.push("spectrum.csv"),
    }

    match report.get("perk").and_then(Value::as_array) {
        Some(items) => {
            let mut w = csv_writer(&dir.join("perk.csv"))?;
            writeln!(w, "model,k,loss")?;
            for item in items {
                let name = item.get("model").and_then(Value::as_str).ok_or_else(|| bad("perk.model"))?;
                let curve = item.get("per_k").and_then(Value::as_array).ok_or_else(|| bad("perk.per_k"))?;
                for point in curve {
                    let k = point.get(0).and_then(Value::as_u64).ok_or_else(|| bad("perk.per_k"))?;
                    let loss = point.get(1).and_then(Value::as_f64).ok_or_else(|| bad("perk.per_k"))?;
                    writeln!(w, "{name},{k},{loss}")?;
                }
            }
            w.flush()?;
            out.written.push("perk.csv".into());
        }
        None => missing.push("perk.csv"),
    }

    match report.get("connectivity").and_then(Value::as_array) {
        Some(items) => {
            let mut w = csv_writer(&dir.join("connectivity.csv"))?;
            writeln!(w, "objective,estimate")?;
            for item in items {
                let name = item.get("objective").and_then(Value::as_str).ok_or_else(|| bad("connectivity.objective"))?;
                let est = item.get("estimate").and_then(Value::as_f64).ok_or_else(|| bad("connectivity.estimate"))?;
                writeln!(w, "{name},{est}")?;
            }
            w.flush()?;
            out.written.push("connectivity.csv".into());
        }
        None => missing.push("connectivity.csv"),
    }

    if !missing.is_empty() {
        out.warnings.push(format!("report has no data for {}; skipped", missing.join(", ")));
    }
    Ok(out)
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn exact_matrix(spec: &ObjectiveSpec, params: &ToyParams) -> Result<NormalizedMatrix> {
    normalize(&ExactBuilder::default().build(spec, params)?)
}

fn closed_form(spec: &ObjectiveSpec, params: &ToyParams) -> Option<SingularSpectrum> {
    match *spec {
        ObjectiveSpec::Ar | ObjectiveSpec::Dar { t: 1 } => Some(theorem3_ar_spectrum(params)),
        ObjectiveSpec::Masked { rho } => theorem3_masked_spectrum(params, rho).ok(),
        _ => None,
    }
}

fn optimal_encoder(m: &NormalizedMatrix, t: usize) -> Result<EncoderTable> {
    let t = t.min(m.shape().0.min(m.shape().1));
    encoder_from_pair(&optimal_features(m, t)?, &m.rows, &m.p_c)
}

#[derive(Serialize)]
struct SpectrumEntry {
    objective: String,
    rows: usize,
    cols: usize,
    sigma: Vec<f64>,
    closed_form: Option<Vec<f64>>,
    max_closed_form_error: Option<f64>,
    t: usize,
    tail_energy: f64,
    alpha: f64,
}

#[derive(Serialize)]
struct ConnectivityEntry {
    objective: String,
    estimate: f64,
}

#[derive(Serialize)]
struct SpectrumReport<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    spectra: Vec<SpectrumEntry>,
    connectivity: Vec<ConnectivityEntry>,
}

fn spectrum(cfg: &ExperimentConfig) -> Result<Value> {
    let p = &cfg.params;
    let t = cfg.rank();
    let mut spectra = Vec::new();
    let mut connectivity = Vec::new();
    for spec in &cfg.objectives() {
        let joint = ExactBuilder::default().build(spec, p)?;
        let m = normalize(&joint)?;
        let numeric = singular_spectrum(&m)?;
        let closed = closed_form(spec, p);
        let enc = optimal_encoder(&m, t)?;
        let feats: Vec<DVector<f64>> = (0..enc.rows.len()).map(|i| enc.feature(i)).collect();
        connectivity.push(ConnectivityEntry {
            objective: spec.to_string(),
            estimate: connectivity_estimate(&feats, cfg.connectivity_pairs)?,
        });
        spectra.push(SpectrumEntry {
            objective: spec.to_string(),
            rows: m.shape().0,
            cols: m.shape().1,
            max_closed_form_error: closed.as_ref().map(|c| numeric.max_abs_diff(c)),
            closed_form: closed.map(|c| c.values().to_vec()),
            t,
            tail_energy: tail_energy(&numeric, t),
            alpha: labeling_error(&joint, |tok| p.class_of(tok))?,
            sigma: numeric.values().to_vec(),
        });
    }
    to_value(&SpectrumReport { experiment: "spectrum", config: cfg, spectra, connectivity })
}

#[derive(Serialize)]
struct Theorem1Entry {
    objective: String,
    trials: usize,
    dims: Vec<usize>,
    max_residual: f64,
    mean_residual: f64,
}

#[derive(Serialize)]
struct Theorem1Report<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    results: Vec<Theorem1Entry>,
}

/// Random encoder/embedding pair over a joint's catalogs.
pub fn random_pair<R: Rng + ?Sized>(
    joint: &crate::cooccurrence::JointDistribution,
    t: usize,
    rng: &mut R,
) -> Result<(EncoderTable, TokenEmbedding)> {
    let n = joint.rows().len();
    let k = joint.cols().len();
    let enc = EncoderTable::new(joint.rows().to_vec(), DMatrix::from_fn(n, t, |_, _| rng.gen_range(-1.0..1.0)))?;
    let emb = TokenEmbedding::new(joint.cols().to_vec(), DMatrix::from_fn(t, k, |_, _| rng.gen_range(-1.0..1.0)))?;
    Ok((enc, emb))
}

const THEOREM1_DIMS: [usize; 3] = [1, 2, 4];

fn theorem1(cfg: &ExperimentConfig) -> Result<Value> {
    let mut results = Vec::new();
    for spec in &cfg.objectives() {
        let joint = ExactBuilder::default().build(spec, &cfg.params)?;
        let mut rng = substream(cfg.seed, &format!("theorem1/{spec}"), 0);
        let mut residuals = Vec::with_capacity(cfg.trials);
        for trial in 0..cfg.trials {
            let t = THEOREM1_DIMS[trial % THEOREM1_DIMS.len()];
            let (enc, emb) = random_pair(&joint, t, &mut rng)?;
            residuals.push(theorem1_residual(&enc, &emb, &joint)?);
        }
        results.push(Theorem1Entry {
            objective: spec.to_string(),
            trials: cfg.trials,
            dims: THEOREM1_DIMS.to_vec(),
            max_residual: residuals.iter().copied().fold(0.0, f64::max),
            mean_residual: residuals.iter().sum::<f64>() / residuals.len().max(1) as f64,
        });
    }
    to_value(&Theorem1Report { experiment: "theorem1", config: cfg, results })
}

#[derive(Serialize)]
struct FactorizeEntry {
    objective: String,
    t: usize,
    optimum: f64,
    objective_value: f64,
    relative_gap: f64,
    steps_taken: usize,
    converged: bool,
}

#[derive(Serialize)]
struct FactorizeReport<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    results: Vec<FactorizeEntry>,
}

/// Relative tolerance and absolute floor used to accept a factorization run.
pub const FACTORIZE_REL_TOL: f64 = 1e-3;
pub const FACTORIZE_ABS_FLOOR: f64 = 1e-9;

/// Ranks {t, t+2} clamped to the matrix, deduplicated.
pub fn factorize_ranks(t: usize, m: &NormalizedMatrix) -> Vec<usize> {
    let cap = m.shape().0.min(m.shape().1);
    let mut ranks: Vec<usize> = [t, t + 2].iter().map(|&x| x.min(cap)).collect();
    ranks.dedup();
    ranks
}

fn factorize(cfg: &ExperimentConfig, dir: &Path, files: &mut Vec<String>) -> Result<Value> {
    let mut results = Vec::new();
    let mut traj = csv_writer(&dir.join("trajectories.csv"))?;
    writeln!(traj, "objective,t,step,value")?;
    for spec in &cfg.objectives() {
        let m = exact_matrix(spec, &cfg.params)?;
        let sigma = singular_spectrum(&m)?;
        for t in factorize_ranks(cfg.rank(), &m) {
            let optimum: f64 = sigma.values().iter().skip(t).map(|s| s * s).sum();
            let mut rng = substream(cfg.seed, &format!("factorize/{spec}"), t as u64);
            let gd = gd_factorize(&m, t, &cfg.factorize, &mut rng)?;
            for (step, v) in &gd.trajectory {
                writeln!(traj, "{spec},{t},{step},{v}")?;
            }
            results.push(FactorizeEntry {
                objective: spec.to_string(),
                t,
                optimum,
                objective_value: gd.objective,
                relative_gap: if optimum > 0.0 { gd.objective / optimum - 1.0 } else { gd.objective },
                steps_taken: gd.steps_taken,
                converged: gd.check_against(optimum, FACTORIZE_REL_TOL, FACTORIZE_ABS_FLOOR).is_ok(),
            });
        }
    }
    traj.flush()?;
    files.push("trajectories.csv".into());
    to_value(&FactorizeReport { experiment: "factorize", config: cfg, results })
}

#[derive(Serialize)]
struct ProbeEntry {
    objective: String,
    t: usize,
    reg: f64,
    error: f64,
    transformed_error: f64,
    argmax_agreement: f64,
}

#[derive(Serialize)]
struct ProbeReportOut<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    results: Vec<ProbeEntry>,
}

/// Random t×t matrix with |det| bounded away from zero.
pub fn random_invertible<R: Rng + ?Sized>(t: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let m = DMatrix::<f64>::from_fn(t, t, |_, _| rng.gen_range(-1.0..1.0));
        if m.determinant().abs() > 1e-2 {
            return m;
        }
    }
}

/// Fits the probe on `examples` and on the same features right-multiplied by
/// `transform`; returns (error, transformed error, argmax agreement).
pub fn probe_invariance(examples: &[ProbeExample], transform: &DMatrix<f64>, reg: f64) -> Result<(f64, f64, f64)> {
    let (base, err) = linear_probe(examples, reg)?;
    let moved: Vec<ProbeExample> = examples
        .iter()
        .map(|e| ProbeExample { features: transform.tr_mul(&e.features), ..e.clone() })
        .collect();
    let (other, err2) = linear_probe(&moved, reg)?;
    let agree = examples
        .iter()
        .zip(&moved)
        .filter(|(a, b)| base.predict(&a.features) == other.predict(&b.features))
        .count();
    Ok((err, err2, agree as f64 / examples.len() as f64))
}

fn probe(cfg: &ExperimentConfig) -> Result<Value> {
    let p = &cfg.params;
    let mut results = Vec::new();
    for spec in &cfg.objectives() {
        let m = exact_matrix(spec, p)?;
        let enc = optimal_encoder(&m, cfg.rank())?;
        let examples = probe_examples(&enc, &m.p_c, |tok| p.class_of(tok))?;
        let mut rng = substream(cfg.seed, &format!("probe/{spec}"), 0);
        let transform = random_invertible(enc.dim(), &mut rng);
        let (error, transformed_error, argmax_agreement) = probe_invariance(&examples, &transform, cfg.probe_reg)?;
        results.push(ProbeEntry {
            objective: spec.to_string(),
            t: enc.dim(),
            reg: cfg.probe_reg,
            error,
            transformed_error,
            argmax_agreement,
        });
    }
    to_value(&ProbeReportOut { experiment: "probe", config: cfg, results })
}

#[derive(Clone, Serialize)]
pub struct GenRow {
    pub spec: String,
    pub rho: Option<f64>,
    pub seed: usize,
    pub gen_loss: f64,
    pub pretrain_loss: f64,
    pub bound: Option<f64>,
    pub gap: Option<f64>,
    pub delta: f64,
    pub eta: Option<f64>,
    #[serde(rename = "normW2")]
    pub norm_w2: f64,
    pub bound_holds: Option<bool>,
}

#[derive(Serialize)]
struct PerkEntry {
    model: String,
    per_k: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct GenboundReport<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    weights: Vec<(usize, f64)>,
    runs: Vec<GenRow>,
    perk: Vec<PerkEntry>,
}

fn write_gen_rows(path: &Path, rows: &[GenRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv_writer(path)?;
    writeln!(w, "spec,rho,seed,gen_loss,bound,delta,eta,normW2")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.spec,
            opt(r.rho),
            r.seed,
            r.gen_loss,
            opt(r.bound),
            r.delta,
            opt(r.eta),
            r.norm_w2
        )?;
    }
    w.flush()?;
    Ok(())
}

fn sequences(p: &ToyParams) -> Result<Vec<LabeledSequence>> {
    Ok(enumerate_sequences(p, DEFAULT_SEQUENCE_BUDGET)?.collect())
}

/// Trains `spec` with seed index `seed` and evaluates generation loss and,
/// for fixed-ratio masked models, the bound terms. `delta_ar` fills the gap.
fn evaluate_model(
    cfg: &ExperimentConfig,
    stream: &str,
    spec: &ObjectiveSpec,
    seed: usize,
    data: &[LabeledSequence],
    delta_ar: Option<f64>,
) -> Result<(GenRow, Vec<(usize, f64)>)> {
    let p = &cfg.params;
    let mut rng = substream(cfg.seed, &format!("{stream}/{spec}"), seed as u64);
    let run = train_model(spec, p, &cfg.hparams, &mut rng)?;
    let loss = gen_loss(&run.model, data)?;
    let joint = ExactBuilder::default().build(spec, p)?;
    let delta = crate::generation::pretraining_error(&run.model, &joint)?;
    let mut row = GenRow {
        spec: spec.to_string(),
        rho: None,
        seed,
        gen_loss: loss.total,
        pretrain_loss: run.loss,
        bound: None,
        gap: None,
        delta,
        eta: None,
        norm_w2: run.model.spectral_norm(),
        bound_holds: None,
    };
    if let ObjectiveSpec::Masked { rho } = *spec {
        row.rho = Some(rho);
        if unmasked_count(p.length, rho)? >= 2 {
            let terms = theorem4_terms(&run.model, p, rho, data, &joint)?;
            let bound = theorem4_masked_bound(&terms);
            row.eta = Some(terms.eta);
            row.bound = Some(bound);
            row.gap = delta_ar.map(|d| bound - d);
            row.bound_holds = Some(loss.total <= bound);
        }
    }
    Ok((row, loss.per_k))
}

fn genbound(cfg: &ExperimentConfig, dir: &Path, files: &mut Vec<String>) -> Result<Value> {
    let p = &cfg.params;
    let data = sequences(p)?;
    let masked = ObjectiveSpec::Masked { rho: cfg.rho_m() };
    let mut models = vec![masked];
    for o in &cfg.objectives() {
        if !models.contains(o) && *o != ObjectiveSpec::Ar {
            models.push(*o);
        }
    }
    let u = unmasked_count(p.length, cfg.rho_m())?;
    let mut runs = Vec::new();
    let mut perk = Vec::new();
    for seed in 0..cfg.seeds {
        let (ar_row, ar_curve) = evaluate_model(cfg, "genbound", &ObjectiveSpec::Ar, seed, &data, None)?;
        let delta_ar = ar_row.delta;
        perk.push(PerkEntry { model: format!("ar/seed{seed}"), per_k: ar_curve });
        runs.push(ar_row);
        for spec in &models {
            let (row, curve) = evaluate_model(cfg, "genbound", spec, seed, &data, Some(delta_ar))?;
            perk.push(PerkEntry { model: format!("{spec}/seed{seed}"), per_k: curve });
            runs.push(row);
        }
    }
    write_gen_rows(&dir.join("genbound.csv"), &runs)?;
    files.push("genbound.csv".into());
    to_value(&GenboundReport {
        experiment: "genbound",
        config: cfg,
        weights: (2..=u).map(|k| (k, crate::generation::misalignment_weight(u, k))).collect(),
        runs,
        perk,
    })
}

#[derive(Serialize)]
struct MaskEntry {
    sizes: Vec<usize>,
    file: String,
    query_allowed: usize,
    content_allowed: usize,
    perturbations: usize,
    max_drift: f64,
}

#[derive(Serialize)]
struct MasksReport<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    assignments: Vec<MaskEntry>,
    max_drift: f64,
    ar_reduction_error: f64,
}

/// Largest change in any query-stream output row when the content input is
/// perturbed at a position that row may not see. Returns (count, max drift).
pub fn perturbation_drift<R: Rng + ?Sized>(a: &GroupAssignment, d: usize, rng: &mut R) -> Result<(usize, f64)> {
    let s = a.len();
    let w = AttentionWeights::random(d, 1.0, rng);
    let masks = build_masks(a);
    let h = DMatrix::from_fn(s, d, |_, _| rng.gen_range(-1.0..1.0));
    let g = DMatrix::from_fn(s, d, |_, _| rng.gen_range(-1.0..1.0));
    let (_, base) = two_stream_layer(&h, &g, &masks, &w)?;
    let mut count = 0;
    let mut drift: f64 = 0.0;
    for i in 0..s {
        for j in (0..s).filter(|&j| !masks.query_allows(i, j)) {
            let mut h2 = h.clone();
            h2.row_mut(j).iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
            let (_, moved) = two_stream_layer(&h2, &g, &masks, &w)?;
            drift = drift.max((moved.row(i) - base.row(i)).abs().max());
            count += 1;
        }
    }
    Ok((count, drift))
}

const MASK_ENUMERATION_LIMIT: usize = 10;

fn masks(cfg: &ExperimentConfig, dir: &Path, files: &mut Vec<String>) -> Result<Value> {
    let s = cfg.params.length;
    let assignments = match cfg.assignment {
        Some(g) => vec![g.realize(s)?],
        None if s <= MASK_ENUMERATION_LIMIT => all_assignments(s),
        None => {
            return Err(LabError::Resource {
                what: "mask enumeration (sequence length)".into(),
                needed: s,
                limit: MASK_ENUMERATION_LIMIT,
            })
        }
    };
    let mut rng = substream(cfg.seed, "masks", 0);
    let mut entries = Vec::new();
    for a in &assignments {
        let sizes = a.sizes();
        let label = sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-");
        let file = format!("masks_{label}.csv");
        let m = build_masks(a);
        let mut w = csv_writer(&dir.join(&file))?;
        m.write_csv(&mut w)?;
        w.flush()?;
        files.push(file.clone());
        let (perturbations, max_drift) = perturbation_drift(a, cfg.hparams.d.min(8), &mut rng)?;
        let count = |mat: &DMatrix<f64>| mat.iter().filter(|&&x| x == 0.0).count();
        entries.push(MaskEntry {
            sizes,
            file,
            query_allowed: count(&m.query),
            content_allowed: count(&m.content),
            perturbations,
            max_drift,
        });
    }
    let p = &cfg.params;
    let mut rng = substream(cfg.seed, "masks/reduction", 0);
    let model = TwoStreamModel::random(p.vocab_size(), s, cfg.hparams.d.min(8), 0.7, &mut rng);
    let singles = crate::twostream::partition_groups(s, 1, 1)?;
    let p_g = vec![1.0 / p.vocab_size() as f64; p.vocab_size()];
    let mut ar_reduction_error: f64 = 0.0;
    for class in 1..=p.classes.min(2) {
        let x = crate::toy::sample_sequence(p, class, &mut rng)?;
        let grouped = semi_ar_loss(&model, &x, &singles, &p_g)?;
        let plain = plain_causal_loss(&model, &x, &p_g)?;
        ar_reduction_error = ar_reduction_error.max((grouped - plain).abs());
    }
    let max_drift = entries.iter().map(|e| e.max_drift).fold(0.0, f64::max);
    to_value(&MasksReport { experiment: "masks", config: cfg, assignments: entries, max_drift, ar_reduction_error })
}

#[derive(Serialize)]
struct TailEntry {
    objective: String,
    t: usize,
    tail_energy: f64,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    experiment: &'static str,
    config: &'a ExperimentConfig,
    tails: Vec<TailEntry>,
    spectra: Vec<SpectrumEntry>,
    runs: Vec<GenRow>,
    perk: Vec<PerkEntry>,
}

fn sweep(cfg: &ExperimentConfig, dir: &Path, files: &mut Vec<String>) -> Result<Value> {
    let p = &cfg.params;
    let t = cfg.rank();
    let mut specs = vec![ObjectiveSpec::Ar];
    specs.extend(cfg.rho_grid.iter().map(|&rho| ObjectiveSpec::Masked { rho }));
    specs.extend(cfg.t_grid.iter().filter(|&&w| w > 1).map(|&w| ObjectiveSpec::Dar { t: w }));
    let mut tails = Vec::new();
    let mut spectra = Vec::new();
    for spec in &specs {
        let joint = ExactBuilder::default().build(spec, p)?;
        let m = normalize(&joint)?;
        let sigma = singular_spectrum(&m)?;
        let closed = closed_form(spec, p);
        tails.push(TailEntry { objective: spec.to_string(), t, tail_energy: tail_energy(&sigma, t) });
        spectra.push(SpectrumEntry {
            objective: spec.to_string(),
            rows: m.shape().0,
            cols: m.shape().1,
            max_closed_form_error: closed.as_ref().map(|c| sigma.max_abs_diff(c)),
            closed_form: closed.map(|c| c.values().to_vec()),
            t,
            tail_energy: tail_energy(&sigma, t),
            alpha: labeling_error(&joint, |tok| p.class_of(tok))?,
            sigma: sigma.values().to_vec(),
        });
    }
    let mut tw = csv_writer(&dir.join("tails.csv"))?;
    writeln!(tw, "objective,t,tail_energy")?;
    for e in &tails {
        writeln!(tw, "{},{},{}", e.objective, e.t, e.tail_energy)?;
    }
    tw.flush()?;
    files.push("tails.csv".into());

    let mut runs = Vec::new();
    let mut perk = Vec::new();
    if !cfg.rho_grid.is_empty() {
        let data = sequences(p)?;
        for seed in 0..cfg.seeds {
            for &rho in &cfg.rho_grid {
                let spec = ObjectiveSpec::Masked { rho };
                let (row, curve) = evaluate_model(cfg, "sweep", &spec, seed, &data, None)?;
                perk.push(PerkEntry { model: format!("{spec}/seed{seed}"), per_k: curve });
                runs.push(row);
            }
        }
    }
    write_gen_rows(&dir.join("sweep.csv"), &runs)?;
    files.push("sweep.csv".into());
    to_value(&SweepReport { experiment: "sweep", config: cfg, tails, spectra, runs, perk })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(&format!(
            r#"{{"experiment": "spectrum", "params": {{"r": 2, "s": 4, "T": 2}}{extra}}}"#
        ))
    }

    #[test]
    fn parses_minimal_config() {
        let c = cfg("").unwrap();
        assert_eq!(c.experiment.kinds(), vec![ExperimentKind::Spectrum]);
        assert_eq!(c.rank(), 2);
        assert_eq!(c.trials, 100);
    }

    #[test]
    fn rejects_unknown_fields() {
        let err = cfg(r#", "bogus": 1"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_ratio_names_rho_m() {
        let err = cfg(r#", "rho_m": 0.3"#).unwrap_err();
        assert!(matches!(&err, LabError::Config { path, .. } if path == "rho_m"), "{err}");
        let err = cfg(r#", "objectives": ["ar", "masked:0.3"]"#).unwrap_err();
        assert!(matches!(&err, LabError::Config { path, .. } if path == "objectives[1]"), "{err}");
        let err = cfg(r#", "rho_grid": [0.5, 0.4]"#).unwrap_err();
        assert!(matches!(&err, LabError::Config { path, .. } if path == "rho_grid[1]"), "{err}");
    }

    #[test]
    fn experiment_lists() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment": ["spectrum", "masks"], "params": {"r": 1, "s": 3, "T": 1}}"#,
        )
        .unwrap();
        assert_eq!(c.experiment.kinds(), vec![ExperimentKind::Spectrum, ExperimentKind::Masks]);
        assert!(ExperimentConfig::from_json(r#"{"experiment": "nope", "params": {"r": 1, "s": 3, "T": 1}}"#).is_err());
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let a: u64 = substream(7, "spectrum", 0).gen();
        let b: u64 = substream(7, "spectrum", 0).gen();
        let c: u64 = substream(7, "spectrum", 1).gen();
        let d: u64 = substream(7, "theorem1", 0).gen();
        let e: u64 = substream(8, "spectrum", 0).gen();
        assert_eq!(a, b);
        assert!(a != c && a != d && a != e);
    }

    #[test]
    fn plot_data_sections() {
        let dir = tempfile::tempdir().unwrap();
        let report = serde_json::json!({
            "spectra": [{"objective": "ar", "sigma": [1.0, 0.5]}, {"objective": "masked:0.5", "sigma": [1.0, 0.25]}],
            "perk": [],
        });
        let out = emit_plot_data(&report, dir.path()).unwrap();
        assert_eq!(out.written, vec!["spectrum.csv", "perk.csv"]);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("connectivity.csv"));
        let spectrum = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
        assert_eq!(spectrum.lines().count(), 1 + 4);
        assert!(spectrum.contains("masked:0.5,2,0.25"));
        let perk = fs::read_to_string(dir.path().join("perk.csv")).unwrap();
        assert_eq!(perk, "model,k,loss\n");
    }

    #[test]
    fn spectrum_reports_closed_form_error() {
        let c = cfg("").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_one(&c, ExperimentKind::Spectrum, dir.path()).unwrap();
        let report: Value =
            serde_json::from_str(&fs::read_to_string(outcome.dir.join("report.json")).unwrap()).unwrap();
        for entry in report["spectra"].as_array().unwrap() {
            assert!(entry["max_closed_form_error"].as_f64().unwrap() < 1e-10);
        }
        let csv = fs::read_to_string(outcome.dir.join("spectrum.csv")).unwrap();
        let expected: usize = report["spectra"].as_array().unwrap().iter().map(|e| e["sigma"].as_array().unwrap().len()).sum();
        assert_eq!(csv.lines().count(), expected + 1);
        assert_eq!(outcome.warnings.len(), 1);
        assert!(outcome.warnings[0].contains("perk.csv"));
    }
}
