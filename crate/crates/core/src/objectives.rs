//! Samplers for the four pretraining objectives: autoregressive, fixed-ratio
//! masked, diversity-enhanced autoregressive (`dar`) and variable-length
//! masked (`vlm`).

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cooccurrence::ConditionalText;
use crate::error::{LabError, Result};
use crate::toy::{LabeledSequence, TokenId};

const RATIO_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectiveSpec {
    Ar,
    Masked { rho: f64 },
    Dar { t: usize },
    Vlm { lo: f64, hi: f64 },
}

impl ObjectiveSpec {
    /// Checks the spec against a sequence length.
    pub fn validate(&self, s: usize) -> Result<()> {
        match *self {
            ObjectiveSpec::Ar => Ok(()),
            ObjectiveSpec::Masked { rho } => unmasked_count(s, rho).map(|_| ()),
            ObjectiveSpec::Dar { t } => {
                if t < 1 {
                    Err(LabError::domain("dar lookahead width t must be >= 1"))
                } else {
                    Ok(())
                }
            }
            ObjectiveSpec::Vlm { lo, hi } => {
                if admissible_ratios(s, lo, hi)?.is_empty() {
                    Err(LabError::domain(format!(
                        "no admissible mask ratio in [{lo}, {hi}] for s={s}; admissible values are {}",
                        format_ratios(&all_ratios(s))
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::Ar => write!(f, "ar"),
            ObjectiveSpec::Masked { rho } => write!(f, "masked:{rho}"),
            ObjectiveSpec::Dar { t } => write!(f, "dar:{t}"),
            ObjectiveSpec::Vlm { lo, hi } => write!(f, "vlm:{lo}-{hi}"),
        }
    }
}

impl FromStr for ObjectiveSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| LabError::domain(format!("cannot parse objective `{s}`: {why}"));
        let ratio = |v: &str| -> Result<f64> {
            let x: f64 = v.trim().parse().map_err(|_| bad("ratio is not a number"))?;
            if x > 0.0 && x < 1.0 {
                Ok(x)
            } else {
                Err(bad("ratio must lie in (0, 1)"))
            }
        };
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a)),
            None => (s.trim(), None),
        };
        match (kind, arg) {
            ("ar", None) => Ok(ObjectiveSpec::Ar),
            ("masked", Some(a)) => Ok(ObjectiveSpec::Masked { rho: ratio(a)? }),
            ("dar", Some(a)) => {
                let t: usize = a.trim().parse().map_err(|_| bad("t is not an integer"))?;
                if t < 1 {
                    return Err(bad("t must be >= 1"));
                }
                Ok(ObjectiveSpec::Dar { t })
            }
            ("vlm", Some(a)) => {
                let (lo, hi) = a.split_once('-').ok_or_else(|| bad("expected lo-hi"))?;
                let (lo, hi) = (ratio(lo)?, ratio(hi)?);
                if lo > hi {
                    return Err(bad("lo must not exceed hi"));
                }
                Ok(ObjectiveSpec::Vlm { lo, hi })
            }
            _ => Err(bad("expected ar, masked:<rho>, dar:<t> or vlm:<lo>-<hi>")),
        }
    }
}

impl Serialize for ObjectiveSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectiveSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Unmasked count u = s(1-rho), required to be an integer in 1..=s-1.
pub fn unmasked_count(s: usize, rho: f64) -> Result<usize> {
    let masked = s as f64 * rho;
    let rounded = masked.round();
    if !(rho > 0.0 && rho < 1.0) || (masked - rounded).abs() > RATIO_EPS || rounded < 1.0 {
        return Err(LabError::domain(format!(
            "mask ratio {rho} gives non-integer or empty masked count for s={s}; admissible ratios are {}",
            format_ratios(&all_ratios(s))
        )));
    }
    let u = s - rounded as usize;
    if u < 1 {
        return Err(LabError::domain(format!(
            "mask ratio {rho} leaves no unmasked token for s={s}; admissible ratios are {}",
            format_ratios(&all_ratios(s))
        )));
    }
    Ok(u)
}

/// All ratios m/s with lo <= m/s <= hi and 1 <= s-m <= s-1, ascending.
pub fn admissible_ratios(s: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(LabError::domain(format!(
            "ratio range [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"
        )));
    }
    Ok(all_ratios(s)
        .into_iter()
        .filter(|&r| r >= lo - RATIO_EPS && r <= hi + RATIO_EPS)
        .collect())
}

fn all_ratios(s: usize) -> Vec<f64> {
    (1..s).map(|m| m as f64 / s as f64).collect()
}

fn format_ratios(r: &[f64]) -> String {
    let items: Vec<String> = r.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", items.join(", "))
}

/// One (conditional, target) draw together with the bookkeeping the
/// frequency tests need.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDraw {
    pub conditional: ConditionalText,
    pub target: TokenId,
    /// 1-based position of the target token.
    pub target_position: usize,
    /// Mask ratio realized for masked objectives.
    pub ratio: Option<f64>,
}

pub fn sample_pair<R: Rng + ?Sized>(
    spec: &ObjectiveSpec,
    x: &LabeledSequence,
    rng: &mut R,
) -> Result<(ConditionalText, TokenId)> {
    sample_pair_detailed(spec, x, rng).map(|d| (d.conditional, d.target))
}

pub fn sample_pair_detailed<R: Rng + ?Sized>(
    spec: &ObjectiveSpec,
    x: &LabeledSequence,
    rng: &mut R,
) -> Result<PairDraw> {
    let s = x.tokens.len();
    if s < 2 {
        return Err(LabError::domain("sequence length must be >= 2"));
    }
    match *spec {
        ObjectiveSpec::Ar => Ok(prefix_draw(x, rng.gen_range(1..s), 1, rng)),
        ObjectiveSpec::Dar { t } => {
            if t < 1 {
                return Err(LabError::domain("dar lookahead width t must be >= 1"));
            }
            Ok(prefix_draw(x, rng.gen_range(1..s), t, rng))
        }
        ObjectiveSpec::Masked { rho } => {
            let u = unmasked_count(s, rho)?;
            Ok(masked_draw(x, u, rho, rng))
        }
        ObjectiveSpec::Vlm { lo, hi } => {
            let ratios = admissible_ratios(s, lo, hi)?;
            if ratios.is_empty() {
                return Err(LabError::domain(format!(
                    "no admissible mask ratio in [{lo}, {hi}] for s={s}; admissible values are {}",
                    format_ratios(&all_ratios(s))
                )));
            }
            let rho = ratios[rng.gen_range(0..ratios.len())];
            let u = unmasked_count(s, rho)?;
            Ok(masked_draw(x, u, rho, rng))
        }
    }
}

fn prefix_draw<R: Rng + ?Sized>(x: &LabeledSequence, k: usize, t: usize, rng: &mut R) -> PairDraw {
    let s = x.tokens.len();
    let last = (k + t).min(s);
    let pos = rng.gen_range(k + 1..=last);
    PairDraw {
        conditional: ConditionalText::Prefix(x.tokens[..k].to_vec()),
        target: x.tokens[pos - 1],
        target_position: pos,
        ratio: None,
    }
}

fn masked_draw<R: Rng + ?Sized>(x: &LabeledSequence, u: usize, rho: f64, rng: &mut R) -> PairDraw {
    let s = x.tokens.len();
    let mut keep = sample_indices(rng, s, u).into_vec();
    keep.sort_unstable();
    let mut masked = Vec::with_capacity(s - u);
    let mut it = keep.iter().peekable();
    for i in 0..s {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            masked.push(i);
        }
    }
    let target_idx = masked[rng.gen_range(0..masked.len())];
    PairDraw {
        conditional: ConditionalText::Unmasked(
            keep.iter().map(|&i| (i + 1, x.tokens[i])).collect(),
        ),
        target: x.tokens[target_idx],
        target_position: target_idx + 1,
        ratio: Some(rho),
    }
}
