//! Synthetic labeled corpus with `r` classes, `s` positions and `T` tokens per
//! (position, class) cell.
//!
//! Token ids come from an explicit bijection
//! `((k-1)·r + (y-1))·T + (j-1)` so that the token sets of distinct
//! (position, class) pairs never overlap. Positions, classes and slots are
//! 1-based in the API; token ids are 0-based.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyParams {
    /// Number of classes.
    #[serde(rename = "r")]
    pub classes: usize,
    /// Sequence length.
    #[serde(rename = "s")]
    pub length: usize,
    /// Tokens per (position, class) cell.
    #[serde(rename = "T")]
    pub slots: usize,
}

impl ToyParams {
    pub fn new(classes: usize, length: usize, slots: usize) -> Result<Self> {
        let p = ToyParams {
            classes,
            length,
            slots,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 {
            return Err(LabError::domain("class count r must be >= 1"));
        }
        if self.length < 2 {
            return Err(LabError::domain("sequence length s must be >= 2"));
        }
        if self.slots < 1 {
            return Err(LabError::domain("slot size T must be >= 1"));
        }
        Ok(())
    }

    /// N_D = r·s·T.
    pub fn vocab_size(&self) -> usize {
        self.classes * self.length * self.slots
    }

    /// Number of distinct sequences, r·T^s, or `None` on overflow.
    pub fn sequence_count(&self) -> Option<usize> {
        let per_class = self.slots.checked_pow(u32::try_from(self.length).ok()?)?;
        per_class.checked_mul(self.classes)
    }

    pub fn token_id(&self, position: usize, class: usize, slot: usize) -> Result<TokenId> {
        if !(1..=self.length).contains(&position) {
            return Err(LabError::domain(format!(
                "position {position} outside 1..={}",
                self.length
            )));
        }
        if !(1..=self.classes).contains(&class) {
            return Err(LabError::domain(format!(
                "class {class} outside 1..={}",
                self.classes
            )));
        }
        if !(1..=self.slots).contains(&slot) {
            return Err(LabError::domain(format!(
                "slot {slot} outside 1..={}",
                self.slots
            )));
        }
        Ok(((position - 1) * self.classes + (class - 1)) * self.slots + (slot - 1))
    }

    pub fn decode_token(&self, id: TokenId) -> Result<TokenCoords> {
        if id >= self.vocab_size() {
            return Err(LabError::domain(format!(
                "token id {id} outside 0..{}",
                self.vocab_size()
            )));
        }
        let slot = id % self.slots;
        let cell = id / self.slots;
        Ok(TokenCoords {
            position: cell / self.classes + 1,
            class: cell % self.classes + 1,
            slot: slot + 1,
        })
    }

    /// Class of a token id; panics only on ids outside the vocabulary, so
    /// callers that take ids from this model's own builders can use it freely.
    pub fn class_of(&self, id: TokenId) -> usize {
        (id / self.slots) % self.classes + 1
    }

    pub fn position_of(&self, id: TokenId) -> usize {
        id / (self.slots * self.classes) + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCoords {
    pub position: usize,
    pub class: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabeledSequence {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

impl LabeledSequence {
    /// Checks that token k decodes to position k and class = label.
    pub fn is_consistent(&self, params: &ToyParams) -> bool {
        self.tokens.len() == params.length
            && self.tokens.iter().enumerate().all(|(i, &tok)| {
                params
                    .decode_token(tok)
                    .map(|c| c.position == i + 1 && c.class == self.label)
                    .unwrap_or(false)
            })
    }
}

/// Default ceiling on exhaustive enumeration.
pub const DEFAULT_SEQUENCE_BUDGET: usize = 1 << 20;

/// Every sequence in the support of the uniform toy corpus, class-major, then
/// slot patterns in lexicographic order with position 1 most significant.
pub fn enumerate_sequences(
    params: &ToyParams,
    budget: usize,
) -> Result<impl Iterator<Item = LabeledSequence>> {
    params.validate()?;
    let total = params.sequence_count().unwrap_or(usize::MAX);
    if total > budget {
        return Err(LabError::Resource {
            what: "sequence enumeration (use sample_sequence instead)".into(),
            needed: total,
            limit: budget,
        });
    }
    let p = *params;
    let per_class = total / p.classes;
    Ok((0..total).map(move |idx| {
        let class = idx / per_class + 1;
        let mut pattern = idx % per_class;
        let mut slots = vec![0usize; p.length];
        for slot in slots.iter_mut().rev() {
            *slot = pattern % p.slots;
            pattern /= p.slots;
        }
        let tokens = slots
            .iter()
            .enumerate()
            .map(|(k, &j)| ((k * p.classes) + (class - 1)) * p.slots + j)
            .collect();
        LabeledSequence {
            tokens,
            label: class,
        }
    }))
}

/// One sequence of `class`, each position drawn uniformly from its T-slot.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &ToyParams,
    class: usize,
    rng: &mut R,
) -> Result<LabeledSequence> {
    params.validate()?;
    if !(1..=params.classes).contains(&class) {
        return Err(LabError::domain(format!(
            "class {class} outside 1..={}",
            params.classes
        )));
    }
    let tokens = (1..=params.length)
        .map(|k| {
            let j = rng.gen_range(1..=params.slots);
            params.token_id(k, class, j)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSequence {
        tokens,
        label: class,
    })
}
