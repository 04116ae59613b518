//! Scripted translator/reviser dynamics for the mock backend.
//!
//! The translator keeps each constraint's target with probability
//! `1 - override_prob_per_constraint` and otherwise emits a distractor slot in
//! its place, imitating a model that prefers a memorized rendering over the
//! instructed one. Each revision restores up to `fix_per_revision` of the
//! uncompleted constraints it is told about, in the order listed, and never
//! touches constraints that are already satisfied. Because the behaviour is
//! closed-form, a run with `m` overridden constraints converges after exactly
//! `ceil(m / fix_per_revision)` revisions.
//!
//! Hypotheses are a readable scaffold, not language: `[T:<target>]` slots for
//! kept targets and `[M:<hex>]` distractor slots, separated by spaces.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ConstraintPair, TranslationUnit};
use crate::seeding::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoTrapParams {
    pub override_prob_per_constraint: f64,
    pub fix_per_revision: usize,
    pub seed: u64,
}

impl Default for MemoTrapParams {
    fn default() -> Self {
        Self {
            override_prob_per_constraint: 0.8,
            fix_per_revision: 1,
            seed: 0,
        }
    }
}

pub fn target_slot(pair: &ConstraintPair) -> String {
    format!("[T:{}]", pair.primary_target().unwrap_or_default())
}

/// Distractor emitted in place of an overridden constraint. Derived from the
/// pair itself so a reviser that only sees the pair can locate it.
pub fn distractor_slot(pair: &ConstraintPair) -> String {
    let mut h = Sha256::new();
    h.update(pair.source_form.as_bytes());
    h.update([0x1f]);
    h.update(pair.primary_target().unwrap_or_default().as_bytes());
    let digest = h.finalize();
    format!("[M:{}]", hex::encode(&digest[..4]))
}

/// Filler emitted for a request that carries no constraints.
pub fn plain_hypothesis(source_text: &str) -> String {
    let digest = Sha256::digest(source_text.as_bytes());
    format!("[S:{}]", hex::encode(&digest[..4]))
}

/// Per-constraint override decisions for a unit. The draw for constraint `i`
/// is keyed by `(seed, source text, i)`.
pub fn override_draws(unit: &TranslationUnit, params: &MemoTrapParams) -> Vec<bool> {
    override_draws_for(&unit.source_text, unit.constraints.len(), params)
}

pub fn override_draws_for(source_text: &str, k: usize, params: &MemoTrapParams) -> Vec<bool> {
    (0..k)
        .map(|i| {
            let mut rng = derive_rng(
                params.seed,
                &[b"memo-trap", source_text.as_bytes(), &(i as u64).to_le_bytes()],
            );
            rng.gen::<f64>() < params.override_prob_per_constraint
        })
        .collect()
}

/// Running state of one unit under the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoTrapState {
    pub unit_id: String,
    /// `true` while constraint `i` is still replaced by its distractor.
    pub per_constraint_overridden: Vec<bool>,
    pub revisions_applied: usize,
}

impl MemoTrapState {
    pub fn new(unit: &TranslationUnit, params: &MemoTrapParams) -> Self {
        Self {
            unit_id: unit.id.clone(),
            per_constraint_overridden: override_draws(unit, params),
            revisions_applied: 0,
        }
    }

    pub fn overridden_count(&self) -> usize {
        self.per_constraint_overridden.iter().filter(|o| **o).count()
    }

    /// Restores the first `fix_per_revision` of `uncompleted` (constraint
    /// indices, in listed order). Already-restored constraints stay restored.
    pub fn revise(&mut self, uncompleted: &[usize], params: &MemoTrapParams) {
        for &i in uncompleted.iter().take(params.fix_per_revision) {
            if let Some(flag) = self.per_constraint_overridden.get_mut(i) {
                *flag = false;
            }
        }
        self.revisions_applied += 1;
    }

    pub fn hypothesis(&self, unit: &TranslationUnit) -> String {
        render(&unit.source_text, &unit.constraints, &self.per_constraint_overridden)
    }
}

fn render(source_text: &str, constraints: &[ConstraintPair], overridden: &[bool]) -> String {
    if constraints.is_empty() {
        return plain_hypothesis(source_text);
    }
    constraints
        .iter()
        .zip(overridden)
        .map(|(pair, &o)| if o { distractor_slot(pair) } else { target_slot(pair) })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Translate-stage output: targets embedded except where overridden.
pub fn initial_hypothesis(unit: &TranslationUnit, params: &MemoTrapParams) -> String {
    MemoTrapState::new(unit, params).hypothesis(unit)
}

/// Revise-stage output computed from the text alone: the distractor slot of
/// each of the first `fix_per_revision` uncompleted pairs is replaced by the
/// target slot (appended when no slot is found). Everything else is kept.
pub fn revised_hypothesis(
    current: &str,
    uncompleted: &[ConstraintPair],
    params: &MemoTrapParams,
) -> String {
    let mut text = current.to_string();
    for pair in uncompleted.iter().take(params.fix_per_revision) {
        let slot = distractor_slot(pair);
        let fixed = target_slot(pair);
        if text.contains(&slot) {
            text = text.replacen(&slot, &fixed, 1);
        } else {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&fixed);
        }
    }
    text
}
