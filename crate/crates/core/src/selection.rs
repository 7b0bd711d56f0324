//! Expert subnetwork selection.
//!
//! Shallow and deep layers are ranked by a specificity score (how much the
//! target language prefers an expert relative to the all-language mean);
//! middle layers by an overlap score (how uniformly all languages activate
//! it, via the coefficient of variation). Both are boosted by absolute
//! activation magnitude before ranking, and the budget is split across the
//! three layer groups by fixed ratios with the remainder going deep.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiseError};
use crate::model::{ExpertId, ExpertSet};
use crate::stats::ProfileMatrix;

pub const RATIO_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub target_language: String,
    pub budget: usize,
    /// (L1, L2): shallow = [0, L1], middle = (L1, L2], deep = (L2, L-1].
    pub boundaries: (usize, usize),
    /// (rho_shallow, rho_middle, rho_deep), non-negative, summing to 1.
    pub ratios: (f64, f64, f64),
    /// Activation-magnitude boost factor in the composite scores.
    pub alpha: f64,
}

impl SelectionConfig {
    pub fn validate(&self, n_layers: usize, n_experts: usize) -> Result<()> {
        let (rs, rm, rd) = self.ratios;
        if rs < 0.0 || rm < 0.0 || rd < 0.0 {
            return Err(RiseError::Config("allocation ratios must be non-negative".into()));
        }
        if ((rs + rm + rd) - 1.0).abs() > RATIO_SUM_TOLERANCE {
            return Err(RiseError::Config(format!(
                "allocation ratios must sum to 1, got {}",
                rs + rm + rd
            )));
        }
        let universe = n_layers * n_experts;
        if self.budget < 1 || self.budget > universe {
            return Err(RiseError::Config(format!(
                "budget must satisfy 1 <= K <= {universe}, got {}",
                self.budget
            )));
        }
        let (l1, l2) = self.boundaries;
        if !(l1 < l2 && l2 < n_layers) {
            return Err(RiseError::Config(format!(
                "layer boundaries must satisfy 0 <= L1 < L2 < {n_layers}, got ({l1}, {l2})"
            )));
        }
        if self.alpha < 0.0 {
            return Err(RiseError::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// a_target / a_mean, with 0/0 forced to the bottom of every ranking.
pub fn specificity(a_target: f64, a_mean: f64) -> f64 {
    if a_mean == 0.0 {
        return 0.0;
    }
    a_target / a_mean
}

/// 1 / (1 + cv) over one expert's per-language activation column, with cv
/// the population coefficient of variation. An all-zero column scores 0.
pub fn overlap_score(column: &[f64]) -> Result<f64> {
    if column.len() < 2 {
        return Err(RiseError::Input(format!(
            "overlap score needs at least 2 languages, got {}",
            column.len()
        )));
    }
    let m = column.len() as f64;
    let mean = column.iter().sum::<f64>() / m;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = column.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let cv = var.sqrt() / mean;
    Ok(1.0 / (1.0 + cv))
}

/// Spec(l, i) = S * (1 + alpha * a_target).
pub fn composite_spec(s: f64, a_target: f64, alpha: f64) -> f64 {
    s * (1.0 + alpha * a_target)
}

/// Ovlp(l, i) = O * (1 + alpha * a_mean).
pub fn composite_ovlp(o: f64, a_mean: f64, alpha: f64) -> f64 {
    o * (1.0 + alpha * a_mean)
}

/// Split the budget: floor for shallow and middle, remainder to deep.
pub fn allocate_budget(k: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let ks = (k as f64 * ratios.0).floor() as usize;
    let km = (k as f64 * ratios.1).floor() as usize;
    let kd = k - ks - km;
    (ks, km, kd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Specificity,
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Shallow,
    Middle,
    Deep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedExpert {
    pub layer: usize,
    pub expert: usize,
    pub score: f64,
    pub kind: ScoreKind,
    pub phase: Phase,
}

/// The output of a selection run: the chosen experts with their scores,
/// plus everything needed to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub target: String,
    pub k: usize,
    pub boundaries: (usize, usize),
    pub ratios: (f64, f64, f64),
    pub alpha: f64,
    pub budgets: (usize, usize, usize),
    /// Sorted by (layer, expert).
    pub experts: Vec<SelectedExpert>,
}

impl Selection {
    pub fn expert_set(&self) -> ExpertSet {
        self.experts
            .iter()
            .map(|e| ExpertId::new(e.layer, e.expert))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Selection> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Selection> {
        Selection::from_json(&fs::read_to_string(path)?)
    }
}

struct Candidate {
    id: ExpertId,
    score: f64,
}

/// Rank candidates by score descending, ties by (layer, expert) ascending,
/// and take the first `budget` not already selected.
fn take_top(
    mut candidates: Vec<Candidate>,
    budget: usize,
    selected: &mut ExpertSet,
    group: &str,
) -> Result<Vec<Candidate>> {
    candidates.retain(|c| !selected.contains(&c.id));
    if candidates.len() < budget {
        return Err(RiseError::Config(format!(
            "{group} group has only {} candidate experts for a budget of {budget}",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores must be finite")
            .then(a.id.cmp(&b.id))
    });
    let chosen: Vec<Candidate> = candidates.drain(..budget).collect();
    for c in &chosen {
        selected.insert(c.id);
    }
    Ok(chosen)
}

/// Phase-ordered top-K selection over the three layer groups.
pub fn select_subnetwork(profiles: &ProfileMatrix, config: &SelectionConfig) -> Result<Selection> {
    config.validate(profiles.n_layers, profiles.n_experts)?;
    let target_idx = profiles
        .language_index(&config.target_language)
        .ok_or_else(|| {
            RiseError::Input(format!(
                "target language {:?} not present in profiles ({:?})",
                config.target_language, profiles.languages
            ))
        })?;
    if profiles.n_languages() < 2 {
        return Err(RiseError::Input(
            "selection needs at least 2 language profiles".into(),
        ));
    }

    let (l1, l2) = config.boundaries;
    let budgets = allocate_budget(config.budget, config.ratios);
    let alpha = config.alpha;

    let spec_candidates = |layers: std::ops::RangeInclusive<usize>| -> Vec<Candidate> {
        let mut out = Vec::new();
        for l in layers {
            for i in 0..profiles.n_experts {
                let a_target = profiles.freq(target_idx, l, i);
                let a_mean = profiles.mean_freq(l, i);
                let s = specificity(a_target, a_mean);
                out.push(Candidate {
                    id: ExpertId::new(l, i),
                    score: composite_spec(s, a_target, alpha),
                });
            }
        }
        out
    };

    let mut selected = ExpertSet::new();
    let mut experts: Vec<SelectedExpert> = Vec::with_capacity(config.budget);

    // Phase 1: language-specific experts from shallow layers.
    let shallow = take_top(spec_candidates(0..=l1), budgets.0, &mut selected, "shallow")?;
    experts.extend(shallow.into_iter().map(|c| SelectedExpert {
        layer: c.id.layer,
        expert: c.id.expert,
        score: c.score,
        kind: ScoreKind::Specificity,
        phase: Phase::Shallow,
    }));

    // Phase 2: cross-lingual shared experts from middle layers.
    let mut middle_candidates = Vec::new();
    for l in l1 + 1..=l2 {
        for i in 0..profiles.n_experts {
            let o = overlap_score(&profiles.column(l, i))?;
            let a_mean = profiles.mean_freq(l, i);
            middle_candidates.push(Candidate {
                id: ExpertId::new(l, i),
                score: composite_ovlp(o, a_mean, alpha),
            });
        }
    }
    let middle = take_top(middle_candidates, budgets.1, &mut selected, "middle")?;
    experts.extend(middle.into_iter().map(|c| SelectedExpert {
        layer: c.id.layer,
        expert: c.id.expert,
        score: c.score,
        kind: ScoreKind::Overlap,
        phase: Phase::Middle,
    }));

    // Phase 3: language-specific experts from deep layers.
    let deep_candidates = if l2 + 1 < profiles.n_layers {
        spec_candidates(l2 + 1..=profiles.n_layers - 1)
    } else {
        Vec::new()
    };
    let deep = take_top(deep_candidates, budgets.2, &mut selected, "deep")?;
    experts.extend(deep.into_iter().map(|c| SelectedExpert {
        layer: c.id.layer,
        expert: c.id.expert,
        score: c.score,
        kind: ScoreKind::Specificity,
        phase: Phase::Deep,
    }));

    experts.sort_by_key(|e| (e.layer, e.expert));
    Ok(Selection {
        target: config.target_language.clone(),
        k: config.budget,
        boundaries: config.boundaries,
        ratios: config.ratios,
        alpha: config.alpha,
        budgets,
        experts,
    })
}
