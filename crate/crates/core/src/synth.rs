//! Synthetic "multilingual" corpora.
//!
//! Each language is a seeded n-gram source over a contiguous token-id range
//! plus an optional list of tokens shared with other languages. Resource
//! levels control corpus size, so a suite can mix high- and low-resource
//! languages over (mostly) disjoint vocabulary regions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiseError};
use crate::rng::DetRng;

/// Number of candidate successor tokens per n-gram context. Small values
/// give strongly structured, learnable corpora.
const SUCCESSORS_PER_CONTEXT: usize = 4;

/// Tokens of a language cycle through this many successor classes: a token
/// in class c is followed by tokens of class c+1 (mod the class count).
/// Tokens sharing a class share their successor support, which is what
/// makes their learned representations cluster.
const TOKEN_CLASSES: usize = 3;

/// High-resource languages get this multiple of the low-resource budget.
pub const HIGH_RESOURCE_FACTOR: u64 = 10;

/// Default token budget for a low-resource language in a benchmark suite.
pub const DEFAULT_LOW_BUDGET: u64 = 6_000;

/// Default n-gram order for suite languages.
pub const DEFAULT_NGRAM_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub label: String,
    /// Half-open token-id interval [start, end).
    pub vocab_range: (u32, u32),
    /// Token ids shared with other languages, outside `vocab_range`.
    pub overlap_tokens: Vec<u32>,
    /// Token budget for the training corpus.
    pub resource_level: u64,
    pub ngram_order: usize,
    pub seed: u64,
}

impl LanguageSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let (start, end) = self.vocab_range;
        if start >= end {
            return Err(RiseError::Config(format!(
                "empty vocab range [{start}, {end}) for language {}",
                self.label
            )));
        }
        if end as usize > vocab_size {
            return Err(RiseError::Config(format!(
                "vocab range [{start}, {end}) exceeds vocab size {vocab_size}"
            )));
        }
        if self.overlap_tokens.iter().any(|&t| t as usize >= vocab_size) {
            return Err(RiseError::Config(format!(
                "overlap token out of vocab for language {}",
                self.label
            )));
        }
        if self.resource_level < 1 {
            return Err(RiseError::Config("resource_level must be at least 1".into()));
        }
        if self.ngram_order < 1 {
            return Err(RiseError::Config("ngram_order must be at least 1".into()));
        }
        Ok(())
    }

    /// All tokens this language may emit, ascending and deduplicated.
    pub fn token_set(&self) -> Vec<u32> {
        let mut tokens: Vec<u32> = (self.vocab_range.0..self.vocab_range.1).collect();
        tokens.extend_from_slice(&self.overlap_tokens);
        tokens.sort_unstable();
        tokens.dedup();
        tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub language: String,
    pub split: Split,
    pub sequences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn token_count(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64).sum()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn mix(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// The unigram sampling distribution over `spec.token_set()`, derived
/// deterministically from the spec seed. Returned probabilities sum to 1.
pub fn unigram_distribution(spec: &LanguageSpec) -> Vec<(u32, f64)> {
    let tokens = spec.token_set();
    let mut rng = DetRng::seed_from_u64(mix(spec.seed, 0x756e69)); // "uni"
    let weights: Vec<f64> = tokens.iter().map(|_| 0.05 + rng.uniform().powi(2)).collect();
    let total: f64 = weights.iter().sum();
    tokens
        .into_iter()
        .zip(weights.into_iter().map(|w| w / total))
        .collect()
}

fn sample_from(dist: &[(u32, f64)], rng: &mut DetRng) -> u32 {
    let draw = rng.uniform();
    let mut cum = 0.0;
    for &(token, p) in dist {
        cum += p;
        if draw < cum {
            return token;
        }
    }
    dist.last().unwrap().0
}

/// Class of a token within this language: its rank in the sorted token set
/// modulo `TOKEN_CLASSES`. Shared tokens get per-language classes.
fn token_class(tokens: &[u32], token: u32) -> usize {
    let rank = tokens.binary_search(&token).unwrap_or(0);
    rank % TOKEN_CLASSES
}

/// Successor distribution for one n-gram context. The support is drawn from
/// the class after the most recent token's class, so every class-c token
/// predicts into the same class-(c+1) pool — that shared output structure is
/// what drives learned representations to cluster by (language, class). The
/// concrete subset and weights are hashed from the full context, so fitting
/// a language still takes per-context statistics.
fn context_distribution(spec: &LanguageSpec, tokens: &[u32], context: &[u32]) -> Vec<(u32, f64)> {
    let last = *context.last().expect("context cannot be empty");
    let next_class = (token_class(tokens, last) + 1) % TOKEN_CLASSES;
    let pool: Vec<u32> = tokens
        .iter()
        .copied()
        .filter(|&t| token_class(tokens, t) == next_class)
        .collect();
    let pool = if pool.is_empty() { tokens.to_vec() } else { pool };

    let mut salt = 0x637478u64; // "ctx"
    for &t in context {
        salt = splitmix64(salt ^ u64::from(t).wrapping_mul(0x100000001B3));
    }
    let mut rng = DetRng::seed_from_u64(mix(spec.seed, salt));
    let n_succ = SUCCESSORS_PER_CONTEXT.min(pool.len());
    let mut successors = Vec::with_capacity(n_succ);
    let mut weights = Vec::with_capacity(n_succ);
    for _ in 0..n_succ {
        successors.push(pool[rng.uniform_index(pool.len())]);
        weights.push(0.1 + rng.uniform());
    }
    let total: f64 = weights.iter().sum();
    successors
        .into_iter()
        .zip(weights.into_iter().map(|w| w / total))
        .collect()
}

/// Sample a corpus of `n_sequences` sequences of `seq_len` tokens each and
/// split it 90/10 by prefix into train and held-out parts.
pub fn generate(
    spec: &LanguageSpec,
    n_sequences: usize,
    seq_len: usize,
) -> Result<(Corpus, Corpus)> {
    spec.validate(usize::MAX)?;
    if n_sequences == 0 || seq_len == 0 {
        return Err(RiseError::Config("need at least one sequence and token".into()));
    }
    let requested = n_sequences as u64 * seq_len as u64;
    if requested > spec.resource_level {
        return Err(RiseError::Config(format!(
            "requested {requested} tokens but language {} has a budget of {}",
            spec.label, spec.resource_level
        )));
    }

    let tokens = spec.token_set();
    let unigram = unigram_distribution(spec);
    let mut rng = DetRng::seed_from_u64(mix(spec.seed, 0x676e)); // "gen"
    let context_len = spec.ngram_order.saturating_sub(1);

    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut seq: Vec<u32> = Vec::with_capacity(seq_len);
        for pos in 0..seq_len {
            let token = if context_len == 0 || pos < context_len {
                sample_from(&unigram, &mut rng)
            } else {
                let context = &seq[pos - context_len..pos];
                let dist = context_distribution(spec, &tokens, context);
                sample_from(&dist, &mut rng)
            };
            seq.push(token);
        }
        sequences.push(seq);
    }

    let n_train = n_sequences * 9 / 10;
    let held = sequences.split_off(n_train);
    Ok((
        Corpus {
            language: spec.label.clone(),
            split: Split::Train,
            sequences,
        },
        Corpus {
            language: spec.label.clone(),
            split: Split::HeldOut,
            sequences: held,
        },
    ))
}

/// Build a high/low-resource language suite over a shared vocabulary.
///
/// The vocabulary is cut into equal contiguous ranges, one per language
/// (high-resource languages first). The leading `overlap_fraction` of each
/// range is shared with every other language. High-resource budgets are
/// `HIGH_RESOURCE_FACTOR` times `low_budget`.
pub fn make_benchmark_suite(
    n_high: usize,
    n_low: usize,
    vocab_size: usize,
    overlap_fraction: f64,
    suite_seed: u64,
    low_budget: u64,
) -> Result<Vec<LanguageSpec>> {
    let total = n_high + n_low;
    if total == 0 {
        return Err(RiseError::Config("suite needs at least one language".into()));
    }
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(RiseError::Config(format!(
            "overlap_fraction must be in [0, 1], got {overlap_fraction}"
        )));
    }
    let range_size = vocab_size / total;
    if range_size == 0 {
        return Err(RiseError::Config(format!(
            "vocab size {vocab_size} cannot fit {total} language ranges"
        )));
    }
    let shared_per_range = (overlap_fraction * range_size as f64).round() as usize;

    let ranges: Vec<(u32, u32)> = (0..total)
        .map(|j| ((j * range_size) as u32, ((j + 1) * range_size) as u32))
        .collect();
    let shared: Vec<Vec<u32>> = ranges
        .iter()
        .map(|&(start, _)| (start..start + shared_per_range as u32).collect())
        .collect();

    let mut specs = Vec::with_capacity(total);
    for j in 0..total {
        let is_high = j < n_high;
        let label = if is_high {
            format!("hi{j}")
        } else {
            format!("lo{}", j - n_high)
        };
        let overlap_tokens: Vec<u32> = shared
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != j)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        specs.push(LanguageSpec {
            label,
            vocab_range: ranges[j],
            overlap_tokens,
            resource_level: if is_high {
                low_budget * HIGH_RESOURCE_FACTOR
            } else {
                low_budget
            },
            ngram_order: DEFAULT_NGRAM_ORDER,
            seed: mix(suite_seed, j as u64),
        });
    }
    Ok(specs)
}

/// One sequence per line, space-separated token ids.
pub fn write_corpus_file(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for seq in &corpus.sequences {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus_file(path: &Path, language: &str, split: Split) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let mut sequences = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq: std::result::Result<Vec<u32>, _> =
            line.split_whitespace().map(|w| w.parse::<u32>()).collect();
        sequences.push(seq.map_err(|e| {
            RiseError::Format(format!("bad token on line {}: {e}", lineno + 1))
        })?);
    }
    Ok(Corpus {
        language: language.to_string(),
        split,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(seed: u64) -> LanguageSpec {
        LanguageSpec {
            label: "test".into(),
            vocab_range: (10, 40),
            overlap_tokens: vec![100, 101],
            resource_level: 1_000_000,
            ngram_order: 2,
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(7);
        let (train_a, held_a) = generate(&s, 50, 20).unwrap();
        let (train_b, held_b) = generate(&s, 50, 20).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(held_a, held_b);
        assert_eq!(train_a.sequences.len(), 45);
        assert_eq!(held_a.sequences.len(), 5);
    }

    #[test]
    fn disjoint_specs_share_no_token_types() {
        let a = LanguageSpec {
            label: "a".into(),
            vocab_range: (0, 30),
            overlap_tokens: vec![],
            resource_level: 10_000,
            ngram_order: 2,
            seed: 1,
        };
        let b = LanguageSpec {
            label: "b".into(),
            vocab_range: (30, 60),
            overlap_tokens: vec![],
            resource_level: 10_000,
            ngram_order: 2,
            seed: 2,
        };
        let (ta, _) = generate(&a, 40, 25).unwrap();
        let (tb, _) = generate(&b, 40, 25).unwrap();
        let types_a: BTreeSet<u32> = ta.sequences.iter().flatten().copied().collect();
        let types_b: BTreeSet<u32> = tb.sequences.iter().flatten().copied().collect();
        assert!(types_a.is_disjoint(&types_b));
    }

    #[test]
    fn tokens_stay_in_the_permitted_set() {
        let s = spec(3);
        let permitted: BTreeSet<u32> = s.token_set().into_iter().collect();
        let (train, held) = generate(&s, 30, 40).unwrap();
        for seq in train.sequences.iter().chain(held.sequences.iter()) {
            for t in seq {
                assert!(permitted.contains(t), "token {t} outside permitted set");
            }
        }
    }

    #[test]
    fn unigram_empirical_distribution_matches_spec_distribution() {
        let s = LanguageSpec {
            ngram_order: 1,
            ..spec(11)
        };
        let dist = unigram_distribution(&s);
        let (train, held) = generate(&s, 2_500, 40).unwrap();

        let mut counts: std::collections::BTreeMap<u32, u64> = std::collections::BTreeMap::new();
        let mut total = 0u64;
        for seq in train.sequences.iter().chain(held.sequences.iter()) {
            for &t in seq {
                *counts.entry(t).or_insert(0) += 1;
                total += 1;
            }
        }
        assert_eq!(total, 100_000);

        let mut tv = 0.0;
        for (token, p) in &dist {
            let emp = *counts.get(token).unwrap_or(&0) as f64 / total as f64;
            tv += (p - emp).abs();
        }
        tv /= 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn budget_violation_is_a_config_error() {
        let mut s = spec(1);
        s.resource_level = 100;
        assert!(generate(&s, 10, 20).unwrap_err().is_config());
    }

    #[test]
    fn suite_budgets_and_overlap_structure() {
        let specs = make_benchmark_suite(2, 2, 256, 0.0, 7, 1_000).unwrap();
        assert_eq!(specs.len(), 4);
        let budgets: Vec<u64> = specs.iter().map(|s| s.resource_level).collect();
        assert_eq!(budgets, vec![10_000, 10_000, 1_000, 1_000]);
        // overlap 0: fully disjoint vocabularies
        for i in 0..4 {
            for j in i + 1..4 {
                let a: BTreeSet<u32> = specs[i].token_set().into_iter().collect();
                let b: BTreeSet<u32> = specs[j].token_set().into_iter().collect();
                assert!(a.is_disjoint(&b), "specs {i} and {j} overlap");
            }
        }

        // overlap 1: everyone shares the full covered vocabulary
        let shared = make_benchmark_suite(2, 2, 256, 1.0, 7, 1_000).unwrap();
        let full: BTreeSet<u32> = (0..256u32).collect();
        for s in &shared {
            let set: BTreeSet<u32> = s.token_set().into_iter().collect();
            assert_eq!(set, full);
        }
    }

    #[test]
    fn suite_seeds_and_labels_are_distinct() {
        let specs = make_benchmark_suite(2, 2, 256, 0.1, 7, 1_000).unwrap();
        let labels: BTreeSet<&str> = specs.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels.len(), 4);
        assert!(labels.contains("hi0") && labels.contains("lo1"));
        let seeds: BTreeSet<u64> = specs.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn high_resource_corpora_have_strictly_more_tokens() {
        let specs = make_benchmark_suite(1, 1, 64, 0.0, 3, 500).unwrap();
        let seq_len = 25;
        let mut token_counts = Vec::new();
        for s in &specs {
            let n_seqs = (s.resource_level / seq_len as u64) as usize;
            let (train, held) = generate(s, n_seqs, seq_len).unwrap();
            token_counts.push(train.token_count() + held.token_count());
        }
        assert!(token_counts[0] > token_counts[1]);
    }

    #[test]
    fn vocab_overflow_is_a_config_error() {
        assert!(make_benchmark_suite(3, 3, 4, 0.0, 1, 100).unwrap_err().is_config());
    }

    #[test]
    fn corpus_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        let corpus = Corpus {
            language: "x".into(),
            split: Split::Train,
            sequences: vec![vec![1, 2, 3], vec![40, 0, 17, 9]],
        };
        write_corpus_file(&corpus, &path).unwrap();
        let back = read_corpus_file(&path, "x", Split::Train).unwrap();
        assert_eq!(back, corpus);
    }
}
