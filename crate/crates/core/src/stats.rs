//! Per-language routing statistics and overlap analysis.
//!
//! Counts are exact integers aggregated from routing traces; activation
//! frequencies are derived on demand so that profile merging stays exact.
//! Every top-K selection in this module breaks ties by (layer, expert)
//! ascending.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiseError};
use crate::model::{ExpertId, ExpertSet, MoeModel};

/// Activation counts for one language over a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingProfile {
    pub language: String,
    /// Total number of tokens processed.
    pub token_total: u64,
    pub n_layers: usize,
    pub n_experts: usize,
    /// Row-major layer x expert activation counts.
    counts: Vec<u64>,
}

impl RoutingProfile {
    pub fn new(language: &str, n_layers: usize, n_experts: usize) -> Self {
        RoutingProfile {
            language: language.to_string(),
            token_total: 0,
            n_layers,
            n_experts,
            counts: vec![0; n_layers * n_experts],
        }
    }

    #[inline]
    pub fn count(&self, layer: usize, expert: usize) -> u64 {
        self.counts[layer * self.n_experts + expert]
    }

    /// Activation frequency a^(l)_i = count / token_total.
    #[inline]
    pub fn freq(&self, layer: usize, expert: usize) -> f64 {
        if self.token_total == 0 {
            return 0.0;
        }
        self.count(layer, expert) as f64 / self.token_total as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn layer_counts(&self, layer: usize) -> &[u64] {
        &self.counts[layer * self.n_experts..(layer + 1) * self.n_experts]
    }

    /// Merge another profile collected on a disjoint corpus of the same
    /// language; counts add exactly.
    pub fn merge(&mut self, other: &RoutingProfile) -> Result<()> {
        if self.n_layers != other.n_layers || self.n_experts != other.n_experts {
            return Err(RiseError::Input("profile shape mismatch in merge".into()));
        }
        self.token_total += other.token_total;
        for (c, o) in self.counts.iter_mut().zip(other.counts.iter()) {
            *c += o;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &RoutingProfile) -> bool {
        self.n_layers == other.n_layers && self.n_experts == other.n_experts
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    language: String,
    token_total: u64,
    shape: [usize; 2],
    counts: Vec<u64>,
}

impl RoutingProfile {
    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            language: self.language.clone(),
            token_total: self.token_total,
            shape: [self.n_layers, self.n_experts],
            counts: self.counts.clone(),
        };
        serde_json::to_string_pretty(&file).expect("profile serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<RoutingProfile> {
        let file: ProfileFile = serde_json::from_str(text)?;
        if file.counts.len() != file.shape[0] * file.shape[1] {
            return Err(RiseError::Format(format!(
                "profile counts length {} does not match shape {}x{}",
                file.counts.len(),
                file.shape[0],
                file.shape[1]
            )));
        }
        Ok(RoutingProfile {
            language: file.language,
            token_total: file.token_total,
            n_layers: file.shape[0],
            n_experts: file.shape[1],
            counts: file.counts,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<RoutingProfile> {
        RoutingProfile::from_json(&fs::read_to_string(path)?)
    }
}

/// Run the corpus through the model and tally which experts each token
/// activates at each layer.
pub fn collect_profile(
    model: &MoeModel,
    corpus: &[Vec<u32>],
    language: &str,
) -> Result<RoutingProfile> {
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(RiseError::Input(format!(
            "empty corpus for language {language}: token total would be zero"
        )));
    }
    let c = &model.config;
    let mut profile = RoutingProfile::new(language, c.n_layers, c.n_experts_per_layer);
    for seq in corpus {
        if seq.is_empty() {
            continue;
        }
        let (_, trace) = model.forward(seq)?;
        profile.token_total += seq.len() as u64;
        for token in &trace.tokens {
            for (l, routing) in token.iter().enumerate() {
                for &i in &routing.experts {
                    profile.counts[l * c.n_experts_per_layer + i] += 1;
                }
            }
        }
    }
    Ok(profile)
}

/// Sort expert ids by count descending, ties by (layer, expert) ascending.
fn rank_by_count(ids: &mut [(ExpertId, u64)]) {
    ids.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// The K globally most-activated experts of a profile.
pub fn global_topk(profile: &RoutingProfile, k: usize) -> Result<ExpertSet> {
    let universe = profile.n_layers * profile.n_experts;
    if k < 1 || k > universe {
        return Err(RiseError::Input(format!(
            "global top-K must satisfy 1 <= K <= {universe}, got {k}"
        )));
    }
    let mut ids: Vec<(ExpertId, u64)> = (0..profile.n_layers)
        .flat_map(|l| {
            (0..profile.n_experts).map(move |i| (ExpertId::new(l, i), 0u64))
        })
        .collect();
    for entry in &mut ids {
        entry.1 = profile.count(entry.0.layer, entry.0.expert);
    }
    rank_by_count(&mut ids);
    Ok(ids[..k].iter().map(|(id, _)| *id).collect())
}

/// |a ∩ b| / |a ∪ b|, with two empty sets defined as similarity 1.
pub fn jaccard(a: &ExpertSet, b: &ExpertSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).len();
    let union = a.union(b).len();
    inter as f64 / union as f64
}

/// Per-layer routing similarity of one language against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub language: String,
    pub reference: String,
    pub values: Vec<f64>,
}

/// Per-layer top set of a profile by layer-local counts.
pub fn layer_top_set(profile: &RoutingProfile, layer: usize, k: usize) -> ExpertSet {
    let mut ids: Vec<(ExpertId, u64)> = (0..profile.n_experts)
        .map(|i| (ExpertId::new(layer, i), profile.count(layer, i)))
        .collect();
    rank_by_count(&mut ids);
    ids[..k].iter().map(|(id, _)| *id).collect()
}

/// Jaccard similarity between the two profiles' per-layer top sets, one
/// value per layer.
pub fn layerwise_similarity(
    profile: &RoutingProfile,
    reference: &RoutingProfile,
    per_layer_topk: usize,
) -> Result<SimilarityCurve> {
    if !profile.same_shape(reference) {
        return Err(RiseError::Input("profile shapes differ".into()));
    }
    if per_layer_topk < 1 || per_layer_topk > profile.n_experts {
        return Err(RiseError::Input(format!(
            "per-layer top-K must satisfy 1 <= K <= {}, got {per_layer_topk}",
            profile.n_experts
        )));
    }
    let values = (0..profile.n_layers)
        .map(|l| {
            let a = layer_top_set(profile, l, per_layer_topk);
            let b = layer_top_set(reference, l, per_layer_topk);
            jaccard(&a, &b)
        })
        .collect();
    Ok(SimilarityCurve {
        language: profile.language.clone(),
        reference: reference.language.clone(),
        values,
    })
}

/// Mean similarity over the shallow [0, L1], middle (L1, L2] and deep
/// (L2, L-1] layer regions.
pub fn region_average(curve: &SimilarityCurve, boundaries: (usize, usize)) -> Result<(f64, f64, f64)> {
    let (l1, l2) = boundaries;
    let n = curve.values.len();
    if !(l1 < l2 && l2 < n) {
        return Err(RiseError::Input(format!(
            "layer boundaries must satisfy 0 <= L1 < L2 < {n}, got ({l1}, {l2})"
        )));
    }
    let mean = |range: std::ops::RangeInclusive<usize>| {
        let len = range.end() - range.start() + 1;
        curve.values[*range.start()..=*range.end()].iter().sum::<f64>() / len as f64
    };
    Ok((mean(0..=l1), mean(l1 + 1..=l2), mean(l2 + 1..=n - 1)))
}

/// Pairwise global-top-K Jaccard matrix across profiles; symmetric with a
/// unit diagonal.
pub fn overlap_matrix(profiles: &[RoutingProfile], k: usize) -> Result<Vec<Vec<f64>>> {
    if profiles.len() < 2 {
        return Err(RiseError::Input(
            "overlap matrix needs at least two profiles".into(),
        ));
    }
    for p in &profiles[1..] {
        if !p.same_shape(&profiles[0]) {
            return Err(RiseError::Input("profile shapes differ".into()));
        }
    }
    let sets: Vec<ExpertSet> = profiles
        .iter()
        .map(|p| global_topk(p, k))
        .collect::<Result<_>>()?;
    let m = profiles.len();
    let mut matrix = vec![vec![0.0; m]; m];
    for i in 0..m {
        matrix[i][i] = 1.0;
        for j in i + 1..m {
            let v = jaccard(&sets[i], &sets[j]);
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    Ok(matrix)
}

/// Per-layer language x expert activation frequency matrices, the input to
/// expert selection.
#[derive(Debug, Clone)]
pub struct ProfileMatrix {
    pub languages: Vec<String>,
    pub n_layers: usize,
    pub n_experts: usize,
    /// freqs[l][lang_idx * n_experts + expert]
    freqs: Vec<Vec<f64>>,
}

impl ProfileMatrix {
    pub fn from_profiles(profiles: &[RoutingProfile]) -> Result<ProfileMatrix> {
        if profiles.is_empty() {
            return Err(RiseError::Input("no profiles given".into()));
        }
        for p in &profiles[1..] {
            if !p.same_shape(&profiles[0]) {
                return Err(RiseError::Input("profile shapes differ".into()));
            }
        }
        let n_layers = profiles[0].n_layers;
        let n_experts = profiles[0].n_experts;
        let languages: Vec<String> = profiles.iter().map(|p| p.language.clone()).collect();
        let freqs = (0..n_layers)
            .map(|l| {
                let mut rows = Vec::with_capacity(profiles.len() * n_experts);
                for p in profiles {
                    for i in 0..n_experts {
                        rows.push(p.freq(l, i));
                    }
                }
                rows
            })
            .collect();
        Ok(ProfileMatrix {
            languages,
            n_layers,
            n_experts,
            freqs,
        })
    }

    pub fn n_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn language_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }

    #[inline]
    pub fn freq(&self, lang_idx: usize, layer: usize, expert: usize) -> f64 {
        self.freqs[layer][lang_idx * self.n_experts + expert]
    }

    /// One expert's activation frequencies across all languages.
    pub fn column(&self, layer: usize, expert: usize) -> Vec<f64> {
        (0..self.n_languages())
            .map(|m| self.freq(m, layer, expert))
            .collect()
    }

    /// Mean activation frequency of an expert over all languages
    /// (including the target).
    pub fn mean_freq(&self, layer: usize, expert: usize) -> f64 {
        let m = self.n_languages();
        let mut sum = 0.0;
        for lang in 0..m {
            sum += self.freq(lang, layer, expert);
        }
        sum / m as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;

    fn toy_profile(language: &str, counts: Vec<u64>, n_layers: usize, n_experts: usize) -> RoutingProfile {
        let token_total = {
            // Infer a consistent token total from layer 0 counts: each token
            // contributes top_k activations per layer; tests pass explicit
            // totals when they care.
            counts[..n_experts].iter().sum::<u64>()
        };
        RoutingProfile {
            language: language.into(),
            token_total,
            n_layers,
            n_experts,
            counts,
        }
    }

    #[test]
    fn saturated_routing_gives_unit_frequencies() {
        let mut config = ModelConfig::toy(2);
        config.top_k = config.n_experts_per_layer;
        let model = init_model(&config).unwrap();
        let profile = collect_profile(&model, &[vec![1, 2, 3], vec![4, 5]], "sat").unwrap();
        for l in 0..config.n_layers {
            for i in 0..config.n_experts_per_layer {
                assert_eq!(profile.freq(l, i), 1.0);
            }
        }
    }

    #[test]
    fn single_token_topk1_profile_is_an_indicator() {
        let mut config = ModelConfig::toy(9);
        config.top_k = 1;
        let model = init_model(&config).unwrap();
        let profile = collect_profile(&model, &[vec![17]], "one").unwrap();
        assert_eq!(profile.token_total, 1);
        for l in 0..config.n_layers {
            let ones = (0..config.n_experts_per_layer)
                .filter(|&i| profile.freq(l, i) == 1.0)
                .count();
            let zeros = (0..config.n_experts_per_layer)
                .filter(|&i| profile.freq(l, i) == 0.0)
                .count();
            assert_eq!(ones, 1);
            assert_eq!(zeros, config.n_experts_per_layer - 1);
        }
    }

    #[test]
    fn counts_match_a_manual_trace_tally() {
        let config = ModelConfig::toy(33);
        let model = init_model(&config).unwrap();
        let corpus = vec![vec![10u32, 20, 30]];
        let profile = collect_profile(&model, &corpus, "manual").unwrap();

        let mut manual = vec![0u64; config.n_layers * config.n_experts_per_layer];
        let (_, trace) = model.forward(&corpus[0]).unwrap();
        for token in &trace.tokens {
            for (l, routing) in token.iter().enumerate() {
                for &i in &routing.experts {
                    manual[l * config.n_experts_per_layer + i] += 1;
                }
            }
        }
        assert_eq!(profile.counts(), manual.as_slice());
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        let model = init_model(&ModelConfig::toy(1)).unwrap();
        assert!(collect_profile(&model, &[], "x").unwrap_err().is_input());
    }

    #[test]
    fn frequencies_sum_to_top_k_per_layer() {
        let config = ModelConfig::toy(77);
        let model = init_model(&config).unwrap();
        let corpus: Vec<Vec<u32>> = (0..10).map(|s| vec![s, s + 50, s + 100, s + 200]).collect();
        let profile = collect_profile(&model, &corpus, "norm").unwrap();
        for l in 0..config.n_layers {
            let sum: f64 = (0..config.n_experts_per_layer).map(|i| profile.freq(l, i)).sum();
            assert!(
                (sum - config.top_k as f64).abs() < 1e-9,
                "layer {l} frequency sum {sum}"
            );
        }
    }

    #[test]
    fn global_topk_full_k_returns_the_universe() {
        let profile = toy_profile("u", vec![3, 1, 0, 7, 2, 2], 3, 2);
        let set = global_topk(&profile, 6).unwrap();
        assert_eq!(set, ExpertSet::full_universe(&ModelConfig {
            vocab_size: 1,
            d_model: 1,
            d_expert_hidden: 1,
            n_layers: 3,
            n_experts_per_layer: 2,
            top_k: 1,
            max_seq_len: 1,
            seed: 0,
        }));
    }

    #[test]
    fn global_topk_matches_a_sort_oracle() {
        // Strictly ordered counts: the top set is the lexicographic prefix
        // of the descending sort.
        let counts = vec![9, 5, 8, 1, 7, 3]; // (0,0)=9 (1,0)=8 (2,0)=7 (1,1)? ...
        let profile = toy_profile("o", counts.clone(), 3, 2);
        let set = global_topk(&profile, 3).unwrap();
        let mut ranked: Vec<(u64, usize, usize)> = counts
            .iter()
            .enumerate()
            .map(|(idx, &c)| (c, idx / 2, idx % 2))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let expected: ExpertSet = ranked[..3]
            .iter()
            .map(|&(_, l, i)| ExpertId::new(l, i))
            .collect();
        assert_eq!(set, expected);
    }

    #[test]
    fn global_topk_ties_prefer_lower_layer_and_expert() {
        // Experts (0,1) and (1,0) tie at the K-th rank; (0,1) must win.
        let profile = toy_profile("t", vec![9, 4, 4, 1], 2, 2);
        let set = global_topk(&profile, 2).unwrap();
        assert!(set.contains(&ExpertId::new(0, 0)));
        assert!(set.contains(&ExpertId::new(0, 1)));
        assert!(!set.contains(&ExpertId::new(1, 0)));
    }

    #[test]
    fn global_topk_range_is_validated() {
        let profile = toy_profile("r", vec![1, 2, 3, 4], 2, 2);
        assert!(global_topk(&profile, 0).unwrap_err().is_input());
        assert!(global_topk(&profile, 5).unwrap_err().is_input());
    }

    #[test]
    fn jaccard_examples() {
        let a: ExpertSet = [(0, 1), (0, 2), (1, 0)]
            .iter()
            .map(|&(l, i)| ExpertId::new(l, i))
            .collect();
        let b: ExpertSet = [(0, 2), (1, 0), (1, 1)]
            .iter()
            .map(|&(l, i)| ExpertId::new(l, i))
            .collect();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &b), 0.5);
        let disjoint: ExpertSet = [(5, 5)].iter().map(|&(l, i)| ExpertId::new(l, i)).collect();
        assert_eq!(jaccard(&a, &disjoint), 0.0);
        assert_eq!(jaccard(&ExpertSet::new(), &ExpertSet::new()), 1.0);
    }

    #[test]
    fn layerwise_similarity_identity_and_saturation() {
        let config = ModelConfig::toy(15);
        let model = init_model(&config).unwrap();
        let corpus: Vec<Vec<u32>> = (0..5).map(|s| vec![s * 3, s * 5 + 1, s + 9]).collect();
        let profile = collect_profile(&model, &corpus, "a").unwrap();

        let self_curve = layerwise_similarity(&profile, &profile, 2).unwrap();
        assert!(self_curve.values.iter().all(|&v| v == 1.0));

        let other = collect_profile(&model, &[vec![200, 201, 202]], "b").unwrap();
        let saturated = layerwise_similarity(&profile, &other, config.n_experts_per_layer).unwrap();
        assert!(saturated.values.iter().all(|&v| v == 1.0));

        assert!(layerwise_similarity(&profile, &other, config.n_experts_per_layer + 1)
            .unwrap_err()
            .is_input());
    }

    #[test]
    fn region_average_constant_curve() {
        let curve = SimilarityCurve {
            language: "x".into(),
            reference: "en".into(),
            values: vec![0.4; 8],
        };
        let (s, m, d) = region_average(&curve, (2, 4)).unwrap();
        assert!((s - 0.4).abs() < 1e-12);
        assert!((m - 0.4).abs() < 1e-12);
        assert!((d - 0.4).abs() < 1e-12);
    }

    #[test]
    fn region_average_hand_indexed() {
        // L=8, curve [0,1,0,1,0,1,0,1], boundaries (2,5):
        // shallow = layers 0..=2 -> mean 1/3
        // middle  = layers 3..=5 -> mean 2/3
        // deep    = layers 6..=7 -> mean 1/2
        let curve = SimilarityCurve {
            language: "x".into(),
            reference: "en".into(),
            values: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        };
        let (s, m, d) = region_average(&curve, (2, 5)).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn region_average_reproduces_published_fixture() {
        // A 48-layer fixture whose per-layer values average to the published
        // Bengali triple (0.12, 0.22, 0.05) under boundaries (17, 29).
        let mut values = Vec::new();
        values.extend(std::iter::repeat(0.12).take(18));
        values.extend(std::iter::repeat(0.22).take(12));
        values.extend(std::iter::repeat(0.05).take(18));
        let curve = SimilarityCurve {
            language: "bn".into(),
            reference: "en".into(),
            values,
        };
        let (s, m, d) = region_average(&curve, (17, 29)).unwrap();
        assert!((s - 0.12).abs() < 1e-12);
        assert!((m - 0.22).abs() < 1e-12);
        assert!((d - 0.05).abs() < 1e-12);
    }

    #[test]
    fn region_average_rejects_malformed_boundaries() {
        let curve = SimilarityCurve {
            language: "x".into(),
            reference: "en".into(),
            values: vec![0.0; 8],
        };
        assert!(region_average(&curve, (4, 4)).unwrap_err().is_input());
        assert!(region_average(&curve, (4, 8)).unwrap_err().is_input());
    }

    #[test]
    fn overlap_matrix_of_duplicates_is_all_ones() {
        let profile = toy_profile("dup", vec![5, 3, 2, 8, 1, 0], 3, 2);
        let matrix = overlap_matrix(&[profile.clone(), profile.clone(), profile], 3).unwrap();
        for row in &matrix {
            for &v in row {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn overlap_matrix_is_symmetric_with_unit_diagonal() {
        let a = toy_profile("a", vec![5, 3, 2, 8, 1, 0], 3, 2);
        let b = toy_profile("b", vec![0, 1, 9, 2, 4, 4], 3, 2);
        let c = toy_profile("c", vec![2, 2, 2, 2, 2, 2], 3, 2);
        for k in [1, 2, 4, 6] {
            let m = overlap_matrix(&[a.clone(), b.clone(), c.clone()], k).unwrap();
            for i in 0..3 {
                assert_eq!(m[i][i], 1.0);
                for j in 0..3 {
                    assert_eq!(m[i][j], m[j][i]);
                }
            }
        }
    }

    #[test]
    fn profile_json_round_trips() {
        let profile = toy_profile("json", vec![5, 3, 2, 8, 1, 0], 3, 2);
        let text = profile.to_json();
        let back = RoutingProfile::from_json(&text).unwrap();
        assert_eq!(back, profile);
    }

    #[test]
    fn profiles_are_additive_over_corpora() {
        let config = ModelConfig::toy(4);
        let model = init_model(&config).unwrap();
        let corpus_a: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![9, 8]];
        let corpus_b: Vec<Vec<u32>> = vec![vec![100, 101], vec![7, 7, 7]];
        let both: Vec<Vec<u32>> = corpus_a.iter().chain(corpus_b.iter()).cloned().collect();

        let mut merged = collect_profile(&model, &corpus_a, "l").unwrap();
        merged
            .merge(&collect_profile(&model, &corpus_b, "l").unwrap())
            .unwrap();
        let direct = collect_profile(&model, &both, "l").unwrap();
        assert_eq!(merged, direct);
    }

    #[test]
    fn profile_matrix_rows_match_profiles() {
        let a = toy_profile("a", vec![4, 0, 1, 3], 2, 2);
        let b = toy_profile("b", vec![0, 4, 2, 2], 2, 2);
        let pm = ProfileMatrix::from_profiles(&[a.clone(), b.clone()]).unwrap();
        for l in 0..2 {
            for i in 0..2 {
                assert_eq!(pm.freq(0, l, i), a.freq(l, i));
                assert_eq!(pm.freq(1, l, i), b.freq(l, i));
            }
        }
        assert_eq!(pm.column(0, 0), vec![a.freq(0, 0), b.freq(0, 0)]);
        assert_eq!(pm.language_index("b"), Some(1));
    }

    proptest! {
        #[test]
        fn jaccard_properties(
            xs in proptest::collection::btree_set((0usize..4, 0usize..4), 0..10),
            ys in proptest::collection::btree_set((0usize..4, 0usize..4), 0..10),
        ) {
            let a: ExpertSet = xs.iter().map(|&(l, i)| ExpertId::new(l, i)).collect();
            let b: ExpertSet = ys.iter().map(|&(l, i)| ExpertId::new(l, i)).collect();
            let j_ab = jaccard(&a, &b);
            let j_ba = jaccard(&b, &a);
            prop_assert_eq!(j_ab, j_ba);
            prop_assert!((0.0..=1.0).contains(&j_ab));
            prop_assert_eq!(jaccard(&a, &a), 1.0);
            if !a.is_empty() && !b.is_empty() && a.intersection(&b).is_empty() {
                prop_assert_eq!(j_ab, 0.0);
            }
        }

        #[test]
        fn global_topk_matches_brute_force_for_all_k(
            counts in proptest::collection::vec(0u64..20, 16),
        ) {
            // 4 layers x 4 experts = 16-element universe, every K.
            let profile = RoutingProfile {
                language: "p".into(),
                token_total: 100,
                n_layers: 4,
                n_experts: 4,
                counts: counts.clone(),
            };
            let mut ranked: Vec<(u64, usize, usize)> = counts
                .iter()
                .enumerate()
                .map(|(idx, &c)| (c, idx / 4, idx % 4))
                .collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            for k in 1..=16usize {
                let set = global_topk(&profile, k).unwrap();
                let expected: ExpertSet = ranked[..k]
                    .iter()
                    .map(|&(_, l, i)| ExpertId::new(l, i))
                    .collect();
                prop_assert_eq!(set, expected);
            }
        }
    }
}
