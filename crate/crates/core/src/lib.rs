//! Desk-scale mixture-of-experts laboratory.
//!
//! A deterministic toy MoE language model plus the analysis and adaptation
//! pipeline built around it: per-language routing statistics, global and
//! layer-wise overlap analysis, scored expert-subnetwork selection,
//! selective training with frozen complements, expert pruning, and a
//! verification suite for gradient isolation, exact invariance and the
//! cross-language perturbation bound.

pub mod checkpoint;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod reports;
pub mod rng;
pub mod selection;
pub mod stats;
pub mod synth;
pub mod training;
pub mod verify;

pub use error::{Result, RiseError};
pub use grad::{backward, backward_full, batch_loss, ExpertGrad, FullGradients, Gradients};
pub use linalg::Matrix;
pub use model::{
    init_model, loss_lm, ExpertId, ExpertSet, ModelConfig, MoeModel, RoutingTrace, TokenRouting,
};
pub use selection::{select_subnetwork, Selection, SelectionConfig};
pub use stats::{
    collect_profile, global_topk, jaccard, layerwise_similarity, overlap_matrix, region_average,
    ProfileMatrix, RoutingProfile, SimilarityCurve,
};
pub use synth::{generate, make_benchmark_suite, Corpus, LanguageSpec, Split};
pub use training::{build_mask, pretrain, train, Optimizer, ParamMask, TrainConfig, TrainRun};
pub use verify::{
    collect_layer_samples, estimate_lipschitz, overlap_mass, perturbation_check, routing_support,
    support_set, verify_exact_invariance, verify_gradient_isolation, IsolationReport,
    LipschitzEstimates,
};
