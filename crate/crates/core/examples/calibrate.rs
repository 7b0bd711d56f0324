// Scratch calibration probe for the end-to-end scenarios. Not part of the
// deliverable surface; run with:
//   PRE_LR=0.5 PRE_EPOCHS=3 cargo run --release -p rise-core --example calibrate
use std::env;
use std::time::Instant;

use rise_core::*;

fn envf(key: &str, default: f64) -> f64 {
    env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(key: &str, default: usize) -> usize {
    env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envs(key: &str, default: &str) -> String {
    env::var(key).unwrap_or_else(|_| default.to_string())
}

fn opt(name: &str) -> Optimizer {
    if name == "adam" { Optimizer::Adam } else { Optimizer::Sgd }
}

fn main() {
    let t0 = Instant::now();

    let suite_seed = envu("SUITE_SEED", 7) as u64;
    let model_seed = envu("MODEL_SEED", 1) as u64;
    let low_budget = envu("LOW_BUDGET", 6_000) as u64;
    let overlap = envf("OVERLAP", 0.1);
    let pre_lr = envf("PRE_LR", 0.5);
    let pre_epochs = envu("PRE_EPOCHS", 3);
    let pre_opt = envs("PRE_OPT", "sgd");
    let ft_lr = envf("FT_LR", 1e-3);
    let ft_epochs = envu("FT_EPOCHS", 2);
    let ft_opt = envs("FT_OPT", "adam");
    let budget = envu("K", 16);

    // --- suite + corpora ---------------------------------------------------
    let specs = make_benchmark_suite(2, 2, 256, overlap, suite_seed, low_budget).unwrap();
    let seq_len = 32;
    let mut train_corpora = Vec::new();
    let mut held_corpora = Vec::new();
    for spec in &specs {
        let n_seqs = (spec.resource_level / seq_len as u64) as usize;
        let (train, held) = generate(spec, n_seqs, seq_len).unwrap();
        train_corpora.push(train);
        held_corpora.push(held);
    }

    // --- pretrain vanilla --------------------------------------------------
    let config = ModelConfig::toy(model_seed);
    let model0 = init_model(&config).unwrap();
    let mixed: Vec<Vec<u32>> = train_corpora
        .iter()
        .flat_map(|c| c.sequences.iter().cloned())
        .collect();
    let pre_cfg = TrainConfig {
        epochs: pre_epochs,
        batch_size: 16,
        learning_rate: pre_lr,
        seed: 11,
        optimizer: opt(&pre_opt),
    };
    let t = Instant::now();
    let vanilla = pretrain(&model0, &mixed, &pre_cfg).unwrap();
    println!(
        "pretrain ({pre_opt} lr={pre_lr} epochs={pre_epochs}): {:?}, loss {:.4} -> {:.4}",
        t.elapsed(),
        vanilla.loss_history.first().unwrap(),
        vanilla.loss_history.last().unwrap()
    );
    let vanilla = vanilla.model;

    for (i, held) in held_corpora.iter().enumerate() {
        let loss = batch_loss(&vanilla, &held.sequences).unwrap();
        println!("vanilla held-out loss {}: {:.4}", specs[i].label, loss);
    }

    // --- profiles ------------------------------------------------------
    let profiles: Vec<RoutingProfile> = train_corpora
        .iter()
        .map(|c| collect_profile(&vanilla, &c.sequences, &c.language).unwrap())
        .collect();

    // --- criterion 8: global overlap ---------------------------------------
    let k = 30;
    let matrix = overlap_matrix(&profiles, k).unwrap();
    println!("overlap matrix (K=30):");
    for (i, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}: {}", specs[i].label, cells.join(" "));
    }
    let within = (matrix[0][1] + matrix[2][3]) / 2.0;
    let cross = (matrix[0][2] + matrix[0][3] + matrix[1][2] + matrix[1][3]) / 4.0;
    println!(
        "within-group mean {within:.4}, cross-group mean {cross:.4} -> {}",
        if cross < within { "OK" } else { "FAIL" }
    );

    // --- criterion 8: layer-wise curves -------------------------------------
    let boundaries = (2, 4);
    for low_idx in [2usize, 3] {
        for topk in [2usize, 3] {
            let curve = layerwise_similarity(&profiles[low_idx], &profiles[0], topk).unwrap();
            let (s, m, d) = region_average(&curve, boundaries).unwrap();
            println!(
                "{} vs hi0 (top{topk}): {:?} S {s:.3} M {m:.3} D {d:.3} -> {}",
                specs[low_idx].label,
                curve.values.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
                if d < m { "OK" } else { "FAIL" }
            );
        }
    }

    // --- criterion 9: RISE selective training -------------------------------
    let pm = ProfileMatrix::from_profiles(&profiles).unwrap();
    let sel_cfg = SelectionConfig {
        target_language: "lo0".into(),
        budget,
        boundaries: (2, 4),
        ratios: (0.35, 0.25, 0.40),
        alpha: 10.0,
    };
    let selection = select_subnetwork(&pm, &sel_cfg).unwrap();
    println!("selected {} experts, budgets {:?}", selection.experts.len(), selection.budgets);
    // Overlap mass per language on the selected set.
    for p in &profiles {
        println!("  overlap mass {}: {:.4}", p.language, overlap_mass(p, &selection.expert_set()));
    }

    let mask = build_mask(&selection.expert_set(), &vanilla).unwrap();
    let ft_cfg = TrainConfig {
        epochs: ft_epochs,
        batch_size: 8,
        learning_rate: ft_lr,
        seed: 13,
        optimizer: opt(&ft_opt),
    };
    let target_train = &train_corpora[2].sequences;
    let tuned = train(&vanilla, target_train, &mask, &ft_cfg).unwrap().model;

    let mut ok9 = true;
    let mut tuned_losses = Vec::new();
    for (i, held) in held_corpora.iter().enumerate() {
        let before = batch_loss(&vanilla, &held.sequences).unwrap();
        let after = batch_loss(&tuned, &held.sequences).unwrap();
        let change = (after - before) / before;
        tuned_losses.push(after);
        let verdict = if i == 2 {
            if change <= -0.05 { "OK" } else { ok9 = false; "FAIL target" }
        } else if change.abs() <= 0.01 {
            "OK"
        } else {
            ok9 = false;
            "FAIL drift"
        };
        println!(
            "held-out {}: {:.4} -> {:.4} ({:+.2}%) {}",
            specs[i].label, before, after, change * 100.0, verdict
        );
    }
    println!("criterion 9 training: {}", if ok9 { "OK" } else { "FAIL" });

    // --- criterion 9: pruning ------------------------------------------------
    let pruned = tuned.prune_experts(&selection.expert_set()).unwrap();
    let mut target_increase = 0.0;
    let mut others = Vec::new();
    for (i, held) in held_corpora.iter().enumerate() {
        let after = batch_loss(&pruned, &held.sequences).unwrap();
        let change = (after - tuned_losses[i]) / tuned_losses[i];
        println!(
            "pruned held-out {}: ({:+.2}%)",
            specs[i].label, change * 100.0
        );
        if i == 2 { target_increase = change } else { others.push(change) }
    }
    let mean_other = others.iter().sum::<f64>() / others.len() as f64;
    println!(
        "prune: target {:+.2}% vs mean non-target {:+.2}% -> {}",
        target_increase * 100.0,
        mean_other * 100.0,
        if target_increase > mean_other { "OK" } else { "FAIL" }
    );

    println!("total {:?}", t0.elapsed());
}
