// Scratch diagnostics for routing dynamics. Not part of the deliverable.
//   cargo run --release -p rise-core --example inspect
use rise_core::linalg::l2_norm;
use rise_core::*;

fn main() {
    let specs = make_benchmark_suite(2, 2, 256, 0.1, 7, 6_000).unwrap();
    let seq_len = 32;
    let mut train_corpora = Vec::new();
    for spec in &specs {
        let n_seqs = (spec.resource_level / seq_len as u64) as usize;
        let (train, _) = generate(spec, n_seqs, seq_len).unwrap();
        train_corpora.push(train);
    }

    let config = ModelConfig::toy(1);
    let model0 = init_model(&config).unwrap();
    let mixed: Vec<Vec<u32>> = train_corpora
        .iter()
        .flat_map(|c| c.sequences.iter().cloned())
        .collect();
    let pre_cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        learning_rate: 1e-2,
        seed: 11,
        optimizer: Optimizer::Adam,
    };
    let vanilla = pretrain(&model0, &mixed, &pre_cfg).unwrap().model;

    // Embedding drift per language.
    for (spec, _) in specs.iter().zip(&train_corpora) {
        let mut drift = 0.0;
        let mut norm = 0.0;
        let mut n = 0;
        for t in spec.vocab_range.0..spec.vocab_range.1 {
            let before = model0.token_embedding.row(t as usize);
            let after = vanilla.token_embedding.row(t as usize);
            let diff: f64 = before
                .iter()
                .zip(after.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            drift += diff.sqrt();
            norm += l2_norm(after);
            n += 1;
        }
        println!(
            "{}: mean embedding drift {:.3}, mean norm {:.3}",
            spec.label,
            drift / n as f64,
            norm / n as f64
        );
    }

    // Hidden norms per layer (language means) and per-layer expert histograms.
    for (spec, corpus) in specs.iter().zip(&train_corpora) {
        let sample: Vec<Vec<u32>> = corpus.sequences.iter().take(40).cloned().collect();
        let samples = collect_layer_samples(&vanilla, &sample).unwrap();
        let norms: Vec<String> = samples
            .iter()
            .map(|layer| {
                let mean = layer.iter().map(|h| l2_norm(h)).sum::<f64>() / layer.len() as f64;
                format!("{mean:.2}")
            })
            .collect();
        println!("{} hidden norms per layer: {}", spec.label, norms.join(" "));
    }

    let profiles: Vec<RoutingProfile> = train_corpora
        .iter()
        .map(|c| collect_profile(&vanilla, &c.sequences, &c.language).unwrap())
        .collect();

    for l in 0..config.n_layers {
        println!("layer {l}:");
        for p in &profiles {
            let counts = p.layer_counts(l);
            let total: u64 = counts.iter().sum();
            let shares: Vec<String> = counts
                .iter()
                .map(|&c| format!("{:4.1}", 100.0 * c as f64 / total as f64))
                .collect();
            println!("  {}: {}", p.language, shares.join(" "));
        }
    }
}
