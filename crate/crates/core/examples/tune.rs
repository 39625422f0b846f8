//! Scratch harness for sizing the trend experiments: prints accuracies for
//! the regularization matrix, the noise sweep, and the zero-shot setup.

use std::time::Instant;

use refground_core::data::DatasetConfig;
use refground_core::dsl::{ConceptName, TemplateSpec};
use refground_core::eval::{self, ExperimentConfig};
use refground_core::learn::{LossWeights, Optimizer, TrainConfig};
use refground_core::rules::{distill_rules, CompletionBackend};
use refground_core::scene::GeneratorConfig;

fn c(s: &str) -> ConceptName {
    ConceptName::new(s).unwrap()
}

fn base_config(seed: u64) -> ExperimentConfig {
    // Canonical categories are common; synonym variants are rare and share
    // (nearly) their partner's visual prototype.
    let mut vocabulary = Vec::new();
    for cat in ["chair", "shelf", "table", "wardrobe", "lamp"] {
        for _ in 0..3 {
            vocabulary.push(c(cat));
        }
    }
    vocabulary.push(c("dresser"));
    vocabulary.push(c("dining_table"));
    let mut prototype_aliases = std::collections::BTreeMap::new();
    prototype_aliases.insert(c("dresser"), c("wardrobe"));
    prototype_aliases.insert(c("dining_table"), c("table"));
    let generator = GeneratorConfig {
        n_objects: (4, 7),
        vocabulary,
        prototype_aliases,
        bounds: 2.0,
        ..GeneratorConfig::default()
    };
    let mut vocab = refground_core::dsl::ConceptVocabulary::default();
    for u in ["chair", "shelf", "table", "wardrobe", "lamp", "dresser", "dining_table"] {
        vocab.unary.insert(c(u));
    }
    for b in refground_core::scene::BINARY_RELATIONS {
        vocab.binary.insert(c(b));
    }
    for t in refground_core::scene::TERNARY_RELATIONS {
        vocab.ternary.insert(c(t));
    }
    let rules = distill_rules(&vocab, &CompletionBackend::Fixture { rule_file: None }).unwrap();
    ExperimentConfig {
        dataset: DatasetConfig {
            generator,
            n_scenes: 200,
            queries_per_scene: 4,
            ..DatasetConfig::default()
        },
        train: TrainConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 0.1,
            optimizer: Optimizer::Momentum,
            momentum: 0.9,
            decay_at: Some(40),
            decay_factor: 0.1,
            seed,
            noise_level: 0.2,
            data_fraction: 0.1,
        },
        weights: LossWeights::default(),
        rules,
        dim: 16,
        seed,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("reg");
    match which {
        "reg" => reg_matrix(),
        "noise" => noise_matrix(),
        "zeroshot" => zero_shot(),
        "diag" => diag_matrix(),
        "probe" => probe_stability(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn reg_matrix() {
    let scenes: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    println!("scenes={scenes} lr={lr}");
    println!("seed, full, unreg, wo_sym, wo_excl, wo_spar, wo_syn, secs");
    for seed in 0..8u64 {
        let t0 = Instant::now();
        let mut row = vec![];
        let variants: Vec<(&str, LossWeights)> = vec![
            ("full", LossWeights::default()),
            ("unreg", LossWeights::zero()),
            ("wo_sym", LossWeights { alpha: 0.0, ..LossWeights::default() }),
            ("wo_excl", LossWeights { beta: 0.0, ..LossWeights::default() }),
            ("wo_spar", LossWeights { gamma: 0.0, ..LossWeights::default() }),
            ("wo_syn", LossWeights { synonym_aug_prob: 0.0, ..LossWeights::default() }),
        ];
        for (_, w) in &variants {
            let mut cfg = base_config(seed);
            cfg.dataset.n_scenes = scenes;
            cfg.train.learning_rate = lr;
            cfg.train.epochs = 80;
            cfg.train.decay_at = Some(55);
            cfg.weights = *w;
            let r = eval::run_experiment(&cfg).unwrap();
            row.push(r.eval.overall_acc);
        }
        println!(
            "{seed}, {:.3}, {:.3}, {:.3}, {:.3}, {:.3}, {:.3}, {:.1}",
            row[0], row[1], row[2], row[3], row[4], row[5],
            t0.elapsed().as_secs_f64()
        );
    }
}

fn noise_matrix() {
    println!("seed, level, full, unreg, secs(+divergences)");
    for seed in 0..5u64 {
        for level in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5] {
            let t0 = Instant::now();
            let mut mk = |zero: bool| {
                let mut cfg = base_config(seed);
                cfg.dataset.n_scenes = 150;
                cfg.dataset.eval_fraction = 0.3;
                cfg.train.learning_rate = 0.05;
                cfg.train.epochs = 80;
                cfg.train.decay_at = Some(55);
                cfg.train.noise_level = level;
                cfg.train.data_fraction = 1.0;
                if zero {
                    cfg.weights = LossWeights::zero();
                }
                eval::run_experiment(&cfg).unwrap()
            };
            let r1 = mk(false);
            let r2 = mk(true);
            println!(
                "{seed}, {level:.1}, {:.3}, {:.3}, {:.1} d={}{}",
                r1.eval.overall_acc,
                r2.eval.overall_acc,
                t0.elapsed().as_secs_f64(),
                r1.diverged as u8,
                r2.diverged as u8
            );
        }
    }
}

fn probe_stability() {
    // Spread of final accuracy under small config tweaks, to find a stable
    // optimizer regime.
    for (name, lr, epochs, decay_at, batch) in [
        ("lr.1/e50/d35/b8", 0.1, 50usize, 35usize, 8usize),
        ("lr.05/e80/d55/b8", 0.05, 80, 55, 8),
        ("lr.05/e80/d55/b16", 0.05, 80, 55, 16),
        ("lr.03/e100/d70/b8", 0.03, 100, 70, 8),
    ] {
        for level in [0.0, 0.3] {
            let mut accs = vec![];
            for seed in [500u64, 501, 502, 503] {
                let mut cfg = base_config(seed);
                cfg.dataset.n_scenes = 150;
                cfg.dataset.eval_fraction = 0.3;
                cfg.train.learning_rate = lr;
                cfg.train.epochs = epochs;
                cfg.train.decay_at = Some(decay_at);
                cfg.train.batch_size = batch;
                cfg.train.noise_level = level;
                cfg.train.data_fraction = 1.0;
                let r = eval::run_experiment(&cfg).unwrap();
                accs.push(r.eval.overall_acc);
            }
            let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
            let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
            println!(
                "{name} L{level:.1}: mean {mean:.3} sd {sd:.3} accs {:?}",
                accs.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
            );
        }
    }
}

fn diag_matrix() {
    println!("seed, variant, acc, max_asym, min_asym_gap?, copos...");
    for seed in 0..5u64 {
        let mut rows = vec![];
        for (name, w) in [
            ("full", LossWeights::default()),
            ("a0", LossWeights { alpha: 0.0, ..LossWeights::default() }),
            ("b0", LossWeights { beta: 0.0, ..LossWeights::default() }),
        ] {
            let mut cfg = base_config(seed);
            cfg.train.data_fraction = 1.0;
            cfg.train.epochs = 40;
            cfg.weights = w;
            let r = eval::run_experiment(&cfg).unwrap();
            let eval_ids: Vec<usize> = {
                let mut ids: Vec<usize> = r.dataset.eval.iter().map(|q| q.scene_ref).collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            };
            let d = eval::concept_diagnostics(&r.dataset.scenes, &eval_ids, &r.params, &cfg.rules, 20);
            rows.push((name, r.eval.overall_acc, d));
        }
        let (_, acc_full, d_full) = &rows[0];
        let (_, _, d_a0) = &rows[1];
        let (_, _, d_b0) = &rows[2];
        let mut asym_ok = true;
        for (k, v) in &d_full.asymmetry_ratio {
            if let Some(b) = d_a0.asymmetry_ratio.get(k) {
                if v >= b {
                    asym_ok = false;
                    println!("  seed {seed}: asym violation {k}: full {v:.4} vs a0 {b:.4}");
                }
            }
        }
        let mut copos_ok = true;
        for (k, v) in &d_full.co_positivity {
            if let Some(b) = d_b0.co_positivity.get(k) {
                if v >= b {
                    copos_ok = false;
                    println!("  seed {seed}: copos violation {k}: full {v:.4} vs b0 {b:.4}");
                }
            }
        }
        println!("{seed}: acc={acc_full:.3} asym_ok={asym_ok} copos_ok={copos_ok}");
    }
}

fn zero_shot() {
    println!("seed, inDist, zeroShot, chance, nZs, secs");
    for seed in 0..5u64 {
        let t0 = Instant::now();
        let mut cfg = base_config(seed);
        cfg.train.noise_level = 0.0;
        cfg.train.data_fraction = 1.0;
        cfg.train.epochs = 40;
        cfg.dataset.holdout = vec![c("center"), c("between")];
        cfg.dataset.holdout_negated = true;
        // Upweight ternary and negated templates so the zero-shot split is
        // well populated.
        let mut templates = refground_core::dsl::default_templates();
        let extra: Vec<TemplateSpec> = templates
            .iter()
            .filter(|t| {
                matches!(t.kind, refground_core::dsl::TemplateKind::Ternary { .. }) || t.is_negated()
            })
            .cloned()
            .collect();
        templates.extend(extra.clone());
        templates.extend(extra);
        cfg.dataset.templates = templates;
        let r = eval::run_experiment(&cfg).unwrap();
        let zs = eval::zero_shot_eval(&r.dataset, &r.params, &cfg.rules).unwrap();
        let chance = refground_core::data::chance_accuracy(&r.dataset.scenes, &r.dataset.zero_shot);
        println!(
            "{seed}, {:.3}, {:.3}, {:.3}, {}, {:.1}",
            r.eval.overall_acc,
            zs.overall_acc,
            chance,
            zs.total,
            t0.elapsed().as_secs_f64()
        );
    }
}
