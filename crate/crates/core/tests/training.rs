//! Short seeded training runs.

use std::path::Path;

use mddkit_core::augment::AugmentPolicy;
use mddkit_core::losses::LossWeights;
use mddkit_core::models::Model;
use mddkit_core::synth::{generate, split_examples, Example, SynthConfig};
use mddkit_core::train::{
    initial_model, last_path, train_stage, EpochRecord, ModelConfigs, Prerequisites, Stage, TrainConfig, TrainOptions,
};
use mddkit_core::Vocab;

const SEED: u64 = 7;

fn options(epochs: usize, finetune_epochs: usize) -> TrainOptions {
    TrainOptions {
        train: TrainConfig {
            epochs,
            finetune_epochs,
            ..TrainConfig::default()
        },
        weights: LossWeights::default(),
        augment: AugmentPolicy::default(),
        beam: Default::default(),
        seed: SEED,
    }
}

fn corpus(num_utts: usize) -> (Vocab, usize, [Vec<Example>; 3]) {
    let cfg = SynthConfig {
        num_utts,
        ..SynthConfig::default()
    };
    let c = generate(&cfg, SEED).unwrap();
    let parts = split_examples(&c, cfg.split, SEED).unwrap();
    (c.vocab.vocab.clone(), cfg.dim, parts)
}

fn losses(history: &[EpochRecord]) -> Vec<f64> {
    history.iter().map(|r| r.loss).collect()
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

#[test]
fn early_epochs_lower_the_loss() {
    let (vocab, dim, [train, val, _]) = corpus(SynthConfig::default().num_utts);
    let dir = tempfile::tempdir().unwrap();
    let opts = options(5, 5);
    let mc = ModelConfigs::default();
    let pre = Prerequisites::default();
    let m = initial_model(Stage::CtcJoint, &vocab, &mc, dim, SEED, &pre).unwrap();
    let s = train_stage(Stage::CtcJoint, m, &train, &val, &opts, dir.path(), false).unwrap();
    let curve = losses(&s.history);
    assert_eq!(curve.len(), 5);
    assert!(strictly_decreasing(&curve), "ctc-joint {curve:?}");
}

/// Area under the ROC curve by pair counting; ties count one half.
fn auc(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn position_auc(model: &Model, data: &[Example]) -> f64 {
    let mut scored = Vec::new();
    for ex in data {
        let r = model.teacher_readout(&ex.features, &ex.canonical, &ex.perceived).unwrap().unwrap();
        for (p, flag) in r.pos_probs.iter().zip(ex.tags.position_flags()) {
            scored.push((*p, flag == 1));
        }
    }
    auc(&scored)
}

/// Mean `|row/rows - col/cols|` weighted by attention mass.
fn off_diagonal(attn: &mddkit_tensor::Tensor) -> f64 {
    let (rows, cols) = attn.dims2().unwrap();
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            total += attn.at2(r, c) * (r as f64 / rows as f64 - c as f64 / cols as f64).abs();
        }
    }
    total / rows as f64
}

fn attention_spread(model: &Model, data: &[Example]) -> f64 {
    let mut sum = 0.0;
    for ex in data {
        let r = model.teacher_readout(&ex.features, &ex.canonical, &ex.perceived).unwrap().unwrap();
        sum += off_diagonal(&r.attn_enc) + off_diagonal(&r.attn_dec);
    }
    sum / (2 * data.len()) as f64
}

fn prerequisites(root: &Path, train: &[Example], vocab: &Vocab, dim: usize) -> Prerequisites {
    let mc = ModelConfigs::default();
    let mut pre = Prerequisites::default();
    for stage in [Stage::CtcJoint, Stage::CrottcAm] {
        let m = initial_model(stage, vocab, &mc, dim, SEED, &pre).unwrap();
        let dir = root.join(stage.name());
        let s = train_stage(stage, m, train, &[], &options(8, 1), &dir, false).unwrap();
        match stage {
            Stage::CtcJoint => pre.ctc_joint = Some(s.best_path),
            _ => pre.crottc_am = Some(s.best_path),
        }
    }
    pre
}

#[test]
fn teacher_learns_positions_and_diagonal_attention() {
    let (vocab, dim, [train, _, _]) = corpus(150);
    let root = tempfile::tempdir().unwrap();
    let pre = prerequisites(root.path(), &train, &vocab, dim);
    let mut model = initial_model(Stage::IfFinetune, &vocab, &ModelConfigs::default(), dim, SEED, &pre).unwrap();
    let dir = root.path().join("if-finetune");
    let probe = &train[..20];

    let mut spread = vec![attention_spread(&model, probe)];
    let mut best_auc = 0.0f64;
    for epoch in 1..=50 {
        train_stage(Stage::IfFinetune, model, &train, &[], &options(1, epoch), &dir, true).unwrap();
        model = Model::load(&last_path(&dir)).unwrap();
        if epoch <= 20 {
            spread.push(attention_spread(&model, probe));
        }
        if epoch % 5 == 0 {
            let a = position_auc(&model, &train);
            eprintln!("epoch {epoch}: position AUC {a:.4}");
            best_auc = best_auc.max(a);
            if best_auc >= 0.9 && epoch >= 20 {
                break;
            }
        }
    }
    eprintln!("attention spread {spread:?}");
    assert!(best_auc >= 0.9, "position AUC {best_auc}");
    // Falls steeply, then settles within the guided band and wanders.
    assert!(strictly_decreasing(&spread[..5]), "attention spread {spread:?}");
    assert!(spread[20] < 0.25 * spread[0], "attention spread {spread:?}");
}
