//! Training-loop contracts on small synthetic tasks.

use prism::datagen::{gen_corpus, CorpusSizes, GrammarSpec, Pair, ReorderRule, SyntheticLexicon};
use prism::models::{init_model, Arch, ModelConfig};
use prism::training::{eval_loss, train, MetricsRecord, TrainConfig};

fn task(content: usize, train_n: usize) -> (SyntheticLexicon, Vec<Pair>, Vec<Pair>) {
    let lex = SyntheticLexicon::new(content, 5);
    let g = GrammarSpec { rule: ReorderRule::AdjacentSwap, min_len: 4, max_len: 8 };
    let c = gen_corpus(&lex, &g, CorpusSizes { train: train_n, valid: 40, test: 10 }, 5).unwrap();
    (lex, c.train, c.valid)
}

fn model_cfg(vocab: usize) -> ModelConfig {
    ModelConfig { vocab, d: 16, heads: 2, enc_layers: 1, dec_layers: 1, ffn_mult: 2, complex_ffn_mult: 1, max_len: 8, l_pad: 8 }
}

fn train_cfg(steps: usize, eval_steps: Vec<usize>) -> TrainConfig {
    TrainConfig {
        seeds: vec![1],
        steps,
        eval_steps,
        token_budget: 300,
        bucket_width: 4,
        peak_lr: 2e-3,
        warmup_steps: 20,
        floor_ratio: 0.01,
        weight_decay: 0.01,
        clip_norm: 1.0,
        eval_bleu_limit: 0,
    }
}

#[test]
fn single_pair_overfits_and_decodes_its_target() {
    let (lex, pairs, _) = task(12, 50);
    let one = vec![pairs[0].clone()];
    for arch in [Arch::Baseline, Arch::Prism] {
        let mut m = init_model(arch, &model_cfg(lex.vocab_size()), 2).unwrap();
        let cfg = TrainConfig { peak_lr: 1e-2, warmup_steps: 10, ..train_cfg(200, vec![]) };
        train(&mut m, &one, &one, &cfg, 1, "overfit", &mut |_| {}).unwrap();
        let loss = eval_loss(&m, &one, usize::MAX).unwrap();
        assert!(loss < 0.1, "{arch}: {loss}");
        let decoded = m.greedy_decode(&one[0].src, one[0].src.len() + 2).unwrap();
        assert_eq!(decoded, one[0].reference(), "{arch}");
    }
}

#[test]
fn toy_task_learns_within_500_steps() {
    let (lex, train_set, valid) = task(12, 400);
    for arch in [Arch::Baseline, Arch::Prism] {
        let mut m = init_model(arch, &model_cfg(lex.vocab_size()), 3).unwrap();
        let recs = train(&mut m, &train_set, &valid, &train_cfg(500, vec![50, 500]), 1, "toy", &mut |_| {}).unwrap();
        let at = |s: usize| recs.iter().find(|r| r.split == "valid" && r.step == s).unwrap().loss;
        assert!(at(500) < at(50), "{arch}: {} vs {}", at(500), at(50));
    }
}

#[test]
fn eval_steps_emit_exactly_one_record_each_plus_final() {
    let (lex, train_set, valid) = task(12, 100);
    let mut m = init_model(Arch::Prism, &model_cfg(lex.vocab_size()), 4).unwrap();
    let mut streamed = Vec::new();
    let recs = train(&mut m, &train_set, &valid, &train_cfg(800, vec![200, 400, 800]), 9, "evals", &mut |r| {
        streamed.push(r.clone())
    })
    .unwrap();
    assert_eq!(recs, streamed);
    let splits: Vec<(&str, usize)> = recs.iter().map(|r| (r.split.as_str(), r.step)).collect();
    assert_eq!(splits, [("valid", 200), ("valid", 400), ("valid", 800), ("final", 800)]);
    assert!(recs.iter().all(|r| r.bleu.is_some_and(|b| (0.0..=100.0).contains(&b))));
}

#[test]
fn identical_seeds_give_identical_streams() {
    let (lex, train_set, valid) = task(12, 100);
    let run = |arch: Arch, seed: u64| -> Vec<String> {
        let mut m = init_model(arch, &model_cfg(lex.vocab_size()), 6).unwrap();
        let recs = train(&mut m, &train_set, &valid, &train_cfg(60, vec![20, 60]), seed, "det", &mut |_| {}).unwrap();
        recs.iter().map(MetricsRecord::deterministic_line).collect()
    };
    for arch in [Arch::Baseline, Arch::Prism] {
        assert_eq!(run(arch, 1), run(arch, 1));
        assert_ne!(run(arch, 1), run(arch, 2));
    }
}
