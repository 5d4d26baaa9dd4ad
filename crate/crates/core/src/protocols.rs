//! Experiment protocols: iterative semantic map refinement (ISMR) with its
//! shuffled ablation, few-shot concept injection, and their metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, Corpus, InjectionSet, Pair, CONCEPTS};
use crate::models::{extract_map, init_model, load_map, shuffle_map, Arch, Batch, MapSource, Model, ModelConfig, ModelError, SemanticMap};
use crate::numerics::RealTensor;
use crate::training::{self, decode_all, train, AdamW, MetricsRecord, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses for {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("BLEU measured on different splits ({0} vs {1})")]
    SplitMismatch(String, String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

pub const BLEU_MAX_N: usize = 4;
pub const BLEU_SMOOTHING: f64 = 0.1;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU (0-100) with clipped n-gram precisions up to 4-grams. A zero
/// precision is replaced by `0.1 / max(total, 1)`.
pub fn bleu_corpus(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(ProtocolError::CountMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(ProtocolError::EmptyCorpus);
    }
    let mut matches = [0usize; BLEU_MAX_N];
    let mut totals = [0usize; BLEU_MAX_N];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=BLEU_MAX_N {
            let rc = ngram_counts(rf, n);
            for (g, k) in ngram_counts(h, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..BLEU_MAX_N)
        .map(|i| {
            let p = if matches[i] == 0 { BLEU_SMOOTHING / totals[i].max(1) as f64 } else { matches[i] as f64 / totals[i] as f64 };
            p.ln()
        })
        .sum::<f64>()
        / BLEU_MAX_N as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((100.0 * bp * log_p.exp()).clamp(0.0, 100.0))
}

/// A BLEU score tied to the split it was measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuOn {
    pub bleu: f64,
    pub split_hash: String,
}

/// `post - pre` in BLEU points; negative means forgetting.
pub fn stability_delta(pre: &BleuOn, post: &BleuOn) -> Result<f64> {
    if pre.split_hash != post.split_hash {
        return Err(ProtocolError::SplitMismatch(pre.split_hash.clone(), post.split_hash.clone()));
    }
    Ok(post.bleu - pre.bleu)
}

/// Anything that can greedily translate a batch of source sentences.
pub trait Translator {
    fn translate(&self, srcs: &[&Pair]) -> Result<Vec<Vec<usize>>>;
}

impl Translator for Model {
    fn translate(&self, srcs: &[&Pair]) -> Result<Vec<Vec<usize>>> {
        let owned: Vec<Pair> = srcs.iter().map(|p| (*p).clone()).collect();
        Ok(decode_all(self, &owned, usize::MAX)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    /// (successes, eval sentences) per concept.
    pub per_concept: Vec<(usize, usize)>,
    pub successes: usize,
    pub total: usize,
    /// successes / total.
    pub fraction: f64,
    /// Concepts with more than half of their eval sentences correct.
    pub concepts_acquired: usize,
    /// Whole-sentence exact matches / total.
    pub exact_match: f64,
}

impl Acquisition {
    /// `X/5 (n/25)`.
    pub fn label(&self) -> String {
        format!("{}/{} ({}/{})", self.concepts_acquired, self.per_concept.len(), self.successes, self.total)
    }
}

/// A probe succeeds when the concept's target token sits at the
/// grammar-aligned position of the decoded output.
pub fn acquisition_score(model: &dyn Translator, inj: &InjectionSet) -> Result<Acquisition> {
    let pairs: Vec<&Pair> = inj.eval.iter().map(|e| &e.pair).collect();
    let hyps = model.translate(&pairs)?;
    let mut per_concept = vec![(0usize, 0usize); inj.concepts.len()];
    let mut exact = 0;
    for (e, h) in inj.eval.iter().zip(&hyps) {
        let slot = &mut per_concept[e.concept];
        slot.1 += 1;
        if h.get(e.target_pos) == Some(&inj.concepts[e.concept].target) {
            slot.0 += 1;
        }
        if h.as_slice() == e.pair.reference() {
            exact += 1;
        }
    }
    let successes = per_concept.iter().map(|c| c.0).sum();
    let total = inj.eval.len();
    Ok(Acquisition {
        concepts_acquired: per_concept.iter().filter(|(s, t)| *t > 0 && 2 * s > *t).count(),
        per_concept,
        successes,
        total,
        fraction: if total == 0 { 0.0 } else { successes as f64 / total as f64 },
        exact_match: if total == 0 { 0.0 } else { exact as f64 / total as f64 },
    })
}

/// Everything a protocol needs to train models.
#[derive(Debug, Clone)]
pub struct Setup<'a> {
    pub corpus: &'a Corpus,
    pub vocab_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub struct IsmrRun {
    pub arch: Arch,
    pub seed: u64,
    pub iter1: Vec<MetricsRecord>,
    pub map: SemanticMap,
    pub shuffled: SemanticMap,
    pub iter2: Vec<MetricsRecord>,
    pub ablation: Vec<MetricsRecord>,
    /// Transplanted tables as they stood before iteration 2 and the
    /// ablation started training.
    pub iter2_initial: RealTensor,
    pub ablation_initial: RealTensor,
    /// Reasoner (non-map) parameters of iteration 1 and 2 at init.
    pub iter1_reasoner_init: Vec<f64>,
    pub iter2_reasoner_init: Vec<f64>,
    /// Iteration 1 model after training.
    pub iter1_model: Model,
}

fn reasoner_values(model: &Model, source: MapSource) -> Result<Vec<f64>> {
    let table = model.map_table(source)?;
    Ok(model.store.iter().filter(|(id, _)| *id != table).flat_map(|(_, p)| p.value.data().to_vec()).collect())
}

/// Iteration 1 from scratch, then iteration 2 on the transplanted map with
/// a freshly initialized reasoner, and the ablation on a row-shuffled copy
/// of the map with that same reasoner init. All three share the step
/// budget, eval steps and batch order.
pub fn run_ismr(
    arch: Arch,
    setup: &Setup,
    source: MapSource,
    seed: u64,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<IsmrRun> {
    let run = |label: &str| format!("ismr/{arch}/{seed}/{label}");
    let (train_pairs, valid) = (&setup.corpus.train, &setup.corpus.valid);

    let mut m1 = init_model(arch, &setup.model, derive_seed(seed, "ismr-iter1"))?;
    let iter1_reasoner_init = reasoner_values(&m1, source)?;
    let iter1 = train(&mut m1, train_pairs, valid, &setup.train, seed, &run("iter1"), sink)?;
    let map = extract_map(&m1, source, &setup.vocab_hash, setup.train.steps, seed)?;

    let reinit = derive_seed(seed, "ismr-iter2");
    let mut m2 = load_map(init_model(arch, &setup.model, reinit)?, &map, &setup.vocab_hash, true, reinit)?;
    let iter2_initial = m2.store.get(m2.map_table(source)?).value.clone();
    let iter2_reasoner_init = reasoner_values(&m2, source)?;
    let iter2 = train(&mut m2, train_pairs, valid, &setup.train, seed, &run("iter2"), sink)?;
    drop(m2);

    let shuffled = shuffle_map(&map, derive_seed(seed, "ismr-shuffle"));
    let mut m3 = load_map(init_model(arch, &setup.model, reinit)?, &shuffled, &setup.vocab_hash, true, reinit)?;
    let ablation_initial = m3.store.get(m3.map_table(source)?).value.clone();
    let ablation = train(&mut m3, train_pairs, valid, &setup.train, seed, &run("ablation"), sink)?;

    Ok(IsmrRun {
        arch,
        seed,
        iter1,
        map,
        shuffled,
        iter2,
        ablation,
        iter2_initial,
        ablation_initial,
        iter1_reasoner_init,
        iter2_reasoner_init,
        iter1_model: m1,
    })
}

fn bleu_by_step(records: &[MetricsRecord]) -> Vec<(usize, f64)> {
    records.iter().filter(|r| r.split == "valid").map(|r| (r.step, r.bleu.unwrap_or(0.0))).collect()
}

/// Cross-seed validation BLEU per eval step with columns baseline (iteration
/// 1), ismr (iteration 2) and ablation. With several seeds each column has
/// mean, min and max.
pub fn ismr_table(runs: &[IsmrRun]) -> String {
    let mut out = String::new();
    let Some(first) = runs.first() else { return out };
    let steps: Vec<usize> = bleu_by_step(&first.iter1).into_iter().map(|(s, _)| s).collect();
    let cols = ["baseline", "ismr", "ablation"];
    let band = runs.len() > 1;
    let header: Vec<String> = cols
        .iter()
        .flat_map(|c| if band { vec![format!("{c}_mean"), format!("{c}_min"), format!("{c}_max")] } else { vec![c.to_string()] })
        .collect();
    writeln!(out, "step,{}", header.join(",")).expect("write");
    for (i, step) in steps.iter().enumerate() {
        let mut cells = Vec::new();
        for col in 0..3 {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| {
                    let recs = [&r.iter1, &r.iter2, &r.ablation][col];
                    bleu_by_step(recs).get(i).map(|x| x.1).unwrap_or(f64::NAN)
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            cells.push(format!("{mean:.4}"));
            if band {
                cells.push(format!("{:.4}", vals.iter().cloned().fold(f64::INFINITY, f64::min)));
                cells.push(format!("{:.4}", vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)));
            }
        }
        writeln!(out, "{step},{}", cells.join(",")).expect("write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub lr: f64,
    pub steps: usize,
    /// One batch per concept instead of one batch of all samples.
    pub separate_batches: bool,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub eval_per_concept: usize,
}

pub struct InjectionRun {
    pub lr: f64,
    pub steps: usize,
    pub updates_executed: usize,
    pub pre_bleu: BleuOn,
    pub post_bleu: BleuOn,
    pub stability_delta: f64,
    pub pre_acquisition: Acquisition,
    pub post_acquisition: Acquisition,
    /// Parameter names that never moved during injection.
    pub untouched: Vec<String>,
    pub model: Model,
}

/// Fine-tunes every parameter of `model` on the injection samples for
/// exactly `cfg.steps` updates at constant learning rate, measuring
/// validation BLEU and acquisition before and after.
pub fn run_injection(mut model: Model, inj: &InjectionSet, valid: &[Pair], cfg: &InjectionConfig) -> Result<InjectionRun> {
    let split_hash = Corpus::split_hash(valid);
    let measure = |m: &Model| -> Result<BleuOn> {
        Ok(BleuOn { bleu: training::eval_bleu(m, valid, usize::MAX)?, split_hash: split_hash.clone() })
    };
    let pre_bleu = measure(&model)?;
    let pre_acquisition = acquisition_score(&model, inj)?;

    let batches: Vec<Batch> = if cfg.separate_batches {
        (0..CONCEPTS)
            .map(|k| {
                let c = inj.concepts[k].source;
                let refs: Vec<&Pair> = inj.train.iter().filter(|p| p.src.contains(&c)).collect();
                Batch::from_pairs(&refs)
            })
            .collect::<std::result::Result<_, _>>()?
    } else {
        vec![Batch::from_pairs(&inj.train.iter().collect::<Vec<_>>())?]
    };
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut moved = vec![false; model.store.len()];
    for step in 0..cfg.steps {
        let batch = &batches[step % batches.len()];
        let (_, _, updates) = training::train_step(&mut model, &mut opt, batch, cfg.lr, cfg.clip_norm)?;
        for (m, u) in moved.iter_mut().zip(updates) {
            *m |= u > 0.0;
        }
    }
    let updates_executed = opt.step as usize;
    let (post_bleu, post_acquisition) =
        if cfg.steps == 0 { (pre_bleu.clone(), pre_acquisition.clone()) } else { (measure(&model)?, acquisition_score(&model, inj)?) };
    let untouched = if cfg.steps == 0 {
        Vec::new()
    } else {
        model.store.iter().filter(|(id, p)| p.trainable && !moved[id.index()]).map(|(_, p)| p.name.clone()).collect()
    };
    Ok(InjectionRun {
        lr: cfg.lr,
        steps: cfg.steps,
        updates_executed,
        stability_delta: stability_delta(&pre_bleu, &post_bleu)?,
        pre_bleu,
        post_bleu,
        pre_acquisition,
        post_acquisition,
        untouched,
        model,
    })
}

pub const SUMMARY_ROWS: [&str; 4] = ["Updates", "Acquisition", "Post-Inj BLEU", "Stability Delta"];

/// Comma-separated table with one column per named run and the rows
/// Updates, Acquisition, Post-Inj BLEU and Stability Delta.
pub fn injection_summary(columns: &[(String, &InjectionRun)]) -> String {
    let mut out = String::new();
    let names: Vec<&str> = columns.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(out, "metric,{}", names.join(",")).expect("write");
    let row = |f: &dyn Fn(&InjectionRun) -> String| columns.iter().map(|(_, r)| f(r)).collect::<Vec<_>>().join(",");
    writeln!(out, "{},{}", SUMMARY_ROWS[0], row(&|r| r.updates_executed.to_string())).expect("write");
    writeln!(out, "{},{}", SUMMARY_ROWS[1], row(&|r| r.post_acquisition.label())).expect("write");
    writeln!(out, "{},{}", SUMMARY_ROWS[2], row(&|r| format!("{:.2}", r.post_bleu.bleu))).expect("write");
    writeln!(out, "{},{}", SUMMARY_ROWS[3], row(&|r| format!("{:+.2}", r.stability_delta))).expect("write");
    out
}

/// Per-concept `concept,successes,total` lines for one run.
pub fn concept_breakdown(run: &InjectionRun, inj: &InjectionSet) -> String {
    let mut out = String::from("concept,source,target,successes,total\n");
    for (k, (s, t)) in run.post_acquisition.per_concept.iter().enumerate() {
        let c = inj.concepts[k];
        writeln!(out, "{k},{},{},{s},{t}", c.source, c.target).expect("write");
    }
    out
}
