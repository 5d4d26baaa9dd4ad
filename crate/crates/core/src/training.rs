//! AdamW, warmup-cosine schedule, global-norm clipping and the bucketed
//! training loop with periodic validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape};
use crate::datagen::{derive_seed, make_buckets, Pair};
use crate::models::{Batch, Model, ModelError};
use crate::protocols::bleu_corpus;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite update in parameter {0}")]
    NonFiniteUpdate(String),
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl Schedule {
    /// Linear ramp from 0 to `peak_lr` over the warmup, then cosine decay to
    /// `floor_lr` at `total_steps`; constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.floor_lr.min(self.peak_lr);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let p = (step - self.warmup_steps) as f64 / span;
        self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Global L2 norm over all trainable gradients; rescales them to `max_norm`
/// when it is exceeded. Returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let s: f64 = p.grad.data().iter().map(|g| g * g).sum();
        if !s.is_finite() {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
        sq += s;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every trainable parameter. Decay-flagged parameters
    /// first shrink by `lr * weight_decay`. Returns each parameter's update
    /// norm, indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<Vec<f64>> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut norms = vec![0.0; store.len()];
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut sq = 0.0;
            for (k, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let upd = decay * *w + lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= upd;
                sq += upd * upd;
            }
            if !sq.is_finite() {
                return Err(TrainError::NonFiniteUpdate(p.name.clone()));
            }
            norms[i] = sq.sqrt();
        }
        Ok(norms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub eval_steps: Vec<usize>,
    pub token_budget: usize,
    pub bucket_width: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// `floor_lr = peak_lr * floor_ratio`.
    pub floor_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Valid pairs decoded for BLEU at each evaluation (0 = all).
    pub eval_bleu_limit: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.eval_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval_steps must be strictly ascending");
        }
        if self.token_budget == 0 || self.bucket_width == 0 {
            return bad("token_budget and bucket_width must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.clip_norm > 0.0 && (0.0..=1.0).contains(&self.floor_ratio)) {
            return bad("peak_lr >= 0, clip_norm > 0 and floor_ratio in [0, 1] required");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            floor_lr: self.peak_lr * self.floor_ratio,
        }
    }
}

/// One metrics row. `wall_ms` is the only non-deterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub bleu: Option<f64>,
    pub acquisition: Option<f64>,
    pub stability_delta: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// JSON line with `wall_ms` zeroed, for reproducibility comparisons.
    pub fn deterministic_line(&self) -> String {
        serde_json::to_string(&MetricsRecord { wall_ms: 0, ..self.clone() }).expect("record serializes")
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Summed token loss and token count over `pairs`, batched by bucket.
pub fn eval_loss(model: &Model, pairs: &[Pair], token_budget: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for bucket in make_buckets(pairs, token_budget, 4) {
        for idx in &bucket.batches {
            let refs: Vec<&Pair> = idx.iter().map(|&i| &pairs[i]).collect();
            let batch = Batch::from_pairs(&refs)?;
            let n = batch.target_tokens();
            total += model.loss(&batch)? * n as f64;
            tokens += n;
        }
    }
    Ok(total / tokens as f64)
}

/// Greedy decodes of `pairs` in input order, decoded in length buckets.
pub fn decode_all(model: &Model, pairs: &[Pair], token_budget: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); pairs.len()];
    for bucket in make_buckets(pairs, token_budget, 4) {
        for idx in &bucket.batches {
            let srcs: Vec<&[usize]> = idx.iter().map(|&i| pairs[i].src.as_slice()).collect();
            let max_len = srcs.iter().map(|s| s.len()).max().unwrap_or(0) + 2;
            for (&i, hyp) in idx.iter().zip(model.greedy_decode_batch(&srcs, max_len)?) {
                out[i] = hyp;
            }
        }
    }
    Ok(out)
}

/// Corpus BLEU of greedy decodes against the pairs' references.
pub fn eval_bleu(model: &Model, pairs: &[Pair], token_budget: usize) -> Result<f64> {
    let hyps = decode_all(model, pairs, token_budget)?;
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.reference().to_vec()).collect();
    bleu_corpus(&hyps, &refs).map_err(|e| TrainError::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub bleu: f64,
}

pub fn evaluate(model: &Model, valid: &[Pair], cfg: &TrainConfig) -> Result<Evaluation> {
    let limit = if cfg.eval_bleu_limit == 0 { valid.len() } else { cfg.eval_bleu_limit.min(valid.len()) };
    Ok(Evaluation {
        loss: eval_loss(model, valid, cfg.token_budget)?,
        bleu: eval_bleu(model, &valid[..limit], cfg.token_budget)?,
    })
}

/// One optimization step on `batch`: zero, backward, clip, AdamW.
/// Returns (loss, pre-clip gradient norm, per-parameter update norms).
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &Batch, lr: f64, clip: f64) -> Result<(f64, f64, Vec<f64>)> {
    model.store.zero_grads();
    let mut tape = Tape::new();
    let loss = model.forward_loss(&mut tape, batch)?;
    let value = tape.scalar(loss);
    tape.backward_into(loss, &mut model.store).map_err(ModelError::from)?;
    drop(tape);
    let norm = clip_global_norm(&mut model.store, clip)?;
    let updates = opt.step(&mut model.store, lr)?;
    Ok((value, norm, updates))
}

/// Trains for `cfg.steps` updates. Batches come from length buckets of
/// `train`; their order is reshuffled each epoch from `seed`. A validation
/// record is emitted at every eval step and once more at the end with
/// split `final`.
pub fn train(
    model: &mut Model,
    train: &[Pair],
    valid: &[Pair],
    cfg: &TrainConfig,
    seed: u64,
    run_id: &str,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let started = Instant::now();
    let mut batches: Vec<Vec<usize>> = make_buckets(train, cfg.token_budget, cfg.bucket_width)
        .into_iter()
        .flat_map(|b| b.batches)
        .collect();
    if batches.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch-order"));
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut records = Vec::new();
    let mut cursor = batches.len();
    let (mut lr, mut norm) = (0.0, 0.0);
    let evaluate_at = |model: &Model, step: usize, split: &str, lr: f64, norm: f64| -> Result<MetricsRecord> {
        let e = evaluate(model, valid, cfg)?;
        Ok(MetricsRecord {
            run_id: run_id.to_string(),
            seed,
            step,
            split: split.to_string(),
            loss: e.loss,
            bleu: Some(e.bleu),
            acquisition: None,
            stability_delta: None,
            lr,
            grad_norm: norm,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    };
    let mut push = |rec: MetricsRecord, records: &mut Vec<MetricsRecord>| {
        sink(&rec);
        records.push(rec);
    };
    if cfg.eval_steps.first() == Some(&0) {
        push(evaluate_at(model, 0, "valid", 0.0, 0.0)?, &mut records);
    }
    for step in 1..=cfg.steps {
        if cursor == batches.len() {
            batches.shuffle(&mut rng);
            cursor = 0;
        }
        let refs: Vec<&Pair> = batches[cursor].iter().map(|&i| &train[i]).collect();
        cursor += 1;
        let batch = Batch::from_pairs(&refs)?;
        lr = schedule.lr_at(step);
        let (loss, n, _) = train_step(model, &mut opt, &batch, lr, cfg.clip_norm)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        norm = n;
        if cfg.eval_steps.binary_search(&step).is_ok() {
            push(evaluate_at(model, step, "valid", lr, norm)?, &mut records);
        }
    }
    let last = records.last().filter(|r| r.step == cfg.steps).cloned();
    let fin = match last {
        // The model has not changed since the last evaluation.
        Some(last) => MetricsRecord { split: "final".into(), wall_ms: started.elapsed().as_millis() as u64, ..last },
        None => evaluate_at(model, cfg.steps, "final", lr, norm)?,
    };
    push(fin, &mut records);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::numerics::RealTensor;
    use proptest::prelude::*;

    fn sched() -> Schedule {
        Schedule { peak_lr: 8e-4, warmup_steps: 120, total_steps: 1000, floor_lr: 8e-6 }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(120), 8e-4);
        assert_eq!(s.lr_at(60), 4e-4);
        assert_eq!(s.lr_at(1000), 8e-6);
        assert!((s.lr_at(560) - (8e-6 + (8e-4 - 8e-6) * 0.5)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn schedule_bounded(step in 0usize..3000, warm in 0usize..200, total in 1usize..2000) {
            let s = Schedule { peak_lr: 1e-3, warmup_steps: warm, total_steps: total.max(warm), floor_lr: 1e-5 };
            let lr = s.lr_at(step);
            prop_assert!((0.0..=1e-3).contains(&lr));
        }
    }

    fn store_with(grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", RealTensor::zeros(&[grads.len()]), true);
        s.get_mut(id).grad.data_mut().copy_from_slice(grads);
        s
    }

    #[test]
    fn clipping() {
        let mut s = store_with(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut s, 1.0).unwrap(), 5.0);
        let g = s.iter().next().unwrap().1.grad.data().to_vec();
        assert!((g.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-15);

        let mut s = store_with(&[0.3, 0.4]);
        assert_eq!(clip_global_norm(&mut s, 1.0).unwrap(), 0.5);
        assert_eq!(s.iter().next().unwrap().1.grad.data(), &[0.3, 0.4]);

        let mut s = store_with(&[0.0, 0.0]);
        assert_eq!(clip_global_norm(&mut s, 1.0).unwrap(), 0.0);

        let mut s = store_with(&[f64::NAN, 0.0]);
        match clip_global_norm(&mut s, 1.0) {
            Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        for g in [0.3, -2.0, 1e-3] {
            let mut s = store_with(&[g]);
            let mut opt = AdamW::new(&s, 0.0);
            opt.step(&mut s, 0.01).unwrap();
            let w = s.iter().next().unwrap().1.value.data()[0];
            assert!((w - (-0.01 * g / (g.abs() + 1e-8))).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn adam_steady_state_update_is_lr() {
        let mut s = store_with(&[0.5]);
        let mut opt = AdamW::new(&s, 0.0);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = s.iter().next().unwrap().1.value.data()[0];
            opt.step(&mut s, 1e-3).unwrap();
            last = before - s.iter().next().unwrap().1.value.data()[0];
        }
        assert!((last - 1e-3).abs() < 0.05e-3, "{last}");
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", RealTensor::filled(&[3], 2.0), true);
        let b = s.add("b", RealTensor::filled(&[3], 2.0), false);
        let mut opt = AdamW::new(&s, 0.1);
        for _ in 0..5 {
            opt.step(&mut s, 0.01).unwrap();
        }
        let expect = 2.0 * (1.0f64 - 0.01 * 0.1).powi(5);
        assert!(s.get(w).value.data().iter().all(|&x| (x - expect).abs() < 1e-15));
        assert!(s.get(b).value.data().iter().all(|&x| x == 2.0));
        assert!(opt.second_moments().iter().flatten().all(|&v| v >= 0.0));
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn non_finite_update_rejected() {
        let mut s = store_with(&[f64::INFINITY]);
        let mut opt = AdamW::new(&s, 0.0);
        assert!(matches!(opt.step(&mut s, 0.1), Err(TrainError::NonFiniteUpdate(_))));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            seeds: vec![1],
            steps: 10,
            eval_steps: vec![4, 2],
            token_budget: 100,
            bucket_width: 4,
            peak_lr: 1e-3,
            warmup_steps: 2,
            floor_ratio: 0.01,
            weight_decay: 0.01,
            clip_norm: 1.0,
            eval_bleu_limit: 0,
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { eval_steps: vec![2, 4], ..cfg }.validate().is_ok());
    }
}
