//! AdamW optimization with a linear warmup/decay schedule, and the two
//! training loops: masked-LM pretraining over the expanded vocabulary and
//! ranking finetuning with sparsity regularization.
//!
//! Per-example forward passes run on the rayon pool; gradients are always
//! reduced sequentially in batch order, so results do not depend on the
//! number of worker threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward_logits, backward_pooled, forward, forward_context, logits_at, ForwardCache, ModelGrads, ModelParams, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::evalkit::PreparedEval;
use crate::objectives::{mlm_pretrain_loss, total_finetune_loss, Batch, LossConfig};
use crate::scalar::Scalar;
use crate::sparsevec::PruneConfig;
use crate::vocab::{plan_masking, AnnotatedTitle, SubwordId, SubwordVocab, TermId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn default_eval_every() -> u64 {
    100
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Validation cadence in steps; 0 disables validation.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Learning rate reached at `total_steps`.
    #[serde(default)]
    pub lr_floor: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl TrainConfig {
    /// Desk-scale preset: batch 32, 2K steps.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2_000,
            batch_size: 32,
            weight_decay: 0.01,
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 100,
            lr_floor: 0.0,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    /// Finetuning hyperparameters at the original scale (100K-vocabulary models).
    pub fn full_finetune() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 400_000,
            batch_size: 3072,
            weight_decay: 0.01,
            ..Self::desk()
        }
    }

    /// Pretraining hyperparameters at the original scale.
    pub fn full_pretrain() -> Self {
        Self {
            lr: 1.6e-4,
            warmup_steps: 10_000,
            total_steps: 600_000,
            batch_size: 1024,
            weight_decay: 0.01,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidParameter(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return Err(Error::InvalidParameter("weight_decay and lr_floor must be in range".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Linear warmup from 0 to `lr`, then linear decay to `lr_floor` at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let step = step.min(config.total_steps);
    if step < config.warmup_steps {
        return config.lr * step as f64 / config.warmup_steps as f64;
    }
    let span = config.total_steps - config.warmup_steps;
    if span == 0 {
        return config.lr;
    }
    let frac = (step - config.warmup_steps) as f64 / span as f64;
    config.lr - (config.lr - config.lr_floor) * frac
}

#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub step: u64,
    pub params: ModelParams<S>,
    pub first_moment: ModelParams<S>,
    pub second_moment: ModelParams<S>,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(params: ModelParams<S>, seed: u64) -> Self {
        let dims = params.dims;
        Self {
            step: 0,
            params,
            first_moment: ModelParams::zeros(dims),
            second_moment: ModelParams::zeros(dims),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr_at(state.step)`.
pub fn adamw_step<S: Scalar>(state: &mut TrainState<S>, grads: &ModelGrads<S>, config: &TrainConfig) -> Result<()> {
    if grads.dims != state.params.dims {
        return Err(Error::DimensionMismatch("gradient and parameter shapes differ".into()));
    }
    for (name, g) in grads.groups() {
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { name, index });
        }
    }
    let t = state.step + 1;
    let lr = S::lit(lr_at(state.step, config));
    let decay = S::one() - lr * S::lit(config.weight_decay);
    let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
    let bias1 = S::one() - b1.powi(t as i32);
    let bias2 = S::one() - b2.powi(t as i32);
    let eps = S::lit(ADAM_EPS);
    let params = state.params.groups_mut();
    let ms = state.first_moment.groups_mut();
    let vs = state.second_moment.groups_mut();
    for (((_, p), (_, m)), ((_, v), (_, g))) in params.into_iter().zip(ms).zip(vs.into_iter().zip(grads.groups())) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (S::one() - b1) * gi;
            v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Seeded shuffled epochs, consumed sequentially.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next_batch<R: rand::Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// A tokenized (query, positive document) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub query: Vec<SubwordId>,
    pub doc: Vec<SubwordId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub npair: f64,
    pub flops_q: f64,
    pub flops_d: f64,
    pub jflops: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub l0_q: f64,
    pub l0_d: f64,
    pub r_at_10: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot<S> {
    pub step: u64,
    pub score: f64,
    pub params: ModelParams<S>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput<S> {
    /// Parameters after the last completed step (last good on divergence).
    pub last: ModelParams<S>,
    /// Best validation R@10 snapshot, when validation ran.
    pub best: Option<Snapshot<S>>,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step at which a non-finite loss stopped training.
    pub diverged_at: Option<u64>,
}

fn forward_all<S: Scalar>(seqs: &[&[SubwordId]], params: &ModelParams<S>, max_len: usize) -> Result<Vec<ForwardCache<S>>> {
    seqs.par_iter().map(|s| forward(s, params, max_len)).collect()
}

fn validate_record<S: Scalar>(step: u64, params: &ModelParams<S>, validation: &PreparedEval) -> Result<EvalRecord> {
    let report = validation.evaluate_params(params, PruneConfig::default())?;
    Ok(EvalRecord {
        step,
        l0_q: report.l0_q,
        l0_d: report.l0_d,
        r_at_10: report.r_at_10,
    })
}

/// Ranking finetuning with in-batch negatives and the configured sparsity
/// regularizers.
pub fn run_finetune<S: Scalar>(
    pairs: &[TrainPair],
    init: ModelParams<S>,
    config: &TrainConfig,
    validation: Option<&PreparedEval>,
) -> Result<FinetuneOutput<S>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("finetuning dataset"));
    }
    init.check_shapes()?;
    let mut state = TrainState::new(init, config.seed);
    let mut batcher = Batcher::new(pairs.len());
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<Snapshot<S>> = None;
    let mut grads = ModelParams::zeros(state.params.dims);

    while state.step < config.total_steps {
        let idx = batcher.next_batch(config.batch_size, &mut state.rng);
        let seqs: Vec<&[SubwordId]> = idx
            .iter()
            .flat_map(|&i| [pairs[i].query.as_slice(), pairs[i].doc.as_slice()])
            .collect();
        let caches = forward_all(&seqs, &state.params, config.max_len)?;
        let (qc, dc): (Vec<_>, Vec<_>) = caches.chunks_exact(2).map(|c| (&c[0], &c[1])).unzip();
        let batch = Batch::new(
            qc.iter().map(|c| c.pooled_dense()).collect(),
            dc.iter().map(|c| c.pooled_dense()).collect(),
        )?;
        let out = total_finetune_loss(&batch, &config.loss)?;
        if !out.loss.is_finite() {
            return Ok(FinetuneOutput {
                last: state.params,
                best,
                log,
                evals,
                diverged_at: Some(state.step),
            });
        }
        grads.fill_zero();
        for i in 0..idx.len() {
            backward_pooled(qc[i], &state.params, &out.grad_q[i], &mut grads);
            backward_pooled(dc[i], &state.params, &out.grad_d[i], &mut grads);
        }
        let lr = lr_at(state.step, config);
        if let Err(Error::NonFiniteGradient { .. }) = adamw_step(&mut state, &grads, config) {
            return Ok(FinetuneOutput {
                last: state.params,
                best,
                log,
                evals,
                diverged_at: Some(state.step),
            });
        }
        log.push(StepRecord {
            step: state.step,
            loss: out.loss.as_f64(),
            npair: out.npair.as_f64(),
            flops_q: out.flops_q.as_f64(),
            flops_d: out.flops_d.as_f64(),
            jflops: out.jflops.as_f64(),
            lr,
        });
        if let Some(v) = validation {
            if config.eval_every > 0 && (state.step.is_multiple_of(config.eval_every) || state.step == config.total_steps) {
                let rec = validate_record(state.step, &state.params, v)?;
                if best.as_ref().is_none_or(|b| rec.r_at_10 > b.score) {
                    best = Some(Snapshot {
                        step: state.step,
                        score: rec.r_at_10,
                        params: state.params.clone(),
                    });
                }
                evals.push(rec);
            }
        }
    }
    Ok(FinetuneOutput {
        last: state.params,
        best,
        log,
        evals,
        diverged_at: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss: f64,
    pub masked_positions: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<S> {
    pub last: ModelParams<S>,
    /// Lowest mean loss over an evaluation interval.
    pub best: Option<Snapshot<S>>,
    pub log: Vec<PretrainRecord>,
    /// Titles without any expanded-vocabulary occurrence.
    pub skipped: usize,
    pub diverged_at: Option<u64>,
}

/// Masked-LM pretraining: each step masks a batch of titles, predicts the
/// masked term at every covered subword position and updates with AdamW.
pub fn run_pretrain<S: Scalar>(
    titles: &[AnnotatedTitle],
    subvocab: &SubwordVocab,
    init: ModelParams<S>,
    config: &TrainConfig,
) -> Result<PretrainOutput<S>> {
    config.validate()?;
    init.check_shapes()?;
    let usable: Vec<&AnnotatedTitle> = titles.iter().filter(|t| !t.occurrences.is_empty()).collect();
    let skipped = titles.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Empty("pretraining corpus has no title with expanded-vocabulary terms"));
    }
    let mut state = TrainState::new(init, config.seed);
    let mut batcher = Batcher::new(usable.len());
    let mut log = Vec::new();
    let mut best: Option<Snapshot<S>> = None;
    let mut grads = ModelParams::zeros(state.params.dims);

    while state.step < config.total_steps {
        let idx = batcher.next_batch(config.batch_size, &mut state.rng);
        let mut inputs = Vec::with_capacity(idx.len());
        let mut labels: Vec<Vec<(usize, TermId)>> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let title = usable[i];
            let plan = plan_masking(title, subvocab, &mut state.rng)?;
            let (input, lab) = plan.apply(&title.tokens, subvocab.mask_id());
            inputs.push(input);
            labels.push(lab);
        }
        let seqs: Vec<&[SubwordId]> = inputs.iter().map(Vec::as_slice).collect();
        let caches: Vec<ForwardCache<S>> = seqs
            .par_iter()
            .map(|s| forward_context(s, &state.params, config.max_len))
            .collect::<Result<_>>()?;
        let params = &state.params;
        let rows: Vec<Vec<Vec<S>>> = caches
            .par_iter()
            .zip(&labels)
            .map(|(c, lab)| lab.iter().map(|&(pos, _)| logits_at(c, params, pos)).collect())
            .collect();
        let flat_rows: Vec<Vec<S>> = rows.into_iter().flatten().collect();
        let flat_labels: Vec<TermId> = labels.iter().flatten().map(|&(_, t)| t).collect();
        let out = mlm_pretrain_loss(&flat_rows, &flat_labels)?;
        if !out.loss.is_finite() {
            return Ok(PretrainOutput {
                last: state.params,
                best,
                log,
                skipped,
                diverged_at: Some(state.step),
            });
        }
        grads.fill_zero();
        let mut grad_rows = out.grad.into_iter();
        for (cache, lab) in caches.iter().zip(&labels) {
            let per: Vec<(usize, Vec<S>)> = lab.iter().map(|&(pos, _)| (pos, grad_rows.next().expect("one row per label"))).collect();
            backward_logits(cache, &state.params, &per, &mut grads);
        }
        let lr = lr_at(state.step, config);
        if let Err(Error::NonFiniteGradient { .. }) = adamw_step(&mut state, &grads, config) {
            return Ok(PretrainOutput {
                last: state.params,
                best,
                log,
                skipped,
                diverged_at: Some(state.step),
            });
        }
        log.push(PretrainRecord {
            step: state.step,
            loss: out.loss.as_f64(),
            masked_positions: flat_labels.len(),
            lr,
        });
        if config.eval_every > 0 && state.step.is_multiple_of(config.eval_every) {
            let window = &log[log.len() - config.eval_every as usize..];
            let mean = window.iter().map(|r| r.loss).sum::<f64>() / window.len() as f64;
            // lower loss is better; stored negated so `score` stays "higher is better"
            if best.as_ref().is_none_or(|b| -mean > b.score) {
                best = Some(Snapshot {
                    step: state.step,
                    score: -mean,
                    params: state.params.clone(),
                });
            }
        }
    }
    Ok(PretrainOutput {
        last: state.params,
        best,
        log,
        skipped,
        diverged_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_random, ModelDims};

    fn cfg(lr: f64, warmup: u64, total: u64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            warmup_steps: warmup,
            total_steps: total,
            batch_size: 2,
            weight_decay: wd,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_points() {
        let c = cfg(1.0, 10, 110, 0.0);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(5, &c), 0.5);
        assert_eq!(lr_at(10, &c), 1.0);
        assert_eq!(lr_at(60, &c), 0.5);
        assert_eq!(lr_at(110, &c), 0.0);
        let floored = TrainConfig { lr_floor: 0.2, ..c };
        assert!((lr_at(110, &floored) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.0, 0, 1, 0.0).validate().is_err());
        assert!(cfg(1.0, 5, 1, 0.0).validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg(1.0, 0, 1, 0.0) }.validate().is_err());
        assert!(TrainConfig::full_finetune().validate().is_ok());
        assert!(TrainConfig::full_pretrain().validate().is_ok());
    }

    fn scalar_state(x: f64) -> TrainState<f64> {
        let mut p = ModelParams::zeros(ModelDims::new(1, 1, 1));
        p.embedding[0] = x;
        TrainState::new(p, 0)
    }

    fn scalar_grad(g: f64) -> ModelGrads<f64> {
        let mut grads = ModelParams::zeros(ModelDims::new(1, 1, 1));
        grads.embedding[0] = g;
        grads
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let c = cfg(0.1, 0, 10, 0.0);
        let mut s = scalar_state(1.5);
        adamw_step(&mut s, &scalar_grad(0.0), &c).unwrap();
        assert_eq!(s.params.embedding[0], 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay() {
        let c = cfg(0.1, 0, 10, 0.01);
        let mut s = scalar_state(2.0);
        adamw_step(&mut s, &scalar_grad(0.0), &c).unwrap();
        assert_eq!(s.params.embedding[0], 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let c = cfg(0.1, 0, 10, 0.0);
        let mut s = scalar_state(1.0);
        let mut g = scalar_grad(0.0);
        g.head_bias[0] = f64::NAN;
        match adamw_step(&mut s, &g, &c) {
            Err(Error::NonFiniteGradient { name, index }) => {
                assert_eq!(name, "head_bias");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Batcher::new(5);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..5 {
            seen.extend(b.next_batch(2, &mut rng));
        }
        let mut first: Vec<usize> = seen[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next_batch(9, &mut rng).len(), 5);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let init = init_random::<f64>(ModelDims::new(5, 2, 4), 1).unwrap();
        let pairs = vec![TrainPair { query: vec![1], doc: vec![2, 3] }];
        let c = cfg(0.1, 0, 0, 0.01);
        let out = run_finetune(&pairs, init.clone(), &c, None).unwrap();
        assert_eq!(out.last, init);
        assert!(out.log.is_empty());
        assert!(run_finetune::<f64>(&[], init, &c, None).is_err());
    }
}
