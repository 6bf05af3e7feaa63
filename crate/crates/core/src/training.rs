//! Dual-head likelihood training, self-critical fine-tuning and Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::sfat::ImageRecord;
use crate::dataio::vocab::{BOS, EOS, PAD};
use crate::decoder::{
    encode_image, forward_teacher, greedy_decode, sample_decode_with, with_markers, ModelConfig,
    ModelParams, StepOutput,
};
use crate::error::{Error, Result};
use crate::metrics::{build_corpus_stats, cider_with, CiderVariant, CorpusStats};
use crate::tape::{Gradients, NodeId, ParamStore, Tape};
use crate::tensor::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs_mle: usize,
    pub epochs_rl: usize,
    /// Learning rate the self-critical phase restarts from.
    pub rl_lr: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub reward: CiderVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            lr: 5e-4,
            lr_decay: 0.8,
            decay_every: 3,
            batch_size: 100,
            epochs_mle: 30,
            epochs_rl: 0,
            rl_lr: 5e-5,
            grad_clip_norm: Some(5.0),
            seed: 0,
            reward: CiderVariant::D,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr > 0.0) || !(self.rl_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0) || self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "lr_decay, decay_every and batch_size must be positive".into(),
            ));
        }
        if let Some(n) = self.grad_clip_norm {
            if !(n > 0.0) {
                return Err(Error::Config("grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Step-decayed rate for zero-based `epoch`: `base * decay^(epoch / every)`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

fn head_terms(
    tape: &mut Tape<'_>,
    outputs: &[StepOutput],
    targets: &[usize],
    second: bool,
) -> Result<Vec<NodeId>> {
    outputs
        .iter()
        .zip(targets)
        .filter(|(_, &t)| t != PAD)
        .map(|(o, &t)| tape.pick(if second { o.logp2 } else { o.logp1 }, t))
        .collect()
}

fn sum_or_zero(tape: &mut Tape<'_>, terms: &[NodeId]) -> Result<NodeId> {
    if terms.is_empty() {
        Ok(tape.leaf(Matrix::scalar(0.0)))
    } else {
        tape.add_n(terms)
    }
}

/// `-sum_t log p_head(target_t)` over non-PAD targets.
pub fn head_nll(
    tape: &mut Tape<'_>,
    outputs: &[StepOutput],
    targets: &[usize],
    second: bool,
) -> Result<NodeId> {
    if outputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            outputs: outputs.len(),
            targets: targets.len(),
        });
    }
    let terms = head_terms(tape, outputs, targets, second)?;
    let s = sum_or_zero(tape, &terms)?;
    Ok(tape.scale(s, -1.0))
}

/// `-gamma * sum log p1(target) - (1 - gamma) * sum log p2(target)`,
/// PAD targets excluded.
pub fn mle_loss(
    tape: &mut Tape<'_>,
    outputs: &[StepOutput],
    targets: &[usize],
    gamma: f64,
) -> Result<NodeId> {
    if outputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            outputs: outputs.len(),
            targets: targets.len(),
        });
    }
    let t1 = head_terms(tape, outputs, targets, false)?;
    let t2 = head_terms(tape, outputs, targets, true)?;
    let l1 = sum_or_zero(tape, &t1)?;
    let l2 = sum_or_zero(tape, &t2)?;
    let l1 = tape.scale(l1, -gamma);
    let l2 = tape.scale(l2, -(1.0 - gamma));
    tape.add(l1, l2)
}

/// Loss and parameter gradients of one `[BOS, ..., EOS]` caption.
pub fn caption_grads(
    params: &ModelParams,
    config: &ModelConfig,
    image: &ImageRecord,
    tokens: &[usize],
    gamma: f64,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&params.store);
    let enc = encode_image(&mut tape, image, params, config)?;
    let outs = forward_teacher(&mut tape, tokens, &enc, params, config)?;
    let loss = mle_loss(&mut tape, &outs, &tokens[1..], gamma)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?.into_param_grads()))
}

/// Outcome of one self-critical sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RlSample {
    pub sampled: Vec<usize>,
    pub sampled_finished: bool,
    pub sample_logprob: f64,
    pub greedy: Vec<usize>,
    pub reward_sample: f64,
    pub reward_greedy: f64,
    pub advantage: f64,
}

/// Gradient of `-advantage * log p2(sequence)`, where `sequence` is the
/// teacher-forcing input `[BOS, y_1, ..., (EOS)]`. Returns the surrogate
/// loss value and gradients.
pub fn scst_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    image: &ImageRecord,
    sequence: &[usize],
    advantage: f64,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&params.store);
    let enc = encode_image(&mut tape, image, params, config)?;
    let outs = forward_teacher(&mut tape, sequence, &enc, params, config)?;
    let terms = head_terms(&mut tape, &outs, &sequence[1..], true)?;
    let logp = sum_or_zero(&mut tape, &terms)?;
    let loss = tape.scale(logp, -advantage);
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?.into_param_grads()))
}

/// Strips BOS/EOS from an encoded caption.
pub fn strip_markers(seq: &[usize]) -> Vec<usize> {
    seq.iter().copied().filter(|&t| t != BOS && t != EOS).collect()
}

/// One sampled caption against the greedy baseline, rewarded with CIDEr
/// on the terminated caption only.
pub fn scst_update(
    image: &ImageRecord,
    refs: &[Vec<usize>],
    params: &ModelParams,
    config: &ModelConfig,
    stats: &CorpusStats<usize>,
    variant: CiderVariant,
    rng: &mut impl Rng,
) -> Result<(RlSample, f64, Gradients)> {
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let sample = sample_decode_with(image, params, config, rng)?;
    let greedy = greedy_decode(image, params, config)?;
    let reward_sample = cider_with(&sample.tokens, refs, stats, variant)?;
    let reward_greedy = cider_with(&greedy.tokens, refs, stats, variant)?;
    let advantage = reward_sample - reward_greedy;
    let seq = with_markers(&sample.tokens, sample.finished);
    let (loss, grads) = scst_gradients(params, config, image, &seq, advantage)?;
    Ok((
        RlSample {
            sampled: sample.tokens,
            sampled_finished: sample.finished,
            sample_logprob: sample.logprob,
            greedy: greedy.tokens,
            reward_sample,
            reward_greedy,
            advantage,
        },
        loss,
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update (beta1 0.9, beta2 0.999, eps 1e-8).
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, p) in store.values_mut().iter_mut().enumerate() {
        let g = grads.values()[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mle,
    Rl,
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_cider_greedy: f64,
    pub wallclock_s: f64,
}

/// Resumable optimizer and progress state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub mle_epochs_done: usize,
    pub rl_epochs_done: usize,
}

impl TrainState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            adam: AdamState::new(&params.store),
            mle_epochs_done: 0,
            rl_epochs_done: 0,
        }
    }
}

fn epoch_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    let tag = match phase {
        Phase::Mle => 0x4d4c_4500_0000_0000u64,
        Phase::Rl => 0x524c_0000_0000_0000u64,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Runs `f` over `items` on `threads` workers and returns results in input
/// order, so reductions over them are deterministic.
fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn reduce_grads(store: &ParamStore, parts: impl IntoIterator<Item = Gradients>) -> Gradients {
    let mut total = Gradients::zeros_like(store);
    for g in parts {
        total.add_assign(&g);
    }
    total
}

/// Mean CIDEr of greedy captions against each image's references.
pub fn mean_greedy_cider(
    images: &[&ImageRecord],
    params: &ModelParams,
    config: &ModelConfig,
    stats: &CorpusStats<usize>,
    variant: CiderVariant,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for img in images {
        let refs: Vec<Vec<usize>> = img.captions.iter().map(|c| strip_markers(c)).collect();
        if refs.is_empty() {
            continue;
        }
        let d = greedy_decode(img, params, config)?;
        total += cider_with(&d.tokens, &refs, stats, variant)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn reference_stats(images: &[&ImageRecord]) -> CorpusStats<usize> {
    let sets: Vec<Vec<Vec<usize>>> = images
        .iter()
        .map(|r| r.captions.iter().map(|c| strip_markers(c)).collect())
        .collect();
    build_corpus_stats(&sets)
}

/// Trainer options that do not belong in the serialized config.
#[derive(Clone, Copy, Debug)]
pub struct LoopOptions {
    pub threads: usize,
    /// Skip the per-epoch greedy CIDEr evaluation (logged as NaN).
    pub skip_eval: bool,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            skip_eval: false,
        }
    }
}

/// Runs the remaining epochs of `phase` (up to `epochs_mle` / `epochs_rl`
/// in total), calling `on_epoch` after each. Batches are shuffled with a
/// generator derived from `(seed, phase, epoch)`, so a resumed run follows
/// the same trajectory as an uninterrupted one.
pub fn train_loop(
    images: &[&ImageRecord],
    params: &mut ModelParams,
    config: &ModelConfig,
    tc: &TrainConfig,
    phase: Phase,
    state: &mut TrainState,
    opts: LoopOptions,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    tc.validate()?;
    config.validate()?;
    let usable: Vec<&ImageRecord> = images
        .iter()
        .copied()
        .filter(|r| !r.captions.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = reference_stats(&usable);
    let started = Instant::now();
    let mut logs = Vec::new();

    let (done, target, base_lr) = match phase {
        Phase::Mle => (state.mle_epochs_done, tc.epochs_mle, tc.lr),
        Phase::Rl => (state.rl_epochs_done, tc.epochs_rl, tc.rl_lr),
    };
    for epoch in done..target {
        let lr = tc.lr_at(base_lr, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(tc.seed, phase, epoch));
        let mut loss_sum = 0.0;
        let mut count = 0usize;

        match phase {
            Phase::Mle => {
                let mut items: Vec<(usize, usize)> = usable
                    .iter()
                    .enumerate()
                    .flat_map(|(i, r)| (0..r.captions.len()).map(move |c| (i, c)))
                    .collect();
                items.shuffle(&mut rng);
                for batch in items.chunks(tc.batch_size) {
                    let p: &ModelParams = params;
                    let results = map_ordered(batch, opts.threads, |&(i, c)| {
                        caption_grads(p, config, usable[i], &usable[i].captions[c], tc.gamma)
                    })?;
                    let n = results.len();
                    let mut losses = Vec::with_capacity(n);
                    let mut grads = reduce_grads(
                        &params.store,
                        results.into_iter().map(|(l, g)| {
                            losses.push(l);
                            g
                        }),
                    );
                    loss_sum += losses.iter().sum::<f64>();
                    count += n;
                    grads.scale(1.0 / n as f64);
                    if let Some(max) = tc.grad_clip_norm {
                        grads.clip_global_norm(max);
                    }
                    adam_step(&mut params.store, &grads, &mut state.adam, lr)?;
                }
                state.mle_epochs_done = epoch + 1;
            }
            Phase::Rl => {
                let mut order: Vec<usize> = (0..usable.len()).collect();
                order.shuffle(&mut rng);
                // One independent sampling seed per item, fixed before any
                // parallel work starts.
                let items: Vec<(usize, u64)> = order.into_iter().map(|i| (i, rng.gen())).collect();
                for batch in items.chunks(tc.batch_size) {
                    let p: &ModelParams = params;
                    let results = map_ordered(batch, opts.threads, |&(i, s)| {
                        let img = usable[i];
                        let refs: Vec<Vec<usize>> =
                            img.captions.iter().map(|c| strip_markers(c)).collect();
                        let mut item_rng = ChaCha8Rng::seed_from_u64(s);
                        scst_update(img, &refs, p, config, &stats, tc.reward, &mut item_rng)
                    })?;
                    let n = results.len();
                    let mut losses = Vec::with_capacity(n);
                    let mut grads = reduce_grads(
                        &params.store,
                        results.into_iter().map(|(_, l, g)| {
                            losses.push(l);
                            g
                        }),
                    );
                    loss_sum += losses.iter().sum::<f64>();
                    count += n;
                    grads.scale(1.0 / n as f64);
                    if let Some(max) = tc.grad_clip_norm {
                        grads.clip_global_norm(max);
                    }
                    adam_step(&mut params.store, &grads, &mut state.adam, lr)?;
                }
                state.rl_epochs_done = epoch + 1;
            }
        }

        let mean_cider_greedy = if opts.skip_eval {
            f64::NAN
        } else {
            mean_greedy_cider(&usable, params, config, &stats, tc.reward)?
        };
        let log = EpochLog {
            epoch: epoch + 1,
            phase,
            lr,
            mean_loss: loss_sum / count.max(1) as f64,
            mean_cider_greedy,
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, params, state)?;
        logs.push(log);
    }
    Ok(logs)
}
