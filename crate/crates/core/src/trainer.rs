//! Local training: pair construction, hinge loss, Adam with warmup and
//! linear decay, and epochs over mini-batches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{answer_index, answer_lookup, QuestionGroup};
use crate::error::{Error, Result};
use crate::model::backbone::score;
use crate::model::Model;
use crate::params::ParameterSet;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// BM25 negatives paired with each positive.
pub const NEGATIVES_PER_QUESTION: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub qid: u64,
    pub question: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub participant: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<TrainPair>,
    /// Questions skipped because they had no positive or no negative.
    pub warnings: usize,
}

/// Pairs each positive of every question with each of its BM25 negatives,
/// mined from the answers of `groups` themselves, then shuffles the pairs.
pub fn build_pairs<R: Rng>(
    groups: &[QuestionGroup],
    negatives_per_question: usize,
    participant: &str,
    rng: &mut R,
) -> PairSet {
    let index = answer_index(groups);
    let answers = answer_lookup(groups);
    let negatives = crate::corpus::mine_negatives(groups, &index, negatives_per_question);
    let mut out = PairSet::default();
    for (g, neg) in groups.iter().zip(negatives) {
        if neg.is_empty() || g.positives().next().is_none() {
            out.warnings += 1;
            continue;
        }
        for pos in g.positives() {
            for aid in &neg {
                out.pairs.push(TrainPair {
                    qid: g.qid,
                    question: g.question.clone(),
                    positive: pos.tokens.clone(),
                    negative: answers[aid].clone(),
                    participant: participant.to_string(),
                });
            }
        }
    }
    out.pairs.shuffle(rng);
    out
}

/// `max(0, 1 - s_pos + s_neg)` and its derivatives with respect to
/// `s_pos` and `s_neg`. The derivative is taken as zero at the kink.
pub fn hinge_loss(s_pos: f64, s_neg: f64) -> (f64, f64, f64) {
    let margin = 1.0 - s_pos + s_neg;
    if margin > 0.0 {
        (margin, -1.0, 1.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "epsilon")]
    pub eps: f64,
    #[serde(default = "warmup")]
    pub warmup_fraction: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn epsilon() -> f64 {
    1e-8
}
fn warmup() -> f64 {
    0.1
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: epsilon(),
            warmup_fraction: warmup(),
        }
    }
}

/// Adam moments plus the step counter driving the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub total_steps: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParameterSet, total_steps: u64) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            total_steps,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.config.warmup_fraction * self.total_steps as f64).ceil() as u64
    }
}

/// Rate at `step`: linear warmup over the first `w = ceil(0.1 * total)`
/// steps, then linear decay reaching zero at `total`.
pub fn lr_at(step: u64, opt: &OptimizerState) -> f64 {
    let total = opt.total_steps;
    let w = opt.warmup_steps();
    let base = opt.config.lr;
    if step >= total {
        0.0
    } else if step < w {
        base * step as f64 / w as f64
    } else {
        base * (total - step) as f64 / (total - w) as f64
    }
}

/// One bias-corrected Adam update of every parameter. The counter is
/// incremented first and the rate is `lr_at` of the new count.
pub fn optimizer_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    for (e, g) in params.entries().iter().zip(&grads.tensors) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(e.name.clone()));
        }
    }
    opt.step += 1;
    let t = opt.step as f64;
    let lr = lr_at(opt.step, opt);
    let c = opt.config;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    for id in 0..params.len() {
        let g = grads.tensors[id].data();
        let m = opt.m[id].data_mut();
        let v = opt.v[id].data_mut();
        let p = params.tensor_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub pairs: usize,
    pub batches: usize,
    /// Scored inputs whose answer was cut to fit the sequence length.
    pub truncated: usize,
}

/// Number of optimizer steps one epoch over `pairs` takes.
pub fn batches_per_epoch(pairs: usize, batch_size: usize) -> usize {
    pairs.div_ceil(batch_size.max(1))
}

/// Shuffles `pairs`, then for each mini-batch sums the hinge losses,
/// backpropagates and takes one optimizer step over all parameters.
pub fn train_epoch<R: Rng>(
    model: &Model,
    params: &mut ParameterSet,
    opt: &mut OptimizerState,
    pairs: &[TrainPair],
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    let mut stats = EpochStats::default();
    if pairs.is_empty() {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        grads.zero();
        for &i in batch {
            let pair = &pairs[i];
            let mut tape = Tape::new(params);
            let pos = score(&mut tape, model, &pair.question, &pair.positive)?;
            let neg = score(&mut tape, model, &pair.question, &pair.negative)?;
            stats.truncated += usize::from(pos.truncated) + usize::from(neg.truncated);
            let (loss, _, _) =
                hinge_loss(tape.value(pos.score).item(), tape.value(neg.score).item());
            total += loss;
            if loss > 0.0 {
                let minus_pos = tape.scale(pos.score, -1.0);
                let diff = tape.add(neg.score, minus_pos)?;
                tape.backward(diff, 1.0, &mut grads);
            }
        }
        optimizer_step(params, &grads, opt)?;
        stats.batches += 1;
    }
    stats.pairs = pairs.len();
    stats.mean_loss = total / pairs.len() as f64;
    Ok(stats)
}
