//! Desk-scale training flow: synthetic capability tasks, LR schedules and
//! named hyperparameter presets, an AdamW loop over the autograd engine,
//! seeded sampling with best-of-N, the polishing ping-pong, the pairwise
//! win-rate metric, and the expert-soup experiment.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merge::{linear_merge, Checkpoint, MergeError, MergeSpec};
use crate::model::{
    init_params, model_forward, BoundParams, ModelConfig, ModelError, ParamMap, SequenceBatch,
};
use crate::objectives::{
    copg_loss, pref_pair_loss, sft_loss, CompletionBatch, ObjectiveError, PrefKind,
    SftRegulariser,
};
use crate::tensor::{Graph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
    #[error("schedule needs peak >= end >= 0 and steps >= 1")]
    BadSchedule,
    #[error("step {step} outside schedule of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("win_rate needs at least one comparison")]
    NoComparisons,
    #[error("best_of_n needs n >= 1")]
    ZeroSamples,
    #[error("polish needs rounds >= 1")]
    ZeroRounds,
    #[error("soup experiment needs >= 2 tasks")]
    TooFewTasks,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Merge(#[from] MergeError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// toy tasks

pub const TOK_PAD: usize = 0;
pub const TOK_SEP: usize = 1;
pub const TAG_BASE: usize = 2; // one tag token per task
pub const SYM_BASE: usize = 5;
pub const N_SYMS: usize = 8;

/// Decoder sized for the synthetic tasks.
pub fn toy_pipeline_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 8,
        d_ff: 32,
        window: 8,
        rope_base: 10_000.0,
        max_seq: 32,
        dtype_bytes: 8,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
}

impl Example {
    pub fn full(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.completion);
        s
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub tag: usize,
    pub seed: u64,
    pub completion_len: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn task_completion(kind: usize, a: usize, b: usize) -> Vec<usize> {
    match kind {
        0 => vec![SYM_BASE + a, SYM_BASE + b],              // copy
        1 => vec![SYM_BASE + b, SYM_BASE + a],              // reversal
        _ => vec![SYM_BASE + (a + b) % N_SYMS],             // modular sum
    }
}

/// Three disjoint-skill tasks over symbol pairs: copy, reversal, and
/// modular sum. Prompts are `[tag, a, b, SEP]`; the train/eval split is a
/// seeded partition of all ordered pairs with distinct symbols (so copy and
/// reversal targets never coincide).
pub fn make_toy_tasks(seed: u64) -> Vec<TaskSpec> {
    let names = ["copy", "reversal", "modsum"];
    names
        .iter()
        .enumerate()
        .map(|(kind, name)| {
            let task_seed = seed.wrapping_add(kind as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
            let mut pairs: Vec<(usize, usize)> = (0..N_SYMS)
                .flat_map(|a| (0..N_SYMS).filter(move |&b| b != a).map(move |b| (a, b)))
                .collect();
            pairs.shuffle(&mut rng);
            let tag = TAG_BASE + kind;
            let examples: Vec<Example> = pairs
                .into_iter()
                .map(|(a, b)| Example {
                    prompt: vec![tag, SYM_BASE + a, SYM_BASE + b, TOK_SEP],
                    completion: task_completion(kind, a, b),
                })
                .collect();
            let n_eval = examples.len() / 5;
            let (eval, train) = examples.split_at(n_eval);
            TaskSpec {
                name: name.to_string(),
                tag,
                seed: task_seed,
                completion_len: if kind == 2 { 1 } else { 2 },
                train: train.to_vec(),
                eval: eval.to_vec(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// schedules and presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePlan {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub end: f64,
    pub steps: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        if self.peak < self.end || self.end < 0.0 || self.steps < 1 {
            return Err(PipelineError::BadSchedule);
        }
        Ok(())
    }

    pub fn constant(lr: f64, steps: usize) -> Self {
        SchedulePlan {
            kind: ScheduleKind::Constant,
            peak: lr,
            end: lr,
            steps,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

pub fn lr_value(plan: &SchedulePlan, step: usize) -> Result<f64> {
    plan.validate()?;
    if step > plan.steps {
        return Err(PipelineError::StepOutOfRange { step, steps: plan.steps });
    }
    let t = step as f64 / plan.steps as f64;
    Ok(match plan.kind {
        ScheduleKind::Linear => plan.peak + (plan.end - plan.peak) * t,
        ScheduleKind::Cosine => {
            plan.end + (plan.peak - plan.end) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
        ScheduleKind::Constant => plan.peak,
    })
}

/// A named training recipe. Optional fields apply only to some objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub objective: String,
    pub schedule: SchedulePlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tie_label: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_of_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online_k: Option<usize>,
}

pub const PRESET_NAMES: [&str; 7] = [
    "sft-multilingual",
    "safety-ipo",
    "code-rl",
    "rm-stage1",
    "rm-stage2",
    "cooldown",
    "polish",
];

pub fn preset(name: &str) -> Option<Preset> {
    let betas = (0.9, 0.95);
    let p = match name {
        "sft-multilingual" => Preset {
            name: name.into(),
            objective: "sft".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Cosine,
                peak: 2.5e-5,
                end: 1.25e-5,
                steps: 1000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: None,
            batch_size: Some(128),
            gold_label: None,
            tie_label: None,
            best_of_n: None,
            online_k: None,
        },
        "safety-ipo" => Preset {
            name: name.into(),
            objective: "ipo".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Cosine,
                peak: 1e-6,
                end: 1e-7,
                steps: 1000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: Some(0.03),
            batch_size: Some(32),
            gold_label: None,
            tie_label: None,
            best_of_n: None,
            online_k: None,
        },
        "code-rl" => Preset {
            name: name.into(),
            objective: "copg".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Constant,
                peak: 2e-6,
                end: 2e-6,
                steps: 1000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: Some(0.06),
            batch_size: Some(32),
            gold_label: None,
            tie_label: None,
            best_of_n: None,
            online_k: None,
        },
        "rm-stage1" => Preset {
            name: name.into(),
            objective: "bt-rm".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Cosine,
                peak: 4e-5,
                end: 0.0,
                steps: 1000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: None,
            batch_size: Some(1024),
            gold_label: Some(0.999),
            tie_label: Some(0.5),
            best_of_n: None,
            online_k: None,
        },
        "rm-stage2" => Preset {
            name: name.into(),
            objective: "bt-rm".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Cosine,
                peak: 3e-6,
                end: 0.0,
                steps: 1000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: None,
            batch_size: Some(16),
            gold_label: Some(0.999),
            tie_label: Some(0.5),
            best_of_n: None,
            online_k: None,
        },
        "cooldown" => Preset {
            name: name.into(),
            objective: "sft".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Linear,
                peak: 2.5e-4,
                end: 1e-6,
                steps: 50_000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: None,
            batch_size: Some(128),
            gold_label: None,
            tie_label: None,
            best_of_n: None,
            online_k: None,
        },
        "polish" => Preset {
            name: name.into(),
            objective: "polish".into(),
            schedule: SchedulePlan {
                kind: ScheduleKind::Constant,
                peak: 1e-6,
                end: 1e-6,
                steps: 1000,
                betas,
                weight_decay: 0.1,
                grad_clip: 1.0,
            },
            beta: Some(0.06),
            batch_size: Some(32),
            gold_label: None,
            tie_label: None,
            best_of_n: Some(4),
            online_k: Some(2),
        },
        _ => return None,
    };
    Some(p)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub loss: Vec<f64>,
    pub task_accuracy: BTreeMap<String, f64>,
    pub wins: u64,
    pub ties: u64,
    pub losses: u64,
    pub extra: BTreeMap<String, f64>,
}

/// (wins + ties/2) / total.
pub fn win_rate(wins: u64, ties: u64, losses: u64) -> Result<f64> {
    let total = wins + ties + losses;
    if total == 0 {
        return Err(PipelineError::NoComparisons);
    }
    Ok((wins as f64 + 0.5 * ties as f64) / total as f64)
}

// ---------------------------------------------------------------------------
// optimizer

/// AdamW: moment smoothing with bias correction, decoupled weight decay,
/// global gradient-norm clipping.
pub struct AdamW {
    betas: (f64, f64),
    weight_decay: f64,
    grad_clip: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(plan: &SchedulePlan) -> Self {
        AdamW {
            betas: plan.betas,
            weight_decay: plan.weight_decay,
            grad_clip: plan.grad_clip,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let norm: f64 = grads
            .values()
            .flat_map(|t| t.data().iter().map(|g| g * g))
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.grad_clip && norm > 0.0 {
            self.grad_clip / norm
        } else {
            1.0
        };
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, grad) in grads {
            let theta = params.get_mut(name).expect("grad for unknown parameter");
            let n = theta.data().len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = theta.data().to_vec();
            for i in 0..n {
                let gi = grad.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            *theta = Tensor::new(theta.shape().to_vec(), data).expect("finite update");
        }
    }
}

// ---------------------------------------------------------------------------
// shared training plumbing

/// Next-token targets and prompt mask for a full sequence: row i predicts
/// token i+1; rows predicting prompt tokens (and the final row) are masked.
pub fn next_token_targets(full: &[usize], prompt_len: usize) -> (Vec<usize>, Vec<bool>) {
    let s = full.len();
    let mut targets = vec![0; s];
    let mut mask = vec![true; s];
    for i in 0..s - 1 {
        targets[i] = full[i + 1];
        // row i predicts token i+1; completion tokens sit at prompt_len..
        mask[i] = i + 1 < prompt_len;
    }
    (targets, mask)
}

pub fn collect_grads(
    bound: &BoundParams,
    grads: &crate::tensor::Gradients,
    params: &ParamMap,
) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .map(|(name, id)| (name.clone(), grads.get_or_zeros(*id, params[name].shape())))
        .collect()
}

/// Differentiable log-probability of an example's completion tokens, given
/// logits for the full sequence. Length-averaged when `normalized`.
fn completion_logprob(
    g: &mut Graph,
    logits: TensorId,
    full: &[usize],
    prompt_len: usize,
    normalized: bool,
) -> Result<TensorId> {
    let probs = g.softmax_lastdim(logits)?;
    let lp = g.log(probs);
    let mut terms = Vec::new();
    for i in prompt_len - 1..full.len() - 1 {
        let row = g.slice(lp, 0, i, i + 1)?;
        let tok = g.slice(row, 1, full[i + 1], full[i + 1] + 1)?;
        terms.push(tok);
    }
    let cat = g.concat(0, &terms)?;
    let total = g.sum(cat);
    if normalized {
        Ok(g.scale(total, 1.0 / terms.len() as f64)?)
    } else {
        Ok(total)
    }
}

fn forward_example(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ModelConfig,
    full: &[usize],
) -> Result<TensorId> {
    let batch = SequenceBatch::simple(vec![full.to_vec()]);
    Ok(model_forward(g, bound, cfg, &batch)?)
}

fn l2_regulariser(
    g: &mut Graph,
    bound: &BoundParams,
    reference: &ParamMap,
    coefficient: f64,
) -> (Vec<TensorId>, Vec<TensorId>, f64) {
    let mut params = Vec::new();
    let mut refs = Vec::new();
    for (name, id) in bound.iter() {
        params.push(*id);
        refs.push(g.constant(reference[name].clone()));
    }
    (params, refs, coefficient)
}

// ---------------------------------------------------------------------------
// SFT

pub struct SftRun<'a> {
    pub examples: &'a [Example],
    pub plan: SchedulePlan,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// (reference params, coefficient): keeps the policy near a parent
    pub l2_to_reference: Option<(&'a ParamMap, f64)>,
}

pub fn train_sft(
    cfg: &ModelConfig,
    init: &ParamMap,
    run: &SftRun,
) -> Result<(Checkpoint, RunMetrics)> {
    if run.examples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    run.plan.validate()?;
    let mut params = init.clone();
    let mut opt = AdamW::new(&run.plan);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut metrics = RunMetrics::default();
    for step in 0..run.steps {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, true)?;
        let mut losses = Vec::new();
        for _ in 0..run.batch_size {
            let ex = &run.examples[rng.gen_range(0..run.examples.len())];
            let full = ex.full();
            let logits = forward_example(&mut g, &bound, cfg, &full)?;
            let (targets, mask) = next_token_targets(&full, ex.prompt.len());
            let l = sft_loss(&mut g, logits, &targets, &mask, SftRegulariser::None)?;
            losses.push(l);
        }
        let cat = g.concat(0, &losses)?;
        let total = g.sum(cat);
        let mut loss = g.scale(total, 1.0 / losses.len() as f64)?;
        if let Some((reference, coefficient)) = run.l2_to_reference {
            let (ps, rs, c) = l2_regulariser(&mut g, &bound, reference, coefficient);
            let mut penalty = g.scalar(0.0);
            for (&p, &r) in ps.iter().zip(&rs) {
                let diff = g.sub(p, r)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum(sq);
                penalty = g.add(penalty, s)?;
            }
            let scaled = g.scale(penalty, c)?;
            loss = g.add(loss, scaled)?;
        }
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(PipelineError::NonFinite(step));
        }
        metrics.loss.push(lv);
        let grads = g.backward(loss)?;
        let named = collect_grads(&bound, &grads, &params);
        opt.step(&mut params, &named, lr_value(&run.plan, step.min(run.plan.steps))?);
    }
    Ok((
        Checkpoint::new(params, "sft", run.steps as u64),
        metrics,
    ))
}

// ---------------------------------------------------------------------------
// offline preference

#[derive(Debug, Clone)]
pub struct PrefExample {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

pub struct PrefRun<'a> {
    pub pairs: &'a [PrefExample],
    pub kind: PrefKind,
    pub beta: f64,
    pub margin: f64,
    pub plan: SchedulePlan,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub reference: &'a ParamMap,
    /// weight of the SFT-on-chosen auxiliary loss
    pub sft_lambda: f64,
    pub l2_coefficient: f64,
}

fn ref_completion_logprob(
    cfg: &ModelConfig,
    reference: &ParamMap,
    prompt: &[usize],
    completion: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, reference, false)?;
    let mut full = prompt.to_vec();
    full.extend_from_slice(completion);
    let logits = forward_example(&mut g, &bound, cfg, &full)?;
    let lp = completion_logprob(&mut g, logits, &full, prompt.len(), true)?;
    Ok(g.value(lp).item())
}

pub fn train_pref(
    cfg: &ModelConfig,
    init: &ParamMap,
    run: &PrefRun,
) -> Result<(Checkpoint, RunMetrics)> {
    if run.pairs.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    run.plan.validate()?;
    // reference deltas are fixed; compute them once
    let ref_deltas: Vec<f64> = run
        .pairs
        .iter()
        .map(|p| {
            let c = ref_completion_logprob(cfg, run.reference, &p.prompt, &p.chosen)?;
            let r = ref_completion_logprob(cfg, run.reference, &p.prompt, &p.rejected)?;
            Ok(c - r)
        })
        .collect::<Result<_>>()?;

    let mut params = init.clone();
    let mut opt = AdamW::new(&run.plan);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut metrics = RunMetrics::default();
    for step in 0..run.steps {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, true)?;
        let mut losses = Vec::new();
        for _ in 0..run.batch_size {
            let idx = rng.gen_range(0..run.pairs.len());
            let pair = &run.pairs[idx];
            let full_c = {
                let mut f = pair.prompt.clone();
                f.extend_from_slice(&pair.chosen);
                f
            };
            let full_r = {
                let mut f = pair.prompt.clone();
                f.extend_from_slice(&pair.rejected);
                f
            };
            let logits_c = forward_example(&mut g, &bound, cfg, &full_c)?;
            let logits_r = forward_example(&mut g, &bound, cfg, &full_r)?;
            let lp_c = completion_logprob(&mut g, logits_c, &full_c, pair.prompt.len(), true)?;
            let lp_r = completion_logprob(&mut g, logits_r, &full_r, pair.prompt.len(), true)?;
            let delta_pi = g.sub(lp_c, lp_r)?;
            let delta_ref = g.scalar(ref_deltas[idx]);
            let mut l = pref_pair_loss(&mut g, run.kind, delta_pi, delta_ref, run.beta, run.margin)?;
            if run.sft_lambda > 0.0 {
                let (targets, mask) = next_token_targets(&full_c, pair.prompt.len());
                let aux = sft_loss(&mut g, logits_c, &targets, &mask, SftRegulariser::None)?;
                let scaled = g.scale(aux, run.sft_lambda)?;
                l = g.add(l, scaled)?;
            }
            losses.push(l);
        }
        let cat = g.concat(0, &losses)?;
        let total = g.sum(cat);
        let mut loss = g.scale(total, 1.0 / losses.len() as f64)?;
        if run.l2_coefficient > 0.0 {
            let (ps, rs, c) = l2_regulariser(&mut g, &bound, run.reference, run.l2_coefficient);
            let mut penalty = g.scalar(0.0);
            for (&p, &r) in ps.iter().zip(&rs) {
                let diff = g.sub(p, r)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum(sq);
                penalty = g.add(penalty, s)?;
            }
            let scaled = g.scale(penalty, c)?;
            loss = g.add(loss, scaled)?;
        }
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(PipelineError::NonFinite(step));
        }
        metrics.loss.push(lv);
        let grads = g.backward(loss)?;
        let named = collect_grads(&bound, &grads, &params);
        opt.step(&mut params, &named, lr_value(&run.plan, step.min(run.plan.steps))?);
    }
    Ok((
        Checkpoint::new(params, "pref", run.steps as u64),
        metrics,
    ))
}

// ---------------------------------------------------------------------------
// sampling

/// Seeded ancestral sampling of `len` tokens after `prompt`.
pub fn sample_completion(
    cfg: &ModelConfig,
    params: &ParamMap,
    prompt: &[usize],
    len: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    for _ in 0..len {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false)?;
        let logits = forward_example(&mut g, &bound, cfg, &seq)?;
        let last = g.slice(logits, 0, seq.len() - 1, seq.len())?;
        let row = g.value(last).data().to_vec();
        let tok = if temperature <= 0.0 {
            argmax(&row)
        } else {
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut u = rng.gen_range(0.0..z);
            let mut pick = exps.len() - 1;
            for (i, &e) in exps.iter().enumerate() {
                if u < e {
                    pick = i;
                    break;
                }
                u -= e;
            }
            pick
        };
        seq.push(tok);
    }
    Ok(seq[prompt.len()..].to_vec())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap()
}

/// Greedy (argmax) decoding.
pub fn greedy_completion(
    cfg: &ModelConfig,
    params: &ParamMap,
    prompt: &[usize],
    len: usize,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    sample_completion(cfg, params, prompt, len, 0.0, &mut rng)
}

/// Samples n completions, scores each, returns (winning sample index,
/// completion). Ties go to the lowest index.
pub fn best_of_n<S: FnMut(&[usize]) -> f64>(
    cfg: &ModelConfig,
    params: &ParamMap,
    prompt: &[usize],
    len: usize,
    n: usize,
    temperature: f64,
    seed: u64,
    mut score: S,
) -> Result<(usize, Vec<usize>)> {
    if n == 0 {
        return Err(PipelineError::ZeroSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<usize>, f64)> = None;
    for i in 0..n {
        let c = sample_completion(cfg, params, prompt, len, temperature, &mut rng)?;
        let s = score(&c);
        let better = match &best {
            Some((_, _, bs)) => s > *bs,
            None => true,
        };
        if better {
            best = Some((i, c, s));
        }
    }
    let (i, c, _) = best.unwrap();
    Ok((i, c))
}

// ---------------------------------------------------------------------------
// evaluation

/// Exact-match accuracy of greedy decoding over a split.
pub fn accuracy(cfg: &ModelConfig, params: &ParamMap, split: &[Example]) -> Result<f64> {
    if split.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut hits = 0;
    for ex in split {
        let out = greedy_completion(cfg, params, &ex.prompt, ex.completion.len())?;
        if out == ex.completion {
            hits += 1;
        }
    }
    Ok(hits as f64 / split.len() as f64)
}

// ---------------------------------------------------------------------------
// online CoPG

pub struct OnlineCopgRun<'a> {
    pub prompts: &'a [(Vec<usize>, usize)], // (prompt, completion length)
    pub k: usize,
    pub beta: f64,
    pub temperature: f64,
    pub plan: SchedulePlan,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub reference: &'a ParamMap,
    pub l2_coefficient: f64,
}

pub fn train_copg_online<S: Fn(&[usize], &[usize]) -> f64>(
    cfg: &ModelConfig,
    init: &ParamMap,
    run: &OnlineCopgRun,
    scorer: S,
) -> Result<(Checkpoint, RunMetrics)> {
    if run.prompts.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    run.plan.validate()?;
    let mut params = init.clone();
    let mut opt = AdamW::new(&run.plan);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut metrics = RunMetrics::default();
    for step in 0..run.steps {
        // sample completions with frozen weights first
        let mut drawn = Vec::new();
        for _ in 0..run.batch_size {
            let (prompt, len) = &run.prompts[rng.gen_range(0..run.prompts.len())];
            let completions: Vec<Vec<usize>> = (0..run.k)
                .map(|_| sample_completion(cfg, &params, prompt, *len, run.temperature, &mut rng))
                .collect::<Result<_>>()?;
            drawn.push((prompt.clone(), completions));
        }

        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, true)?;
        let mut losses = Vec::new();
        for (prompt, completions) in &drawn {
            let rewards: Vec<f64> = completions.iter().map(|c| scorer(prompt, c)).collect();
            let mut policy_logps = Vec::new();
            let mut reference_logps = Vec::new();
            for c in completions {
                let mut full = prompt.clone();
                full.extend_from_slice(c);
                let logits = forward_example(&mut g, &bound, cfg, &full)?;
                policy_logps.push(completion_logprob(&mut g, logits, &full, prompt.len(), false)?);
                let mut g_ref = Graph::new();
                let ref_bound = BoundParams::bind(&mut g_ref, run.reference, false)?;
                let ref_logits = forward_example(&mut g_ref, &ref_bound, cfg, &full)?;
                let ref_lp =
                    completion_logprob(&mut g_ref, ref_logits, &full, prompt.len(), false)?;
                reference_logps.push(g_ref.value(ref_lp).item());
            }
            let batch = CompletionBatch {
                rewards: &rewards,
                policy_logps: &policy_logps,
                reference_logps: &reference_logps,
                beta: run.beta,
            };
            losses.push(copg_loss(&mut g, &batch)?);
        }
        let cat = g.concat(0, &losses)?;
        let total = g.sum(cat);
        let mut loss = g.scale(total, 1.0 / losses.len() as f64)?;
        if run.l2_coefficient > 0.0 {
            let (ps, rs, c) = l2_regulariser(&mut g, &bound, run.reference, run.l2_coefficient);
            let mut penalty = g.scalar(0.0);
            for (&p, &r) in ps.iter().zip(&rs) {
                let diff = g.sub(p, r)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum(sq);
                penalty = g.add(penalty, s)?;
            }
            let scaled = g.scale(penalty, c)?;
            loss = g.add(loss, scaled)?;
        }
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(PipelineError::NonFinite(step));
        }
        metrics.loss.push(lv);
        let grads = g.backward(loss)?;
        let named = collect_grads(&bound, &grads, &params);
        opt.step(&mut params, &named, lr_value(&run.plan, step.min(run.plan.steps))?);
    }
    Ok((
        Checkpoint::new(params, "copg-online", run.steps as u64),
        metrics,
    ))
}

// ---------------------------------------------------------------------------
// polishing

#[derive(Debug, Clone)]
pub struct PolishConfig {
    pub rounds: usize,
    pub n_bon: usize,
    pub online_k: usize,
    pub steps_per_phase: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub sft_lambda: f64,
    pub l2_coefficient: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PolishConfig {
    fn default() -> Self {
        PolishConfig {
            rounds: 1,
            n_bon: 4,
            online_k: 2,
            steps_per_phase: 10,
            batch_size: 4,
            lr: 1e-3,
            beta: 0.06,
            sft_lambda: 0.1,
            l2_coefficient: 1e-4,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PhaseReport {
    pub name: String,
    pub checkpoint: Checkpoint,
    /// mean scorer value of greedy outputs on held-out prompts
    pub heldout_score: f64,
}

fn heldout_score<S: Fn(&[usize], &[usize]) -> f64>(
    cfg: &ModelConfig,
    params: &ParamMap,
    heldout: &[(Vec<usize>, usize)],
    scorer: &S,
) -> Result<f64> {
    let mut total = 0.0;
    for (prompt, len) in heldout {
        let out = greedy_completion(cfg, params, prompt, *len)?;
        total += scorer(prompt, &out);
    }
    Ok(total / heldout.len() as f64)
}

/// Best-of-N SFT once, then per round: offline preference on sampled pairs,
/// online CoPG with k generations per prompt. Each phase is checkpointed and
/// scored on held-out prompts.
pub fn polish<S: Fn(&[usize], &[usize]) -> f64>(
    cfg: &ModelConfig,
    init: &ParamMap,
    prompts: &[(Vec<usize>, usize)],
    heldout: &[(Vec<usize>, usize)],
    scorer: S,
    pcfg: &PolishConfig,
) -> Result<Vec<PhaseReport>> {
    if pcfg.rounds == 0 {
        return Err(PipelineError::ZeroRounds);
    }
    if prompts.is_empty() || heldout.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let plan = SchedulePlan::constant(pcfg.lr, pcfg.steps_per_phase.max(1));
    let mut reports = Vec::new();

    // phase 1: best-of-N SFT
    let mut bon_examples = Vec::new();
    for (i, (prompt, len)) in prompts.iter().enumerate() {
        let (_, completion) = best_of_n(
            cfg,
            init,
            prompt,
            *len,
            pcfg.n_bon,
            pcfg.temperature,
            pcfg.seed.wrapping_add(i as u64),
            |c| scorer(prompt, c),
        )?;
        bon_examples.push(Example { prompt: prompt.clone(), completion });
    }
    let (ckpt, _) = train_sft(
        cfg,
        init,
        &SftRun {
            examples: &bon_examples,
            plan: plan.clone(),
            steps: pcfg.steps_per_phase,
            batch_size: pcfg.batch_size,
            seed: pcfg.seed,
            l2_to_reference: Some((init, pcfg.l2_coefficient)),
        },
    )?;
    let mut current = ckpt.params;
    reports.push(PhaseReport {
        name: "bon-sft".into(),
        heldout_score: heldout_score(cfg, &current, heldout, &scorer)?,
        checkpoint: Checkpoint::new(current.clone(), "polish/bon-sft", 0),
    });

    for round in 0..pcfg.rounds {
        // offline preference: rank sampled completions with the scorer
        let mut pairs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed.wrapping_add(1000 + round as u64));
        for (prompt, len) in prompts {
            let samples: Vec<Vec<usize>> = (0..pcfg.n_bon)
                .map(|_| sample_completion(cfg, &current, prompt, *len, pcfg.temperature, &mut rng))
                .collect::<Result<_>>()?;
            let scores: Vec<f64> = samples.iter().map(|c| scorer(prompt, c)).collect();
            let best = argmax(&scores);
            let worst = scores
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .unwrap();
            if scores[best] > scores[worst] {
                pairs.push(PrefExample {
                    prompt: prompt.clone(),
                    chosen: samples[best].clone(),
                    rejected: samples[worst].clone(),
                });
            }
        }
        if !pairs.is_empty() {
            let reference = current.clone();
            let (ckpt, _) = train_pref(
                cfg,
                &current,
                &PrefRun {
                    pairs: &pairs,
                    kind: PrefKind::Dpo,
                    beta: 0.1,
                    margin: 0.0,
                    plan: plan.clone(),
                    steps: pcfg.steps_per_phase,
                    batch_size: pcfg.batch_size,
                    seed: pcfg.seed.wrapping_add(2000 + round as u64),
                    reference: &reference,
                    sft_lambda: pcfg.sft_lambda,
                    l2_coefficient: pcfg.l2_coefficient,
                },
            )?;
            current = ckpt.params;
        }
        reports.push(PhaseReport {
            name: format!("offline-pref-{round}"),
            heldout_score: heldout_score(cfg, &current, heldout, &scorer)?,
            checkpoint: Checkpoint::new(current.clone(), "polish/offline", 0),
        });

        // online CoPG with k generations per prompt
        let reference = current.clone();
        let (ckpt, _) = train_copg_online(
            cfg,
            &current,
            &OnlineCopgRun {
                prompts,
                k: pcfg.online_k,
                beta: pcfg.beta,
                temperature: pcfg.temperature,
                plan: plan.clone(),
                steps: pcfg.steps_per_phase,
                batch_size: pcfg.batch_size,
                seed: pcfg.seed.wrapping_add(3000 + round as u64),
                reference: &reference,
                l2_coefficient: pcfg.l2_coefficient,
            },
            &scorer,
        )?;
        current = ckpt.params;
        reports.push(PhaseReport {
            name: format!("online-copg-{round}"),
            heldout_score: heldout_score(cfg, &current, heldout, &scorer)?,
            checkpoint: Checkpoint::new(current.clone(), "polish/online", 0),
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// expert soup experiment

#[derive(Debug, Clone)]
pub struct SoupConfig {
    pub instruct_steps: usize,
    pub expert_steps: usize,
    pub polish_steps: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    /// post-merge polish LR = lr_main / lr_polish_divisor
    pub lr_polish_divisor: f64,
    pub cross_domain_fraction: f64,
    pub seed: u64,
}

impl Default for SoupConfig {
    fn default() -> Self {
        // a long shared instruct phase followed by short expert runs keeps
        // the experts in one basin, which is what makes the uniform soup work
        SoupConfig {
            instruct_steps: 2000,
            expert_steps: 200,
            polish_steps: 300,
            batch_size: 16,
            lr_main: 2e-3,
            lr_polish_divisor: 15.0,
            cross_domain_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct SoupReport {
    pub task_names: Vec<String>,
    /// expert_accuracy[e][t] = expert e's eval accuracy on task t
    pub expert_accuracy: Vec<Vec<f64>>,
    pub soup_accuracy: Vec<f64>,
    pub polished_accuracy: Vec<f64>,
    /// polished soup accuracy / matching expert accuracy, per task
    pub preservation: Vec<f64>,
    /// leave-one-out soups: row e = accuracies per task of the soup without
    /// expert e
    pub leave_one_out: Vec<Vec<f64>>,
    pub soup: Checkpoint,
    pub polished: Checkpoint,
}

/// Mixes `fraction` of the batch from other tasks into each expert's data.
fn expert_dataset(tasks: &[TaskSpec], own: usize, fraction: f64, seed: u64) -> Vec<Example> {
    let mut out = tasks[own].train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<&Example> = tasks
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != own)
        .flat_map(|(_, t)| t.train.iter())
        .collect();
    let n_cross = ((out.len() as f64 * fraction).round() as usize).max(1);
    for _ in 0..n_cross {
        out.push(others[rng.gen_range(0..others.len())].clone());
    }
    out
}

pub fn expert_soup_experiment(
    tasks: &[TaskSpec],
    cfg: &ModelConfig,
    scfg: &SoupConfig,
) -> Result<SoupReport> {
    if tasks.len() < 2 {
        return Err(PipelineError::TooFewTasks);
    }
    let plan = SchedulePlan::constant(scfg.lr_main, scfg.instruct_steps.max(1));

    // shared instruct initialization: a short run over the task mixture
    let mixture: Vec<Example> = tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let init = init_params(cfg, scfg.seed);
    let (instruct, _) = train_sft(
        cfg,
        &init,
        &SftRun {
            examples: &mixture,
            plan: plan.clone(),
            steps: scfg.instruct_steps,
            batch_size: scfg.batch_size,
            seed: scfg.seed,
            l2_to_reference: None,
        },
    )?;

    // one expert per task, each with a little cross-domain data
    let mut experts = Vec::new();
    for (e, _) in tasks.iter().enumerate() {
        let data = expert_dataset(tasks, e, scfg.cross_domain_fraction, scfg.seed + 17 + e as u64);
        let (ckpt, _) = train_sft(
            cfg,
            &instruct.params,
            &SftRun {
                examples: &data,
                plan: SchedulePlan::constant(scfg.lr_main, scfg.expert_steps.max(1)),
                steps: scfg.expert_steps,
                batch_size: scfg.batch_size,
                seed: scfg.seed + 100 + e as u64,
                l2_to_reference: None,
            },
        )?;
        experts.push(ckpt);
    }

    let expert_accuracy: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| {
            tasks
                .iter()
                .map(|t| accuracy(cfg, &e.params, &t.eval))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    // uniform soup
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let soup = linear_merge(&MergeSpec::uniform(refs.clone())?);
    let soup_accuracy: Vec<f64> = tasks
        .iter()
        .map(|t| accuracy(cfg, &soup.params, &t.eval))
        .collect::<Result<_>>()?;

    // leave-one-out soups
    let mut leave_one_out = Vec::new();
    for e in 0..experts.len() {
        let rest: Vec<&Checkpoint> = experts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != e)
            .map(|(_, c)| c)
            .collect();
        let loo = linear_merge(&MergeSpec::uniform(rest)?);
        leave_one_out.push(
            tasks
                .iter()
                .map(|t| accuracy(cfg, &loo.params, &t.eval))
                .collect::<Result<_>>()?,
        );
    }

    // post-merge low-LR polish on the mixture
    let (polished, _) = train_sft(
        cfg,
        &soup.params,
        &SftRun {
            examples: &mixture,
            plan: SchedulePlan::constant(
                scfg.lr_main / scfg.lr_polish_divisor,
                scfg.polish_steps.max(1),
            ),
            steps: scfg.polish_steps,
            batch_size: scfg.batch_size,
            seed: scfg.seed + 999,
            l2_to_reference: None,
        },
    )?;
    let polished_accuracy: Vec<f64> = tasks
        .iter()
        .map(|t| accuracy(cfg, &polished.params, &t.eval))
        .collect::<Result<_>>()?;

    let preservation = polished_accuracy
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            let expert = expert_accuracy[t][t];
            if expert > 0.0 {
                p / expert
            } else {
                1.0
            }
        })
        .collect();

    Ok(SoupReport {
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        expert_accuracy,
        soup_accuracy,
        polished_accuracy,
        preservation,
        leave_one_out,
        soup,
        polished,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tasks_deterministic_and_disjoint() {
        let a = make_toy_tasks(7);
        let b = make_toy_tasks(7);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.eval, y.eval);
        }
        for t in &a {
            for e in &t.eval {
                assert!(!t.train.contains(e), "task {}: eval leaks into train", t.name);
            }
        }
        // copy and reversal targets never coincide (symbols are distinct)
        let copy = &a[0];
        let rev = &a[1];
        for (c, r) in copy.train.iter().zip(&rev.train) {
            if c.prompt[1..3] == r.prompt[1..3] {
                assert_ne!(c.completion, r.completion);
            }
        }
    }

    #[test]
    fn lookup_oracle_from_one_task_fails_on_another() {
        let tasks = make_toy_tasks(3);
        let copy = &tasks[0];
        let rev = &tasks[1];
        // memorize task A keyed on the payload symbols
        let table: BTreeMap<(usize, usize), Vec<usize>> = copy
            .train
            .iter()
            .chain(&copy.eval)
            .map(|e| ((e.prompt[1], e.prompt[2]), e.completion.clone()))
            .collect();
        let mut hits = 0;
        for e in &rev.eval {
            if table.get(&(e.prompt[1], e.prompt[2])) == Some(&e.completion) {
                hits += 1;
            }
        }
        let rate = hits as f64 / rev.eval.len() as f64;
        assert!(rate <= 1.0 / N_SYMS as f64, "memorizer generalized: {rate}");
    }

    #[test]
    fn lr_schedule_values() {
        let cooldown = preset("cooldown").unwrap().schedule;
        assert_eq!(lr_value(&cooldown, 0).unwrap(), 2.5e-4);
        assert!((lr_value(&cooldown, 50_000).unwrap() - 1e-6).abs() < 1e-18);
        // exact midpoint of a linear ramp: (peak + end) / 2
        assert!((lr_value(&cooldown, 25_000).unwrap() - 1.2550e-4).abs() < 1e-12);
        assert!(lr_value(&cooldown, 50_001).is_err());

        let c = SchedulePlan::constant(3e-4, 10);
        for s in [0, 3, 10] {
            assert_eq!(lr_value(&c, s).unwrap(), 3e-4);
        }

        let cosine = preset("sft-multilingual").unwrap().schedule;
        assert_eq!(lr_value(&cosine, 0).unwrap(), 2.5e-5);
        assert!((lr_value(&cosine, 1000).unwrap() - 1.25e-5).abs() < 1e-20);
        let mid = lr_value(&cosine, 500).unwrap();
        assert!((mid - (1.25e-5 + 2.5e-5) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn preset_constants() {
        let sft = preset("sft-multilingual").unwrap();
        assert_eq!(sft.schedule.peak, 2.5e-5);
        assert_eq!(sft.schedule.end, 1.25e-5);
        assert_eq!(sft.schedule.kind, ScheduleKind::Cosine);
        assert_eq!(sft.schedule.betas, (0.9, 0.95));
        assert_eq!(sft.schedule.weight_decay, 0.1);

        assert_eq!(preset("safety-ipo").unwrap().beta, Some(0.03));
        let code = preset("code-rl").unwrap();
        assert_eq!(code.schedule.kind, ScheduleKind::Constant);
        assert_eq!(code.schedule.peak, 2e-6);
        assert_eq!(code.beta, Some(0.06));

        let rm1 = preset("rm-stage1").unwrap();
        assert_eq!(rm1.schedule.peak, 4e-5);
        assert_eq!(rm1.batch_size, Some(1024));
        assert_eq!(rm1.gold_label, Some(0.999));
        assert_eq!(rm1.tie_label, Some(0.5));
        let rm2 = preset("rm-stage2").unwrap();
        assert_eq!(rm2.schedule.peak, 3e-6);
        assert_eq!(rm2.batch_size, Some(16));

        let polish = preset("polish").unwrap();
        assert_eq!(polish.best_of_n, Some(4));
        assert_eq!(polish.online_k, Some(2));

        assert!(preset("nonsense").is_none());
        for name in PRESET_NAMES {
            assert!(preset(name).is_some(), "{name}");
        }
    }

    #[test]
    fn win_rate_formula() {
        assert_eq!(win_rate(3, 2, 5).unwrap(), 0.4);
        for n in [1, 7, 100] {
            assert_eq!(win_rate(0, n, 0).unwrap(), 0.5);
        }
        assert!(win_rate(0, 0, 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (w, t, l) = (rng.gen_range(0..50u64), rng.gen_range(0..50u64), rng.gen_range(0..50u64));
            if w + t + l == 0 {
                continue;
            }
            let s = win_rate(w, t, l).unwrap() + win_rate(l, t, w).unwrap();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prompt_targets_do_not_affect_sft_loss() {
        let cfg = toy_pipeline_config();
        let params = init_params(&cfg, 11);
        let ex = Example { prompt: vec![2, 6, 7, TOK_SEP], completion: vec![6, 7] };
        let full = ex.full();
        let (targets, mask) = next_token_targets(&full, ex.prompt.len());
        let eval = |targets: &[usize]| {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, false).unwrap();
            let logits = forward_example(&mut g, &bound, &cfg, &full).unwrap();
            let l = sft_loss(&mut g, logits, targets, &mask, SftRegulariser::None).unwrap();
            g.value(l).item()
        };
        let base = eval(&targets);
        let mut scrambled = targets.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                scrambled[i] = (scrambled[i] + 5) % cfg.vocab_size;
            }
        }
        assert_eq!(eval(&scrambled), base);
    }

    #[test]
    fn sft_reduces_loss_and_is_deterministic() {
        let cfg = toy_pipeline_config();
        let tasks = make_toy_tasks(1);
        let init = init_params(&cfg, 5);
        let run = SftRun {
            examples: &tasks[0].train,
            plan: SchedulePlan::constant(3e-3, 40),
            steps: 40,
            batch_size: 4,
            seed: 9,
            l2_to_reference: None,
        };
        let (a, ma) = train_sft(&cfg, &init, &run).unwrap();
        let (b, mb) = train_sft(&cfg, &init, &run).unwrap();
        assert!(ma.loss.last().unwrap() < &ma.loss[0]);
        assert_eq!(ma.loss, mb.loss);
        for (n, t) in &a.params {
            assert_eq!(t.data(), b.params[n].data(), "{n}");
        }
    }

    #[test]
    fn pref_training_separates_pair() {
        let cfg = toy_pipeline_config();
        let init = init_params(&cfg, 6);
        let pair = PrefExample {
            prompt: vec![2, 6, 7, TOK_SEP],
            chosen: vec![6, 7],
            rejected: vec![7, 6],
        };
        let reference = init.clone();
        let run = PrefRun {
            pairs: std::slice::from_ref(&pair),
            kind: PrefKind::Dpo,
            beta: 0.5,
            margin: 0.0,
            plan: SchedulePlan::constant(1e-3, 30),
            steps: 30,
            batch_size: 2,
            seed: 3,
            reference: &reference,
            sft_lambda: 0.0,
            l2_coefficient: 0.0,
        };
        let (ckpt, metrics) = train_pref(&cfg, &init, &run).unwrap();
        assert!(metrics.loss.last().unwrap() < &metrics.loss[0]);
        // the trained policy prefers chosen over rejected
        let d_pi = {
            let c = ref_completion_logprob(&cfg, &ckpt.params, &pair.prompt, &pair.chosen).unwrap();
            let r =
                ref_completion_logprob(&cfg, &ckpt.params, &pair.prompt, &pair.rejected).unwrap();
            c - r
        };
        let d_ref = {
            let c = ref_completion_logprob(&cfg, &reference, &pair.prompt, &pair.chosen).unwrap();
            let r = ref_completion_logprob(&cfg, &reference, &pair.prompt, &pair.rejected).unwrap();
            c - r
        };
        assert!(d_pi > d_ref, "delta_pi {d_pi} <= delta_ref {d_ref}");
    }

    #[test]
    fn sampling_is_seeded_and_greedy_is_stable() {
        let cfg = toy_pipeline_config();
        let params = init_params(&cfg, 8);
        let prompt = [2, 6, 7, TOK_SEP];
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = sample_completion(&cfg, &params, &prompt, 3, 1.0, &mut r1).unwrap();
        let b = sample_completion(&cfg, &params, &prompt, 3, 1.0, &mut r2).unwrap();
        assert_eq!(a, b);
        let g1 = greedy_completion(&cfg, &params, &prompt, 3).unwrap();
        let g2 = greedy_completion(&cfg, &params, &prompt, 3).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn best_of_n_rules() {
        let cfg = toy_pipeline_config();
        let params = init_params(&cfg, 8);
        let prompt = [2, 6, 7, TOK_SEP];
        // n = 1 returns the single sample
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let only = sample_completion(&cfg, &params, &prompt, 2, 1.0, &mut rng).unwrap();
        let (i, c) = best_of_n(&cfg, &params, &prompt, 2, 1, 1.0, 42, |_| 0.0).unwrap();
        assert_eq!((i, c), (0, only));
        // constant scorer: lowest index wins
        let (i, _) = best_of_n(&cfg, &params, &prompt, 2, 4, 1.0, 42, |_| 1.0).unwrap();
        assert_eq!(i, 0);
        // argmax over a known score table
        let scores = [0.1, 0.9, 0.4, 0.2];
        let mut calls = 0;
        let (i, _) = best_of_n(&cfg, &params, &prompt, 2, 4, 1.0, 42, |_| {
            let s = scores[calls.min(3)];
            calls += 1;
            s
        })
        .unwrap();
        assert_eq!(i, 1);
        assert!(best_of_n(&cfg, &params, &prompt, 2, 0, 1.0, 42, |_| 0.0).is_err());
    }

    #[test]
    fn polish_produces_three_phases_for_one_round() {
        let cfg = toy_pipeline_config();
        let tasks = make_toy_tasks(2);
        let init = init_params(&cfg, 12);
        let prompts: Vec<(Vec<usize>, usize)> = tasks[0]
            .train
            .iter()
            .take(3)
            .map(|e| (e.prompt.clone(), e.completion.len()))
            .collect();
        let heldout: Vec<(Vec<usize>, usize)> = tasks[0]
            .eval
            .iter()
            .take(2)
            .map(|e| (e.prompt.clone(), e.completion.len()))
            .collect();
        let task = tasks[0].clone();
        let scorer = move |prompt: &[usize], completion: &[usize]| {
            let want = task
                .train
                .iter()
                .chain(&task.eval)
                .find(|e| e.prompt == prompt)
                .map(|e| e.completion.clone())
                .unwrap_or_default();
            let hits = completion.iter().zip(&want).filter(|(a, b)| a == b).count();
            hits as f64 / want.len().max(1) as f64
        };
        let pcfg = PolishConfig {
            steps_per_phase: 2,
            batch_size: 2,
            ..PolishConfig::default()
        };
        let reports = polish(&cfg, &init, &prompts, &heldout, scorer, &pcfg).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[0].name, "bon-sft");
        assert_eq!(reports[1].name, "offline-pref-0");
        assert_eq!(reports[2].name, "online-copg-0");
        for r in &reports {
            assert!(r.heldout_score.is_finite());
        }
        assert!(polish(
            &cfg,
            &init,
            &prompts,
            &heldout,
            |_: &[usize], _: &[usize]| 0.0,
            &PolishConfig { rounds: 0, ..PolishConfig::default() }
        )
        .is_err());
    }

    #[test]
    fn copg_online_runs_and_is_deterministic() {
        let cfg = toy_pipeline_config();
        let tasks = make_toy_tasks(4);
        let init = init_params(&cfg, 13);
        let prompts: Vec<(Vec<usize>, usize)> = tasks[2]
            .train
            .iter()
            .take(3)
            .map(|e| (e.prompt.clone(), e.completion.len()))
            .collect();
        let reference = init.clone();
        let run = OnlineCopgRun {
            prompts: &prompts,
            k: 2,
            beta: 0.06,
            temperature: 1.0,
            plan: SchedulePlan::constant(1e-3, 3),
            steps: 3,
            batch_size: 2,
            seed: 21,
            reference: &reference,
            l2_coefficient: 0.0,
        };
        let scorer = |_: &[usize], c: &[usize]| c.iter().sum::<usize>() as f64 / 100.0;
        let (a, ma) = train_copg_online(&cfg, &init, &run, scorer).unwrap();
        let (b, mb) = train_copg_online(&cfg, &init, &run, scorer).unwrap();
        assert_eq!(ma.loss, mb.loss);
        for (n, t) in &a.params {
            assert_eq!(t.data(), b.params[n].data(), "{n}");
        }
    }
}
