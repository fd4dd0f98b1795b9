//! Exact tabular bench: tiny prompt/completion spaces where every
//! expectation, KL divergence, and optimum is computable by enumeration.
//! This is where the optimality claims of the loss family become tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("row {0} is not a probability simplex")]
    NotSimplex(usize),
    #[error("preference matrix violates P[i][j] + P[j][i] = 1 at ({0}, {1})")]
    BadPreference(usize, usize),
    #[error("reference mass is zero where policy mass is positive (prompt {prompt}, completion {completion})")]
    SupportViolation { prompt: usize, completion: usize },
    #[error("non-finite objective at step {0}")]
    NonFinite(usize),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("batch needs at least 2 completions, got {0}")]
    TooFewCompletions(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TabularError>;

/// Row-stochastic policy over `n_completions` per prompt, parameterized by
/// unconstrained logits (probs = row softmax).
#[derive(Debug, Clone)]
pub struct PolicyTable {
    pub n_prompts: usize,
    pub n_completions: usize,
    pub logits: Vec<f64>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl PolicyTable {
    pub fn uniform(n_prompts: usize, n_completions: usize) -> Self {
        PolicyTable { n_prompts, n_completions, logits: vec![0.0; n_prompts * n_completions] }
    }

    pub fn from_probs(n_prompts: usize, n_completions: usize, probs: &[f64]) -> Result<Self> {
        assert_eq!(probs.len(), n_prompts * n_completions);
        for r in 0..n_prompts {
            let row = &probs[r * n_completions..(r + 1) * n_completions];
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(TabularError::NotSimplex(r));
            }
        }
        Ok(PolicyTable {
            n_prompts,
            n_completions,
            logits: probs.iter().map(|&p| p.max(1e-300).ln()).collect(),
        })
    }

    pub fn probs_row(&self, prompt: usize) -> Vec<f64> {
        softmax_row(&self.logits[prompt * self.n_completions..(prompt + 1) * self.n_completions])
    }

    pub fn probs(&self) -> Vec<f64> {
        (0..self.n_prompts).flat_map(|r| self.probs_row(r)).collect()
    }
}

/// Refinement policy: distribution over y2 conditioned on (prompt, y1).
#[derive(Debug, Clone)]
pub struct ConditionalPolicyTable {
    pub n_prompts: usize,
    pub n_completions: usize,
    /// logits[(x * k + y1) * k + y2]
    pub logits: Vec<f64>,
}

impl ConditionalPolicyTable {
    pub fn uniform(n_prompts: usize, n_completions: usize) -> Self {
        let k = n_completions;
        ConditionalPolicyTable { n_prompts, n_completions, logits: vec![0.0; n_prompts * k * k] }
    }

    pub fn probs_row(&self, prompt: usize, prior: usize) -> Vec<f64> {
        let k = self.n_completions;
        softmax_row(&self.logits[(prompt * k + prior) * k..(prompt * k + prior + 1) * k])
    }
}

/// Pairwise preference probabilities per prompt: P[i][j] = P(y_i beats y_j).
#[derive(Debug, Clone)]
pub struct PreferenceOracle {
    pub n_prompts: usize,
    pub n_completions: usize,
    /// p[(x * k + i) * k + j]
    p: Vec<f64>,
}

impl PreferenceOracle {
    pub fn new(n_prompts: usize, n_completions: usize, p: Vec<f64>) -> Result<Self> {
        let k = n_completions;
        assert_eq!(p.len(), n_prompts * k * k);
        for x in 0..n_prompts {
            for i in 0..k {
                for j in 0..k {
                    let a = p[(x * k + i) * k + j];
                    let b = p[(x * k + j) * k + i];
                    if (a + b - 1.0).abs() > 1e-12 || !(0.0..=1.0).contains(&a) {
                        return Err(TabularError::BadPreference(i, j));
                    }
                }
                if (p[(x * k + i) * k + i] - 0.5).abs() > 1e-12 {
                    return Err(TabularError::BadPreference(i, i));
                }
            }
        }
        Ok(PreferenceOracle { n_prompts, n_completions, p })
    }

    /// Indifferent oracle: P = 0.5 everywhere.
    pub fn indifferent(n_prompts: usize, n_completions: usize) -> Self {
        let k = n_completions;
        PreferenceOracle { n_prompts, n_completions, p: vec![0.5; n_prompts * k * k] }
    }

    /// Random valid oracle.
    pub fn random(n_prompts: usize, n_completions: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = n_completions;
        let mut p = vec![0.5; n_prompts * k * k];
        for x in 0..n_prompts {
            for i in 0..k {
                for j in 0..i {
                    let v = rng.gen_range(0.0..1.0);
                    p[(x * k + i) * k + j] = v;
                    p[(x * k + j) * k + i] = 1.0 - v;
                }
            }
        }
        PreferenceOracle { n_prompts, n_completions, p }
    }

    pub fn beats(&self, prompt: usize, winner: usize, loser: usize) -> f64 {
        let k = self.n_completions;
        self.p[(prompt * k + winner) * k + loser]
    }
}

/// Exact KL divergence between two simplex rows; 0 * ln 0 = 0.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(TabularError::SupportViolation { prompt: 0, completion: i });
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Total variation distance between simplex rows.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
}

/// Max over prompts of the row TV distance.
pub fn max_row_tv(a: &PolicyTable, b: &PolicyTable) -> f64 {
    (0..a.n_prompts)
        .map(|x| total_variation(&a.probs_row(x), &b.probs_row(x)))
        .fold(0.0, f64::max)
}

/// Exact enumeration of the self-refinement min-max objective:
/// E_x E_{y1~pi, y2~pid(.|x,y1)} [ P(y2 beats y1) - beta KL(pid || ref | x,y1)
/// + beta KL(pi || ref | x) ]. The refiner row is compared against the
/// prompt's (unconditional) reference row.
pub fn srpo_objective(
    pi: &PolicyTable,
    pid: &ConditionalPolicyTable,
    pref: &PreferenceOracle,
    reference: &PolicyTable,
    beta: f64,
    prompt_weights: &[f64],
) -> Result<f64> {
    let k = pi.n_completions;
    let mut value = 0.0;
    for x in 0..pi.n_prompts {
        let p_x = pi.probs_row(x);
        let ref_x = reference.probs_row(x);
        let kl_pi = exact_kl(&p_x, &ref_x).map_err(|_| TabularError::SupportViolation {
            prompt: x,
            completion: 0,
        })?;
        let mut inner = 0.0;
        for y1 in 0..k {
            let d_row = pid.probs_row(x, y1);
            let kl_d = exact_kl(&d_row, &ref_x)?;
            let mut e_pref = 0.0;
            for (y2, &dp) in d_row.iter().enumerate() {
                e_pref += dp * pref.beats(x, y2, y1);
            }
            inner += p_x[y1] * (e_pref - beta * kl_d);
        }
        value += prompt_weights[x] * (inner + beta * kl_pi);
    }
    Ok(value)
}

/// Monte-Carlo estimate of [`srpo_objective`]; returns (mean, standard error).
pub fn srpo_objective_mc(
    pi: &PolicyTable,
    pid: &ConditionalPolicyTable,
    pref: &PreferenceOracle,
    reference: &PolicyTable,
    beta: f64,
    prompt_weights: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..samples {
        let x = sample_index(prompt_weights, &mut rng);
        let p_x = pi.probs_row(x);
        let ref_x = reference.probs_row(x);
        let y1 = sample_index(&p_x, &mut rng);
        let d_row = pid.probs_row(x, y1);
        let y2 = sample_index(&d_row, &mut rng);
        let v = pref.beats(x, y2, y1) - beta * exact_kl(&d_row, &ref_x)?
            + beta * exact_kl(&p_x, &ref_x)?;
        sum += v;
        sumsq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Result of an alternating-gradient solve.
pub struct SrpoSolution {
    pub pi: PolicyTable,
    pub pid: ConditionalPolicyTable,
    pub objective: f64,
    pub grad_norm_pi: f64,
    pub grad_norm_pid: f64,
}

/// Builds the enumeration objective on a graph so both players share one
/// source of gradients.
fn srpo_objective_graph(
    g: &mut Graph,
    pi_logits: TensorId,
    pid_logits: &[TensorId],
    pref: &PreferenceOracle,
    reference: &PolicyTable,
    beta: f64,
    prompt_weights: &[f64],
) -> Result<TensorId> {
    let k = reference.n_completions;
    let ones_col = g.constant(Tensor::new(vec![k, 1], vec![1.0; k]).unwrap());
    let mut total: Option<TensorId> = None;
    for x in 0..reference.n_prompts {
        let ref_x = reference.probs_row(x);
        let log_ref = g.constant(
            Tensor::new(vec![k], ref_x.iter().map(|&p| p.ln()).collect()).unwrap(),
        );
        // pi row: [1, k]
        let row_logits = g.slice(pi_logits, 0, x, x + 1)?;
        let pi_row = g.softmax_lastdim(row_logits)?;
        let log_pi = g.log(pi_row);
        let diff = g.sub(log_pi, log_ref)?;
        let wk = g.mul(pi_row, diff)?;
        let kl_pi = g.sum(wk);

        // refiner matrix for this prompt: [k, k], row y1 -> dist over y2
        let pid_probs = g.softmax_lastdim(pid_logits[x])?;
        let log_pid = g.log(pid_probs);
        let d = g.sub(log_pid, log_ref)?; // log_ref broadcasts along rows
        let wkl = g.mul(pid_probs, d)?;
        let kl_rows = g.matmul(wkl, ones_col)?; // [k, 1]

        // preference matrix M[y1][y2] = P(y2 beats y1)
        let mut m = vec![0.0; k * k];
        for y1 in 0..k {
            for y2 in 0..k {
                m[y1 * k + y2] = pref.beats(x, y2, y1);
            }
        }
        let m = g.constant(Tensor::new(vec![k, k], m).unwrap());
        let pm = g.mul(pid_probs, m)?;
        let pref_rows = g.matmul(pm, ones_col)?; // [k, 1]

        let scaled_kl = g.scale(kl_rows, beta)?;
        let inner = g.sub(pref_rows, scaled_kl)?; // [k, 1]
        let weighted = g.matmul(pi_row, inner)?; // [1, 1]
        let kl_term = g.scale(kl_pi, beta)?;
        let term = g.add(weighted, kl_term)?;
        let wterm = g.scale(term, prompt_weights[x])?;
        total = Some(match total {
            Some(t) => g.add(t, wterm)?,
            None => wterm,
        });
    }
    Ok(total.expect("at least one prompt"))
}

/// Alternating gradient descent (pi, minimizing) / ascent (refiner,
/// maximizing) on the enumeration objective. Deterministic: both players
/// start from the reference logits.
pub fn srpo_solve(
    pref: &PreferenceOracle,
    reference: &PolicyTable,
    beta: f64,
    steps: usize,
    lr: f64,
) -> Result<SrpoSolution> {
    if beta <= 0.0 {
        return Err(TabularError::BadBeta(beta));
    }
    let (n, k) = (reference.n_prompts, reference.n_completions);
    let weights = vec![1.0 / n as f64; n];
    let mut pi = PolicyTable {
        n_prompts: n,
        n_completions: k,
        logits: reference.logits.clone(),
    };
    let mut pid = ConditionalPolicyTable::uniform(n, k);
    for x in 0..n {
        for y1 in 0..k {
            for y2 in 0..k {
                pid.logits[(x * k + y1) * k + y2] = reference.logits[x * k + y2];
            }
        }
    }

    let mut objective = 0.0;
    let mut gn_pi = 0.0;
    let mut gn_pid = 0.0;
    for step in 0..steps {
        let mut g = Graph::new();
        let pi_id = g.leaf(Tensor::new(vec![n, k], pi.logits.clone()).unwrap(), true);
        let pid_ids: Vec<TensorId> = (0..n)
            .map(|x| {
                g.leaf(
                    Tensor::new(vec![k, k], pid.logits[x * k * k..(x + 1) * k * k].to_vec())
                        .unwrap(),
                    true,
                )
            })
            .collect();
        let obj = srpo_objective_graph(&mut g, pi_id, &pid_ids, pref, reference, beta, &weights)?;
        objective = g.value(obj).item();
        if !objective.is_finite() {
            return Err(TabularError::NonFinite(step));
        }
        let grads = g.backward(obj)?;
        let gpi = grads.get_or_zeros(pi_id, &[n, k]);
        gn_pi = gpi.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for (l, gv) in pi.logits.iter_mut().zip(gpi.data()) {
            *l -= lr * gv; // pi minimizes
        }
        gn_pid = 0.0;
        for (x, &id) in pid_ids.iter().enumerate() {
            let gp = grads.get_or_zeros(id, &[k, k]);
            gn_pid += gp.data().iter().map(|v| v * v).sum::<f64>();
            for (l, gv) in pid.logits[x * k * k..(x + 1) * k * k]
                .iter_mut()
                .zip(gp.data())
            {
                *l += lr * gv; // refiner maximizes
            }
        }
        gn_pid = gn_pid.sqrt();
    }
    Ok(SrpoSolution { pi, pid, objective, grad_norm_pi: gn_pi, grad_norm_pid: gn_pid })
}

/// Seeded sampling chain y0 ~ pi, y_{t+1} ~ pid(.|x, y_t).
pub fn self_refine(
    prompt: usize,
    pi: &PolicyTable,
    pid: &ConditionalPolicyTable,
    n_steps: usize,
    rng_seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chain = Vec::with_capacity(n_steps + 1);
    let mut cur = sample_index(&pi.probs_row(prompt), &mut rng);
    chain.push(cur);
    for _ in 0..n_steps {
        cur = sample_index(&pid.probs_row(prompt, cur), &mut rng);
        chain.push(cur);
    }
    chain
}

/// One offline CoPG training example: a prompt, the completion indices that
/// were sampled for it, and their rewards.
#[derive(Debug, Clone)]
pub struct OfflineBatch {
    pub prompt: usize,
    pub completions: Vec<usize>,
    pub rewards: Vec<f64>,
}

pub struct CopgRun {
    pub policy: PolicyTable,
    pub loss_trace: Vec<f64>,
    /// (prompt, completion) pairs never seen in any batch; optimality is not
    /// guaranteed for them.
    pub uncovered: Vec<(usize, usize)>,
}

/// Gradient descent on the CoPG loss summed over a fixed dataset.
pub fn train_copg_offline(
    dataset: &[OfflineBatch],
    reference: &PolicyTable,
    beta: f64,
    steps: usize,
    lr: f64,
) -> Result<CopgRun> {
    let (n, k) = (reference.n_prompts, reference.n_completions);
    for b in dataset {
        if b.completions.len() < 2 {
            return Err(TabularError::TooFewCompletions(b.completions.len()));
        }
    }
    let mut covered = vec![false; n * k];
    for b in dataset {
        for &c in &b.completions {
            covered[b.prompt * k + c] = true;
        }
    }
    let uncovered: Vec<(usize, usize)> = (0..n * k)
        .filter(|&i| !covered[i])
        .map(|i| (i / k, i % k))
        .collect();

    let ref_logps: Vec<Vec<f64>> = (0..n)
        .map(|x| reference.probs_row(x).iter().map(|&p| p.ln()).collect())
        .collect();

    let mut policy = PolicyTable {
        n_prompts: n,
        n_completions: k,
        logits: reference.logits.clone(),
    };
    let mut loss_trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![n, k], policy.logits.clone()).unwrap(), true);
        let mut total: Option<TensorId> = None;
        for b in dataset {
            let row = g.slice(logits, 0, b.prompt, b.prompt + 1)?;
            let probs = g.softmax_lastdim(row)?;
            let logp = g.log(probs);
            let policy_logps: Vec<TensorId> = b
                .completions
                .iter()
                .map(|&c| g.slice(logp, 1, c, c + 1))
                .collect::<std::result::Result<_, _>>()?;
            let reference_logps: Vec<f64> = b
                .completions
                .iter()
                .map(|&c| ref_logps[b.prompt][c])
                .collect();
            let batch = crate::objectives::CompletionBatch {
                rewards: &b.rewards,
                policy_logps: &policy_logps,
                reference_logps: &reference_logps,
                beta,
            };
            let l = crate::objectives::copg_loss(&mut g, &batch)
                .map_err(|e| TensorError::Invalid(e.to_string()))?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = total.expect("non-empty dataset");
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(TabularError::NonFinite(step));
        }
        loss_trace.push(lv);
        let grads = g.backward(loss)?;
        let gl = grads.get_or_zeros(logits, &[n, k]);
        for (l, gv) in policy.logits.iter_mut().zip(gl.data()) {
            *l -= lr * gv;
        }
    }
    Ok(CopgRun { policy, loss_trace, uncovered })
}

/// REINFORCE leave-one-out estimator of the policy-gradient (ascent)
/// direction w.r.t. the prompt's logits, for on-policy samples.
pub fn rloo_gradient(
    policy_row: &[f64],
    completions: &[usize],
    rewards: &[f64],
) -> Result<Vec<f64>> {
    let k = completions.len();
    if k < 2 {
        return Err(TabularError::TooFewCompletions(k));
    }
    let sum: f64 = rewards.iter().sum();
    let mut grad = vec![0.0; policy_row.len()];
    for (i, (&c, &r)) in completions.iter().zip(rewards).enumerate() {
        let baseline = (sum - r) / (k as f64 - 1.0);
        let adv = r - baseline;
        // grad log pi(c) wrt logits = e_c - pi
        for (j, gv) in grad.iter_mut().enumerate() {
            let indicator = if j == c { 1.0 } else { 0.0 };
            *gv += adv * (indicator - policy_row[j]);
        }
        let _ = i;
    }
    for gv in &mut grad {
        *gv /= k as f64;
    }
    Ok(grad)
}

/// Leave-one-out advantages (R_i - mean of the others).
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(TabularError::TooFewCompletions(k));
    }
    let sum: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|&r| r - (sum - r) / (k as f64 - 1.0))
        .collect())
}

/// Cosine similarity between the (descent-negated) CoPG gradient and the
/// RLOO ascent estimator for an on-policy batch; reported, not asserted.
pub fn copg_rloo_cosine(
    policy: &PolicyTable,
    prompt: usize,
    completions: &[usize],
    rewards: &[f64],
    beta: f64,
) -> Result<f64> {
    let k_table = policy.n_completions;
    let mut g = Graph::new();
    let row = policy.logits[prompt * k_table..(prompt + 1) * k_table].to_vec();
    let logits = g.leaf(Tensor::new(vec![1, k_table], row).unwrap(), true);
    let probs = g.softmax_lastdim(logits)?;
    let logp = g.log(probs);
    let policy_logps: Vec<TensorId> = completions
        .iter()
        .map(|&c| g.slice(logp, 1, c, c + 1))
        .collect::<std::result::Result<_, _>>()?;
    let probs_row = policy.probs_row(prompt);
    let reference_logps: Vec<f64> = completions.iter().map(|&c| probs_row[c].ln()).collect();
    let batch = crate::objectives::CompletionBatch {
        rewards,
        policy_logps: &policy_logps,
        reference_logps: &reference_logps,
        beta,
    };
    let loss = crate::objectives::copg_loss(&mut g, &batch)
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    let grads = g.backward(loss)?;
    let copg_grad = grads.get_or_zeros(logits, &[1, k_table]);
    let ascent: Vec<f64> = copg_grad.data().iter().map(|v| -v).collect();
    let rloo = rloo_gradient(&probs_row, completions, rewards)?;
    let dot: f64 = ascent.iter().zip(&rloo).map(|(a, b)| a * b).sum();
    let na: f64 = ascent.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = rloo.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}
