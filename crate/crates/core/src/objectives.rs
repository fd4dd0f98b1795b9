//! The training-loss family: masked SFT cross-entropy with regularisers,
//! DPO/IPO/SLiC pairwise preference losses, the CoPG squared-difference
//! loss over calibrated rewards, Bradley-Terry reward-model loss with soft
//! labels, the KL-regularised RL objective and its closed-form optimum, and
//! the hybrid loss combination.
//!
//! Each loss comes in a graph-building form (differentiable end to end) and,
//! where useful, a plain-scalar form.

use thiserror::Error;

use crate::tensor::{Graph, TensorError, TensorId};

/// Soft label for gold-standard preference pairs.
pub const GOLD_LABEL: f64 = 0.999;
/// Soft label for gold-standard tied pairs.
pub const TIE_LABEL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("soft label {0} outside [0, 1]")]
    BadSoftLabel(f64),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("margin must be nonnegative, got {0}")]
    BadMargin(f64),
    #[error("need at least {need} completions, got {got}")]
    TooFewCompletions { need: usize, got: usize },
    #[error("lambda must be nonnegative, got {0}")]
    BadLambda(f64),
    #[error("empty completion")]
    EmptyCompletion,
    #[error("reference mass is zero where policy mass is positive (index {0})")]
    SupportViolation(usize),
    #[error("row is not a probability simplex")]
    NotSimplex,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrefKind {
    Dpo,
    Ipo,
    Slic,
}

/// Regulariser attached to the SFT loss.
pub enum SftRegulariser<'a> {
    None,
    /// Add `fraction` times the cross-entropy of a pretraining batch.
    PretrainMix { fraction: f64, logits: TensorId, targets: &'a [usize] },
    /// coefficient * sum over params of (theta - theta_ref)^2.
    L2ToReference { coefficient: f64, params: Vec<TensorId>, reference: Vec<TensorId> },
}

/// Mean cross-entropy over completion tokens (prompt positions carry weight
/// zero), plus the selected regulariser.
pub fn sft_loss(
    g: &mut Graph,
    logits: TensorId,
    targets: &[usize],
    prompt_mask: &[bool],
    regulariser: SftRegulariser,
) -> Result<TensorId> {
    let weights: Vec<f64> = prompt_mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let ce = g.cross_entropy(logits, targets, &weights)?;
    match regulariser {
        SftRegulariser::None => Ok(ce),
        SftRegulariser::PretrainMix { fraction, logits, targets } => {
            let w = vec![1.0; targets.len()];
            let pt = g.cross_entropy(logits, targets, &w)?;
            let scaled = g.scale(pt, fraction)?;
            Ok(g.add(ce, scaled)?)
        }
        SftRegulariser::L2ToReference { coefficient, params, reference } => {
            let mut total = ce;
            for (&p, &r) in params.iter().zip(&reference) {
                let diff = g.sub(p, r)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum(sq);
                let scaled = g.scale(s, coefficient)?;
                total = g.add(total, scaled)?;
            }
            Ok(total)
        }
    }
}

/// Pairwise preference loss on graph scalars. `delta_pi` and `delta_ref` are
/// logpi(y_w) - logpi(y_l) under the policy and reference respectively.
///
///   dpo  = -log sigmoid(beta * (delta_pi - delta_ref))
///   ipo  = (delta_pi - delta_ref - 1/(2 beta))^2
///   slic = max(0, margin - (delta_pi - delta_ref))
pub fn pref_pair_loss(
    g: &mut Graph,
    kind: PrefKind,
    delta_pi: TensorId,
    delta_ref: TensorId,
    beta: f64,
    margin: f64,
) -> Result<TensorId> {
    let gap = g.sub(delta_pi, delta_ref)?;
    match kind {
        PrefKind::Dpo => {
            if beta <= 0.0 {
                return Err(ObjectiveError::BadBeta(beta));
            }
            let scaled = g.scale(gap, beta)?;
            let sig = g.sigmoid(scaled);
            let l = g.log(sig);
            Ok(g.scale(l, -1.0)?)
        }
        PrefKind::Ipo => {
            if beta <= 0.0 {
                return Err(ObjectiveError::BadBeta(beta));
            }
            let target = g.scalar(1.0 / (2.0 * beta));
            let diff = g.sub(gap, target)?;
            Ok(g.mul(diff, diff)?)
        }
        PrefKind::Slic => {
            if margin < 0.0 {
                return Err(ObjectiveError::BadMargin(margin));
            }
            let m = g.scalar(margin);
            let hinge_arg = g.sub(m, gap)?;
            Ok(g.relu(hinge_arg))
        }
    }
}

/// Scalar convenience wrapper around [`pref_pair_loss`].
pub fn pref_pair_loss_value(
    kind: PrefKind,
    delta_pi: f64,
    delta_ref: f64,
    beta: f64,
    margin: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let dp = g.scalar(delta_pi);
    let dr = g.scalar(delta_ref);
    let l = pref_pair_loss(&mut g, kind, dp, dr, beta, margin)?;
    Ok(g.value(l).item())
}

/// Completions of one prompt with rewards and both log-probabilities.
/// Policy log-probs are graph scalars so the loss stays differentiable.
pub struct CompletionBatch<'a> {
    pub rewards: &'a [f64],
    pub policy_logps: &'a [TensorId],
    pub reference_logps: &'a [f64],
    pub beta: f64,
}

/// CoPG loss: (1/(k-1)) * sum_{i>j} (Rb_i - Rb_j)^2 with
/// Rb(x,y) = R(x,y) - beta * (log pi(y|x) - log pi_ref(y|x)).
pub fn copg_loss(g: &mut Graph, batch: &CompletionBatch) -> Result<TensorId> {
    let k = batch.rewards.len();
    if k < 2 {
        return Err(ObjectiveError::TooFewCompletions { need: 2, got: k });
    }
    if batch.beta < 0.0 {
        return Err(ObjectiveError::BadBeta(batch.beta));
    }
    assert_eq!(batch.policy_logps.len(), k);
    assert_eq!(batch.reference_logps.len(), k);
    let calibrated: Vec<TensorId> = (0..k)
        .map(|i| -> Result<TensorId> {
            let r = g.scalar(batch.rewards[i]);
            let lref = g.scalar(batch.reference_logps[i]);
            let ratio = g.sub(batch.policy_logps[i], lref)?;
            let scaled = g.scale(ratio, batch.beta)?;
            Ok(g.sub(r, scaled)?)
        })
        .collect::<Result<_>>()?;
    let mut total: Option<TensorId> = None;
    for i in 0..k {
        for j in 0..i {
            let d = g.sub(calibrated[i], calibrated[j])?;
            let sq = g.mul(d, d)?;
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
        }
    }
    let t = total.expect("k >= 2");
    Ok(g.scale(t, 1.0 / (k as f64 - 1.0))?)
}

/// Scalar CoPG evaluation for fixed log-probabilities.
pub fn copg_loss_value(
    rewards: &[f64],
    policy_logps: &[f64],
    reference_logps: &[f64],
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = policy_logps.iter().map(|&v| g.scalar(v)).collect();
    let batch = CompletionBatch {
        rewards,
        policy_logps: &ids,
        reference_logps,
        beta,
    };
    let l = copg_loss(&mut g, &batch)?;
    Ok(g.value(l).item())
}

/// Bradley-Terry reward-model cross-entropy with a soft label:
/// -[s log sigmoid(rc - rr) + (1-s) log sigmoid(rr - rc)].
pub fn bt_rm_loss(
    g: &mut Graph,
    r_chosen: TensorId,
    r_rejected: TensorId,
    soft_label: f64,
) -> Result<TensorId> {
    if !(0.0..=1.0).contains(&soft_label) {
        return Err(ObjectiveError::BadSoftLabel(soft_label));
    }
    let d = g.sub(r_chosen, r_rejected)?;
    let s1 = g.sigmoid(d);
    let l1 = g.log(s1);
    let nd = g.scale(d, -1.0)?;
    let s2 = g.sigmoid(nd);
    let l2 = g.log(s2);
    let t1 = g.scale(l1, -soft_label)?;
    let t2 = g.scale(l2, -(1.0 - soft_label))?;
    Ok(g.add(t1, t2)?)
}

pub fn bt_rm_loss_value(r_chosen: f64, r_rejected: f64, soft_label: f64) -> Result<f64> {
    let mut g = Graph::new();
    let rc = g.scalar(r_chosen);
    let rr = g.scalar(r_rejected);
    let l = bt_rm_loss(&mut g, rc, rr, soft_label)?;
    Ok(g.value(l).item())
}

fn check_simplex(row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::NotSimplex);
    }
    Ok(())
}

/// Exact KL-regularised objective J = E_pi[R] - beta * KL(pi || pi_ref),
/// computed by enumeration over a tabular action space.
pub fn kl_reg_objective(
    policy: &[f64],
    reference: &[f64],
    rewards: &[f64],
    beta: f64,
) -> Result<f64> {
    check_simplex(policy)?;
    check_simplex(reference)?;
    let mut value = 0.0;
    for i in 0..policy.len() {
        if policy[i] > 0.0 {
            if reference[i] <= 0.0 {
                return Err(ObjectiveError::SupportViolation(i));
            }
            value += policy[i] * (rewards[i] - beta * (policy[i] / reference[i]).ln());
        }
    }
    Ok(value)
}

/// Closed-form maximizer: pi*(y) proportional to pi_ref(y) * exp(R(y)/beta).
pub fn optimal_policy(reference: &[f64], rewards: &[f64], beta: f64) -> Result<Vec<f64>> {
    if beta <= 0.0 {
        return Err(ObjectiveError::BadBeta(beta));
    }
    check_simplex(reference)?;
    // subtract the max for stability; it cancels in the normalization
    let mx = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = reference
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| p * ((r - mx) / beta).exp())
        .collect();
    let z: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|v| v / z).collect())
}

/// pref + lambda * sft; lambda = 1 is the equal-weight preset.
pub fn combined_loss(
    g: &mut Graph,
    pref_loss: TensorId,
    sft_loss: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if lambda < 0.0 {
        return Err(ObjectiveError::BadLambda(lambda));
    }
    let scaled = g.scale(sft_loss, lambda)?;
    Ok(g.add(pref_loss, scaled)?)
}

/// Sum of per-token log-probabilities, optionally divided by token count.
pub fn sequence_logprob(token_logps: &[f64], length_normalized: bool) -> Result<f64> {
    if token_logps.is_empty() {
        return Err(ObjectiveError::EmptyCompletion);
    }
    let s: f64 = token_logps.iter().sum();
    Ok(if length_normalized {
        s / token_logps.len() as f64
    } else {
        s
    })
}
