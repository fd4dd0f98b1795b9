//! Checkpoint algebra: linear merges and their composition, trajectory
//! averaging, interpolation toward a parent, leave-one-out diagnostics,
//! local weight-perturbation search, and selective embedding-row merges.
//!
//! Merge weights must sum to 1 (within 1e-12). Specs are validated, never
//! silently renormalized.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::ParamMap;
use crate::tensor::Tensor;

pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("merge weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("{inputs} inputs but {weights} weights")]
    LengthMismatch { inputs: usize, weights: usize },
    #[error("empty merge")]
    Empty,
    #[error("parameter schema mismatch at input {input}: {detail}")]
    SchemaMismatch { input: usize, detail: String },
    #[error("interpolation factor {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("cannot exclude index {excluded} from {n} experts")]
    BadExclusion { excluded: usize, n: usize },
    #[error("perturbation step must be positive, got {0}")]
    BadStep(f64),
    #[error("checkpoint has no {0:?} parameter")]
    MissingParam(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
}

pub type Result<T> = std::result::Result<T, MergeError>;

/// Immutable bundle of named parameters plus provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamMap,
    pub provenance: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(params: ParamMap, provenance: impl Into<String>, step: u64) -> Self {
        Checkpoint { params, provenance: provenance.into(), step }
    }

    fn schema(&self) -> Vec<(&str, &[usize])> {
        self.params
            .iter()
            .map(|(n, t)| (n.as_str(), t.shape()))
            .collect()
    }
}

/// A single-level merge: inputs and matching weights.
#[derive(Debug)]
pub struct MergeSpec<'a> {
    inputs: Vec<&'a Checkpoint>,
    weights: Vec<f64>,
}

impl<'a> MergeSpec<'a> {
    pub fn new(inputs: Vec<&'a Checkpoint>, weights: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(MergeError::Empty);
        }
        if inputs.len() != weights.len() {
            return Err(MergeError::LengthMismatch { inputs: inputs.len(), weights: weights.len() });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MergeError::WeightSum(sum));
        }
        let schema = inputs[0].schema();
        for (i, ckpt) in inputs.iter().enumerate().skip(1) {
            if ckpt.schema() != schema {
                let detail = diff_schema(inputs[0], ckpt);
                return Err(MergeError::SchemaMismatch { input: i, detail });
            }
        }
        Ok(MergeSpec { inputs, weights })
    }

    pub fn uniform(inputs: Vec<&'a Checkpoint>) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(MergeError::Empty);
        }
        let w = make_uniform_weights(n);
        MergeSpec::new(inputs, w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn inputs(&self) -> &[&'a Checkpoint] {
        &self.inputs
    }
}

/// Uniform weights that sum to exactly 1.0 (the last entry absorbs rounding).
pub fn make_uniform_weights(n: usize) -> Vec<f64> {
    let mut w = vec![1.0 / n as f64; n];
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - head;
    w
}

fn diff_schema(a: &Checkpoint, b: &Checkpoint) -> String {
    for (name, t) in &a.params {
        match b.params.get(name) {
            None => return format!("missing parameter {name}"),
            Some(u) if u.shape() != t.shape() => {
                return format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    u.shape(),
                    t.shape()
                )
            }
            _ => {}
        }
    }
    for name in b.params.keys() {
        if !a.params.contains_key(name) {
            return format!("unexpected parameter {name}");
        }
    }
    "schemas differ".into()
}

/// theta_merged[name] = sum_i w_i * theta_i[name].
pub fn linear_merge(spec: &MergeSpec) -> Checkpoint {
    let mut params: ParamMap = BTreeMap::new();
    for (name, first) in &spec.inputs[0].params {
        let mut acc = vec![0.0; first.data().len()];
        for (ckpt, &w) in spec.inputs.iter().zip(&spec.weights) {
            for (a, &v) in acc.iter_mut().zip(ckpt.params[name].data()) {
                *a += w * v;
            }
        }
        params.insert(name.clone(), Tensor::new(first.shape().to_vec(), acc).unwrap());
    }
    let provenance = format!(
        "merge[{}]",
        spec.inputs
            .iter()
            .zip(&spec.weights)
            .map(|(c, w)| format!("{}:{w}", c.provenance))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let step = spec.inputs.iter().map(|c| c.step).max().unwrap_or(0);
    Checkpoint { params, provenance, step }
}

/// A merge-of-merges tree. Leaves reference checkpoints; interior nodes carry
/// child weights.
pub enum MergeTree<'a> {
    Leaf(&'a Checkpoint),
    Node { children: Vec<MergeTree<'a>>, weights: Vec<f64> },
}

/// Flattens a tree into a single-level spec whose weights are products along
/// root-to-leaf paths. Evaluating the flat spec equals evaluating the tree.
pub fn compose_merge<'a>(tree: &MergeTree<'a>) -> Result<MergeSpec<'a>> {
    let mut inputs = Vec::new();
    let mut weights = Vec::new();
    flatten(tree, 1.0, &mut inputs, &mut weights)?;
    // the path-product weights of a valid tree sum to 1 exactly up to
    // rounding; build the spec through the validating constructor anyway
    MergeSpec::new(inputs, weights)
}

fn flatten<'a>(
    tree: &MergeTree<'a>,
    scale: f64,
    inputs: &mut Vec<&'a Checkpoint>,
    weights: &mut Vec<f64>,
) -> Result<()> {
    match tree {
        MergeTree::Leaf(c) => {
            inputs.push(c);
            weights.push(scale);
            Ok(())
        }
        MergeTree::Node { children, weights: w } => {
            if children.is_empty() {
                return Err(MergeError::Empty);
            }
            if children.len() != w.len() {
                return Err(MergeError::LengthMismatch {
                    inputs: children.len(),
                    weights: w.len(),
                });
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(MergeError::WeightSum(sum));
            }
            for (child, &cw) in children.iter().zip(w) {
                flatten(child, scale * cw, inputs, weights)?;
            }
            Ok(())
        }
    }
}

/// Evaluates a tree bottom-up, materializing every interior merge.
pub fn eval_merge_tree(tree: &MergeTree) -> Result<Checkpoint> {
    match tree {
        MergeTree::Leaf(c) => Ok((*c).clone()),
        MergeTree::Node { children, weights } => {
            let evaluated: Vec<Checkpoint> = children
                .iter()
                .map(eval_merge_tree)
                .collect::<Result<_>>()?;
            let refs: Vec<&Checkpoint> = evaluated.iter().collect();
            let spec = MergeSpec::new(refs, weights.clone())?;
            Ok(linear_merge(&spec))
        }
    }
}

/// Uniform average over a training trajectory.
pub fn polyak_average(trajectory: &[&Checkpoint]) -> Result<Checkpoint> {
    let spec = MergeSpec::uniform(trajectory.to_vec())?;
    Ok(linear_merge(&spec))
}

/// alpha * child + (1 - alpha) * parent.
pub fn interpolate_to_parent(
    child: &Checkpoint,
    parent: &Checkpoint,
    alpha: f64,
) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MergeError::BadAlpha(alpha));
    }
    let spec = MergeSpec::new(vec![child, parent], vec![alpha, 1.0 - alpha])?;
    Ok(linear_merge(&spec))
}

/// Drops one expert and renormalizes the remaining weights.
pub fn leave_one_out(weights: &[f64], excluded: usize) -> Result<Vec<f64>> {
    let n = weights.len();
    if n < 2 || excluded >= n {
        return Err(MergeError::BadExclusion { excluded, n });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(MergeError::WeightSum(sum));
    }
    let rest: f64 = sum - weights[excluded];
    if rest <= 0.0 {
        return Err(MergeError::WeightSum(rest));
    }
    Ok(weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != excluded)
        .map(|(_, &w)| w / rest)
        .collect())
}

/// One evaluated point of a perturbation search.
#[derive(Debug, Clone)]
pub struct MergeCandidate {
    /// 0 = base, then (+step, -step) per expert in order
    pub id: usize,
    pub weights: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SkippedCandidate {
    pub id: usize,
    pub weights: Vec<f64>,
    pub reason: String,
}

pub struct PerturbSearch {
    /// sorted by score descending; ties keep candidate-id order
    pub ranked: Vec<MergeCandidate>,
    pub skipped: Vec<SkippedCandidate>,
}

/// Moves `step` mass onto (or off) each expert in turn, renormalizing the
/// other coordinates proportionally, and scores every feasible candidate
/// with `evaluate`. At most 2n + 1 evaluations including the base point.
pub fn perturb_search<F>(
    base_weights: &[f64],
    step: f64,
    mut evaluate: F,
) -> Result<PerturbSearch>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(MergeError::BadStep(step));
    }
    let n = base_weights.len();
    if n < 2 {
        return Err(MergeError::BadExclusion { excluded: 0, n });
    }
    let sum: f64 = base_weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(MergeError::WeightSum(sum));
    }

    let mut ranked = Vec::new();
    let mut skipped = Vec::new();
    let mut consider = |id: usize, weights: Option<Vec<f64>>, reason: &str| match weights {
        Some(w) => ranked.push(MergeCandidate { id, weights: w, score: 0.0 }),
        None => skipped.push(SkippedCandidate {
            id,
            weights: base_weights.to_vec(),
            reason: reason.into(),
        }),
    };

    consider(0, Some(base_weights.to_vec()), "");
    for i in 0..n {
        consider(
            1 + 2 * i,
            perturb_one(base_weights, i, step),
            "perturbed weight left the simplex",
        );
        consider(
            2 + 2 * i,
            perturb_one(base_weights, i, -step),
            "perturbed weight left the simplex",
        );
    }
    for c in &mut ranked {
        c.score = evaluate(&c.weights);
    }
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    Ok(PerturbSearch { ranked, skipped })
}

fn perturb_one(base: &[f64], idx: usize, delta: f64) -> Option<Vec<f64>> {
    let target = base[idx] + delta;
    if !(0.0..=1.0).contains(&target) {
        return None;
    }
    let rest: f64 = 1.0 - base[idx];
    if rest <= 0.0 {
        // all mass already on idx; only weights that keep it there survive
        return if delta == 0.0 { Some(base.to_vec()) } else { None };
    }
    let scale = (1.0 - target) / rest;
    let mut out: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(j, &w)| if j == idx { target } else { w * scale })
        .collect();
    if out.iter().any(|&w| w < 0.0) {
        return None;
    }
    // pin the sum to exactly 1
    let s: f64 = out.iter().sum();
    out[idx] += 1.0 - s;
    Some(out)
}

/// Copies `base`, replacing only the listed embedding rows with donor rows.
pub fn selective_embedding_merge(
    base: &Checkpoint,
    donor: &Checkpoint,
    token_ids: &[usize],
) -> Result<Checkpoint> {
    let name = "embed";
    let base_embed = base
        .params
        .get(name)
        .ok_or_else(|| MergeError::MissingParam(name.into()))?;
    let donor_embed = donor
        .params
        .get(name)
        .ok_or_else(|| MergeError::MissingParam(name.into()))?;
    if base_embed.shape() != donor_embed.shape() {
        return Err(MergeError::SchemaMismatch {
            input: 1,
            detail: format!(
                "embedding shape {:?} vs {:?}",
                donor_embed.shape(),
                base_embed.shape()
            ),
        });
    }
    let vocab = base_embed.shape()[0];
    let width = base_embed.shape()[1];
    for &id in token_ids {
        if id >= vocab {
            return Err(MergeError::TokenOutOfRange { id, vocab });
        }
    }
    let mut out = base.clone();
    let mut data = base_embed.data().to_vec();
    for &id in token_ids {
        data[id * width..(id + 1) * width]
            .copy_from_slice(&donor_embed.data()[id * width..(id + 1) * width]);
    }
    out.params
        .insert(name.into(), Tensor::new(vec![vocab, width], data).unwrap());
    out.provenance = format!("{}+embed({})", base.provenance, donor.provenance);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(rng: &mut ChaCha8Rng, tag: &str) -> Checkpoint {
        let mut params: ParamMap = BTreeMap::new();
        params.insert(
            "embed".into(),
            Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        params.insert(
            "layer0.wq".into(),
            Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        params.insert(
            "final_ln".into(),
            Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap(),
        );
        Checkpoint::new(params, tag.to_string(), 100)
    }

    fn max_param_diff(a: &Checkpoint, b: &Checkpoint) -> f64 {
        a.params
            .iter()
            .flat_map(|(n, t)| {
                t.data()
                    .iter()
                    .zip(b.params[n].data())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn spec_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        assert!(MergeSpec::new(vec![&a, &b], vec![0.6, 0.4]).is_ok());
        assert!(matches!(
            MergeSpec::new(vec![&a, &b], vec![0.6, 0.5]),
            Err(MergeError::WeightSum(_))
        ));
        assert!(matches!(
            MergeSpec::new(vec![&a, &b], vec![1.0]),
            Err(MergeError::LengthMismatch { .. })
        ));
        assert!(matches!(MergeSpec::new(vec![], vec![]), Err(MergeError::Empty)));
        let mut c = random_checkpoint(&mut rng, "c");
        c.params.remove("final_ln");
        let err = MergeSpec::new(vec![&a, &c], vec![0.5, 0.5]).unwrap_err();
        assert!(err.to_string().contains("final_ln"), "{err}");
    }

    #[test]
    fn identity_and_convexity_merges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_checkpoint(&mut rng, "a");
        let spec = MergeSpec::new(vec![&a], vec![1.0]).unwrap();
        let out = linear_merge(&spec);
        assert_eq!(max_param_diff(&a, &out), 0.0);

        let spec = MergeSpec::new(vec![&a, &a], vec![0.3, 0.7]).unwrap();
        let out = linear_merge(&spec);
        assert!(max_param_diff(&a, &out) <= 1e-15);
    }

    #[test]
    fn merge_is_commutative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        let ab = linear_merge(&MergeSpec::new(vec![&a, &b], vec![0.3, 0.7]).unwrap());
        let ba = linear_merge(&MergeSpec::new(vec![&b, &a], vec![0.7, 0.3]).unwrap());
        assert_eq!(max_param_diff(&ab, &ba), 0.0);
    }

    #[test]
    fn merge_is_linear_in_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        let scale = |c: &Checkpoint, s: f64| {
            let mut out = c.clone();
            for t in out.params.values_mut() {
                let data: Vec<f64> = t.data().iter().map(|v| v * s).collect();
                *t = Tensor::new(t.shape().to_vec(), data).unwrap();
            }
            out
        };
        let (sa, sb) = (scale(&a, 2.5), scale(&b, 2.5));
        let merged_scaled =
            linear_merge(&MergeSpec::new(vec![&sa, &sb], vec![0.4, 0.6]).unwrap());
        let scaled_merged = scale(
            &linear_merge(&MergeSpec::new(vec![&a, &b], vec![0.4, 0.6]).unwrap()),
            2.5,
        );
        assert!(max_param_diff(&merged_scaled, &scaled_merged) <= 1e-12);
    }

    #[test]
    fn compose_matches_hand_worked_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        let c = random_checkpoint(&mut rng, "c");
        let tree = MergeTree::Node {
            children: vec![
                MergeTree::Node {
                    children: vec![MergeTree::Leaf(&a), MergeTree::Leaf(&b)],
                    weights: vec![0.5, 0.5],
                },
                MergeTree::Leaf(&c),
            ],
            weights: vec![0.5, 0.5],
        };
        let flat = compose_merge(&tree).unwrap();
        assert_eq!(flat.weights(), &[0.25, 0.25, 0.5]);
        let via_tree = eval_merge_tree(&tree).unwrap();
        let via_flat = linear_merge(&flat);
        assert!(max_param_diff(&via_tree, &via_flat) <= 1e-12);
    }

    #[test]
    fn depth_one_tree_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        let tree = MergeTree::Node {
            children: vec![MergeTree::Leaf(&a), MergeTree::Leaf(&b)],
            weights: vec![0.3, 0.7],
        };
        let flat = compose_merge(&tree).unwrap();
        assert_eq!(flat.weights(), &[0.3, 0.7]);
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.into_iter().map(|v| v / z).collect();
        let head: f64 = w[..n - 1].iter().sum();
        w[n - 1] = 1.0 - head;
        w
    }

    fn random_tree<'a>(
        rng: &mut ChaCha8Rng,
        pool: &'a [Checkpoint],
        depth: usize,
    ) -> MergeTree<'a> {
        if depth == 0 {
            return MergeTree::Leaf(&pool[rng.gen_range(0..pool.len())]);
        }
        let n = rng.gen_range(2..4);
        let children = (0..n).map(|_| random_tree(rng, pool, depth - 1)).collect();
        MergeTree::Node { children, weights: random_simplex(rng, n) }
    }

    #[test]
    fn associativity_on_random_three_level_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pool: Vec<Checkpoint> = (0..5)
            .map(|i| random_checkpoint(&mut rng, &format!("e{i}")))
            .collect();
        for _ in 0..50 {
            let tree = random_tree(&mut rng, &pool, 3);
            let flat = compose_merge(&tree).unwrap();
            assert!((flat.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let via_tree = eval_merge_tree(&tree).unwrap();
            let via_flat = linear_merge(&flat);
            assert!(max_param_diff(&via_tree, &via_flat) <= 1e-12);
        }
    }

    #[test]
    fn polyak_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        let one = polyak_average(&[&a]).unwrap();
        assert_eq!(max_param_diff(&a, &one), 0.0);
        let two = polyak_average(&[&a, &b]).unwrap();
        let mid = linear_merge(&MergeSpec::new(vec![&a, &b], vec![0.5, 0.5]).unwrap());
        assert_eq!(max_param_diff(&two, &mid), 0.0);
        assert!(polyak_average(&[]).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let child = random_checkpoint(&mut rng, "child");
        let parent = random_checkpoint(&mut rng, "parent");
        assert_eq!(
            max_param_diff(&interpolate_to_parent(&child, &parent, 1.0).unwrap(), &child),
            0.0
        );
        assert_eq!(
            max_param_diff(&interpolate_to_parent(&child, &parent, 0.0).unwrap(), &parent),
            0.0
        );
        let (alpha, gamma) = (0.6, 0.5);
        let once = interpolate_to_parent(&child, &parent, alpha).unwrap();
        let twice = interpolate_to_parent(&once, &parent, gamma).unwrap();
        let direct = interpolate_to_parent(&child, &parent, alpha * gamma).unwrap();
        assert!(max_param_diff(&twice, &direct) <= 1e-12);
        assert!(interpolate_to_parent(&child, &parent, 1.2).is_err());
        assert!(interpolate_to_parent(&child, &parent, -0.1).is_err());
    }

    #[test]
    fn leave_one_out_arithmetic() {
        let w = leave_one_out(&[0.2, 0.3, 0.5], 2).unwrap();
        assert!((w[0] - 0.4).abs() <= 1e-15);
        assert!((w[1] - 0.6).abs() <= 1e-15);
        let w = leave_one_out(&make_uniform_weights(4), 1).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        assert!(leave_one_out(&[1.0], 0).is_err());
    }

    #[test]
    fn perturb_search_counts_and_simplex() {
        let base = [0.2, 0.3, 0.5];
        let res = perturb_search(&base, 0.1, |w| w[1]).unwrap();
        assert_eq!(res.ranked.len() + res.skipped.len(), 7);
        for c in &res.ranked {
            assert!((c.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(c.weights.iter().all(|&w| w >= 0.0));
        }
        assert!(perturb_search(&base, 0.0, |_| 0.0).is_err());
    }

    #[test]
    fn perturb_search_monotone_evaluator_picks_plus_step() {
        let base = [0.4, 0.3, 0.3];
        let res = perturb_search(&base, 0.1, |w| w[0]).unwrap();
        let top = &res.ranked[0];
        assert_eq!(top.id, 1);
        assert!((top.weights[0] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn perturb_search_skips_infeasible_steps() {
        let base = [0.05, 0.95];
        let res = perturb_search(&base, 0.1, |w| w[0]).unwrap();
        // -step on expert 0 and +step on expert 1 both leave the simplex
        assert_eq!(res.skipped.len(), 2);
        assert_eq!(res.ranked.len(), 5 - 2);
    }

    #[test]
    fn selective_embedding_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base = random_checkpoint(&mut rng, "base");
        let donor = random_checkpoint(&mut rng, "donor");

        let same = selective_embedding_merge(&base, &donor, &[]).unwrap();
        assert_eq!(max_param_diff(&base, &same), 0.0);

        let all = selective_embedding_merge(&base, &donor, &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.params["embed"].data(), donor.params["embed"].data());
        assert_eq!(all.params["layer0.wq"].data(), base.params["layer0.wq"].data());

        let part = selective_embedding_merge(&base, &donor, &[2]).unwrap();
        assert_eq!(&part.params["embed"].data()[6..9], &donor.params["embed"].data()[6..9]);
        assert_eq!(&part.params["embed"].data()[..6], &base.params["embed"].data()[..6]);
        assert_eq!(part.params["final_ln"].data(), base.params["final_ln"].data());

        assert!(selective_embedding_merge(&base, &donor, &[99]).is_err());
        let mut no_embed = base.clone();
        no_embed.params.remove("embed");
        assert!(selective_embedding_merge(&no_embed, &donor, &[0]).is_err());
    }

    #[test]
    fn merge_preserves_schema() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_checkpoint(&mut rng, "a");
        let b = random_checkpoint(&mut rng, "b");
        let out = linear_merge(&MergeSpec::new(vec![&a, &b], vec![0.5, 0.5]).unwrap());
        let names: Vec<&String> = out.params.keys().collect();
        assert_eq!(names, a.params.keys().collect::<Vec<_>>());
        for (n, t) in &out.params {
            assert_eq!(t.shape(), a.params[n].shape());
        }
    }
}
