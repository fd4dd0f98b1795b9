//! Bradley-Terry reward model: linear scoring head over the decoder's final
//! hidden state, intra-pair left-padding, first-fit pair packing with
//! segment-isolating masks, and the two-stage training plan.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{model_hidden, BoundParams, ModelConfig, ModelError, ParamMap, SequenceBatch};
use crate::objectives::{GOLD_LABEL, TIE_LABEL};
use crate::tensor::{Graph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("pair {id} needs {needed} tokens but rows hold {capacity}")]
    PairTooLarge { id: usize, needed: usize, capacity: usize },
    #[error("row capacity must be positive")]
    ZeroCapacity,
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RewardError>;

pub const RM_HEAD: &str = "rm_head";

/// Adds a randomly initialized scoring head to a decoder parameter map.
pub fn attach_head(params: &mut ParamMap, cfg: &ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 1.0 / (cfg.d_model as f64).sqrt();
    let data: Vec<f64> = (0..cfg.d_model).map(|_| rng.gen_range(-a..a)).collect();
    params.insert(RM_HEAD.into(), Tensor::new(vec![cfg.d_model, 1], data).unwrap());
}

/// Scalar rewards read off the given final-token indices of each batch row:
/// score = head . hidden[final].
pub fn score_at(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    final_positions: &[Vec<usize>],
) -> Result<Vec<TensorId>> {
    let head = params
        .id(RM_HEAD)
        .map_err(|_| RewardError::MissingParam(RM_HEAD.into()))?;
    let hidden = model_hidden(g, params, cfg, batch)?;
    let mut scores = Vec::new();
    for (row_hidden, finals) in hidden.iter().zip(final_positions) {
        for &pos in finals {
            let h = g.slice(*row_hidden, 0, pos, pos + 1)?;
            scores.push(g.matmul(h, head)?);
        }
    }
    Ok(scores)
}

/// Convenience: reward of one stand-alone sequence.
pub fn score(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<TensorId> {
    if tokens.is_empty() {
        return Err(RewardError::EmptySequence);
    }
    let last = tokens.len() - 1;
    let batch = SequenceBatch::simple(vec![tokens.to_vec()]);
    Ok(score_at(g, params, cfg, &batch, &[vec![last]])?[0])
}

/// One preference pair before packing. `label` is the soft chosen-wins
/// probability (0.999 gold, 0.5 tie).
#[derive(Debug, Clone)]
pub struct PrefPair {
    pub id: usize,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub label: f64,
}

/// Left-pads the shorter member so both final tokens sit at the same index.
/// Idempotent.
pub fn pad_pair(
    chosen: &[usize],
    rejected: &[usize],
    pad_token: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if chosen.is_empty() || rejected.is_empty() {
        return Err(RewardError::EmptySequence);
    }
    let len = chosen.len().max(rejected.len());
    let pad = |seq: &[usize]| {
        let mut out = vec![pad_token; len - seq.len()];
        out.extend_from_slice(seq);
        out
    };
    Ok((pad(chosen), pad(rejected)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    Chosen,
    Rejected,
}

/// One pair member placed in a packed row. The span is left padding followed
/// by the member's tokens; `start` is the row offset of the padding.
#[derive(Debug, Clone)]
pub struct Segment {
    pub pair_id: usize,
    pub member: Member,
    pub start: usize,
    pub pad_len: usize,
    pub token_len: usize,
}

impl Segment {
    pub fn span(&self) -> usize {
        self.pad_len + self.token_len
    }

    /// Row index of the member's final token.
    pub fn final_index(&self) -> usize {
        self.start + self.span() - 1
    }
}

#[derive(Debug, Clone)]
pub struct PackedRow {
    pub capacity: usize,
    pub segments: Vec<Segment>,
}

impl PackedRow {
    pub fn used(&self) -> usize {
        self.segments.iter().map(Segment::span).sum()
    }

    pub fn fill(&self) -> f64 {
        self.used() as f64 / self.capacity as f64
    }

    pub fn n_pairs(&self) -> usize {
        self.segments.len() / 2
    }

    /// Loss weight shared by every pair in this row.
    pub fn pair_weight(&self) -> f64 {
        1.0 / self.n_pairs() as f64
    }
}

#[derive(Debug)]
pub struct Packing {
    pub rows: Vec<PackedRow>,
    /// token rows, pad-filled to capacity, parallel to `rows`
    pub token_ids: Vec<Vec<usize>>,
    pub pad_token: usize,
}

/// Packs padded pairs into rows of `capacity` tokens. Pairs stay whole
/// (both members in one row). First-fit over descending pair footprints into
/// the fewest rows that keep pairs-per-row counts within 1 of each other.
pub fn pack_pairs(pairs: &[PrefPair], capacity: usize, pad_token: usize) -> Result<Packing> {
    if capacity == 0 {
        return Err(RewardError::ZeroCapacity);
    }
    let mut footprints = Vec::with_capacity(pairs.len());
    let mut padded = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (c, r) = pad_pair(&p.chosen, &p.rejected, pad_token)?;
        let needed = c.len() + r.len();
        if needed > capacity {
            return Err(RewardError::PairTooLarge { id: p.id, needed, capacity });
        }
        footprints.push(needed);
        padded.push((c, r));
    }
    if pairs.is_empty() {
        return Ok(Packing { rows: vec![], token_ids: vec![], pad_token });
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| footprints[b].cmp(&footprints[a]).then(a.cmp(&b)));
    let total: usize = footprints.iter().sum();
    let min_rows = total.div_ceil(capacity);

    'rows: for n_rows in min_rows..=pairs.len() {
        // uniform pair counts for this row budget
        let base = pairs.len() / n_rows;
        let extra = pairs.len() % n_rows;
        let mut slots: Vec<usize> = (0..n_rows)
            .map(|i| base + usize::from(i < extra))
            .collect();
        let mut used = vec![0usize; n_rows];
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
        for &pi in &order {
            // first fit: lowest-index row with a pair slot and room
            let Some(row) = (0..n_rows)
                .find(|&r| slots[r] > 0 && used[r] + footprints[pi] <= capacity)
            else {
                continue 'rows;
            };
            slots[row] -= 1;
            used[row] += footprints[pi];
            assignment[row].push(pi);
        }
        return Ok(materialize(pairs, &padded, &assignment, capacity, pad_token));
    }
    unreachable!("one pair per row always fits");
}

fn materialize(
    pairs: &[PrefPair],
    padded: &[(Vec<usize>, Vec<usize>)],
    assignment: &[Vec<usize>],
    capacity: usize,
    pad_token: usize,
) -> Packing {
    let mut rows = Vec::new();
    let mut token_ids = Vec::new();
    for row_pairs in assignment {
        let mut segments = Vec::new();
        let mut tokens = Vec::new();
        for &pi in row_pairs {
            let p = &pairs[pi];
            let (c, r) = &padded[pi];
            for (member, seq, orig_len) in [
                (Member::Chosen, c, p.chosen.len()),
                (Member::Rejected, r, p.rejected.len()),
            ] {
                segments.push(Segment {
                    pair_id: p.id,
                    member,
                    start: tokens.len(),
                    pad_len: seq.len() - orig_len,
                    token_len: orig_len,
                });
                tokens.extend_from_slice(seq);
            }
        }
        tokens.resize(capacity, pad_token);
        rows.push(PackedRow { capacity, segments });
        token_ids.push(tokens);
    }
    Packing { rows, token_ids, pad_token }
}

/// Attention mask for a packed row: entry (q, k) is true when q must NOT
/// attend to k. A token sees only earlier-or-equal non-pad positions inside
/// its own segment; pads see only themselves.
pub fn packed_mask(row: &PackedRow) -> Vec<bool> {
    let l = row.capacity;
    let mut blocked = vec![true; l * l];
    for i in 0..l {
        blocked[i * l + i] = false; // keep softmax rows well-defined
    }
    for seg in &row.segments {
        let tok0 = seg.start + seg.pad_len;
        for q in tok0..seg.start + seg.span() {
            for k in tok0..=q {
                blocked[q * l + k] = false;
            }
        }
    }
    blocked
}

/// Doc/position bookkeeping that makes the decoder's own document masking
/// realize [`packed_mask`]: each segment is one document with positions
/// counted from its first real token; every pad is a singleton document.
pub fn to_sequence_batch(packing: &Packing) -> SequenceBatch {
    let mut token_ids = Vec::new();
    let mut doc_ids = Vec::new();
    let mut positions = Vec::new();
    for (row, tokens) in packing.rows.iter().zip(&packing.token_ids) {
        let l = row.capacity;
        let mut docs = vec![0usize; l];
        let mut pos = vec![0usize; l];
        let mut next_doc = 0;
        let mut covered = vec![false; l];
        for seg in &row.segments {
            for i in seg.start..seg.start + seg.pad_len {
                docs[i] = next_doc;
                next_doc += 1;
                covered[i] = true;
            }
            let seg_doc = next_doc;
            next_doc += 1;
            for (off, i) in (seg.start + seg.pad_len..seg.start + seg.span()).enumerate() {
                docs[i] = seg_doc;
                pos[i] = off;
                covered[i] = true;
            }
        }
        for i in 0..l {
            if !covered[i] {
                docs[i] = next_doc;
                next_doc += 1;
            }
        }
        token_ids.push(tokens.clone());
        doc_ids.push(docs);
        positions.push(pos);
    }
    SequenceBatch { token_ids, doc_ids, positions }
}

/// Per-pair (chosen score, rejected score, loss weight) for a whole packing.
pub fn score_packing(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    packing: &Packing,
) -> Result<Vec<(usize, TensorId, TensorId, f64)>> {
    let batch = to_sequence_batch(packing);
    let finals: Vec<Vec<usize>> = packing
        .rows
        .iter()
        .map(|r| r.segments.iter().map(Segment::final_index).collect())
        .collect();
    let scores = score_at(g, params, cfg, &batch, &finals)?;
    let mut out = Vec::new();
    let mut cursor = 0;
    for row in &packing.rows {
        let w = row.pair_weight();
        for pair in row.segments.chunks(2) {
            debug_assert_eq!(pair[0].pair_id, pair[1].pair_id);
            debug_assert_eq!(pair[0].member, Member::Chosen);
            out.push((pair[0].pair_id, scores[cursor], scores[cursor + 1], w));
            cursor += 2;
        }
    }
    Ok(out)
}

pub use crate::pipeline::ScheduleKind;

#[derive(Debug, Clone)]
pub struct LabelPolicy {
    pub gold: f64,
    pub tie: f64,
}

impl LabelPolicy {
    /// Soft label for a human rating gap in [-1, 1]; identity map onto
    /// chosen-wins probability, clamped to [tie at 0, gold at 1].
    pub fn from_rating_gap(&self, gap: f64) -> f64 {
        let p = 0.5 + 0.5 * gap.clamp(-1.0, 1.0);
        p.clamp(1.0 - self.gold, self.gold)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: &'static str,
    pub samples: u64,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub peak_lr: f64,
    pub epochs: usize,
    pub labels: LabelPolicy,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stages: [Stage; 2],
}

/// The two-stage plan: a large relabelled pool first, then a small
/// high-quality pool at low LR.
pub fn build_stage_plan() -> StagePlan {
    let labels = LabelPolicy { gold: GOLD_LABEL, tie: TIE_LABEL };
    StagePlan {
        stages: [
            Stage {
                name: "relabelled-pool",
                samples: 4_000_000,
                batch_size: 1024,
                schedule: ScheduleKind::Cosine,
                peak_lr: 4e-5,
                epochs: 1,
                labels: labels.clone(),
            },
            Stage {
                name: "high-quality-pool",
                samples: 350_000,
                batch_size: 16,
                schedule: ScheduleKind::Cosine,
                peak_lr: 3e-6,
                epochs: 1,
                labels,
            },
        ],
    }
}
