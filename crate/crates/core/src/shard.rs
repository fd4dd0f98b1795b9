//! Analytic communication-cost model for a 4-axis device mesh (data,
//! fully-sharded-data, sequence, and tensor parallelism). Emits per-layer
//! collective events with ring payloads and an overlap schedule; no real
//! devices involved.
//!
//! Payload convention: per-device transmitted bytes for ring algorithms,
//! (p - 1)/p of the full tensor for all-gather and reduce-scatter, twice
//! that for all-reduce. Layer norms and embeddings are communication-free
//! under sequence sharding, so no events are emitted for them. Backward is
//! modeled as 2x the forward volumes.

use thiserror::Error;

use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("mesh axes multiply to {product}, have {devices} devices")]
    DeviceMismatch { product: usize, devices: usize },
    #[error("mesh axes must be >= 1")]
    ZeroAxis,
    #[error("{dim} = {value} not divisible by {axis} = {shards}")]
    NotDivisible { dim: &'static str, value: usize, axis: &'static str, shards: usize },
}

pub type Result<T> = std::result::Result<T, ShardError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshConfig {
    pub dp: usize,
    pub fsdp: usize,
    pub sp: usize,
    pub tp: usize,
}

impl MeshConfig {
    pub fn device_count(&self) -> usize {
        self.dp * self.fsdp * self.sp * self.tp
    }
}

pub fn validate_mesh(mesh: &MeshConfig, n_devices: usize) -> Result<()> {
    if mesh.dp == 0 || mesh.fsdp == 0 || mesh.sp == 0 || mesh.tp == 0 {
        return Err(ShardError::ZeroAxis);
    }
    let product = mesh.device_count();
    if product != n_devices {
        return Err(ShardError::DeviceMismatch { product, devices: n_devices });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllReduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subject {
    Activations,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Attention,
    Ffn,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommEvent {
    pub kind: CollectiveKind,
    /// transmitted bytes per device
    pub payload_bytes: f64,
    pub subject: Subject,
    pub phase: Phase,
    /// compute phase this event hides behind, once scheduled
    pub overlapped_with: Option<&'static str>,
}

/// Ring all-gather / reduce-scatter per-device transmitted bytes.
fn ring(p: usize, tensor_bytes: f64) -> f64 {
    tensor_bytes * (p as f64 - 1.0) / p as f64
}

/// Parameter count of one transformer layer (attention + FFN + gain).
pub fn layer_param_count(cfg: &ModelConfig) -> (usize, usize) {
    let qdim = cfg.n_heads * cfg.head_dim;
    let kvdim = cfg.n_kv_heads * cfg.head_dim;
    let attn = cfg.d_model * qdim       // wq
        + 2 * cfg.d_model * kvdim       // wk, wv
        + qdim * cfg.d_model            // wo
        + cfg.d_model;                  // ln gain
    let ffn = 2 * cfg.d_model * cfg.d_ff + cfg.d_ff * cfg.d_model;
    (attn, ffn)
}

/// Forward communication events for one transformer layer under the mesh.
/// Sequence sharding replaces tensor parallelism's activation collectives
/// when both are requested.
pub fn layer_comm(
    cfg: &ModelConfig,
    mesh: &MeshConfig,
    batch: usize,
    seq: usize,
    bytes_per_element: usize,
) -> Result<Vec<CommEvent>> {
    if mesh.dp == 0 || mesh.fsdp == 0 || mesh.sp == 0 || mesh.tp == 0 {
        return Err(ShardError::ZeroAxis);
    }
    if seq % mesh.sp != 0 {
        return Err(ShardError::NotDivisible { dim: "seq", value: seq, axis: "sp", shards: mesh.sp });
    }
    if mesh.tp > 1 {
        if cfg.n_heads % mesh.tp != 0 {
            return Err(ShardError::NotDivisible {
                dim: "n_heads", value: cfg.n_heads, axis: "tp", shards: mesh.tp,
            });
        }
        if cfg.d_ff % mesh.tp != 0 {
            return Err(ShardError::NotDivisible {
                dim: "d_ff", value: cfg.d_ff, axis: "tp", shards: mesh.tp,
            });
        }
    }

    let mut events = Vec::new();
    let act_bytes = (batch * seq * cfg.d_model * bytes_per_element) as f64;

    if mesh.sp > 1 {
        // one gather of the sequence-sharded activations before QKV, one
        // sum-and-reshard after the attention output projection
        events.push(CommEvent {
            kind: CollectiveKind::AllGather,
            payload_bytes: ring(mesh.sp, act_bytes),
            subject: Subject::Activations,
            phase: Phase::Attention,
            overlapped_with: None,
        });
        events.push(CommEvent {
            kind: CollectiveKind::ReduceScatter,
            payload_bytes: ring(mesh.sp, act_bytes),
            subject: Subject::Activations,
            phase: Phase::Attention,
            overlapped_with: None,
        });
    } else if mesh.tp > 1 {
        // weight-stationary path: gather before the first sharded matmul,
        // all-reduce after the second
        events.push(CommEvent {
            kind: CollectiveKind::AllGather,
            payload_bytes: ring(mesh.tp, act_bytes),
            subject: Subject::Activations,
            phase: Phase::Attention,
            overlapped_with: None,
        });
        events.push(CommEvent {
            kind: CollectiveKind::AllReduce,
            payload_bytes: 2.0 * ring(mesh.tp, act_bytes),
            subject: Subject::Activations,
            phase: Phase::Ffn,
            overlapped_with: None,
        });
    }

    if mesh.fsdp > 1 {
        let (attn_params, ffn_params) = layer_param_count(cfg);
        events.push(CommEvent {
            kind: CollectiveKind::AllGather,
            payload_bytes: ring(mesh.fsdp, (attn_params * bytes_per_element) as f64),
            subject: Subject::Weights,
            phase: Phase::Attention,
            overlapped_with: None,
        });
        events.push(CommEvent {
            kind: CollectiveKind::AllGather,
            payload_bytes: ring(mesh.fsdp, (ffn_params * bytes_per_element) as f64),
            subject: Subject::Weights,
            phase: Phase::Ffn,
            overlapped_with: None,
        });
    }
    Ok(events)
}

/// Backward mirrors forward collectives at twice the volume.
pub fn backward_comm(forward: &[CommEvent]) -> Vec<CommEvent> {
    forward
        .iter()
        .map(|e| CommEvent { payload_bytes: 2.0 * e.payload_bytes, ..e.clone() })
        .collect()
}

pub fn total_bytes(events: &[CommEvent]) -> f64 {
    events.iter().map(|e| e.payload_bytes).sum()
}

/// Assigns overlap targets. The parallel block lets the attention-side
/// activation gather hide behind the FFN expansion matmul and the
/// post-attention reduce-scatter behind the FFN reduction; weight gathers
/// for the next layer hide behind the current layer's compute.
pub fn overlap_schedule(events: &[CommEvent]) -> Vec<CommEvent> {
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let overlapped_with = match (e.subject, e.kind) {
            (Subject::Activations, CollectiveKind::AllGather) => Some("ffn-expansion"),
            (Subject::Activations, CollectiveKind::ReduceScatter) => Some("ffn-reduction"),
            (Subject::Activations, CollectiveKind::AllReduce) => None,
            (Subject::Weights, _) => Some("previous-layer-compute"),
        };
        out.push(CommEvent { overlapped_with, ..e.clone() });
    }
    out
}

/// Exposed (non-hidden) communication time under user-supplied costs:
/// sum of comm time for unoverlapped events plus max(0, comm - compute)
/// for overlapped ones.
pub fn exposed_time<FC, FP>(schedule: &[CommEvent], comm_time: FC, compute_time: FP) -> f64
where
    FC: Fn(&CommEvent) -> f64,
    FP: Fn(&str) -> f64,
{
    schedule
        .iter()
        .map(|e| {
            let c = comm_time(e);
            match e.overlapped_with {
                Some(phase) => (c - compute_time(phase)).max(0.0),
                None => c,
            }
        })
        .sum()
}
