//! Desk-scale laboratory for a hybrid-attention decoder, its training-loss
//! family, reward-model packing, checkpoint merging, and an analytic
//! sharding cost model. Everything runs in 64-bit floats on one thread so
//! that tight numerical oracles hold.

pub mod tensor;
pub mod model;
pub mod objectives;
pub mod tabular;
pub mod ckpt;
pub mod config;
pub mod metrics;
pub mod merge;
pub mod reward;
pub mod shard;
pub mod pipeline;
