//! Latent multi-step reasoner: a pre-block produces the anchor `H`, then a
//! shared core-block is applied `k` times to a noisy initial state with `H`
//! re-injected at every step.

mod config;
mod depth;
mod model;
mod params;

pub use config::{Aggregation, ArchitectureConfig, Backbone};
pub use depth::{sample_depth, sample_depth_untruncated, truncate_depth};
pub use model::{
    batch_final_repr, batch_logits, batch_step_reprs, core_step, encode_input, init_state, initial_states, reason,
    replay, score, Bound, Dropout, PackedBatch, ReasoningTrajectory, SeedRecord, Unrolled, LN_EPS,
};
pub use params::{BlockSlots, LayerSlots, ModelParameters, ParamSlots};
