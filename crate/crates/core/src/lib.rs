//! Depth-recurrent latent-reasoning sequential recommendation.
//!
//! The crate covers the whole pipeline: interaction-log preprocessing
//! ([`corpus`]), the recurrent model ([`reasoner`]), self-supervised
//! pre-training ([`pretrain`]), reinforcement post-training ([`posttrain`]),
//! full-catalog evaluation ([`evalrank`]) and run orchestration
//! ([`harness`]). Gradients come from the small reverse-mode engine in
//! [`autodiff`].

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod evalrank;
pub mod harness;
pub mod optim;
pub mod posttrain;
pub mod pretrain;
pub mod reasoner;
pub mod rng;

pub use corpus::{InteractionDataset, InteractionEvent, Split, SplitInstance};
pub use error::{Error, Result};
pub use evalrank::{MetricName, MetricsReport, RankingResult};
pub use reasoner::{Aggregation, ArchitectureConfig, Backbone, ModelParameters, ReasoningTrajectory};
