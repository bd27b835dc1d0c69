//! Active membership inference against federated clients that train on frozen
//! token embeddings, with local differential privacy on token indices.

pub mod attack_attn;
pub mod attack_fc;
pub mod bounds;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod game;
pub mod ldp;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;

pub use error::{AmiError, Result};
pub use game::{run_games, run_trial, AttackConfig, GameConfig, GameEngine, GameOutcome, GameRun};
pub use metrics::Metrics;
