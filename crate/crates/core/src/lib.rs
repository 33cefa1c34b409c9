//! Attention-heatmap tracking pipeline: heatmap generation, saliency
//! metrics, proposal reranking and refinement heads with analytic
//! gradients, a synthetic scene generator and the job commands behind the
//! `focustrack` CLI.

pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod heatmap;
pub mod labels;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
