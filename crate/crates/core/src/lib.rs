//! Cross-modal template registration: a state-space-model feature encoder with
//! multi-directional 2D scanning, multi-level feature aggregation, multi-expert
//! feature learning, convolution-based similarity search, and a training and
//! evaluation harness with synthetic cross-modal data.

pub mod arrayio;
pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod config;
pub mod data;
pub mod harness;
pub mod matcher;
pub mod mefl;
pub mod params;
pub mod plot;
pub mod ssm;
pub mod tensor;
