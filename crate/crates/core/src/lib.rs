//! Dual-channel attention guidance for dual-stream transformer attention.
//!
//! The image-token Key and Value blocks of a joint text/image attention layer
//! are decomposed into a shared bias and per-token deltas and rescaled
//! independently: the key channel steers where attention goes, the value
//! channel what gets aggregated.
//!
//! - [`tensor`]: dense `f64` kernels.
//! - [`attention`]: per-stream projections, RoPE, joint attention.
//! - [`guidance`]: bias-delta decomposition and dual-channel rescaling.
//! - [`profiler`]: delta-to-bias ratio profiles across layers and steps.
//! - [`invariants`]: runtime checks of the guidance identities.
//! - [`harness`]: seeded toy stack, fidelity metrics, grid sweeps, contours.
//! - [`report`]: CSV, contour and heatmap writers.

pub mod attention;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod invariants;
pub mod profiler;
pub mod report;
pub mod rng;
pub mod tensor;

pub use attention::{joint_attention, project_qkv, rope, JointQKV, LayerWeights, StreamBatch, StreamProjections};
pub use error::{Error, Result};
pub use guidance::{apply_dcag, decompose, guided_attention, rescale, BiasDelta, GuidanceConfig};
pub use profiler::{pearson, profile_stack, ratio, RatioProfile, Space};
pub use tensor::Tensor;
