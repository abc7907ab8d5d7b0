//! Toy stack, fidelity metrics, `(δ_k, δ_v)` grid sweeps and iso-fidelity contours.

pub mod contour;
pub mod metrics;
pub mod stack;
pub mod sweep;

pub use contour::{marching_squares, Grid, Point, Polyline};
pub use metrics::{mse, psnr, ssim, Image, PSNR_CAP_DB};
pub use stack::{random_batch, run_stack, run_stack_observed, StackShape, ToyStack};
pub use sweep::{iso_contour, render_range, render_tokens, sweep, Metric, SweepRecord, SweepResult};
