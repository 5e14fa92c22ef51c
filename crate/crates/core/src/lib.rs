//! Organ localization from simulated body-surface depth images.
//!
//! - [`voldata`]: volumes, depth images, mask stacks and their binary formats.
//! - [`phantom`]: synthetic whole-body phantoms with exact organ labels.
//! - [`depthsim`]: volume to coronal depth image, and organ label projection.
//! - [`net`]: encoder-decoder with analytic backward pass.
//! - [`train`]: Dice + BCE loss, Adam, cosine schedule, checkpoints.
//! - [`metrics`]: Dice, ASSD, detection offset error, Wilcoxon signed-rank.
//! - [`cli`]: command-line pipeline and scaling experiments.

pub mod exec;
pub mod voldata;
pub mod phantom;
pub mod depthsim;
pub mod net;
pub mod metrics;
pub mod train;
pub mod cli;
