//! Synthetic-human LiDAR data toolkit.
//!
//! The crate covers the data side of an unsupervised human detector that is
//! bootstrapped from simulated humans:
//!
//! - [`geometry`]: point clouds, oriented boxes, box fitting, BEV IoU.
//! - [`range_view`]: range-image projection, nearest-return merging and
//!   occlusion analysis.
//! - [`lidar_sim`]: beam-pattern raycasting of posed human meshes, OBJ
//!   ingestion and a procedural humanoid generator.
//! - [`ground_seg`]: patch-wise constrained RANSAC ground segmentation and
//!   insertion-point sampling.
//! - [`scene_forge`]: occlusion-checked insertion of humans into real scenes.
//! - [`supervision`]: vacant-ground masks, heatmap targets, joint visibility.
//! - [`loss_kernels`]: masked heatmap focal loss, box loss, feature alignment
//!   loss, all with analytic gradients.
//! - [`track_filter`]: bi-directional tracking filter for pseudo-labels.
//! - [`eval_metrics`]: circle NMS and center-distance AP.
//! - [`pipeline`]: dataset IO, configuration and the staged commands.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default); see [`exec::Execution`].

// `!(a < b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval_metrics;
pub mod exec;
pub mod geometry;
pub mod ground_seg;
pub mod io;
pub mod lidar_sim;
pub mod loss_kernels;
pub mod pipeline;
pub mod range_view;
pub mod rng;
pub mod scene_forge;
pub mod supervision;
pub mod toy;
pub mod track_filter;

pub use error::{Error, Result};
