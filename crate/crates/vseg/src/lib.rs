//! Desk-scale 3D volumetric segmentation engine.
//!
//! The crate is organised as a pipeline:
//!
//! * [`volio`] reads and writes volumes and label maps, standardizes
//!   intensities, and generates synthetic phantom subjects.
//! * [`tensor`] provides dense n-dimensional tensors and a reverse-mode
//!   autodiff graph with the operations the network needs.
//! * [`planner`] fingerprints a dataset and derives a network/training plan
//!   from it.
//! * [`network`] builds the encoder-decoder segmentation network with a
//!   transformer bottleneck and runs sliding-window inference.
//! * [`train`] implements the compound Dice + cross-entropy loss, fold
//!   splitting, the SGD training loop, and gradient checking.
//! * [`metrics`] scores predictions with region Dice and percentile
//!   Hausdorff distances.
//! * [`ensemble`] fuses label maps from several models.

mod ioutil;

pub mod ensemble;
pub mod metrics;
pub mod network;
pub mod planner;
pub mod tensor;
pub mod train;
pub mod volio;
