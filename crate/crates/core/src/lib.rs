//! Hierarchical sparse predictive coding for video.
//!
//! Each layer encodes a group of input vectors as sparse states `x` over a
//! dictionary `C`, tied through time by a transition matrix `A`, and pools
//! the absolute states into low-dimensional causes `u` that modulate the
//! state sparsity through a non-negative invariance matrix `B`. Layers stack
//! into a tree; inference combines one top-down prediction pass with
//! bottom-up energy minimization, and learning is greedy and layer-wise.

pub mod data;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod inference;
pub mod learning;
pub mod model;
pub mod seed;
pub mod smoothing;
pub mod solver;

pub use error::{Error, Result};
pub use hierarchy::{build_network, infer_frame, infer_sequence, train_network, InferenceContext, Network, Topology};
pub use inference::{joint_infer, unified_energy, JointSolver};
pub use model::{load_model, save_model, HyperParams, LayerDims, LayerParams, LayerState};
