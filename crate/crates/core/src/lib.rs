//! Optimal-transport domain adaptation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`ot`]: discrete measures, cost matrices and the exact, entropic and
//!   unbalanced transport solvers.
//! * [`minibatch`]: Monte-Carlo minibatch estimators of the transfer term and
//!   aggregated minibatch plans with cross-class diagnostics.
//! * [`losses`]: cross-entropy, symmetric cross-entropy and the joint
//!   feature/label ground cost.
//! * [`mixup`]: MixUp neighbour distributions and the mixture upper-bound check.
//! * [`model`]: a small MLP feature extractor + classifier with hand-written
//!   backpropagation, optimizers and checkpoints.
//! * [`data`]: synthetic domain pairs and stratified batching.
//! * [`trainer`]: the alternating plan-solve / gradient-step training loop.
//! * [`checks`]: verification suites shared by the CLI and the test-suite.
//! * [`plot`]: SVG rendering of transport plans.

pub mod checks;
pub mod data;
pub mod error;
pub mod losses;
pub mod minibatch;
pub mod mixup;
pub mod model;
pub mod oracle;
pub mod ot;
pub mod plot;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
