//! Extreme learning machines with closed-form output layers.
//!
//! A network has a fixed random hidden layer ([`hidden`]) and an output layer
//! fitted either by least squares through the pseudo-inverse or as a linear
//! discriminant ([`solvers`]). LDA networks yield class posteriors, which
//! [`ensemble`] averages across networks. [`harness`] runs seeded sweeps over
//! MNIST or CSV data, and [`model`] saves trained networks.
//!
//! ```
//! use elm_lda::dataio::synth_gaussian;
//! use elm_lda::hidden::{ActivationKind, HiddenLayer};
//! use elm_lda::solvers::{class_stats, classify, score, solve_lda, PriorsPolicy};
//! use elm_lda::Matrix;
//!
//! let means = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
//! let data = synth_gaussian(&means, &Matrix::identity(2), &[0.5, 0.5], 200, 1).unwrap();
//! let layer = HiddenLayer::init(2, 5, -0.5, 0.5, ActivationKind::Sigmoid, 3).unwrap();
//! let a = layer.forward(data.x()).unwrap();
//! let w = solve_lda(&class_stats(&a, data.labels(), 2, &PriorsPolicy::Uniform).unwrap(), 0.0).unwrap();
//! let predicted = classify(&score(&w, &a).unwrap());
//! assert_eq!(predicted.len(), 200);
//! ```

pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod hidden;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod seed;
pub mod selftest;
pub mod solvers;

pub use error::{Error, Result};
pub use matrix::Matrix;
