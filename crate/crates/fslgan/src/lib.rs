//! Federated split-learning GAN toolkit: a from-scratch f64 neural network
//! core (conv/deconv/batchnorm/dense with exact backprop), a DCGAN pair for
//! 32x32 grayscale images, layer-wise discriminator splitting across
//! heterogeneous client devices, a logical-clock cost model for the split
//! pipeline, and a FedAvg federation orchestrator — plus the experiment
//! runner reproducing the timing and accuracy benchmarks.
//!
//! Determinism contract: every stochastic choice is driven by an explicit
//! seed, sample batches are reduced in fixed 16-sample chunks, and parallel
//! reductions preserve chunk order, so builds with and without the `parallel`
//! feature produce bit-identical results.

pub mod config;
pub mod conv;
pub mod dataio;
pub mod error;
pub mod fdcheck;
pub mod fed;
pub mod gan;
pub mod layers;
pub mod network;
pub mod par;
pub mod runner;
pub mod splitplan;
pub mod tensor;
pub mod timesim;
pub mod viz;

pub use error::{Error, Result};
