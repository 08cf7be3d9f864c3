//! Synthesis of Markov-Gaussian impulsive noise channels and joint estimation
//! of the noise parameters `(p, R, Γ)` with a shared CNN-attention-LSTM trunk
//! feeding three task heads.
//!
//! The crate is organised along the data path:
//!
//! * [`channel`] simulates QPSK over Rayleigh fading with two-state
//!   Markov-Gaussian noise.
//! * [`dataset`] builds the parameter grid, preprocesses sequences into
//!   standardized examples and persists them.
//! * [`model`] holds the network, its hand-written reverse pass and
//!   parameter accounting.
//! * [`training`] contains the losses, Adam and the epoch loop.
//! * [`evalbench`] evaluates trained models, exports curves, predicts raw
//!   parameters and compares multitask against single-task models.

pub mod channel;
pub mod dataset;
pub mod error;
pub mod evalbench;
mod linalg;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
