//! Generative Bayesian seismic monitoring.
//!
//! Models continuous station waveforms directly: seismic events arrive as
//! parametric envelopes multiplied by wavelet-domain modulation signals, on
//! top of autoregressive background noise. Gaussian processes over envelope
//! parameters and wavelet coefficients capture repeatable signal structure
//! across nearby events, and reversible-jump MCMC inverts the model to
//! recover event bulletins from raw signals.
//!
//! Module layout mirrors the pipeline:
//! - [`worldmodel`]: event/world state types and the event prior
//! - [`geophys`]: travel-time and source-amplitude mean functions
//! - [`envelope`]: parametric arrival envelope
//! - [`wavelet`]: orthonormal db4 transform and active-coefficient structure
//! - [`signalmodel`]: forward synthesis, AR noise, collapsed likelihood
//! - [`gp`]: regionalized Gaussian-process models over signal descriptions
//! - [`training`]: EM fitting from a ground-truth bulletin plus waveforms
//! - [`inference`]: reversible-jump MCMC over world states
//! - [`evaluation`]: bulletin matching and precision/recall metrics
//! - [`io`]: file formats (bulletins, waveforms, trained models)

pub mod config;
pub mod envelope;
pub mod error;
pub mod evaluation;
pub mod geophys;
pub mod gp;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod numeric;
pub mod seedtree;
pub mod signalmodel;
pub mod training;
pub mod wavelet;
pub mod worldmodel;

pub use error::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
