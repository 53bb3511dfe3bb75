//! Conditional denoising-diffusion forecasting of day-ahead electricity load.
//!
//! The library trains a noise-prediction network (LSTM backbone with a
//! temporal multi-scale attention block) inside a Gaussian diffusion process
//! conditioned on the previous day's load curve, samples ensembles of
//! candidate curves for each forecast day, and evaluates them with
//! prediction-interval and density-based metrics.

pub mod attention;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod layers;
pub mod metrics;
pub mod rng;
pub mod tensor;
