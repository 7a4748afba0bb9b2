//! Label-noise modeling over Gaussian mixtures.
//!
//! The library builds the pieces of a label-noise study end to end:
//!
//! * [`mixture`] — the generative model, seeded benchmark layouts,
//!   stratified sampling, and the exact clean posterior;
//! * [`channels`] — uniform, class-dependent, and feature-dependent noise
//!   channels, their calibration, application to datasets, and the noisy
//!   posterior;
//! * [`theory`] — closed-form noisy/clean accuracy laws and tipping points;
//! * [`bayes`] — plug-in classifiers and Monte Carlo accuracy estimation;
//! * [`learner`] — a small from-scratch MLP trained with Adam;
//! * [`embednoise`] — center-based noise injection for external feature
//!   datasets;
//! * [`experiment`] — a deterministic sweep engine producing tidy CSV
//!   tables with optional theory overlays.
//!
//! Class indices are 0-based everywhere.
//!
//! ```
//! use labelnoise::channels::{self, ApplyMode, NoiseKind, NoiseSpec};
//! use labelnoise::mixture::make_benchmark_mixture;
//!
//! // A 4-class benchmark with overlapping and well-separated pairs.
//! let mixture = make_benchmark_mixture(4, 2, 3.0, 7).unwrap();
//! let data = mixture.sample(100, 0).unwrap();
//!
//! // Calibrate the worst-case channel to a 20% flip rate and apply it.
//! let spec = NoiseSpec::feature_dependent(NoiseKind::GapMax, 0.2).unwrap();
//! let (spec, result) = channels::calibrate(&spec, &data, &mixture, 1e-4).unwrap();
//! assert!((result.achieved_flip_rate - 0.2).abs() <= 1e-4);
//! let noisy = channels::apply(&spec, &data, Some(&mixture), 1, ApplyMode::Bernoulli).unwrap();
//!
//! // The noisy posterior at any point is a valid distribution.
//! let m = channels::noisy_posterior(&mixture, &spec, noisy.row(0)).unwrap();
//! assert!((m.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
//! ```

pub mod bayes;
pub mod channels;
pub mod embednoise;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod mixture;
pub mod seeding;
pub mod theory;

pub use error::{Error, Result};
