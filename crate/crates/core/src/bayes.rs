//! Plug-in classification from known posteriors and Monte Carlo accuracy
//! estimation against clean or freshly sampled noisy labels.
//!
//! Two scorers are provided. [`mc_accuracy`] scores the argmax decision rule
//! (ties to the lowest class index). [`mc_match_accuracy`] scores the
//! probability-matching rule instead: per draw it credits the posterior mass
//! the handle assigns to the observed label. The quadratic noisy-label law
//! describes the second quantity — under uniform noise with spread c-1 it
//! equals (1-eps)^2 + eps^2/(c-1) pointwise on separated data — so the
//! formula-versus-simulation checks use the match scorer, while decision
//! quality on clean labels uses argmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::{self, NoiseSpec};
use crate::error::{invalid_param, Error, Result};
use crate::mixture::{GaussianMixture, LabelSource, LabeledDataset};
use crate::seeding;

/// Analytic classifier: argmax of either the clean posterior or the noisy
/// posterior of a calibrated channel.
#[derive(Debug, Clone, Copy)]
pub enum ClassifierHandle<'a> {
    CleanPlugin {
        mixture: &'a GaussianMixture,
    },
    NoisyPlugin {
        mixture: &'a GaussianMixture,
        spec: &'a NoiseSpec,
    },
}

impl<'a> ClassifierHandle<'a> {
    pub fn clean_plugin(mixture: &'a GaussianMixture) -> Self {
        ClassifierHandle::CleanPlugin { mixture }
    }

    pub fn noisy_plugin(mixture: &'a GaussianMixture, spec: &'a NoiseSpec) -> Result<Self> {
        if !spec.is_calibrated() {
            return Err(Error::InvalidState(
                "noisy plug-in requires a calibrated spec".into(),
            ));
        }
        Ok(ClassifierHandle::NoisyPlugin { mixture, spec })
    }

    pub fn mixture(&self) -> &'a GaussianMixture {
        match self {
            ClassifierHandle::CleanPlugin { mixture } => mixture,
            ClassifierHandle::NoisyPlugin { mixture, .. } => mixture,
        }
    }

    /// The posterior this handle ranks by.
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ClassifierHandle::CleanPlugin { mixture } => mixture.clean_posterior(x),
            ClassifierHandle::NoisyPlugin { mixture, spec } => {
                channels::noisy_posterior(mixture, spec, x)
            }
        }
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax_tie_lowest(&self.posterior(x)?))
    }
}

/// Index of the largest entry; exact ties resolve to the lowest index.
pub fn argmax_tie_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The label flip that hurts classification most at x: the most likely wrong
/// class, ties to the lowest index.
pub fn worst_flip_target(mixture: &GaussianMixture, x: &[f64], k: usize) -> Result<usize> {
    let c = mixture.num_classes();
    if c < 2 {
        return Err(invalid_param("worst flip target needs c >= 2"));
    }
    if k >= c {
        return Err(invalid_param(format!("true class {k} out of range")));
    }
    let m = mixture.clean_posterior(x)?;
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &v) in m.iter().enumerate() {
        if j != k && v > best_val {
            best = j;
            best_val = v;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl AccuracyEstimate {
    pub fn from_correct(correct: usize, n: usize) -> Self {
        let mean = correct as f64 / n as f64;
        Self {
            mean,
            std_error: (mean * (1.0 - mean) / n as f64).sqrt(),
            n,
        }
    }

    fn from_scores(scores: &[f64]) -> Self {
        let n = scores.len();
        let mean = scores.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var =
                scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, n }
    }
}

/// Which labels a Monte Carlo evaluation scores against.
#[derive(Debug, Clone, Copy)]
pub enum TestLabels<'a> {
    Clean,
    /// Fresh per-draw noisy labels sampled through the channel.
    Noisy(&'a NoiseSpec),
}

const LABEL_STREAM: u64 = 0x6c61_6265_6c73; // "labels"

fn draw_eval_pairs(
    mixture: &GaussianMixture,
    labels: TestLabels<'_>,
    n: usize,
    seed: u64,
    mut score: impl FnMut(&[f64], usize) -> Result<f64>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid_param("n must be >= 1"));
    }
    if let TestLabels::Noisy(spec) = labels {
        if !spec.is_calibrated() {
            return Err(Error::InvalidState(
                "label spec must be calibrated before sampling".into(),
            ));
        }
    }
    // Separate streams for points and labels keep the point sequence
    // identical between clean and noisy evaluations of the same seed.
    let mut point_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label_rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, &[LABEL_STREAM]));
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, true_class) = mixture.draw(&mut point_rng);
        let y = match labels {
            TestLabels::Clean => true_class,
            TestLabels::Noisy(spec) => {
                channels::sample_noisy_label(spec, mixture, &x, true_class, &mut label_rng)?
            }
        };
        scores.push(score(&x, y)?);
    }
    Ok(scores)
}

/// Argmax accuracy of the handle over n prior-weighted draws, scored against
/// clean or freshly sampled noisy labels. Deterministic per seed; the
/// binomial standard error is reported.
pub fn mc_accuracy(
    handle: &ClassifierHandle<'_>,
    mixture: &GaussianMixture,
    labels: TestLabels<'_>,
    n: usize,
    seed: u64,
) -> Result<AccuracyEstimate> {
    let scores = draw_eval_pairs(mixture, labels, n, seed, |x, y| {
        Ok((handle.classify(x)? == y) as usize as f64)
    })?;
    let correct = scores.iter().filter(|&&s| s == 1.0).count();
    Ok(AccuracyEstimate::from_correct(correct, n))
}

/// Probability-matching accuracy: the mean posterior mass the handle assigns
/// to the observed label. This is the quantity the quadratic noisy-accuracy
/// law computes, and the estimator the formula-versus-simulation checks use.
pub fn mc_match_accuracy(
    handle: &ClassifierHandle<'_>,
    mixture: &GaussianMixture,
    labels: TestLabels<'_>,
    n: usize,
    seed: u64,
) -> Result<AccuracyEstimate> {
    let scores = draw_eval_pairs(mixture, labels, n, seed, |x, y| Ok(handle.posterior(x)?[y]))?;
    Ok(AccuracyEstimate::from_scores(&scores))
}

/// Argmax accuracy over a fixed dataset's chosen label column.
pub fn evaluate_on(
    handle: &ClassifierHandle<'_>,
    dataset: &LabeledDataset,
    source: LabelSource,
) -> Result<AccuracyEstimate> {
    let labels = dataset.labels(source)?;
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        if handle.classify(dataset.row(i))? == label {
            correct += 1;
        }
    }
    Ok(AccuracyEstimate::from_correct(correct, dataset.len()))
}

/// Probability-matching accuracy over a fixed dataset's chosen label column.
pub fn match_on(
    handle: &ClassifierHandle<'_>,
    dataset: &LabeledDataset,
    source: LabelSource,
) -> Result<AccuracyEstimate> {
    let labels = dataset.labels(source)?;
    let scores = (0..dataset.len())
        .map(|i| Ok(handle.posterior(dataset.row(i))?[labels[i]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyEstimate::from_scores(&scores))
}
