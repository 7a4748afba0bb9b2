//! Label-noise channels and their application.
//!
//! A channel is the conditional distribution eta_k(x) of the observed label
//! given the true class k and features x. Three families are provided:
//!
//! * uniform — constant everywhere; flip mass split evenly over the c-1
//!   wrong classes;
//! * class-dependent — constant within each class; flip mass eps split
//!   evenly over `spread` designated target classes (the row-stochastic
//!   reading, so every row is a valid conditional distribution);
//! * feature-dependent — the keep probability eta_kk(x) follows one of five
//!   shapes driven by the clean posterior (uniform-x, resampling, inverse
//!   resampling, gap-min, gap-max). The shapes are stated up to a
//!   proportionality constant, which [`calibrate`] resolves: the keep
//!   probability is clip(alpha * weight, 0, 1) with alpha chosen by bisection
//!   so the mean flip probability over a reference dataset equals eps.
//!
//! Gap-min concentrates flips near decision boundaries (small margin ratio),
//! gap-max far from them; gap-max puts all flip mass on the most likely
//! wrong class, which is the worst case for clean-label classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::mixture::{GaussianMixture, LabeledDataset, PROB_SUM_TOL};

/// Floor applied to a posterior before inversion, bounding inverse-resampling
/// weights for samples in near-zero-density regions.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// Default tolerance on |achieved mean flip rate - eps| during calibration.
pub const DEFAULT_CALIBRATION_TOL: f64 = 1e-4;

const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    ClassDependent,
    UniformX,
    Resampling,
    InverseResampling,
    GapMin,
    GapMax,
}

impl NoiseKind {
    pub fn is_feature_dependent(self) -> bool {
        matches!(
            self,
            NoiseKind::UniformX
                | NoiseKind::Resampling
                | NoiseKind::InverseResampling
                | NoiseKind::GapMin
                | NoiseKind::GapMax
        )
    }

    /// Uniform-x has a constant keep probability, so it needs no alpha.
    pub fn needs_alpha(self) -> bool {
        matches!(
            self,
            NoiseKind::Resampling
                | NoiseKind::InverseResampling
                | NoiseKind::GapMin
                | NoiseKind::GapMax
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::ClassDependent => "class_dependent",
            NoiseKind::UniformX => "uniform_x",
            NoiseKind::Resampling => "resampling",
            NoiseKind::InverseResampling => "inverse_resampling",
            NoiseKind::GapMin => "gap_min",
            NoiseKind::GapMax => "gap_max",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "uniform" => Ok(NoiseKind::Uniform),
            "class" | "class_dependent" => Ok(NoiseKind::ClassDependent),
            "uniform_x" => Ok(NoiseKind::UniformX),
            "resampling" => Ok(NoiseKind::Resampling),
            "inverse_resampling" => Ok(NoiseKind::InverseResampling),
            "gap_min" => Ok(NoiseKind::GapMin),
            "gap_max" => Ok(NoiseKind::GapMax),
            other => Err(invalid_param(format!("unknown noise kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tagged description of one noise channel.
///
/// `spread`/`targets` are present for class-dependent specs; `alpha` is
/// present on feature-dependent specs once calibrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl NoiseSpec {
    pub fn uniform(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self {
            kind: NoiseKind::Uniform,
            epsilon,
            spread: None,
            targets: None,
            alpha: None,
        })
    }

    /// Class-dependent spec for `c` classes. `targets` gives each class its
    /// `spread` flip targets; `None` assigns class k the classes
    /// (k+1, ..., k+spread) mod c.
    pub fn class_dependent(
        c: usize,
        epsilon: f64,
        spread: usize,
        targets: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        if c < 2 {
            return Err(invalid_param("class-dependent noise needs c >= 2"));
        }
        if spread < 1 || spread > c - 1 {
            return Err(invalid_param(format!(
                "spread must be in [1, {}], got {spread}",
                c - 1
            )));
        }
        let targets = match targets {
            Some(t) => {
                validate_targets(&t, c, spread)?;
                t
            }
            None => auto_targets(c, spread),
        };
        Ok(Self {
            kind: NoiseKind::ClassDependent,
            epsilon,
            spread: Some(spread),
            targets: Some(targets),
            alpha: None,
        })
    }

    pub fn feature_dependent(kind: NoiseKind, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !kind.is_feature_dependent() {
            return Err(invalid_param(format!(
                "{kind} is not a feature-dependent noise kind"
            )));
        }
        Ok(Self {
            kind,
            epsilon,
            spread: None,
            targets: None,
            alpha: None,
        })
    }

    /// True once the spec can be evaluated pointwise (alpha present where
    /// required).
    pub fn is_calibrated(&self) -> bool {
        !self.kind.needs_alpha() || self.alpha.is_some()
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(invalid_param("alpha must be positive and finite"));
        }
        self.alpha = Some(alpha);
        Ok(self)
    }

    /// Re-validates a spec built from external data (JSON).
    pub fn validate(&self, c: Option<usize>) -> Result<()> {
        check_epsilon(self.epsilon)?;
        match self.kind {
            NoiseKind::ClassDependent => {
                let spread = self
                    .spread
                    .ok_or_else(|| invalid_param("class-dependent spec needs spread"))?;
                let targets = self
                    .targets
                    .as_ref()
                    .ok_or_else(|| invalid_param("class-dependent spec needs targets"))?;
                let c = c.unwrap_or(targets.len());
                validate_targets(targets, c, spread)?;
            }
            _ => {
                if self.spread.is_some() || self.targets.is_some() {
                    return Err(invalid_param(
                        "spread/targets only apply to class-dependent noise",
                    ));
                }
            }
        }
        if let Some(alpha) = self.alpha {
            if !self.kind.needs_alpha() {
                return Err(invalid_param("alpha only applies to calibrated kinds"));
            }
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(invalid_param("alpha must be positive and finite"));
            }
        }
        Ok(())
    }

    fn alpha_or_err(&self) -> Result<f64> {
        if !self.kind.needs_alpha() {
            return Err(Error::InvalidState(format!(
                "{} carries no alpha",
                self.kind
            )));
        }
        self.alpha.ok_or_else(|| {
            Error::InvalidState(format!("{} spec must be calibrated before use", self.kind))
        })
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) || !epsilon.is_finite() {
        return Err(invalid_param(format!(
            "epsilon must be in [0, 1], got {epsilon}"
        )));
    }
    Ok(())
}

fn auto_targets(c: usize, spread: usize) -> Vec<Vec<usize>> {
    (0..c)
        .map(|k| (1..=spread).map(|j| (k + j) % c).collect())
        .collect()
}

fn validate_targets(targets: &[Vec<usize>], c: usize, spread: usize) -> Result<()> {
    if targets.len() != c {
        return Err(invalid_param(format!(
            "targets must list {c} classes, got {}",
            targets.len()
        )));
    }
    for (k, list) in targets.iter().enumerate() {
        if list.len() != spread {
            return Err(invalid_param(format!(
                "class {k} must have exactly {spread} targets"
            )));
        }
        let mut seen = vec![false; c];
        for &t in list {
            if t >= c {
                return Err(invalid_param(format!("class {k} target {t} out of range")));
            }
            if t == k {
                return Err(invalid_param(format!("class {k} cannot target itself")));
            }
            if seen[t] {
                return Err(invalid_param(format!("class {k} lists target {t} twice")));
            }
            seen[t] = true;
        }
    }
    Ok(())
}

/// Row-stochastic label transition matrix; entry (k, i) = P[Y = i | Y* = k].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    c: usize,
    rows: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(c: usize, rows: Vec<f64>) -> Result<Self> {
        if c == 0 || rows.len() != c * c {
            return Err(invalid_param("transition matrix must be c x c"));
        }
        for k in 0..c {
            let row = &rows[k * c..(k + 1) * c];
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(invalid_param(format!("row {k} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(invalid_param(format!("row {k} sums to {sum}, not 1")));
            }
        }
        Ok(Self { c, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn entry(&self, k: usize, i: usize) -> f64 {
        self.rows[k * self.c + i]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.c..(k + 1) * self.c]
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for k in 0..self.c {
            let cells: Vec<String> = self.row(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Uniform channel: diagonal 1 - eps, every off-diagonal eps / (c - 1).
pub fn uniform_channel(c: usize, epsilon: f64) -> Result<TransitionMatrix> {
    if c < 2 {
        return Err(invalid_param("uniform channel needs c >= 2"));
    }
    check_epsilon(epsilon)?;
    let off = epsilon / (c - 1) as f64;
    let mut rows = vec![off; c * c];
    for k in 0..c {
        rows[k * c + k] = 1.0 - epsilon;
    }
    TransitionMatrix::new(c, rows)
}

/// Class-dependent channel: diagonal 1 - eps; each of the `spread` designated
/// targets receives eps / spread; everything else is zero.
pub fn class_channel(
    c: usize,
    epsilon: f64,
    spread: usize,
    targets: Option<Vec<Vec<usize>>>,
) -> Result<TransitionMatrix> {
    let spec = NoiseSpec::class_dependent(c, epsilon, spread, targets)?;
    transition_matrix(&spec, c)
}

/// Materializes the transition matrix of a uniform or class-dependent spec.
pub fn transition_matrix(spec: &NoiseSpec, c: usize) -> Result<TransitionMatrix> {
    match spec.kind {
        NoiseKind::Uniform => uniform_channel(c, spec.epsilon),
        NoiseKind::ClassDependent => {
            let targets = spec
                .targets
                .as_ref()
                .ok_or_else(|| Error::InvalidState("class-dependent spec lacks targets".into()))?;
            let spread = spec.spread.unwrap_or(0);
            validate_targets(targets, c, spread)?;
            let share = spec.epsilon / spread as f64;
            let mut rows = vec![0.0; c * c];
            for (k, list) in targets.iter().enumerate() {
                rows[k * c + k] = 1.0 - spec.epsilon;
                for &t in list {
                    rows[k * c + t] = share;
                }
            }
            TransitionMatrix::new(c, rows)
        }
        other => Err(invalid_param(format!(
            "{other} has no x-independent transition matrix"
        ))),
    }
}

/// Ratio of the true-class posterior to the best wrong-class posterior.
/// Small near decision boundaries; may be infinite when every wrong-class
/// posterior underflows.
pub fn margin_ratio(posterior: &[f64], k: usize) -> f64 {
    let best_wrong = posterior
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    posterior[k] / best_wrong
}

fn argmax_wrong(posterior: &[f64], k: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &v) in posterior.iter().enumerate() {
        if j != k && v > best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Uncalibrated keep weight of a feature-dependent kind at one sample.
fn keep_weight(kind: NoiseKind, posterior: &[f64], k: usize) -> f64 {
    match kind {
        NoiseKind::Resampling => posterior[k],
        NoiseKind::InverseResampling => 1.0 / posterior[k].max(POSTERIOR_FLOOR),
        NoiseKind::GapMin => margin_ratio(posterior, k),
        NoiseKind::GapMax => 1.0 / margin_ratio(posterior, k),
        _ => unreachable!("keep_weight is only defined for calibrated kinds"),
    }
}

/// How the flip mass of a row is distributed over the wrong classes.
enum FlipTargets {
    /// Weighted over all wrong classes (weights need not be normalized).
    Weighted(Vec<f64>),
    /// All mass on one class.
    Point(usize),
}

/// Keep probability and flip-target distribution for true class `k` at a
/// point with clean posterior `posterior` (unused by the x-independent
/// kinds).
fn flip_parts(
    spec: &NoiseSpec,
    c: usize,
    posterior: Option<&[f64]>,
    k: usize,
) -> Result<(f64, FlipTargets)> {
    match spec.kind {
        NoiseKind::Uniform => Ok((1.0 - spec.epsilon, FlipTargets::Weighted(vec![1.0; c]))),
        NoiseKind::ClassDependent => {
            let targets = spec
                .targets
                .as_ref()
                .ok_or_else(|| Error::InvalidState("class-dependent spec lacks targets".into()))?;
            let mut weights = vec![0.0; c];
            for &t in &targets[k] {
                weights[t] = 1.0;
            }
            Ok((1.0 - spec.epsilon, FlipTargets::Weighted(weights)))
        }
        NoiseKind::UniformX => {
            let m = posterior.expect("feature-dependent kinds require a posterior");
            Ok((1.0 - spec.epsilon, FlipTargets::Weighted(m.to_vec())))
        }
        NoiseKind::Resampling | NoiseKind::InverseResampling => {
            let m = posterior.expect("feature-dependent kinds require a posterior");
            let alpha = spec.alpha_or_err()?;
            // Zero noise is the identity channel everywhere, not just on the
            // calibration reference.
            let keep = if spec.epsilon == 0.0 {
                1.0
            } else {
                (alpha * keep_weight(spec.kind, m, k)).clamp(0.0, 1.0)
            };
            Ok((keep, FlipTargets::Weighted(m.to_vec())))
        }
        NoiseKind::GapMin | NoiseKind::GapMax => {
            let m = posterior.expect("feature-dependent kinds require a posterior");
            let alpha = spec.alpha_or_err()?;
            let keep = if spec.epsilon == 0.0 {
                1.0
            } else {
                (alpha * keep_weight(spec.kind, m, k)).clamp(0.0, 1.0)
            };
            Ok((keep, FlipTargets::Point(argmax_wrong(m, k))))
        }
    }
}

/// One channel row eta_k(x) as a probability vector over observed labels.
pub fn eta_at(
    spec: &NoiseSpec,
    mixture: &GaussianMixture,
    x: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    let c = mixture.num_classes();
    if k >= c {
        return Err(invalid_param(format!("true class {k} out of range")));
    }
    let posterior;
    let m = if spec.kind.is_feature_dependent() {
        posterior = mixture.clean_posterior(x)?;
        Some(posterior.as_slice())
    } else {
        None
    };
    eta_row(spec, c, m, k)
}

fn eta_row(spec: &NoiseSpec, c: usize, posterior: Option<&[f64]>, k: usize) -> Result<Vec<f64>> {
    let (keep, targets) = flip_parts(spec, c, posterior, k)?;
    let mut row = vec![0.0; c];
    row[k] = keep;
    let flip_mass = 1.0 - keep;
    match targets {
        FlipTargets::Point(j) => row[j] += flip_mass,
        FlipTargets::Weighted(weights) => {
            let total: f64 = weights
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &w)| w)
                .sum();
            if total > 0.0 && total.is_finite() {
                for (j, &w) in weights.iter().enumerate() {
                    if j != k {
                        row[j] += flip_mass * w / total;
                    }
                }
            } else {
                // Degenerate flip-target distribution: fall back to uniform
                // over the wrong classes so the flip mass stays placeable.
                let share = flip_mass / (c - 1) as f64;
                for (j, item) in row.iter_mut().enumerate() {
                    if j != k {
                        *item += share;
                    }
                }
            }
        }
    }
    Ok(row)
}

/// Outcome of resolving a feature-dependent spec's proportionality constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub achieved_flip_rate: f64,
}

/// Resolves alpha so the mean flip probability over `reference` equals the
/// spec's epsilon within `tolerance`, and returns the calibrated spec.
///
/// The mean keep probability mean_i clip(alpha * w_i, 0, 1) is nondecreasing
/// and continuous in alpha, so bisection applies. Uniform-x needs no alpha
/// and is rejected here.
pub fn calibrate(
    spec: &NoiseSpec,
    reference: &LabeledDataset,
    mixture: &GaussianMixture,
    tolerance: f64,
) -> Result<(NoiseSpec, CalibrationResult)> {
    if !spec.kind.needs_alpha() {
        return Err(invalid_param(format!(
            "{} does not take calibration",
            spec.kind
        )));
    }
    if reference.is_empty() {
        return Err(invalid_param("calibration reference must be nonempty"));
    }
    if !tolerance.is_finite() || tolerance <= 0.0 {
        return Err(invalid_param("calibration tolerance must be positive"));
    }
    if reference.dim() != mixture.dim() {
        return Err(invalid_param("reference dimension does not match mixture"));
    }
    if spec.epsilon == 0.0 {
        // The zero-noise channel is the identity regardless of alpha; solving
        // for saturation can even be infeasible (zero keep weights).
        let calibrated = spec.clone().with_alpha(1.0)?;
        return Ok((
            calibrated,
            CalibrationResult {
                alpha: 1.0,
                achieved_flip_rate: 0.0,
            },
        ));
    }
    let weights: Vec<f64> = (0..reference.len())
        .map(|i| {
            let m = mixture.clean_posterior(reference.row(i))?;
            Ok(keep_weight(spec.kind, &m, reference.true_labels()[i]))
        })
        .collect::<Result<_>>()?;
    let alpha = solve_alpha(&weights, 1.0 - spec.epsilon, tolerance)?;
    let achieved_keep = mean_clipped(&weights, alpha);
    let calibrated = spec.clone().with_alpha(alpha)?;
    Ok((
        calibrated,
        CalibrationResult {
            alpha,
            achieved_flip_rate: 1.0 - achieved_keep,
        },
    ))
}

fn mean_clipped(weights: &[f64], alpha: f64) -> f64 {
    weights
        .iter()
        .map(|&w| (alpha * w).clamp(0.0, 1.0))
        .sum::<f64>()
        / weights.len() as f64
}

/// Finds alpha with mean_i clip(alpha * w_i, 0, 1) = target within tol.
/// Shared by channel calibration and embedding injection (where the weights
/// are flip weights and the target is eps itself).
pub(crate) fn solve_alpha(weights: &[f64], target: f64, tol: f64) -> Result<f64> {
    let mut hi = 1.0;
    let mut doublings = 0;
    while mean_clipped(weights, hi) < target - tol {
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_BISECTION_STEPS {
            return Err(Error::Convergence(format!(
                "mean keep probability cannot reach {target}"
            )));
        }
    }
    if (mean_clipped(weights, hi) - target).abs() <= tol {
        return Ok(hi);
    }
    let mut lo = 0.0;
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let g = mean_clipped(weights, mid);
        if (g - target).abs() <= tol && mid > 0.0 {
            return Ok(mid);
        }
        if g < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence(format!(
        "no alpha with mean keep within {tol} of {target} after {MAX_BISECTION_STEPS} steps"
    )))
}

/// Whether noise application flips by independent coin tosses or flips an
/// exact count chosen by weighted sampling without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    Bernoulli,
    ExactCount,
}

/// Applies the channel to a dataset, filling noisy labels and the flip mask.
///
/// `mixture` may be omitted for the x-independent kinds; feature-dependent
/// kinds need it for the posterior (and must be calibrated first). In
/// bernoulli mode each sample flips independently with probability
/// 1 - eta_kk(x); in exact-count mode exactly round(eps * n) samples flip,
/// chosen by weighted sampling without replacement with those probabilities
/// as weights. Deterministic per seed.
pub fn apply(
    spec: &NoiseSpec,
    dataset: &LabeledDataset,
    mixture: Option<&GaussianMixture>,
    seed: u64,
    mode: ApplyMode,
) -> Result<LabeledDataset> {
    if spec.kind.is_feature_dependent() && mixture.is_none() {
        return Err(invalid_param(format!(
            "{} noise requires the mixture",
            spec.kind
        )));
    }
    if !spec.is_calibrated() {
        return Err(Error::InvalidState(format!(
            "{} spec must be calibrated before apply",
            spec.kind
        )));
    }
    let c = match (mixture, &spec.targets) {
        (Some(m), _) => m.num_classes(),
        (None, Some(t)) => t.len(),
        (None, None) => dataset.num_classes().max(2),
    };
    if let Some(m) = mixture {
        if m.dim() != dataset.dim() {
            return Err(invalid_param("dataset dimension does not match mixture"));
        }
    }
    if dataset.true_labels().iter().any(|&l| l >= c) {
        return Err(invalid_param("dataset labels exceed the class count"));
    }
    let n = dataset.len();
    let posterior_at = |i: usize| -> Result<Option<Vec<f64>>> {
        if spec.kind.is_feature_dependent() {
            Ok(Some(mixture.unwrap().clean_posterior(dataset.row(i))?))
        } else {
            Ok(None)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = dataset.true_labels().to_vec();
    match mode {
        ApplyMode::Bernoulli => {
            for (i, slot) in noisy.iter_mut().enumerate() {
                let k = dataset.true_labels()[i];
                let post = posterior_at(i)?;
                let (keep, targets) = flip_parts(spec, c, post.as_deref(), k)?;
                let u: f64 = rng.random();
                if u < 1.0 - keep {
                    *slot = draw_flip_target(&targets, c, k, &mut rng);
                }
            }
        }
        ApplyMode::ExactCount => {
            let mut flip_probs = Vec::with_capacity(n);
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let k = dataset.true_labels()[i];
                let post = posterior_at(i)?;
                let (keep, targets) = flip_parts(spec, c, post.as_deref(), k)?;
                flip_probs.push(1.0 - keep);
                parts.push(targets);
            }
            let n_flips = (spec.epsilon * n as f64).round() as usize;
            let mut chosen = weighted_indices_without_replacement(&flip_probs, n_flips, &mut rng);
            chosen.sort_unstable();
            for i in chosen {
                let k = dataset.true_labels()[i];
                noisy[i] = draw_flip_target(&parts[i], c, k, &mut rng);
            }
        }
    }
    dataset.with_noisy(noisy)
}

fn draw_flip_target<R: Rng>(targets: &FlipTargets, c: usize, k: usize, rng: &mut R) -> usize {
    match targets {
        FlipTargets::Point(j) => *j,
        FlipTargets::Weighted(weights) => {
            let total: f64 = weights
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &w)| w)
                .sum();
            if !total.is_finite() || total <= 0.0 {
                // Uniform fallback over wrong classes.
                let idx = rng.random_range(0..c - 1);
                return (0..c).filter(|&j| j != k).nth(idx).unwrap();
            }
            let v: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last = k;
            for (j, &w) in weights.iter().enumerate() {
                if j == k {
                    continue;
                }
                acc += w;
                last = j;
                if v < acc {
                    return j;
                }
            }
            last
        }
    }
}

/// Draws one observed label for a sample with true class `k` at `x` through
/// the channel: keep with probability eta_kk(x), otherwise draw a wrong class
/// from the flip-target distribution.
pub fn sample_noisy_label<R: Rng>(
    spec: &NoiseSpec,
    mixture: &GaussianMixture,
    x: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<usize> {
    let c = mixture.num_classes();
    let posterior;
    let m = if spec.kind.is_feature_dependent() {
        posterior = mixture.clean_posterior(x)?;
        Some(posterior.as_slice())
    } else {
        None
    };
    let (keep, targets) = flip_parts(spec, c, m, k)?;
    let u: f64 = rng.random();
    if u < 1.0 - keep {
        Ok(draw_flip_target(&targets, c, k, rng))
    } else {
        Ok(k)
    }
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys ln(u)/w).
/// Zero-weight items sort last; ties break by index so draws are fully
/// deterministic given the RNG stream.
pub(crate) fn weighted_indices_without_replacement<R: Rng>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // u in (0, 1] keeps ln(u) finite.
            let u: f64 = 1.0 - rng.random::<f64>();
            let key = if w > 0.0 {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.truncate(k.min(weights.len()));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Noisy posterior m_k(x) = sum_i eta_ik(x) m*_i(x).
pub fn noisy_posterior(mixture: &GaussianMixture, spec: &NoiseSpec, x: &[f64]) -> Result<Vec<f64>> {
    if !spec.is_calibrated() {
        return Err(Error::InvalidState(format!(
            "{} spec must be calibrated before use",
            spec.kind
        )));
    }
    let c = mixture.num_classes();
    let m_star = mixture.clean_posterior(x)?;
    let posterior = if spec.kind.is_feature_dependent() {
        Some(m_star.as_slice())
    } else {
        None
    };
    let mut out = vec![0.0; c];
    for (i, &mass) in m_star.iter().enumerate() {
        let row = eta_row(spec, c, posterior, i)?;
        for k in 0..c {
            out[k] += row[k] * mass;
        }
    }
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// The worst-case channel: a calibrated gap-max spec. The keep probability is
/// inversely proportional to the margin ratio and all flip mass lands on the
/// most likely wrong class.
pub fn worst_case_channel(
    mixture: &GaussianMixture,
    epsilon: f64,
    reference: &LabeledDataset,
) -> Result<NoiseSpec> {
    let spec = NoiseSpec::feature_dependent(NoiseKind::GapMax, epsilon)?;
    let (calibrated, _) = calibrate(&spec, reference, mixture, DEFAULT_CALIBRATION_TOL)?;
    Ok(calibrated)
}
