//! Gaussian mixture generative model: seeded benchmark layouts, stratified
//! sampling, and the exact clean posterior.
//!
//! The posterior is evaluated in log space with max subtraction so it stays
//! exact arbitrarily far from every component mean.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Tolerance for prior normalization and posterior sum checks.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// One mixture component: a (possibly full-covariance) Gaussian.
///
/// The covariance must be symmetric positive definite; the Cholesky factor is
/// computed once at construction and reused for sampling and log-density
/// evaluation.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// -(d/2) ln(2 pi) - (1/2) ln det(cov), cached.
    log_norm: f64,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(invalid_param("component dimension must be >= 1"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid_param("component mean must be finite"));
        }
        if covariance.len() != d || covariance.iter().any(|row| row.len() != d) {
            return Err(invalid_param(format!(
                "covariance must be {d}x{d} to match the mean"
            )));
        }
        let mut cov = DMatrix::zeros(d, d);
        let mut max_abs: f64 = 1.0;
        for (i, row) in covariance.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(invalid_param("covariance entries must be finite"));
                }
                cov[(i, j)] = v;
                max_abs = max_abs.max(v.abs());
            }
        }
        let sym_tol = 1e-9 * max_abs;
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > sym_tol {
                    return Err(invalid_param("covariance must be symmetric"));
                }
            }
        }
        // Symmetrize before factorization to wash out representation noise.
        let cov = (&cov + cov.transpose()) * 0.5;
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| invalid_param("covariance must be positive definite"))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (d as f64) * LN_2PI - 0.5 * log_det;
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance: cov,
            chol,
            log_norm,
        })
    }

    /// Unit-variance isotropic component.
    pub fn isotropic(mean: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance_rows(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.covariance[(i, j)]).collect())
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let diff = DVector::from_row_slice(x) - &self.mean;
        let solved = self.chol.solve(&diff);
        self.log_norm - 0.5 * diff.dot(&solved)
    }

    fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mean + self.chol.l() * z;
        out.copy_from_slice(x.as_slice());
    }
}

/// Class-conditional Gaussian mixture with class priors.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    priors: Vec<f64>,
}

impl GaussianMixture {
    /// Builds a mixture from components and priors.
    ///
    /// Priors must be nonnegative and sum to 1 within `PROB_SUM_TOL`; all
    /// components must share one dimension. A single-component mixture is
    /// accepted (useful for degenerate tests); classification entry points
    /// require at least two classes.
    pub fn new(components: Vec<GaussianComponent>, priors: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid_param("mixture needs at least one component"));
        }
        if priors.len() != components.len() {
            return Err(invalid_param("priors length must match component count"));
        }
        if priors.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(invalid_param("priors must be nonnegative and finite"));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid_param(format!("priors must sum to 1, got {sum}")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(invalid_param("all components must share one dimension"));
        }
        Ok(Self { components, priors })
    }

    pub fn num_classes(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Exact clean posterior P[class = k | x], evaluated in log space.
    pub fn clean_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(invalid_param(format!(
                "probe point has dimension {}, mixture has {}",
                x.len(),
                self.dim()
            )));
        }
        let log_unnorm: Vec<f64> = self
            .components
            .iter()
            .zip(&self.priors)
            .map(|(comp, &pi)| pi.ln() + comp.log_density(x))
            .collect();
        let max = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            // Cannot occur for finite probes, but guard the degenerate case.
            return Err(Error::Numerical(
                "all class densities degenerate at probe point".into(),
            ));
        }
        let mut weights: Vec<f64> = log_unnorm.iter().map(|&lp| (lp - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(weights)
    }

    /// Draws one prior-weighted point; returns (features, class).
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class = self.num_classes() - 1;
        for (k, &pi) in self.priors.iter().enumerate() {
            acc += pi;
            if u < acc {
                class = k;
                break;
            }
        }
        let mut x = vec![0.0; self.dim()];
        self.components[class].sample_into(rng, &mut x);
        (x, class)
    }

    /// Stratified sample: exactly `n_per_class` rows per class, grouped by
    /// class, deterministic per seed. Noisy labels are absent.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
        if n_per_class == 0 {
            return Err(invalid_param("n_per_class must be >= 1"));
        }
        let c = self.num_classes();
        let d = self.dim();
        let n = c * n_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = vec![0.0; n * d];
        let mut labels = Vec::with_capacity(n);
        for (k, comp) in self.components.iter().enumerate() {
            for i in 0..n_per_class {
                let row = k * n_per_class + i;
                comp.sample_into(&mut rng, &mut features[row * d..(row + 1) * d]);
                labels.push(k);
            }
        }
        LabeledDataset::new(features, d, labels)
    }

    /// Monte Carlo estimate of the mean maximum posterior, E[max_k m*_k(X)],
    /// over prior-weighted draws. This is the Bayes accuracy of the clean
    /// plug-in and the natural empirical stand-in for the mean true-class
    /// posterior on well-separated data.
    pub fn mean_max_posterior(&self, n: usize, seed: u64) -> Result<f64> {
        if n == 0 {
            return Err(invalid_param("n must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        for _ in 0..n {
            let (x, _) = self.draw(&mut rng);
            let post = self.clean_posterior(&x)?;
            acc += post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        Ok(acc / n as f64)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let repr = MixtureRepr {
            priors: self.priors.clone(),
            means: self.components.iter().map(|c| c.mean().to_vec()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| c.covariance_rows())
                .collect(),
        };
        serde_json::to_value(repr).expect("mixture serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let repr: MixtureRepr = serde_json::from_value(value.clone())?;
        if repr.means.len() != repr.priors.len() || repr.covariances.len() != repr.priors.len() {
            return Err(invalid_param(
                "mixture json: priors, means, covariances must have equal length",
            ));
        }
        let components = repr
            .means
            .into_iter()
            .zip(repr.covariances)
            .map(|(mean, cov)| GaussianComponent::new(mean, cov))
            .collect::<Result<Vec<_>>>()?;
        Self::new(components, repr.priors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_json())?;
        writeln!(w)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_json(&value)
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    priors: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

/// Half of the within-pair mean distance in the benchmark layout; pairs end
/// up 1.2 apart, well under the 2-sigma overlap threshold.
const PAIR_HALF_OFFSET: f64 = 0.6;

/// Benchmark mixture: equal priors, unit isotropic covariances, and a seeded
/// layout that pairs classes on well-spaced anchors so some class pairs
/// overlap (mean distance < 2) while cross-anchor pairs stay far apart
/// (> 6 whenever c >= 4 and separation >= 3).
pub fn make_benchmark_mixture(
    c: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<GaussianMixture> {
    if c < 2 {
        return Err(invalid_param("benchmark mixture needs c >= 2"));
    }
    if d < 1 {
        return Err(invalid_param("benchmark mixture needs d >= 1"));
    }
    if !separation.is_finite() || separation <= 0.0 {
        return Err(invalid_param("separation must be positive and finite"));
    }
    let n_anchors = c.div_ceil(2);
    let spacing = 2.0 * separation + 2.0;
    let anchors = anchor_layout(n_anchors, d, spacing);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    for (a, anchor) in anchors.iter().enumerate() {
        let lone = 2 * a + 1 >= c;
        if lone {
            means.push(anchor.clone());
        } else {
            let u = random_unit_vector(d, &mut rng);
            let plus: Vec<f64> = anchor
                .iter()
                .zip(&u)
                .map(|(&m, &ui)| m + PAIR_HALF_OFFSET * ui)
                .collect();
            let minus: Vec<f64> = anchor
                .iter()
                .zip(&u)
                .map(|(&m, &ui)| m - PAIR_HALF_OFFSET * ui)
                .collect();
            means.push(plus);
            means.push(minus);
        }
    }
    mixture_from_unit_means(means)
}

/// Mixture with equal priors, unit covariances, and every pairwise mean
/// distance at least `spacing`. Deterministic; used where the posterior must
/// be nearly one-hot almost everywhere.
pub fn make_separated_mixture(c: usize, d: usize, spacing: f64) -> Result<GaussianMixture> {
    if c < 2 {
        return Err(invalid_param("separated mixture needs c >= 2"));
    }
    if d < 1 {
        return Err(invalid_param("separated mixture needs d >= 1"));
    }
    if !spacing.is_finite() || spacing <= 0.0 {
        return Err(invalid_param("spacing must be positive and finite"));
    }
    mixture_from_unit_means(anchor_layout(c, d, spacing))
}

fn mixture_from_unit_means(means: Vec<Vec<f64>>) -> Result<GaussianMixture> {
    let c = means.len();
    let components = means
        .into_iter()
        .map(GaussianComponent::isotropic)
        .collect::<Result<Vec<_>>>()?;
    let priors = vec![1.0 / c as f64; c];
    GaussianMixture::new(components, priors)
}

/// Anchor positions with pairwise distance >= spacing: a line for d = 1, a
/// circle in the first two coordinates otherwise (adjacent chord = spacing).
fn anchor_layout(k: usize, d: usize, spacing: f64) -> Vec<Vec<f64>> {
    if k == 1 {
        return vec![vec![0.0; d]];
    }
    if d == 1 {
        return (0..k).map(|i| vec![i as f64 * spacing]).collect();
    }
    let radius = spacing / (2.0 * (std::f64::consts::PI / k as f64).sin());
    (0..k)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let mut v = vec![0.0; d];
            v[0] = radius * theta.cos();
            v[1] = radius * theta.sin();
            v
        })
        .collect()
}

fn random_unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    if d == 1 {
        return vec![if rng.random::<bool>() { 1.0 } else { -1.0 }];
    }
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Which label column an operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    True,
    Noisy,
}

/// A feature matrix with true labels and, after noise application, noisy
/// labels plus the flip mask.
///
/// Invariant: noisy labels and the flip mask are either both present or both
/// absent, and `flip_mask[i] == (noisy_labels[i] != true_labels[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    d: usize,
    true_labels: Vec<usize>,
    noisy_labels: Option<Vec<usize>>,
    flip_mask: Option<Vec<bool>>,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, d: usize, true_labels: Vec<usize>) -> Result<Self> {
        if d == 0 {
            return Err(invalid_param("dataset dimension must be >= 1"));
        }
        if features.len() != d * true_labels.len() {
            return Err(invalid_param(format!(
                "feature matrix has {} entries, expected {} x {}",
                features.len(),
                true_labels.len(),
                d
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid_param("features must be finite"));
        }
        Ok(Self {
            features,
            d,
            true_labels,
            noisy_labels: None,
            flip_mask: None,
        })
    }

    /// Returns a copy of `self` with noisy labels attached; the flip mask is
    /// derived so the dataset invariant holds by construction.
    pub fn with_noisy(&self, noisy_labels: Vec<usize>) -> Result<Self> {
        if noisy_labels.len() != self.len() {
            return Err(invalid_param("noisy label vector length mismatch"));
        }
        let flip_mask = noisy_labels
            .iter()
            .zip(&self.true_labels)
            .map(|(&y, &t)| y != t)
            .collect();
        Ok(Self {
            features: self.features.clone(),
            d: self.d,
            true_labels: self.true_labels.clone(),
            noisy_labels: Some(noisy_labels),
            flip_mask: Some(flip_mask),
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn noisy_labels(&self) -> Option<&[usize]> {
        self.noisy_labels.as_deref()
    }

    pub fn flip_mask(&self) -> Option<&[bool]> {
        self.flip_mask.as_deref()
    }

    pub fn labels(&self, source: LabelSource) -> Result<&[usize]> {
        match source {
            LabelSource::True => Ok(&self.true_labels),
            LabelSource::Noisy => self
                .noisy_labels
                .as_deref()
                .ok_or_else(|| Error::InvalidState("dataset has no noisy labels".into())),
        }
    }

    /// Smallest class count covering every label present (max label + 1).
    pub fn num_classes(&self) -> usize {
        let t = self.true_labels.iter().copied().max().unwrap_or(0);
        let n = self
            .noisy_labels
            .as_ref()
            .and_then(|v| v.iter().copied().max())
            .unwrap_or(0);
        t.max(n) + 1
    }

    /// Writes `id,label,noisy_label,f0,...,f{d-1}`; the noisy column is empty
    /// when noisy labels are absent.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "id,label,noisy_label")?;
        for j in 0..self.d {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{i},{}", self.true_labels[i])?;
            match &self.noisy_labels {
                Some(noisy) => write!(w, ",{}", noisy[i])?,
                None => write!(w, ",")?,
            }
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv(&mut w)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 4 || cols[0] != "id" || cols[1] != "label" || cols[2] != "noisy_label" {
            return Err(Error::Parse {
                line: 1,
                message: "expected header id,label,noisy_label,f0,...".into(),
            });
        }
        let d = cols.len() - 3;
        for (j, name) in cols[3..].iter().enumerate() {
            if *name != format!("f{j}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected feature column f{j}, found {name}"),
                });
            }
        }
        let mut features = Vec::new();
        let mut true_labels = Vec::new();
        let mut noisy_labels: Vec<Option<usize>> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != cols.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", cols.len(), record.len()),
                });
            }
            let label: usize = parse_field(&record[1], line, "label")?;
            true_labels.push(label);
            let noisy_field = record[2].trim();
            noisy_labels.push(if noisy_field.is_empty() {
                None
            } else {
                Some(parse_field(noisy_field, line, "noisy_label")?)
            });
            for j in 0..d {
                let v: f64 = parse_field(&record[3 + j], line, "feature")?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite feature value".into(),
                    });
                }
                features.push(v);
            }
        }
        let base = Self::new(features, d, true_labels)?;
        let present = noisy_labels.iter().filter(|v| v.is_some()).count();
        if present == 0 {
            Ok(base)
        } else if present == noisy_labels.len() {
            base.with_noisy(noisy_labels.into_iter().map(|v| v.unwrap()).collect())
        } else {
            Err(Error::Parse {
                line: 0,
                message: "noisy_label column must be fully present or fully empty".into(),
            })
        }
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?))
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} from {s:?}"),
    })
}
