//! Center-based noise injection for precomputed feature (or hash) datasets.
//!
//! Each class gets a center — the mean of its feature vectors — and an
//! ordered list of its `s` nearest other-class centers. Class-dependent
//! injection flips each sample with probability eps to a uniformly chosen
//! center in that list. Feature-dependent injection weights each sample by
//! the inverse distance to its nearest candidate center (ambiguous samples
//! flip first), calibrated so the mean flip rate equals eps, and draws the
//! target with probability proportional to the inverse distance to each
//! candidate center.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::{solve_alpha, weighted_indices_without_replacement, ApplyMode};
use crate::error::{invalid_param, Error, Result};

/// Additive floor on distances before inversion.
pub const DISTANCE_FLOOR: f64 = 1e-9;

/// Labeled feature vectors loaded from an external source.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    ids: Vec<String>,
    labels: Vec<usize>,
    features: Vec<f64>,
    d: usize,
}

impl EmbeddedDataset {
    /// Labels must be contiguous 0..c-1 with every class nonempty; use
    /// [`EmbeddedDataset::load_csv_with_remap`] for messier label sets.
    pub fn new(ids: Vec<String>, labels: Vec<usize>, features: Vec<f64>, d: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid_param("embedded dataset must be nonempty"));
        }
        if d == 0 {
            return Err(invalid_param("feature dimension must be >= 1"));
        }
        if labels.len() != ids.len() || features.len() != ids.len() * d {
            return Err(invalid_param("ids, labels, features lengths disagree"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid_param("features must be finite"));
        }
        let c = labels.iter().copied().max().unwrap() + 1;
        let mut counts = vec![0usize; c];
        for &l in &labels {
            counts[l] += 1;
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(invalid_param(format!(
                "labels must be contiguous: class {missing} is empty (remap or fix the data)"
            )));
        }
        Ok(Self {
            ids,
            labels,
            features,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap() + 1
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// Strict load: header `id,label,f0,...,f{d-1}`, finite features,
    /// contiguous labels.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (ds, remap) = Self::read_csv_impl(BufReader::new(File::open(path)?), false)?;
        debug_assert!(remap.is_none());
        Ok(ds)
    }

    /// Like [`EmbeddedDataset::load_csv`], but non-contiguous label values
    /// are remapped to 0..c-1; the returned table gives the original value
    /// for each remapped label.
    pub fn load_csv_with_remap(path: impl AsRef<Path>) -> Result<(Self, Option<Vec<u64>>)> {
        Self::read_csv_impl(BufReader::new(File::open(path)?), true)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        Ok(Self::read_csv_impl(r, false)?.0)
    }

    fn read_csv_impl<R: Read>(r: R, allow_remap: bool) -> Result<(Self, Option<Vec<u64>>)> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
            return Err(Error::Parse {
                line: 1,
                message: "expected header id,label,f0,...".into(),
            });
        }
        let d = cols.len() - 2;
        for (j, name) in cols[2..].iter().enumerate() {
            if *name != format!("f{j}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected feature column f{j}, found {name}"),
                });
            }
        }
        let mut ids = Vec::new();
        let mut raw_labels: Vec<u64> = Vec::new();
        let mut features = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != cols.len() {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "expected {} fields, found {} (missing feature?)",
                        cols.len(),
                        record.len()
                    ),
                });
            }
            ids.push(record[0].to_string());
            let label: u64 = record[1].trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse label from {:?}", &record[1]),
            })?;
            raw_labels.push(label);
            for j in 0..d {
                let v: f64 = record[2 + j].trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("cannot parse feature from {:?}", &record[2 + j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite feature value".into(),
                    });
                }
                features.push(v);
            }
        }
        if ids.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "no data rows".into(),
            });
        }
        let mut distinct: Vec<u64> = raw_labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let contiguous = distinct.len() == distinct.last().map(|&l| l as usize + 1).unwrap_or(0);
        let (labels, remap) = if contiguous {
            (raw_labels.into_iter().map(|l| l as usize).collect(), None)
        } else if allow_remap {
            let labels = raw_labels
                .into_iter()
                .map(|l| distinct.binary_search(&l).unwrap())
                .collect();
            (labels, Some(distinct))
        } else {
            return Err(invalid_param(format!(
                "labels are not contiguous 0..{}: found {distinct:?}; \
                 load with remapping to proceed",
                distinct.len() - 1
            )));
        };
        Ok((Self::new(ids, labels, features, d)?, remap))
    }
}

/// Per-class centers and each class's `s` nearest other-class centers in
/// increasing distance, ties to the lowest class index.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterTable {
    centers: Vec<f64>,
    d: usize,
    neighbor_lists: Vec<Vec<usize>>,
}

impl CenterTable {
    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.d..(k + 1) * self.d]
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbor_lists[k]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbor_lists
    }

    pub fn num_classes(&self) -> usize {
        self.neighbor_lists.len()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Arithmetic-mean centers and s-nearest neighbor lists.
pub fn class_centers(dataset: &EmbeddedDataset, s: usize) -> Result<CenterTable> {
    let c = dataset.num_classes();
    let d = dataset.dim();
    if c < 2 {
        return Err(invalid_param("centers need at least two classes"));
    }
    if s < 1 || s > c - 1 {
        return Err(invalid_param(format!("s must be in [1, {}]", c - 1)));
    }
    let mut centers = vec![0.0; c * d];
    let mut counts = vec![0usize; c];
    for i in 0..dataset.len() {
        let k = dataset.labels()[i];
        counts[k] += 1;
        for (j, &v) in dataset.row(i).iter().enumerate() {
            centers[k * d + j] += v;
        }
    }
    for k in 0..c {
        for j in 0..d {
            centers[k * d + j] /= counts[k] as f64;
        }
    }
    let neighbor_lists = (0..c)
        .map(|k| {
            let mut others: Vec<(f64, usize)> = (0..c)
                .filter(|&j| j != k)
                .map(|j| {
                    (
                        euclidean(&centers[k * d..(k + 1) * d], &centers[j * d..(j + 1) * d]),
                        j,
                    )
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(s).map(|(_, j)| j).collect()
        })
        .collect();
    Ok(CenterTable {
        centers,
        d,
        neighbor_lists,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectMode {
    ClassDependent,
    FeatureDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectReport {
    pub epsilon: f64,
    pub realized_rate: f64,
    pub mode: InjectMode,
    pub s: usize,
    pub seed: u64,
    pub transition_counts: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub noisy_labels: Vec<usize>,
    pub flip_mask: Vec<bool>,
    pub report: InjectReport,
}

/// Applies center-based label noise. Deterministic per seed.
pub fn inject(
    dataset: &EmbeddedDataset,
    epsilon: f64,
    s: usize,
    mode: InjectMode,
    seed: u64,
    count_mode: ApplyMode,
) -> Result<Injection> {
    if !(0.0..=1.0).contains(&epsilon) || !epsilon.is_finite() {
        return Err(invalid_param("epsilon must be in [0, 1]"));
    }
    let centers = class_centers(dataset, s)?;
    let n = dataset.len();

    // Candidate distances per sample, in neighbor-list order.
    let candidate_dists: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let k = dataset.labels()[i];
            centers
                .neighbors(k)
                .iter()
                .map(|&j| euclidean(dataset.row(i), centers.center(j)))
                .collect()
        })
        .collect();

    let flip_probs: Vec<f64> = match mode {
        InjectMode::ClassDependent => vec![epsilon; n],
        // Short-circuit zero noise: bisection only reaches the target within
        // tolerance, which would leave stray nonzero flip probabilities.
        InjectMode::FeatureDependent if epsilon == 0.0 => vec![0.0; n],
        InjectMode::FeatureDependent => {
            let weights: Vec<f64> = candidate_dists
                .iter()
                .map(|dists| {
                    let nearest = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                    1.0 / (DISTANCE_FLOOR + nearest)
                })
                .collect();
            let alpha = solve_alpha(&weights, epsilon, 1e-4)?;
            weights
                .iter()
                .map(|&w| (alpha * w).clamp(0.0, 1.0))
                .collect()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = dataset.labels().to_vec();
    let draw_target = |i: usize, rng: &mut ChaCha8Rng| -> usize {
        let k = dataset.labels()[i];
        let candidates = centers.neighbors(k);
        match mode {
            InjectMode::ClassDependent => candidates[rng.random_range(0..candidates.len())],
            InjectMode::FeatureDependent => {
                let weights: Vec<f64> = candidate_dists[i]
                    .iter()
                    .map(|&dist| 1.0 / (DISTANCE_FLOOR + dist))
                    .collect();
                let total: f64 = weights.iter().sum();
                let v: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                for (j, &w) in weights.iter().enumerate() {
                    acc += w;
                    if v < acc {
                        return candidates[j];
                    }
                }
                *candidates.last().unwrap()
            }
        }
    };

    match count_mode {
        ApplyMode::Bernoulli => {
            for i in 0..n {
                let u: f64 = rng.random();
                if u < flip_probs[i] {
                    noisy[i] = draw_target(i, &mut rng);
                }
            }
        }
        ApplyMode::ExactCount => {
            let n_flips = (epsilon * n as f64).round() as usize;
            let mut chosen = weighted_indices_without_replacement(&flip_probs, n_flips, &mut rng);
            chosen.sort_unstable();
            for i in chosen {
                noisy[i] = draw_target(i, &mut rng);
            }
        }
    }

    let c = dataset.num_classes();
    let mut transition_counts = vec![vec![0u64; c]; c];
    let mut flips = 0usize;
    let flip_mask: Vec<bool> = noisy
        .iter()
        .zip(dataset.labels())
        .map(|(&y, &t)| {
            transition_counts[t][y] += 1;
            if y != t {
                flips += 1;
                true
            } else {
                false
            }
        })
        .collect();

    Ok(Injection {
        noisy_labels: noisy,
        flip_mask,
        report: InjectReport {
            epsilon,
            realized_rate: flips as f64 / n as f64,
            mode,
            s,
            seed,
            transition_counts,
            remap: None,
        },
    })
}

/// Writes `id,label,noisy_label,flipped` for an injection result.
pub fn write_noisy_csv<W: Write>(
    dataset: &EmbeddedDataset,
    injection: &Injection,
    mut w: W,
) -> Result<()> {
    writeln!(w, "id,label,noisy_label,flipped")?;
    for i in 0..dataset.len() {
        writeln!(
            w,
            "{},{},{},{}",
            dataset.ids()[i],
            dataset.labels()[i],
            injection.noisy_labels[i],
            injection.flip_mask[i]
        )?;
    }
    Ok(())
}

pub fn save_noisy_csv(
    dataset: &EmbeddedDataset,
    injection: &Injection,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_noisy_csv(dataset, injection, &mut w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> EmbeddedDataset {
        // Three 1-d classes centered at 0, 1, 10.
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut features = Vec::new();
        for (k, center) in [0.0, 1.0, 10.0].iter().enumerate() {
            for i in 0..4 {
                ids.push(format!("s{k}_{i}"));
                labels.push(k);
                features.push(center + (i as f64 - 1.5) * 0.1);
            }
        }
        EmbeddedDataset::new(ids, labels, features, 1).unwrap()
    }

    #[test]
    fn centers_are_class_means() {
        let ds = EmbeddedDataset::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![0, 0, 1, 1],
            vec![0.0, 0.0, 2.0, 2.0, 5.0, 5.0, 7.0, 7.0],
            2,
        )
        .unwrap();
        let table = class_centers(&ds, 1).unwrap();
        assert_eq!(table.center(0), &[1.0, 1.0]);
        assert_eq!(table.center(1), &[6.0, 6.0]);
    }

    #[test]
    fn neighbor_lists_sorted_by_distance() {
        let table = class_centers(&toy_dataset(), 1).unwrap();
        assert_eq!(table.neighbors(0), &[1]);
        assert_eq!(table.neighbors(1), &[0]);
        assert_eq!(table.neighbors(2), &[1]);

        let full = class_centers(&toy_dataset(), 2).unwrap();
        assert_eq!(full.neighbors(0), &[1, 2]);
        assert_eq!(full.neighbors(2), &[1, 0]);
    }

    #[test]
    fn exact_count_flips_exactly() {
        let ds = toy_dataset();
        let out = inject(
            &ds,
            0.25,
            1,
            InjectMode::ClassDependent,
            3,
            ApplyMode::ExactCount,
        )
        .unwrap();
        let flips = out.flip_mask.iter().filter(|&&f| f).count();
        assert_eq!(flips, 3); // round(0.25 * 12)
        assert_eq!(out.report.realized_rate, 0.25);
    }

    #[test]
    fn class_dependent_targets_stay_in_neighbor_lists() {
        let ds = toy_dataset();
        let table = class_centers(&ds, 1).unwrap();
        let out = inject(
            &ds,
            0.9,
            1,
            InjectMode::ClassDependent,
            5,
            ApplyMode::Bernoulli,
        )
        .unwrap();
        for i in 0..ds.len() {
            if out.flip_mask[i] {
                let k = ds.labels()[i];
                assert!(table.neighbors(k).contains(&out.noisy_labels[i]));
            }
        }
        // With s = 1 each row of the transition counts has at most one
        // nonzero off-diagonal cell.
        for (k, row) in out.report.transition_counts.iter().enumerate() {
            let nonzero_off = row
                .iter()
                .enumerate()
                .filter(|&(i, &v)| i != k && v > 0)
                .count();
            assert!(nonzero_off <= 1);
        }
    }

    #[test]
    fn feature_dependent_prefers_ambiguous_samples() {
        // Class 0: one point on top of class 1's center, one far away.
        let ids = (0..6).map(|i| format!("r{i}")).collect();
        let labels = vec![0, 0, 1, 1, 1, 1];
        let features = vec![5.0, -40.0, 4.9, 5.1, 4.95, 5.05];
        let ds = EmbeddedDataset::new(ids, labels, features, 1).unwrap();
        // eps chosen so exact-count flips exactly one sample.
        let eps = 1.0 / 6.0;
        let mut on_top_flips = 0;
        for seed in 0..1000 {
            let out = inject(
                &ds,
                eps,
                1,
                InjectMode::FeatureDependent,
                seed,
                ApplyMode::ExactCount,
            )
            .unwrap();
            assert_eq!(out.flip_mask.iter().filter(|&&f| f).count(), 1);
            if out.flip_mask[0] {
                on_top_flips += 1;
            }
        }
        assert!(
            on_top_flips >= 990,
            "on-top point flipped {on_top_flips}/1000"
        );
    }

    #[test]
    fn feature_dependent_flips_closer_to_wrong_centers() {
        // Two 2-d blobs with a smear of class-0 points toward class 1.
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut features = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..2000 {
            ids.push(format!("a{i}"));
            labels.push(0);
            let t: f64 = rng.random();
            features.extend_from_slice(&[t * 6.0, rng.random::<f64>()]);
            ids.push(format!("b{i}"));
            labels.push(1);
            features.extend_from_slice(&[8.0 + rng.random::<f64>(), rng.random::<f64>()]);
        }
        let ds = EmbeddedDataset::new(ids, labels, features, 2).unwrap();
        let centers = class_centers(&ds, 1).unwrap();
        let out = inject(
            &ds,
            0.2,
            1,
            InjectMode::FeatureDependent,
            9,
            ApplyMode::Bernoulli,
        )
        .unwrap();
        let dist_to_wrong = |i: usize| {
            let k = ds.labels()[i];
            euclidean(ds.row(i), centers.center(centers.neighbors(k)[0]))
        };
        let (mut fsum, mut ksum, mut nf, mut nk) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..ds.len() {
            if out.flip_mask[i] {
                fsum += dist_to_wrong(i);
                nf += 1;
            } else {
                ksum += dist_to_wrong(i);
                nk += 1;
            }
        }
        assert!(fsum / (nf as f64) < ksum / (nk as f64));
        assert!((out.report.realized_rate - 0.2).abs() <= 0.02);
    }

    #[test]
    fn zero_epsilon_never_flips() {
        let ds = toy_dataset();
        for mode in [InjectMode::ClassDependent, InjectMode::FeatureDependent] {
            for count_mode in [ApplyMode::Bernoulli, ApplyMode::ExactCount] {
                let out = inject(&ds, 0.0, 1, mode, 9, count_mode).unwrap();
                assert!(out.flip_mask.iter().all(|&f| !f));
                assert_eq!(out.report.realized_rate, 0.0);
            }
        }
    }

    #[test]
    fn csv_load_validates() {
        let good = "id,label,f0,f1\nx,0,0.5,1.0\ny,1,2.0,3.0\nz,0,0.1,0.2\n";
        let ds = EmbeddedDataset::read_csv(good.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);

        let missing = "id,label,f0,f1\nx,0,0.5,1.0\ny,1,2.0\n";
        match EmbeddedDataset::read_csv(missing.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let gap = "id,label,f0\nx,0,0.5\ny,2,1.0\n";
        assert!(EmbeddedDataset::read_csv(gap.as_bytes()).is_err());
    }

    #[test]
    fn remap_load_compacts_labels() {
        let gap = "id,label,f0\nx,0,0.5\ny,2,1.0\nz,2,1.5\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gap.csv");
        std::fs::write(&path, gap).unwrap();
        assert!(EmbeddedDataset::load_csv(&path).is_err());
        let (ds, remap) = EmbeddedDataset::load_csv_with_remap(&path).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 1]);
        assert_eq!(remap, Some(vec![0, 2]));
    }

    #[test]
    fn noisy_csv_output_shape() {
        let ds = toy_dataset();
        let out = inject(
            &ds,
            0.5,
            1,
            InjectMode::ClassDependent,
            1,
            ApplyMode::ExactCount,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_noisy_csv(&ds, &out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,label,noisy_label,flipped");
        assert_eq!(lines.len(), 13);
        assert!(lines[1].starts_with("s0_0,0,"));
    }
}
