//! Sweep engine: crosses noise kinds, noise levels, replicate seeds, and
//! classifiers over seeded mixtures, producing a tidy result table.
//!
//! Determinism: every cell derives its seeds from the master seed and the
//! cell key through [`crate::seeding::mix`], so output is byte-identical
//! regardless of worker count or execution order. Within one sweep the train
//! and test feature matrices are fixed per class count; only labels are
//! resampled across noise settings.
//!
//! The analytic plug-in is scored two ways: argmax accuracy against clean
//! labels, and probability-matching accuracy against noisy labels (the
//! quantity the closed-form noisy-accuracy law describes, see
//! [`crate::bayes::mc_match_accuracy`]).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, ClassifierHandle};
use crate::channels::{self, ApplyMode, NoiseKind, NoiseSpec};
use crate::error::{invalid_param, Error, Result};
use crate::learner::{self, TrainConfig};
use crate::mixture::{self, GaussianMixture, LabelSource};
use crate::seeding;
use crate::theory::{self, TheoryParams};

// Role tags folded into derived seeds.
const ROLE_MIXTURE: u64 = 1;
const ROLE_TRAIN_DATA: u64 = 2;
const ROLE_TEST_DATA: u64 = 3;
const ROLE_TRAIN_NOISE: u64 = 4;
const ROLE_TEST_NOISE: u64 = 5;
const ROLE_MLP: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureLayout {
    /// Paired layout with overlapping and well-separated classes.
    Benchmark,
    /// All pairwise mean distances at least 2 * separation + 2.
    Separated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    BayesPlugin,
    Mlp,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::BayesPlugin => "bayes_plugin",
            ClassifierKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLabels {
    Clean,
    Noisy,
}

impl EvalLabels {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalLabels::Clean => "clean",
            EvalLabels::Noisy => "noisy",
        }
    }
}

/// One noise setting in a sweep: a kind plus its spread when class-dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSetting {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<usize>,
}

fn default_separation() -> f64 {
    3.0
}

fn default_layout() -> MixtureLayout {
    MixtureLayout::Benchmark
}

fn default_replicates() -> usize {
    5
}

fn default_n_per_class() -> usize {
    100
}

/// MLP settings exposed to sweep configs (seed is always cell-derived).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSweepConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    0.001
}

fn default_epochs() -> usize {
    800
}

fn default_batch() -> usize {
    32
}

impl Default for MlpSweepConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub classes: Vec<usize>,
    pub dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_layout")]
    pub layout: MixtureLayout,
    #[serde(default = "default_n_per_class")]
    pub n_per_class_train: usize,
    #[serde(default = "default_n_per_class")]
    pub n_per_class_test: usize,
    pub epsilon_grid: Vec<f64>,
    pub noise_kinds: Vec<NoiseSetting>,
    pub classifiers: Vec<ClassifierKind>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub mlp: MlpSweepConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.epsilon_grid.is_empty() || self.noise_kinds.is_empty() {
            return Err(invalid_param(
                "class, epsilon, and noise grids must be nonempty",
            ));
        }
        if self.classifiers.is_empty() {
            return Err(invalid_param("at least one classifier is required"));
        }
        if self.replicates < 1 {
            return Err(invalid_param("replicates must be >= 1"));
        }
        if self.dim < 1 {
            return Err(invalid_param("dim must be >= 1"));
        }
        if self.n_per_class_train < 1 || self.n_per_class_test < 1 {
            return Err(invalid_param("samples per class must be >= 1"));
        }
        for &eps in &self.epsilon_grid {
            if !(0.0..=1.0).contains(&eps) {
                return Err(invalid_param(format!("epsilon {eps} outside [0, 1]")));
            }
        }
        for &c in &self.classes {
            if c < 2 {
                return Err(invalid_param("every class count must be >= 2"));
            }
            for setting in &self.noise_kinds {
                if setting.kind == NoiseKind::ClassDependent {
                    let s = setting
                        .spread
                        .ok_or_else(|| invalid_param("class_dependent setting needs spread"))?;
                    if s < 1 || s > c - 1 {
                        return Err(invalid_param(format!("spread {s} invalid for c = {c}")));
                    }
                } else if setting.spread.is_some() {
                    return Err(invalid_param(format!("{} takes no spread", setting.kind)));
                }
            }
        }
        Ok(())
    }

    /// JSON schema of the accepted config document (machine readable).
    pub fn schema() -> serde_json::Value {
        serde_json::json!({
            "type": "object",
            "required": ["classes", "dim", "epsilon_grid", "noise_kinds", "classifiers", "master_seed"],
            "properties": {
                "classes": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "dim": {"type": "integer", "minimum": 1},
                "separation": {"type": "number", "exclusiveMinimum": 0, "default": 3.0},
                "layout": {"enum": ["benchmark", "separated"], "default": "benchmark"},
                "n_per_class_train": {"type": "integer", "minimum": 1, "default": 100},
                "n_per_class_test": {"type": "integer", "minimum": 1, "default": 100},
                "epsilon_grid": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "noise_kinds": {"type": "array", "items": {
                    "type": "object",
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["uniform", "class_dependent", "uniform_x", "resampling", "inverse_resampling", "gap_min", "gap_max"]},
                        "spread": {"type": "integer", "minimum": 1}
                    }
                }},
                "classifiers": {"type": "array", "items": {"enum": ["bayes_plugin", "mlp"]}},
                "replicates": {"type": "integer", "minimum": 1, "default": 5},
                "master_seed": {"type": "integer", "minimum": 0},
                "mlp": {
                    "type": "object",
                    "properties": {
                        "learning_rate": {"type": "number", "exclusiveMinimum": 0, "default": 0.001},
                        "epochs": {"type": "integer", "minimum": 1, "default": 800},
                        "batch_size": {"type": "integer", "minimum": 1, "default": 32}
                    }
                }
            }
        })
    }
}

/// One result row; `seed` is the replicate index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub c: usize,
    pub d: usize,
    pub noise_kind: NoiseKind,
    pub epsilon: f64,
    pub s: Option<usize>,
    pub seed: usize,
    pub classifier: ClassifierKind,
    pub eval_labels: EvalLabels,
    pub accuracy: f64,
    pub std_error: f64,
    pub theory_noisy: Option<f64>,
    pub theory_clean: Option<f64>,
}

impl ResultRow {
    fn sort_key(
        &self,
    ) -> (
        usize,
        usize,
        &'static str,
        u64,
        usize,
        usize,
        &'static str,
        &'static str,
    ) {
        (
            self.c,
            self.d,
            self.noise_kind.as_str(),
            self.epsilon.to_bits(),
            self.s.unwrap_or(0),
            self.seed,
            self.classifier.as_str(),
            self.eval_labels.as_str(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    rows: Vec<ResultRow>,
    has_theory: bool,
}

impl ResultTable {
    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(
            w,
            "c,d,noise_kind,epsilon,s,seed,classifier,eval_labels,accuracy,std_error"
        )?;
        if self.has_theory {
            write!(w, ",theory_noisy,theory_clean")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.c,
                r.d,
                r.noise_kind.as_str(),
                r.epsilon,
                r.s.map_or(String::new(), |s| s.to_string()),
                r.seed,
                r.classifier.as_str(),
                r.eval_labels.as_str(),
                r.accuracy,
                r.std_error
            )?;
            if self.has_theory {
                write!(
                    w,
                    ",{},{}",
                    r.theory_noisy.map_or(String::new(), |v| v.to_string()),
                    r.theory_clean.map_or(String::new(), |v| v.to_string())
                )?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Appends closed-form accuracy columns to uniform and class-dependent rows;
/// feature-dependent rows keep empty theory cells.
pub fn overlay_theory(table: &ResultTable, m_bar: f64, lambda: f64) -> Result<ResultTable> {
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let mut row = r.clone();
            let s = match r.noise_kind {
                NoiseKind::Uniform => Some(r.c - 1),
                NoiseKind::ClassDependent => r.s,
                _ => None,
            };
            if let Some(s) = s {
                let params = TheoryParams::new(r.c, s, r.epsilon, m_bar, lambda)?;
                row.theory_noisy = Some(theory::noisy_accuracy(&params));
                row.theory_clean = Some(theory::clean_accuracy(&params));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultTable {
        rows,
        has_theory: true,
    })
}

struct Cell {
    c: usize,
    setting: NoiseSetting,
    epsilon: f64,
    replicate: usize,
}

/// Runs the full sweep on the current rayon pool. Any cell failure aborts
/// the sweep with the cell key named.
pub fn run_sweep(config: &SweepConfig) -> Result<ResultTable> {
    config.validate()?;

    // Fixed per-class-count data, shared across all noise settings.
    let mut contexts = Vec::new();
    for &c in &config.classes {
        let mix_seed = seeding::mix(
            config.master_seed,
            &[c as u64, config.dim as u64, ROLE_MIXTURE],
        );
        let mixture = match config.layout {
            MixtureLayout::Benchmark => {
                mixture::make_benchmark_mixture(c, config.dim, config.separation, mix_seed)?
            }
            MixtureLayout::Separated => {
                mixture::make_separated_mixture(c, config.dim, 2.0 * config.separation + 2.0)?
            }
        };
        let train = mixture.sample(
            config.n_per_class_train,
            seeding::mix(config.master_seed, &[c as u64, ROLE_TRAIN_DATA]),
        )?;
        let test = mixture.sample(
            config.n_per_class_test,
            seeding::mix(config.master_seed, &[c as u64, ROLE_TEST_DATA]),
        )?;
        contexts.push((c, mixture, train, test));
    }

    let mut cells = Vec::new();
    for (ctx_idx, (c, _, _, _)) in contexts.iter().enumerate() {
        for setting in &config.noise_kinds {
            for &epsilon in &config.epsilon_grid {
                for replicate in 0..config.replicates {
                    cells.push((
                        ctx_idx,
                        Cell {
                            c: *c,
                            setting: *setting,
                            epsilon,
                            replicate,
                        },
                    ));
                }
            }
        }
    }

    let results: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|(ctx_idx, cell)| {
            let (_, mixture, train, test) = &contexts[*ctx_idx];
            run_cell(config, cell, mixture, train, test).map_err(|e| {
                Error::Numerical(format!(
                    "cell (c={}, kind={}, eps={}, replicate={}) failed: {e}",
                    cell.c,
                    cell.setting.kind.as_str(),
                    cell.epsilon,
                    cell.replicate
                ))
            })
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<ResultRow> = results.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(ResultTable {
        rows,
        has_theory: false,
    })
}

fn cell_seed(config: &SweepConfig, cell: &Cell, role: u64) -> u64 {
    seeding::mix(
        config.master_seed,
        &[
            cell.c as u64,
            config.dim as u64,
            kind_tag(cell.setting.kind),
            cell.setting.spread.unwrap_or(0) as u64,
            cell.epsilon.to_bits(),
            cell.replicate as u64,
            role,
        ],
    )
}

fn kind_tag(kind: NoiseKind) -> u64 {
    match kind {
        NoiseKind::Uniform => 0x10,
        NoiseKind::ClassDependent => 0x20,
        NoiseKind::UniformX => 0x30,
        NoiseKind::Resampling => 0x40,
        NoiseKind::InverseResampling => 0x50,
        NoiseKind::GapMin => 0x60,
        NoiseKind::GapMax => 0x70,
    }
}

fn build_spec(cell: &Cell) -> Result<NoiseSpec> {
    match cell.setting.kind {
        NoiseKind::Uniform => NoiseSpec::uniform(cell.epsilon),
        NoiseKind::ClassDependent => NoiseSpec::class_dependent(
            cell.c,
            cell.epsilon,
            cell.setting.spread.expect("validated"),
            None,
        ),
        kind => NoiseSpec::feature_dependent(kind, cell.epsilon),
    }
}

fn run_cell(
    config: &SweepConfig,
    cell: &Cell,
    mixture: &GaussianMixture,
    train: &crate::mixture::LabeledDataset,
    test: &crate::mixture::LabeledDataset,
) -> Result<Vec<ResultRow>> {
    let spec = build_spec(cell)?;
    // Calibration references the train features and true labels only, so it
    // is identical across replicates of one cell.
    let spec = if spec.kind.needs_alpha() {
        channels::calibrate(&spec, train, mixture, channels::DEFAULT_CALIBRATION_TOL)?.0
    } else {
        spec
    };
    let mixture_arg = spec.kind.is_feature_dependent().then_some(mixture);
    let train_noisy = channels::apply(
        &spec,
        train,
        mixture_arg,
        cell_seed(config, cell, ROLE_TRAIN_NOISE),
        ApplyMode::Bernoulli,
    )?;
    let test_noisy = channels::apply(
        &spec,
        test,
        mixture_arg,
        cell_seed(config, cell, ROLE_TEST_NOISE),
        ApplyMode::Bernoulli,
    )?;

    let mut rows = Vec::new();
    let mut push = |classifier, eval, est: bayes::AccuracyEstimate| {
        rows.push(ResultRow {
            c: cell.c,
            d: config.dim,
            noise_kind: cell.setting.kind,
            epsilon: cell.epsilon,
            s: cell.setting.spread,
            seed: cell.replicate,
            classifier,
            eval_labels: eval,
            accuracy: est.mean,
            std_error: est.std_error,
            theory_noisy: None,
            theory_clean: None,
        });
    };

    for &classifier in &config.classifiers {
        match classifier {
            ClassifierKind::BayesPlugin => {
                let handle = ClassifierHandle::noisy_plugin(mixture, &spec)?;
                let clean = bayes::evaluate_on(&handle, test, LabelSource::True)?;
                push(classifier, EvalLabels::Clean, clean);
                let noisy = bayes::match_on(&handle, &test_noisy, LabelSource::Noisy)?;
                push(classifier, EvalLabels::Noisy, noisy);
            }
            ClassifierKind::Mlp => {
                let train_cfg = TrainConfig {
                    learning_rate: config.mlp.learning_rate,
                    epochs: config.mlp.epochs,
                    batch_size: config.mlp.batch_size,
                    seed: cell_seed(config, cell, ROLE_MLP),
                    ..TrainConfig::default()
                };
                let params = learner::train(&train_noisy, &train_cfg, LabelSource::Noisy)?;
                let clean = learner::evaluate(&params, test, LabelSource::True)?;
                push(classifier, EvalLabels::Clean, clean);
                let noisy = learner::evaluate(&params, &test_noisy, LabelSource::Noisy)?;
                push(classifier, EvalLabels::Noisy, noisy);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SweepConfig {
        SweepConfig {
            classes: vec![4],
            dim: 2,
            separation: 3.0,
            layout: MixtureLayout::Benchmark,
            n_per_class_train: 30,
            n_per_class_test: 30,
            epsilon_grid: vec![0.0, 0.5, 1.0],
            noise_kinds: vec![
                NoiseSetting {
                    kind: NoiseKind::Uniform,
                    spread: None,
                },
                NoiseSetting {
                    kind: NoiseKind::ClassDependent,
                    spread: Some(1),
                },
                NoiseSetting {
                    kind: NoiseKind::GapMax,
                    spread: None,
                },
            ],
            classifiers: vec![ClassifierKind::BayesPlugin],
            replicates: 2,
            master_seed: 99,
            mlp: MlpSweepConfig::default(),
        }
    }

    #[test]
    fn row_count_matches_grid() {
        let table = run_sweep(&small_config()).unwrap();
        // 3 eps x 3 kinds x 2 replicates x 1 classifier x 2 evals.
        assert_eq!(table.rows().len(), 36);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let config = small_config();
        let a = run_sweep(&config).unwrap().to_csv_string().unwrap();
        let b = run_sweep(&config).unwrap().to_csv_string().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlay_fills_closed_forms() {
        let table = run_sweep(&small_config()).unwrap();
        let overlaid = overlay_theory(&table, 0.9, 50.0).unwrap();
        for row in overlaid.rows() {
            match row.noise_kind {
                NoiseKind::Uniform | NoiseKind::ClassDependent => {
                    assert!(row.theory_noisy.is_some());
                    assert!(row.theory_clean.is_some());
                }
                _ => {
                    assert!(row.theory_noisy.is_none());
                    assert!(row.theory_clean.is_none());
                }
            }
        }
        // Spot-check a closed-form value: class row with s = 1, eps = 0.5.
        let row = overlaid
            .rows()
            .iter()
            .find(|r| {
                r.noise_kind == NoiseKind::ClassDependent
                    && r.epsilon == 0.5
                    && r.eval_labels == EvalLabels::Noisy
            })
            .unwrap();
        assert!((row.theory_noisy.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_grids() {
        let mut config = small_config();
        config.epsilon_grid = vec![1.5];
        assert!(config.validate().is_err());

        let mut config = small_config();
        config.noise_kinds = vec![NoiseSetting {
            kind: NoiseKind::ClassDependent,
            spread: Some(9),
        }];
        assert!(config.validate().is_err());

        let mut config = small_config();
        config.noise_kinds = vec![NoiseSetting {
            kind: NoiseKind::Uniform,
            spread: Some(1),
        }];
        assert!(config.validate().is_err());
    }

    #[test]
    fn cell_failure_names_the_cell() {
        // Gap-min on an effectively perfectly separated mixture: every
        // margin ratio is infinite, so no alpha can reach the target flip
        // rate and calibration fails. The error must carry the cell key.
        let mut config = small_config();
        config.layout = MixtureLayout::Separated;
        config.separation = 20.0; // spacing 42: wrong-class posteriors underflow
        config.epsilon_grid = vec![0.3];
        config.noise_kinds = vec![NoiseSetting {
            kind: NoiseKind::GapMin,
            spread: None,
        }];
        let err = run_sweep(&config).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kind=gap_min"), "message: {msg}");
        assert!(msg.contains("eps=0.3"), "message: {msg}");
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let text = r#"{
            "classes": [10],
            "dim": 2,
            "epsilon_grid": [0.0, 0.1],
            "noise_kinds": [{"kind": "uniform"}],
            "classifiers": ["bayes_plugin"],
            "master_seed": 7
        }"#;
        let config: SweepConfig = serde_json::from_str(text).unwrap();
        assert_eq!(config.replicates, 5);
        assert_eq!(config.separation, 3.0);
        assert_eq!(config.layout, MixtureLayout::Benchmark);
        assert_eq!(config.mlp.epochs, 800);
        config.validate().unwrap();
    }
}
