//! Command-line surface. Every subcommand is a thin binding over the
//! library; diagnostics go to stderr, data to --out or stdout.
//!
//! Exit codes: 0 success, 2 argument/state errors, 3 data/parse errors,
//! 4 numerical/convergence errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use labelnoise::bayes::{self, ClassifierHandle, TestLabels};
use labelnoise::channels::{self, ApplyMode, NoiseKind, NoiseSpec};
use labelnoise::embednoise::{self, EmbeddedDataset, InjectMode};
use labelnoise::error::{Error, Result};
use labelnoise::experiment::{self, SweepConfig};
use labelnoise::learner::{self, TrainConfig};
use labelnoise::mixture::{self, GaussianMixture, LabelSource, LabeledDataset};
use labelnoise::theory::{self, TheoryParams};

#[derive(Parser)]
#[command(
    name = "labelnoise",
    version,
    about = "Label-noise channels over Gaussian mixtures: data generation, \
             noise application, closed-form accuracy laws, and sweeps",
    long_about = None
)]
struct Cli {
    /// Print the sweep config JSON schema and exit.
    #[arg(long)]
    config_schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct CommonOut {
    /// Output path; stdout when omitted. The parent directory must exist.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Seed for the random components of this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliApplyMode {
    Bernoulli,
    ExactCount,
}

impl From<CliApplyMode> for ApplyMode {
    fn from(m: CliApplyMode) -> Self {
        match m {
            CliApplyMode::Bernoulli => ApplyMode::Bernoulli,
            CliApplyMode::ExactCount => ApplyMode::ExactCount,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark mixture (JSON) and optionally sample a dataset
    /// (CSV) from it.
    MixtureGen {
        #[command(flatten)]
        common: CommonOut,
        /// Number of classes (labels are 0-based).
        #[arg(long)]
        c: usize,
        /// Feature dimension.
        #[arg(long)]
        d: usize,
        /// Anchor spacing knob; pairs of classes sit 2*separation+2 apart.
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        /// Use the fully separated layout instead of the paired benchmark.
        #[arg(long, default_value_t = false)]
        separated: bool,
        /// When set, emit a sampled dataset CSV instead of the mixture JSON.
        #[arg(long)]
        sample_per_class: Option<usize>,
        /// Also write the mixture JSON here when sampling.
        #[arg(long)]
        mixture_out: Option<PathBuf>,
    },

    /// Apply a noise channel to a dataset CSV, filling the noisy_label
    /// column.
    NoiseApply {
        #[command(flatten)]
        common: CommonOut,
        /// uniform | class-dependent | uniform-x | resampling |
        /// inverse-resampling | gap-min | gap-max
        #[arg(long)]
        kind: String,
        #[arg(long)]
        epsilon: f64,
        /// Spread for class-dependent noise (targets are auto-assigned).
        #[arg(long)]
        spread: Option<usize>,
        /// Input dataset CSV (id,label,noisy_label,f0,...).
        #[arg(long)]
        data: PathBuf,
        /// Mixture JSON; required for feature-dependent kinds.
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bernoulli")]
        mode: CliApplyMode,
        /// Calibration tolerance on the mean flip rate.
        #[arg(long, default_value_t = channels::DEFAULT_CALIBRATION_TOL)]
        calibration_tol: f64,
        /// Write the (calibrated) spec JSON here.
        #[arg(long)]
        spec_out: Option<PathBuf>,
        /// Write the transition matrix CSV here (uniform/class-dependent
        /// kinds only).
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },

    /// Evaluate the closed-form accuracy laws over a noise grid.
    TheoryCurve {
        #[command(flatten)]
        common: CommonOut,
        #[arg(long)]
        c: usize,
        /// Spread; defaults to c-1 (uniform noise).
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        m_bar: f64,
        /// Natural log of the softmax base.
        #[arg(long)]
        lambda: f64,
        /// Inclusive grid start:stop:step, e.g. 0:1:0.1.
        #[arg(long)]
        eps_grid: String,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutputFormat,
    },

    /// Monte Carlo accuracy of a plug-in classifier.
    BayesEval {
        #[command(flatten)]
        common: CommonOut,
        #[arg(long)]
        mixture: PathBuf,
        /// clean-plugin | noisy-plugin
        #[arg(long, default_value = "clean-plugin")]
        mode: String,
        /// Calibrated spec JSON; required for noisy-plugin or noisy labels.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Score against clean labels or freshly sampled noisy labels.
        #[arg(long, default_value = "clean")]
        labels: String,
        /// argmax accuracy or probability-matching accuracy.
        #[arg(long, default_value = "argmax")]
        scoring: String,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },

    /// Train the MLP on a dataset CSV and report accuracies.
    MlpTrain {
        #[command(flatten)]
        common: CommonOut,
        #[arg(long)]
        data: PathBuf,
        /// true | noisy
        #[arg(long, default_value = "true")]
        label_source: String,
        /// Held-out dataset CSV to evaluate on.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 800)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        learning_rate: f64,
        /// Write the trained parameters (JSON checkpoint) here.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },

    /// Run a sweep from a JSON config, emitting the result table CSV.
    SweepRun {
        #[command(flatten)]
        common: CommonOut,
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; 0 means the rayon default.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Append closed-form theory columns using this mean posterior.
        #[arg(long)]
        overlay_m_bar: Option<f64>,
        /// Log softmax base for the overlay (required with overlay-m-bar).
        #[arg(long)]
        overlay_lambda: Option<f64>,
    },

    /// Inject center-based label noise into an external feature CSV.
    EmbedInject {
        #[command(flatten)]
        common: CommonOut,
        /// Input features CSV (id,label,f0,...).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epsilon: f64,
        /// Number of nearest other-class centers used as flip targets.
        #[arg(long)]
        s: usize,
        /// class-dependent | feature-dependent
        #[arg(long)]
        mode: String,
        #[arg(long, value_enum, default_value = "bernoulli")]
        count_mode: CliApplyMode,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Remap non-contiguous label values instead of failing.
        #[arg(long, default_value_t = false)]
        allow_remap: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.config_schema {
        println!("{}", serde_json::to_string_pretty(&SweepConfig::schema())?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidParameter(
            "a subcommand is required (see --help)".into(),
        ));
    };
    match command {
        Command::MixtureGen {
            common,
            c,
            d,
            separation,
            separated,
            sample_per_class,
            mixture_out,
        } => {
            let mixture = if separated {
                mixture::make_separated_mixture(c, d, 2.0 * separation + 2.0)?
            } else {
                mixture::make_benchmark_mixture(c, d, separation, common.seed)?
            };
            if let Some(path) = &mixture_out {
                mixture.save(path)?;
            }
            match sample_per_class {
                Some(n) => {
                    let ds = mixture.sample(n, common.seed)?;
                    write_output(&common.out, |w| ds.write_csv(w))
                }
                None => write_output(&common.out, |w| {
                    serde_json::to_writer(&mut *w, &mixture.to_json())?;
                    writeln!(w)?;
                    Ok(())
                }),
            }
        }

        Command::NoiseApply {
            common,
            kind,
            epsilon,
            spread,
            data,
            mixture,
            mode,
            calibration_tol,
            spec_out,
            matrix_out,
        } => {
            let kind: NoiseKind = kind.parse()?;
            let dataset = LabeledDataset::load_csv(&data)?;
            let mixture = mixture.map(GaussianMixture::load).transpose()?;
            let spec = match kind {
                NoiseKind::Uniform => NoiseSpec::uniform(epsilon)?,
                NoiseKind::ClassDependent => {
                    let c = mixture
                        .as_ref()
                        .map(|m| m.num_classes())
                        .unwrap_or_else(|| dataset.num_classes());
                    let s = spread.ok_or_else(|| {
                        Error::InvalidParameter("class-dependent noise needs --spread".into())
                    })?;
                    NoiseSpec::class_dependent(c, epsilon, s, None)?
                }
                k => NoiseSpec::feature_dependent(k, epsilon)?,
            };
            let spec = if spec.kind.needs_alpha() {
                let m = mixture
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter(format!("{kind} requires --mixture")))?;
                let (calibrated, result) =
                    channels::calibrate(&spec, &dataset, m, calibration_tol)?;
                eprintln!(
                    "calibrated alpha = {} (achieved flip rate {})",
                    result.alpha, result.achieved_flip_rate
                );
                calibrated
            } else {
                spec
            };
            if let Some(path) = &spec_out {
                let mut w = BufWriter::new(File::create(path)?);
                serde_json::to_writer(&mut w, &spec)?;
                writeln!(w)?;
            }
            if let Some(path) = &matrix_out {
                let c = mixture
                    .as_ref()
                    .map(|m| m.num_classes())
                    .unwrap_or_else(|| dataset.num_classes());
                let tm = channels::transition_matrix(&spec, c)?;
                let mut w = BufWriter::new(File::create(path)?);
                tm.write_csv(&mut w)?;
            }
            let noisy =
                channels::apply(&spec, &dataset, mixture.as_ref(), common.seed, mode.into())?;
            write_output(&common.out, |w| noisy.write_csv(w))
        }

        Command::TheoryCurve {
            common,
            c,
            s,
            m_bar,
            lambda,
            eps_grid,
            format,
        } => {
            let grid = parse_grid(&eps_grid)?;
            let s = s.unwrap_or_else(|| c.saturating_sub(1));
            let params: Vec<TheoryParams> = grid
                .iter()
                .map(|&eps| TheoryParams::new(c, s, eps, m_bar, lambda))
                .collect::<Result<_>>()?;
            if let Some(p) = params.first() {
                if !p.tipping_point_is_minimum() {
                    eprintln!(
                        "warning: m_bar {} <= 1/(s+1); the tipping point is a \
                         maximum in this regime",
                        m_bar
                    );
                }
            }
            let points = theory::curve(&params)?;
            match format {
                OutputFormat::Csv => {
                    write_output(&common.out, |w| theory::write_curve_csv(&points, w))
                }
                OutputFormat::Json => write_output(&common.out, |w| {
                    serde_json::to_writer(&mut *w, &points)?;
                    writeln!(w)?;
                    Ok(())
                }),
            }
        }

        Command::BayesEval {
            common,
            mixture,
            mode,
            spec,
            labels,
            scoring,
            n,
        } => {
            let mixture = GaussianMixture::load(&mixture)?;
            let spec = spec
                .map(|p| -> Result<NoiseSpec> {
                    let value: NoiseSpec =
                        serde_json::from_reader(std::io::BufReader::new(File::open(p)?))?;
                    value.validate(Some(mixture.num_classes()))?;
                    Ok(value)
                })
                .transpose()?;
            let handle = match mode.as_str() {
                "clean-plugin" => ClassifierHandle::clean_plugin(&mixture),
                "noisy-plugin" => {
                    let s = spec.as_ref().ok_or_else(|| {
                        Error::InvalidParameter("noisy-plugin requires --spec".into())
                    })?;
                    ClassifierHandle::noisy_plugin(&mixture, s)?
                }
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown mode {other:?} (clean-plugin | noisy-plugin)"
                    )))
                }
            };
            let test_labels = match labels.as_str() {
                "clean" => TestLabels::Clean,
                "noisy" => {
                    let s = spec.as_ref().ok_or_else(|| {
                        Error::InvalidParameter("--labels noisy requires --spec".into())
                    })?;
                    TestLabels::Noisy(s)
                }
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown labels {other:?} (clean | noisy)"
                    )))
                }
            };
            let estimate = match scoring.as_str() {
                "argmax" => bayes::mc_accuracy(&handle, &mixture, test_labels, n, common.seed)?,
                "match" => {
                    bayes::mc_match_accuracy(&handle, &mixture, test_labels, n, common.seed)?
                }
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown scoring {other:?} (argmax | match)"
                    )))
                }
            };
            write_output(&common.out, |w| {
                serde_json::to_writer(&mut *w, &estimate)?;
                writeln!(w)?;
                Ok(())
            })
        }

        Command::MlpTrain {
            common,
            data,
            label_source,
            test,
            epochs,
            batch_size,
            learning_rate,
            params_out,
        } => {
            let dataset = LabeledDataset::load_csv(&data)?;
            let source = parse_label_source(&label_source)?;
            let config = TrainConfig {
                learning_rate,
                epochs,
                batch_size,
                seed: common.seed,
                ..TrainConfig::default()
            };
            let params = learner::train(&dataset, &config, source)?;
            if let Some(path) = &params_out {
                params.save_json(path)?;
            }
            let train_acc = learner::evaluate(&params, &dataset, source)?;
            let mut report = serde_json::json!({
                "train_accuracy": train_acc,
                "epochs": epochs,
                "batch_size": batch_size,
                "learning_rate": learning_rate,
                "seed": common.seed,
            });
            if let Some(path) = &test {
                let test_ds = LabeledDataset::load_csv(path)?;
                let clean = learner::evaluate(&params, &test_ds, LabelSource::True)?;
                report["test_accuracy_clean"] = serde_json::to_value(clean)?;
                if test_ds.noisy_labels().is_some() {
                    let noisy = learner::evaluate(&params, &test_ds, LabelSource::Noisy)?;
                    report["test_accuracy_noisy"] = serde_json::to_value(noisy)?;
                }
            }
            write_output(&common.out, |w| {
                serde_json::to_writer(&mut *w, &report)?;
                writeln!(w)?;
                Ok(())
            })
        }

        Command::SweepRun {
            common,
            config,
            jobs,
            overlay_m_bar,
            overlay_lambda,
        } => {
            let config_doc: SweepConfig =
                serde_json::from_reader(std::io::BufReader::new(File::open(&config)?))?;
            config_doc.validate()?;
            let table = if jobs > 0 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
                pool.install(|| experiment::run_sweep(&config_doc))?
            } else {
                experiment::run_sweep(&config_doc)?
            };
            let table = match (overlay_m_bar, overlay_lambda) {
                (Some(m_bar), Some(lambda)) => experiment::overlay_theory(&table, m_bar, lambda)?,
                (None, None) => table,
                _ => {
                    return Err(Error::InvalidParameter(
                        "--overlay-m-bar and --overlay-lambda go together".into(),
                    ))
                }
            };
            write_output(&common.out, |w| table.write_csv(w))
        }

        Command::EmbedInject {
            common,
            data,
            epsilon,
            s,
            mode,
            count_mode,
            report,
            allow_remap,
        } => {
            let (dataset, remap) = if allow_remap {
                EmbeddedDataset::load_csv_with_remap(&data)?
            } else {
                (EmbeddedDataset::load_csv(&data)?, None)
            };
            let mode = match mode.replace('-', "_").as_str() {
                "class_dependent" => InjectMode::ClassDependent,
                "feature_dependent" => InjectMode::FeatureDependent,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown mode {other:?} (class-dependent | feature-dependent)"
                    )))
                }
            };
            let mut injection =
                embednoise::inject(&dataset, epsilon, s, mode, common.seed, count_mode.into())?;
            injection.report.remap = remap;
            if let Some(path) = &report {
                let mut w = BufWriter::new(File::create(path)?);
                serde_json::to_writer(&mut w, &injection.report)?;
                writeln!(w)?;
            }
            write_output(&common.out, |w| {
                embednoise::write_noisy_csv(&dataset, &injection, w)
            })
        }
    }
}

fn parse_label_source(s: &str) -> Result<LabelSource> {
    match s {
        "true" | "clean" => Ok(LabelSource::True),
        "noisy" => Ok(LabelSource::Noisy),
        other => Err(Error::InvalidParameter(format!(
            "unknown label source {other:?} (true | noisy)"
        ))),
    }
}

/// Inclusive start:stop:step grid; endpoints included within 1e-12 and
/// values snapped to 12 decimals so CSV output stays tidy.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidParameter(format!(
            "grid must be start:stop:step, got {text:?}"
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::InvalidParameter(format!("cannot parse grid number {s:?}")))
    };
    let (start, stop, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if !step.is_finite() || step <= 0.0 || stop < start {
        return Err(Error::InvalidParameter(
            "grid requires step > 0 and stop >= start".into(),
        ));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| {
            let v = start + k as f64 * step;
            (v * 1e12).round() / 1e12
        })
        .collect())
}

fn write_output(
    out: &Option<PathBuf>,
    body: impl FnOnce(&mut dyn Write) -> Result<()>,
) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            body(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            body(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_is_inclusive_and_tidy() {
        let grid = parse_grid("0:1:0.1").unwrap();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid[0], 0.0);
        assert_eq!(grid[3], 0.3);
        assert_eq!(grid[10], 1.0);

        let single = parse_grid("0.5:0.5:0.1").unwrap();
        assert_eq!(single, vec![0.5]);

        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }
}
