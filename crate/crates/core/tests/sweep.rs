//! Sweep-level invariants: closed-form agreement on separated mixtures and
//! the severity ordering of noise kinds at low noise levels.

use labelnoise::channels::NoiseKind;
use labelnoise::experiment::{
    overlay_theory, run_sweep, ClassifierKind, EvalLabels, MixtureLayout, MlpSweepConfig,
    NoiseSetting, SweepConfig,
};

fn base_config() -> SweepConfig {
    SweepConfig {
        classes: vec![10],
        dim: 2,
        separation: 3.0,
        layout: MixtureLayout::Benchmark,
        n_per_class_train: 100,
        n_per_class_test: 100,
        epsilon_grid: vec![],
        noise_kinds: vec![],
        classifiers: vec![ClassifierKind::BayesPlugin],
        replicates: 2,
        master_seed: 2024,
        mlp: MlpSweepConfig::default(),
    }
}

#[test]
fn bayes_noisy_rows_match_theory_on_separated_mixtures() {
    let mut config = base_config();
    config.layout = MixtureLayout::Separated;
    config.epsilon_grid = (0..=10).map(|k| k as f64 / 10.0).collect();
    config.noise_kinds = vec![
        NoiseSetting {
            kind: NoiseKind::Uniform,
            spread: None,
        },
        NoiseSetting {
            kind: NoiseKind::ClassDependent,
            spread: Some(1),
        },
        NoiseSetting {
            kind: NoiseKind::ClassDependent,
            spread: Some(2),
        },
        NoiseSetting {
            kind: NoiseKind::ClassDependent,
            spread: Some(5),
        },
    ];

    let table = run_sweep(&config).unwrap();
    let table = overlay_theory(&table, 1.0, 50.0).unwrap();
    for row in table.rows() {
        if row.eval_labels != EvalLabels::Noisy {
            continue;
        }
        let theory = row.theory_noisy.expect("uniform/class rows carry theory");
        let tol = 0.02 + 3.0 * row.std_error;
        assert!(
            (row.accuracy - theory).abs() <= tol,
            "kind={} s={:?} eps={} rep={}: accuracy {} vs theory {theory} (tol {tol})",
            row.noise_kind,
            row.s,
            row.epsilon,
            row.seed,
            row.accuracy
        );
    }
}

#[test]
fn severity_ordering_at_low_noise() {
    let mut config = base_config();
    config.epsilon_grid = vec![0.1, 0.2];
    config.replicates = 5;
    config.noise_kinds = vec![
        NoiseSetting {
            kind: NoiseKind::Uniform,
            spread: None,
        },
        NoiseSetting {
            kind: NoiseKind::InverseResampling,
            spread: None,
        },
        NoiseSetting {
            kind: NoiseKind::GapMax,
            spread: None,
        },
    ];

    let table = run_sweep(&config).unwrap();
    let mean_clean = |kind: NoiseKind, eps: f64| -> f64 {
        let rows: Vec<f64> = table
            .rows()
            .iter()
            .filter(|r| {
                r.noise_kind == kind && r.epsilon == eps && r.eval_labels == EvalLabels::Clean
            })
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(rows.len(), 5);
        rows.iter().sum::<f64>() / rows.len() as f64
    };

    for eps in [0.1, 0.2] {
        let uniform = mean_clean(NoiseKind::Uniform, eps);
        let inverse = mean_clean(NoiseKind::InverseResampling, eps);
        let gap_max = mean_clean(NoiseKind::GapMax, eps);
        assert!(
            gap_max <= inverse + 0.02,
            "eps={eps}: gap-max {gap_max} vs inverse-resampling {inverse}"
        );
        assert!(
            inverse <= uniform + 0.02,
            "eps={eps}: inverse-resampling {inverse} vs uniform {uniform}"
        );
    }
}
