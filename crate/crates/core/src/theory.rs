//! Closed-form accuracy laws for uniform and class-dependent label noise.
//!
//! Both laws are parameterized by the spread s of the channel; s = c - 1
//! recovers the uniform case bit-for-bit. The noisy-label accuracy is
//! quadratic in the noise level with its minimum 1/(s+1) at the tipping
//! point eps = s/(s+1); the clean-label accuracy is logistic around the same
//! point and equals m_bar/2 exactly there.
//!
//! The logistic base b is carried as lambda = ln b and the exponent is
//! clamped before exponentiation, so bases as large as e^50 evaluate stably
//! across the whole noise grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};

/// Clamp on lambda * g before exp() to avoid overflow; exp(700) is still
/// finite in f64, and the logistic saturates long before that.
const EXP_CLAMP: f64 = 700.0;

/// Inputs to the closed-form accuracy laws.
///
/// `m_bar` is the mean clean posterior of the true class; `lambda` is the
/// natural log of the softmax base used in the argmax approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub c: usize,
    pub s: usize,
    pub epsilon: f64,
    pub m_bar: f64,
    pub lambda: f64,
}

impl TheoryParams {
    pub fn new(c: usize, s: usize, epsilon: f64, m_bar: f64, lambda: f64) -> Result<Self> {
        if c < 2 {
            return Err(invalid_param("theory params need c >= 2"));
        }
        if s < 1 || s > c - 1 {
            return Err(invalid_param(format!("spread must be in [1, {}]", c - 1)));
        }
        if !(0.0..=1.0).contains(&epsilon) || !epsilon.is_finite() {
            return Err(invalid_param("epsilon must be in [0, 1]"));
        }
        if !(m_bar > 0.0 && m_bar <= 1.0) {
            return Err(invalid_param("m_bar must be in (0, 1]"));
        }
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(invalid_param("lambda must be positive"));
        }
        Ok(Self {
            c,
            s,
            epsilon,
            m_bar,
            lambda,
        })
    }

    /// Uniform noise: spread fixed at c - 1.
    pub fn uniform(c: usize, epsilon: f64, m_bar: f64, lambda: f64) -> Result<Self> {
        Self::new(c, c.saturating_sub(1).max(1), epsilon, m_bar, lambda)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// The quadratic's stationary point at the tipping point is a minimum
    /// only when m_bar > 1/(s+1); below that it flips to a maximum and the
    /// laws describe a classifier worse than chance.
    pub fn tipping_point_is_minimum(&self) -> bool {
        self.m_bar > 1.0 / (self.s as f64 + 1.0)
    }
}

/// Noisy posterior of the true class under uniform noise:
/// m = m* - (c eps / (c-1)) m* + eps / (c-1).
pub fn noisy_posterior_uniform(m_star: f64, epsilon: f64, c: usize) -> f64 {
    let ratio = c as f64 * epsilon / (c as f64 - 1.0);
    m_star - ratio * m_star + epsilon / (c as f64 - 1.0)
}

/// Accuracy against noisy labels: quadratic in the noise level,
/// m_bar (1 - eps(s+1)/s)^2 + (eps/s)(2 - eps(s+1)/s).
pub fn noisy_accuracy(params: &TheoryParams) -> f64 {
    let s = params.s as f64;
    let a = params.epsilon * (s + 1.0) / s;
    params.m_bar * (1.0 - a) * (1.0 - a) + (params.epsilon / s) * (2.0 - a)
}

/// Accuracy against clean labels: logistic in the noise level,
/// m_bar / (1 + exp(lambda * g)) with
/// g = ((s+1)/s)(2 m_bar - 1)(eps - s/(s+1)).
pub fn clean_accuracy(params: &TheoryParams) -> f64 {
    let s = params.s as f64;
    let g = (s + 1.0) / s * (2.0 * params.m_bar - 1.0) * (params.epsilon - s / (s + 1.0));
    let exponent = (params.lambda * g).clamp(-EXP_CLAMP, EXP_CLAMP);
    params.m_bar / (1.0 + exponent.exp())
}

/// Noise level where uniform noise collapses the classifier: (c-1)/c.
pub fn uniform_tipping_point(c: usize) -> f64 {
    (c as f64 - 1.0) / c as f64
}

/// Noise level where class-dependent noise with spread s collapses the
/// classifier: s/(s+1). Equals the uniform tipping point at s = c-1.
pub fn class_tipping_point(s: usize) -> f64 {
    s as f64 / (s as f64 + 1.0)
}

/// One evaluated grid point, ready for CSV emission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub noisy_acc: f64,
    pub clean_acc: f64,
    pub c: usize,
    pub s: usize,
    pub m_bar: f64,
    pub lambda: f64,
}

/// Evaluates both laws over a parameter grid, one row per entry.
pub fn curve(grid: &[TheoryParams]) -> Result<Vec<CurvePoint>> {
    if grid.is_empty() {
        return Err(invalid_param("curve needs a nonempty grid"));
    }
    Ok(grid
        .iter()
        .map(|p| CurvePoint {
            epsilon: p.epsilon,
            noisy_acc: noisy_accuracy(p),
            clean_acc: clean_accuracy(p),
            c: p.c,
            s: p.s,
            m_bar: p.m_bar,
            lambda: p.lambda,
        })
        .collect())
}

pub fn write_curve_csv<W: std::io::Write>(points: &[CurvePoint], mut w: W) -> Result<()> {
    writeln!(w, "epsilon,noisy_acc,clean_acc,c,s,m_bar,lambda")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.epsilon, p.noisy_acc, p.clean_acc, p.c, p.s, p.m_bar, p.lambda
        )?;
    }
    Ok(())
}
