//! Binary over-voltage labelling and univariate logistic regression.
//!
//! The violation probability curve is `sigmoid(b0 + b1 x)`; coefficients
//! are fitted by iteratively reweighted least squares with a small L2
//! penalty (1e-6) that keeps them finite when the labels are linearly
//! separable, which happens routinely when the risk transition is sharp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenarios::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub b0: f64,
    pub b1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub x: f64,
    pub violated: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum LogitError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("degenerate labels: every sample is {}", if *.all_ones { "a violation" } else { "a non-violation" })]
    DegenerateLabels { all_ones: bool },
    #[error("IRLS did not converge within {0} iterations")]
    NonConvergence(usize),
}

/// Label each record by the strict over-voltage test `v_max > v_limit`.
/// A v_max exactly at the limit is not a violation.
pub fn label_violations(samples: &[SampleRecord], v_limit: f64) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|r| LabeledSample {
            x: r.x,
            violated: r.v_max > v_limit,
        })
        .collect()
}

pub const RIDGE: f64 = 1e-6;
const STEP_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 200;
const MIN_SAMPLES: usize = 10;

/// Fit (b0, b1) by ridge-penalized IRLS. Steps are halved whenever the
/// penalized deviance would increase, which keeps the iteration stable on
/// separable data.
pub fn fit_logit(data: &[LabeledSample]) -> Result<LogitModel, LogitError> {
    if data.len() < MIN_SAMPLES {
        return Err(LogitError::TooFewSamples {
            min: MIN_SAMPLES,
            got: data.len(),
        });
    }
    let ones = data.iter().filter(|d| d.violated).count();
    if ones == 0 || ones == data.len() {
        return Err(LogitError::DegenerateLabels {
            all_ones: ones == data.len(),
        });
    }

    let mut b = [0.0f64, 0.0f64];
    let mut nll = penalized_nll(data, &b);
    for iteration in 0..MAX_ITERS {
        let mut h00 = RIDGE;
        let mut h01 = 0.0;
        let mut h11 = RIDGE;
        let mut g0 = -RIDGE * b[0];
        let mut g1 = -RIDGE * b[1];
        for d in data {
            let p = sigmoid(b[0] + b[1] * d.x);
            let w = p * (1.0 - p);
            let r = (d.violated as u8) as f64 - p;
            h00 += w;
            h01 += w * d.x;
            h11 += w * d.x * d.x;
            g0 += r;
            g1 += r * d.x;
        }
        let det = h00 * h11 - h01 * h01;
        let mut step = [(h11 * g0 - h01 * g1) / det, (h00 * g1 - h01 * g0) / det];

        // halve while the penalized deviance would increase
        let mut improved = false;
        for _ in 0..40 {
            let cand = [b[0] + step[0], b[1] + step[1]];
            let cand_nll = penalized_nll(data, &cand);
            if cand_nll <= nll + 1e-12 * (1.0 + nll.abs()) {
                b = cand;
                nll = cand_nll;
                improved = true;
                break;
            }
            step[0] *= 0.5;
            step[1] *= 0.5;
        }
        if !improved {
            return Err(LogitError::NonConvergence(iteration));
        }
        if step[0].abs().max(step[1].abs()) < STEP_TOL {
            return Ok(LogitModel { b0: b[0], b1: b[1] });
        }
    }
    Err(LogitError::NonConvergence(MAX_ITERS))
}

/// Predicted violation probability at a penetration level.
pub fn logit_violation_prob(model: &LogitModel, x_star: f64) -> f64 {
    sigmoid(model.b0 + model.b1 * x_star)
}

/// Gradient of the penalized log-likelihood at the given coefficients;
/// near zero at a fitted optimum.
pub fn score_gradient(model: &LogitModel, data: &[LabeledSample]) -> (f64, f64) {
    let mut g0 = -RIDGE * model.b0;
    let mut g1 = -RIDGE * model.b1;
    for d in data {
        let r = (d.violated as u8) as f64 - sigmoid(model.b0 + model.b1 * d.x);
        g0 += r;
        g1 += r * d.x;
    }
    (g0, g1)
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn penalized_nll(data: &[LabeledSample], b: &[f64; 2]) -> f64 {
    let mut acc = 0.5 * RIDGE * (b[0] * b[0] + b[1] * b[1]);
    for d in data {
        let eta = b[0] + b[1] * d.x;
        // ln(1 + e^eta) - y*eta, computed without overflow
        acc += eta.max(0.0) + (-eta.abs()).exp().ln_1p() - (d.violated as u8) as f64 * eta;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlMode;
    use crate::probdist::{new_rng, RngSeed};
    use rand::Rng;

    fn record(x: f64, v_max: f64) -> SampleRecord {
        SampleRecord {
            scenario_id: 0,
            profile_id: 0,
            control_mode: ControlMode::None,
            x,
            v_max,
            converged: true,
        }
    }

    #[test]
    fn labeling_is_strict() {
        let recs = vec![record(0.1, 1.051), record(0.2, 1.05), record(0.3, 1.0499)];
        let labels = label_violations(&recs, 1.05);
        assert_eq!(
            labels.iter().map(|l| l.violated).collect::<Vec<_>>(),
            vec![true, false, false]
        );
    }

    #[test]
    fn labeling_empty_input() {
        assert!(label_violations(&[], 1.05).is_empty());
    }

    fn synth(b0: f64, b1: f64, n: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = new_rng(RngSeed(seed), 50);
        (0..n)
            .map(|_| {
                let x: f64 = rng.gen();
                let p = sigmoid(b0 + b1 * x);
                LabeledSample {
                    x,
                    violated: rng.gen::<f64>() < p,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_synthetic_coefficients() {
        let data = synth(-10.0, 20.0, 5000, 4);
        let model = fit_logit(&data).unwrap();
        assert!(
            (model.b0 + 10.0).abs() / 10.0 < 0.10,
            "b0 = {}",
            model.b0
        );
        assert!(
            (model.b1 - 20.0).abs() / 20.0 < 0.10,
            "b1 = {}",
            model.b1
        );
    }

    #[test]
    fn no_signal_gives_flat_slope() {
        let data = synth(0.0, 0.0, 5000, 11);
        let model = fit_logit(&data).unwrap();
        assert!(model.b1.abs() < 0.5, "b1 = {}", model.b1);
    }

    #[test]
    fn score_gradient_vanishes_at_fit() {
        let data = synth(-6.0, 9.0, 2000, 17);
        let model = fit_logit(&data).unwrap();
        let (g0, g1) = score_gradient(&model, &data);
        assert!((g0 * g0 + g1 * g1).sqrt() < 1e-6, "grad = ({g0}, {g1})");
    }

    #[test]
    fn separable_data_stays_finite() {
        // perfect separation at x = 0.5
        let mut data = Vec::new();
        for i in 0..200 {
            let x = i as f64 / 199.0;
            data.push(LabeledSample {
                x,
                violated: x > 0.5,
            });
        }
        let model = fit_logit(&data).unwrap();
        assert!(model.b0.is_finite() && model.b1.is_finite());
        assert!(model.b1 > 0.0);
        // decision boundary inside the separating gap
        let boundary = -model.b0 / model.b1;
        assert!(
            (0.5 - 1.0 / 199.0..=0.5 + 1.0 / 199.0).contains(&boundary),
            "boundary {boundary}"
        );
        let (g0, g1) = score_gradient(&model, &data);
        assert!((g0 * g0 + g1 * g1).sqrt() < 1e-6);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let model = LogitModel { b0: -8.0, b1: 16.0 };
        assert!((logit_violation_prob(&model, 0.5) - 0.5).abs() < 1e-12);
        assert!(logit_violation_prob(&model, 1e6) > 1.0 - 1e-12);
        let flat = LogitModel { b0: 0.7, b1: 0.0 };
        for x in [0.0, 0.3, 0.9] {
            assert_eq!(logit_violation_prob(&flat, x), sigmoid(0.7));
        }
    }

    #[test]
    fn rejects_degenerate_labels() {
        let all_zero: Vec<LabeledSample> = (0..20)
            .map(|i| LabeledSample {
                x: i as f64 / 20.0,
                violated: false,
            })
            .collect();
        assert_eq!(
            fit_logit(&all_zero),
            Err(LogitError::DegenerateLabels { all_ones: false })
        );
        let all_one: Vec<LabeledSample> = (0..20)
            .map(|i| LabeledSample {
                x: i as f64 / 20.0,
                violated: true,
            })
            .collect();
        assert_eq!(
            fit_logit(&all_one),
            Err(LogitError::DegenerateLabels { all_ones: true })
        );
    }

    #[test]
    fn rejects_tiny_datasets() {
        let data: Vec<LabeledSample> = (0..5)
            .map(|i| LabeledSample {
                x: i as f64,
                violated: i % 2 == 0,
            })
            .collect();
        assert!(matches!(
            fit_logit(&data),
            Err(LogitError::TooFewSamples { .. })
        ));
    }
}
