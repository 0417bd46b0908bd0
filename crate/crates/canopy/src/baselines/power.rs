//! Multivariate power regression on three canopy features, fitted by
//! log-space least squares followed by Levenberg-Marquardt refinement on the
//! original scale.

use nalgebra::{DMatrix, DVector};

use crate::container::{Reader, Writer};
use crate::error::CanopyError;
use crate::features::FeatureVector;
use crate::Result;

const MIN_POSITIVE_SAMPLES: usize = 10;
const LM_DAMPING_START: f64 = 1e-3;
const LM_DAMPING_MAX: f64 = 1e12;
const LM_MAX_ITERS: usize = 200;
const LM_RELATIVE_TOL: f64 = 1e-10;

/// The three predictors of the power model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFeatures {
    /// Mean height of first returns above 1 m.
    pub z_mean_ag: f64,
    /// 95th height percentile of first returns above 1 m.
    pub z_p95_ag: f64,
    /// Fraction of first returns above 1 m.
    pub interception_ratio: f64,
}

impl From<&FeatureVector> for PowerFeatures {
    fn from(f: &FeatureVector) -> Self {
        PowerFeatures {
            z_mean_ag: f.mean_z_ag(),
            z_p95_ag: f.p95_ag(),
            interception_ratio: f.interception_ratio(),
        }
    }
}

/// y = w1 * z_mean^w2 * z_p95^w3 * ir^w4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModel {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl PowerModel {
    pub fn coefficients(&self) -> [f64; 4] {
        [self.w1, self.w2, self.w3, self.w4]
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.f64(self.w1).f64(self.w2).f64(self.w3).f64(self.w4);
        w.finish()
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        Ok(PowerModel {
            w1: r.f64()?,
            w2: r.f64()?,
            w3: r.f64()?,
            w4: r.f64()?,
        })
    }
}

/// base^exponent with the conventions 0^w = 0 for w > 0 and 0^0 = 1. A zero
/// base with a negative exponent also yields 0 so predictions stay finite.
fn pow0(base: f64, exponent: f64) -> f64 {
    if base > 0.0 {
        base.powf(exponent)
    } else if exponent == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Evaluate the power model; never NaN for nonnegative inputs.
pub fn predict_power(model: &PowerModel, features: &PowerFeatures) -> f64 {
    model.w1
        * pow0(features.z_mean_ag, model.w2)
        * pow0(features.z_p95_ag, model.w3)
        * pow0(features.interception_ratio, model.w4)
}

/// Residuals and Jacobian of the model at `w` over all rows. Rows whose bases
/// are zero contribute constant residuals with zero gradient.
fn residuals_and_jacobian(
    w: &[f64; 4],
    rows: &[PowerFeatures],
    y: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut r = DVector::zeros(n);
    let mut j = DMatrix::zeros(n, 4);
    for (i, (row, &yi)) in rows.iter().zip(y).enumerate() {
        let p2 = pow0(row.z_mean_ag, w[1]);
        let p3 = pow0(row.z_p95_ag, w[2]);
        let p4 = pow0(row.interception_ratio, w[3]);
        let f = w[0] * p2 * p3 * p4;
        r[i] = yi - f;
        j[(i, 0)] = p2 * p3 * p4;
        j[(i, 1)] = if row.z_mean_ag > 0.0 {
            f * row.z_mean_ag.ln()
        } else {
            0.0
        };
        j[(i, 2)] = if row.z_p95_ag > 0.0 {
            f * row.z_p95_ag.ln()
        } else {
            0.0
        };
        j[(i, 3)] = if row.interception_ratio > 0.0 {
            f * row.interception_ratio.ln()
        } else {
            0.0
        };
    }
    (r, j)
}

fn objective(w: &[f64; 4], rows: &[PowerFeatures], y: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let f = w[0]
                * pow0(row.z_mean_ag, w[1])
                * pow0(row.z_p95_ag, w[2])
                * pow0(row.interception_ratio, w[3]);
            (yi - f) * (yi - f)
        })
        .sum()
}

/// Two-stage fit: log-space OLS over strictly positive samples for the
/// initialization, then Levenberg-Marquardt on the original-scale squared
/// residuals over all samples (zero targets included).
pub fn fit_power(rows: &[PowerFeatures], y: &[f64]) -> Result<PowerModel> {
    assert_eq!(rows.len(), y.len());

    // Stage 1: OLS on log y = log w1 + w2 log zm + w3 log z95 + w4 log ir.
    let positive: Vec<usize> = (0..rows.len())
        .filter(|&i| {
            y[i] > 0.0
                && rows[i].z_mean_ag > 0.0
                && rows[i].z_p95_ag > 0.0
                && rows[i].interception_ratio > 0.0
        })
        .collect();
    if positive.len() < MIN_POSITIVE_SAMPLES {
        return Err(CanopyError::InsufficientSamples(format!(
            "{} strictly positive samples, need {MIN_POSITIVE_SAMPLES}",
            positive.len()
        )));
    }

    let m = positive.len();
    let mut design = DMatrix::zeros(m, 4);
    let mut target = DVector::zeros(m);
    for (k, &i) in positive.iter().enumerate() {
        design[(k, 0)] = 1.0;
        design[(k, 1)] = rows[i].z_mean_ag.ln();
        design[(k, 2)] = rows[i].z_p95_ag.ln();
        design[(k, 3)] = rows[i].interception_ratio.ln();
        target[k] = y[i].ln();
    }
    let mut gram = design.transpose() * &design;
    for i in 0..4 {
        gram[(i, i)] += 1e-10;
    }
    let rhs = design.transpose() * target;
    let beta = gram
        .cholesky()
        .ok_or(CanopyError::RankDeficient)?
        .solve(&rhs);
    let mut w = [beta[0].exp(), beta[1], beta[2], beta[3]];
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CanopyError::Diverged);
    }

    // Stage 2: damped Gauss-Newton with Marquardt diagonal scaling.
    let mut damping = LM_DAMPING_START;
    let mut obj = objective(&w, rows, y);
    for _ in 0..LM_MAX_ITERS {
        let (r, j) = residuals_and_jacobian(&w, rows, y);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;

        let mut accepted = false;
        while damping <= LM_DAMPING_MAX {
            let mut lhs = jtj.clone();
            for i in 0..4 {
                lhs[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let step = match lhs.cholesky() {
                Some(chol) => chol.solve(&jtr),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let candidate = [
                w[0] + step[0],
                w[1] + step[1],
                w[2] + step[2],
                w[3] + step[3],
            ];
            if candidate.iter().any(|v| !v.is_finite()) {
                return Err(CanopyError::Diverged);
            }
            let candidate_obj = objective(&candidate, rows, y);
            if !candidate_obj.is_finite() {
                return Err(CanopyError::Diverged);
            }
            if candidate_obj < obj {
                // Accepted steps never increase the objective.
                let relative_decrease = (obj - candidate_obj) / obj.max(f64::MIN_POSITIVE);
                w = candidate;
                obj = candidate_obj;
                damping = (damping / 10.0).max(1e-15);
                accepted = true;
                if relative_decrease < LM_RELATIVE_TOL {
                    return finish(w);
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    finish(w)
}

fn finish(w: [f64; 4]) -> Result<PowerModel> {
    if w.iter().any(|v| !v.is_finite()) || w[0] <= 0.0 {
        return Err(CanopyError::Diverged);
    }
    Ok(PowerModel {
        w1: w[0],
        w2: w[1],
        w3: w[2],
        w4: w[3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn synthetic_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<PowerFeatures> {
        (0..n)
            .map(|_| {
                let z_mean = 2.0 + rng.gen::<f64>() * 18.0;
                PowerFeatures {
                    z_mean_ag: z_mean,
                    z_p95_ag: z_mean + rng.gen::<f64>() * 10.0,
                    interception_ratio: 0.05 + rng.gen::<f64>() * 0.95,
                }
            })
            .collect()
    }

    #[test]
    fn predict_conventions() {
        let unit = PowerModel {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.0,
        };
        let f = PowerFeatures {
            z_mean_ag: 9.0,
            z_p95_ag: 12.0,
            interception_ratio: 0.4,
        };
        assert_eq!(predict_power(&unit, &f), 1.0);

        let linear = PowerModel {
            w1: 2.0,
            w2: 1.0,
            w3: 0.0,
            w4: 0.0,
        };
        let f3 = PowerFeatures {
            z_mean_ag: 3.0,
            z_p95_ag: 5.0,
            interception_ratio: 0.7,
        };
        assert_eq!(predict_power(&linear, &f3), 6.0);

        let ir_model = PowerModel {
            w1: 2.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.5,
        };
        let zero_ir = PowerFeatures {
            z_mean_ag: 3.0,
            z_p95_ag: 5.0,
            interception_ratio: 0.0,
        };
        assert_eq!(predict_power(&ir_model, &zero_ir), 0.0);
        // 0^0 = 1 keeps the degenerate case finite.
        let flat = PowerModel {
            w1: 2.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.0,
        };
        assert_eq!(predict_power(&flat, &zero_ir), 2.0);
    }

    #[test]
    fn recovers_planted_coefficients_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = synthetic_rows(&mut rng, 500);
        let truth = PowerModel {
            w1: 2.0,
            w2: 1.1,
            w3: 0.4,
            w4: 0.3,
        };
        let y: Vec<f64> = rows.iter().map(|r| predict_power(&truth, r)).collect();
        let fit = fit_power(&rows, &y).unwrap();
        for (got, want) in fit.coefficients().iter().zip(truth.coefficients()) {
            assert!(
                (got - want).abs() / want.abs() < 1e-3,
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn constant_target_reduces_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rows = synthetic_rows(&mut rng, 50);
        let y = vec![3.7; 50];
        let fit = fit_power(&rows, &y).unwrap();
        assert!((fit.w1 - 3.7).abs() < 1e-6, "{}", fit.w1);
        assert!(fit.w2.abs() < 1e-6);
        assert!(fit.w3.abs() < 1e-6);
        assert!(fit.w4.abs() < 1e-6);
    }

    #[test]
    fn too_few_positive_samples_errors() {
        let rows = vec![
            PowerFeatures {
                z_mean_ag: 5.0,
                z_p95_ag: 8.0,
                interception_ratio: 0.5,
            };
            12
        ];
        let mut y = vec![0.0; 12];
        y[0] = 1.0;
        assert!(matches!(
            fit_power(&rows, &y),
            Err(CanopyError::InsufficientSamples(_))
        ));
    }

    #[test]
    fn tolerates_zero_targets_in_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows = synthetic_rows(&mut rng, 200);
        let truth = PowerModel {
            w1: 1.5,
            w2: 0.9,
            w3: 0.5,
            w4: 0.2,
        };
        let mut y: Vec<f64> = rows.iter().map(|r| predict_power(&truth, r)).collect();
        for v in y.iter_mut().take(20) {
            *v = 0.0;
        }
        let fit = fit_power(&rows, &y).unwrap();
        assert!(fit.w1 > 0.0);
        // The zero rows drag the fit but it must stay near the bulk.
        assert!((fit.w2 - truth.w2).abs() < 0.5);
    }
}
