//! Ordinary least squares over the full feature set.

use nalgebra::{DMatrix, DVector};

use crate::container::{Reader, Writer};
use crate::error::CanopyError;
use crate::Result;

/// Ridge jitter added to the Gram diagonal for rank safety.
const GRAM_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.weights.len());
        self.weights
            .iter()
            .zip(row)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict_row(r)).collect()
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.f64_slice(&self.weights).f64(self.bias);
        w.finish()
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let weights = r.f64_vec()?;
        let bias = r.f64()?;
        Ok(LinearModel { weights, bias })
    }
}

/// Least squares via the normal equations on the bias-augmented design, with a
/// small ridge jitter on the Gram diagonal. Requires more rows than columns.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    let n = x.len();
    if n == 0 {
        return Err(CanopyError::InsufficientSamples("no rows".into()));
    }
    let d = x[0].len();
    if n <= d + 1 {
        return Err(CanopyError::InsufficientSamples(format!(
            "{n} rows for {d} features"
        )));
    }
    if x.iter().any(|row| row.iter().any(|v| !v.is_finite()))
        || y.iter().any(|v| !v.is_finite())
    {
        return Err(CanopyError::InsufficientSamples(
            "non-finite design or target".into(),
        ));
    }

    // Augmented design [X 1]; Gram = A'A + jitter*I, rhs = A'y.
    let cols = d + 1;
    let mut gram = DMatrix::<f64>::zeros(cols, cols);
    let mut rhs = DVector::<f64>::zeros(cols);
    let at = |row: &Vec<f64>, j: usize| if j < d { row[j] } else { 1.0 };
    for row_idx in 0..n {
        let row = &x[row_idx];
        for i in 0..cols {
            let ai = at(row, i);
            rhs[i] += ai * y[row_idx];
            for j in i..cols {
                gram[(i, j)] += ai * at(row, j);
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += GRAM_JITTER;
    }

    let chol = gram.cholesky().ok_or(CanopyError::RankDeficient)?;
    let beta = chol.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(CanopyError::RankDeficient);
    }
    Ok(LinearModel {
        weights: beta.as_slice()[..d].to_vec(),
        bias: beta[d],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect()
    }

    #[test]
    fn recovers_planted_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_design(&mut rng, 60, 27);
        let y: Vec<f64> = x.iter().map(|row| 3.0 * row[0] + 1.0).collect();
        let model = fit_linear(&x, &y).unwrap();
        assert!((model.weights[0] - 3.0).abs() < 1e-8);
        for w in &model.weights[1..] {
            assert!(w.abs() < 1e-8);
        }
        assert!((model.bias - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_target_gives_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_design(&mut rng, 50, 27);
        let y = vec![4.25; 50];
        let model = fit_linear(&x, &y).unwrap();
        for w in &model.weights {
            assert!(w.abs() < 1e-7, "{w}");
        }
        assert!((model.bias - 4.25).abs() < 1e-7);
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_design(&mut rng, 100, 27);
        let y: Vec<f64> = x
            .iter()
            .map(|row| row.iter().sum::<f64>() + rng.gen::<f64>())
            .collect();
        let model = fit_linear(&x, &y).unwrap();
        let preds = model.predict(&x);
        let resid: Vec<f64> = y.iter().zip(&preds).map(|(t, p)| t - p).collect();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..27 {
            let dot: f64 = x.iter().zip(&resid).map(|(row, r)| row[j] * r).sum();
            assert!(dot.abs() <= 1e-6 * y_norm, "column {j}: {dot}");
        }
    }

    #[test]
    fn objective_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_design(&mut rng, 100, 27);
        let y: Vec<f64> = x
            .iter()
            .map(|row| row[2] - 0.5 * row[9] + 0.3 * rng.gen::<f64>())
            .collect();
        let model = fit_linear(&x, &y).unwrap();
        let sse = |m: &LinearModel| -> f64 {
            x.iter()
                .zip(&y)
                .map(|(row, t)| {
                    let d = t - m.predict_row(row);
                    d * d
                })
                .sum()
        };
        let best = sse(&model);
        for _ in 0..1000 {
            let mut perturbed = model.clone();
            for w in &mut perturbed.weights {
                *w += (rng.gen::<f64>() - 0.5) * 0.02;
            }
            perturbed.bias += (rng.gen::<f64>() - 0.5) * 0.02;
            assert!(sse(&perturbed) >= best - 1e-9);
        }
    }

    #[test]
    fn too_few_rows_errors() {
        let x = vec![vec![1.0; 27]; 10];
        let y = vec![0.0; 10];
        assert!(fit_linear(&x, &y).is_err());
    }

    #[test]
    fn payload_roundtrip() {
        let model = LinearModel {
            weights: vec![1.0, -2.5, 0.0],
            bias: 7.0,
        };
        let back = LinearModel::from_payload(&model.to_payload()).unwrap();
        assert_eq!(back, model);
    }
}
