//! Linear oracle: per-crop ordinary least squares of log-yield on the
//! standardized weather covariates. Fit on the train split, it bounds
//! what any model can extract from the generator's weather signal.

use super::{Covariates, Dataset};
use crate::error::{Error, Result};

/// Per-crop coefficients: intercept plus one weight per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsOracle {
    pub coeffs: Vec<[f64; 4]>,
}

/// Solve A x = b in place by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::DegenerateInput(
                "singular normal equations in least-squares fit".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

fn features(cov: &Covariates) -> [f64; 4] {
    [1.0, cov.z_temp, cov.z_std, cov.z_precip]
}

impl OlsOracle {
    /// Fit on the train split. Equivalent to a pooled regression with
    /// crop one-hot intercepts and crop-by-covariate interactions.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let gen = ds.manifest.generator.as_ref().ok_or_else(|| {
            Error::Config("manifest lacks generator parameters; oracle unavailable".into())
        })?;
        let n_crops = ds.manifest.crops.len();
        let mut xtx = vec![vec![vec![0.0; 4]; 4]; n_crops];
        let mut xty = vec![vec![0.0; 4]; n_crops];
        let mut counts = vec![0usize; n_crops];
        for &i in &ds.train_indices() {
            let s = &ds.samples[i];
            let crop = ds.crop(s.rec.crop_id)?;
            let x = features(&gen.covariates(crop, &s.mts.data));
            let y = s.rec.yield_true.ln();
            let c = s.rec.crop_id;
            counts[c] += 1;
            for r in 0..4 {
                for k in 0..4 {
                    xtx[c][r][k] += x[r] * x[k];
                }
                xty[c][r] += x[r] * y;
            }
        }
        let mut coeffs = Vec::with_capacity(n_crops);
        for c in 0..n_crops {
            if counts[c] < 5 {
                return Err(Error::DegenerateInput(format!(
                    "crop {c} has only {} training samples, too few for a stable fit",
                    counts[c]
                )));
            }
            let x = solve(xtx[c].clone(), xty[c].clone())?;
            coeffs.push([x[0], x[1], x[2], x[3]]);
        }
        Ok(OlsOracle { coeffs })
    }

    /// Predicted yield in physical units.
    pub fn predict(&self, crop_id: usize, cov: &Covariates) -> Result<f64> {
        let c = self.coeffs.get(crop_id).ok_or_else(|| {
            Error::Lookup(format!("crop id {crop_id} outside fitted oracle"))
        })?;
        let x = features(cov);
        let log_y: f64 = c.iter().zip(x).map(|(&w, v)| w * v).sum();
        Ok(log_y.exp())
    }

    /// Predictions for a set of sample indices, paired with targets.
    pub fn predict_set(&self, ds: &Dataset, idxs: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let gen = ds.manifest.generator.as_ref().ok_or_else(|| {
            Error::Config("manifest lacks generator parameters; oracle unavailable".into())
        })?;
        let mut preds = Vec::with_capacity(idxs.len());
        let mut targets = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let s = &ds.samples[i];
            let crop = ds.crop(s.rec.crop_id)?;
            let cov = gen.covariates(crop, &s.mts.data);
            preds.push(self.predict(s.rec.crop_id, &cov)?);
            targets.push(s.rec.yield_true);
        }
        Ok((preds, targets))
    }

    /// Pooled R² of log-yield over a set of samples.
    pub fn pooled_log_r2(&self, ds: &Dataset, idxs: &[usize]) -> Result<f64> {
        let (preds, targets) = self.predict_set(ds, idxs)?;
        let logs: Vec<f64> = targets.iter().map(|y| y.ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let sst: f64 = logs.iter().map(|y| (y - mean) * (y - mean)).sum();
        let sse: f64 = preds
            .iter()
            .zip(&logs)
            .map(|(p, y)| (p.ln() - y) * (p.ln() - y))
            .sum();
        if sst == 0.0 {
            return Err(Error::DegenerateInput("constant targets, R² undefined".into()));
        }
        Ok(1.0 - sse / sst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_known_system() {
        // [[2,1],[1,3]] x = [5,10] → x = [1,3]
        let x = solve(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_rejects_singular() {
        let r = solve(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 2.0]);
        assert!(matches!(r, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn exact_linear_data_is_recovered() {
        // Synthetic regression with known coefficients and no noise.
        let coeffs = [0.5, -0.3, 0.2, 0.1];
        let mut xtx = vec![vec![0.0; 4]; 4];
        let mut xty = vec![0.0; 4];
        for i in 0..50 {
            let t = i as f64;
            let x = [1.0, (1.3 * t).sin(), (0.7 * t + 0.4).cos(), (2.1 * t + 1.0).sin()];
            let y: f64 = coeffs.iter().zip(x).map(|(&w, f)| w * f).sum();
            for r in 0..4 {
                for k in 0..4 {
                    xtx[r][k] += x[r] * x[k];
                }
                xty[r] += x[r] * y;
            }
        }
        let sol = solve(xtx, xty).unwrap();
        for (s, c) in sol.iter().zip(coeffs) {
            assert!((s - c).abs() < 1e-9);
        }
    }
}
