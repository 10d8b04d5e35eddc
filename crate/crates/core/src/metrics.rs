//! Regression metrics, baselines and the run report records.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((total / pred.len() as f64).sqrt())
}

/// Coefficient of determination with the mean of `target` as reference.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric("R² is undefined for constant targets".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when a validation split had constant targets.
    pub r2: Option<f64>,
}

impl Summary {
    pub fn evaluate(pred: &[f64], target: &[f64]) -> Result<Self> {
        let r2 = match r2(pred, target) {
            Ok(v) => Some(v),
            Err(Error::Metric(_)) if !target.is_empty() && pred.len() == target.len() => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mae: mae(pred, target)?,
            rmse: rmse(pred, target)?,
            r2,
        })
    }

    /// Element-wise mean; `r2` is `None` if any input lacks it.
    pub fn mean(items: &[Summary]) -> Option<Summary> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let r2: Option<Vec<f64>> = items.iter().map(|s| s.r2).collect();
        Some(Summary {
            mae: items.iter().map(|s| s.mae).sum::<f64>() / n,
            rmse: items.iter().map(|s| s.rmse).sum::<f64>() / n,
            r2: r2.map(|v| v.iter().sum::<f64>() / n),
        })
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    /// Epoch with the lowest validation MAE; its metrics are reported.
    pub best_epoch: usize,
    pub metrics: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub mean_predictor_mae: f64,
    pub linreg_mae: f64,
    pub linreg_rmse: f64,
    pub linreg_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<EpochRecord>,
    pub folds: Vec<FoldSummary>,
    /// Mean over folds of each fold's best-epoch validation metrics.
    pub summary: Summary,
    pub baselines: Option<Baselines>,
}

pub const METRICS_CSV_HEADER: &str = "fold,epoch,train_loss,val_mae,val_rmse,val_r2";

/// `metrics.csv` contents; an undefined R² is an empty field.
pub fn records_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let r2 = r.val_r2.map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{r2}\n",
            r.fold, r.epoch, r.train_loss, r.val_mae, r.val_rmse
        ));
    }
    out
}

/// Ordinary least squares with an intercept, solved through the normal
/// equations on centred features plus a `1e-8` ridge for conditioning.
#[derive(Debug, Clone)]
pub struct LinearModel {
    feature_mean: DVector<f64>,
    target_mean: f64,
    coef: DVector<f64>,
}

pub const RIDGE_JITTER: f64 = 1e-8;

impl LinearModel {
    pub fn fit(features: &[&[f64]], targets: &[f64]) -> Result<Self> {
        if features.is_empty() || features.len() != targets.len() {
            return Err(Error::Degenerate(format!(
                "{} feature rows for {} targets",
                features.len(),
                targets.len()
            )));
        }
        let (n, p) = (features.len(), features[0].len());
        if p == 0 || features.iter().any(|f| f.len() != p) {
            return Err(Error::Degenerate("ragged or empty feature rows".into()));
        }
        // centred design, row-major
        let mut feature_mean = vec![0.0; p];
        for row in features {
            feature_mean.iter_mut().zip(*row).for_each(|(m, v)| *m += v);
        }
        feature_mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut x = Vec::with_capacity(n * p);
        for row in features {
            x.extend(row.iter().zip(&feature_mean).map(|(v, m)| v - m));
        }
        let target_mean = targets.iter().sum::<f64>() / n as f64;
        let y: Vec<f64> = targets.iter().map(|t| t - target_mean).collect();

        let mut gram = vec![0.0; p * p];
        f64::gemm(p, n, p, 1.0, &x, 1, p as isize, &x, p as isize, 1, 0.0, &mut gram, p as isize, 1);
        let mut gram = DMatrix::from_row_slice(p, p, &gram);
        let trace = gram.trace();
        if trace <= 0.0 {
            return Err(Error::Degenerate("every feature is constant".into()));
        }
        for j in 0..p {
            gram[(j, j)] += RIDGE_JITTER;
        }
        let mut rhs = DVector::zeros(p);
        for (row, t) in x.chunks_exact(p).zip(&y) {
            rhs.iter_mut().zip(row).for_each(|(r, v)| *r += v * t);
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("normal equations are not positive definite".into()))?;
        let coef = chol.solve(&rhs);
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Degenerate("non-finite coefficients".into()));
        }
        Ok(Self {
            feature_mean: DVector::from_vec(feature_mean),
            target_mean,
            coef,
        })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.target_mean
            + features
                .iter()
                .zip(self.feature_mean.iter())
                .zip(self.coef.iter())
                .map(|((x, m), c)| (x - m) * c)
                .sum::<f64>()
    }
}

/// Linear-regression and mean-predictor baselines evaluated on the given
/// fold assignment (`folds[i]` is sample `i`'s validation fold). Metrics are
/// averaged over folds the same way as the network's summary.
pub fn linreg_baseline(features: &[Vec<f64>], targets: &[f64], folds: &[usize], k: usize) -> Result<Baselines> {
    if features.len() != targets.len() || folds.len() != targets.len() {
        return Err(Error::Shape("features, targets and folds differ in length".into()));
    }
    let mut linreg = Vec::with_capacity(k);
    let mut mean_mae = Vec::with_capacity(k);
    for fold in 0..k {
        let (train, val): (Vec<usize>, Vec<usize>) = (0..targets.len()).partition(|&i| folds[i] != fold);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!("fold {fold} has an empty partition")));
        }
        let x: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
        let y: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let model = LinearModel::fit(&x, &y)?;
        let val_t: Vec<f64> = val.iter().map(|&i| targets[i]).collect();
        let pred: Vec<f64> = val.iter().map(|&i| model.predict(&features[i])).collect();
        linreg.push(Summary::evaluate(&pred, &val_t)?);

        let train_mean = y.iter().sum::<f64>() / y.len() as f64;
        mean_mae.push(mae(&vec![train_mean; val_t.len()], &val_t)?);
    }
    let s = Summary::mean(&linreg).expect("k >= 1");
    Ok(Baselines {
        mean_predictor_mae: mean_mae.iter().sum::<f64>() / k as f64,
        linreg_mae: s.mae,
        linreg_rmse: s.rmse,
        linreg_r2: s.r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = [1.0, 2.0, 4.0];
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn direct_arithmetic() {
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.5355).abs() < 1e-4);
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let t = [1.0, 5.0, 3.0, 7.0];
        assert_eq!(r2(&[4.0; 4], &t).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
        assert!(r2(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        let s = Summary::evaluate(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(s.r2, None);
    }

    #[test]
    fn ols_recovers_linear_map() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 0.11).cos();
                vec![a, b, a * 0.5 - b]
            })
            .collect();
        let y: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x[0] - 1.5 * x[1] + 0.25 * x[2]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let m = LinearModel::fit(&rows, &y).unwrap();
        let pred: Vec<f64> = xs.iter().map(|x| m.predict(x)).collect();
        assert!(r2(&pred, &y).unwrap() >= 0.999);
    }

    #[test]
    fn constant_features_are_degenerate() {
        let xs = vec![vec![1.0, 2.0]; 10];
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(LinearModel::fit(&rows, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn csv_layout() {
        let text = records_csv(&[EpochRecord {
            fold: 1,
            epoch: 0,
            train_loss: 2.5,
            val_mae: 1.0,
            val_rmse: 1.5,
            val_r2: None,
        }]);
        assert_eq!(text, "fold,epoch,train_loss,val_mae,val_rmse,val_r2\n1,0,2.5,1.0,1.5,\n");
    }
}
