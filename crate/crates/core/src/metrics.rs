//! Count-error metrics.

use crate::error::{Error, Result};

/// Mean absolute error and root mean squared error between ground-truth
/// and predicted counts.
pub fn mae_rmse(gt_counts: &[f64], pred_counts: &[f64]) -> Result<(f64, f64)> {
    if gt_counts.is_empty() {
        return Err(Error::invalid("metrics", "empty count lists"));
    }
    if gt_counts.len() != pred_counts.len() {
        return Err(Error::invalid(
            "metrics",
            format!(
                "length mismatch: {} ground-truth vs {} predicted",
                gt_counts.len(),
                pred_counts.len()
            ),
        ));
    }
    let n = gt_counts.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (&g, &p) in gt_counts.iter().zip(pred_counts) {
        let e = g - p;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Relative count distortion `|(y - y_adv) / y| * 100`, in percent.
/// Undefined for `y = 0`; such rows are reported with a sentinel rather
/// than dropped.
pub fn error_rate(y: f64, y_adv: f64) -> Option<f64> {
    if y == 0.0 {
        None
    } else {
        Some(((y - y_adv) / y).abs() * 100.0)
    }
}

/// Render an error rate for CSV output; `undefined` marks a zero clean
/// prediction.
pub fn error_rate_cell(rate: Option<f64>) -> String {
    match rate {
        Some(v) => format!("{v}"),
        None => "undefined".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_counts_have_zero_error() {
        let (mae, rmse) = mae_rmse(&[4.0, 7.5], &[4.0, 7.5]).unwrap();
        assert_eq!((mae, rmse), (0.0, 0.0));
    }

    #[test]
    fn single_element_case() {
        let (mae, rmse) = mae_rmse(&[10.0], &[13.0]).unwrap();
        assert_eq!((mae, rmse), (3.0, 3.0));
    }

    #[test]
    fn hand_evaluated_pair() {
        let (mae, rmse) = mae_rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((mae - 3.5).abs() < 1e-9);
        assert!((rmse - 12.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn mismatched_or_empty_rejected() {
        assert!(mae_rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae_rmse(&[], &[]).is_err());
    }

    #[test]
    fn error_rate_cases() {
        assert_eq!(error_rate(5.0, 5.0), Some(0.0));
        // A prediction driven to zero is a 100% error.
        assert_eq!(error_rate(42.0, 0.0), Some(100.0));
        // Consistency with the quoted 526.2% at y = 100.
        let pi = error_rate(100.0, 626.2).unwrap();
        assert!((pi - 526.2).abs() < 1e-9);
        assert_eq!(error_rate(0.0, 3.0), None);
    }

    #[test]
    fn metrics_are_permutation_invariant_and_scale_linearly() {
        let gt = [10.0, 20.0, 30.0];
        let pred = [12.0, 17.0, 39.0];
        let (mae, rmse) = mae_rmse(&gt, &pred).unwrap();
        let (mae_p, rmse_p) =
            mae_rmse(&[30.0, 10.0, 20.0], &[39.0, 12.0, 17.0]).unwrap();
        assert_eq!((mae, rmse), (mae_p, rmse_p));
        let scaled: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| g + 2.0 * (p - g)).collect();
        let (mae2, rmse2) = mae_rmse(&gt, &scaled).unwrap();
        assert!((mae2 - 2.0 * mae).abs() < 1e-9);
        assert!((rmse2 - 2.0 * rmse).abs() < 1e-9);
        // All |errors| equal: RMSE equals MAE.
        let (m, r) = mae_rmse(&[1.0, 2.0], &[3.0, 0.0]).unwrap();
        assert_eq!(m, r);
    }
}
