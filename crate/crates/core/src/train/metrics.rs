//! Evaluation metrics.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub pix_acc: f64,
}

/// Mean IoU over classes present in the prediction or the ground truth, and
/// the fraction of correctly labelled pixels.
pub fn metrics_seg(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<SegMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("metrics_seg", &[pred.len()], &[truth.len()]));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::invalid(format!("label out of range for {n_classes} classes")));
        }
        if p == t {
            correct += 1;
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..n_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(SegMetrics {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        pix_acc: correct as f64 / pred.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SrMetrics {
    pub rmse: f64,
    /// `f64::INFINITY` when the prediction is exact.
    pub psnr: f64,
}

pub fn psnr_from_rmse(rmse: f64, max_val: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_val / rmse).log10()
    }
}

pub fn metrics_sr(pred: &[f64], truth: &[f64], max_val: f64) -> Result<SrMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("metrics_sr", &[pred.len()], &[truth.len()]));
    }
    if max_val <= 0.0 {
        return Err(Error::invalid("max_val must be positive"));
    }
    let mse = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    let rmse = mse.sqrt();
    Ok(SrMetrics {
        rmse,
        psnr: psnr_from_rmse(rmse, max_val),
    })
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_class_case() {
        let m = metrics_seg(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.pix_acc, 0.75);
        assert!((m.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_masks_have_zero_iou() {
        let m = metrics_seg(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!((m.miou, m.pix_acc), (0.0, 0.0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = metrics_seg(&[2, 2], &[2, 2], 5).unwrap();
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn exact_prediction_has_infinite_psnr() {
        let m = metrics_sr(&[0.5, 0.25], &[0.5, 0.25], 255.0).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!(m.psnr.is_infinite());
    }
}
