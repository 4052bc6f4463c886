//! Flow error metrics.

use crate::error::CoreError;
use crate::tensor::Tensor;
use crate::Result;

/// Outlier thresholds: a pixel counts as wrong when its endpoint error
/// exceeds both the absolute threshold (pixels) and the relative fraction
/// of the ground-truth magnitude.
pub const F1_ABS_THRESH: f64 = 3.0;
pub const F1_REL_THRESH: f64 = 0.05;

fn check_pair(f: &Tensor, f_gt: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if f.shape() != f_gt.shape() || f.shape().len() != 3 || f.shape()[0] != 2 {
        return Err(CoreError::shape(
            op,
            format!("{:?}", f_gt.shape()),
            format!("{:?}", f.shape()),
        ));
    }
    Ok((f.shape()[1], f.shape()[2]))
}

/// Average endpoint error: mean over pixels of the Euclidean distance
/// between predicted and ground-truth flow.
pub fn epe(f: &Tensor, f_gt: &Tensor) -> Result<f64> {
    let (h, w) = check_pair(f, f_gt, "epe")?;
    let plane = h * w;
    let mut acc = 0.0;
    for px in 0..plane {
        let dx = f.data()[px] - f_gt.data()[px];
        let dy = f.data()[plane + px] - f_gt.data()[plane + px];
        acc += (dx * dx + dy * dy).sqrt();
    }
    Ok(acc / plane as f64)
}

/// Percentage of outlier pixels: error greater than `abs_thresh` pixels
/// and greater than `rel_thresh` times the ground-truth magnitude.
pub fn f1_all(f: &Tensor, f_gt: &Tensor, abs_thresh: f64, rel_thresh: f64) -> Result<f64> {
    let (h, w) = check_pair(f, f_gt, "f1_all")?;
    let plane = h * w;
    let mut outliers = 0usize;
    for px in 0..plane {
        let dx = f.data()[px] - f_gt.data()[px];
        let dy = f.data()[plane + px] - f_gt.data()[plane + px];
        let err = (dx * dx + dy * dy).sqrt();
        let gx = f_gt.data()[px];
        let gy = f_gt.data()[plane + px];
        let mag = (gx * gx + gy * gy).sqrt();
        if err > abs_thresh && err > rel_thresh * mag {
            outliers += 1;
        }
    }
    Ok(100.0 * outliers as f64 / plane as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn exact_prediction_zero_error() {
        let mut rng = Rng::new(70);
        let f = Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.normal()).collect()).unwrap();
        assert_eq!(epe(&f, &f).unwrap(), 0.0);
        assert_eq!(f1_all(&f, &f, F1_ABS_THRESH, F1_REL_THRESH).unwrap(), 0.0);
    }

    #[test]
    fn uniform_three_four_error() {
        let f_gt = Tensor::zeros(&[2, 4, 4]);
        let mut f = Tensor::zeros(&[2, 4, 4]);
        for px in 0..16 {
            f.data_mut()[px] = 3.0;
            f.data_mut()[16 + px] = 4.0;
        }
        assert!((epe(&f, &f_gt).unwrap() - 5.0).abs() < 1e-12);
        // Error 5 > 3 px and relative threshold is vacuous at zero gt.
        assert_eq!(f1_all(&f, &f_gt, F1_ABS_THRESH, F1_REL_THRESH).unwrap(), 100.0);
    }

    #[test]
    fn matches_per_pixel_loop_oracle() {
        let mut rng = Rng::new(71);
        let f = Tensor::new(vec![2, 6, 5], (0..60).map(|_| rng.normal() * 4.0).collect()).unwrap();
        let f_gt =
            Tensor::new(vec![2, 6, 5], (0..60).map(|_| rng.normal() * 4.0).collect()).unwrap();
        let mut acc = 0.0;
        let mut outliers = 0;
        for i in 0..6 {
            for j in 0..5 {
                let dx = f.at3(0, i, j) - f_gt.at3(0, i, j);
                let dy = f.at3(1, i, j) - f_gt.at3(1, i, j);
                let err = dx.hypot(dy);
                acc += err;
                let mag = f_gt.at3(0, i, j).hypot(f_gt.at3(1, i, j));
                if err > 3.0 && err > 0.05 * mag {
                    outliers += 1;
                }
            }
        }
        assert!((epe(&f, &f_gt).unwrap() - acc / 30.0).abs() < 1e-12);
        let expect = 100.0 * outliers as f64 / 30.0;
        assert!((f1_all(&f, &f_gt, 3.0, 0.05).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 4, 4]);
        let b = Tensor::zeros(&[2, 4, 5]);
        assert!(epe(&a, &b).is_err());
    }
}
