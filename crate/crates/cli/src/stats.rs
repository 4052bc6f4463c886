//! Small statistics helpers.

/// Two-pass Pearson correlation coefficient. Returns `None` when either
/// series has zero variance (or fewer than two points).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut scale_x = 0.0;
    let mut scale_y = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
        scale_x += x * x;
        scale_y += y * y;
    }
    // Degenerate when a series' centered spread is zero up to rounding
    // in the mean subtraction.
    if sxx <= scale_x * 1e-24 || syy <= scale_y * 1e-24 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Median of an unsorted slice (averaging the middle pair for even
/// lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_linear_relation() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let r = pearson(&xs, &ys).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -0.5 * x + 3.0).collect();
        let r = pearson(&xs, &neg).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_undefined() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys = vec![4.2; 10];
        assert!(pearson(&xs, &ys).is_none());
    }

    #[test]
    fn matches_textbook_formula_on_random_pairs() {
        // Direct single-pass formula as the oracle.
        let mut rng = deqflow_core::rng::Rng::new(7);
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x + 0.5 * rng.normal())
            .collect();
        let sum_x: f64 = xs.iter().sum();
        let sum_y: f64 = ys.iter().sum();
        let sum_xy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
        let sum_xx: f64 = xs.iter().map(|a| a * a).sum();
        let sum_yy: f64 = ys.iter().map(|a| a * a).sum();
        let nf = n as f64;
        let oracle = (nf * sum_xy - sum_x * sum_y)
            / ((nf * sum_xx - sum_x * sum_x).sqrt() * (nf * sum_yy - sum_y * sum_y).sqrt());
        let got = pearson(&xs, &ys).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
