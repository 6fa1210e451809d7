//! Small statistics helpers shared by the analysis stages.

/// Fractional ranks (1-based), ties receive the average of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either input has zero variance or the
/// lengths differ or fewer than two samples are given.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Principal axis of a 2-D point cloud: `(centroid, unit direction, [lambda_major, lambda_minor])`.
///
/// The direction's sign is canonical: its largest-magnitude component is positive.
pub fn principal_axis_2d(points: &[[f64; 2]]) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let n = points.len().max(1) as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p[0] - cx;
        let dy = p[1] - cy;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    sxx /= n;
    sxy /= n;
    syy /= n;
    let half_trace = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    let l1 = half_trace + disc;
    let l2 = (half_trace - disc).max(0.0);
    // Eigenvector of the larger eigenvalue; pick the better-conditioned formula.
    let (mut dx, mut dy) = if sxy.abs() > 0.0 {
        if sxx >= syy {
            (l1 - syy, sxy)
        } else {
            (sxy, l1 - sxx)
        }
    } else if sxx >= syy {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (dx * dx + dy * dy).sqrt();
    dx /= norm;
    dy /= norm;
    if (dx.abs() >= dy.abs() && dx < 0.0) || (dy.abs() > dx.abs() && dy < 0.0) {
        dx = -dx;
        dy = -dy;
    }
    ([cx, cy], [dx, dy], [l1, l2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 4.0, 9.0, 16.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let r: Vec<f64> = b.iter().rev().copied().collect();
        assert!((spearman(&a, &r).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 4]), None);
    }

    #[test]
    fn principal_axis_of_diagonal_line() {
        let pts: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, -(i as f64)]).collect();
        let (c, d, l) = principal_axis_2d(&pts);
        assert_eq!(c, [2.0, -2.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d[0].abs() - s).abs() < 1e-12 && (d[1].abs() - s).abs() < 1e-12);
        assert!(d[0] * d[1] < 0.0);
        assert!(l[1].abs() < 1e-12);
    }
}
