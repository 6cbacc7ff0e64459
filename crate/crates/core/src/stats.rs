//! Order-deterministic reductions and small summary statistics.

/// Pairwise (cascade) summation. The reduction tree depends only on the
/// slice length, so results are reproducible for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error `sd / sqrt(N)` (unbiased variance).
/// Returns `None` for fewer than two values.
pub fn mean_se(xs: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = pairwise_sum(xs) / n as f64;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

/// Per-coordinate mean and standard error of a set of equal-length rows.
pub fn column_mean_se(rows: &[&[f64]]) -> Option<(Vec<f64>, Vec<f64>)> {
    if rows.len() < 2 {
        return None;
    }
    let dim = rows[0].len();
    let mut col = vec![0.0; rows.len()];
    let mut means = Vec::with_capacity(dim);
    let mut ses = Vec::with_capacity(dim);
    for k in 0..dim {
        for (c, r) in col.iter_mut().zip(rows) {
            *c = r[k];
        }
        let (m, s) = mean_se(&col)?;
        means.push(m);
        ses.push(s);
    }
    Some((means, ses))
}

/// Equal-width histogram on `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        if !(v >= lo && v <= lo + width * bins as f64) {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

/// Median of a non-empty slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
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
    use proptest::prelude::*;

    #[test]
    fn two_point_se() {
        assert_eq!(mean_se(&[0.0, 2.0]), Some((1.0, 1.0)));
    }

    #[test]
    fn constant_has_zero_se() {
        let (m, s) = mean_se(&[3.5; 17]).unwrap();
        assert_eq!(m, 3.5);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn too_few() {
        assert!(mean_se(&[1.0]).is_none());
        assert!(column_mean_se(&[&[1.0][..]]).is_none());
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0, 2.0], 0.0, 1.0, 2);
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn pairwise_matches_naive(xs in proptest::collection::vec(-1e3f64..1e3, 0..300)) {
            let naive: f64 = xs.iter().sum();
            prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-9 * (1.0 + xs.iter().map(|x| x.abs()).sum::<f64>()));
        }
    }
}
