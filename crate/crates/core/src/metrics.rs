//! Quality metrics: range-normalized RMSE and the relative point
//! error histogram.

use serde::{Deserialize, Serialize};

use crate::tensor::{strides, Dataset};
use crate::{Error, Real, Result};

fn check_same_shape<T: Real>(a: &Dataset<T>, b: &Dataset<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "metrics: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// sqrt(mean squared error) / (max - min) of the original.
pub fn nrmse<T: Real>(orig: &Dataset<T>, recon: &Dataset<T>) -> Result<f64> {
    check_same_shape(orig, recon)?;
    let range = orig.range();
    if range <= 0.0 {
        return Err(Error::ZeroRange);
    }
    let mut sq = 0.0f64;
    for (a, b) in orig.values.iter().zip(&recon.values) {
        let d = a.to_f64().unwrap() - b.to_f64().unwrap();
        sq += d * d;
    }
    Ok((sq / orig.len() as f64).sqrt() / range)
}

/// NRMSE per variable-axis slice, each normalized by that variable's
/// own range in the original data.
pub fn nrmse_per_variable<T: Real>(orig: &Dataset<T>, recon: &Dataset<T>) -> Result<Vec<f64>> {
    check_same_shape(orig, recon)?;
    let va = orig
        .variable_axis()
        .ok_or_else(|| Error::Config("per-variable nrmse needs a variable axis".into()))?;
    let st = strides(&orig.shape);
    let nv = orig.shape[va];
    let mut lo = vec![f64::INFINITY; nv];
    let mut hi = vec![f64::NEG_INFINITY; nv];
    let mut sq = vec![0.0f64; nv];
    let mut count = vec![0u64; nv];
    for (i, (a, b)) in orig.values.iter().zip(&recon.values).enumerate() {
        let v = (i / st[va]) % nv;
        let av = a.to_f64().unwrap();
        lo[v] = lo[v].min(av);
        hi[v] = hi[v].max(av);
        let d = av - b.to_f64().unwrap();
        sq[v] += d * d;
        count[v] += 1;
    }
    let mut out = Vec::with_capacity(nv);
    for v in 0..nv {
        let range = hi[v] - lo[v];
        if range <= 0.0 {
            return Err(Error::ZeroRange);
        }
        out.push((sq[v] / count[v] as f64).sqrt() / range);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// bins + 1 edges; the final bin includes its right edge.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Histogram of |orig - recon| / range(orig). Edges span zero to the
/// largest observed relative error (or [0, 1] when all errors vanish),
/// and every point lands in exactly one bin.
pub fn relative_point_error_histogram<T: Real>(
    orig: &Dataset<T>,
    recon: &Dataset<T>,
    bins: usize,
) -> Result<Histogram> {
    check_same_shape(orig, recon)?;
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let range = orig.range();
    if range <= 0.0 {
        return Err(Error::ZeroRange);
    }
    let rel: Vec<f64> = orig
        .values
        .iter()
        .zip(&recon.values)
        .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs() / range)
        .collect();
    let max_err = rel.iter().copied().fold(0.0f64, f64::max);
    let top = if max_err > 0.0 { max_err } else { 1.0 };
    let width = top / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for e in rel {
        let idx = ((e / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AxisRole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds(values: Vec<f64>) -> Dataset<f64> {
        let n = values.len();
        Dataset::new(vec![n], vec![AxisRole::Space], values).unwrap()
    }

    #[test]
    fn identical_inputs_score_zero() {
        let a = ds(vec![0.0, 0.5, 1.0]);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_example() {
        let a = ds(vec![0.0, 1.0]);
        let b = ds(vec![0.1, 0.9]);
        assert!((nrmse(&a, &b).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let got = nrmse(&ds(x.clone()), &ds(y.clone())).unwrap();

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sq = 0.0;
        for i in 0..x.len() {
            lo = lo.min(x[i]);
            hi = hi.max(x[i]);
            let d = x[i] - y[i];
            sq += d * d;
        }
        let want = (sq / x.len() as f64).sqrt() / (hi - lo);
        assert_eq!(got, want);
    }

    #[test]
    fn constant_data_has_no_nrmse() {
        let a = ds(vec![2.0; 10]);
        assert!(matches!(nrmse(&a, &a), Err(Error::ZeroRange)));
    }

    #[test]
    fn per_variable_uses_each_range() {
        let orig = Dataset::new(
            vec![2, 4],
            vec![AxisRole::Variable, AxisRole::Space],
            vec![0.0, 1.0, 2.0, 3.0, 0.0, 10.0, 20.0, 30.0],
        )
        .unwrap();
        let mut recon = orig.clone();
        for v in &mut recon.values {
            *v += 0.3;
        }
        let per = nrmse_per_variable(&orig, &recon).unwrap();
        assert!((per[0] - 0.1).abs() < 1e-15);
        assert!((per[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn histogram_of_identical_inputs_is_all_first_bin() {
        let a = ds(vec![0.0, 0.25, 1.0, 0.75]);
        let h = relative_point_error_histogram(&a, &a, 5).unwrap();
        assert_eq!(h.counts, vec![4, 0, 0, 0, 0]);
        assert_eq!(h.edges.len(), 6);
        assert_eq!(*h.edges.last().unwrap(), 1.0);
    }

    #[test]
    fn full_range_miss_lands_in_last_bin() {
        let a = ds(vec![0.0, 1.0, 0.5]);
        let b = ds(vec![1.0, 1.0, 0.5]);
        let h = relative_point_error_histogram(&a, &b, 4).unwrap();
        assert_eq!(*h.counts.last().unwrap(), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 3);
    }

    #[test]
    fn histogram_matches_direct_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let bins = 7;
        let h = relative_point_error_histogram(&ds(x.clone()), &ds(y.clone()), bins).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 300);

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &x {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for b in 0..bins {
            let n = x
                .iter()
                .zip(&y)
                .filter(|(a, c)| {
                    let e = (*a - *c).abs() / range;
                    let in_left = e >= h.edges[b];
                    let in_right = if b == bins - 1 {
                        e <= h.edges[b + 1]
                    } else {
                        e < h.edges[b + 1]
                    };
                    in_left && in_right
                })
                .count() as u64;
            assert_eq!(h.counts[b], n, "bin {b}");
        }
    }
}
