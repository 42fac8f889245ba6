//! Hard per-block error bound.
//!
//! After the autoencoder stages, every block's remaining residual is
//! projected onto a PCA basis fit to the residuals, and quantized
//! coefficients are added back greedily (largest energy first) until
//! the block's l2 error is at or below tau. The check runs on the
//! f32-cast corrected values, the same values a reader will see, so
//! the bound holds exactly for the decompressed output. With the
//! default coefficient bin of tau/sqrt(D) the loop always terminates
//! before running out of basis vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{partition, reassemble, identity_stats, strides, BlockSpec, Dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub dim: usize,
    /// Row-major dim x dim; column j is the j-th eigenvector.
    pub u: Vec<f64>,
    /// Non-increasing, clamped at zero.
    pub eigenvalues: Vec<f64>,
}

/// A basis rounded through f32 storage. All correction arithmetic uses
/// the widened copies so the writer and the reader compute on the same
/// numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBasis {
    pub dim: usize,
    pub stored: Vec<f32>,
    pub u: Vec<f64>,
}

impl PcaBasis {
    pub fn freeze(&self) -> FrozenBasis {
        FrozenBasis::from_stored(self.dim, self.u.iter().map(|&v| v as f32).collect())
    }
}

impl FrozenBasis {
    pub fn from_stored(dim: usize, stored: Vec<f32>) -> FrozenBasis {
        assert_eq!(stored.len(), dim * dim);
        let u = stored.iter().map(|&v| v as f64).collect();
        FrozenBasis { dim, stored, u }
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim).map(move |i| self.u[i * self.dim + j])
    }
}

const PCA_ACCUM_CHUNK: usize = 256;

/// Fits an orthonormal basis to residual rows via the eigenvectors of
/// the second-moment matrix R^T R / N, eigenvalues descending. Column
/// signs are canonical: the entry of largest magnitude is positive.
pub fn fit_pca(rows: &[Vec<f64>], dim: usize) -> Result<PcaBasis> {
    if dim == 0 {
        return Err(Error::Config("pca dim must be positive".into()));
    }
    if rows.is_empty() {
        return Err(Error::Config("pca needs at least one row".into()));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch("pca row width".into()));
    }

    // Fixed chunking plus an in-order fold keeps the sums independent
    // of the worker count.
    let partials: Vec<Vec<f64>> = rows
        .par_chunks(PCA_ACCUM_CHUNK)
        .map(|chunk| {
            let mut s = vec![0.0f64; dim * dim];
            for r in chunk {
                for i in 0..dim {
                    let ri = r[i];
                    if ri == 0.0 {
                        continue;
                    }
                    for j in i..dim {
                        s[i * dim + j] += ri * r[j];
                    }
                }
            }
            s
        })
        .collect();
    let mut s = vec![0.0f64; dim * dim];
    for p in &partials {
        for (acc, v) in s.iter_mut().zip(p) {
            *acc += v;
        }
    }
    let n = rows.len() as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = s[i * dim + j] / n;
            s[i * dim + j] = v;
            s[j * dim + i] = v;
        }
    }

    if s.iter().all(|&v| v == 0.0) {
        let mut u = vec![0.0; dim * dim];
        for i in 0..dim {
            u[i * dim + i] = 1.0;
        }
        return Ok(PcaBasis {
            dim,
            u,
            eigenvalues: vec![0.0; dim],
        });
    }

    let m = DMatrix::from_row_slice(dim, dim, &s);
    let eigen =
        SymmetricEigen::try_new(m, f64::EPSILON, 100_000).ok_or(Error::NumericalFailure)?;

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut u = vec![0.0f64; dim * dim];
    let mut eigenvalues = Vec::with_capacity(dim);
    for (c, &src) in order.iter().enumerate() {
        eigenvalues.push(eigen.eigenvalues[src].max(0.0));
        let col = eigen.eigenvectors.column(src);
        let mut pivot = 0usize;
        for i in 1..dim {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let flip = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            u[i * dim + c] = col[i] * flip;
        }
    }
    Ok(PcaBasis { dim, u, eigenvalues })
}

/// Coefficients c = U^T r.
pub fn project(basis: &FrozenBasis, r: &[f64]) -> Vec<f64> {
    let dim = basis.dim;
    debug_assert_eq!(r.len(), dim);
    let mut c = vec![0.0f64; dim];
    for i in 0..dim {
        let ri = r[i];
        if ri == 0.0 {
            continue;
        }
        let row = &basis.u[i * dim..(i + 1) * dim];
        for j in 0..dim {
            c[j] += row[j] * ri;
        }
    }
    c
}

/// One corrected block: which basis vectors were used and their
/// quantized coefficients, both in ascending basis-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub block_id: usize,
    pub indices: Vec<usize>,
    pub coeffs: Vec<i64>,
}

/// Applies quantized corrections to a first-stage block. Accumulation
/// order is ascending basis index; the writer and the reader both call
/// this, so the corrected bytes match exactly.
pub fn correct_block(
    xr: &[f32],
    basis: &FrozenBasis,
    indices: &[usize],
    coeffs: &[i64],
    bin: f64,
) -> Vec<f32> {
    debug_assert_eq!(indices.len(), coeffs.len());
    let dim = basis.dim;
    let mut acc: Vec<f64> = xr.iter().map(|&v| v as f64).collect();
    for (&j, &q) in indices.iter().zip(coeffs) {
        let w = q as f64 * bin;
        for i in 0..dim {
            acc[i] += w * basis.u[i * dim + j];
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn l2_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s.sqrt()
}

pub fn default_bin(tau: f64, dim: usize) -> f64 {
    tau / (dim as f64).sqrt()
}

/// Greedy correction of one block. Returns the corrected f32 values,
/// the record when any coefficients were needed, and the final error.
pub fn guarantee_block(
    block_id: usize,
    x: &[f32],
    xr: &[f32],
    basis: &FrozenBasis,
    tau: f64,
    bin: f64,
) -> Result<(Vec<f32>, Option<CorrectionRecord>, f64)> {
    let dim = basis.dim;
    if x.len() != dim || xr.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "guarantee_block got {} / {} values for basis dim {dim}",
            x.len(),
            xr.len()
        )));
    }
    let delta0 = l2_f32(x, xr);
    if delta0 <= tau {
        return Ok((xr.to_vec(), None, delta0));
    }

    let r: Vec<f64> = x
        .iter()
        .zip(xr)
        .map(|(&xv, &yv)| xv as f64 - yv as f64)
        .collect();
    let c = project(basis, &r);
    let mut by_energy: Vec<usize> = (0..dim).collect();
    by_energy.sort_by(|&a, &b| {
        (c[b] * c[b])
            .partial_cmp(&(c[a] * c[a]))
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut quantized = vec![0i64; dim];
    for j in 0..dim {
        let scaled = c[j] / bin;
        if !scaled.is_finite() || scaled.abs() > 9.22e18 {
            return Err(Error::QuantizerOverflow(scaled));
        }
        quantized[j] = scaled.round() as i64;
    }

    let mut selected: Vec<usize> = Vec::with_capacity(dim);
    let mut last = (xr.to_vec(), delta0);
    for m in 0..dim {
        selected.push(by_energy[m]);
        selected.sort_unstable();
        let coeffs: Vec<i64> = selected.iter().map(|&j| quantized[j]).collect();
        let corrected = correct_block(xr, basis, &selected, &coeffs, bin);
        let delta = l2_f32(x, &corrected);
        if delta <= tau {
            let record = CorrectionRecord {
                block_id,
                indices: selected,
                coeffs,
            };
            return Ok((corrected, Some(record), delta));
        }
        last = (corrected, delta);
    }
    Err(Error::BinTooCoarse {
        block_id,
        delta: last.1,
        tau,
        dim,
    })
}

/// How tau is interpreted per variable group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TauSpec {
    Absolute(f64),
    /// tau_v = value * range of variable v in the original data.
    RangeRelative(f64),
}

impl TauSpec {
    pub fn value(&self) -> f64 {
        match *self {
            TauSpec::Absolute(v) | TauSpec::RangeRelative(v) => v,
        }
    }
}

/// Everything needed to re-apply one group's corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCorrection {
    pub group_index: usize,
    pub tau: f64,
    pub bin: f64,
    pub basis: FrozenBasis,
    /// Sparse, ascending block_id.
    pub records: Vec<CorrectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub tau: f64,
    pub group_taus: Vec<f64>,
    pub per_block_delta: Vec<f64>,
    pub corrected_blocks: usize,
    pub total_coefficients: usize,
}

impl GuaranteeReport {
    pub fn max_delta(&self) -> f64 {
        self.per_block_delta.iter().copied().fold(0.0, f64::max)
    }
}

fn per_group_ranges(ds: &Dataset<f32>, va: Option<usize>, n_groups: usize) -> Vec<f64> {
    let mut lo = vec![f64::INFINITY; n_groups];
    let mut hi = vec![f64::NEG_INFINITY; n_groups];
    match va {
        None => {
            let (l, h) = ds.min_max();
            lo[0] = l;
            hi[0] = h;
        }
        Some(a) => {
            let st = strides(&ds.shape);
            for (i, v) in ds.values.iter().enumerate() {
                let g = (i / st[a]) % ds.shape[a];
                let v = *v as f64;
                lo[g] = lo[g].min(v);
                hi[g] = hi[g].max(v);
            }
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| h - l).collect()
}

/// Corrects every block of `recon` until its l2 error against `orig`
/// is within the group's tau. With `per_variable` the block grid must
/// not mix variables (block_shape along the variable axis must be 1)
/// and each variable gets its own basis and tau.
pub fn guarantee_dataset(
    orig: &Dataset<f32>,
    recon: &Dataset<f32>,
    spec: &BlockSpec,
    tau: TauSpec,
    bin_override: Option<f64>,
    per_variable: bool,
) -> Result<(Dataset<f32>, Vec<GroupCorrection>, GuaranteeReport)> {
    if orig.shape != recon.shape {
        return Err(Error::ShapeMismatch(format!(
            "guarantee: original {:?} vs reconstruction {:?}",
            orig.shape, recon.shape
        )));
    }
    if tau.value() <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    spec.validate(&orig.shape)?;
    let va = if per_variable {
        let a = orig.variable_axis().ok_or_else(|| {
            Error::Config("per-variable guarantee needs a variable axis".into())
        })?;
        if spec.block_shape[a] != 1 {
            return Err(Error::Config(format!(
                "per-variable guarantee needs block_shape[{a}] == 1, found {}",
                spec.block_shape[a]
            )));
        }
        Some(a)
    } else {
        None
    };
    let n_groups = va.map_or(1, |a| orig.shape[a]);

    let x_blocks = partition(orig, spec)?;
    let y_blocks = partition(recon, spec)?;
    let dim = spec.block_dim();

    let ranges = per_group_ranges(orig, va, n_groups);
    let mut group_taus = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let t = match tau {
            TauSpec::Absolute(v) => v,
            TauSpec::RangeRelative(f) => {
                if ranges[g] <= 0.0 {
                    return Err(Error::ZeroRange);
                }
                f * ranges[g]
            }
        };
        group_taus.push(t);
    }

    let mut block_groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (id, b) in x_blocks.iter().enumerate() {
        let g = va.map_or(0, |a| b.index[a]);
        block_groups[g].push(id);
    }

    let mut corrected_blocks_out = y_blocks.clone();
    let mut groups = Vec::with_capacity(n_groups);
    let mut per_block_delta = vec![0.0f64; x_blocks.len()];
    let mut corrected_count = 0usize;
    let mut total_coefficients = 0usize;

    for g in 0..n_groups {
        let ids = &block_groups[g];
        let residuals: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                x_blocks[id]
                    .data
                    .iter()
                    .zip(&y_blocks[id].data)
                    .map(|(&x, &y)| x as f64 - y as f64)
                    .collect()
            })
            .collect();
        let basis = fit_pca(&residuals, dim)?.freeze();
        let tau_g = group_taus[g];
        let bin = bin_override.unwrap_or_else(|| default_bin(tau_g, dim));

        let results: Vec<(Vec<f32>, Option<CorrectionRecord>, f64)> = ids
            .par_iter()
            .map(|&id| guarantee_block(id, &x_blocks[id].data, &y_blocks[id].data, &basis, tau_g, bin))
            .collect::<Result<_>>()?;

        let mut records = Vec::new();
        for (&id, (data, record, delta)) in ids.iter().zip(results) {
            corrected_blocks_out[id].data = data;
            per_block_delta[id] = delta;
            if let Some(r) = record {
                corrected_count += 1;
                total_coefficients += r.coeffs.len();
                records.push(r);
            }
        }
        groups.push(GroupCorrection {
            group_index: g,
            tau: tau_g,
            bin,
            basis,
            records,
        });
    }

    let out = reassemble(
        &corrected_blocks_out,
        spec,
        &orig.shape,
        &orig.axis_roles,
        &identity_stats(),
    )?;
    let report = GuaranteeReport {
        tau: tau.value(),
        group_taus,
        per_block_delta,
        corrected_blocks: corrected_count,
        total_coefficients,
    };
    Ok((out, groups, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AxisRole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_off_identity(basis: &PcaBasis) -> f64 {
        let d = basis.dim;
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                let mut dot = 0.0;
                for i in 0..d {
                    dot += basis.u[i * d + a] * basis.u[i * d + b];
                }
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_residuals_give_identity_basis() {
        let rows = vec![vec![0.0; 5]; 7];
        let b = fit_pca(&rows, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(b.u[i * 5 + j], want);
            }
        }
        assert_eq!(b.eigenvalues, vec![0.0; 5]);
    }

    #[test]
    fn rank_one_data_recovers_direction() {
        let v = [3.0, 0.0, -4.0];
        let rows: Vec<Vec<f64>> = (1..=6)
            .map(|s| v.iter().map(|&x| x * s as f64 * 0.1).collect())
            .collect();
        let b = fit_pca(&rows, 3).unwrap();
        let unit = [0.6, 0.0, -0.8];
        let dot: f64 = (0..3).map(|i| b.u[i * 3] * unit[i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
        assert!(b.eigenvalues[0] > 1e-3);
        assert!(b.eigenvalues[1].abs() < 1e-12);
        assert!(b.eigenvalues[2].abs() < 1e-12);
    }

    #[test]
    fn basis_is_orthonormal_and_sorted() {
        let rows = random_rows(40, 8, 1);
        let b = fit_pca(&rows, 8).unwrap();
        assert!(max_abs_off_identity(&b) < 1e-8);
        for w in b.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for j in 0..8 {
            let mut pivot = 0;
            for i in 1..8 {
                if b.u[i * 8 + j].abs() > b.u[pivot * 8 + j].abs() {
                    pivot = i;
                }
            }
            assert!(b.u[pivot * 8 + j] > 0.0, "column {j} sign not canonical");
        }
    }

    #[test]
    fn full_basis_projection_reconstructs() {
        let rows = random_rows(30, 6, 2);
        let basis = fit_pca(&rows, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut c = vec![0.0f64; 6];
        for j in 0..6 {
            for i in 0..6 {
                c[j] += basis.u[i * 6 + j] * r[i];
            }
        }
        let mut back = vec![0.0f64; 6];
        for i in 0..6 {
            for j in 0..6 {
                back[i] += basis.u[i * 6 + j] * c[j];
            }
        }
        for i in 0..6 {
            assert!((back[i] - r[i]).abs() < 1e-10);
        }

        // The frozen copy is f32-rounded, so it only reconstructs to
        // storage precision.
        let frozen = basis.freeze();
        let cf = project(&frozen, &r);
        let mut back_f = vec![0.0f64; 6];
        for j in 0..6 {
            for (i, u) in frozen.column(j).enumerate() {
                back_f[i] += cf[j] * u;
            }
        }
        for i in 0..6 {
            assert!((back_f[i] - r[i]).abs() < 2e-6);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let rows = random_rows(25, 7, 4);
        let a = fit_pca(&rows, 7).unwrap();
        let b = fit_pca(&rows, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn good_block_needs_no_correction() {
        let rows = random_rows(10, 4, 5);
        let basis = fit_pca(&rows, 4).unwrap().freeze();
        let x = vec![0.5f32, -0.25, 0.75, 0.0];
        let (out, rec, delta) = guarantee_block(0, &x, &x, &basis, 1e-3, 1e-4).unwrap();
        assert_eq!(out, x);
        assert!(rec.is_none());
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn correction_hits_the_bound_and_replays_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 16usize;
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let xr: Vec<f32> = x.iter().map(|&v| v + rng.random_range(-0.3f32..0.3)).collect();
        let resid: Vec<Vec<f64>> = vec![x
            .iter()
            .zip(&xr)
            .map(|(&a, &b)| a as f64 - b as f64)
            .collect()];
        let basis = fit_pca(&resid, d).unwrap().freeze();
        let tau = 0.01;
        let bin = default_bin(tau, d);
        let (out, rec, delta) = guarantee_block(3, &x, &xr, &basis, tau, bin).unwrap();
        assert!(delta <= tau, "delta {delta} > tau {tau}");
        let rec = rec.expect("a perturbed block needs correction");
        assert_eq!(rec.block_id, 3);
        assert!(rec.indices.windows(2).all(|w| w[0] < w[1]));
        let replay = correct_block(&xr, &basis, &rec.indices, &rec.coeffs, bin);
        assert_eq!(replay, out);
        let replay_delta = l2_f32(&x, &replay);
        assert_eq!(replay_delta, delta);
    }

    #[test]
    fn selection_is_minimal_for_the_energy_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 12usize;
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let xr: Vec<f32> = x.iter().map(|&v| v + rng.random_range(-0.2f32..0.2)).collect();
        let rows = random_rows(20, d, 8);
        let basis = fit_pca(&rows, d).unwrap().freeze();
        let tau = 0.02;
        let bin = default_bin(tau, d);
        let (_, rec, _) = guarantee_block(0, &x, &xr, &basis, tau, bin).unwrap();
        let rec = rec.expect("needs correction");
        if rec.indices.len() > 1 {
            let r: Vec<f64> = x
                .iter()
                .zip(&xr)
                .map(|(&a, &b)| a as f64 - b as f64)
                .collect();
            let c = project(&basis, &r);
            let weakest = *rec
                .indices
                .iter()
                .min_by(|&&a, &&b| {
                    (c[a] * c[a]).partial_cmp(&(c[b] * c[b])).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            let kept: Vec<usize> = rec
                .indices
                .iter()
                .copied()
                .filter(|&j| j != weakest)
                .collect();
            let coeffs: Vec<i64> = rec
                .indices
                .iter()
                .zip(&rec.coeffs)
                .filter(|(&j, _)| j != weakest)
                .map(|(_, &q)| q)
                .collect();
            let fewer = correct_block(&xr, &basis, &kept, &coeffs, bin);
            assert!(l2_f32(&x, &fewer) > tau, "greedy used more terms than needed");
        }
    }

    #[test]
    fn oversized_bin_reports_bin_too_coarse() {
        let d = 6usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let xr: Vec<f32> = x.iter().map(|&v| v + 0.5).collect();
        let rows = random_rows(10, d, 10);
        let basis = fit_pca(&rows, d).unwrap().freeze();
        let err = guarantee_block(5, &x, &xr, &basis, 1e-4, 1e6).unwrap_err();
        match err {
            Error::BinTooCoarse { block_id, dim, .. } => {
                assert_eq!(block_id, 5);
                assert_eq!(dim, d);
            }
            other => panic!("expected BinTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn default_bin_always_terminates() {
        let d = 10usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let x: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let xr: Vec<f32> = x
                .iter()
                .map(|&v| v + rng.random_range(-1.0f32..1.0))
                .collect();
            let resid = vec![x
                .iter()
                .zip(&xr)
                .map(|(&a, &b)| a as f64 - b as f64)
                .collect::<Vec<f64>>()];
            let basis = fit_pca(&resid, d).unwrap().freeze();
            let tau = match case % 3 {
                0 => 1e-1,
                1 => 1e-2,
                _ => 1e-3,
            };
            let (_, _, delta) =
                guarantee_block(case, &x, &xr, &basis, tau, default_bin(tau, d)).unwrap();
            assert!(delta <= tau, "case {case}: delta {delta} > tau {tau}");
        }
    }

    fn small_dataset(seed: u64) -> Dataset<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![2usize, 6, 5];
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Dataset::new(
            shape,
            vec![AxisRole::Variable, AxisRole::Time, AxisRole::Space],
            values,
        )
        .unwrap()
    }

    #[test]
    fn perfect_reconstruction_needs_no_corrections() {
        let ds = small_dataset(12);
        let spec = BlockSpec {
            block_shape: vec![1, 2, 5],
            hyper_k: 1,
            hyper_axis: 1,
        };
        let (out, groups, report) =
            guarantee_dataset(&ds, &ds, &spec, TauSpec::Absolute(1e-3), None, false).unwrap();
        assert_eq!(out.values, ds.values);
        assert_eq!(report.corrected_blocks, 0);
        assert_eq!(report.total_coefficients, 0);
        assert!(report.per_block_delta.iter().all(|&d| d == 0.0));
        assert_eq!(groups.len(), 1);
        assert!(groups[0].records.is_empty());
    }

    #[test]
    fn every_block_lands_within_tau() {
        let ds = small_dataset(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut recon = ds.clone();
        for v in &mut recon.values {
            *v += rng.random_range(-0.2f32..0.2);
        }
        let spec = BlockSpec {
            block_shape: vec![1, 2, 5],
            hyper_k: 1,
            hyper_axis: 1,
        };
        let tau = 0.01;
        let (out, groups, report) =
            guarantee_dataset(&ds, &recon, &spec, TauSpec::Absolute(tau), None, false).unwrap();
        assert!(report.per_block_delta.iter().all(|&d| d <= tau));
        assert!(report.corrected_blocks > 0);

        // The reassembled output must partition back to blocks within tau.
        let out_blocks = partition(&out, &spec).unwrap();
        let x_blocks = partition(&ds, &spec).unwrap();
        for (xb, ob) in x_blocks.iter().zip(&out_blocks) {
            assert!(l2_f32(&xb.data, &ob.data) <= tau);
        }
        assert_eq!(groups[0].bin, default_bin(tau, 10));
    }

    #[test]
    fn per_variable_grouping_uses_own_taus() {
        let mut ds = small_dataset(15);
        // Spread variable 1 over a much larger range than variable 0.
        for v in &mut ds.values[30..] {
            *v *= 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut recon = ds.clone();
        for v in &mut recon.values {
            *v += rng.random_range(-0.1f32..0.1);
        }
        let spec = BlockSpec {
            block_shape: vec![1, 3, 5],
            hyper_k: 1,
            hyper_axis: 1,
        };
        let (_, groups, report) =
            guarantee_dataset(&ds, &recon, &spec, TauSpec::RangeRelative(1e-3), None, true)
                .unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(report.group_taus.len(), 2);
        assert!(report.group_taus[1] > report.group_taus[0] * 10.0);
        for g in &groups {
            for r in &g.records {
                assert!(r.indices.windows(2).all(|w| w[0] < w[1]));
            }
        }
        // Deltas respect each group's own tau.
        let va_stride = 30;
        for (id, &d) in report.per_block_delta.iter().enumerate() {
            let _ = va_stride;
            let g = if id < report.per_block_delta.len() / 2 { 0 } else { 1 };
            assert!(d <= report.group_taus[g] + 1e-12);
        }
    }

    #[test]
    fn per_variable_requires_unmixed_blocks() {
        let ds = small_dataset(17);
        let spec = BlockSpec {
            block_shape: vec![2, 2, 5],
            hyper_k: 1,
            hyper_axis: 1,
        };
        let err =
            guarantee_dataset(&ds, &ds, &spec, TauSpec::Absolute(1e-3), None, true).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn padded_edges_stay_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let shape = vec![7usize, 5];
        let values: Vec<f32> = (0..35).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ds = Dataset::new(shape, vec![AxisRole::Time, AxisRole::Space], values).unwrap();
        let mut recon = ds.clone();
        for v in &mut recon.values {
            *v += rng.random_range(-0.15f32..0.15);
        }
        let spec = BlockSpec {
            block_shape: vec![3, 2],
            hyper_k: 1,
            hyper_axis: 0,
        };
        let tau = 0.02;
        let (out, _, report) =
            guarantee_dataset(&ds, &recon, &spec, TauSpec::Absolute(tau), None, false).unwrap();
        assert!(report.per_block_delta.iter().all(|&d| d <= tau));
        assert_eq!(out.shape, ds.shape);
        let out_blocks = partition(&out, &spec).unwrap();
        let x_blocks = partition(&ds, &spec).unwrap();
        for (xb, ob) in x_blocks.iter().zip(&out_blocks) {
            assert!(l2_f32(&xb.data, &ob.data) <= tau);
        }
    }

    #[test]
    fn zero_range_variable_is_rejected_for_relative_tau() {
        let mut ds = small_dataset(19);
        for v in &mut ds.values[..30] {
            *v = 0.125;
        }
        let spec = BlockSpec {
            block_shape: vec![1, 2, 5],
            hyper_k: 1,
            hyper_axis: 1,
        };
        let err = guarantee_dataset(&ds, &ds, &spec, TauSpec::RangeRelative(1e-3), None, true)
            .unwrap_err();
        assert!(matches!(err, Error::ZeroRange));
    }
}
