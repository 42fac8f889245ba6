//! N-dimensional array container, block and hyper-block partitioning,
//! normalization, and exact inverse reassembly.
//!
//! A [`Dataset`] is a dense row-major array with one role tag per axis.
//! [`partition`] tiles it into fixed-shape [`Block`]s (edge blocks are
//! zero-padded so every block has the same flattened length), and
//! [`group_hyper`] gathers runs of consecutive blocks along one axis into
//! [`HyperBlock`]s for the attention autoencoder. [`reassemble`] is the
//! exact inverse of the two, stripping padding and undoing normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{real, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisRole {
    Variable,
    Time,
    Space,
}

impl std::fmt::Display for AxisRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AxisRole::Variable => "variable",
            AxisRole::Time => "time",
            AxisRole::Space => "space",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AxisRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variable" => Ok(AxisRole::Variable),
            "time" => Ok(AxisRole::Time),
            "space" => Ok(AxisRole::Space),
            other => Err(Error::Config(format!("unknown axis role `{other}`"))),
        }
    }
}

/// Dense row-major n-dimensional array with per-axis role tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub shape: Vec<usize>,
    pub axis_roles: Vec<AxisRole>,
    pub values: Vec<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(shape: Vec<usize>, axis_roles: Vec<AxisRole>, values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid dataset shape {shape:?}")));
        }
        if axis_roles.len() != shape.len() {
            return Err(Error::Config(format!(
                "{} axis roles for {} axes",
                axis_roles.len(),
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Dataset {
            shape,
            axis_roles,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Errors with the flat index of the first NaN or infinity.
    pub fn validate_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.values {
            let v = v.to_f64().unwrap();
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn range(&self) -> f64 {
        let (lo, hi) = self.min_max();
        hi - lo
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            shape: self.shape.clone(),
            axis_roles: self.axis_roles.clone(),
            values: self
                .values
                .iter()
                .map(|v| real(v.to_f64().unwrap()))
                .collect(),
        }
    }

    /// Index of the unique axis tagged `variable`, if any.
    pub fn variable_axis(&self) -> Option<usize> {
        let mut found = None;
        for (d, role) in self.axis_roles.iter().enumerate() {
            if *role == AxisRole::Variable {
                if found.is_some() {
                    return None;
                }
                found = Some(d);
            }
        }
        found
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Calls `f` with every multi-index of `shape` in row-major order.
pub fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        let mut d = rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            if d == 0 {
                return;
            }
        }
    }
}

/// Tiling plan: block shape plus the hyper-block grouping rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_shape: Vec<usize>,
    pub hyper_k: usize,
    pub hyper_axis: usize,
}

impl BlockSpec {
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        if self.block_shape.len() != shape.len() {
            return Err(Error::RankMismatch {
                spec: self.block_shape.len(),
                dataset: shape.len(),
            });
        }
        for (d, (&b, &s)) in self.block_shape.iter().zip(shape).enumerate() {
            if b == 0 || b > s {
                return Err(Error::Config(format!(
                    "block extent {b} invalid for axis {d} of length {s}"
                )));
            }
        }
        if self.hyper_k == 0 {
            return Err(Error::Config("hyper_k must be at least 1".into()));
        }
        if self.hyper_axis >= shape.len() {
            return Err(Error::Config(format!(
                "hyper_axis {} out of range for rank {}",
                self.hyper_axis,
                shape.len()
            )));
        }
        Ok(())
    }

    /// Blocks per axis: ceil(shape[d] / block_shape[d]).
    pub fn grid_shape(&self, shape: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .zip(&self.block_shape)
            .map(|(&s, &b)| s.div_ceil(b))
            .collect()
    }

    pub fn block_count(&self, shape: &[usize]) -> usize {
        self.grid_shape(shape).iter().product()
    }

    /// Flattened block length D.
    pub fn block_dim(&self) -> usize {
        self.block_shape.iter().product()
    }

    /// Per-axis count of real (non-padding) elements in the block at
    /// `grid_idx`.
    pub fn valid_extent(&self, shape: &[usize], grid_idx: &[usize]) -> Vec<usize> {
        grid_idx
            .iter()
            .zip(&self.block_shape)
            .zip(shape)
            .map(|((&g, &b), &s)| (s - g * b).min(b))
            .collect()
    }
}

/// One fixed-shape tile, flattened row-major. `index` holds the block's
/// grid coordinates; its element origin is `index[d] * block_shape[d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub index: Vec<usize>,
    pub data: Vec<T>,
}

/// `hyper_k` consecutive blocks along the hyper axis. A short final run
/// is padded by repeating its last block; `pad` counts the repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperBlock<T> {
    pub blocks: Vec<Block<T>>,
    pub pad: usize,
}

fn grid_index_of(linear: usize, grid: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; grid.len()];
    let mut rem = linear;
    for d in (0..grid.len()).rev() {
        idx[d] = rem % grid[d];
        rem /= grid[d];
    }
    idx
}

fn extract_block<T: Real>(ds: &Dataset<T>, spec: &BlockSpec, grid_idx: &[usize]) -> Block<T> {
    let rank = ds.rank();
    let st = strides(&ds.shape);
    let mut data = Vec::with_capacity(spec.block_dim());
    for_each_index(&spec.block_shape, |off| {
        let mut flat = 0usize;
        let mut inside = true;
        for d in 0..rank {
            let coord = grid_idx[d] * spec.block_shape[d] + off[d];
            if coord >= ds.shape[d] {
                inside = false;
                break;
            }
            flat += coord * st[d];
        }
        data.push(if inside { ds.values[flat] } else { T::zero() });
    });
    Block {
        index: grid_idx.to_vec(),
        data,
    }
}

/// Tiles the dataset into blocks in row-major grid order, zero-padding
/// edge blocks to the full block shape.
pub fn partition<T: Real>(ds: &Dataset<T>, spec: &BlockSpec) -> Result<Vec<Block<T>>> {
    spec.validate(&ds.shape)?;
    let grid = spec.grid_shape(&ds.shape);
    let n: usize = grid.iter().product();
    let blocks = (0..n)
        .into_par_iter()
        .map(|i| extract_block(ds, spec, &grid_index_of(i, &grid)))
        .collect();
    Ok(blocks)
}

/// Groups partition output into hyper-blocks: runs of `hyper_k` blocks
/// that are consecutive along `hyper_axis` with all other grid
/// coordinates fixed. Hyper-blocks are ordered row-major over the grid
/// with the hyper axis coordinate replaced by the run index.
pub fn group_hyper<T: Real>(
    blocks: &[Block<T>],
    spec: &BlockSpec,
    grid: &[usize],
) -> Result<Vec<HyperBlock<T>>> {
    let n: usize = grid.iter().product();
    if blocks.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} blocks for grid {grid:?}",
            blocks.len()
        )));
    }
    let axis = spec.hyper_axis;
    let k = spec.hyper_k;
    let st = strides(grid);
    let mut hyper_grid = grid.to_vec();
    hyper_grid[axis] = grid[axis].div_ceil(k);

    let mut out = Vec::with_capacity(hyper_grid.iter().product());
    for_each_index(&hyper_grid, |hidx| {
        let mut members = Vec::with_capacity(k);
        let mut pad = 0usize;
        let mut base = 0usize;
        for d in 0..grid.len() {
            let coord = if d == axis { hidx[d] * k } else { hidx[d] };
            base += coord * st[d];
        }
        for j in 0..k {
            let coord = hidx[axis] * k + j;
            if coord < grid[axis] {
                members.push(blocks[base + j * st[axis]].clone());
            } else {
                members.push(members.last().expect("run is never empty").clone());
                pad += 1;
            }
        }
        out.push(HyperBlock {
            blocks: members,
            pad,
        });
    });
    Ok(out)
}

/// Inverse of [`group_hyper`]: restores blocks in partition order,
/// discarding repeated padding blocks.
pub fn ungroup_hyper<T: Real>(
    hyper: &[HyperBlock<T>],
    spec: &BlockSpec,
    grid: &[usize],
) -> Result<Vec<Block<T>>> {
    let axis = spec.hyper_axis;
    let k = spec.hyper_k;
    let st = strides(grid);
    let mut hyper_grid = grid.to_vec();
    hyper_grid[axis] = grid[axis].div_ceil(k);

    let n: usize = grid.iter().product();
    let mut slots: Vec<Option<Block<T>>> = vec![None; n];
    let mut h = 0usize;
    for_each_index(&hyper_grid, |hidx| {
        let hb = &hyper[h];
        h += 1;
        let mut base = 0usize;
        for d in 0..grid.len() {
            let coord = if d == axis { hidx[d] * k } else { hidx[d] };
            base += coord * st[d];
        }
        for (j, block) in hb.blocks.iter().enumerate() {
            let coord = hidx[axis] * k + j;
            if coord < grid[axis] {
                slots[base + j * st[axis]] = Some(block.clone());
            }
        }
    });
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(Error::MissingBlock(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    Zscore,
    Mean0Range1,
}

/// Inversion data for one normalization group. Stats are kept in `f64`
/// so denormalization is exact regardless of the storage scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub mean: f64,
    pub scale: f64,
    pub group_axis: Option<usize>,
    pub group_index: usize,
    /// Group had zero range (or std); scale was forced to 1.
    pub constant: bool,
}

fn group_of(flat: usize, shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => 0,
        Some(a) => {
            let st = strides(shape);
            (flat / st[a]) % shape[a]
        }
    }
}

/// Shifts and scales values so each group has mean 0 and unit spread:
/// std 1 for `Zscore` (population std), range 1 for `Mean0Range1`.
/// Groups are slices along `group_axis`; with `group_axis = None` the
/// whole dataset is one group.
pub fn normalize<T: Real>(
    ds: &Dataset<T>,
    mode: NormMode,
    group_axis: Option<usize>,
) -> Result<(Dataset<T>, Vec<NormStats>)> {
    if let Some(a) = group_axis {
        if a >= ds.rank() {
            return Err(Error::Config(format!(
                "group axis {a} out of range for rank {}",
                ds.rank()
            )));
        }
    }
    let n_groups = group_axis.map_or(1, |a| ds.shape[a]);

    if mode == NormMode::None {
        let stats = vec![NormStats {
            mode,
            mean: 0.0,
            scale: 1.0,
            group_axis,
            group_index: 0,
            constant: false,
        }];
        return Ok((ds.clone(), stats));
    }

    let gstride = group_axis.map(|a| strides(&ds.shape)[a]);
    let gextent = group_axis.map(|a| ds.shape[a]);
    let group = |flat: usize| -> usize {
        match (gstride, gextent) {
            (Some(st), Some(ext)) => (flat / st) % ext,
            _ => 0,
        }
    };

    let mut count = vec![0u64; n_groups];
    let mut sum = vec![0.0f64; n_groups];
    let mut lo = vec![f64::INFINITY; n_groups];
    let mut hi = vec![f64::NEG_INFINITY; n_groups];
    for (i, v) in ds.values.iter().enumerate() {
        let g = group(i);
        let v = v.to_f64().unwrap();
        count[g] += 1;
        sum[g] += v;
        if v < lo[g] {
            lo[g] = v;
        }
        if v > hi[g] {
            hi[g] = v;
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| s / c.max(1) as f64)
        .collect();

    let mut scale = vec![0.0f64; n_groups];
    match mode {
        NormMode::Zscore => {
            let mut sq = vec![0.0f64; n_groups];
            for (i, v) in ds.values.iter().enumerate() {
                let g = group(i);
                let d = v.to_f64().unwrap() - mean[g];
                sq[g] += d * d;
            }
            for g in 0..n_groups {
                scale[g] = (sq[g] / count[g].max(1) as f64).sqrt();
            }
        }
        NormMode::Mean0Range1 => {
            for g in 0..n_groups {
                scale[g] = hi[g] - lo[g];
            }
        }
        NormMode::None => unreachable!(),
    }

    let stats: Vec<NormStats> = (0..n_groups)
        .map(|g| {
            let constant = scale[g] == 0.0;
            NormStats {
                mode,
                mean: mean[g],
                scale: if constant { 1.0 } else { scale[g] },
                group_axis,
                group_index: g,
                constant,
            }
        })
        .collect();

    let values: Vec<T> = ds
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = &stats[group(i)];
            real((v.to_f64().unwrap() - s.mean) / s.scale)
        })
        .collect();

    let out = Dataset {
        shape: ds.shape.clone(),
        axis_roles: ds.axis_roles.clone(),
        values,
    };
    Ok((out, stats))
}

/// Exact inverse of [`normalize`] up to storage precision.
pub fn denormalize<T: Real>(ds: &Dataset<T>, stats: &[NormStats]) -> Result<Dataset<T>> {
    if stats.is_empty() {
        return Err(Error::Config("empty normalization stats".into()));
    }
    if stats[0].mode == NormMode::None {
        return Ok(ds.clone());
    }
    let axis = stats[0].group_axis;
    let n_groups = axis.map_or(1, |a| ds.shape[a]);
    if stats.len() != n_groups {
        return Err(Error::ShapeMismatch(format!(
            "{} stats for {n_groups} groups",
            stats.len()
        )));
    }
    let values: Vec<T> = ds
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = &stats[group_of(i, &ds.shape, axis)];
            real(v.to_f64().unwrap() * s.scale + s.mean)
        })
        .collect();
    Ok(Dataset {
        shape: ds.shape.clone(),
        axis_roles: ds.axis_roles.clone(),
        values,
    })
}

/// Writes blocks back into a dense dataset, dropping padding, then
/// denormalizes. Exact inverse of `normalize` + `partition` up to
/// storage precision (bit-exact when `stats` is the `None` mode).
pub fn reassemble<T: Real>(
    blocks: &[Block<T>],
    spec: &BlockSpec,
    shape: &[usize],
    axis_roles: &[AxisRole],
    stats: &[NormStats],
) -> Result<Dataset<T>> {
    spec.validate(shape)?;
    let grid = spec.grid_shape(shape);
    let n: usize = grid.iter().product();
    if blocks.len() != n {
        return Err(Error::MissingBlock(blocks.len().min(n)));
    }
    let rank = shape.len();
    let st = strides(shape);
    let total: usize = shape.iter().product();
    let mut values = vec![T::zero(); total];
    for block in blocks {
        if block.index.len() != rank || block.data.len() != spec.block_dim() {
            return Err(Error::ShapeMismatch(format!(
                "bad block at grid index {:?}",
                block.index
            )));
        }
        let mut pos = 0usize;
        for_each_index(&spec.block_shape, |off| {
            let mut flat = 0usize;
            let mut inside = true;
            for d in 0..rank {
                let coord = block.index[d] * spec.block_shape[d] + off[d];
                if coord >= shape[d] {
                    inside = false;
                    break;
                }
                flat += coord * st[d];
            }
            if inside {
                values[flat] = block.data[pos];
            }
            pos += 1;
        });
    }
    let ds = Dataset {
        shape: shape.to_vec(),
        axis_roles: axis_roles.to_vec(),
        values,
    };
    denormalize(&ds, stats)
}

/// Stats produced by `NormMode::None`; identity on denormalize.
pub fn identity_stats() -> Vec<NormStats> {
    vec![NormStats {
        mode: NormMode::None,
        mean: 0.0,
        scale: 1.0,
        group_axis: None,
        group_index: 0,
        constant: false,
    }]
}
