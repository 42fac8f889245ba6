//! Synthetic dataset generators for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::tensor::{for_each_index, AxisRole, Dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Sums of low-frequency cosine products over all axes.
    Smooth,
    /// First axis is Variable: affine images of one smooth base field
    /// plus small noise, so variables correlate strongly.
    Multivar,
    /// Nonnegative Gaussian bumps.
    HistogramLike,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(SynthKind::Smooth),
            "multivar" => Ok(SynthKind::Multivar),
            "histogram_like" => Ok(SynthKind::HistogramLike),
            other => Err(Error::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

fn smooth_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n_waves = 4;
    let rank = shape.len();
    struct Wave {
        amp: f64,
        freq: Vec<f64>,
        phase: Vec<f64>,
    }
    let waves: Vec<Wave> = (0..n_waves)
        .map(|_| Wave {
            amp: rng.random_range(0.3..1.0),
            freq: (0..rank).map(|_| rng.random_range(1..4) as f64).collect(),
            phase: (0..rank).map(|_| rng.random_range(0.0..TAU)).collect(),
        })
        .collect();
    let total: usize = shape.iter().product();
    let mut values = Vec::with_capacity(total);
    for_each_index(shape, |idx| {
        let mut v = 0.0;
        for w in &waves {
            let mut term = w.amp;
            for d in 0..rank {
                let t = idx[d] as f64 / shape[d] as f64;
                term *= (TAU * w.freq[d] * t + w.phase[d]).cos();
            }
            v += term;
        }
        values.push(v);
    });
    values
}

fn bump_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rank = shape.len();
    let n_bumps = 6;
    struct Bump {
        amp: f64,
        center: Vec<f64>,
        width: f64,
    }
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| Bump {
            amp: rng.random_range(0.5..2.0),
            center: (0..rank).map(|_| rng.random_range(0.0..1.0)).collect(),
            width: rng.random_range(0.08..0.3),
        })
        .collect();
    let total: usize = shape.iter().product();
    let mut values = Vec::with_capacity(total);
    for_each_index(shape, |idx| {
        let mut v = 0.0;
        for b in &bumps {
            let mut dist = 0.0;
            for d in 0..rank {
                let x = idx[d] as f64 / shape[d] as f64 - b.center[d];
                dist += x * x;
            }
            v += b.amp * (-dist / (2.0 * b.width * b.width)).exp();
        }
        values.push(v);
    });
    values
}

pub fn generate_synthetic(kind: SynthKind, shape: &[usize], seed: u64) -> Result<Dataset<f32>> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("bad synthetic shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = shape.len();
    let space_roles = |r: usize| -> Vec<AxisRole> {
        let mut roles = vec![AxisRole::Space; r];
        if r > 1 {
            roles[0] = AxisRole::Time;
        }
        roles
    };
    match kind {
        SynthKind::Smooth => {
            let values = smooth_values(shape, &mut rng);
            Dataset::new(
                shape.to_vec(),
                space_roles(rank),
                values.into_iter().map(|v| v as f32).collect(),
            )
        }
        SynthKind::HistogramLike => {
            let values = bump_values(shape, &mut rng);
            Dataset::new(
                shape.to_vec(),
                space_roles(rank),
                values.into_iter().map(|v| v as f32).collect(),
            )
        }
        SynthKind::Multivar => {
            if rank < 2 {
                return Err(Error::Config(
                    "multivar synthetic data needs a variable axis plus field axes".into(),
                ));
            }
            let base = smooth_values(&shape[1..], &mut rng);
            let spread = {
                let lo = base.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (hi - lo).max(1e-9)
            };
            let n_vars = shape[0];
            let mut values = Vec::with_capacity(n_vars * base.len());
            for _ in 0..n_vars {
                let gain = rng.random_range(0.5..2.0);
                let offset = rng.random_range(-1.0..1.0);
                let noise_amp = 0.01 * gain * spread;
                for &b in &base {
                    let noise = rng.random_range(-noise_amp..noise_amp);
                    values.push((gain * b + offset + noise) as f32);
                }
            }
            let mut roles = vec![AxisRole::Space; rank];
            roles[0] = AxisRole::Variable;
            if rank > 2 {
                roles[1] = AxisRole::Time;
            }
            Dataset::new(shape.to_vec(), roles, values)
        }
    }
}
