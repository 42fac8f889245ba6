//! Block-wise residual autoencoder.
//!
//! A plain MLP autoencoder over per-block residuals `r = x - y`, where
//! `y` is the first-stage reconstruction. Residuals are normalized with
//! one global mean/std pair so the mapping back is exactly invertible,
//! and the corrected value is formed additively: `x^R = d + y`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    mse, mse_backward, relu, relu_backward, Adam, Checkpoint, Linear, NamedTensor, Param, Tensor2,
};
use crate::{real, Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaeConfig {
    /// Flattened block length D.
    pub block_dim: usize,
    /// Latent length per block.
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

impl BaeConfig {
    pub fn new(block_dim: usize, latent_dim: usize) -> Self {
        BaeConfig {
            block_dim,
            latent_dim,
            hidden_dim: 4 * latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_dim == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("bae dims must be positive".into()));
        }
        if self.latent_dim >= self.block_dim {
            return Err(Error::Config(format!(
                "bae latent_dim {} does not compress block_dim {}",
                self.latent_dim, self.block_dim
            )));
        }
        Ok(())
    }
}

/// One mean/std pair for the whole residual dataset. Population std;
/// degenerate spreads fall back to scale 1 so normalization stays
/// invertible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualScale {
    pub mean: f64,
    pub std: f64,
}

impl ResidualScale {
    pub fn fit<T: Real>(rows: &[Vec<T>]) -> Result<Self> {
        let n: usize = rows.iter().map(Vec::len).sum();
        if n == 0 {
            return Err(Error::Config("residual scale needs data".into()));
        }
        let mut sum = 0.0;
        for row in rows {
            for v in row {
                sum += v.to_f64().unwrap();
            }
        }
        let mean = sum / n as f64;
        let mut var = 0.0;
        for row in rows {
            for v in row {
                let d = v.to_f64().unwrap() - mean;
                var += d * d;
            }
        }
        let std = (var / n as f64).sqrt();
        Ok(ResidualScale {
            mean,
            std: if std < 1e-12 { 1.0 } else { std },
        })
    }

    pub fn identity() -> Self {
        ResidualScale { mean: 0.0, std: 1.0 }
    }

    pub fn normalize<T: Real>(&self, r: T) -> T {
        (r - real(self.mean)) / real(self.std)
    }

    pub fn denormalize<T: Real>(&self, rn: T) -> T {
        rn * real(self.std) + real(self.mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaeModel<T> {
    pub cfg: BaeConfig,
    pub enc1: Linear<T>,
    pub enc2: Linear<T>,
    pub dec1: Linear<T>,
    pub dec2: Linear<T>,
}

pub struct BaeCache<T> {
    x: Tensor2<T>,
    h1: Tensor2<T>,
    h1r: Tensor2<T>,
    pub latent: Tensor2<T>,
    h2: Tensor2<T>,
    h2r: Tensor2<T>,
}

impl<T: Real> BaeModel<T> {
    pub fn init(cfg: &BaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(BaeModel {
            cfg: cfg.clone(),
            enc1: Linear::new(cfg.block_dim, cfg.hidden_dim, &mut rng),
            enc2: Linear::new(cfg.hidden_dim, cfg.latent_dim, &mut rng),
            dec1: Linear::new(cfg.latent_dim, cfg.hidden_dim, &mut rng),
            dec2: Linear::new(cfg.hidden_dim, cfg.block_dim, &mut rng),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::with_capacity(8);
        ps.extend(self.enc1.params_mut());
        ps.extend(self.enc2.params_mut());
        ps.extend(self.dec1.params_mut());
        ps.extend(self.dec2.params_mut());
        ps
    }

    pub fn param_count(&self) -> usize {
        self.enc1.param_count()
            + self.enc2.param_count()
            + self.dec1.param_count()
            + self.dec2.param_count()
    }

    pub fn freeze_to_f32(&mut self) {
        for p in self.params_mut() {
            p.freeze_to_f32();
        }
    }

    /// Encodes rows of normalized residuals, `B x D` to `B x latent`.
    pub fn encode_batch(&self, rn: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.enc2.forward(&relu(&self.enc1.forward(rn)?))
    }

    /// Decodes latents back to normalized residuals.
    pub fn decode_batch(&self, latent: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.dec2.forward(&relu(&self.dec1.forward(latent)?))
    }

    /// Encodes one residual block `x - y` to its latent vector.
    pub fn encode(&self, x: &[T], y: &[T], scale: &ResidualScale) -> Result<Vec<T>> {
        if x.len() != self.cfg.block_dim || y.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "bae encode got {} / {} values, block_dim {}",
                x.len(),
                y.len(),
                self.cfg.block_dim
            )));
        }
        let rn: Vec<T> = x
            .iter()
            .zip(y)
            .map(|(&xv, &yv)| scale.normalize(xv - yv))
            .collect();
        let t = Tensor2::from_vec(1, rn.len(), rn);
        Ok(self.encode_batch(&t)?.data)
    }

    /// Decodes one latent to the residual correction d in the original
    /// residual domain.
    pub fn decode_residual(&self, latent: &[T], scale: &ResidualScale) -> Result<Vec<T>> {
        let t = Tensor2::from_vec(1, latent.len(), latent.to_vec());
        let rn = self.decode_batch(&t)?;
        Ok(rn.data.iter().map(|&v| scale.denormalize(v)).collect())
    }

    /// Corrected block: `x^R[i] = d[i] + y[i]` elementwise.
    pub fn decode(&self, latent: &[T], y: &[T], scale: &ResidualScale) -> Result<Vec<T>> {
        let d = self.decode_residual(latent, scale)?;
        if d.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "bae decode: correction {} vs base {}",
                d.len(),
                y.len()
            )));
        }
        Ok(d.iter().zip(y).map(|(&dv, &yv)| dv + yv).collect())
    }

    pub fn forward_full(&self, rn: &Tensor2<T>) -> Result<(Tensor2<T>, BaeCache<T>)> {
        let h1 = self.enc1.forward(rn)?;
        let h1r = relu(&h1);
        let latent = self.enc2.forward(&h1r)?;
        let h2 = self.dec1.forward(&latent)?;
        let h2r = relu(&h2);
        let y = self.dec2.forward(&h2r)?;
        Ok((
            y,
            BaeCache {
                x: rn.clone(),
                h1,
                h1r,
                latent,
                h2,
                h2r,
            },
        ))
    }

    pub fn backward_full(&mut self, cache: &BaeCache<T>, dy: &Tensor2<T>) {
        let dh2r = self.dec2.backward(&cache.h2r, dy);
        let dh2 = relu_backward(&cache.h2, &dh2r);
        let dlat = self.dec1.backward(&cache.latent, &dh2);
        let dh1r = self.enc2.backward(&cache.h1r, &dlat);
        let dh1 = relu_backward(&cache.h1, &dh1r);
        self.enc1.backward(&cache.x, &dh1);
    }

    pub fn to_checkpoint(&self, seed: u64, scale: &ResidualScale) -> Checkpoint {
        let meta = BaeMeta {
            cfg: self.cfg.clone(),
            scale: *scale,
        };
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            tensors.push(NamedTensor {
                name: name.to_string(),
                rows: t.rows as u32,
                cols: t.cols as u32,
                data: t.data.iter().map(|v| v.to_f64().unwrap() as f32).collect(),
            });
        }
        Checkpoint {
            kind: "bae".into(),
            config_json: serde_json::to_string(&meta).expect("config serializes"),
            seed,
            tensors,
        }
    }

    fn named_tensors(&self) -> Vec<(&'static str, &Tensor2<T>)> {
        vec![
            ("enc1.w", &self.enc1.w.w),
            ("enc1.b", &self.enc1.b.w),
            ("enc2.w", &self.enc2.w.w),
            ("enc2.b", &self.enc2.b.w),
            ("dec1.w", &self.dec1.w.w),
            ("dec1.b", &self.dec1.b.w),
            ("dec2.w", &self.dec2.w.w),
            ("dec2.b", &self.dec2.b.w),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ResidualScale)> {
        if ck.kind != "bae" {
            return Err(Error::CorruptPayload(format!(
                "expected bae checkpoint, found `{}`",
                ck.kind
            )));
        }
        let meta: BaeMeta = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::CorruptPayload(format!("bae config: {e}")))?;
        let mut model = BaeModel::init(&meta.cfg, ck.seed)?;
        let names: Vec<&'static str> = model.named_tensors().iter().map(|(n, _)| *n).collect();
        for (name, param) in names.iter().zip(model.params_mut()) {
            let t = ck.tensor(name)?;
            if t.rows as usize != param.w.rows || t.cols as usize != param.w.cols {
                return Err(Error::CorruptPayload(format!(
                    "tensor `{name}` is {}x{}, model wants {}x{}",
                    t.rows, t.cols, param.w.rows, param.w.cols
                )));
            }
            param.w.data = t.data.iter().map(|&v| real(v as f64)).collect();
        }
        Ok((model, meta.scale))
    }
}

#[derive(Serialize, Deserialize)]
struct BaeMeta {
    cfg: BaeConfig,
    scale: ResidualScale,
}

/// Trains on raw residual rows: fits the global scale, normalizes, and
/// runs shuffled mini-batch Adam on the identity target.
pub fn train<T: Real>(
    residuals: &[Vec<T>],
    cfg: &BaeConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(BaeModel<T>, ResidualScale, Vec<f64>)> {
    if residuals.is_empty() {
        return Err(Error::Config("bae training needs at least one block".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if residuals.iter().any(|r| r.len() != cfg.block_dim) {
        return Err(Error::ShapeMismatch("residual row width vs bae block_dim".into()));
    }
    let scale = ResidualScale::fit(residuals)?;
    let mut model = BaeModel::init(cfg, seed)?;
    let mut opt = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let mut data = Vec::with_capacity(batch.len() * cfg.block_dim);
            for &i in batch {
                data.extend(residuals[i].iter().map(|&v| scale.normalize(v)));
            }
            let x = Tensor2::from_vec(batch.len(), cfg.block_dim, data);
            let (y, cache) = model.forward_full(&x)?;
            let loss = mse(&y, &x)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            let dy = mse_backward(&y, &x);
            model.backward_full(&cache, &dy);
            opt.step(&mut model.params_mut());
        }
        curve.push(loss_sum / residuals.len() as f64);
    }
    Ok((model, scale, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect()
    }

    #[test]
    fn scale_fit_matches_hand_computation() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
        let s = ResidualScale::fit(&rows).unwrap();
        assert_eq!(s.mean, 3.0);
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        assert!((s.std - f64::sqrt(var)).abs() < 1e-15);
    }

    #[test]
    fn constant_residuals_get_unit_scale() {
        let rows = vec![vec![0.25; 4]; 3];
        let s = ResidualScale::fit(&rows).unwrap();
        assert_eq!(s.mean, 0.25);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.denormalize(s.normalize(0.25f64)), 0.25);
    }

    #[test]
    fn normalize_round_trips() {
        let s = ResidualScale { mean: 0.3, std: 2.5 };
        for v in [-1.0f64, 0.0, 0.7, 42.0] {
            assert!((s.denormalize(s.normalize(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_matches_manual_composition() {
        let cfg = BaeConfig::new(8, 3);
        let model = BaeModel::<f64>::init(&cfg, 5).unwrap();
        let scale = ResidualScale { mean: 0.1, std: 0.4 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = model.encode(&x, &y, &scale).unwrap();

        let rn: Vec<f64> = x
            .iter()
            .zip(&y)
            .map(|(&xv, &yv)| scale.normalize(xv - yv))
            .collect();
        let t = Tensor2::from_vec(1, 8, rn);
        let want = model
            .enc2
            .forward(&relu(&model.enc1.forward(&t).unwrap()))
            .unwrap();
        assert_eq!(got, want.data);
    }

    #[test]
    fn decode_is_bitwise_additive() {
        let cfg = BaeConfig::new(6, 2);
        let model = BaeModel::<f64>::init(&cfg, 7).unwrap();
        let scale = ResidualScale { mean: -0.2, std: 1.7 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let latent: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = model.decode_residual(&latent, &scale).unwrap();
        let xr = model.decode(&latent, &y, &scale).unwrap();
        for i in 0..6 {
            assert_eq!(xr[i], d[i] + y[i], "additivity must hold bitwise");
        }
    }

    #[test]
    fn identical_inputs_give_zero_residual_path() {
        let cfg = BaeConfig::new(4, 2);
        let model = BaeModel::<f64>::init(&cfg, 9).unwrap();
        let scale = ResidualScale::identity();
        let x = vec![0.5, -0.25, 0.125, 0.75];
        let a = model.encode(&x, &x, &scale).unwrap();
        let b = model
            .encode_batch(&Tensor2::zeros(1, 4))
            .unwrap();
        assert_eq!(a, b.data);
    }

    #[test]
    fn training_reduces_loss_and_memorizes() {
        let cfg = BaeConfig::new(8, 4);
        let rows = vec![random_rows(1, 8, 11)[0].clone(); 8];
        let (model, scale, curve) = train(&rows, &cfg, 300, 8, 0.01, 2).unwrap();
        assert!(curve.last().unwrap() < curve.first().unwrap());
        let lat = model.encode(&rows[0], &vec![0.0; 8], &scale).unwrap();
        let xr = model.decode(&lat, &vec![0.0; 8], &scale).unwrap();
        let err: f64 = rows[0]
            .iter()
            .zip(&xr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 8.0;
        assert!(err < 1e-4, "memorization mse {err}");
    }

    #[test]
    fn second_stage_on_own_residuals_does_not_increase_error() {
        let cfg = BaeConfig::new(8, 4);
        let rows = random_rows(32, 8, 13);
        let (m1, s1, _) = train(&rows, &cfg, 150, 8, 0.005, 3).unwrap();
        let zeros = vec![0.0f64; 8];
        let d1: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let lat = m1.encode(r, &zeros, &s1).unwrap();
                m1.decode_residual(&lat, &s1).unwrap()
            })
            .collect();
        let r2: Vec<Vec<f64>> = rows
            .iter()
            .zip(&d1)
            .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a - b).collect())
            .collect();
        let sq = |rows: &[Vec<f64>]| -> f64 {
            rows.iter()
                .flat_map(|r| r.iter())
                .map(|v| v * v)
                .sum::<f64>()
        };
        let (m2, s2, _) = train(&r2, &cfg, 150, 8, 0.005, 4).unwrap();
        let r3: Vec<Vec<f64>> = r2
            .iter()
            .map(|r| {
                let lat = m2.encode(r, &zeros, &s2).unwrap();
                let d = m2.decode_residual(&lat, &s2).unwrap();
                r.iter().zip(&d).map(|(a, b)| a - b).collect()
            })
            .collect();
        assert!(sq(&r3) <= sq(&r2) * 1.05, "stacked stage made things worse");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = BaeConfig::new(8, 4);
        let rows = random_rows(4, 8, 15);
        let (model, _, curve) = train(&rows, &cfg, 0, 2, 0.001, 42).unwrap();
        assert_eq!(model, BaeModel::<f64>::init(&cfg, 42).unwrap());
        assert!(curve.is_empty());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = BaeConfig::new(5, 2);
        let mut model = BaeModel::<f64>::init(&cfg, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor2::from_vec(3, 5, data);

        let (y, cache) = model.forward_full(&x).unwrap();
        let dy = mse_backward(&y, &x);
        model.backward_full(&cache, &dy);
        let analytic: Vec<Tensor2<f64>> =
            model.params_mut().iter().map(|p| p.g.clone()).collect();

        let h = 1e-5;
        let mut worst = 0.0f64;
        for pi in 0..analytic.len() {
            for j in 0..analytic[pi].data.len() {
                let orig = model.params_mut()[pi].w.data[j];
                model.params_mut()[pi].w.data[j] = orig + h;
                let up = mse(&model.forward_full(&x).unwrap().0, &x).unwrap();
                model.params_mut()[pi].w.data[j] = orig - h;
                let down = mse(&model.forward_full(&x).unwrap().0, &x).unwrap();
                model.params_mut()[pi].w.data[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi].data[j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_frozen_model_and_scale() {
        let cfg = BaeConfig::new(6, 2);
        let mut model = BaeModel::<f64>::init(&cfg, 19).unwrap();
        model.freeze_to_f32();
        let scale = ResidualScale { mean: 0.125, std: 0.5 };
        let ck = model.to_checkpoint(19, &scale);
        let (back, s2) = BaeModel::<f64>::from_checkpoint(&ck).unwrap();
        assert_eq!(back, model);
        assert_eq!(s2, scale);
    }
}
