//! Hyper-block autoencoder.
//!
//! Each of the k blocks in a hyper-block is embedded by a two-layer
//! encoder, the k embeddings exchange information through LayerNorm +
//! self-attention with a residual connection (`e~ = Atten(norm(e)) + e`),
//! and the flattened result is projected to one latent vector per
//! hyper-block. The decoder mirrors the encoder with its own attention
//! parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    mse, mse_backward, relu, relu_backward, Adam, Attention, AttentionCache, Checkpoint,
    LayerNorm, LayerNormCache, Linear, NamedTensor, Param, Tensor2,
};
use crate::tensor::HyperBlock;
use crate::{real, Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HbaeConfig {
    /// Flattened block length D.
    pub block_dim: usize,
    /// Blocks per hyper-block.
    pub hyper_k: usize,
    pub embed_dim: usize,
    /// Latent length per hyper-block.
    pub latent_dim: usize,
    /// Width of the two-layer block embedder.
    pub hidden_dim: usize,
    pub d_k: usize,
    /// Must equal `embed_dim`: the residual connection adds the
    /// attention output back onto the embeddings.
    pub d_v: usize,
    /// When false the value projection is zeroed at init and all
    /// attention parameters are excluded from training, so the
    /// attention path contributes exactly nothing.
    pub attention_enabled: bool,
}

impl HbaeConfig {
    pub fn new(block_dim: usize, hyper_k: usize, latent_dim: usize) -> Self {
        HbaeConfig {
            block_dim,
            hyper_k,
            embed_dim: 128,
            latent_dim,
            hidden_dim: 256,
            d_k: 128,
            d_v: 128,
            attention_enabled: true,
        }
    }

    pub fn with_embed(mut self, embed_dim: usize, hidden_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self.hidden_dim = hidden_dim;
        self.d_k = embed_dim;
        self.d_v = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.block_dim,
            self.hyper_k,
            self.embed_dim,
            self.latent_dim,
            self.hidden_dim,
            self.d_k,
            self.d_v,
        ];
        if fields.iter().any(|&f| f == 0) {
            return Err(Error::Config("hbae dims must be positive".into()));
        }
        if self.latent_dim >= self.hyper_k * self.embed_dim {
            return Err(Error::Config(format!(
                "hbae latent_dim {} does not compress k*embed = {}",
                self.latent_dim,
                self.hyper_k * self.embed_dim
            )));
        }
        if self.d_v != self.embed_dim {
            return Err(Error::Config(format!(
                "hbae d_v {} must equal embed_dim {} for the residual connection",
                self.d_v, self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HbaeModel<T> {
    pub cfg: HbaeConfig,
    pub enc1: Linear<T>,
    pub enc2: Linear<T>,
    pub enc_norm: LayerNorm<T>,
    pub enc_attn: Attention<T>,
    pub to_latent: Linear<T>,
    pub from_latent: Linear<T>,
    pub dec_norm: LayerNorm<T>,
    pub dec_attn: Attention<T>,
    pub dec1: Linear<T>,
    pub dec2: Linear<T>,
}

pub struct HbaeCache<T> {
    x: Tensor2<T>,
    h1: Tensor2<T>,
    h1r: Tensor2<T>,
    en_cache: LayerNormCache<T>,
    eat_cache: AttentionCache<T>,
    flat: Tensor2<T>,
    pub latent: Tensor2<T>,
    dn_cache: LayerNormCache<T>,
    dat_cache: AttentionCache<T>,
    ftilde: Tensor2<T>,
    h2: Tensor2<T>,
    h2r: Tensor2<T>,
}

impl<T: Real> HbaeModel<T> {
    pub fn init(cfg: &HbaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k, em, h, lh) = (
            cfg.block_dim,
            cfg.hyper_k,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.latent_dim,
        );
        let mut model = HbaeModel {
            cfg: cfg.clone(),
            enc1: Linear::new(d, h, &mut rng),
            enc2: Linear::new(h, em, &mut rng),
            enc_norm: LayerNorm::new(em),
            enc_attn: Attention::new(em, cfg.d_k, cfg.d_v, &mut rng),
            to_latent: Linear::new(k * em, lh, &mut rng),
            from_latent: Linear::new(lh, k * em, &mut rng),
            dec_norm: LayerNorm::new(em),
            dec_attn: Attention::new(em, cfg.d_k, cfg.d_v, &mut rng),
            dec1: Linear::new(em, h, &mut rng),
            dec2: Linear::new(h, d, &mut rng),
        };
        if !cfg.attention_enabled {
            // Attention weights are drawn either way so the ablated and
            // full models share init for every other layer; zeroing the
            // value projections makes both attention paths exact no-ops.
            model.enc_attn.wv.w.data.fill(T::zero());
            model.dec_attn.wv.w.data.fill(T::zero());
        }
        Ok(model)
    }

    /// All parameters in a fixed canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::with_capacity(22);
        ps.extend(self.enc1.params_mut());
        ps.extend(self.enc2.params_mut());
        ps.extend(self.enc_norm.params_mut());
        ps.extend(self.enc_attn.params_mut());
        ps.extend(self.to_latent.params_mut());
        ps.extend(self.from_latent.params_mut());
        ps.extend(self.dec_norm.params_mut());
        ps.extend(self.dec_attn.params_mut());
        ps.extend(self.dec1.params_mut());
        ps.extend(self.dec2.params_mut());
        ps
    }

    /// Parameters Adam may touch; excludes both attention projections
    /// when attention is ablated.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let enabled = self.cfg.attention_enabled;
        let mut ps = Vec::with_capacity(22);
        ps.extend(self.enc1.params_mut());
        ps.extend(self.enc2.params_mut());
        ps.extend(self.enc_norm.params_mut());
        if enabled {
            ps.extend(self.enc_attn.params_mut());
        }
        ps.extend(self.to_latent.params_mut());
        ps.extend(self.from_latent.params_mut());
        ps.extend(self.dec_norm.params_mut());
        if enabled {
            ps.extend(self.dec_attn.params_mut());
        }
        ps.extend(self.dec1.params_mut());
        ps.extend(self.dec2.params_mut());
        ps
    }

    pub fn param_count(&self) -> usize {
        self.enc1.param_count()
            + self.enc2.param_count()
            + 2 * self.cfg.embed_dim
            + self.enc_attn.param_count()
            + self.to_latent.param_count()
            + self.from_latent.param_count()
            + 2 * self.cfg.embed_dim
            + self.dec_attn.param_count()
            + self.dec1.param_count()
            + self.dec2.param_count()
    }

    /// Rounds every parameter through `f32` storage precision.
    pub fn freeze_to_f32(&mut self) {
        for p in self.params_mut() {
            p.freeze_to_f32();
        }
    }

    fn check_batch_input(&self, x: &Tensor2<T>) -> Result<usize> {
        let k = self.cfg.hyper_k;
        if x.cols != self.cfg.block_dim || x.rows == 0 || x.rows % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "hbae input {}x{} is not a stack of {k}-block hyper-blocks of dim {}",
                x.rows, x.cols, self.cfg.block_dim
            )));
        }
        Ok(x.rows / k)
    }

    /// Encodes a stack of hyper-blocks. Input is `(B*k) x D`, one block
    /// per row in hyper-block order; output is `B x latent_dim`.
    pub fn encode_batch(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        let b = self.check_batch_input(x)?;
        let k = self.cfg.hyper_k;
        let e = self.enc2.forward(&relu(&self.enc1.forward(x)?))?;
        let (en, _) = self.enc_norm.forward(&e)?;
        let (att, _) = self.enc_attn.forward(&en, k)?;
        let mut etilde = att;
        etilde.add_assign(&e);
        let flat = etilde.reshaped(b, k * self.cfg.embed_dim);
        self.to_latent.forward(&flat)
    }

    /// Decodes `B x latent_dim` back to `(B*k) x D`.
    pub fn decode_batch(&self, latent: &Tensor2<T>) -> Result<Tensor2<T>> {
        if latent.cols != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "hbae latent width {} vs configured {}",
                latent.cols, self.cfg.latent_dim
            )));
        }
        let (k, em) = (self.cfg.hyper_k, self.cfg.embed_dim);
        let g = self.from_latent.forward(latent)?;
        let f = g.reshaped(latent.rows * k, em);
        let (fn_, _) = self.dec_norm.forward(&f)?;
        let (att, _) = self.dec_attn.forward(&fn_, k)?;
        let mut ftilde = att;
        ftilde.add_assign(&f);
        self.dec2.forward(&relu(&self.dec1.forward(&ftilde)?))
    }

    /// Encodes one hyper-block to its latent vector.
    pub fn encode(&self, hb: &HyperBlock<T>) -> Result<Vec<T>> {
        let x = hyper_to_tensor(std::slice::from_ref(hb), self.cfg.block_dim)?;
        Ok(self.encode_batch(&x)?.data)
    }

    /// Decodes one latent vector to k blocks of length D.
    pub fn decode(&self, latent: &[T]) -> Result<Vec<Vec<T>>> {
        let lat = Tensor2::from_vec(1, latent.len(), latent.to_vec());
        let y = self.decode_batch(&lat)?;
        Ok(y.data.chunks(self.cfg.block_dim).map(<[T]>::to_vec).collect())
    }

    /// Full round trip with every intermediate retained for backward.
    pub fn forward_full(&self, x: &Tensor2<T>) -> Result<(Tensor2<T>, HbaeCache<T>)> {
        let b = self.check_batch_input(x)?;
        let (k, em) = (self.cfg.hyper_k, self.cfg.embed_dim);
        let h1 = self.enc1.forward(x)?;
        let h1r = relu(&h1);
        let e = self.enc2.forward(&h1r)?;
        let (en, en_cache) = self.enc_norm.forward(&e)?;
        let (att, eat_cache) = self.enc_attn.forward(&en, k)?;
        let mut etilde = att;
        etilde.add_assign(&e);
        let flat = etilde.reshaped(b, k * em);
        let latent = self.to_latent.forward(&flat)?;

        let g = self.from_latent.forward(&latent)?;
        let f = g.reshaped(b * k, em);
        let (fn_, dn_cache) = self.dec_norm.forward(&f)?;
        let (datt, dat_cache) = self.dec_attn.forward(&fn_, k)?;
        let mut ftilde = datt;
        ftilde.add_assign(&f);
        let h2 = self.dec1.forward(&ftilde)?;
        let h2r = relu(&h2);
        let y = self.dec2.forward(&h2r)?;

        let cache = HbaeCache {
            x: x.clone(),
            h1,
            h1r,
            en_cache,
            eat_cache,
            flat,
            latent,
            dn_cache,
            dat_cache,
            ftilde,
            h2,
            h2r,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients for d(loss)/dy.
    pub fn backward_full(&mut self, cache: &HbaeCache<T>, dy: &Tensor2<T>) {
        let b = cache.latent.rows;
        let (k, em) = (self.cfg.hyper_k, self.cfg.embed_dim);

        let dh2r = self.dec2.backward(&cache.h2r, dy);
        let dh2 = relu_backward(&cache.h2, &dh2r);
        let dftilde = self.dec1.backward(&cache.ftilde, &dh2);
        let ddn_out = self.dec_attn.backward(&cache.dat_cache, &dftilde);
        let mut df = self.dec_norm.backward(&cache.dn_cache, &ddn_out);
        df.add_assign(&dftilde);
        let dg = df.reshaped(b, k * em);
        let dlat = self.from_latent.backward(&cache.latent, &dg);

        let dflat = self.to_latent.backward(&cache.flat, &dlat);
        let detilde = dflat.reshaped(b * k, em);
        let den_out = self.enc_attn.backward(&cache.eat_cache, &detilde);
        let mut de = self.enc_norm.backward(&cache.en_cache, &den_out);
        de.add_assign(&detilde);
        let dh1r = self.enc2.backward(&cache.h1r, &de);
        let dh1 = relu_backward(&cache.h1, &dh1r);
        self.enc1.backward(&cache.x, &dh1);
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut push = |name: &str, t: &Tensor2<T>| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                rows: t.rows as u32,
                cols: t.cols as u32,
                data: t.data.iter().map(|v| v.to_f64().unwrap() as f32).collect(),
            });
        };
        for (name, t) in self.named_tensors() {
            push(name, t);
        }
        Checkpoint {
            kind: "hbae".into(),
            config_json: serde_json::to_string(&self.cfg).expect("config serializes"),
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
            ("enc_norm.gamma", &self.enc_norm.gamma.w),
            ("enc_norm.beta", &self.enc_norm.beta.w),
            ("enc_attn.wq", &self.enc_attn.wq.w),
            ("enc_attn.wk", &self.enc_attn.wk.w),
            ("enc_attn.wv", &self.enc_attn.wv.w),
            ("to_latent.w", &self.to_latent.w.w),
            ("to_latent.b", &self.to_latent.b.w),
            ("from_latent.w", &self.from_latent.w.w),
            ("from_latent.b", &self.from_latent.b.w),
            ("dec_norm.gamma", &self.dec_norm.gamma.w),
            ("dec_norm.beta", &self.dec_norm.beta.w),
            ("dec_attn.wq", &self.dec_attn.wq.w),
            ("dec_attn.wk", &self.dec_attn.wk.w),
            ("dec_attn.wv", &self.dec_attn.wv.w),
            ("dec1.w", &self.dec1.w.w),
            ("dec1.b", &self.dec1.b.w),
            ("dec2.w", &self.dec2.w.w),
            ("dec2.b", &self.dec2.b.w),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "hbae" {
            return Err(Error::CorruptPayload(format!(
                "expected hbae checkpoint, found `{}`",
                ck.kind
            )));
        }
        let cfg: HbaeConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::CorruptPayload(format!("hbae config: {e}")))?;
        let mut model = HbaeModel::init(&cfg, ck.seed)?;
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
        Ok(model)
    }
}

/// Stacks hyper-blocks into one `(B*k) x D` matrix, one block per row.
pub fn hyper_to_tensor<T: Real>(hbs: &[HyperBlock<T>], block_dim: usize) -> Result<Tensor2<T>> {
    let mut data = Vec::new();
    let mut k = None;
    for hb in hbs {
        match k {
            None => k = Some(hb.blocks.len()),
            Some(k) if k != hb.blocks.len() => {
                return Err(Error::ShapeMismatch("ragged hyper-block batch".into()))
            }
            _ => {}
        }
        for b in &hb.blocks {
            if b.data.len() != block_dim {
                return Err(Error::ShapeMismatch(format!(
                    "block dim {} vs expected {block_dim}",
                    b.data.len()
                )));
            }
            data.extend_from_slice(&b.data);
        }
    }
    let rows = data.len() / block_dim;
    Ok(Tensor2::from_vec(rows, block_dim, data))
}

/// Trains on all hyper-blocks with shuffled mini-batches; returns the
/// model and per-epoch mean loss. `epochs == 0` returns the
/// initialization untouched.
pub fn train<T: Real>(
    hyperblocks: &[HyperBlock<T>],
    cfg: &HbaeConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(HbaeModel<T>, Vec<f64>)> {
    if hyperblocks.is_empty() {
        return Err(Error::Config("hbae training needs at least one hyper-block".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = HbaeModel::init(cfg, seed)?;
    let mut opt = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..hyperblocks.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let hbs: Vec<HyperBlock<T>> = batch.iter().map(|&i| hyperblocks[i].clone()).collect();
            let x = hyper_to_tensor(&hbs, cfg.block_dim)?;
            let (y, cache) = model.forward_full(&x)?;
            let loss = mse(&y, &x)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            let dy = mse_backward(&y, &x);
            model.backward_full(&cache, &dy);
            opt.step(&mut model.trainable_params_mut());
        }
        curve.push(loss_sum / hyperblocks.len() as f64);
    }
    Ok((model, curve))
}
