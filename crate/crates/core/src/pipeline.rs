//! End-to-end orchestration: train, compress, decompress, evaluate,
//! sweep.
//!
//! Compression and decompression share one reconstruction path: both
//! sides dequantize the stored latent symbols, run the same frozen
//! decoders, and apply corrections through the same routine, so the
//! compressor's error measurements are taken on exactly the bytes a
//! reader will produce.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{
    compression_ratio, ledger_for, read_archive, write_archive, GroupSizes, Manifest,
    RatioPolicy, RatioReport, SectionData, SizeLedger,
};
use crate::bae::{self, BaeConfig, BaeModel, ResidualScale};
use crate::codec::{
    dequantize, encode_indices, huffman_decode, huffman_encode, indices_from_mask, lossless_pack,
    lossless_unpack, mask_from_indices, pack_masks, quantize, unpack_masks, Backend,
    HuffmanTable, IndexBitmask, QuantizedStream,
};
use crate::guarantee::{
    correct_block, guarantee_dataset, FrozenBasis, GroupCorrection, GuaranteeReport, TauSpec,
};
use crate::hbae::{self, hyper_to_tensor, HbaeConfig, HbaeModel};
use crate::metrics::{nrmse, nrmse_per_variable, relative_point_error_histogram, Histogram};
use crate::nn::{Checkpoint, Tensor2};
use crate::tensor::{
    group_hyper, identity_stats, normalize, partition, reassemble, ungroup_hyper, Block,
    BlockSpec, Dataset, NormMode, NormStats,
};
use crate::wire::{put_bytes, put_u32, put_u64, Reader};
use crate::{Error, Result};

const DECODE_CHUNK: usize = 256;
const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Absolute,
    RangeRelative,
}

impl TauMode {
    pub fn to_spec(self, tau: f64) -> TauSpec {
        match self {
            TauMode::Absolute => TauSpec::Absolute(tau),
            TauMode::RangeRelative => TauSpec::RangeRelative(tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlocksConfig {
    pub ae_shape: Vec<usize>,
    pub hyper_k: usize,
    pub hyper_axis: usize,
    pub gae_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HbaeSection {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub d_k: Option<usize>,
    pub attention: bool,
}

impl Default for HbaeSection {
    fn default() -> Self {
        HbaeSection {
            latent_dim: 64,
            embed_dim: 128,
            hidden_dim: 256,
            d_k: None,
            attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaeSection {
    pub latent_dim: usize,
    pub hidden_dim: Option<usize>,
}

impl Default for BaeSection {
    fn default() -> Self {
        BaeSection {
            latent_dim: 16,
            hidden_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub hbae_bin: f64,
    pub bae_bin: f64,
    /// Defaults to tau / sqrt(D) per group when unset.
    pub gae_bin: Option<f64>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            hbae_bin: 0.005,
            bae_bin: 0.005,
            gae_bin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_hbae: usize,
    pub epochs_bae: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_hbae: 40,
            epochs_bae: 40,
            batch_size: 64,
            lr: 0.001,
        }
    }
}

fn default_tau() -> f64 {
    0.01
}
fn default_tau_mode() -> TauMode {
    TauMode::Absolute
}
fn default_norm() -> NormMode {
    NormMode::Zscore
}
fn default_policy() -> RatioPolicy {
    RatioPolicy::ExcludeModels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_tau_mode")]
    pub tau_mode: TauMode,
    #[serde(default)]
    pub per_variable: bool,
    #[serde(default = "default_norm")]
    pub normalization: NormMode,
    pub blocks: BlocksConfig,
    #[serde(default)]
    pub hbae: HbaeSection,
    #[serde(default)]
    pub bae: BaeSection,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_policy")]
    pub policy: RatioPolicy,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn ae_spec(&self) -> BlockSpec {
        BlockSpec {
            block_shape: self.blocks.ae_shape.clone(),
            hyper_k: self.blocks.hyper_k,
            hyper_axis: self.blocks.hyper_axis,
        }
    }

    pub fn gae_spec(&self) -> BlockSpec {
        BlockSpec {
            block_shape: self.blocks.gae_shape.clone(),
            hyper_k: 1,
            hyper_axis: self.blocks.hyper_axis,
        }
    }

    pub fn hbae_config(&self) -> HbaeConfig {
        let embed = self.hbae.embed_dim;
        HbaeConfig {
            block_dim: self.ae_spec().block_dim(),
            hyper_k: self.blocks.hyper_k,
            embed_dim: embed,
            latent_dim: self.hbae.latent_dim,
            hidden_dim: self.hbae.hidden_dim,
            d_k: self.hbae.d_k.unwrap_or(embed),
            d_v: embed,
            attention_enabled: self.hbae.attention,
        }
    }

    pub fn bae_config(&self) -> BaeConfig {
        let latent = self.bae.latent_dim;
        BaeConfig {
            block_dim: self.ae_spec().block_dim(),
            latent_dim: latent,
            hidden_dim: self.bae.hidden_dim.unwrap_or(4 * latent),
        }
    }

    pub fn validate_for(&self, ds: &Dataset<f32>) -> Result<()> {
        self.ae_spec().validate(&ds.shape)?;
        self.gae_spec().validate(&ds.shape)?;
        self.hbae_config().validate()?;
        self.bae_config().validate()?;
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.quant.hbae_bin <= 0.0 || self.quant.bae_bin <= 0.0 {
            return Err(Error::Config("quantization bins must be positive".into()));
        }
        if let Some(b) = self.quant.gae_bin {
            if b <= 0.0 {
                return Err(Error::Config("gae bin must be positive".into()));
            }
        }
        if self.per_variable {
            let va = ds
                .variable_axis()
                .ok_or_else(|| Error::Config("per_variable needs a variable axis".into()))?;
            if self.blocks.gae_shape[va] != 1 {
                return Err(Error::Config(format!(
                    "per_variable needs gae_shape[{va}] == 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub hbae: HbaeModel<f64>,
    pub bae: BaeModel<f64>,
    pub residual_scale: ResidualScale,
    pub hbae_curve: Vec<f64>,
    pub bae_curve: Vec<f64>,
}

fn norm_group_axis(ds: &Dataset<f32>) -> Option<usize> {
    ds.variable_axis()
}

/// Trains the first stage, freezes it, derives the quantized
/// first-stage reconstruction, and trains the residual stage on what
/// is actually left after storage. Both models come back frozen to
/// f32 precision.
pub fn train_models(ds: &Dataset<f32>, cfg: &PipelineConfig) -> Result<TrainedModels> {
    ds.validate_finite()?;
    cfg.validate_for(ds)?;
    let ae_spec = cfg.ae_spec();
    let (norm_ds, _) = normalize(&ds.cast::<f64>(), cfg.normalization, norm_group_axis(ds))?;
    let grid = ae_spec.grid_shape(&ds.shape);
    let x_blocks = partition(&norm_ds, &ae_spec)?;
    let hypers = group_hyper(&x_blocks, &ae_spec, &grid)?;

    let (mut hbae_model, hbae_curve) = hbae::train(
        &hypers,
        &cfg.hbae_config(),
        cfg.train.epochs_hbae,
        cfg.train.batch_size,
        cfg.train.lr,
        cfg.seed,
    )?;
    hbae_model.freeze_to_f32();

    let latents = encode_hyper_latents(&hbae_model, &hypers)?;
    let qs = quantize(&latents, cfg.quant.hbae_bin)?;
    let y_blocks = decode_hbae_blocks(&hbae_model, &ae_spec, &grid, &hypers, &dequantize(&qs))?;

    let residuals: Vec<Vec<f64>> = x_blocks
        .iter()
        .zip(&y_blocks)
        .map(|(x, y)| x.data.iter().zip(&y.data).map(|(a, b)| a - b).collect())
        .collect();
    let (mut bae_model, residual_scale, bae_curve) = bae::train(
        &residuals,
        &cfg.bae_config(),
        cfg.train.epochs_bae,
        cfg.train.batch_size,
        cfg.train.lr,
        cfg.seed.wrapping_add(1),
    )?;
    bae_model.freeze_to_f32();

    Ok(TrainedModels {
        hbae: hbae_model,
        bae: bae_model,
        residual_scale,
        hbae_curve,
        bae_curve,
    })
}

pub fn save_models(models: &TrainedModels, seed: u64, prefix: &Path) -> Result<()> {
    let hbae_path = prefix.with_extension("hbae.ckpt");
    let bae_path = prefix.with_extension("bae.ckpt");
    models.hbae.to_checkpoint(seed).write(&hbae_path)?;
    models
        .bae
        .to_checkpoint(seed, &models.residual_scale)
        .write(&bae_path)?;
    Ok(())
}

pub fn load_models(prefix: &Path) -> Result<TrainedModels> {
    let hbae_ck = Checkpoint::read(&prefix.with_extension("hbae.ckpt"))?;
    let bae_ck = Checkpoint::read(&prefix.with_extension("bae.ckpt"))?;
    let hbae = HbaeModel::from_checkpoint(&hbae_ck)?;
    let (bae, residual_scale) = BaeModel::from_checkpoint(&bae_ck)?;
    Ok(TrainedModels {
        hbae,
        bae,
        residual_scale,
        hbae_curve: Vec::new(),
        bae_curve: Vec::new(),
    })
}

/// Encodes every hyper-block to its latent row, chunked.
fn encode_hyper_latents(
    model: &HbaeModel<f64>,
    hypers: &[crate::tensor::HyperBlock<f64>],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(hypers.len() * model.cfg.latent_dim);
    for chunk in hypers.chunks(DECODE_CHUNK) {
        let x = hyper_to_tensor(chunk, model.cfg.block_dim)?;
        out.extend(model.encode_batch(&x)?.data);
    }
    Ok(out)
}

/// Decodes dequantized hyper-block latents back to first-stage blocks
/// in partition order (normalized domain). `template` supplies the
/// hyper-block structure; its values are ignored.
fn decode_hbae_blocks(
    model: &HbaeModel<f64>,
    ae_spec: &BlockSpec,
    grid: &[usize],
    template: &[crate::tensor::HyperBlock<f64>],
    latent_vals: &[f64],
) -> Result<Vec<Block<f64>>> {
    let (k, lh, d) = (model.cfg.hyper_k, model.cfg.latent_dim, model.cfg.block_dim);
    if latent_vals.len() != template.len() * lh {
        return Err(Error::CorruptStream(format!(
            "{} latent values for {} hyper-blocks of width {lh}",
            latent_vals.len(),
            template.len()
        )));
    }
    let mut decoded = Vec::with_capacity(template.len());
    for (ci, chunk) in template.chunks(DECODE_CHUNK).enumerate() {
        let start = ci * DECODE_CHUNK * lh;
        let vals = &latent_vals[start..start + chunk.len() * lh];
        let lat = Tensor2::from_vec(chunk.len(), lh, vals.to_vec());
        let y = model.decode_batch(&lat)?;
        for (hi, hb) in chunk.iter().enumerate() {
            let mut out = hb.clone();
            for (j, block) in out.blocks.iter_mut().enumerate() {
                let row = y.row(hi * k + j);
                block.data.clear();
                block.data.extend_from_slice(&row[..d]);
            }
            decoded.push(out);
        }
    }
    ungroup_hyper(&decoded, ae_spec, grid)
}

/// The full stage-1+2 reconstruction both the writer and the reader
/// run: first-stage blocks plus decoded residual corrections,
/// reassembled, denormalized, and cast to storage precision.
#[allow(clippy::too_many_arguments)]
fn stage12_reconstruct(
    shape: &[usize],
    axis_roles: &[crate::tensor::AxisRole],
    ae_spec: &BlockSpec,
    stats: &[NormStats],
    bae_model: &BaeModel<f64>,
    scale: &ResidualScale,
    y_blocks: &[Block<f64>],
    bae_vals: &[f64],
) -> Result<Dataset<f32>> {
    let lb = bae_model.cfg.latent_dim;
    let d = bae_model.cfg.block_dim;
    if bae_vals.len() != y_blocks.len() * lb {
        return Err(Error::CorruptStream(format!(
            "{} residual latent values for {} blocks of width {lb}",
            bae_vals.len(),
            y_blocks.len()
        )));
    }
    let lat = Tensor2::from_vec(y_blocks.len(), lb, bae_vals.to_vec());
    let rn = bae_model.decode_batch(&lat)?;
    let mut xr_blocks = Vec::with_capacity(y_blocks.len());
    for (i, y) in y_blocks.iter().enumerate() {
        let row = rn.row(i);
        let mut b = y.clone();
        for (j, v) in b.data.iter_mut().enumerate() {
            *v = scale.denormalize(row[j]) + y.data[j];
        }
        debug_assert_eq!(b.data.len(), d);
        xr_blocks.push(b);
    }
    let recon = reassemble(&xr_blocks, ae_spec, shape, axis_roles, stats)?;
    Ok(recon.cast::<f32>())
}

pub struct Stage1Output {
    pub stats: Vec<NormStats>,
    pub hbae_qs: QuantizedStream,
    pub bae_qs: QuantizedStream,
    /// Reconstruction after both autoencoder stages, original domain.
    pub xr: Dataset<f32>,
}

/// Runs the learned stages and quantization; everything that does not
/// depend on tau.
pub fn stage1(
    ds: &Dataset<f32>,
    cfg: &PipelineConfig,
    models: &TrainedModels,
) -> Result<Stage1Output> {
    ds.validate_finite()?;
    cfg.validate_for(ds)?;
    let ae_spec = cfg.ae_spec();
    let (norm_ds, stats) = normalize(&ds.cast::<f64>(), cfg.normalization, norm_group_axis(ds))?;
    let grid = ae_spec.grid_shape(&ds.shape);
    let x_blocks = partition(&norm_ds, &ae_spec)?;
    let hypers = group_hyper(&x_blocks, &ae_spec, &grid)?;

    let latents = encode_hyper_latents(&models.hbae, &hypers)?;
    let hbae_qs = quantize(&latents, cfg.quant.hbae_bin)?;
    let y_blocks =
        decode_hbae_blocks(&models.hbae, &ae_spec, &grid, &hypers, &dequantize(&hbae_qs))?;

    let d = ae_spec.block_dim();
    let mut rn = Vec::with_capacity(x_blocks.len() * d);
    for (x, y) in x_blocks.iter().zip(&y_blocks) {
        for (a, b) in x.data.iter().zip(&y.data) {
            rn.push(models.residual_scale.normalize(a - b));
        }
    }
    let rn = Tensor2::from_vec(x_blocks.len(), d, rn);
    let bae_latents = models.bae.encode_batch(&rn)?;
    let bae_qs = quantize(&bae_latents.data, cfg.quant.bae_bin)?;

    let xr = stage12_reconstruct(
        &ds.shape,
        &ds.axis_roles,
        &ae_spec,
        &stats,
        &models.bae,
        &models.residual_scale,
        &y_blocks,
        &dequantize(&bae_qs),
    )?;
    Ok(Stage1Output {
        stats,
        hbae_qs,
        bae_qs,
        xr,
    })
}

pub struct CompressOutput {
    pub archive: Vec<u8>,
    /// The exact dataset a reader will decompress.
    pub corrected: Dataset<f32>,
    pub manifest: Manifest,
    pub ledger: SizeLedger,
    pub guarantee: GuaranteeReport,
    pub nrmse: f64,
    /// Provable ceiling: max group tau * sqrt(blocks/values) / range.
    pub nrmse_bound: f64,
}

pub fn compress(
    ds: &Dataset<f32>,
    cfg: &PipelineConfig,
    models: &TrainedModels,
) -> Result<CompressOutput> {
    let s1 = stage1(ds, cfg, models)?;
    finish_compress(ds, cfg, models, &s1, cfg.tau)
}

/// Applies the error-bound stage for one tau and writes the archive.
pub fn finish_compress(
    ds: &Dataset<f32>,
    cfg: &PipelineConfig,
    models: &TrainedModels,
    s1: &Stage1Output,
    tau: f64,
) -> Result<CompressOutput> {
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let gae_spec = cfg.gae_spec();
    let (corrected, groups, guarantee) = guarantee_dataset(
        ds,
        &s1.xr,
        &gae_spec,
        cfg.tau_mode.to_spec(tau),
        cfg.quant.gae_bin,
        cfg.per_variable,
    )?;

    // Independent recheck of the contract on the final values; a
    // violation here is a bug, never a warning.
    verify_block_bound(ds, &corrected, &gae_spec, &groups, cfg.per_variable)?;
    let nr = nrmse(ds, &corrected)?;
    let max_tau = guarantee.group_taus.iter().copied().fold(0.0, f64::max);
    let n_blocks = gae_spec.block_count(&ds.shape) as f64;
    let bound = max_tau * (n_blocks / ds.len() as f64).sqrt() / ds.range();
    assert!(
        nr <= bound * (1.0 + 1e-12),
        "nrmse {nr} above provable bound {bound}"
    );

    let (sections, per_group_sizes) = build_sections(cfg, models, s1, &groups)?;
    let manifest = Manifest {
        shape: ds.shape.clone(),
        axis_roles: ds.axis_roles.clone(),
        ae_spec: cfg.ae_spec(),
        gae_spec,
        norm: s1.stats.clone(),
        hbae: models.hbae.cfg.clone(),
        bae: models.bae.cfg.clone(),
        residual_scale: models.residual_scale,
        tau: cfg.tau_mode.to_spec(tau),
        per_variable: cfg.per_variable,
        group_taus: guarantee.group_taus.clone(),
        group_bins: groups.iter().map(|g| g.bin).collect(),
        hbae_bin: s1.hbae_qs.bin,
        bae_bin: s1.bae_qs.bin,
        hbae_latent_count: s1.hbae_qs.count as u64,
        bae_latent_count: s1.bae_qs.count as u64,
        seed: cfg.seed,
        backend: cfg.backend,
        per_group_sizes,
        sections: Vec::new(),
    };
    let archive = write_archive(&manifest, &sections)?;
    let (manifest, _) = read_archive(&archive)?;
    let ledger = ledger_for(archive.len() as u64, &manifest)?;

    Ok(CompressOutput {
        archive,
        corrected,
        manifest,
        ledger,
        guarantee,
        nrmse: nr,
        nrmse_bound: bound,
    })
}

fn verify_block_bound(
    orig: &Dataset<f32>,
    corrected: &Dataset<f32>,
    gae_spec: &BlockSpec,
    groups: &[GroupCorrection],
    per_variable: bool,
) -> Result<()> {
    let x_blocks = partition(orig, gae_spec)?;
    let g_blocks = partition(corrected, gae_spec)?;
    let va = if per_variable {
        orig.variable_axis()
    } else {
        None
    };
    for (x, g) in x_blocks.iter().zip(&g_blocks) {
        let gi = va.map_or(0, |a| x.index[a]);
        let tau = groups[gi].tau;
        let mut sq = 0.0f64;
        for (a, b) in x.data.iter().zip(&g.data) {
            let d = *a as f64 - *b as f64;
            sq += d * d;
        }
        let delta = sq.sqrt();
        assert!(
            delta <= tau,
            "block {:?} misses the bound: {delta} > {tau}",
            x.index
        );
    }
    Ok(())
}

fn pack_group_blob(out: &mut Vec<u8>, payload: &[u8], backend: Backend) -> Result<u64> {
    let packed = lossless_pack(payload, backend)?;
    let len = 4 + packed.len() as u64;
    put_bytes(out, &packed);
    Ok(len)
}

fn build_sections(
    cfg: &PipelineConfig,
    models: &TrainedModels,
    s1: &Stage1Output,
    groups: &[GroupCorrection],
) -> Result<(Vec<SectionData>, Vec<GroupSizes>)> {
    let backend = cfg.backend;

    let (hbae_bits, hbae_table) = huffman_encode(&s1.hbae_qs.symbols)?;
    let (bae_bits, bae_table) = huffman_encode(&s1.bae_qs.symbols)?;
    let hbae_section = lossless_pack(&hbae_bits, backend)?;
    let bae_section = lossless_pack(&bae_bits, backend)?;

    let mut tables = Vec::new();
    put_u32(&mut tables, 2);
    put_bytes(&mut tables, &hbae_table.to_bytes());
    put_bytes(&mut tables, &bae_table.to_bytes());

    let mut basis_section = Vec::new();
    let mut coeff_section = Vec::new();
    let mut index_section = Vec::new();
    let mut per_group_sizes = Vec::with_capacity(groups.len());
    for g in groups {
        let mut raw = Vec::with_capacity(g.basis.stored.len() * 4);
        for v in &g.basis.stored {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let basis_len = pack_group_blob(&mut basis_section, &raw, backend)?;

        let dim = g.basis.dim;
        let mut symbols = Vec::new();
        let mut masks: Vec<IndexBitmask> = Vec::with_capacity(g.records.len());
        let mut ids = Vec::with_capacity(g.records.len());
        for r in &g.records {
            symbols.extend_from_slice(&r.coeffs);
            masks.push(encode_indices(&mask_from_indices(&r.indices, dim)));
            ids.push(r.block_id as u64);
        }
        let mut coeff_payload = Vec::new();
        if symbols.is_empty() {
            put_u32(&mut coeff_payload, 0);
            put_u64(&mut coeff_payload, 0);
        } else {
            let (bits, table) = huffman_encode(&symbols)?;
            put_bytes(&mut coeff_payload, &table.to_bytes());
            put_u64(&mut coeff_payload, symbols.len() as u64);
            coeff_payload.extend_from_slice(&bits);
        }
        let coeff_len = pack_group_blob(&mut coeff_section, &coeff_payload, backend)?;

        let (mask_bits, mask_lens) = pack_masks(&masks);
        let mut index_payload = Vec::new();
        put_u32(&mut index_payload, ids.len() as u32);
        for id in &ids {
            put_u64(&mut index_payload, *id);
        }
        for l in &mask_lens {
            put_u32(&mut index_payload, *l);
        }
        index_payload.extend_from_slice(&mask_bits);
        let index_len = pack_group_blob(&mut index_section, &index_payload, backend)?;

        per_group_sizes.push(GroupSizes {
            basis: basis_len,
            coefficients: coeff_len,
            indices: index_len,
        });
    }

    let hbae_ck = models.hbae.to_checkpoint(cfg.seed);
    let bae_ck = models.bae.to_checkpoint(cfg.seed, &models.residual_scale);
    let mut weights_payload = Vec::new();
    put_u32(&mut weights_payload, 2);
    put_bytes(&mut weights_payload, &hbae_ck.to_bytes());
    put_bytes(&mut weights_payload, &bae_ck.to_bytes());
    let weights_section = lossless_pack(&weights_payload, backend)?;

    Ok((
        vec![
            SectionData::new("hbae_latents", hbae_section),
            SectionData::new("bae_latents", bae_section),
            SectionData::new("pca_basis", basis_section),
            SectionData::new("gae_coefficients", coeff_section),
            SectionData::new("gae_indices", index_section),
            SectionData::new("tables", tables),
            SectionData::new("model_weights", weights_section),
        ],
        per_group_sizes,
    ))
}

fn section<'a>(sections: &'a [SectionData], name: &str) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|s| s.name == name)
        .map(|s| s.bytes.as_slice())
        .ok_or_else(|| Error::CorruptPayload(format!("missing section `{name}`")))
}

fn read_group_blobs(bytes: &[u8], n_groups: usize, backend: Backend, what: &str) -> Result<Vec<Vec<u8>>> {
    let mut r = Reader::new(bytes, what);
    let mut out = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        out.push(lossless_unpack(r.bytes()?, backend)?);
    }
    r.expect_end()?;
    Ok(out)
}

pub fn decompress(archive: &[u8]) -> Result<(Dataset<f32>, Manifest)> {
    let (manifest, sections) = read_archive(archive)?;
    let backend = manifest.backend;

    let mut tr = Reader::new(section(&sections, "tables")?, "tables");
    if tr.u32()? != 2 {
        return Err(Error::CorruptPayload("expected two latent tables".into()));
    }
    let hbae_table = HuffmanTable::from_bytes(tr.bytes()?)?;
    let bae_table = HuffmanTable::from_bytes(tr.bytes()?)?;
    tr.expect_end()?;

    let weights = lossless_unpack(section(&sections, "model_weights")?, backend)?;
    let mut wr = Reader::new(&weights, "model weights");
    if wr.u32()? != 2 {
        return Err(Error::CorruptPayload("expected two checkpoints".into()));
    }
    let hbae_model = HbaeModel::<f64>::from_checkpoint(&Checkpoint::from_bytes(wr.bytes()?)?)?;
    let (bae_model, _) = BaeModel::<f64>::from_checkpoint(&Checkpoint::from_bytes(wr.bytes()?)?)?;
    wr.expect_end()?;
    let scale = manifest.residual_scale;

    let hbae_bits = lossless_unpack(section(&sections, "hbae_latents")?, backend)?;
    let hbae_syms = huffman_decode(&hbae_bits, &hbae_table, manifest.hbae_latent_count as usize)?;
    let bae_bits = lossless_unpack(section(&sections, "bae_latents")?, backend)?;
    let bae_syms = huffman_decode(&bae_bits, &bae_table, manifest.bae_latent_count as usize)?;
    let hbae_vals = dequantize(&QuantizedStream {
        bin: manifest.hbae_bin,
        count: hbae_syms.len(),
        symbols: hbae_syms,
    });
    let bae_vals = dequantize(&QuantizedStream {
        bin: manifest.bae_bin,
        count: bae_syms.len(),
        symbols: bae_syms,
    });

    // Rebuild the block structure from shape alone, then run the same
    // reconstruction the writer measured.
    let ae_spec = &manifest.ae_spec;
    let zero = Dataset::new(
        manifest.shape.clone(),
        manifest.axis_roles.clone(),
        vec![0f64; manifest.shape.iter().product()],
    )?;
    let grid = ae_spec.grid_shape(&manifest.shape);
    let template_blocks = partition(&zero, ae_spec)?;
    let hypers = group_hyper(&template_blocks, ae_spec, &grid)?;
    let y_blocks = decode_hbae_blocks(&hbae_model, ae_spec, &grid, &hypers, &hbae_vals)?;
    let xr = stage12_reconstruct(
        &manifest.shape,
        &manifest.axis_roles,
        ae_spec,
        &manifest.norm,
        &bae_model,
        &scale,
        &y_blocks,
        &bae_vals,
    )?;

    let n_groups = manifest.group_bins.len();
    let gae_dim = manifest.gae_spec.block_dim();
    let basis_blobs = read_group_blobs(section(&sections, "pca_basis")?, n_groups, backend, "pca basis")?;
    let coeff_blobs = read_group_blobs(
        section(&sections, "gae_coefficients")?,
        n_groups,
        backend,
        "gae coefficients",
    )?;
    let index_blobs = read_group_blobs(
        section(&sections, "gae_indices")?,
        n_groups,
        backend,
        "gae indices",
    )?;

    let mut blocks = partition(&xr, &manifest.gae_spec)?;
    for g in 0..n_groups {
        let raw = &basis_blobs[g];
        if raw.len() != gae_dim * gae_dim * 4 {
            return Err(Error::CorruptPayload(format!(
                "basis for group {g} has {} bytes",
                raw.len()
            )));
        }
        let stored: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let basis = FrozenBasis::from_stored(gae_dim, stored);

        let mut ir = Reader::new(&index_blobs[g], "gae indices");
        let n_records = ir.u32()? as usize;
        let mut ids = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            ids.push(ir.u64()? as usize);
        }
        let mut mask_lens = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            mask_lens.push(ir.u32()?);
        }
        let masks = unpack_masks(ir.take_rest(), &mask_lens, gae_dim)?;

        let mut cr = Reader::new(&coeff_blobs[g], "gae coefficients");
        let symbols = if n_records == 0 {
            if cr.u32()? != 0 || cr.u64()? != 0 {
                return Err(Error::CorruptPayload(format!(
                    "group {g} has coefficients but no records"
                )));
            }
            cr.expect_end()?;
            Vec::new()
        } else {
            let table = HuffmanTable::from_bytes(cr.bytes()?)?;
            let count = cr.u64()? as usize;
            huffman_decode(cr.take_rest(), &table, count)?
        };

        let bin = manifest.group_bins[g];
        let mut cursor = 0usize;
        for (id, mask) in ids.iter().zip(&masks) {
            let indices = indices_from_mask(mask);
            let m = indices.len();
            if cursor + m > symbols.len() {
                return Err(Error::CorruptStream(format!(
                    "group {g} coefficient stream exhausted"
                )));
            }
            let coeffs = &symbols[cursor..cursor + m];
            cursor += m;
            let block = blocks
                .get_mut(*id)
                .ok_or_else(|| Error::CorruptPayload(format!("record for block {id}")))?;
            block.data = correct_block(&block.data, &basis, &indices, coeffs, bin);
        }
        if cursor != symbols.len() {
            return Err(Error::CorruptPayload(format!(
                "group {g} has {} unused coefficients",
                symbols.len() - cursor
            )));
        }
    }

    let out = reassemble(
        &blocks,
        &manifest.gae_spec,
        &manifest.shape,
        &manifest.axis_roles,
        &identity_stats(),
    )?;
    Ok((out, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nrmse: f64,
    pub per_variable_nrmse: Option<Vec<f64>>,
    pub max_block_error: Option<f64>,
    pub ratio: Option<RatioReport>,
    pub ratio_include_models: Option<f64>,
    pub ratio_exclude_models: Option<f64>,
    pub histogram: Histogram,
    /// Stage name and seconds; filled by the caller, never stored in
    /// an archive.
    pub timings: Vec<(String, f64)>,
}

pub fn eval_datasets(
    orig: &Dataset<f32>,
    recon: &Dataset<f32>,
    gae_spec: Option<&BlockSpec>,
) -> Result<EvalReport> {
    let nr = nrmse(orig, recon)?;
    let per_variable_nrmse = if orig.variable_axis().is_some() {
        nrmse_per_variable(orig, recon).ok()
    } else {
        None
    };
    let max_block_error = match gae_spec {
        Some(spec) => {
            let a = partition(orig, spec)?;
            let b = partition(recon, spec)?;
            let mut max = 0.0f64;
            for (x, y) in a.iter().zip(&b) {
                let mut sq = 0.0;
                for (u, v) in x.data.iter().zip(&y.data) {
                    let d = *u as f64 - *v as f64;
                    sq += d * d;
                }
                max = max.max(sq.sqrt());
            }
            Some(max)
        }
        None => None,
    };
    Ok(EvalReport {
        nrmse: nr,
        per_variable_nrmse,
        max_block_error,
        ratio: None,
        ratio_include_models: None,
        ratio_exclude_models: None,
        histogram: relative_point_error_histogram(orig, recon, HISTOGRAM_BINS)?,
        timings: Vec::new(),
    })
}

/// Attaches all ratio figures for a finished compression.
pub fn attach_ratios(report: &mut EvalReport, out: &CompressOutput, policy: RatioPolicy) {
    let count = out.manifest.shape.iter().product::<usize>();
    report.ratio = Some(compression_ratio(
        count,
        4,
        &out.ledger,
        policy,
        &out.manifest.per_group_sizes,
    ));
    report.ratio_include_models =
        Some(compression_ratio(count, 4, &out.ledger, RatioPolicy::IncludeModels, &[]).overall);
    report.ratio_exclude_models =
        Some(compression_ratio(count, 4, &out.ledger, RatioPolicy::ExcludeModels, &[]).overall);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub nrmse: f64,
    pub max_block_error: f64,
    pub archive_bytes: u64,
    pub ratio_exclude_models: f64,
    pub stored_coefficients: u64,
}

/// Trains nothing: reuses one stage-1 pass and reruns only the
/// error-bound stage per tau.
pub fn sweep(
    ds: &Dataset<f32>,
    cfg: &PipelineConfig,
    models: &TrainedModels,
    taus: &[f64],
) -> Result<Vec<SweepPoint>> {
    let s1 = stage1(ds, cfg, models)?;
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let c = finish_compress(ds, cfg, models, &s1, tau)?;
        let count: usize = c.manifest.shape.iter().product();
        out.push(SweepPoint {
            tau,
            nrmse: c.nrmse,
            max_block_error: c.guarantee.max_delta(),
            archive_bytes: c.archive.len() as u64,
            ratio_exclude_models: compression_ratio(
                count,
                4,
                &c.ledger,
                RatioPolicy::ExcludeModels,
                &[],
            )
            .overall,
            stored_coefficients: c.guarantee.total_coefficients as u64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthKind};

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 7,
            tau: 0.05,
            tau_mode: TauMode::Absolute,
            per_variable: false,
            normalization: NormMode::Zscore,
            blocks: BlocksConfig {
                ae_shape: vec![1, 4, 4],
                hyper_k: 4,
                hyper_axis: 0,
                gae_shape: vec![2, 4, 4],
            },
            hbae: HbaeSection {
                latent_dim: 16,
                embed_dim: 16,
                hidden_dim: 32,
                d_k: None,
                attention: true,
            },
            bae: BaeSection {
                latent_dim: 4,
                hidden_dim: None,
            },
            quant: QuantConfig::default(),
            train: TrainConfig {
                epochs_hbae: 3,
                epochs_bae: 3,
                batch_size: 16,
                lr: 0.001,
            },
            backend: Backend::Zstd,
            policy: RatioPolicy::ExcludeModels,
        }
    }

    fn tiny_ds() -> Dataset<f32> {
        generate_synthetic(SynthKind::Smooth, &[8, 16, 16], 11).unwrap()
    }

    #[test]
    fn decompress_reproduces_compressor_output_bitwise() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let out = compress(&ds, &cfg, &models).unwrap();
        let (back, manifest) = decompress(&out.archive).unwrap();
        assert_eq!(back.shape, ds.shape);
        assert_eq!(back.axis_roles, ds.axis_roles);
        let a: Vec<u32> = out.corrected.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(manifest.seed, cfg.seed);
    }

    #[test]
    fn rebuilt_pipeline_writes_identical_bytes() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let first = compress(&ds, &cfg, &train_models(&ds, &cfg).unwrap()).unwrap();
        let second = compress(&ds, &cfg, &train_models(&ds, &cfg).unwrap()).unwrap();
        assert_eq!(first.archive, second.archive);
    }

    #[test]
    fn ledger_accounts_for_every_byte() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let out = compress(&ds, &cfg, &models).unwrap();
        assert_eq!(out.ledger.total(), out.archive.len() as u64);
        let group_total: u64 = out
            .manifest
            .per_group_sizes
            .iter()
            .map(|g| g.basis + g.coefficients + g.indices)
            .sum();
        let section_total = out.ledger.pca_basis + out.ledger.gae_coefficients + out.ledger.gae_indices;
        assert_eq!(group_total, section_total);
    }

    #[test]
    fn every_block_meets_the_bound() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let out = compress(&ds, &cfg, &models).unwrap();
        let spec = cfg.gae_spec();
        let a = partition(&ds, &spec).unwrap();
        let b = partition(&out.corrected, &spec).unwrap();
        for (x, g) in a.iter().zip(&b) {
            let sq: f64 = x
                .data
                .iter()
                .zip(&g.data)
                .map(|(u, v)| (*u as f64 - *v as f64).powi(2))
                .sum();
            assert!(sq.sqrt() <= cfg.tau, "block {:?}", x.index);
        }
        assert!(out.nrmse <= out.nrmse_bound * (1.0 + 1e-12));
    }

    #[test]
    fn eval_agrees_with_compressor_nrmse() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let out = compress(&ds, &cfg, &models).unwrap();
        let spec = cfg.gae_spec();
        let report = eval_datasets(&ds, &out.corrected, Some(&spec)).unwrap();
        assert!((report.nrmse - out.nrmse).abs() <= 1e-12 * out.nrmse.max(1.0));
        assert!(report.max_block_error.unwrap() <= cfg.tau);
        assert!(report.per_variable_nrmse.is_none());
    }

    #[test]
    fn per_variable_grouping_round_trips() {
        let ds = generate_synthetic(SynthKind::Multivar, &[4, 8, 8, 8], 5).unwrap();
        let mut cfg = tiny_cfg();
        cfg.blocks = BlocksConfig {
            ae_shape: vec![1, 2, 4, 4],
            hyper_k: 4,
            hyper_axis: 1,
            gae_shape: vec![1, 2, 4, 4],
        };
        cfg.per_variable = true;
        cfg.tau = 0.02;
        cfg.tau_mode = TauMode::RangeRelative;
        let models = train_models(&ds, &cfg).unwrap();
        let out = compress(&ds, &cfg, &models).unwrap();
        assert_eq!(out.manifest.group_taus.len(), 4);
        assert_eq!(out.manifest.per_group_sizes.len(), 4);
        let (back, _) = decompress(&out.archive).unwrap();
        let a: Vec<u32> = out.corrected.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let report = eval_datasets(&ds, &back, None).unwrap();
        assert_eq!(report.per_variable_nrmse.unwrap().len(), 4);
    }

    #[test]
    fn sweep_tightens_monotonically() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let points = sweep(&ds, &cfg, &models, &[0.2, 0.02]).unwrap();
        assert_eq!(points.len(), 2);
        assert!(points[1].nrmse <= points[0].nrmse);
        assert!(points[1].archive_bytes >= points[0].archive_bytes);
        for p in &points {
            assert!(p.max_block_error <= p.tau);
        }
    }

    #[test]
    fn flipped_payload_byte_is_caught() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let out = compress(&ds, &cfg, &models).unwrap();
        let mut bad = out.archive.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        assert!(matches!(
            decompress(&bad),
            Err(Error::ChecksumFail(_)) | Err(Error::CorruptPayload(_))
        ));
    }

    #[test]
    fn config_parses_with_sparse_toml() {
        let cfg = PipelineConfig::from_toml(
            "seed = 3\n[blocks]\nae_shape = [1, 4, 4]\nhyper_k = 4\nhyper_axis = 0\ngae_shape = [2, 4, 4]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.tau, 0.01);
        assert_eq!(cfg.tau_mode, TauMode::Absolute);
        assert_eq!(cfg.normalization, NormMode::Zscore);
        assert_eq!(cfg.hbae.embed_dim, 128);
        assert_eq!(cfg.bae.latent_dim, 16);
        assert_eq!(cfg.quant.hbae_bin, 0.005);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.backend, Backend::Zstd);
        let echo = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(echo, cfg);
    }

    #[test]
    fn saved_models_reproduce_the_archive() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let models = train_models(&ds, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("gcdc-models-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("tiny");
        save_models(&models, cfg.seed, &prefix).unwrap();
        let loaded = load_models(&prefix).unwrap();
        let a = compress(&ds, &cfg, &models).unwrap();
        let b = compress(&ds, &cfg, &loaded).unwrap();
        assert_eq!(a.archive, b.archive);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let ds = tiny_ds();
        let mut cfg = tiny_cfg();
        cfg.tau = 0.0;
        assert!(matches!(cfg.validate_for(&ds), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.quant.bae_bin = -1.0;
        assert!(matches!(cfg.validate_for(&ds), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.per_variable = true;
        assert!(matches!(cfg.validate_for(&ds), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.blocks.ae_shape = vec![4, 4];
        assert!(cfg.validate_for(&ds).is_err());
    }
}
