//! On-disk archive container.
//!
//! Layout: magic "GCDC", u32 version, u32 manifest length, manifest
//! JSON, then section payloads back to back. The manifest records each
//! section's offset (relative to the end of the manifest), byte length,
//! and CRC32. Every byte of the file is attributed to exactly one
//! ledger field, so the ledger always sums to the file size.

use serde::{Deserialize, Serialize};

use crate::bae::{BaeConfig, ResidualScale};
use crate::codec::Backend;
use crate::guarantee::TauSpec;
use crate::hbae::HbaeConfig;
use crate::tensor::{AxisRole, BlockSpec, NormStats};
use crate::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"GCDC";
pub const ARCHIVE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    /// Relative to the first payload byte after the manifest.
    pub offset: u64,
    pub len: u64,
    pub crc32: u32,
}

/// Exact compressed bytes each variable group contributed to the three
/// per-group sections, including their length prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GroupSizes {
    pub basis: u64,
    pub coefficients: u64,
    pub indices: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub shape: Vec<usize>,
    pub axis_roles: Vec<AxisRole>,
    pub ae_spec: BlockSpec,
    pub gae_spec: BlockSpec,
    pub norm: Vec<NormStats>,
    pub hbae: HbaeConfig,
    pub bae: BaeConfig,
    pub residual_scale: ResidualScale,
    pub tau: TauSpec,
    pub per_variable: bool,
    pub group_taus: Vec<f64>,
    pub group_bins: Vec<f64>,
    pub hbae_bin: f64,
    pub bae_bin: f64,
    pub hbae_latent_count: u64,
    pub bae_latent_count: u64,
    pub seed: u64,
    pub backend: Backend,
    pub per_group_sizes: Vec<GroupSizes>,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionData {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl SectionData {
    pub fn new(name: &str, bytes: Vec<u8>) -> Self {
        SectionData {
            name: name.to_string(),
            bytes,
        }
    }
}

pub fn write_archive(manifest: &Manifest, sections: &[SectionData]) -> Result<Vec<u8>> {
    let mut m = manifest.clone();
    m.sections.clear();
    let mut offset = 0u64;
    for s in sections {
        m.sections.push(Section {
            name: s.name.clone(),
            offset,
            len: s.bytes.len() as u64,
            crc32: crc32fast::hash(&s.bytes),
        });
        offset += s.bytes.len() as u64;
    }
    let manifest_json =
        serde_json::to_vec(&m).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + manifest_json.len() + offset as usize);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for s in sections {
        out.extend_from_slice(&s.bytes);
    }
    Ok(out)
}

pub fn read_archive(bytes: &[u8]) -> Result<(Manifest, Vec<SectionData>)> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::TruncatedFile("archive header".into()));
    }
    if &bytes[0..4] != ARCHIVE_MAGIC {
        return Err(Error::CorruptPayload("bad archive magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_base = HEADER_LEN as usize + manifest_len;
    if bytes.len() < payload_base {
        return Err(Error::TruncatedFile("archive manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..payload_base])
        .map_err(|e| Error::CorruptPayload(format!("manifest: {e}")))?;
    let payload = &bytes[payload_base..];

    let mut cover = 0u64;
    let mut sections = Vec::with_capacity(manifest.sections.len());
    for s in &manifest.sections {
        if s.offset != cover {
            return Err(Error::CorruptPayload(format!(
                "section `{}` at offset {}, expected {cover}",
                s.name, s.offset
            )));
        }
        let start = s.offset as usize;
        let end = start
            .checked_add(s.len as usize)
            .ok_or_else(|| Error::TruncatedFile(s.name.clone()))?;
        if end > payload.len() {
            return Err(Error::TruncatedFile(s.name.clone()));
        }
        let data = &payload[start..end];
        if crc32fast::hash(data) != s.crc32 {
            return Err(Error::ChecksumFail(s.name.clone()));
        }
        cover = end as u64;
        sections.push(SectionData::new(&s.name, data.to_vec()));
    }
    if cover != payload.len() as u64 {
        return Err(Error::CorruptPayload(format!(
            "{} unattributed payload bytes",
            payload.len() as u64 - cover
        )));
    }
    Ok((manifest, sections))
}

/// Byte accounting, one field per section plus the manifest (which
/// absorbs the 12-byte container header).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SizeLedger {
    pub hbae_latents: u64,
    pub bae_latents: u64,
    pub pca_basis: u64,
    pub gae_coefficients: u64,
    pub gae_indices: u64,
    pub tables: u64,
    pub manifest: u64,
    pub model_weights: u64,
}

impl SizeLedger {
    pub fn total(&self) -> u64 {
        self.hbae_latents
            + self.bae_latents
            + self.pca_basis
            + self.gae_coefficients
            + self.gae_indices
            + self.tables
            + self.manifest
            + self.model_weights
    }
}

pub fn ledger_for(file_len: u64, manifest: &Manifest) -> Result<SizeLedger> {
    let mut ledger = SizeLedger::default();
    let mut section_sum = 0u64;
    for s in &manifest.sections {
        let field = match s.name.as_str() {
            "hbae_latents" => &mut ledger.hbae_latents,
            "bae_latents" => &mut ledger.bae_latents,
            "pca_basis" => &mut ledger.pca_basis,
            "gae_coefficients" => &mut ledger.gae_coefficients,
            "gae_indices" => &mut ledger.gae_indices,
            "tables" => &mut ledger.tables,
            "model_weights" => &mut ledger.model_weights,
            other => {
                return Err(Error::Config(format!("unledgered section `{other}`")));
            }
        };
        *field += s.len;
        section_sum += s.len;
    }
    if file_len < section_sum + HEADER_LEN {
        return Err(Error::TruncatedFile("ledger accounting".into()));
    }
    ledger.manifest = file_len - section_sum;
    debug_assert_eq!(ledger.total(), file_len);
    Ok(ledger)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioPolicy {
    IncludeModels,
    ExcludeModels,
    AmortizePerVariable,
}

impl std::str::FromStr for RatioPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include_models" => Ok(RatioPolicy::IncludeModels),
            "exclude_models" => Ok(RatioPolicy::ExcludeModels),
            "amortize_per_variable" => Ok(RatioPolicy::AmortizePerVariable),
            other => Err(Error::Config(format!("unknown ratio policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for RatioPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RatioPolicy::IncludeModels => "include_models",
            RatioPolicy::ExcludeModels => "exclude_models",
            RatioPolicy::AmortizePerVariable => "amortize_per_variable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub policy: RatioPolicy,
    pub overall: f64,
    /// One ratio per variable group under the amortized policy.
    pub per_variable: Option<Vec<f64>>,
}

/// Original bytes over counted compressed bytes. The amortized policy
/// splits the shared streams (latents, tables, manifest) equally over
/// the variable groups and charges each group its own basis,
/// coefficient, and index bytes; model weights stay excluded there,
/// matching the default policy.
pub fn compression_ratio(
    original_count: usize,
    scalar_bytes: usize,
    ledger: &SizeLedger,
    policy: RatioPolicy,
    per_group: &[GroupSizes],
) -> RatioReport {
    let original = (original_count * scalar_bytes) as f64;
    match policy {
        RatioPolicy::IncludeModels => RatioReport {
            policy,
            overall: original / ledger.total() as f64,
            per_variable: None,
        },
        RatioPolicy::ExcludeModels => RatioReport {
            policy,
            overall: original / (ledger.total() - ledger.model_weights) as f64,
            per_variable: None,
        },
        RatioPolicy::AmortizePerVariable => {
            let n = per_group.len().max(1) as f64;
            let shared = (ledger.hbae_latents
                + ledger.bae_latents
                + ledger.tables
                + ledger.manifest) as f64;
            let per_variable: Vec<f64> = per_group
                .iter()
                .map(|g| {
                    let own = (g.basis + g.coefficients + g.indices) as f64;
                    (original / n) / (own + shared / n)
                })
                .collect();
            RatioReport {
                policy,
                overall: original / (ledger.total() - ledger.model_weights) as f64,
                per_variable: Some(per_variable),
            }
        }
    }
}
