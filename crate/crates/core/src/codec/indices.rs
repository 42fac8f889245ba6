//! Selection-mask encoding: only the shortest prefix of the mask that
//! contains every set bit is stored, together with its length. Many
//! masks pack into a single concatenated bitstream plus a lengths
//! array.

use super::bits::{BitReader, BitWriter};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexBitmask {
    /// Prefix bits; the final one is set unless the mask was empty.
    pub bits: Vec<bool>,
    pub len: usize,
}

pub fn encode_indices(mask: &[bool]) -> IndexBitmask {
    let len = mask.iter().rposition(|&b| b).map_or(0, |p| p + 1);
    assert!(len <= mask.len());
    IndexBitmask {
        bits: mask[..len].to_vec(),
        len,
    }
}

pub fn decode_indices(ib: &IndexBitmask, d: usize) -> Result<Vec<bool>> {
    if ib.len > d || ib.bits.len() != ib.len {
        return Err(Error::CorruptStream(format!(
            "mask prefix length {} for dimension {d}",
            ib.len
        )));
    }
    let mut mask = ib.bits.clone();
    mask.resize(d, false);
    Ok(mask)
}

pub fn mask_from_indices(indices: &[usize], d: usize) -> Vec<bool> {
    let mut mask = vec![false; d];
    for &i in indices {
        mask[i] = true;
    }
    mask
}

pub fn indices_from_mask(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Concatenates prefixes into one bitstream; lengths travel beside it.
pub fn pack_masks(masks: &[IndexBitmask]) -> (Vec<u8>, Vec<u32>) {
    let mut w = BitWriter::new();
    let mut lengths = Vec::with_capacity(masks.len());
    for m in masks {
        lengths.push(m.len as u32);
        for &b in &m.bits {
            w.push_bit(b);
        }
    }
    (w.finish(), lengths)
}

pub fn unpack_masks(bytes: &[u8], lengths: &[u32], d: usize) -> Result<Vec<Vec<bool>>> {
    let mut r = BitReader::new(bytes);
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let len = len as usize;
        let mut bits = Vec::with_capacity(len);
        for _ in 0..len {
            bits.push(r.read_bit()?);
        }
        out.push(decode_indices(&IndexBitmask { bits, len }, d)?);
    }
    Ok(out)
}
