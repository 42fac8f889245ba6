//! Canonical Huffman coding over signed integer symbols.
//!
//! Only code lengths are serialized; codewords are reassigned
//! canonically (by length, then symbol) on both sides. A single-symbol
//! alphabet gets a 1-bit code.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use super::bits::{BitReader, BitWriter};
use crate::wire::{put_i64, put_u32, put_u8, Reader};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    /// Sorted by (length, symbol); uniquely determines the codes.
    pub lengths: Vec<(i64, u8)>,
}

impl HuffmanTable {
    fn from_lengths(mut lengths: Vec<(i64, u8)>) -> Result<Self> {
        lengths.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        if lengths.is_empty() {
            return Err(Error::CorruptStream("empty huffman table".into()));
        }
        let mut kraft = 0u128;
        for &(_, len) in &lengths {
            if len == 0 || len > 64 {
                return Err(Error::CorruptStream(format!("huffman length {len}")));
            }
            kraft += 1u128 << (64 - len);
        }
        if kraft > 1u128 << 64 {
            return Err(Error::CorruptStream("over-subscribed huffman code".into()));
        }
        Ok(HuffmanTable { lengths })
    }

    /// Canonical codeword assignment in (length, symbol) order.
    pub fn codes(&self) -> Vec<(i64, u64, u8)> {
        let mut out = Vec::with_capacity(self.lengths.len());
        let mut code = 0u64;
        let mut prev_len = self.lengths[0].1;
        for &(sym, len) in &self.lengths {
            code <<= len - prev_len;
            out.push((sym, code, len));
            code += 1;
            prev_len = len;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + self.lengths.len() * 9);
        put_u32(&mut buf, self.lengths.len() as u32);
        for &(sym, len) in &self.lengths {
            put_i64(&mut buf, sym);
            put_u8(&mut buf, len);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "huffman table");
        let n = r.u32()? as usize;
        let mut lengths = Vec::with_capacity(n);
        for _ in 0..n {
            let sym = r.i64()?;
            let len = r.u8()?;
            lengths.push((sym, len));
        }
        r.expect_end()?;
        Self::from_lengths(lengths)
    }
}

/// Computes code lengths by the classic two-queue merge on a heap.
/// Ties break on (frequency, creation order) so the tree is
/// deterministic for a given symbol stream.
fn code_lengths(freqs: &BTreeMap<i64, u64>) -> Vec<(i64, u8)> {
    if freqs.len() == 1 {
        let (&sym, _) = freqs.iter().next().unwrap();
        return vec![(sym, 1)];
    }
    let mut groups: Vec<Vec<i64>> = Vec::with_capacity(freqs.len() * 2);
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    let mut depth: HashMap<i64, u8> = HashMap::new();
    for (&sym, &freq) in freqs {
        let id = groups.len();
        groups.push(vec![sym]);
        depth.insert(sym, 0);
        heap.push(Reverse((freq, id)));
    }
    while heap.len() > 1 {
        let Reverse((fa, a)) = heap.pop().unwrap();
        let Reverse((fb, b)) = heap.pop().unwrap();
        let mut symbols = Vec::with_capacity(groups[a].len() + groups[b].len());
        symbols.extend_from_slice(&groups[a]);
        symbols.extend_from_slice(&groups[b]);
        for s in &symbols {
            *depth.get_mut(s).unwrap() += 1;
        }
        let id = groups.len();
        groups.push(symbols);
        heap.push(Reverse((fa + fb, id)));
    }
    freqs.keys().map(|&s| (s, depth[&s])).collect()
}

pub fn huffman_encode(symbols: &[i64]) -> Result<(Vec<u8>, HuffmanTable)> {
    if symbols.is_empty() {
        return Err(Error::Config("huffman needs at least one symbol".into()));
    }
    let mut freqs = BTreeMap::new();
    for &s in symbols {
        *freqs.entry(s).or_insert(0u64) += 1;
    }
    let table = HuffmanTable::from_lengths(code_lengths(&freqs))?;
    let codes: HashMap<i64, (u64, u8)> = table
        .codes()
        .into_iter()
        .map(|(sym, code, len)| (sym, (code, len)))
        .collect();
    let mut w = BitWriter::new();
    for s in symbols {
        let (code, len) = codes[s];
        w.push_bits(code, len);
    }
    Ok((w.finish(), table))
}

pub fn huffman_decode(bytes: &[u8], table: &HuffmanTable, count: usize) -> Result<Vec<i64>> {
    let by_code: HashMap<(u8, u64), i64> = table
        .codes()
        .into_iter()
        .map(|(sym, code, len)| ((len, code), sym))
        .collect();
    let max_len = table.lengths.iter().map(|&(_, l)| l).max().unwrap_or(0);
    let mut r = BitReader::new(bytes);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut code = 0u64;
        let mut len = 0u8;
        loop {
            code = (code << 1) | r.read_bit()? as u64;
            len += 1;
            if let Some(&sym) = by_code.get(&(len, code)) {
                out.push(sym);
                break;
            }
            if len >= max_len {
                return Err(Error::CorruptStream("no codeword matches".into()));
            }
        }
    }
    Ok(out)
}

/// Payload bits for a stream under its own table, without encoding.
pub fn encoded_bit_len(symbols: &[i64], table: &HuffmanTable) -> usize {
    let lens: HashMap<i64, u8> = table.lengths.iter().copied().collect();
    symbols.iter().map(|s| lens[s] as usize).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_symbol_alphabet_uses_one_bit() {
        let symbols = vec![7i64; 5];
        let (bytes, table) = huffman_encode(&symbols).unwrap();
        assert_eq!(table.lengths, vec![(7, 1)]);
        assert_eq!(bytes.len(), 1);
        assert_eq!(huffman_decode(&bytes, &table, 5).unwrap(), symbols);
    }

    #[test]
    fn two_symbol_tree_is_one_bit_each() {
        let symbols = vec![-3i64, -3, -3, 9];
        let (bytes, table) = huffman_encode(&symbols).unwrap();
        for &(_, len) in &table.lengths {
            assert_eq!(len, 1);
        }
        assert_eq!(encoded_bit_len(&symbols, &table), 4);
        assert_eq!(huffman_decode(&bytes, &table, 4).unwrap(), symbols);
    }

    #[test]
    fn uniform_alphabet_meets_log2_bound() {
        let symbols: Vec<i64> = (0..1024).map(|i| i % 8).collect();
        let (_, table) = huffman_encode(&symbols).unwrap();
        let bits = encoded_bit_len(&symbols, &table);
        assert_eq!(bits, 1024 * 3);
    }

    #[test]
    fn near_entropy_on_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000usize;
        let symbols: Vec<i64> = (0..n).map(|_| rng.random_range(-32i64..32)).collect();
        let (bytes, table) = huffman_encode(&symbols).unwrap();

        let mut counts = BTreeMap::new();
        for &s in &symbols {
            *counts.entry(s).or_insert(0usize) += 1;
        }
        let entropy: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.log2()
            })
            .sum();
        let table_bits = (table.to_bytes().len() * 8) as f64;
        let payload_bits = encoded_bit_len(&symbols, &table) as f64;
        assert!(payload_bits >= entropy * n as f64 - 1.0, "beat entropy?");
        assert!(
            payload_bits <= 1.05 * (entropy * n as f64 + table_bits),
            "payload {payload_bits} vs entropy {entropy} bits/sym"
        );
        assert_eq!(huffman_decode(&bytes, &table, n).unwrap(), symbols);
    }

    #[test]
    fn skewed_streams_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(1..400);
            let symbols: Vec<i64> = (0..n)
                .map(|_| {
                    let r: f64 = rng.random_range(0.0..1.0);
                    (r * r * r * 20.0) as i64 - 3
                })
                .collect();
            let (bytes, table) = huffman_encode(&symbols).unwrap();
            assert_eq!(huffman_decode(&bytes, &table, n).unwrap(), symbols);
        }
    }

    #[test]
    fn table_serialization_round_trips() {
        let symbols = vec![1i64, 1, 1, 1, 2, 2, 3, -9, -9, -9, -9, -9, 0];
        let (_, table) = huffman_encode(&symbols).unwrap();
        let back = HuffmanTable::from_bytes(&table.to_bytes()).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.codes(), table.codes());
    }

    #[test]
    fn canonical_codes_are_prefix_free() {
        let symbols: Vec<i64> = (0..200).map(|i| (i * i % 13) as i64).collect();
        let (_, table) = huffman_encode(&symbols).unwrap();
        let codes = table.codes();
        for (i, &(_, ca, la)) in codes.iter().enumerate() {
            for &(_, cb, lb) in &codes[i + 1..] {
                let (short, slen, long, llen) = if la <= lb {
                    (ca, la, cb, lb)
                } else {
                    (cb, lb, ca, la)
                };
                assert_ne!(long >> (llen - slen), short, "prefix collision");
            }
        }
    }

    #[test]
    fn truncated_stream_is_corrupt() {
        let symbols: Vec<i64> = (0..50).map(|i| i % 5).collect();
        let (bytes, table) = huffman_encode(&symbols).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(huffman_decode(cut, &table, 50).is_err());
    }

    #[test]
    fn oversubscribed_table_is_rejected() {
        let bad = HuffmanTable {
            lengths: vec![(0, 1), (1, 1), (2, 1)],
        };
        assert!(HuffmanTable::from_bytes(&bad.to_bytes()).is_err());
    }
}
