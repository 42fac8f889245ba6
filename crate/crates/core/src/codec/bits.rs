//! MSB-first bit packing, zero-padded to whole bytes.

use crate::{Error, Result};

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    filled: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    pub fn push_bit(&mut self, bit: bool) {
        if self.filled == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.last_mut().unwrap();
            *last |= 1 << (7 - self.filled);
        }
        self.filled = (self.filled + 1) % 8;
    }

    /// Pushes the low `len` bits of `code`, most significant first.
    pub fn push_bits(&mut self, code: u64, len: u8) {
        for i in (0..len).rev() {
            self.push_bit((code >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> usize {
        match self.filled {
            0 => self.bytes.len() * 8,
            f => (self.bytes.len() - 1) * 8 + f,
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        let byte = self.pos / 8;
        if byte >= self.bytes.len() {
            return Err(Error::CorruptStream("bitstream overrun".into()));
        }
        let bit = (self.bytes[byte] >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn bits_read(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_pack_msb_first() {
        let mut w = BitWriter::new();
        for b in [true, false, true] {
            w.push_bit(b);
        }
        assert_eq!(w.bit_len(), 3);
        assert_eq!(w.finish(), vec![0b1010_0000]);
    }

    #[test]
    fn push_bits_matches_per_bit_pushes() {
        let mut a = BitWriter::new();
        a.push_bits(0b1101, 4);
        a.push_bits(0b0, 1);
        let mut b = BitWriter::new();
        for bit in [true, true, false, true, false] {
            b.push_bit(bit);
        }
        assert_eq!(a.finish(), b.finish());
    }

    #[test]
    fn round_trip_across_byte_boundaries() {
        let pattern: Vec<bool> = (0..29).map(|i| i % 3 == 0).collect();
        let mut w = BitWriter::new();
        for &b in &pattern {
            w.push_bit(b);
        }
        let bytes = w.finish();
        assert_eq!(bytes.len(), 4);
        let mut r = BitReader::new(&bytes);
        for &want in &pattern {
            assert_eq!(r.read_bit().unwrap(), want);
        }
        assert_eq!(r.bits_read(), 29);
    }

    #[test]
    fn overrun_is_an_error() {
        let mut r = BitReader::new(&[0xff]);
        for _ in 0..8 {
            r.read_bit().unwrap();
        }
        assert!(matches!(r.read_bit(), Err(Error::CorruptStream(_))));
    }
}
