//! Pluggable lossless byte backend for the packed sections.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ZSTD_LEVEL: i32 = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Zstd,
    Store,
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Zstd
    }
}

pub fn lossless_pack(bytes: &[u8], backend: Backend) -> Result<Vec<u8>> {
    match backend {
        Backend::Zstd => zstd::bulk::compress(bytes, ZSTD_LEVEL)
            .map_err(|e| Error::CorruptPayload(format!("zstd pack: {e}"))),
        Backend::Store => Ok(bytes.to_vec()),
    }
}

pub fn lossless_unpack(bytes: &[u8], backend: Backend) -> Result<Vec<u8>> {
    match backend {
        Backend::Zstd => zstd::stream::decode_all(bytes)
            .map_err(|e| Error::CorruptPayload(format!("zstd unpack: {e}"))),
        Backend::Store => Ok(bytes.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_round_trips_on_both_backends() {
        for backend in [Backend::Zstd, Backend::Store] {
            let packed = lossless_pack(&[], backend).unwrap();
            assert_eq!(lossless_unpack(&packed, backend).unwrap(), Vec::<u8>::new());
        }
    }

    #[test]
    fn zeros_compress_below_one_percent() {
        let zeros = vec![0u8; 1 << 20];
        let packed = lossless_pack(&zeros, Backend::Zstd).unwrap();
        assert!(packed.len() < zeros.len() / 100, "packed {} bytes", packed.len());
        assert_eq!(lossless_unpack(&packed, Backend::Zstd).unwrap(), zeros);
    }

    #[test]
    fn random_bytes_stay_near_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<u8> = (0..100_000).map(|_| rng.random()).collect();
        let packed = lossless_pack(&data, Backend::Zstd).unwrap();
        assert!(packed.len() <= data.len() + 1024);
        assert_eq!(lossless_unpack(&packed, Backend::Zstd).unwrap(), data);
    }

    #[test]
    fn store_backend_is_identity() {
        let data = vec![1u8, 2, 3, 250];
        assert_eq!(lossless_pack(&data, Backend::Store).unwrap(), data);
        assert_eq!(lossless_unpack(&data, Backend::Store).unwrap(), data);
    }

    #[test]
    fn garbage_zstd_payload_errors() {
        let garbage = vec![0x12u8, 0x34, 0x56, 0x78, 0x9a];
        assert!(matches!(
            lossless_unpack(&garbage, Backend::Zstd),
            Err(Error::CorruptPayload(_))
        ));
    }
}
