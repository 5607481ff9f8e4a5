use std::io::{Read, Write};

use crate::error::{Error, Result};

/// LZ4 frame-compress a brick payload.
pub fn compress_brick(payload: &[u8]) -> Vec<u8> {
    let mut enc = lz4_flex::frame::FrameEncoder::new(Vec::with_capacity(payload.len() / 4));
    enc.write_all(payload)
        .expect("writing to a Vec cannot fail");
    enc.finish()
        .expect("finishing an in-memory frame cannot fail")
}

/// Decode an LZ4 frame that must hold exactly `expected_len` bytes.
/// Never returns a partial payload.
pub fn decompress_brick(bytes: &[u8], expected_len: usize) -> Result<Vec<u8>> {
    if bytes.is_empty() {
        return Err(Error::Decode("empty input".into()));
    }
    let mut dec = lz4_flex::frame::FrameDecoder::new(bytes);
    let mut out = Vec::with_capacity(expected_len);
    dec.read_to_end(&mut out)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if out.len() != expected_len {
        return Err(Error::Decode(format!(
            "decoded {} bytes, expected {expected_len}",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_brick_compresses_below_one_percent() {
        let payload = vec![0u8; 32 * 32 * 32];
        let c = compress_brick(&payload);
        assert!(
            c.len() * 100 < payload.len(),
            "compressed to {} bytes",
            c.len()
        );
        assert_eq!(decompress_brick(&c, payload.len()).unwrap(), payload);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(decompress_brick(&[], 8).is_err());
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let payload: Vec<u8> = (0..4096u32).map(|i| (i * 7 % 251) as u8).collect();
        let c = compress_brick(&payload);
        assert!(decompress_brick(&c[..c.len() / 2], payload.len()).is_err());
    }

    #[test]
    fn wrong_length_is_an_error() {
        let c = compress_brick(&[1, 2, 3]);
        assert!(decompress_brick(&c, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn roundtrip(payload in proptest::collection::vec(any::<u8>(), 512)) {
            let c = compress_brick(&payload);
            prop_assert_eq!(decompress_brick(&c, payload.len()).unwrap(), payload);
        }
    }
}
