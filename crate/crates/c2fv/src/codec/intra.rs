//! Pluggable intra (I-frame) codec. The default is lossless: 8-bit RGB
//! raw bytes behind DEFLATE, so P-frame behavior is isolated from any
//! intra-coding artifacts.

use crate::frame::Frame;
use crate::{Error, Result};
use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use std::io::{Read, Write};

/// intra_codec_id of the raw/deflate codec.
pub const INTRA_RAW_DEFLATE: u8 = 0;

/// Encode a frame as deflated 8-bit RGB. The reconstruction the decoder
/// (and the encoder's own reference path) sees is the 8-bit quantized frame.
pub fn intra_encode(frame: &Frame) -> Vec<u8> {
    let raw = frame.to_u8();
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw).expect("in-memory write");
    enc.finish().expect("in-memory finish")
}

pub fn intra_decode(bytes: &[u8], h: usize, w: usize) -> Result<Frame> {
    let mut dec = ZlibDecoder::new(bytes);
    let mut raw = Vec::with_capacity(3 * h * w);
    dec.read_to_end(&mut raw).map_err(|e| Error::CorruptStream {
        offset: 0,
        reason: format!("intra payload: {e}"),
    })?;
    Frame::from_u8(&raw, h, w)
}

/// The reference reconstruction an encoder must use after intra-coding.
pub fn intra_reconstruction(frame: &Frame) -> Frame {
    Frame::from_u8(&frame.to_u8(), frame.height(), frame.width()).expect("round trip")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn intra_roundtrip_is_lossless_on_8bit_content() {
        let mut rng = seeded_rng(50);
        let pixels = Array3::from_shape_simple_fn((3, 24, 16), || {
            rng.gen_range(0u8..=255) as f64 / 255.0
        });
        let f = Frame::new(pixels).unwrap();
        let bytes = intra_encode(&f);
        let back = intra_decode(&bytes, 24, 16).unwrap();
        assert_eq!(back, f);
        assert_eq!(back, intra_reconstruction(&f));
    }
}
