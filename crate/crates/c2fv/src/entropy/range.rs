//! Carry-less byte-oriented range coder (Subbotin variant).
//!
//! Works on 16-bit cumulative frequency tables (total mass exactly 2^16).
//! Encoder and decoder renormalize under identical conditions, so decoding
//! is exact for any symbol sequence. A truncated stream surfaces as a byte
//! underrun with its offset.

use crate::{Error, Result};

const TOP: u32 = 1 << 24;
const BOTTOM: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encode a symbol occupying [cum, cum + freq) of the 2^16 total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= BOTTOM);
        let r = self.range >> 16;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                // force renormalization before precision runs out
                self.range = BOTTOM.wrapping_sub(self.low & (BOTTOM - 1));
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flush the final state. Every stream carries exactly 4 tail bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }

    /// Bytes emitted so far (excluding the flush tail).
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        RangeEncoder::new()
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::CorruptStream {
                offset: bytes.len(),
                reason: "range-coded payload shorter than 4 bytes".into(),
            });
        }
        let code = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        Ok(RangeDecoder {
            low: 0,
            range: u32::MAX,
            code,
            bytes,
            pos: 4,
        })
    }

    /// Scaled frequency of the next symbol; look it up in the CDF, then call
    /// [`RangeDecoder::decode_update`] with that symbol's (cum, freq).
    pub fn decode_freq(&self) -> u32 {
        let r = self.range >> 16;
        (self.code.wrapping_sub(self.low) / r).min(BOTTOM - 1)
    }

    pub fn decode_update(&mut self, cum: u32, freq: u32) -> Result<()> {
        let r = self.range >> 16;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOTTOM {
                    break;
                }
                self.range = BOTTOM.wrapping_sub(self.low & (BOTTOM - 1));
            }
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.bytes.len() {
            return Err(Error::CorruptStream {
                offset: self.pos,
                reason: "range-coded payload underrun".into(),
            });
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
