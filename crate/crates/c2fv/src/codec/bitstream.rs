//! Bitstream file format. Little-endian throughout; every variable-length
//! payload carries a u32 length prefix that is validated against the
//! remaining bytes before any decoding starts.
//!
//! Layout:
//!   magic "C2FV" | version u8 | flags u8 | width u16 | height u16
//!   | frame_count u32 | gop_size u16 | model_id u8 | intra_codec_id u8
//! then, in display order, one record per frame:
//!   I-frame: 0u8 | u32 len | intra payload
//!   P-frame: 1u8 | u32 len | coarse payload
//!                | u32 len | (u32 hyper_len | hyper | main)   (fine motion)
//!                | u32 len | (u32 hyper_len | hyper | main)   (residual)

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"C2FV";
pub const VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub frame_count: u32,
    pub gop_size: u16,
    pub model_id: u8,
    pub intra_codec_id: u8,
}

impl BitstreamHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.flags);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.frame_count.to_le_bytes());
        out.extend_from_slice(&self.gop_size.to_le_bytes());
        out.push(self.model_id);
        out.push(self.intra_codec_id);
    }
}

/// Hyper + main pair of one coded latent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentPair {
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl SegmentPair {
    pub fn byte_len(&self) -> usize {
        4 + self.hyper.len() + self.main.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameRecord {
    Intra(Vec<u8>),
    P {
        coarse: Vec<u8>,
        fine: SegmentPair,
        residual: SegmentPair,
    },
}

impl FrameRecord {
    pub fn write(&self, out: &mut Vec<u8>) {
        match self {
            FrameRecord::Intra(payload) => {
                out.push(0);
                out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                out.extend_from_slice(payload);
            }
            FrameRecord::P {
                coarse,
                fine,
                residual,
            } => {
                out.push(1);
                out.extend_from_slice(&(coarse.len() as u32).to_le_bytes());
                out.extend_from_slice(coarse);
                for seg in [fine, residual] {
                    out.extend_from_slice(&(seg.byte_len() as u32).to_le_bytes());
                    out.extend_from_slice(&(seg.hyper.len() as u32).to_le_bytes());
                    out.extend_from_slice(&seg.hyper);
                    out.extend_from_slice(&seg.main);
                }
            }
        }
    }

    /// Total encoded size including the type byte and length prefixes.
    pub fn byte_len(&self) -> usize {
        match self {
            FrameRecord::Intra(p) => 1 + 4 + p.len(),
            FrameRecord::P {
                coarse,
                fine,
                residual,
            } => 1 + 4 + coarse.len() + 4 + fine.byte_len() + 4 + residual.byte_len(),
        }
    }
}

/// Cursor with offset-carrying errors.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::CorruptStream {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "wanted {n} bytes, only {} remain",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// u32 length prefix + that many bytes.
    pub fn length_prefixed(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        if self.remaining() < len {
            return Err(self.err(format!(
                "declared segment length {len} exceeds remaining {} bytes",
                self.remaining()
            )));
        }
        self.take(len)
    }

    pub fn header(&mut self) -> Result<BitstreamHeader> {
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(self.err("bad magic, not a C2FV stream"));
        }
        let version = self.u8()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(BitstreamHeader {
            version,
            flags: self.u8()?,
            width: self.u16()?,
            height: self.u16()?,
            frame_count: self.u32()?,
            gop_size: self.u16()?,
            model_id: self.u8()?,
            intra_codec_id: self.u8()?,
        })
    }

    pub fn frame_record(&mut self) -> Result<FrameRecord> {
        let ty = self.u8()?;
        match ty {
            0 => Ok(FrameRecord::Intra(self.length_prefixed()?.to_vec())),
            1 => {
                let coarse = self.length_prefixed()?.to_vec();
                let mut pairs = Vec::with_capacity(2);
                for _ in 0..2 {
                    let seg = self.length_prefixed()?;
                    let mut inner = Reader::new(seg);
                    let hyper = inner.length_prefixed().map_err(|e| match e {
                        Error::CorruptStream { offset, reason } => Error::CorruptStream {
                            offset: self.pos - seg.len() + offset,
                            reason,
                        },
                        e => e,
                    })?;
                    let main = &seg[inner.position()..];
                    pairs.push(SegmentPair {
                        hyper: hyper.to_vec(),
                        main: main.to_vec(),
                    });
                }
                let residual = pairs.pop().unwrap();
                let fine = pairs.pop().unwrap();
                Ok(FrameRecord::P {
                    coarse,
                    fine,
                    residual,
                })
            }
            other => Err(self.err(format!("unknown frame record type {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header() -> BitstreamHeader {
        BitstreamHeader {
            version: VERSION,
            flags: 0,
            width: 64,
            height: 48,
            frame_count: 3,
            gop_size: 8,
            model_id: 2,
            intra_codec_id: 0,
        }
    }

    #[test]
    fn header_roundtrip_and_size() {
        let h = sample_header();
        let mut buf = Vec::new();
        h.write(&mut buf);
        assert_eq!(buf.len(), HEADER_LEN);
        let mut r = Reader::new(&buf);
        assert_eq!(r.header().unwrap(), h);
    }

    #[test]
    fn records_roundtrip_and_account_bytes() {
        let rec_i = FrameRecord::Intra(vec![1, 2, 3, 4, 5]);
        let rec_p = FrameRecord::P {
            coarse: vec![9; 7],
            fine: SegmentPair {
                hyper: vec![1; 3],
                main: vec![2; 5],
            },
            residual: SegmentPair {
                hyper: vec![3; 2],
                main: vec![4; 6],
            },
        };
        let mut buf = Vec::new();
        rec_i.write(&mut buf);
        rec_p.write(&mut buf);
        assert_eq!(buf.len(), rec_i.byte_len() + rec_p.byte_len());
        let mut r = Reader::new(&buf);
        assert_eq!(r.frame_record().unwrap(), rec_i);
        assert_eq!(r.frame_record().unwrap(), rec_p);
        assert_eq!(r.remaining(), 0);
    }

    #[test]
    fn truncation_is_detected_with_offset() {
        let rec = FrameRecord::Intra(vec![7; 100]);
        let mut buf = Vec::new();
        rec.write(&mut buf);
        buf.truncate(buf.len() - 1);
        let mut r = Reader::new(&buf);
        match r.frame_record() {
            Err(Error::CorruptStream { .. }) => {}
            other => panic!("expected corrupt-stream error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_refused() {
        let mut buf = Vec::new();
        sample_header().write(&mut buf);
        buf[0] = b'X';
        let mut r = Reader::new(&buf);
        assert!(r.header().is_err());
    }
}
