//! Clip ingestion and storage: numerically ordered image directories or
//! the native raw-clip container (planar RGB8, magic "C2FR").

use crate::frame::Frame;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const RAW_MAGIC: [u8; 4] = *b"C2FR";

/// Load a clip from a directory of 8-bit RGB images (sorted by the first
/// integer in each filename, then lexicographically) or from a raw-clip
/// container file.
pub fn load_clip(path: &Path) -> Result<Vec<Frame>> {
    if path.is_dir() {
        load_image_dir(path)
    } else {
        load_clip_raw(path)
    }
}

fn numeric_key(name: &str) -> (Option<u64>, String) {
    let digits: String = name
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    (digits.parse().ok(), name.to_string())
}

fn load_image_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let lower = n.to_lowercase();
            lower.ends_with(".png") || lower.ends_with(".ppm")
        })
        .collect();
    if names.is_empty() {
        return Err(Error::BadInput(format!(
            "no frame images found in {}",
            dir.display()
        )));
    }
    names.sort_by_key(|n| numeric_key(n));
    let mut frames = Vec::with_capacity(names.len());
    for name in names {
        let img = image::open(dir.join(&name))
            .map_err(|e| Error::BadInput(format!("{name}: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut planar = vec![0u8; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                planar[c * h * w + y * w + x] = p.0[c];
            }
        }
        frames.push(Frame::from_u8(&planar, h, w)?);
    }
    Ok(frames)
}

/// Write a clip to the native raw container.
pub fn save_clip_raw(path: &Path, frames: &[Frame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::BadInput("refusing to write an empty clip".into()));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut out = Vec::with_capacity(12 + frames.len() * 3 * h * w);
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::ShapeMismatch("clip frames differ in size".into()));
        }
        out.extend_from_slice(&f.to_u8());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_clip_raw(path: &Path) -> Result<Vec<Frame>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || bytes[..4] != RAW_MAGIC {
        return Err(Error::BadInput(format!(
            "{} is not a raw clip container",
            path.display()
        )));
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let frame_len = 3 * h * w;
    if bytes.len() != 12 + n * frame_len {
        return Err(Error::CorruptStream {
            offset: bytes.len(),
            reason: format!("raw clip declares {n} frames of {frame_len} bytes"),
        });
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let start = 12 + i * frame_len;
        frames.push(Frame::from_u8(&bytes[start..start + frame_len], h, w)?);
    }
    Ok(frames)
}

/// Save one frame as PNG.
pub fn save_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let planar = frame.to_u8();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            p.0[c] = planar[c * h * w + y * w + x];
        }
    }
    buf.save(path)
        .map_err(|e| Error::BadInput(format!("writing {}: {e}", path.display())))
}
