//! Minimal RD-curve plotting: a PNG with gridlines and polylines plus a
//! machine-readable CSV of the exact points.

use crate::eval::RdCurve;
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

const COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

fn draw_dot(img: &mut image::RgbImage, x: f64, y: f64, color: [u8; 3]) {
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, image::Rgb(color));
            }
        }
    }
}

/// Write `curves` (label, curve) to `out_png` and the exact points to the
/// sibling CSV path (same stem, .csv).
pub fn plot_rd(curves: &[(String, RdCurve)], out_png: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::BadInput("no curves to plot".into()));
    }
    let (w, h) = (720u32, 480u32);
    let margin = 50.0;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));

    let all: Vec<(f64, f64)> = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().cloned())
        .collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let to_px = |x: f64, y: f64| {
        (
            margin + (x - x0) / (x1 - x0) * (w as f64 - 2.0 * margin),
            h as f64 - margin - (y - y0) / (y1 - y0) * (h as f64 - 2.0 * margin),
        )
    };

    // frame and gridlines
    let grey = [200, 200, 200];
    let black = [0, 0, 0];
    for i in 0..=8 {
        let gx = margin + i as f64 / 8.0 * (w as f64 - 2.0 * margin);
        let gy = margin + i as f64 / 8.0 * (h as f64 - 2.0 * margin);
        draw_line(&mut img, (gx, margin), (gx, h as f64 - margin), grey);
        draw_line(&mut img, (margin, gy), (w as f64 - margin, gy), grey);
    }
    draw_line(&mut img, (margin, margin), (margin, h as f64 - margin), black);
    draw_line(
        &mut img,
        (margin, h as f64 - margin),
        (w as f64 - margin, h as f64 - margin),
        black,
    );

    for (ci, (_, curve)) in curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        let px: Vec<(f64, f64)> = curve.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        for pair in px.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &px {
            draw_dot(&mut img, x, y, color);
        }
    }
    img.save(out_png)
        .map_err(|e| Error::BadInput(format!("writing {}: {e}", out_png.display())))?;

    let csv_path = out_png.with_extension("csv");
    let mut f = std::fs::File::create(&csv_path)?;
    writeln!(f, "label,bpp,quality")?;
    for (label, curve) in curves {
        for &(x, y) in &curve.points {
            writeln!(f, "{label},{x},{y}")?;
        }
    }
    Ok(())
}

/// Read curve points back from the CSV emitted by [`plot_rd`].
pub fn read_rd_table(path: &Path) -> Result<Vec<(String, RdCurve)>> {
    let text = std::fs::read_to_string(path)?;
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::BadInput(format!("bad csv line {}", i + 1)));
        }
        let label = parts[0].to_string();
        let x: f64 = parts[1]
            .parse()
            .map_err(|e| Error::BadInput(format!("line {}: {e}", i + 1)))?;
        let y: f64 = parts[2]
            .parse()
            .map_err(|e| Error::BadInput(format!("line {}: {e}", i + 1)))?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, pts)) => pts.push((x, y)),
            None => groups.push((label, vec![(x, y)])),
        }
    }
    groups
        .into_iter()
        .map(|(label, pts)| RdCurve::new(pts).map(|c| (label, c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_writes_png_and_csv_that_round_trips() {
        let curve = RdCurve::new(vec![
            (0.05, 30.0),
            (0.10, 33.0),
            (0.20, 36.0),
            (0.40, 39.0),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("rd.png");
        plot_rd(&[("base".to_string(), curve.clone())], &png).unwrap();
        assert!(png.exists());
        let table = read_rd_table(&png.with_extension("csv")).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table[0].0, "base");
        for (a, b) in table[0].1.points.iter().zip(&curve.points) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }
}
