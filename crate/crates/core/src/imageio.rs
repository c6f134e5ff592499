//! PNG persistence for images and masks, plus labeled grid emission.
//!
//! Pixel values are quantized to the 8-bit grid at render time, so the PNG
//! round-trip is lossless with respect to the in-memory f64 arrays.

use crate::error::{DecalError, Result};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;

pub fn save_rgb(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                (pixels[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| DecalError::Image(format!("{}: {e}", path.display())))
}

pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| DecalError::MissingArtifact(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn save_mask(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([if mask[[y, x]] >= 0.5 { 255 } else { 0 }]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| DecalError::Image(format!("{}: {e}", path.display())))
}

pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| DecalError::MissingArtifact(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = if img.get_pixel(x as u32, y as u32).0[0] >= 128 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// grid with caption strip
// ---------------------------------------------------------------------------

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x13, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x01, 0x01, 0x01, 0x01, 0x01, 0x11, 0x0E],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '[' => [0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E],
        ']' => [0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        ' ' => [0x00; 7],
        _ => [0x15, 0x0A, 0x15, 0x0A, 0x15, 0x0A, 0x15],
    }
}

fn draw_text(canvas: &mut Array3<f64>, text: &str, x0: usize, y0: usize) {
    let (h, w) = (canvas.shape()[1], canvas.shape()[2]);
    let mut x = x0;
    for ch in text.chars() {
        let g = glyph(ch);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - gx)) != 0 {
                    let (py, px) = (y0 + gy, x + gx);
                    if py < h && px < w {
                        for c in 0..3 {
                            canvas[[c, py, px]] = 1.0;
                        }
                    }
                }
            }
        }
        x += GLYPH_W + 1;
    }
}

pub const GRID_STRIP_H: usize = GLYPH_H + 4;

/// Compose images into a rows x cols grid with a caption strip at the top.
/// Labels are rendered per column. Deterministic layout; errors on empty
/// input or when the images don't fit the grid.
pub fn grid_emit(
    images: &[Array3<f64>],
    rows: usize,
    cols: usize,
    labels: &[String],
    path: &Path,
) -> Result<()> {
    if images.is_empty() {
        return Err(DecalError::Config("grid_emit: empty image list".into()));
    }
    if rows * cols < images.len() {
        return Err(DecalError::Config(format!(
            "grid {rows}x{cols} too small for {} images",
            images.len()
        )));
    }
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    for img in images {
        if img.shape() != [3, h, w] {
            return Err(DecalError::Shape("grid_emit: mixed image sizes".into()));
        }
    }
    let total_h = rows * h + GRID_STRIP_H;
    let total_w = cols * w;
    let mut canvas = Array3::<f64>::from_elem((3, total_h, total_w), 0.08);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (y0, x0) = (GRID_STRIP_H + r * h, c * w);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    canvas[[ch, y0 + y, x0 + x]] = img[[ch, y, x]];
                }
            }
        }
    }
    for (c, label) in labels.iter().enumerate().take(cols) {
        draw_text(&mut canvas, label, c * w + 2, 2);
    }
    save_rgb(path, &canvas)
}

/// Expected pixel dimensions of a grid file.
pub fn grid_dims(rows: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    (rows * h + GRID_STRIP_H, cols * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn rgb_roundtrip_is_lossless_on_quantized_values() {
        let dir = tempdir().unwrap();
        let mut img = Array3::<f64>::zeros((3, 8, 8));
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f64 / 255.0;
        }
        let p = dir.path().join("x.png");
        save_rgb(&p, &img).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempdir().unwrap();
        let mut m = Array2::<f64>::zeros((8, 8));
        m[[3, 4]] = 1.0;
        m[[7, 0]] = 1.0;
        let p = dir.path().join("m.png");
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn grid_dimensions_and_errors() {
        let dir = tempdir().unwrap();
        let imgs: Vec<Array3<f64>> = (0..8).map(|i| Array3::from_elem((3, 16, 16), i as f64 / 8.0)).collect();
        let p = dir.path().join("grid.png");
        grid_emit(&imgs, 2, 4, &["A".into(), "B".into(), "C".into(), "D".into()], &p).unwrap();
        let g = load_rgb(&p).unwrap();
        let (eh, ew) = grid_dims(2, 4, 16, 16);
        assert_eq!(g.shape(), &[3, eh, ew]);
        assert!(grid_emit(&[], 1, 1, &[], &dir.path().join("e.png")).is_err());
    }
}
