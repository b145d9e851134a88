//! Rendering layouts to fixed-size grayscale images, and PGM (P5) I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Point;
use crate::visibility::VisibilityGraph;

pub const IMAGE_SIDE: usize = 128;
pub const MARGIN: usize = 4;

/// A `side x side` grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdlImage {
    pub side: usize,
    pub pixels: Vec<f32>,
    pub label: usize,
}

impl FdlImage {
    pub fn blank(side: usize, label: usize) -> Self {
        Self {
            side,
            pixels: vec![1.0; side * side],
            label,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    fn darken(&mut self, row: i64, col: i64) {
        let side = self.side as i64;
        if (0..side).contains(&row) && (0..side).contains(&col) {
            self.pixels[(row * side + col) as usize] = 0.0;
        }
    }

    pub fn dark_pixels(&self) -> usize {
        self.pixels.iter().filter(|&&p| p < 0.5).count()
    }

    /// 8-bit binary PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8], label: usize) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        if magic != "P5" {
            return Err(format!("expected P5 magic, found {magic:?}"));
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PGM number {s:?}"));
        let w = num(token()?)?;
        let h = num(token()?)?;
        let maxval = num(token()?)?;
        if w != h {
            return Err(format!("image must be square, got {w}x{h}"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes.get(pos + 1..).unwrap_or_default();
        if data.len() < w * h {
            return Err(format!("raster holds {} bytes, expected {}", data.len(), w * h));
        }
        let pixels = data[..w * h].iter().map(|&b| b as f32 / maxval as f32).collect();
        Ok(Self { side: w, pixels, label })
    }

    pub fn read_pgm(path: &Path, label: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_pgm(&bytes, label).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// Map layout coordinates into pixel space: min-max normalized into the
/// square inside the margin, aspect ratio preserved, centered.
fn to_pixels(positions: &[Point], side: usize, margin: usize) -> Vec<(i64, i64)> {
    let span = (side - 1 - 2 * margin) as f64;
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in positions {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let range = (max_x - min_x).max(max_y - min_y);
    let scale = if range > 0.0 { span / range } else { 0.0 };
    let off_x = margin as f64 + (span - (max_x - min_x) * scale) / 2.0;
    let off_y = margin as f64 + (span - (max_y - min_y) * scale) / 2.0;
    positions
        .iter()
        .map(|p| {
            let col = off_x + (p[0] - min_x) * scale;
            // image rows grow downward
            let row = off_y + (max_y - p[1]) * scale;
            (row.round() as i64, col.round() as i64)
        })
        .collect()
}

/// Draw every edge as a 1-pixel dark line on white, vertices dark as well.
pub fn rasterize(graph: &VisibilityGraph, positions: &[Point], label: usize) -> FdlImage {
    rasterize_sized(graph, positions, label, IMAGE_SIDE)
}

pub fn rasterize_sized(graph: &VisibilityGraph, positions: &[Point], label: usize, side: usize) -> FdlImage {
    let mut img = FdlImage::blank(side, label);
    if positions.is_empty() {
        return img;
    }
    let px = to_pixels(positions, side, MARGIN.min((side - 1) / 2));
    for &(i, j) in &graph.edges {
        draw_line(&mut img, px[i], px[j]);
    }
    for &(r, c) in &px {
        img.darken(r, c);
    }
    img
}

/// Bresenham stepping between integer endpoints, inclusive.
fn draw_line(img: &mut FdlImage, from: (i64, i64), to: (i64, i64)) {
    let (mut r, mut c) = from;
    let dr = (to.0 - r).abs();
    let dc = -(to.1 - c).abs();
    let sr = if r < to.0 { 1 } else { -1 };
    let sc = if c < to.1 { 1 } else { -1 };
    let mut err = dr + dc;
    loop {
        img.darken(r, c);
        if r == to.0 && c == to.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}
