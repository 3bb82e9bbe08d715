//! PNG previews: input, ground truth and prediction side by side with the
//! slice DSC printed underneath.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

const GAP: usize = 4;
const SCALE: usize = 2;
const BAND: usize = 5 * SCALE + 2 * GAP;

/// 3x5 glyphs, one row per `u8` (low three bits, MSB on the left).
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '=' => [0, 7, 0, 7, 0],
        'D' => [6, 5, 5, 5, 6],
        'S' => [7, 4, 7, 1, 7],
        'C' => [7, 4, 4, 4, 7],
        _ => [0; 5],
    }
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn text(&mut self, x0: usize, y0: usize, s: &str) {
        for (n, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        for dy in 0..SCALE {
                            for dx in 0..SCALE {
                                self.put(x0 + (n * 4 + col) * SCALE + dx, y0 + row * SCALE + dy, [255; 3]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn gray(v: f32) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

fn tint(base: [u8; 3], color: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| ((base[i] as u16 + color[i] as u16) / 2) as u8)
}

/// Writes a three-panel overlay. `slice` is in `[0, 1]`; the ground truth is
/// tinted red and the prediction green.
pub fn write_overlay(path: &Path, slice: &[f32], gt: &[u8], pred: &[u8], h: usize, w: usize, dsc: f64) -> Result<()> {
    if slice.len() != h * w || gt.len() != h * w || pred.len() != h * w {
        return Err(Error::Shape(format!("overlay panels must all be {h}x{w}")));
    }
    let width = 3 * w + 4 * GAP;
    let mut c = Canvas { width, height: h + GAP + BAND, rgb: vec![0; width * (h + GAP + BAND) * 3] };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = gray(slice[i]);
            c.put(GAP + x, GAP + y, base);
            c.put(2 * GAP + w + x, GAP + y, if gt[i] != 0 { tint(base, [255, 0, 0]) } else { base });
            c.put(3 * GAP + 2 * w + x, GAP + y, if pred[i] != 0 { tint(base, [0, 255, 0]) } else { base });
        }
    }
    c.text(3 * GAP + 2 * w, h + 2 * GAP, &format!("DSC={dsc:.3}"));

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), c.width as u32, c.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Data(format!("{}: png encoding: {e}", path.display()));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&c.rgb).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_decodable_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        let (h, w) = (10, 12);
        let slice: Vec<f32> = (0..h * w).map(|i| i as f32 / 120.0).collect();
        let gt: Vec<u8> = (0..h * w).map(|i| (i % 4 == 0) as u8).collect();
        write_overlay(&p, &slice, &gt, &gt, h, w, 0.8125).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let reader = dec.read_info().unwrap();
        assert_eq!(reader.info().width as usize, 3 * w + 4 * GAP);
        assert!(write_overlay(&p, &slice, &gt[..5], &gt, h, w, 0.0).is_err());
    }
}
