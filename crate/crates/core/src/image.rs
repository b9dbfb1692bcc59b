//! 8-bit grayscale image files (binary PGM and PNG) and labelled grids.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    /// Map canonical `[-1, 1]` values linearly onto `0..=255`, clamping.
    pub fn from_canonical(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height);
        let pixels = values
            .iter()
            .map(|&v| {
                let u = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
                if u.is_nan() {
                    0
                } else {
                    u as u8
                }
            })
            .collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn blit(&mut self, src: &GrayImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            let row = &src.pixels[y * src.width..(y + 1) * src.width];
            let start = (y0 + y) * self.width + x0;
            self.pixels[start..start + src.width].copy_from_slice(row);
        }
    }

    /// Write as PNG when the extension is `.png`, binary PGM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if is_png {
            self.write_png(&mut out, path)?;
        } else {
            write!(out, "P5\n{} {}\n255\n", self.width, self.height)
                .and_then(|_| out.write_all(&self.pixels))
                .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    fn write_png(&self, out: &mut impl Write, path: &Path) -> Result<()> {
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&self.pixels).map_err(err)?;
        w.finish().map_err(err)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|msg| Error::Dataset(format!("{}: {msg}", path.display())))
    }
}

/// Parse a binary (P5) 8-bit PGM.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary PGM (P5), found '{}'", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field '{s}'"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(format!(
            "raster holds {} bytes, expected {n}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

// 3x5 glyphs, one row per u8 (low three bits, MSB on the left).
const GLYPHS: &[(char, [u8; 5])] = &[
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 7, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 2, 2]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('A', [2, 5, 7, 5, 5]),
    ('B', [6, 5, 6, 5, 6]),
    ('C', [7, 4, 4, 4, 7]),
    ('D', [6, 5, 5, 5, 6]),
    ('E', [7, 4, 6, 4, 7]),
    ('F', [7, 4, 6, 4, 4]),
    ('G', [7, 4, 5, 5, 7]),
    ('H', [5, 5, 7, 5, 5]),
    ('I', [7, 2, 2, 2, 7]),
    ('J', [1, 1, 1, 5, 7]),
    ('K', [5, 5, 6, 5, 5]),
    ('L', [4, 4, 4, 4, 7]),
    ('M', [5, 7, 7, 5, 5]),
    ('N', [6, 5, 5, 5, 5]),
    ('O', [7, 5, 5, 5, 7]),
    ('P', [7, 5, 7, 4, 4]),
    ('Q', [7, 5, 5, 7, 1]),
    ('R', [7, 5, 6, 5, 5]),
    ('S', [7, 4, 7, 1, 7]),
    ('T', [7, 2, 2, 2, 2]),
    ('U', [5, 5, 5, 5, 7]),
    ('V', [5, 5, 5, 5, 2]),
    ('W', [5, 5, 7, 7, 5]),
    ('X', [5, 5, 2, 5, 5]),
    ('Y', [5, 5, 2, 2, 2]),
    ('Z', [7, 1, 2, 4, 7]),
    ('.', [0, 0, 0, 0, 2]),
    ('-', [0, 0, 7, 0, 0]),
    ('=', [0, 7, 0, 7, 0]),
    (':', [0, 2, 0, 2, 0]),
    ('_', [0, 0, 0, 0, 7]),
    ('/', [1, 1, 2, 4, 4]),
    ('e', [0, 7, 6, 4, 7]),
];

/// Height in pixels of a label strip.
pub const LABEL_STRIP: usize = 9;

/// Draw `text` (upper-cased; unknown characters render blank) with its top
/// left corner at `(x0, y0)`, clipped to the image.
pub fn draw_text(img: &mut GrayImage, text: &str, x0: usize, y0: usize, ink: u8) {
    for (i, ch) in text.chars().enumerate() {
        let key = if ch == 'e' { ch } else { ch.to_ascii_uppercase() };
        let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == key) else {
            continue;
        };
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3 {
                if bits >> (2 - dx) & 1 == 1 {
                    let (x, y) = (x0 + i * 4 + dx, y0 + dy);
                    if x < img.width && y < img.height {
                        img.set(x, y, ink);
                    }
                }
            }
        }
    }
}

/// Lay tiles out row-major, `cols` per row, each with a label strip below.
pub fn grid(tiles: &[GrayImage], labels: &[String], cols: usize) -> Result<GrayImage> {
    if tiles.is_empty() {
        return Err(Error::Shape("cannot build a grid from zero images".into()));
    }
    if labels.len() != tiles.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            tiles.len(),
            labels.len()
        )));
    }
    let (tw, th) = (tiles[0].width, tiles[0].height);
    if let Some(bad) = tiles.iter().position(|t| t.width != tw || t.height != th) {
        return Err(Error::Shape(format!(
            "tile {bad} is {}x{}, expected {tw}x{th}",
            tiles[bad].width, tiles[bad].height
        )));
    }
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (cell_w, cell_h) = (tw + 2, th + LABEL_STRIP + 2);
    let mut out = GrayImage::new(cols * cell_w, rows * cell_h, 255);
    for (i, (tile, label)) in tiles.iter().zip(labels).enumerate() {
        let (x, y) = ((i % cols) * cell_w + 1, (i / cols) * cell_h + 1);
        out.blit(tile, x, y);
        draw_text(&mut out, label, x + 1, y + th + 2, 0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 255, 7, 8, 9],
        };
        let p = dir.path().join("a.pgm");
        img.save(&p).unwrap();
        assert_eq!(GrayImage::load_pgm(&p).unwrap(), img);
        let raw = b"P5\n# made by hand\n3 2\n255\n\x00\x0a\xff\x07\x08\x09";
        assert_eq!(parse_pgm(raw).unwrap(), img);
        assert!(parse_pgm(b"P2\n3 2\n255\n").is_err());
        assert!(parse_pgm(b"P5\n3 2\n255\n\x00").is_err());
    }

    #[test]
    fn png_has_signature() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        GrayImage::new(4, 4, 128).save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn canonical_mapping_endpoints() {
        let img = GrayImage::from_canonical(4, 1, &[-1.0, 1.0, 0.0, 7.0]);
        assert_eq!(img.pixels, vec![0, 255, 128, 255]);
    }

    #[test]
    fn grid_layout() {
        let tiles = vec![GrayImage::new(4, 4, 0); 3];
        let labels: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
        let g = grid(&tiles, &labels, 2).unwrap();
        assert_eq!((g.width, g.height), (12, 2 * (4 + LABEL_STRIP + 2)));
        let one = grid(&tiles[..1], &labels[..1], 4).unwrap();
        assert_eq!(one.width, 6);
        assert!(grid(&[], &[], 2).is_err());
        let mixed = vec![GrayImage::new(4, 4, 0), GrayImage::new(5, 4, 0)];
        assert!(grid(&mixed, &labels[..2], 2).is_err());
    }
}
