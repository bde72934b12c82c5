//! Image and field files: binary PGM (8/16-bit), PNG, and a raw `f64` dump.
//!
//! Image files store the top row first; grids store the row at `y` near 0
//! first, so reading and writing flip the rows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{density_from_image, DensityField, Grid2D};

const RAW_MAGIC: &[u8; 8] = b"MMOTF64\0";
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Grayscale intensities in grid order (first row at `y` near 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

fn flip_rows<T: Clone>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width).rev().flatten().cloned().collect()
}

/// Reads a PGM (P5) or PNG image, detected from the file contents.
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes).map_err(|m| format_err(path, m))
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes).map_err(|m| format_err(path, m))
    } else {
        Err(format_err(path, "not a binary PGM or PNG file"))
    }
}

/// Reads an image and turns it into a density with the given relative floor.
pub fn load_density(path: impl AsRef<Path>, floor: f64) -> Result<DensityField> {
    let path = path.as_ref();
    let img = read_image(path)?;
    density_from_image(img.width, img.height, &img.pixels, floor).map_err(|e| match e {
        Error::AllZeroInput => format_err(path, "image is all zero"),
        other => other,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PGM header".into());
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} out of range"));
    }
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = width * height * depth;
    let data = bytes.get(pos..pos + need).ok_or("truncated PGM data")?;
    let rows: Vec<f64> = if depth == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    };
    Ok(GrayImage { width, height, pixels: flip_rows(&rows, width.max(1)) })
}

fn decode_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let gray = img.into_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let rows: Vec<f64> = gray.into_raw().into_iter().map(|v| v as f64).collect();
    Ok(GrayImage { width: w, height: h, pixels: flip_rows(&rows, w.max(1)) })
}

/// Quantizes `values / max(values)` to `0..=maxval`, in file row order.
fn quantize(grid: Grid2D, values: &[f64], maxval: u16) -> Result<Vec<u16>> {
    grid.ensure_len(values.len())?;
    let max = values.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { maxval as f64 / max } else { 0.0 };
    let q: Vec<u16> = values.iter().map(|v| (v.max(0.0) * scale).round() as u16).collect();
    Ok(flip_rows(&q, grid.nx()))
}

/// Writes a nonnegative field as binary PGM scaled so its max maps to
/// `maxval` (use 255 for 8-bit, up to 65535 for 16-bit output).
pub fn write_pgm(path: impl AsRef<Path>, grid: Grid2D, values: &[f64], maxval: u16) -> Result<()> {
    let path = path.as_ref();
    if maxval == 0 {
        return Err(format_err(path, "PGM maxval must be positive"));
    }
    let q = quantize(grid, values, maxval)?;
    let mut out = format!("P5\n{} {}\n{}\n", grid.nx(), grid.ny(), maxval).into_bytes();
    if maxval < 256 {
        out.extend(q.iter().map(|&v| v as u8));
    } else {
        out.extend(q.iter().flat_map(|v| v.to_be_bytes()));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Writes a nonnegative field as an 8-bit grayscale PNG scaled to its max.
pub fn write_png(path: impl AsRef<Path>, grid: Grid2D, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let q: Vec<u8> = quantize(grid, values, 255)?.into_iter().map(|v| v as u8).collect();
    image::save_buffer_with_format(
        path,
        &q,
        grid.nx() as u32,
        grid.ny() as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(source) => io_err(path, source),
        other => format_err(path, other.to_string()),
    })
}

/// Writes a density as PGM or PNG depending on the file extension
/// (`.png` for PNG, anything else for 8-bit PGM).
pub fn write_density_image(path: impl AsRef<Path>, mu: &DensityField) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        write_png(path, mu.grid(), mu.values())
    } else {
        write_pgm(path, mu.grid(), mu.values(), 255)
    }
}

/// Raw dump: 8-byte magic, `nx` and `ny` as `u32` LE, then the values as
/// `f64` LE in grid order.
pub fn write_raw(path: impl AsRef<Path>, grid: Grid2D, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    grid.ensure_len(values.len())?;
    let mut out = Vec::with_capacity(16 + 8 * values.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(grid.nx() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.ny() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a file written by [`write_raw`].
pub fn read_raw(path: impl AsRef<Path>) -> Result<(Grid2D, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(format_err(path, "missing MMOTF64 header"));
    }
    let nx = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let ny = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let grid = Grid2D::new(nx, ny)?;
    let body = &bytes[16..];
    if body.len() != 8 * grid.len() {
        return Err(format_err(path, format!("expected {} values, found {} bytes", grid.len(), body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((grid, values))
}

/// Writes text (CSV logs, index files), mapping failures to [`Error::Io`].
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| io_err(path, e))
}
