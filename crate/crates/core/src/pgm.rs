//! Netpbm image files: binary PGM (P5) for grayscale planes and binary
//! PPM (P6) for color composites. Chosen because they are diffable,
//! dependency-free, and every pixel is one byte — the quantization story
//! is just round-to-nearest over 255 levels, so a save/load round trip
//! moves a pixel by at most 1/510.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst-case value change across a save/load round trip.
pub const QUANTIZATION_BOUND: f64 = 1.0 / 510.0;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Accepts `[d, d]` or `[1, d, d]`; returns (height, width, pixels).
fn as_plane(img: &Tensor) -> Result<(usize, usize, &[f64])> {
    match img.shape() {
        [h, w] => Ok((*h, *w, img.data())),
        [1, h, w] => Ok((*h, *w, img.data())),
        other => Err(Error::invalid(
            "save_pgm",
            format!("expected a [d, d] or [1, d, d] image, got {other:?}"),
        )),
    }
}

/// Writes one grayscale plane as binary P5, maxval 255. Values are clamped
/// to `[0, 1]` before quantization — reconstructions routinely overshoot
/// the pixel range slightly and the file format should not reject them.
pub fn save_pgm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, data) = as_plane(img)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| quantize(v)));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a `[3, d, d]` image as binary P6 (interleaved RGB), maxval 255.
pub fn save_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(
            "save_ppm",
            format!("expected a [3, d, d] image, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = img.data();
    for i in 0..plane {
        bytes.push(quantize(data[i]));
        bytes.push(quantize(data[plane + i]));
        bytes.push(quantize(data[2 * plane + i]));
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> PnmReader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            msg: msg.into(),
            offset: self.pos as u64,
        }
    }

    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn ascii_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(u8::is_ascii_digit)
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse()
            .map_err(|_| self.err(format!("{what} out of range")))
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        // Exactly one whitespace byte separates maxval from the raster.
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(self.err("expected single whitespace before pixel data")),
        }
        if self.bytes.len() - self.pos != n {
            return Err(self.err(format!(
                "pixel payload is {} bytes, expected {n}",
                self.bytes.len() - self.pos
            )));
        }
        Ok(&self.bytes[self.pos..])
    }
}

fn load_pnm(path: &Path, magic: &[u8], samples_per_pixel: usize) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut r = PnmReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(r.err(format!(
            "not a {} file",
            std::str::from_utf8(magic).expect("ascii magic")
        )));
    }
    r.pos = 2;
    let w = r.ascii_number("width")?;
    let h = r.ascii_number("height")?;
    let maxval = r.ascii_number("maxval")?;
    if maxval != 255 {
        return Err(r.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    let raw = r.payload(w * h * samples_per_pixel)?;
    Ok((h, w, raw.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Reads a binary P5 file back as a `[height, width]` tensor in `[0, 1]`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (h, w, data) = load_pnm(path, b"P5", 1)?;
    Tensor::new(vec![h, w], data)
}

/// Reads a binary P6 file back as a `[3, height, width]` tensor in `[0, 1]`.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (h, w, interleaved) = load_pnm(path, b"P6", 3)?;
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        data[i] = interleaved[3 * i];
        data[plane + i] = interleaved[3 * i + 1];
        data[2 * plane + i] = interleaved[3 * i + 2];
    }
    Tensor::new(vec![3, h, w], data)
}
