//! Dense 2-D maps and their on-disk formats.
//!
//! [`Pixmap`] is a row-major `f64` grid used for masks, probability maps and
//! grayscale images; [`RgbMap`] holds three channels per pixel. Binary masks
//! and grayscale images serialize as binary PGM (P5) with foreground = 255,
//! color images as binary PPM (P6), and probability maps as raw
//! little-endian `f64` with a JSON sidecar recording the dimensions.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grid of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Pixmap {
    /// Creates a map filled with `value`.
    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "pixmap dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Pixmap { width, height, data: vec![value; width * height] })
    }

    /// Creates an all-zero map.
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, 0.0)
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "pixmap dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::validation(format!(
                "buffer length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Pixmap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Total number of pixels.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major index of `(x, y)`.
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = self.idx(x, y);
        self.data[i] = value;
    }

    /// Immutable view of the underlying row-major buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the underlying row-major buffer.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the map and returns its buffer.
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// True if both maps have identical dimensions.
    pub fn same_shape(&self, other: &Pixmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Returns a validation error unless both maps share a shape.
    pub fn require_same_shape(&self, other: &Pixmap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "{what}: shape mismatch {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Number of pixels at or above `threshold`.
    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.data.iter().filter(|&&v| v >= threshold).count()
    }

    /// Writes the map as a binary PGM (P5).
    ///
    /// Values are clamped to `[0, 1]` and scaled to 0..=255; a binary mask
    /// therefore lands exactly on 0 and 255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a binary PGM (P5) written by [`Pixmap::write_pgm`].
    ///
    /// Pixel bytes map back to `[0, 1]` by dividing by the declared maxval.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        let (magic, dims, payload) = parse_netpbm_header(&raw)?;
        if magic != "P5" {
            return Err(Error::format(format!("expected PGM magic P5, got {magic}")));
        }
        let (width, height, maxval) = dims;
        let expected = width * height;
        if payload.len() < expected {
            return Err(Error::format(format!(
                "PGM payload truncated: need {expected} bytes, have {}",
                payload.len()
            )));
        }
        let scale = 1.0 / maxval as f64;
        let data = payload[..expected].iter().map(|&b| b as f64 * scale).collect();
        Pixmap::from_vec(width, height, data)
    }

    /// Writes the map as raw little-endian `f64` plus a JSON sidecar.
    ///
    /// The sidecar lives at `<path>.json` and records `{width, height}` so
    /// the flat buffer can be reshaped on read.
    pub fn write_raw_f64(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let sidecar = RawSidecar { width: self.width, height: self.height };
        let json = serde_json::to_string_pretty(&sidecar)?;
        fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    /// Reads a raw little-endian `f64` map written by [`Pixmap::write_raw_f64`].
    pub fn read_raw_f64(path: &Path) -> Result<Self> {
        let sidecar_raw = fs::read_to_string(sidecar_path(path))?;
        let sidecar: RawSidecar = serde_json::from_str(&sidecar_raw)?;
        let mut file = fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let expected = sidecar.width * sidecar.height * 8;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "raw f64 payload is {} bytes, sidecar implies {expected}",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Pixmap::from_vec(sidecar.width, sidecar.height, data)
    }
}

/// Dimension sidecar for raw `f64` maps.
#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    width: usize,
    height: usize,
}

/// `<path>.json`, appended to whatever extension `path` already has.
fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Row-major grid of RGB samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbMap {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbMap {
    /// Creates a map filled with `value`.
    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "rgb map dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(RgbMap { width, height, data: vec![value; width * height] })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "rgb map dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::validation(format!(
                "buffer length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    /// Writes the image as a binary PPM (P6), clamping to `[0, 1]`.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for &c in px {
                bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a binary PPM (P6) written by [`RgbMap::write_ppm`].
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        let (magic, dims, payload) = parse_netpbm_header(&raw)?;
        if magic != "P6" {
            return Err(Error::format(format!("expected PPM magic P6, got {magic}")));
        }
        let (width, height, maxval) = dims;
        let expected = width * height * 3;
        if payload.len() < expected {
            return Err(Error::format(format!(
                "PPM payload truncated: need {expected} bytes, have {}",
                payload.len()
            )));
        }
        let scale = 1.0 / maxval as f64;
        let data: Vec<[f64; 3]> = payload[..expected]
            .chunks_exact(3)
            .map(|c| [c[0] as f64 * scale, c[1] as f64 * scale, c[2] as f64 * scale])
            .collect();
        RgbMap::from_vec(width, height, data)
    }
}

/// Parses a binary netpbm header (`P5`/`P6`), returning the magic, the
/// `(width, height, maxval)` triple, and the payload slice that follows the
/// single whitespace byte after maxval. Comment lines (`#`) are skipped.
fn parse_netpbm_header(raw: &[u8]) -> Result<(String, (usize, usize, usize), &[u8])> {
    let mut pos = 0usize;

    let mut next_token = |raw: &[u8]| -> Result<(usize, usize)> {
        // Skip whitespace and comment lines between tokens.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("netpbm header ended early".to_string()));
        }
        Ok((start, pos))
    };

    let (s, e) = next_token(raw)?;
    let magic = std::str::from_utf8(&raw[s..e])
        .map_err(|_| Error::format("netpbm magic is not ASCII"))?
        .to_string();

    let mut nums = [0usize; 3];
    for slot in nums.iter_mut() {
        let (s, e) = next_token(raw)?;
        let text = std::str::from_utf8(&raw[s..e])
            .map_err(|_| Error::format("netpbm header is not ASCII"))?;
        *slot = text
            .parse()
            .map_err(|_| Error::format(format!("bad netpbm header field: {text}")))?;
    }
    if nums[0] == 0 || nums[1] == 0 || nums[2] == 0 || nums[2] > 255 {
        return Err(Error::format(format!(
            "unsupported netpbm dimensions {}x{} maxval {}",
            nums[0], nums[1], nums[2]
        )));
    }

    // Exactly one whitespace byte separates maxval from the payload.
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(Error::format("missing separator before netpbm payload"));
    }
    pos += 1;
    Ok((magic, (nums[0], nums[1], nums[2]), &raw[pos..]))
}
