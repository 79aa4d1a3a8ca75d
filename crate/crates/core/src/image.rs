//! Float image container, binary Netpbm / PFM I/O and patch extraction.
//!
//! Samples are stored row-major with the channel index varying fastest and
//! are nominally in `[0, 1]`. Integer formats are converted at the file
//! boundary; PFM carries 32-bit floats verbatim.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Builds an image from interleaved samples. Fails on a length mismatch,
    /// a zero dimension or any non-finite sample.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be non-zero, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples supplied for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} is not finite ({})",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(value.is_finite());
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::from_vec(height, width, channels, data).expect("from_fn produced an invalid image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        assert!(value.is_finite(), "non-finite sample {value}");
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    /// Applies `f` to every sample. Panics if `f` produces a non-finite value.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(
            data.iter().all(|v| v.is_finite()),
            "map produced a non-finite sample"
        );
        Self { data, ..*self }
    }

    /// Combines two equally shaped images sample by sample.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(self.height, self.width, self.channels, data)
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Copies the `height`×`width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        let stride = self.width * self.channels;
        for r in row..row + height {
            let start = r * stride + col * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Single channel `channel` as a one-channel image.
    pub fn channel(&self, channel: usize) -> Self {
        assert!(channel < self.channels);
        let data = self
            .data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Unweighted mean of the channels.
    pub fn luminance(&self) -> Self {
        let n = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / n)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary greyscale Netpbm (`P5`).
    Pgm,
    /// Binary colour Netpbm (`P6`).
    Ppm,
    /// Portable float map, little-endian.
    Pfm,
}

impl ImageFormat {
    /// Guesses the format from a file extension (`pgm`, `ppm`, `pfm`).
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(Self::Pgm),
            "ppm" => Some(Self::Ppm),
            "pfm" => Some(Self::Pfm),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Pgm => "pgm",
            Self::Ppm => "ppm",
            Self::Pfm => "pfm",
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, format)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Decodes a P5, P6 or PFM byte stream.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a magic number".into()));
    }
    match &bytes[..2] {
        b"P5" => decode_pnm(bytes, 1),
        b"P6" => decode_pnm(bytes, 3),
        b"Pf" => decode_pfm(bytes, 1),
        b"PF" => decode_pfm(bytes, 3),
        other => Err(Error::Format(format!(
            "unsupported magic number {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}

pub fn encode_image(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Pgm | ImageFormat::Ppm => encode_pnm(img, format),
        ImageFormat::Pfm => encode_pfm(img),
    }
}

/// Whitespace/comment aware header reader shared by the Netpbm and PFM
/// decoders.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        // skip the two magic bytes
        Self { bytes, pos: 2 }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Format(format!("truncated header before {what}"))),
            }
        }
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Format(format!("non-ascii {what}")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::Format(format!("invalid {what}: {tok:?}")))
    }

    /// Consumes the single whitespace byte separating header and payload.
    fn payload(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(Error::Format("truncated header".into())),
        }
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImageBuffer> {
    let mut hdr = HeaderReader::new(bytes);
    let width: usize = hdr.number("width")?;
    let height: usize = hdr.number("height")?;
    let maxval: u64 = hdr.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} outside 1..=65535")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "degenerate dimensions {width}x{height}"
        )));
    }
    let payload = hdr.payload()?;
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let n = width * height * channels;
    if payload.len() < n * bytes_per_sample {
        return Err(Error::Format(format!(
            "truncated payload: expected {} bytes, found {}",
            n * bytes_per_sample,
            payload.len()
        )));
    }
    let scale = maxval as f64;
    let data = if bytes_per_sample == 1 {
        payload[..n].iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / scale)
            .collect()
    };
    ImageBuffer::from_vec(height, width, channels, data)
}

fn decode_pfm(bytes: &[u8], channels: usize) -> Result<ImageBuffer> {
    let mut hdr = HeaderReader::new(bytes);
    let width: usize = hdr.number("width")?;
    let height: usize = hdr.number("height")?;
    let scale: f64 = hdr.number("scale")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "degenerate dimensions {width}x{height}"
        )));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("invalid PFM scale {scale}")));
    }
    let little_endian = scale < 0.0;
    let payload = hdr.payload()?;
    let n = width * height * channels;
    if payload.len() < 4 * n {
        return Err(Error::Format(format!(
            "truncated payload: expected {} bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let row_len = width * channels;
    let mut data = vec![0.0; n];
    // PFM rows run bottom to top
    for (file_row, chunk) in payload[..4 * n].chunks_exact(4 * row_len).enumerate() {
        let row = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[row * row_len + i] = f64::from(v);
        }
    }
    ImageBuffer::from_vec(height, width, channels, data)
}

fn encode_pnm(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    let (magic, channels) = match format {
        ImageFormat::Pgm => ("P5", 1),
        ImageFormat::Ppm => ("P6", 3),
        ImageFormat::Pfm => unreachable!(),
    };
    if img.channels() != channels {
        return Err(Error::Format(format!(
            "{} requires {channels} channel(s), image has {}",
            format.extension().to_uppercase(),
            img.channels()
        )));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.as_slice().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

/// Clamp to `[0, 1]`, then round half up onto `0..=255`.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn encode_pfm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Format(format!(
                "PFM supports 1 or 3 channels, image has {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row_len = img.width() * img.channels();
    for row in img.as_slice().chunks_exact(row_len).rev() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

/// Square patch layout over an image: origins at multiples of `stride` in
/// both axes, keeping only patches that fit entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// `(row, col)` of each patch's top-left corner, row-major order.
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size ({patch_size}) and stride ({stride}) must be positive"
            )));
        }
        if patch_size > height.min(width) {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} exceeds {height}x{width} image"
            )));
        }
        let rows = (0..=height - patch_size).step_by(stride);
        let origins = rows
            .flat_map(|r| {
                (0..=width - patch_size)
                    .step_by(stride)
                    .map(move |c| (r, c))
            })
            .collect();
        Ok(Self {
            height,
            width,
            patch_size,
            stride,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn extract(&self, img: &ImageBuffer) -> Result<Vec<ImageBuffer>> {
        if (img.height(), img.width()) != (self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "grid built for {}x{}, image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        self.origins
            .iter()
            .map(|&(r, c)| img.crop(r, c, self.patch_size, self.patch_size))
            .collect()
    }
}

pub fn extract_patches(img: &ImageBuffer, size: usize, stride: usize) -> Result<Vec<ImageBuffer>> {
    PatchGrid::new(img.height(), img.width(), size, stride)?.extract(img)
}
