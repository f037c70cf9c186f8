//! Image buffers and on-disk image formats.
//!
//! Supported formats: 8/16-bit PNG (gray, RGB, RGBA), 8/16-bit PGM/PPM, and
//! a simple Bayer raw container: one ASCII header line
//! `w h bayer=RGGB black=<n> white=<n>` followed by `w·h` little-endian
//! `u16` samples. Raw frames are ingested as half-resolution 4-channel
//! packed RGGB planes.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer as ImgBuf, ImageFormat, Luma, Rgb};

use crate::error::{IdrError, Result};
use crate::tensor::Tensor;

/// Interleaved `height × width × channels` image of `f32` intensities.
///
/// Ingested pixels lie in `[0, 1]`; synthetic noise may push values outside
/// that range and nothing clamps them until export.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    pub source_id: Option<String>,
    pub bit_depth: Option<u8>,
    /// Black and white levels of the raw mosaic this image was packed from.
    pub raw_levels: Option<(u16, u16)>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(IdrError::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IdrError::numeric(format!("image value at {i} is not finite")));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
            source_id: None,
            bit_depth: None,
            raw_levels: None,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageBuffer {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            source_id: None,
            bit_depth: None,
            raw_levels: None,
        }
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.dims() == other.dims()
    }

    pub fn clamped(&self) -> ImageBuffer {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Copies the `size_h × size_w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size_h: usize, size_w: usize) -> Result<ImageBuffer> {
        if y + size_h > self.height || x + size_w > self.width {
            return Err(IdrError::shape(format!(
                "crop {size_h}x{size_w} at ({y},{x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(size_h * size_w * c);
        for row in y..y + size_h {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + size_w * c]);
        }
        Ok(ImageBuffer {
            height: size_h,
            width: size_w,
            channels: c,
            data,
            source_id: self.source_id.clone(),
            bit_depth: self.bit_depth,
            raw_levels: self.raw_levels,
        })
    }

    /// Extends the image by reflection (without repeating the edge pixel)
    /// on each side.
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> ImageBuffer {
        let (h, w, c) = self.dims();
        let (nh, nw) = (h + top + bottom, w + left + right);
        let mut data = Vec::with_capacity(nh * nw * c);
        for y in 0..nh {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..nw {
                let sx = reflect_index(x as isize - left as isize, w);
                let s = (sy * w + sx) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        ImageBuffer {
            height: nh,
            width: nw,
            channels: c,
            data,
            source_id: self.source_id.clone(),
            bit_depth: self.bit_depth,
            raw_levels: self.raw_levels,
        }
    }

    /// Stacks equally shaped images into one `(N, C, H, W)` tensor.
    pub fn stack(images: &[ImageBuffer]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| IdrError::shape("cannot stack an empty image list"))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(IdrError::shape(format!(
                    "cannot stack {:?} with {:?}",
                    img.dims(),
                    (h, w, c)
                )));
            }
            for ch in 0..c {
                data.extend(img.data.iter().skip(ch).step_by(c));
            }
        }
        Tensor::from_vec(&[images.len(), c, h, w], data)
    }

    /// Splits an `(N, C, H, W)` tensor back into images.
    pub fn unstack(t: &Tensor<f32>) -> Result<Vec<ImageBuffer>> {
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n);
        for item in t.data().chunks(c * hw).take(n) {
            let mut data = vec![0.0; c * hw];
            for ch in 0..c {
                for (p, &v) in item[ch * hw..(ch + 1) * hw].iter().enumerate() {
                    data[p * c + ch] = v;
                }
            }
            out.push(ImageBuffer::new(h, w, c, data)?);
        }
        Ok(out)
    }
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Header of the simple raw format.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
    pub bayer: String,
    pub black: u16,
    pub white: u16,
}

impl RawHeader {
    fn parse(line: &str) -> Result<RawHeader> {
        let bad = |m: &str| IdrError::format(format!("raw header `{line}`: {m}"));
        let mut it = line.split_whitespace();
        let width = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing width"))?;
        let height = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing height"))?;
        let (mut bayer, mut black, mut white) = (None, None, None);
        for kv in it {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k {
                "bayer" => bayer = Some(v.to_string()),
                "black" => black = Some(v.parse().map_err(|_| bad("bad black level"))?),
                "white" => white = Some(v.parse().map_err(|_| bad("bad white level"))?),
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        let hdr = RawHeader {
            width,
            height,
            bayer: bayer.ok_or_else(|| bad("missing bayer"))?,
            black: black.ok_or_else(|| bad("missing black"))?,
            white: white.ok_or_else(|| bad("missing white"))?,
        };
        if hdr.bayer != "RGGB" {
            return Err(bad("only RGGB mosaics are supported"));
        }
        if hdr.white <= hdr.black {
            return Err(bad("white level must exceed black level"));
        }
        if !hdr.width.is_multiple_of(2) || !hdr.height.is_multiple_of(2) {
            return Err(bad("mosaic extents must be even"));
        }
        Ok(hdr)
    }

    fn to_line(&self) -> String {
        format!(
            "{} {} bayer={} black={} white={}\n",
            self.width, self.height, self.bayer, self.black, self.white
        )
    }
}

/// Parses a raw container, returning its header and `u16` mosaic.
pub fn decode_raw(bytes: &[u8]) -> Result<(RawHeader, Vec<u16>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| IdrError::format("raw file has no header line"))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| IdrError::format("raw header is not UTF-8"))?;
    let hdr = RawHeader::parse(line.trim())?;
    let payload = &bytes[nl + 1..];
    let expected = hdr.width * hdr.height * 2;
    if payload.len() != expected {
        return Err(IdrError::format(format!(
            "raw payload has {} bytes, header declares {}x{} ({} bytes)",
            payload.len(),
            hdr.width,
            hdr.height,
            expected
        )));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((hdr, samples))
}

pub fn encode_raw(hdr: &RawHeader, samples: &[u16]) -> Vec<u8> {
    let mut out = hdr.to_line().into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Packs an RGGB mosaic into a half-resolution 4-channel image normalized
/// by `(v − black) / (white − black)`.
pub fn pack_raw(hdr: &RawHeader, samples: &[u16]) -> Result<ImageBuffer> {
    let (h2, w2) = (hdr.height / 2, hdr.width / 2);
    let scale = 1.0 / (hdr.white as f64 - hdr.black as f64);
    let mut data = Vec::with_capacity(h2 * w2 * 4);
    for y in 0..h2 {
        for x in 0..w2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let v = samples[(2 * y + dy) * hdr.width + 2 * x + dx];
                data.push(((v as f64 - hdr.black as f64) * scale) as f32);
            }
        }
    }
    let mut img = ImageBuffer::new(h2, w2, 4, data)?;
    img.bit_depth = Some(16);
    img.raw_levels = Some((hdr.black, hdr.white));
    Ok(img)
}

/// Inverse of [`pack_raw`]: clamps to `[0, 1]` and re-quantizes.
pub fn unpack_raw(img: &ImageBuffer, black: u16, white: u16) -> Result<(RawHeader, Vec<u16>)> {
    if img.channels != 4 {
        return Err(IdrError::shape("raw export needs a 4-channel packed image"));
    }
    let hdr = RawHeader {
        width: img.width * 2,
        height: img.height * 2,
        bayer: "RGGB".into(),
        black,
        white,
    };
    let range = white as f64 - black as f64;
    let mut samples = vec![0u16; hdr.width * hdr.height];
    for y in 0..img.height {
        for x in 0..img.width {
            for (c, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let v = img.get(y, x, c).clamp(0.0, 1.0) as f64;
                samples[(2 * y + dy) * hdr.width + 2 * x + dx] =
                    (v * range + black as f64).round() as u16;
            }
        }
    }
    Ok((hdr, samples))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

/// Loads a PNG, PGM/PPM or raw image, normalizing 8-bit data by 1/255 and
/// 16-bit data by 1/65535.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdrError::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string);
    let mut img = match extension(path).as_str() {
        "raw" => {
            let (hdr, samples) =
                decode_raw(&bytes).map_err(|e| IdrError::data(path, e.to_string()))?;
            pack_raw(&hdr, &samples)?
        }
        "png" | "pgm" | "ppm" | "pnm" => {
            let fmt = if extension(path) == "png" {
                ImageFormat::Png
            } else {
                ImageFormat::Pnm
            };
            let dynimg = image::load_from_memory_with_format(&bytes, fmt).map_err(|source| {
                IdrError::Image {
                    path: path.to_path_buf(),
                    source,
                }
            })?;
            from_dynamic(dynimg).map_err(|e| IdrError::data(path, e.to_string()))?
        }
        other => {
            return Err(IdrError::data(
                path,
                format!("unsupported image format `{other}`"),
            ))
        }
    };
    img.source_id = id;
    Ok(img)
}

fn from_dynamic(img: DynamicImage) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, depth, data): (usize, u8, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, 8, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, 8, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, 16, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, 16, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            (3, 8, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgba16(_) => {
            let b = img.to_rgb16();
            (3, 16, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        _ => return Err(IdrError::format("unsupported pixel layout")),
    };
    let mut out = ImageBuffer::new(h, w, channels, data)?;
    out.bit_depth = Some(depth);
    Ok(out)
}

/// Quantizes a `[0, 1]`-clamped image to 16 bits.
pub fn quantize16(img: &ImageBuffer) -> Vec<u16> {
    img.data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect()
}

/// Quantizes a `[0, 1]`-clamped image to 8 bits.
pub fn quantize8(img: &ImageBuffer) -> Vec<u8> {
    img.data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8)
        .collect()
}

/// Encodes an image in memory; `format` is one of `png`, `pgm`, `ppm`.
pub fn encode_image(img: &ImageBuffer, format: &str, bit_depth: u8) -> Result<Vec<u8>> {
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = match (img.channels, bit_depth) {
        (1, 8) => DynamicImage::ImageLuma8(
            ImgBuf::<Luma<u8>, _>::from_raw(w, h, quantize8(img)).expect("sized"),
        ),
        (3, 8) => DynamicImage::ImageRgb8(
            ImgBuf::<Rgb<u8>, _>::from_raw(w, h, quantize8(img)).expect("sized"),
        ),
        (1, 16) => DynamicImage::ImageLuma16(
            ImgBuf::<Luma<u16>, _>::from_raw(w, h, quantize16(img)).expect("sized"),
        ),
        (3, 16) => DynamicImage::ImageRgb16(
            ImgBuf::<Rgb<u16>, _>::from_raw(w, h, quantize16(img)).expect("sized"),
        ),
        (c, d) => {
            return Err(IdrError::format(format!(
                "cannot encode {c}-channel image at {d} bits"
            )))
        }
    };
    let fmt = match format {
        "png" => ImageFormat::Png,
        "pgm" | "ppm" | "pnm" => ImageFormat::Pnm,
        other => return Err(IdrError::format(format!("unsupported output format `{other}`"))),
    };
    let mut buf = Cursor::new(Vec::new());
    dynimg
        .write_to(&mut buf, fmt)
        .map_err(|e| IdrError::format(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Writes an image after clamping to `[0, 1]`. `.raw` output reuses the
/// image's original black/white levels, or 0/65535 when it has none.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "raw" => {
            let (black, white) = img.raw_levels.unwrap_or((0, u16::MAX));
            let (hdr, samples) = unpack_raw(img, black, white)?;
            encode_raw(&hdr, &samples)
        }
        ext => encode_image(img, ext, bit_depth)?,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| IdrError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| IdrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn stack_unstack_roundtrip() {
        let a = ImageBuffer::new(2, 3, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        let b = ImageBuffer::new(2, 3, 3, (0..18).map(|v| -(v as f32)).collect()).unwrap();
        let t = ImageBuffer::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        // channel 1 plane of the first image
        assert_eq!(&t.data()[6..12], &[1.0, 4.0, 7.0, 10.0, 13.0, 16.0]);
        assert_eq!(ImageBuffer::unstack(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn raw_black_and_white_levels() {
        let hdr = RawHeader::parse("2 2 bayer=RGGB black=64 white=1023").unwrap();
        let img = pack_raw(&hdr, &[64, 543, 1023, 100]).unwrap();
        assert_eq!(img.dims(), (1, 1, 4));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert!((img.get(0, 0, 1) - (543.0 - 64.0) / 959.0).abs() < 1e-7);
        assert!((img.get(0, 0, 1) - 0.4995).abs() < 1e-4);
        assert_eq!(img.get(0, 0, 2), 1.0);
    }

    #[test]
    fn raw_header_errors() {
        assert!(decode_raw(b"4 4 bayer=RGGB black=0 white=10\n\x00\x00").is_err());
        assert!(decode_raw(b"no newline").is_err());
        assert!(RawHeader::parse("4 4 bayer=GRBG black=0 white=10").is_err());
        assert!(RawHeader::parse("4 4 bayer=RGGB black=10 white=10").is_err());
    }

    #[test]
    fn raw_payload_roundtrip_is_exact() {
        let hdr = RawHeader {
            width: 4,
            height: 2,
            bayer: "RGGB".into(),
            black: 64,
            white: 1023,
        };
        let samples: Vec<u16> = vec![64, 100, 543, 1023, 70, 80, 900, 65];
        let (h2, s2) = decode_raw(&encode_raw(&hdr, &samples)).unwrap();
        let img = pack_raw(&h2, &s2).unwrap();
        let (h3, s3) = unpack_raw(&img, 64, 1023).unwrap();
        assert_eq!(h3, hdr);
        assert_eq!(s3, samples);
    }
}
