//! RGB images in `[0, 1]`, PPM (P6) and PNG decoding, resizing, grayscale and
//! normalization to model input tensors.

use std::io::Cursor;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Interleaved RGB pixels, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!("image dims must be positive, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::arg(format!(
                "{} values for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A decoded image with its label and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub label: usize,
    pub source_path: String,
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes a `.ppm` (P6) or `.png` file, chosen by extension.
pub fn decode_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let decoded = match ext.as_deref() {
        Some("ppm") => decode_ppm(&bytes),
        Some("png") => decode_png(&bytes),
        _ => Err("unsupported extension (expected .ppm or .png)".to_string()),
    };
    decoded.map_err(|m| image_err(path, m))
}

pub fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "png")
    )
}

/// Parses a binary PPM. The header is `P6`, width, height and maxval
/// separated by whitespace (with `#` comments), then exactly one whitespace
/// byte before the raster. Samples are 1 byte for maxval < 256, otherwise
/// 2 bytes big-endian, and are scaled by `1/maxval`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P6") {
        return Err("not a binary PPM (missing P6 magic)".into());
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("truncated or malformed header (field {})", i + 1));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| format!("header value {text} is out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("zero-sized image {width}x{height}"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or("image dims overflow")?;
    let wide = maxval > 255;
    let need = samples * if wide { 2 } else { 1 };
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!("truncated raster: {} of {need} bytes", raster.len()));
    }
    let scale = maxval as f32;
    let read = |i: usize| -> u32 {
        if wide {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        } else {
            raster[i] as u32
        }
    };
    let mut pixels = Vec::with_capacity(samples);
    for i in 0..samples {
        let v = read(i);
        if v > maxval as u32 {
            return Err(format!("sample {v} exceeds maxval {maxval}"));
        }
        pixels.push(v as f32 / scale);
    }
    Ok(Image { height, width, pixels })
}

/// Encodes as 8-bit P6; values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("PNG too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("palette was not expanded".into()),
    };
    let (wide, max) = match info.bit_depth {
        png::BitDepth::Eight => (false, 255.0),
        png::BitDepth::Sixteen => (true, 65535.0),
        d => return Err(format!("unexpected bit depth {d:?} after expansion")),
    };
    let sample = |i: usize| -> f32 {
        let v = if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f32
        } else {
            buf[i] as f32
        };
        v / max
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for p in 0..w * h {
        let base = p * channels;
        if channels < 3 {
            let g = sample(base);
            pixels.extend([g, g, g]);
        } else {
            pixels.extend([sample(base), sample(base + 1), sample(base + 2)]);
        }
    }
    Ok(Image {
        height: h,
        width: w,
        pixels,
    })
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn resize(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("resize target must be positive, got {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (image.height, image.width) {
        return Ok(image.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, image.height), axis(out_w, image.width));
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = image.get(y0, x0, c) * (1.0 - fx) + image.get(y0, x1, c) * fx;
                let bottom = image.get(y1, x0, c) * (1.0 - fx) + image.get(y1, x1, c) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        pixels,
    })
}

/// BT.601 luma, one value per pixel.
pub fn to_grayscale(image: &Image) -> Vec<f32> {
    image
        .pixels
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) as f32)
        .collect()
}

/// `(v − 0.5) / 0.5` per channel, stacked into an NCHW batch in `[−1, 1]`.
pub fn normalize(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::arg("normalize: empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape(format!(
                "normalize: mixed image sizes {h}x{w} and {}x{}",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels.iter().skip(c).step_by(3).map(|&v| (v - 0.5) / 0.5));
        }
    }
    Tensor::new(data, &[images.len(), 3, h, w])
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &Tensor) -> Result<Vec<Image>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("denormalize expects [N, 3, H, W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    Ok(batch
        .data()
        .chunks_exact(3 * plane)
        .map(|img| {
            let pixels = (0..plane)
                .flat_map(|p| (0..3).map(move |c| img[c * plane + p] * 0.5 + 0.5))
                .collect();
            Image {
                height: h,
                width: w,
                pixels,
            }
        })
        .collect())
}
