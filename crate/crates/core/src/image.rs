//! RGB images in `[-1, 1]`, PNG conversion and fidelity metrics.
//!
//! Pixels are held channel-major `(3, H, W)`. Conversion to 8-bit happens
//! only at the PNG boundary: `u8 = round((p + 1) / 2 * 255)` after clamping.

use std::io::Cursor;
use std::path::Path;

use ndarray::{Array2, Array3};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode failed: {0}")]
    Decode(String),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("image contains non-finite values")]
    NonFinite,
    #[error("expected {expected:?}, got {found:?}")]
    Dims { expected: (usize, usize), found: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
    /// Per-pixel class ids; only known for synthetic scenes.
    pub segmentation: Option<Array2<u8>>,
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Result<Self, ImageError> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        assert_eq!(pixels.dim().0, 3, "images are RGB");
        Ok(Self { pixels, segmentation: None })
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Self { pixels: Array3::from_elem((3, h, w), value), segmentation: None }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = self.dims();
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push(to_u8(self.pixels[[c, y, x]]));
                }
            }
        }
        out
    }

    pub fn from_rgb8(h: usize, w: usize, data: &[u8]) -> Self {
        assert_eq!(data.len(), h * w * 3);
        let pixels = Array3::from_shape_fn((3, h, w), |(c, y, x)| from_u8(data[(y * w + x) * 3 + c]));
        Self { pixels, segmentation: None }
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let (h, w) = self.dims();
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory png header");
            writer.write_image_data(&self.to_rgb8()).expect("in-memory png data");
        }
        buf
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let (h, w, rgb) = decode_png_rgb(bytes)?;
        Ok(Self::from_rgb8(h, w, &rgb))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.to_png_bytes())?;
        Ok(())
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        let mut q = Self::from_rgb8(self.height(), self.width(), &self.to_rgb8());
        q.segmentation = self.segmentation.clone();
        q
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[inline]
pub fn to_u8(p: f32) -> u8 {
    (((p.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Decodes any 8-bit PNG into packed RGB.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| ImageError::Decode(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| ImageError::Decode("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(ImageError::Unsupported(format!("{other:?}"))),
    };
    Ok((h, w, rgb))
}

/// Binary pixel mask from a PNG: a pixel is set when its red channel > 127.
pub fn mask_from_png_bytes(bytes: &[u8]) -> Result<Array2<f32>, ImageError> {
    let (h, w, rgb) = decode_png_rgb(bytes)?;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| if rgb[(y * w + x) * 3] > 127 { 1.0 } else { 0.0 }))
}

pub fn mask_to_png_bytes(mask: &Array2<f32>) -> Vec<u8> {
    let (h, w) = mask.dim();
    let img = Image {
        pixels: Array3::from_shape_fn((3, h, w), |(_, y, x)| if mask[[y, x]] > 0.5 { 1.0 } else { -1.0 }),
        segmentation: None,
    };
    img.to_png_bytes()
}

/// Peak signal-to-noise ratio in dB for images in `[-1, 1]` (peak-to-peak 2).
///
/// With `exclude` given, pixels where the mask is set are left out. Returns
/// `f64::INFINITY` for identical inputs and `NaN` when nothing is compared.
pub fn psnr(a: &Image, b: &Image, exclude: Option<&Array2<f32>>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let (h, w) = a.dims();
    let mut se = 0.0f64;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if exclude.is_some_and(|m| m[[y, x]] > 0.5) {
                continue;
            }
            for c in 0..3 {
                let d = (a.pixels[[c, y, x]] - b.pixels[[c, y, x]]) as f64;
                se += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return f64::NAN;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_idempotent_after_quantization() {
        let px = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| ((c + y * 5 + x) as f32 / 30.0) * 2.0 - 1.0);
        let img = Image::new(px).unwrap();
        let q = img.quantized();
        let back = Image::from_png_bytes(&q.to_png_bytes()).unwrap();
        assert_eq!(back.pixels, q.pixels);
        assert!(img.max_abs_diff(&q) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn psnr_conventions() {
        let a = Image::filled(2, 2, 0.0);
        assert_eq!(psnr(&a, &a, None), f64::INFINITY);
        let b = Image::filled(2, 2, 0.2);
        // mse = 0.04 -> 10 log10(4 / 0.04) = 20 dB
        assert!((psnr(&a, &b, None) - 20.0).abs() < 1e-5);
        let all = Array2::from_elem((2, 2), 1.0);
        assert!(psnr(&a, &b, Some(&all)).is_nan());
    }

    #[test]
    fn nan_pixels_rejected() {
        let mut px = Array3::zeros((3, 1, 1));
        px[[0, 0, 0]] = f32::NAN;
        assert!(matches!(Image::new(px), Err(ImageError::NonFinite)));
    }
}
