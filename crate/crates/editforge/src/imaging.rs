//! Pixel-level preprocessing and the SSIM baseline.
//!
//! Everything here is a pure function over immutable inputs. Luminance
//! conversion uses ITU-R BT.601 weights (0.299, 0.587, 0.114); resampling
//! is bilinear with half-pixel centers. SSIM uses uniform (unweighted)
//! windows over fully-contained positions; means and variances come from
//! summed-area tables.

use serde::{Deserialize, Serialize};

/// Row-major grayscale image with luminance values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image too small for {0}x{0} window: {1}x{2}")]
    TooSmall(usize, usize, usize),
    #[error("image not admitted: crop fraction {0:.4} exceeds threshold {1:.4}")]
    NotAdmitted(f64, f64),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("decode failure: {0}")]
    DecodeFailure(String),
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<GrayImage, ImagingError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImagingError::Invalid(format!(
                "pixel count {} != {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ImagingError::Invalid("pixel outside [0,1]".to_string()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> GrayImage {
        GrayImage::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Decode PNG or JPEG bytes to luminance via BT.601 weights.
    pub fn decode(bytes: &[u8]) -> Result<GrayImage, ImagingError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| ImagingError::DecodeFailure(e.to_string()))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img
            .pixels()
            .map(|p| {
                (0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64) / 255.0
            })
            .collect();
        GrayImage::new(w, h, pixels)
    }

    /// Encode as 8-bit grayscale PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let buf: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| ImagingError::Invalid("buffer size mismatch".to_string()))?;
        let mut out = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut out),
            image::ImageFormat::Png,
        )
        .map_err(|e| ImagingError::Invalid(e.to_string()))?;
        Ok(out)
    }
}

/// SSIM parameters; defaults are the standard constants with unit dynamic
/// range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(ImagingError::Invalid(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(ImagingError::Invalid(
                "k1, k2, dynamic_range must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Fraction of pixel area removed by center-cropping to the largest
/// centered square: 1 − min(w,h)/max(w,h).
pub fn crop_fraction(width: u32, height: u32) -> f64 {
    let (w, h) = (width as f64, height as f64);
    1.0 - w.min(h) / w.max(h)
}

/// Admission rule: keep an image iff square-cropping removes at most
/// `threshold` of its area (default 0.20).
pub fn admit_image(width: u32, height: u32, threshold: f64) -> bool {
    crop_fraction(width, height) <= threshold
}

pub const DEFAULT_CROP_THRESHOLD: f64 = 0.20;

/// Center-crop to the largest centered square, then bilinearly resize to
/// `side`×`side`. When the crop margin is odd the extra pixel is taken
/// from the trailing edge.
pub fn center_crop_resize(
    img: &GrayImage,
    side: usize,
    crop_threshold: f64,
) -> Result<GrayImage, ImagingError> {
    let frac = crop_fraction(img.width as u32, img.height as u32);
    if frac > crop_threshold {
        return Err(ImagingError::NotAdmitted(frac, crop_threshold));
    }
    if side == 0 {
        return Err(ImagingError::Invalid("side must be >= 1".to_string()));
    }
    let square = img.width.min(img.height);
    let x0 = (img.width - square) / 2;
    let y0 = (img.height - square) / 2;

    if square == side && img.width == img.height {
        return Ok(img.clone());
    }

    let scale = square as f64 / side as f64;
    let mut pixels = Vec::with_capacity(side * side);
    for oy in 0..side {
        // half-pixel centers: map output center to source coordinates
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (square - 1) as f64);
        let y_lo = sy.floor() as usize;
        let y_hi = (y_lo + 1).min(square - 1);
        let fy = sy - y_lo as f64;
        for ox in 0..side {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (square - 1) as f64);
            let x_lo = sx.floor() as usize;
            let x_hi = (x_lo + 1).min(square - 1);
            let fx = sx - x_lo as f64;
            let p00 = img.at(x0 + x_lo, y0 + y_lo);
            let p10 = img.at(x0 + x_hi, y0 + y_lo);
            let p01 = img.at(x0 + x_lo, y0 + y_hi);
            let p11 = img.at(x0 + x_hi, y0 + y_hi);
            let top = p00 * (1.0 - fx) + p10 * fx;
            let bot = p01 * (1.0 - fx) + p11 * fx;
            pixels.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(side, side, pixels)
}

/// Summed-area table with one row/column of zero padding.
fn integral(img: &GrayImage, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(img.at(x, y));
            s[(y + 1) * (w + 1) + (x + 1)] = s[y * (w + 1) + (x + 1)] + row;
        }
    }
    s
}

#[inline]
fn box_sum(s: &[f64], stride: usize, x: usize, y: usize, k: usize) -> f64 {
    s[(y + k) * stride + (x + k)] - s[y * stride + (x + k)] - s[(y + k) * stride + x]
        + s[y * stride + x]
}

/// Mean SSIM over all fully-contained sliding windows with uniform
/// weighting.
pub fn ssim(a: &GrayImage, b: &GrayImage, params: &SsimParams) -> Result<f64, ImagingError> {
    params.validate()?;
    if a.width != b.width || a.height != b.height {
        return Err(ImagingError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let k = params.window;
    if a.width < k || a.height < k {
        return Err(ImagingError::TooSmall(k, a.width, a.height));
    }
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let n = (k * k) as f64;
    let stride = a.width + 1;

    let sa = integral(a, |v| v);
    let sb = integral(b, |v| v);
    let saa = integral(a, |v| v * v);
    let sbb = integral(b, |v| v * v);
    let sab = {
        let (w, h) = (a.width, a.height);
        let mut s = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += a.at(x, y) * b.at(x, y);
                s[(y + 1) * (w + 1) + (x + 1)] = s[y * (w + 1) + (x + 1)] + row;
            }
        }
        s
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=(a.height - k) {
        for x in 0..=(a.width - k) {
            let mu1 = box_sum(&sa, stride, x, y, k) / n;
            let mu2 = box_sum(&sb, stride, x, y, k) / n;
            let var1 = box_sum(&saa, stride, x, y, k) / n - mu1 * mu1;
            let var2 = box_sum(&sbb, stride, x, y, k) / n - mu2 * mu2;
            let cov = box_sum(&sab, stride, x, y, k) / n - mu1 * mu2;
            let num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2);
            let den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
