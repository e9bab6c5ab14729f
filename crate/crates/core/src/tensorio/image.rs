use std::path::Path;

use crate::{Error, Result};

/// Interleaved HWC float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// Loads a PNG as a 1-channel (grayscale) or 3-channel image in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Image::from_data(h, w, 3, rgb.into_raw())
    } else {
        let gray = img.to_luma32f();
        Image::from_data(h, w, 1, gray.into_raw())
    }
}

/// Zero-pads symmetrically to a square (odd remainder goes bottom/right),
/// resizes to `side x side` with bilinear interpolation on pixel centers, and
/// replicates grayscale to three channels.
pub fn pad_and_resize(image: &Image, side: usize) -> Result<Image> {
    if image.height == 0 || image.width == 0 || side == 0 {
        return Err(Error::invalid("zero-area image"));
    }
    if image.channels != 1 && image.channels != 3 {
        return Err(Error::invalid(format!(
            "expected 1 or 3 channels, got {}",
            image.channels
        )));
    }
    let square = image.height.max(image.width);
    let top = (square - image.height) / 2;
    let left = (square - image.width) / 2;
    let mut padded = Image::zeros(square, square, 3);
    for y in 0..image.height {
        for x in 0..image.width {
            let src = image.pixel(y, x);
            let dst = padded.pixel_mut(y + top, x + left);
            if image.channels == 1 {
                dst.fill(src[0]);
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    if square == side {
        return Ok(padded);
    }
    Ok(resize_bilinear(&padded, side))
}

fn resize_bilinear(src: &Image, side: usize) -> Image {
    let scale = src.height as f64 / side as f64;
    let last = (src.height - 1) as f64;
    let mut out = Image::zeros(side, side, src.channels);
    let sample = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src.height - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    for y in 0..side {
        let (y0, y1, fy) = sample(y);
        for x in 0..side {
            let (x0, x1, fx) = sample(x);
            for c in 0..src.channels {
                let a = src.pixel(y0, x0)[c];
                let b = src.pixel(y0, x1)[c];
                let p = src.pixel(y1, x0)[c];
                let q = src.pixel(y1, x1)[c];
                let top = a + (b - a) * fx;
                let bottom = p + (q - p) * fx;
                out.pixel_mut(y, x)[c] = top + (bottom - top) * fy;
            }
        }
    }
    out
}
