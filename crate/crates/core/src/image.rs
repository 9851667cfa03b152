//! Plain image containers shared by the generator, augmentations and models.

use crate::error::{Error, Result};

pub const IGNORE: u8 = 255;

/// Interleaved H×W×C image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{}x{}x{} needs {} values, got {}", height, width, channels, height * width * channels, data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Quantize to 8 bits with round-half-up after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> ImageU8 {
        ImageU8 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// 8-bit interleaved image as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn to_f64(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }
}

/// Per-pixel class ids, [`IGNORE`] marks pixels excluded from evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Mask::new", format!("{}x{} vs {}", height, width, data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Axis-aligned box in normalized `(cx, cy, w, h)` form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnn {
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnn {
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(class: u8, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxAnn {
            class,
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Bilinear resize (half-pixel centers, edges clamped).
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let mut out = Image::filled(height, width, img.channels, 0.0);
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..img.channels {
                let top = img.get(y0, x0, c) * (1.0 - wx) + img.get(y0, x1, c) * wx;
                let bot = img.get(y1, x0, c) * (1.0 - wx) + img.get(y1, x1, c) * wx;
                let i = out.idx(y, x, c);
                out.data[i] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize for label maps.
pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = (((y as f64 + 0.5) * mask.height as f64 / height as f64) as usize).min(mask.height - 1);
        for x in 0..width {
            let sx = (((x as f64 + 0.5) * mask.width as f64 / width as f64) as usize).min(mask.width - 1);
            data.push(mask.get(sy, sx));
        }
    }
    Mask { height, width, data }
}

/// Mirror an image left-right.
pub fn hflip_image(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let i = out.idx(y, x, c);
                out.data[i] = img.get(y, img.width - 1 - x, c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_roundtrip_of_levels() {
        for v in 0..=255u8 {
            assert_eq!(quantize(v as f64 / 255.0), v);
        }
    }

    #[test]
    fn resize_identity_size_is_identity() {
        let img = Image::new(2, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let out = resize_bilinear(&img, 2, 3);
        assert!(img.data.iter().zip(&out.data).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
