//! In-memory RGB images with `f64` channels in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Row-major, channel-interleaved.
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image("empty image".into()));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::Image(format!(
                "{width}x{height} RGB needs {} values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Quantizes to 8-bit with rounding; values are clamped to `[0, 1]` first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Bilinear resampling with half-pixel centers and clamped borders.
    /// Resizing to the current size returns an exact copy.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::Image("cannot resize to an empty image".into()));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let coord = |o: usize, scale: f64, n: usize| {
            let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, c - i0 as f64)
        };
        Ok(Image::from_fn(width, height, |x, y| {
            let (x0, x1, fx) = coord(x, sx, self.width);
            let (y0, y1, fy) = coord(y, sy, self.height);
            let (p00, p10, p01, p11) = (
                self.pixel(x0, y0),
                self.pixel(x1, y0),
                self.pixel(x0, y1),
                self.pixel(x1, y1),
            );
            std::array::from_fn(|c| {
                let top = p00[c] * (1.0 - fx) + p10[c] * fx;
                let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
                top * (1.0 - fy) + bot * fy
            })
        }))
    }

    pub fn crop(&self, bbox: &BBox) -> Result<Image> {
        bbox.check_within(self.width, self.height)?;
        Ok(Image::from_fn(bbox.w, bbox.h, |x, y| self.pixel(bbox.x + x, bbox.y + y)))
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Image("size mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Region(format!("empty box {self}")));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Region(format!("box {self} exceeds {width}x{height} image")));
        }
        Ok(())
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// Parses `"x,y,w,h"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Region(format!("expected x,y,w,h, got {s:?}")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::Region(format!("bad box component {p:?} in {s:?}")))?;
        }
        Ok(BBox::new(v[0], v[1], v[2], v[3]))
    }
}

/// Per-pixel boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Image(format!("mask {width}x{height} with {} entries", data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Pixels brighter than mid-gray (mean over channels) are set.
    pub fn from_image(img: &Image) -> Self {
        let data = (0..img.height())
            .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
            .map(|(x, y)| img.pixel(x, y).iter().sum::<f64>() / 3.0 > 0.5)
            .collect();
        Self {
            width: img.width(),
            height: img.height(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
                self.get(sx.min(self.width - 1), sy.min(self.height - 1))
            })
            .collect();
        BinaryMask { width, height, data }
    }
}
