//! In-memory images and PNG reading/writing.
//!
//! Pixels live in [0,1] as f32, stored channel-major (3×H×W) to match the
//! tensor layout the networks consume.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An RGB raster with pixels in [0,1], stored as 3×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize) -> Self {
        ImageBuffer {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::validation(format!(
                "image data length {} does not match 3x{height}x{width}",
                data.len()
            )));
        }
        let img = ImageBuffer {
            height,
            width,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    /// Builds an image from a per-pixel function returning (r, g, b).
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut img = ImageBuffer::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.iter().enumerate() {
                    img.data[(c * height + y) * width + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn planes(&self) -> &[f32] {
        &self.data
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("empty image"));
        }
        for v in &self.data {
            if !v.is_finite() {
                return Err(Error::validation("image contains non-finite pixels"));
            }
            if !(0.0..=1.0).contains(v) {
                return Err(Error::validation(format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.data.iter().map(|v| S::from_f64(*v as f64)).collect(),
        )
    }

    /// Clamps to [0,1]; the network output activation already lands inside,
    /// but float casts may graze the boundary.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (c, h, w) = t.dims3();
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        if !t.all_finite() {
            return Err(Error::validation("tensor contains non-finite values"));
        }
        Ok(ImageBuffer {
            height: h,
            width: w,
            data: t
                .data()
                .iter()
                .map(|v| (v.to_f64() as f32).clamp(0.0, 1.0))
                .collect(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img =
            image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = ImageBuffer::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.data[(c * h + y) * w + x] = p.0[c] as f32 / 255.0;
                }
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path, depth: PngDepth) -> Result<()> {
        match depth {
            PngDepth::Eight => {
                let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let mut px = [0u8; 3];
                        for (c, b) in px.iter_mut().enumerate() {
                            *b = quantize(self.get(c, y, x), 255) as u8;
                        }
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img.save(path)
                    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
            }
            PngDepth::Sixteen => {
                let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
                    self.width as u32,
                    self.height as u32,
                );
                for y in 0..self.height {
                    for x in 0..self.width {
                        let mut px = [0u16; 3];
                        for (c, b) in px.iter_mut().enumerate() {
                            *b = quantize(self.get(c, y, x), 65535) as u16;
                        }
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img.save(path)
                    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Scales a [0,1] value to an integer code, rounding half to even.
fn quantize(v: f32, max: u32) -> u32 {
    let scaled = (v as f64).clamp(0.0, 1.0) * max as f64;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let base = floor as u32;
    match frac.partial_cmp(&0.5) {
        Some(std::cmp::Ordering::Less) => base,
        Some(std::cmp::Ordering::Greater) => (base + 1).min(max),
        _ => {
            if base.is_multiple_of(2) {
                base
            } else {
                (base + 1).min(max)
            }
        }
    }
}
