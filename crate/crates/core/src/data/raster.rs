use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::scene::Shape;

/// A row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Data(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    /// Pixels of `shape`, clipped to the grid.
    pub fn rasterize(shape: &Shape, height: usize, width: usize) -> Self {
        let mut m = Self::new(height, width);
        let (x0, y0, x1, y1) = shape.bounds();
        for y in y0..=y1.min(height.saturating_sub(1)) {
            for x in x0..=x1.min(width.saturating_sub(1)) {
                if shape.contains(x, y) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// Pixels where `logits > 0`, i.e. sigmoid above one half.
    pub fn from_logits<T: Real>(logits: &Tensor<T>) -> Result<Self> {
        let [h, w] = logits.shape()[..] else {
            return Err(Error::Data(format!("logit map must be 2-d, got {:?}", logits.shape())));
        };
        Ok(Self {
            height: h,
            width: w,
            bits: logits.data().iter().map(|&v| v > T::zero()).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resample to `h×w`; pixel `(i, j)` reads source
    /// `(i·H/h, j·W/w)`. Both sides must divide evenly.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::Data(format!(
                "cannot downsample a {}x{} mask to {h}x{w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let mut out = Self::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y * fy, x * fx));
            }
        }
        Ok(out)
    }

    /// Fraction of foreground pixels in each block of an `h×w` grid; `h`
    /// and `w` must divide the mask evenly.
    pub fn coverage<T: Real>(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::Data(format!(
                "cannot pool a {}x{} mask to {h}x{w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let area = (fy * fx) as f64;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let n = (0..fy)
                    .flat_map(|dy| (0..fx).map(move |dx| (y * fy + dy, x * fx + dx)))
                    .filter(|&(yy, xx)| self.get(yy, xx))
                    .count();
                data.push(T::from_f64(n as f64 / area));
            }
        }
        Ok(Tensor::from_vec(&[h, w], data)?)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[self.height, self.width], data).expect("mask shape")
    }

    /// 0 for background, 255 for foreground.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Any nonzero pixel is foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            bits: img.pixels().map(|p| p.0[0] != 0).collect(),
        }
    }
}
