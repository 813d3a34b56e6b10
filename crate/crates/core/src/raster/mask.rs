use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::RasterError;
use crate::geometry::{BBox, ImageDims};

/// Row-major bitmap with a cached set-pixel count.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: ImageDims,
    bits: Vec<bool>,
    count: u64,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask").field("dims", &self.dims).field("pixel_count", &self.count).finish()
    }
}

impl BinaryMask {
    pub fn empty(dims: ImageDims) -> Self {
        Self { dims, bits: vec![false; dims.pixel_count() as usize], count: 0 }
    }

    pub fn full(dims: ImageDims) -> Self {
        Self { dims, bits: vec![true; dims.pixel_count() as usize], count: dims.pixel_count() }
    }

    pub fn from_bits(dims: ImageDims, bits: Vec<bool>) -> Result<Self, RasterError> {
        if bits.len() as u64 != dims.pixel_count() {
            return Err(RasterError::BufferSize { expected: dims.pixel_count(), got: bits.len() });
        }
        let count = bits.iter().filter(|&&b| b).count() as u64;
        Ok(Self { dims, bits, count })
    }

    pub fn from_fn(dims: ImageDims, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(dims.pixel_count() as usize);
        for y in 0..dims.height {
            for x in 0..dims.width {
                bits.push(f(x, y));
            }
        }
        let count = bits.iter().filter(|&&b| b).count() as u64;
        Self { dims, bits, count }
    }

    /// Rectangular mask. The box is clamped to the image first.
    pub fn from_bbox(b: &BBox, dims: ImageDims) -> Self {
        let mut m = Self::empty(dims);
        m.fill_rect(&b.clamp_to(dims));
        m
    }

    pub(crate) fn fill_rect(&mut self, b: &BBox) {
        let b = b.clamp_to(self.dims);
        let w = self.dims.width as usize;
        for y in b.y..b.bottom() {
            let row = y as usize * w;
            for x in b.x..b.right() {
                let px = &mut self.bits[row + x as usize];
                if !*px {
                    *px = true;
                    self.count += 1;
                }
            }
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn pixel_count(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn coverage(&self) -> f64 {
        self.count as f64 / self.dims.pixel_count() as f64
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.dims.width && y < self.dims.height && self.bits[self.index(x, y)]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.dims.width as usize + x as usize
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), RasterError> {
        if self.dims != other.dims {
            return Err(RasterError::DimsMismatch { left: self.dims, right: other.dims });
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<Self, RasterError> {
        self.check_dims(other)?;
        let bits: Vec<bool> = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        let count = bits.iter().filter(|&&b| b).count() as u64;
        Ok(Self { dims: self.dims, bits, count })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self, RasterError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<Self, RasterError> {
        self.zip_with(other, |a, b| a && b)
    }

    /// Pixels of `self` that are not in `other`.
    pub fn subtract(&self, other: &BinaryMask) -> Result<Self, RasterError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Self {
        let bits: Vec<bool> = self.bits.iter().map(|b| !b).collect();
        Self { dims: self.dims, bits, count: self.dims.pixel_count() - self.count }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<u64, RasterError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count() as u64)
    }

    /// In-place union, used when accumulating many masks.
    pub fn union_in_place(&mut self, other: &BinaryMask) -> Result<(), RasterError> {
        self.check_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            if b && !*a {
                *a = true;
                self.count += 1;
            }
        }
        Ok(())
    }

    /// Tight box around the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        if self.count == 0 {
            return None;
        }
        let w = self.dims.width as usize;
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % w, i / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
        Some(BBox { x: x1 as i64, y: y1 as i64, width: (x2 - x1 + 1) as i64, height: (y2 - y1 + 1) as i64 })
    }

    /// Places a crop-local mask into a full-size canvas at the crop origin.
    pub fn paste_local(local: &BinaryMask, crop: &BBox, full: ImageDims) -> Result<Self, RasterError> {
        let ld = local.dims();
        if crop.width != ld.width as i64 || crop.height != ld.height as i64 {
            return Err(RasterError::CropMismatch { crop: *crop, mask: ld });
        }
        if !crop.is_within(full) {
            return Err(RasterError::OutOfBounds { bbox: *crop, dims: full });
        }
        let mut out = Self::empty(full);
        let fw = full.width as usize;
        for ly in 0..ld.height {
            for lx in 0..ld.width {
                if local.get(lx, ly) {
                    let idx = (crop.y as usize + ly as usize) * fw + crop.x as usize + lx as usize;
                    out.bits[idx] = true;
                }
            }
        }
        out.count = local.count;
        Ok(out)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.dims.width, self.dims.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    /// Any non-zero pixel is set.
    pub fn from_gray_image(img: &GrayImage) -> Result<Self, RasterError> {
        let dims = ImageDims::new(img.width(), img.height())?;
        Ok(Self::from_fn(dims, |x, y| img.get_pixel(x, y)[0] != 0))
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle { size: [self.dims.height, self.dims.width], counts }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self, RasterError> {
        let dims = ImageDims::new(rle.size[1], rle.size[0])?;
        let mut bits = Vec::with_capacity(dims.pixel_count() as usize);
        let mut value = false;
        for &c in &rle.counts {
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Self::from_bits(dims, bits)
    }
}

/// Row-major run-length encoding: `counts` alternate between unset and set
/// runs, always starting with an unset run (possibly zero-length).
/// `size` is `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}
