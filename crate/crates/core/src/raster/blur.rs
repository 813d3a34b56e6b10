use image::RgbImage;

use super::{BinaryMask, RasterError};
use crate::geometry::{BBox, ImageDims};

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>, RasterError> {
    if size.is_multiple_of(2) {
        return Err(RasterError::InvalidKernel(format!("blur kernel size must be odd, got {size}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(RasterError::InvalidKernel(format!("sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Reflect-101 index into `[0, n)` (`dcb|abcd|cba`).
fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur restricted to `region`.
///
/// Only pixels inside the region are read or written; the region border is
/// handled by reflecting inside the region, so nothing outside leaks in and
/// nothing outside changes.
pub fn gaussian_blur_region(
    image: &RgbImage,
    region: &BBox,
    sigma: f64,
    kernel: usize,
) -> Result<RgbImage, RasterError> {
    let weights = gaussian_kernel(sigma, kernel)?;
    let dims = ImageDims::new(image.width(), image.height())?;
    if !region.is_within(dims) {
        return Err(RasterError::OutOfBounds { bbox: *region, dims });
    }
    let mut out = image.clone();
    if region.is_degenerate() {
        return Ok(out);
    }
    let (rw, rh) = (region.width, region.height);
    let r = (kernel / 2) as i64;
    let (ox, oy) = (region.x as u32, region.y as u32);

    let mut horiz = vec![[0f64; 3]; (rw * rh) as usize];
    for y in 0..rh {
        for x in 0..rw {
            let mut acc = [0f64; 3];
            for (k, w) in weights.iter().enumerate() {
                let sx = reflect(x + k as i64 - r, rw) as u32;
                let p = image.get_pixel(ox + sx, oy + y as u32);
                for c in 0..3 {
                    acc[c] += w * p[c] as f64;
                }
            }
            horiz[(y * rw + x) as usize] = acc;
        }
    }
    for y in 0..rh {
        for x in 0..rw {
            let mut acc = [0f64; 3];
            for (k, w) in weights.iter().enumerate() {
                let sy = reflect(y + k as i64 - r, rh) as i64;
                let p = horiz[(sy * rw + x) as usize];
                for c in 0..3 {
                    acc[c] += w * p[c];
                }
            }
            let px = out.get_pixel_mut(ox + x as u32, oy + y as u32);
            for c in 0..3 {
                px[c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

fn check_dims(image: &RgbImage, mask: &BinaryMask) -> Result<(), RasterError> {
    let d = ImageDims::new(image.width(), image.height())?;
    if d != mask.dims() {
        return Err(RasterError::DimsMismatch { left: d, right: mask.dims() });
    }
    Ok(())
}

/// Sets masked pixels to black.
pub fn black_out(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, RasterError> {
    check_dims(image, mask)?;
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *px = image::Rgb([0, 0, 0]);
        }
    }
    Ok(out)
}

/// Copies `patch` into `base` wherever `mask` is set.
pub fn composite(base: &RgbImage, patch: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, RasterError> {
    check_dims(base, mask)?;
    check_dims(patch, mask)?;
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *px = *patch.get_pixel(x, y);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(8.0, 15).unwrap();
        assert_eq!(k.len(), 15);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gaussian_kernel(8.0, 14).is_err());
        assert!(gaussian_kernel(0.0, 15).is_err());
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn constant_region_unchanged() {
        let img = RgbImage::from_pixel(40, 30, Rgb([90, 150, 210]));
        let out = gaussian_blur_region(&img, &BBox::new(5, 5, 20, 12).unwrap(), 8.0, 15).unwrap();
        for (a, b) in img.pixels().zip(out.pixels()) {
            for c in 0..3 {
                assert!((a[c] as i32 - b[c] as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(gaussian_blur_region(&img, &BBox::new(0, 0, 4, 4).unwrap(), 8.0, 4).is_err());
        assert!(gaussian_blur_region(&img, &BBox::new(0, 0, 5, 4).unwrap(), 8.0, 5).is_err());
    }

    #[test]
    fn black_out_counts() {
        let img = RgbImage::from_pixel(6, 6, Rgb([1, 2, 3]));
        let d = ImageDims::new(6, 6).unwrap();
        assert_eq!(black_out(&img, &BinaryMask::empty(d)).unwrap(), img);
        let full = black_out(&img, &BinaryMask::full(d)).unwrap();
        assert!(full.pixels().all(|p| p.0 == [0, 0, 0]));
        let m = BinaryMask::from_bbox(&BBox::new(1, 1, 2, 3).unwrap(), d);
        let out = black_out(&img, &m).unwrap();
        assert_eq!(out.pixels().filter(|p| p.0 == [0, 0, 0]).count() as u64, m.pixel_count());
    }
}
