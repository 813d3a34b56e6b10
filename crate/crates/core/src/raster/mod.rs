//! Binary masks, morphology, region blur and the per-image mask registry.

mod blur;
mod mask;
mod morphology;
mod registry;

use thiserror::Error;

pub use blur::{black_out, composite, gaussian_blur_region, gaussian_kernel};
pub use mask::{BinaryMask, Rle};
pub use morphology::{dilate, StructuringElement};
pub use registry::{MaskCategory, MaskEntry, MaskRegistry};

use crate::geometry::{BBox, GeometryError, ImageDims};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("mask dimensions differ: {left} vs {right}")]
    DimsMismatch { left: ImageDims, right: ImageDims },
    #[error("bitmap has {got} entries, expected {expected}")]
    BufferSize { expected: u64, got: usize },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("box {bbox} is not inside image {dims}")]
    OutOfBounds { bbox: BBox, dims: ImageDims },
    #[error("crop {crop} does not match local mask {mask}")]
    CropMismatch { crop: BBox, mask: ImageDims },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `|candidate ∩ protected| / |candidate|`, zero for an empty candidate.
pub fn overlap_fraction(candidate: &BinaryMask, protected: &BinaryMask) -> Result<f64, RasterError> {
    let inter = candidate.intersection_count(protected)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    Ok(inter as f64 / candidate.pixel_count() as f64)
}
