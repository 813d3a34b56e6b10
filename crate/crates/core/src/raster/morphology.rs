use serde::{Deserialize, Serialize};

use super::{BinaryMask, RasterError};
use crate::geometry::BBox;

/// Square structuring element (odd side, center set) applied `iterations`
/// times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    rows: Vec<Vec<bool>>,
    pub iterations: u32,
}

impl StructuringElement {
    /// The 5x5 ellipse (21 set bits):
    ///
    /// ```text
    /// .###.
    /// #####
    /// #####
    /// #####
    /// .###.
    /// ```
    pub fn ellipse5(iterations: u32) -> Self {
        let pattern = ["01110", "11111", "11111", "11111", "01110"];
        Self::from_pattern(&pattern, iterations).expect("ellipse pattern is well formed")
    }

    /// Builds an element from rows of `0`/`1` characters.
    pub fn from_pattern(rows: &[&str], iterations: u32) -> Result<Self, RasterError> {
        let n = rows.len();
        let parsed: Vec<Vec<bool>> = rows.iter().map(|r| r.chars().map(|c| c == '1').collect()).collect();
        if n.is_multiple_of(2) || parsed.iter().any(|r| r.len() != n) {
            return Err(RasterError::InvalidKernel(format!("kernel must be odd and square, got {n} rows")));
        }
        if !parsed[n / 2][n / 2] {
            return Err(RasterError::InvalidKernel("kernel center must be set".into()));
        }
        Ok(Self { rows: parsed, iterations })
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn radius(&self) -> i64 {
        (self.rows.len() / 2) as i64
    }

    pub fn set_count(&self) -> usize {
        self.rows.iter().flatten().filter(|&&b| b).count()
    }

    pub fn is_set(&self, dx: i64, dy: i64) -> bool {
        let r = self.radius();
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        self.rows[(dy + r) as usize][(dx + r) as usize]
    }

    /// Set offsets `(dx, dy)` relative to the center.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = self.radius();
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if self.is_set(dx, dy) {
                    out.push((dx, dy));
                }
            }
        }
        out
    }

    /// Per kernel row: contiguous `dx` runs `(lo, hi)` inclusive.
    fn row_runs(&self) -> Vec<(i64, Vec<(i64, i64)>)> {
        let r = self.radius();
        (-r..=r)
            .map(|dy| {
                let mut runs = Vec::new();
                let mut start = None;
                for dx in -r..=r + 1 {
                    match (self.is_set(dx, dy), start) {
                        (true, None) => start = Some(dx),
                        (false, Some(s)) => {
                            runs.push((s, dx - 1));
                            start = None;
                        }
                        _ => {}
                    }
                }
                (dy, runs)
            })
            .filter(|(_, runs)| !runs.is_empty())
            .collect()
    }
}

/// Binary dilation; pixels outside the image count as unset.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let runs = se.row_runs();
    let mut out = mask.clone();
    for _ in 0..se.iterations {
        out = dilate_once(&out, &runs, se.radius());
    }
    out
}

fn dilate_once(mask: &BinaryMask, runs: &[(i64, Vec<(i64, i64)>)], radius: i64) -> BinaryMask {
    let Some(src) = mask.bounding_box() else {
        return mask.clone();
    };
    let dims = mask.dims();
    let w = dims.width as i64;
    let bits = mask.bits();

    // prefix[(y - src.y) * (w + 1) + k] = set pixels in row y, columns [0, k)
    let stride = (w + 1) as usize;
    let mut prefix = vec![0u32; src.height as usize * stride];
    for (ry, y) in (src.y..src.bottom()).enumerate() {
        let row = &bits[(y * w) as usize..((y + 1) * w) as usize];
        let p = &mut prefix[ry * stride..(ry + 1) * stride];
        for (x, &b) in row.iter().enumerate() {
            p[x + 1] = p[x] + b as u32;
        }
    }

    let window =
        BBox { x: src.x - radius, y: src.y - radius, width: src.width + 2 * radius, height: src.height + 2 * radius }
            .clamp_to(dims);

    let mut out = bits.to_vec();
    for y in window.y..window.bottom() {
        for x in window.x..window.right() {
            let idx = (y * w + x) as usize;
            if out[idx] {
                continue;
            }
            let hit = runs.iter().any(|(dy, row_runs)| {
                let sy = y - dy;
                if sy < src.y || sy >= src.bottom() {
                    return false;
                }
                let p = &prefix[(sy - src.y) as usize * stride..];
                row_runs.iter().any(|&(lo, hi)| {
                    let a = (x - hi).max(0);
                    let b = (x - lo).min(w - 1);
                    a <= b && p[(b + 1) as usize] > p[a as usize]
                })
            });
            out[idx] = hit;
        }
    }
    BinaryMask::from_bits(dims, out).expect("dilation preserves buffer size")
}
