//! Patch grid tiling and per-patch descriptors.
//!
//! The built-in descriptor is a 4x4 grid of orientation histograms over the
//! patch gradients (8 bins each for the default 128 dimensions), L2-normalized.
//! Patches whose gradient energy is below [`MIN_GRADIENT_ENERGY`] get the zero
//! vector and are ignored by matching. Externally computed descriptors can be
//! injected through the `.pdsc` file format.

use std::f32::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{dim_u32, put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::par;

pub const MIN_GRADIENT_ENERGY: f64 = 1e-6;

/// Spatial sub-blocks per patch side.
const SUB_BLOCKS: usize = 4;

const PDSC_MAGIC: &[u8; 4] = b"PDSC";
const PDSC_VERSION: u32 = 1;

/// Accepted deviation from unit norm for descriptors loaded from outside.
const NORM_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub descriptor_dim: usize,
}

impl Default for PatchGridConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            stride: 32,
            descriptor_dim: 128,
        }
    }
}

impl PatchGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 {
            return Err(Error::invalid(format!(
                "patch_size must be >= 4, got {}",
                self.patch_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::invalid("descriptor_dim must be >= 1"));
        }
        Ok(())
    }

    /// Grid dimensions `(W_p, H_p)` for an image of the given size.
    pub fn grid_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if width < self.patch_size || height < self.patch_size {
            return Err(Error::invalid(format!(
                "image {width}x{height} is smaller than one {0}x{0} patch",
                self.patch_size
            )));
        }
        Ok((
            (width - self.patch_size) / self.stride + 1,
            (height - self.patch_size) / self.stride + 1,
        ))
    }

    fn orientation_bins(&self) -> Result<usize> {
        let cells = SUB_BLOCKS * SUB_BLOCKS;
        if self.descriptor_dim % cells != 0 {
            return Err(Error::invalid(format!(
                "built-in descriptor needs a dimension divisible by {cells}, got {}",
                self.descriptor_dim
            )));
        }
        Ok(self.descriptor_dim / cells)
    }
}

/// `W_p x H_p` grid of `dim`-dimensional descriptors with their patch-center pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    grid_w: usize,
    grid_h: usize,
    dim: usize,
    descriptors: Vec<f32>,
    centers: Vec<[u16; 2]>,
}

impl DescriptorGrid {
    /// Validates counts and that each descriptor is unit length or exactly zero.
    pub fn new(
        grid_w: usize,
        grid_h: usize,
        dim: usize,
        descriptors: Vec<f32>,
        centers: Vec<[u16; 2]>,
    ) -> Result<Self> {
        let cells = grid_w * grid_h;
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension must be >= 1"));
        }
        if descriptors.len() != cells * dim {
            return Err(Error::invalid(format!(
                "expected {} descriptor values for {grid_w}x{grid_h}x{dim}, got {}",
                cells * dim,
                descriptors.len()
            )));
        }
        if centers.len() != cells {
            return Err(Error::invalid(format!(
                "expected {cells} patch centers, got {}",
                centers.len()
            )));
        }
        for (idx, d) in descriptors.chunks_exact(dim).enumerate() {
            let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            let zero = d.iter().all(|&v| v == 0.0);
            if !zero && (!norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE) {
                return Err(Error::invalid(format!(
                    "descriptor {idx} has norm {norm}, expected 1 or an all-zero vector"
                )));
            }
        }
        Ok(Self {
            grid_w,
            grid_h,
            dim,
            descriptors,
            centers,
        })
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Descriptor of the cell at row-major index `idx`.
    pub fn descriptor(&self, idx: usize) -> &[f32] {
        &self.descriptors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn is_zero(&self, idx: usize) -> bool {
        self.descriptor(idx).iter().all(|&v| v == 0.0)
    }

    /// Patch center in pixels as `(x, y)`.
    pub fn center(&self, idx: usize) -> [u16; 2] {
        self.centers[idx]
    }

    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn centers(&self) -> &[[u16; 2]] {
        &self.centers
    }

    /// `(row, col)` of a row-major cell index.
    pub fn cell(&self, idx: usize) -> (usize, usize) {
        (idx / self.grid_w, idx % self.grid_w)
    }
}

/// Euclidean distance between two descriptors of equal dimension.
pub fn descriptor_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "descriptor dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_distance(a, b).sqrt())
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

/// Tiles `image` into patches and computes the built-in descriptor for each.
pub fn extract_descriptors(image: &Image, cfg: &PatchGridConfig) -> Result<DescriptorGrid> {
    let (grid_w, grid_h) = cfg.grid_dims(image.width(), image.height())?;
    let bins = cfg.orientation_bins()?;
    if image.width() > u16::MAX as usize || image.height() > u16::MAX as usize {
        return Err(Error::invalid("image too large for u16 patch centers"));
    }
    let luma = image.luma();
    let width = image.width();
    let per_cell = par::map_range(grid_w * grid_h, |idx| {
        let (row, col) = (idx / grid_w, idx % grid_w);
        let x0 = col * cfg.stride;
        let y0 = row * cfg.stride;
        patch_descriptor(&luma, width, x0, y0, cfg.patch_size, bins)
    });
    let centers = (0..grid_w * grid_h)
        .map(|idx| {
            let (row, col) = (idx / grid_w, idx % grid_w);
            let half = cfg.patch_size / 2;
            [
                (col * cfg.stride + half) as u16,
                (row * cfg.stride + half) as u16,
            ]
        })
        .collect();
    Ok(DescriptorGrid {
        grid_w,
        grid_h,
        dim: cfg.descriptor_dim,
        descriptors: per_cell.concat(),
        centers,
    })
}

/// Orientation-histogram descriptor of one patch. Only pixels inside the
/// patch footprint are read; gradients are clamped at the footprint border.
fn patch_descriptor(
    luma: &[f32],
    width: usize,
    x0: usize,
    y0: usize,
    size: usize,
    bins: usize,
) -> Vec<f32> {
    let mut hist = vec![0f64; SUB_BLOCKS * SUB_BLOCKS * bins];
    let at = |x: usize, y: usize| luma[y * width + x];
    let (x_last, y_last) = (x0 + size - 1, y0 + size - 1);
    let mut energy = 0f64;
    for y in y0..=y_last {
        let by = (y - y0) * SUB_BLOCKS / size;
        let (yu, yd) = (y.saturating_sub(1).max(y0), (y + 1).min(y_last));
        for x in x0..=x_last {
            let (xl, xr) = (x.saturating_sub(1).max(x0), (x + 1).min(x_last));
            let gx = at(xr, y) - at(xl, y);
            let gy = at(x, yd) - at(x, yu);
            let mag2 = (gx as f64) * (gx as f64) + (gy as f64) * (gy as f64);
            if mag2 == 0.0 {
                continue;
            }
            energy += mag2;
            let mag = mag2.sqrt();
            let bx = (x - x0) * SUB_BLOCKS / size;
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += TAU;
            }
            let pos = theta as f64 / TAU as f64 * bins as f64;
            let b0 = (pos.floor() as usize) % bins;
            let frac = pos - pos.floor();
            let base = (by * SUB_BLOCKS + bx) * bins;
            hist[base + b0] += mag * (1.0 - frac);
            hist[base + (b0 + 1) % bins] += mag * frac;
        }
    }
    if energy < MIN_GRADIENT_ENERGY {
        return vec![0.0; hist.len()];
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    hist.iter().map(|v| (v / norm) as f32).collect()
}

pub fn encode_pdsc(grid: &DescriptorGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + grid.descriptors.len() * 4 + grid.len() * 4);
    out.extend_from_slice(PDSC_MAGIC);
    put_u32(&mut out, PDSC_VERSION);
    put_u32(&mut out, dim_u32("pdsc", "grid width", grid.grid_w)?);
    put_u32(&mut out, dim_u32("pdsc", "grid height", grid.grid_h)?);
    put_u32(&mut out, dim_u32("pdsc", "descriptor dim", grid.dim)?);
    put_f32s(&mut out, &grid.descriptors);
    for [x, y] in &grid.centers {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_pdsc(bytes: &[u8]) -> Result<DescriptorGrid> {
    let mut r = ByteReader::new("pdsc", bytes);
    r.expect_magic(PDSC_MAGIC)?;
    r.expect_version(PDSC_VERSION)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let d = r.u32()? as usize;
    let cells = w.checked_mul(h).ok_or_else(|| r.error("grid overflows"))?;
    let count = cells.checked_mul(d).ok_or_else(|| r.error("grid overflows"))?;
    let descriptors = r.f32_vec(count)?;
    let mut centers = Vec::with_capacity(cells);
    for _ in 0..cells {
        centers.push([r.u16()?, r.u16()?]);
    }
    r.finish()?;
    DescriptorGrid::new(w, h, d, descriptors, centers)
}

pub fn write_pdsc(grid: &DescriptorGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pdsc(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_pdsc(path: impl AsRef<Path>) -> Result<DescriptorGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pdsc(&bytes)
}
