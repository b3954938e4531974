//! Dense warping of a reference image onto the live viewpoint.
//!
//! Flow fields are sampled backward: the displacement stored at live pixel
//! `p = (x, y)` points to its source `p + d(p)` in the reference image. A flow
//! derived from a homography `H` (live -> reference pixel coordinates) is
//! therefore `d(p) = H p - p`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{dim_u32, put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result, Shape};
use crate::geometry::{estimate_homography_ransac, mutual_nearest_neighbors, Homography, MatchSet, RansacConfig};
use crate::imaging::{BinaryMask, Image};
use crate::par;
use crate::patch_features::DescriptorGrid;

const FLOW_MAGIC: &[u8; 4] = b"FLO1";
const FLOW_VERSION: u32 = 1;

/// Per-pixel displacement plus warp uncertainty in `[0, 1]` (1 = no reliable correspondence).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    displacement: Vec<[f32; 2]>,
    uncertainty: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, displacement: Vec<[f32; 2]>, uncertainty: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if displacement.len() != n || uncertainty.len() != n {
            return Err(Error::invalid(format!(
                "flow {width}x{height} needs {n} displacements and uncertainties, got {} and {}",
                displacement.len(),
                uncertainty.len()
            )));
        }
        if let Some(i) = displacement
            .iter()
            .position(|d| !d[0].is_finite() || !d[1].is_finite())
        {
            return Err(Error::invalid(format!("non-finite displacement at pixel {i}")));
        }
        if let Some(i) = uncertainty.iter().position(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::invalid(format!(
                "uncertainty {} at pixel {i} outside [0,1]",
                uncertainty[i]
            )));
        }
        Ok(Self {
            width,
            height,
            displacement,
            uncertainty,
        })
    }

    /// Zero displacement and zero uncertainty.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            displacement: vec![[0.0; 2]; width * height],
            uncertainty: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        Self {
            width,
            height,
            displacement: vec![[dx, dy]; width * height],
            uncertainty: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn displacement(&self) -> &[[f32; 2]] {
        &self.displacement
    }

    pub fn uncertainty(&self) -> &[f32] {
        &self.uncertainty
    }

    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        self.displacement[y * self.width + x]
    }
}

/// Bilinear sample of channel `c` at real position `(x, y)`, which must lie in
/// `[0, w-1] x [0, h-1]`.
#[inline]
fn bilinear(img: &Image, x: f64, y: f64, c: usize) -> f32 {
    let (w, h) = (img.width(), img.height());
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
    let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn in_bounds(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Resamples `reference` onto the live grid. Returns the warped image and a
/// validity mask that is 0 where the source position falls outside the
/// reference (those pixels are filled with 0).
pub fn warp_reference(reference: &Image, flow: &FlowField) -> Result<(Image, BinaryMask)> {
    let (w, h, c) = (reference.width(), reference.height(), reference.channels());
    if flow.width != w || flow.height != h {
        return Err(Error::ShapeMismatch {
            left: Shape::new(w, h, c),
            right: Shape::new(flow.width, flow.height, 2),
        });
    }
    let mut data = vec![0f32; w * h * c];
    let mut valid = vec![0u8; w * h];
    par::for_each_row(&mut data, w * c, |y, row| {
        for x in 0..w {
            let [dx, dy] = flow.displacement[y * w + x];
            let (sx, sy) = (x as f64 + dx as f64, y as f64 + dy as f64);
            if in_bounds(sx, sy, w, h) {
                for k in 0..c {
                    row[x * c + k] = bilinear(reference, sx, sy, k).clamp(0.0, 1.0);
                }
            }
        }
    });
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.displacement[y * w + x];
            valid[y * w + x] = in_bounds(x as f64 + dx as f64, y as f64 + dy as f64, w, h) as u8;
        }
    }
    let mut out = Image::new(w, h, c, data)?;
    out.frame_id = reference.frame_id.clone();
    out.pose = reference.pose;
    Ok((out, BinaryMask::new(w, h, valid)?))
}

/// Flow of a homography mapping live pixels to reference pixels:
/// `d(p) = H p - p`, with uncertainty 1 wherever `H p` leaves the image.
pub fn flow_from_homography(model: &Homography, width: usize, height: usize) -> Result<FlowField> {
    if model.inverse().is_none() {
        return Err(Error::invalid("homography is singular"));
    }
    let mut displacement = vec![[0f32; 2]; width * height];
    let mut uncertainty = vec![0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            match model.apply([x as f64, y as f64]) {
                Some([sx, sy]) if sx.is_finite() && sy.is_finite() => {
                    displacement[i] = [(sx - x as f64) as f32, (sy - y as f64) as f32];
                    if !in_bounds(sx, sy, width, height) {
                        uncertainty[i] = 1.0;
                    }
                }
                _ => {
                    // Maps to infinity: park the source outside the frame.
                    displacement[i] = [-(width as f32) - 1.0, 0.0];
                    uncertainty[i] = 1.0;
                }
            }
        }
    }
    FlowField::new(width, height, displacement, uncertainty)
}

pub fn encode_flow(flow: &FlowField) -> Result<Vec<u8>> {
    let n = flow.width * flow.height;
    let mut out = Vec::with_capacity(16 + n * 12);
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(&mut out, FLOW_VERSION);
    put_u32(&mut out, dim_u32("flow", "width", flow.width)?);
    put_u32(&mut out, dim_u32("flow", "height", flow.height)?);
    let flat: Vec<f32> = flow.displacement.iter().flat_map(|d| [d[0], d[1]]).collect();
    put_f32s(&mut out, &flat);
    put_f32s(&mut out, &flow.uncertainty);
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let mut r = ByteReader::new("flow", bytes);
    r.expect_magic(FLOW_MAGIC)?;
    r.expect_version(FLOW_VERSION)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let n = w.checked_mul(h).ok_or_else(|| r.error("dimensions overflow"))?;
    let flat = r.f32_vec(n.checked_mul(2).ok_or_else(|| r.error("dimensions overflow"))?)?;
    let uncertainty = r.f32_vec(n)?;
    r.finish()?;
    let displacement = flat.chunks_exact(2).map(|d| [d[0], d[1]]).collect();
    FlowField::new(w, h, displacement, uncertainty)
}

pub fn save_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flow(flow)?).map_err(|e| Error::io(path, e))
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes).map_err(|e| match e {
        Error::Format { format, offset, reason } => Error::Format {
            format,
            offset,
            reason: format!("{reason} ({})", path.display()),
        },
        other => other,
    })
}

struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                data.push(s * 0.25);
            }
        }
        Plane {
            width: w,
            height: h,
            data,
        }
    }
}

/// Zero-mean template cut from `plane` with its top-left corner at `(x0, y0)`.
fn template(plane: &Plane, x0: usize, y0: usize, size: usize) -> Vec<f32> {
    let mut t = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        t.extend_from_slice(&plane.data[y * plane.width + x0..y * plane.width + x0 + size]);
    }
    let mean = t.iter().sum::<f32>() / t.len() as f32;
    t.iter_mut().for_each(|v| *v -= mean);
    t
}

/// Zero-mean SSD between a zero-mean template and the window at `(x0, y0)`;
/// `None` when the window does not fit.
fn zssd(plane: &Plane, tmpl: &[f32], size: usize, x0: i64, y0: i64) -> Option<f64> {
    if x0 < 0 || y0 < 0 || x0 as usize + size > plane.width || y0 as usize + size > plane.height {
        return None;
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    let (mut cross, mut sum, mut sq) = (0f64, 0f64, 0f64);
    for (r, trow) in tmpl.chunks_exact(size).enumerate() {
        let row = &plane.data[(y0 + r) * plane.width + x0..][..size];
        for (&t, &v) in trow.iter().zip(row) {
            cross += (t * v) as f64;
            sum += v as f64;
            sq += (v * v) as f64;
        }
    }
    let t2: f64 = tmpl.iter().map(|&t| (t * t) as f64).sum();
    let n = (size * size) as f64;
    Some(t2 - 2.0 * cross + sq - sum * sum / n)
}

/// Exhaustive integer search over `[-radius, radius]^2` around `(gx, gy)`
/// (window top-left coordinates). Returns the best top-left and its cost grid.
fn search(plane: &Plane, tmpl: &[f32], size: usize, gx: i64, gy: i64, radius: i64) -> Option<(i64, i64)> {
    let mut best: Option<(f64, i64, i64)> = None;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if let Some(cost) = zssd(plane, tmpl, size, gx + dx, gy + dy) {
                if best.map_or(true, |b| cost < b.0) {
                    best = Some((cost, gx + dx, gy + dy));
                }
            }
        }
    }
    best.map(|(_, x, y)| (x, y))
}

/// Vertex offset of the parabola through three equally spaced costs.
fn parabola_offset(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if denom <= 1e-12 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Side of the square template around each live patch center, in pixels.
    pub template_size: usize,
    /// Search radius around the matched reference center, in pixels.
    pub search_radius: usize,
    pub ransac: RansacConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            template_size: 32,
            search_radius: 16,
            ransac: RansacConfig {
                reproj_threshold: 2.0,
                ..RansacConfig::default()
            },
        }
    }
}

/// Moves each match's reference point to the sub-pixel location that best
/// matches the live template (zero-mean SSD, coarse-to-fine).
pub fn refine_matches(live: &Image, reference: &Image, matches: &MatchSet, cfg: &AlignConfig) -> Result<MatchSet> {
    if (live.width(), live.height()) != (reference.width(), reference.height()) {
        return Err(Error::ShapeMismatch {
            left: Shape::new(live.width(), live.height(), live.channels()),
            right: Shape::new(reference.width(), reference.height(), reference.channels()),
        });
    }
    let size = cfg.template_size.max(4) & !1;
    let half = (size / 2) as i64;
    let live_full = Plane {
        width: live.width(),
        height: live.height(),
        data: live.luma(),
    };
    let ref_full = Plane {
        width: reference.width(),
        height: reference.height(),
        data: reference.luma(),
    };
    let (live_half, ref_half) = (live_full.half(), ref_full.half());
    let coarse_radius = (cfg.search_radius as i64 + 1) / 2;

    let refined = par::map_slice(&matches.pairs, |p| {
        let (lx, ly) = (p.live_pt[0].round() as i64, p.live_pt[1].round() as i64);
        let (rx, ry) = (p.ref_pt[0].round() as i64, p.ref_pt[1].round() as i64);
        let (tx, ty) = (lx - half, ly - half);
        if tx < 0 || ty < 0 || (tx + size as i64) as usize > live_full.width || (ty + size as i64) as usize > live_full.height {
            return None;
        }
        // Coarse level.
        let hs = size / 2;
        let (ctx, cty) = (tx / 2, ty / 2);
        if (ctx as usize + hs) > live_half.width || (cty as usize + hs) > live_half.height {
            return None;
        }
        let t_half = template(&live_half, ctx as usize, cty as usize, hs);
        let (cx, cy) = search(&ref_half, &t_half, hs, (rx - half) / 2, (ry - half) / 2, coarse_radius)?;
        // Fine level.
        let t_full = template(&live_full, tx as usize, ty as usize, size);
        let (fx, fy) = search(&ref_full, &t_full, size, cx * 2, cy * 2, 2)?;
        let cost = |x, y| zssd(&ref_full, &t_full, size, x, y);
        let mid = cost(fx, fy)?;
        let sx = match (cost(fx - 1, fy), cost(fx + 1, fy)) {
            (Some(l), Some(r)) => parabola_offset(l, mid, r),
            _ => 0.0,
        };
        let sy = match (cost(fx, fy - 1), cost(fx, fy + 1)) {
            (Some(u), Some(d)) => parabola_offset(u, mid, d),
            _ => 0.0,
        };
        let mut q = *p;
        q.ref_pt = [
            p.live_pt[0] + (fx - tx) as f64 + sx,
            p.live_pt[1] + (fy - ty) as f64 + sy,
        ];
        Some(q)
    });
    Ok(MatchSet {
        pairs: refined.into_iter().flatten().collect(),
    })
}

/// Homography fallback when no dense flow is available: patch matches between
/// live and reference, refined to sub-pixel accuracy, then verified by RANSAC.
/// Returns the live -> reference model, or `None` when verification is degenerate.
pub fn estimate_alignment(
    live: &Image,
    reference: &Image,
    live_desc: &DescriptorGrid,
    ref_desc: &DescriptorGrid,
    cfg: &AlignConfig,
) -> Result<Option<Homography>> {
    let matches = mutual_nearest_neighbors(live_desc, ref_desc)?;
    let refined = refine_matches(live, reference, &matches, cfg)?;
    let fit = estimate_homography_ransac(&refined, &cfg.ransac)?;
    Ok((!fit.degenerate).then_some(fit.model))
}

/// Summed-area table with a zero first row and column.
fn integral(values: impl Iterator<Item = f64>, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0f64; (w + 1) * (h + 1)];
    let mut it = values;
    for y in 0..h {
        let mut row = 0f64;
        for x in 0..w {
            row += it.next().unwrap_or(0.0);
            out[(y + 1) * (w + 1) + x + 1] = out[y * (w + 1) + x + 1] + row;
        }
    }
    out
}

fn box_sum(table: &[f64], w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    let s = w + 1;
    table[y1 * s + x1] - table[y0 * s + x1] - table[y1 * s + x0] + table[y0 * s + x0]
}

/// Variance floor for the local correlation, so flat windows do not divide by zero.
const NCC_VARIANCE_FLOOR: f64 = 2.5e-5;

/// Classical stand-in for a learned warp uncertainty: `1 - NCC` between the
/// live and warped-reference luma over a `(2r+1)^2` window, clamped to `[0,1]`,
/// and exactly 1 on invalid (out-of-bounds) pixels.
pub fn photometric_uncertainty(live: &Image, warped: &Image, validity: &BinaryMask, radius: usize) -> Result<Vec<f32>> {
    let (w, h) = (live.width(), live.height());
    if (warped.width(), warped.height()) != (w, h) || (validity.width(), validity.height()) != (w, h) {
        return Err(Error::ShapeMismatch {
            left: Shape::new(w, h, live.channels()),
            right: Shape::new(warped.width(), warped.height(), warped.channels()),
        });
    }
    let a = live.luma();
    let b = warped.luma();
    let sa = integral(a.iter().map(|&v| v as f64), w, h);
    let sb = integral(b.iter().map(|&v| v as f64), w, h);
    let saa = integral(a.iter().map(|&v| (v as f64).powi(2)), w, h);
    let sbb = integral(b.iter().map(|&v| (v as f64).powi(2)), w, h);
    let sab = integral(a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64), w, h);
    let mut out = vec![1f32; w * h];
    par::for_each_row(&mut out, w, |y, row| {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius + 1).min(h);
        for (x, u) in row.iter_mut().enumerate() {
            if !validity.get(y, x) {
                continue;
            }
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius + 1).min(w);
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let ma = box_sum(&sa, w, x0, y0, x1, y1) / n;
            let mb = box_sum(&sb, w, x0, y0, x1, y1) / n;
            let va = (box_sum(&saa, w, x0, y0, x1, y1) / n - ma * ma).max(0.0);
            let vb = (box_sum(&sbb, w, x0, y0, x1, y1) / n - mb * mb).max(0.0);
            let cov = box_sum(&sab, w, x0, y0, x1, y1) / n - ma * mb;
            let ncc = cov / ((va + NCC_VARIANCE_FLOOR) * (vb + NCC_VARIANCE_FLOOR)).sqrt();
            *u = (1.0 - ncc).clamp(0.0, 1.0) as f32;
        }
    });
    Ok(out)
}
