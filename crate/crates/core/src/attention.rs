//! Attention mask generation over a reference sequence and its application to
//! feature maps.
//!
//! For every reference frame the live and reference patch descriptors are
//! matched (mutual nearest neighbors), verified with a RANSAC homography and
//! binarized; the per-frame masks are intersected cell-wise, starting from an
//! all-ones grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{estimate_homography_ransac, mutual_nearest_neighbors, InlierSet, RansacConfig};
use crate::imaging::{self, hadamard, resize_nearest, BinaryMask, FeatureMap, Image};
use crate::par;
use crate::patch_features::{extract_descriptors, DescriptorGrid, PatchGridConfig};

/// Which value a geometrically verified cell receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Verified (static) cells are 1.
    #[default]
    InlierOne,
    /// Verified cells are 0; everything else is 1.
    InlierZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskGenConfig {
    /// Half-window length: frames `[t - T, t + T]` are used.
    pub half_window: usize,
    pub patch: PatchGridConfig,
    pub ransac: RansacConfig,
    pub polarity: Polarity,
    /// Skip frames whose RANSAC result is degenerate instead of letting them
    /// contribute an empty inlier set.
    pub skip_degenerate_frames: bool,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        Self {
            half_window: 10,
            patch: PatchGridConfig::default(),
            ransac: RansacConfig::default(),
            polarity: Polarity::InlierOne,
            skip_degenerate_frames: true,
        }
    }
}

impl MaskGenConfig {
    pub fn max_frames(&self) -> usize {
        2 * self.half_window + 1
    }
}

/// Per-cell indicator of the live cells of `inliers`, under `polarity`.
pub fn binarize(inliers: &InlierSet, grid_w: usize, grid_h: usize, polarity: Polarity) -> Result<BinaryMask> {
    let mut mask = BinaryMask::zeros(grid_w, grid_h);
    for p in &inliers.inliers {
        let (row, col) = p.live_cell;
        if row >= grid_h || col >= grid_w {
            return Err(Error::invalid(format!(
                "inlier cell ({row}, {col}) outside {grid_w}x{grid_h} grid"
            )));
        }
        mask.set(row, col, true);
    }
    Ok(match polarity {
        Polarity::InlierOne => mask,
        Polarity::InlierZero => mask.complement(),
    })
}

/// Stable 64-bit RANSAC seed for a frame: FNV-1a over the id, mixed with the base seed.
pub fn frame_seed(base_seed: u64, frame_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in frame_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(base_seed ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// What one reference frame contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVerification {
    pub frame_id: String,
    pub matches: usize,
    pub inliers: InlierSet,
    pub skipped: bool,
    /// The frame's binarized contribution (all ones when skipped).
    pub mask: BinaryMask,
}

/// Match and verify one reference frame against the live descriptors.
pub fn verify_frame(
    live: &DescriptorGrid,
    reference: &DescriptorGrid,
    frame_id: &str,
    cfg: &MaskGenConfig,
) -> Result<FrameVerification> {
    let matches = mutual_nearest_neighbors(live, reference)?;
    let ransac = RansacConfig {
        rng_seed: frame_seed(cfg.ransac.rng_seed, frame_id),
        ..cfg.ransac
    };
    let inliers = estimate_homography_ransac(&matches, &ransac)?;
    let skipped = inliers.degenerate && cfg.skip_degenerate_frames;
    let mask = if skipped {
        log::warn!(
            "frame {frame_id}: degenerate geometric verification ({} matches), skipped",
            matches.len()
        );
        BinaryMask::ones(live.grid_w(), live.grid_h())
    } else {
        binarize(&inliers, live.grid_w(), live.grid_h(), cfg.polarity)?
    };
    Ok(FrameVerification {
        frame_id: frame_id.to_string(),
        matches: matches.len(),
        inliers,
        skipped,
        mask,
    })
}

/// Attention mask from precomputed descriptors; `refs` pairs frame ids with grids.
pub fn attention_mask_from_descriptors(
    live: &DescriptorGrid,
    refs: &[(&str, &DescriptorGrid)],
    cfg: &MaskGenConfig,
) -> Result<(BinaryMask, Vec<FrameVerification>)> {
    if refs.is_empty() {
        return Err(Error::invalid("reference sequence is empty"));
    }
    if refs.len() > cfg.max_frames() {
        return Err(Error::invalid(format!(
            "{} reference frames exceed the window of {} (T = {})",
            refs.len(),
            cfg.max_frames(),
            cfg.half_window
        )));
    }
    let frames = par::map_slice(refs, |(id, grid)| verify_frame(live, grid, id, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if frames.iter().all(|f| f.skipped) {
        log::warn!("every frame in the window is degenerate; the mask stays all ones");
    }
    let mut mask = BinaryMask::ones(live.grid_w(), live.grid_h());
    for f in &frames {
        mask = mask.intersect(&f.mask)?;
    }
    Ok((mask, frames))
}

/// Attention mask for `live` against the reference sequence `refs`, using the
/// built-in descriptor. Per-frame RANSAC seeds are keyed by frame id, so the
/// result does not depend on the order of `refs`.
pub fn generate_attention_mask(live: &Image, refs: &[Image], cfg: &MaskGenConfig) -> Result<BinaryMask> {
    if refs.is_empty() {
        return Err(Error::invalid("reference sequence is empty"));
    }
    let live_desc = extract_descriptors(live, &cfg.patch)?;
    let ref_desc = par::map_slice(refs, |r| extract_descriptors(r, &cfg.patch))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&str, &DescriptorGrid)> = refs
        .iter()
        .zip(&ref_desc)
        .map(|(r, d)| (r.frame_id.as_str(), d))
        .collect();
    attention_mask_from_descriptors(&live_desc, &pairs, cfg).map(|(mask, _)| mask)
}

/// Masks every channel of `fmap` with `mask`: `out[i,j,k] = fmap[i,j,k] * mask[i,j]`.
pub fn apply_mask(fmap: &FeatureMap, mask: &BinaryMask) -> Result<FeatureMap> {
    hadamard(fmap, mask)
}

/// File form of [`apply_mask`]: the mask PGM is resized to the map's grid first.
pub fn apply_mask_files(
    fmap_in: impl AsRef<Path>,
    mask_pgm: impl AsRef<Path>,
    fmap_out: impl AsRef<Path>,
) -> Result<()> {
    let fmap = imaging::read_fmap(fmap_in)?;
    let mask = imaging::load_mask_pgm(mask_pgm)?;
    let mask = resize_nearest(&mask, fmap.width(), fmap.height())?;
    imaging::write_fmap(&apply_mask(&fmap, &mask)?, fmap_out)
}
