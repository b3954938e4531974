//! Pixel-wise change scoring with a classical differencing backend, attention
//! gating and uncertainty fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};
use crate::imaging::{hadamard, BinaryMask, Image, Raster, ScoreMap};

/// How the pixel-resolution attention mask gates the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Zero the score where the mask is 1 (verified static background).
    #[default]
    SuppressMatched,
    /// Zero the score where the mask is 0.
    SuppressUnmatched,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub gate_mode: GateMode,
    pub smoothing_radius: usize,
    /// Fixed decision threshold; `None` means pick the best-F1 threshold of the sweep.
    pub decision_threshold: Option<f32>,
    pub use_uncertainty: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            gate_mode: GateMode::SuppressMatched,
            smoothing_radius: 2,
            decision_threshold: None,
            use_uncertainty: true,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.decision_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("decision threshold {t} outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn same_plane(a: Shape, b: Shape) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch { left: a, right: b });
    }
    Ok(())
}

/// Mean of `values` over a `(2r+1)^2` window clipped to the image.
pub fn box_mean(values: &[f32], width: usize, height: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return values.to_vec();
    }
    let stride = width + 1;
    let mut table = vec![0f64; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0f64;
        for x in 0..width {
            row += values[y * width + x] as f64;
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(width));
            let sum = table[y1 * stride + x1] - table[y0 * stride + x1] - table[y1 * stride + x0]
                + table[y0 * stride + x0];
            out.push((sum / ((x1 - x0) * (y1 - y0)) as f64) as f32);
        }
    }
    out
}

/// Mean absolute channel difference, zero on invalid pixels, box-smoothed and
/// clamped to `[0, 1]`.
pub fn difference_map(live: &Image, warped_ref: &Image, validity: &BinaryMask, cfg: &DetectConfig) -> Result<ScoreMap> {
    if live.shape() != warped_ref.shape() {
        return Err(Error::ShapeMismatch {
            left: live.shape(),
            right: warped_ref.shape(),
        });
    }
    same_plane(live.shape(), validity.shape())?;
    let c = live.channels();
    let raw: Vec<f32> = live
        .data()
        .chunks_exact(c)
        .zip(warped_ref.data().chunks_exact(c))
        .zip(validity.data())
        .map(|((a, b), &ok)| {
            if ok == 0 {
                return 0.0;
            }
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / c as f32
        })
        .collect();
    let smooth = box_mean(&raw, live.width(), live.height(), cfg.smoothing_radius);
    ScoreMap::new(
        live.width(),
        live.height(),
        smooth.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Post-processing merge: `out[i,j] = score[i,j] * uncertainty[i,j]`.
pub fn merge_uncertainty(output_old: &ScoreMap, uncertainty: &ScoreMap) -> Result<ScoreMap> {
    hadamard(output_old, uncertainty)
}

pub fn gate_with_mask(score: &ScoreMap, mask: &BinaryMask, mode: GateMode) -> Result<ScoreMap> {
    same_plane(score.shape(), mask.shape())?;
    match mode {
        GateMode::SuppressMatched => hadamard(score, &mask.complement()),
        GateMode::SuppressUnmatched => hadamard(score, mask),
        GateMode::Off => Ok(score.clone()),
    }
}

/// 1 where `score >= tau`.
pub fn threshold(score: &ScoreMap, tau: f32) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0,1]")));
    }
    BinaryMask::new(
        score.width(),
        score.height(),
        score.data().iter().map(|&s| (s >= tau) as u8).collect(),
    )
}
