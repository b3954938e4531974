//! Grid types shared by every stage of the pipeline.
//!
//! All grids are row-major. Element `(i, j, k)` (row, column, channel) lives at
//! flat index `(i * width + j) * channels + k`.

mod io;

pub use io::{
    decode_fmap, encode_fmap, load_image, load_mask_pgm, read_fmap, save_gray_pgm, save_mask_pgm,
    save_png, save_score_pgm, write_fmap,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};

/// Planar robot pose: position in meters, heading in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }
}

/// Read access shared by every grid type, used by the element-wise algebra.
pub trait Raster: Sized {
    fn shape(&self) -> Shape;

    /// Value at a flat row-major index.
    fn sample(&self, idx: usize) -> f32;

    /// A grid of the same type and shape (and metadata) holding `samples`.
    fn with_samples(&self, samples: Vec<f32>) -> Result<Self>;
}

/// Element-wise product `out[i,j,k] = a[i,j,k] * b[i,j]`.
///
/// `b` must be single channel and is broadcast across the channels of `a`.
pub fn hadamard<A: Raster, B: Raster>(a: &A, b: &B) -> Result<A> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.width != sb.width || sa.height != sb.height || sb.channels != 1 {
        return Err(Error::ShapeMismatch {
            left: sa,
            right: sb,
        });
    }
    let c = sa.channels;
    let out = (0..sa.len()).map(|idx| a.sample(idx) * b.sample(idx / c)).collect();
    a.with_samples(out)
}

fn check_len(shape: Shape, len: usize) -> Result<()> {
    if shape.len() != len {
        return Err(Error::invalid(format!(
            "data length {len} does not match shape {shape} ({} elements)",
            shape.len()
        )));
    }
    Ok(())
}

fn check_unit_range(what: &str, data: &[f32]) -> Result<()> {
    if let Some((idx, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::invalid(format!(
            "{what} value {v} at index {idx} outside [0,1]"
        )));
    }
    Ok(())
}

/// Intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pub frame_id: String,
    pub pose: Option<Pose>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        check_len(Shape::new(width, height, channels), data.len())?;
        check_unit_range("intensity", &data)?;
        Ok(Self {
            width,
            height,
            channels,
            data,
            frame_id: String::new(),
            pose: None,
        })
    }

    /// Single-channel image from a per-pixel function of `(x, y)`; values are clamped to `[0,1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
            frame_id: String::new(),
            pose: None,
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    pub fn with_frame_id(mut self, id: impl Into<String>) -> Self {
        self.frame_id = id.into();
        self
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = Some(pose);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Luma plane (0.299 R + 0.587 G + 0.114 B for color input).
    pub fn luma(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }
}

impl Raster for Image {
    fn shape(&self) -> Shape {
        Shape::new(self.width, self.height, self.channels)
    }

    fn sample(&self, idx: usize) -> f32 {
        self.data[idx]
    }

    fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        let mut out = Image::new(self.width, self.height, self.channels, samples)?;
        out.frame_id = self.frame_id.clone();
        out.pose = self.pose;
        Ok(out)
    }
}

/// Dense `W x H x C` tensor of real values, e.g. an intermediate network layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_len(Shape::new(width, height, channels), data.len())?;
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }
}

impl Raster for FeatureMap {
    fn shape(&self) -> Shape {
        Shape::new(self.width, self.height, self.channels)
    }

    fn sample(&self, idx: usize) -> f32 {
        self.data[idx]
    }

    fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        FeatureMap::new(self.width, self.height, self.channels, samples)
    }
}

/// Grid of `{0, 1}` cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(Shape::plane(width, height), data.len())?;
        if let Some(idx) = data.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "mask value {} at index {idx} is not binary",
                data[idx]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value as u8; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, true)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Cell-wise AND, i.e. the Hadamard product of two binary grids.
    pub fn intersect(&self, other: &BinaryMask) -> Result<Self> {
        hadamard(self, other)
    }

    /// True when every cell of `self` is `<=` the same cell of `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }
}

impl Raster for BinaryMask {
    fn shape(&self) -> Shape {
        Shape::plane(self.width, self.height)
    }

    fn sample(&self, idx: usize) -> f32 {
        self.data[idx] as f32
    }

    fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        let data = samples
            .into_iter()
            .enumerate()
            .map(|(idx, v)| {
                if v == 0.0 {
                    Ok(0)
                } else if v == 1.0 {
                    Ok(1)
                } else {
                    Err(Error::invalid(format!("non-binary value {v} at index {idx}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        BinaryMask::new(self.width, self.height, data)
    }
}

/// Per-pixel change probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(Shape::plane(width, height), data.len())?;
        check_unit_range("score", &data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Lossless single-channel tensor view, for `.fmap` persistence.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }

    pub fn from_feature_map(fmap: &FeatureMap) -> Result<Self> {
        if fmap.channels != 1 {
            return Err(Error::ShapeMismatch {
                left: fmap.shape(),
                right: Shape::plane(fmap.width, fmap.height),
            });
        }
        ScoreMap::new(fmap.width, fmap.height, fmap.data.clone())
    }
}

impl Raster for ScoreMap {
    fn shape(&self) -> Shape {
        Shape::plane(self.width, self.height)
    }

    fn sample(&self, idx: usize) -> f32 {
        self.data[idx]
    }

    fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        ScoreMap::new(self.width, self.height, samples)
    }
}

/// Nearest-neighbor resize with top-left anchoring:
/// `out[i,j] = mask[floor(i * src_h / target_h), floor(j * src_w / target_w)]`.
pub fn resize_nearest(mask: &BinaryMask, target_w: usize, target_h: usize) -> Result<BinaryMask> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid(format!(
            "resize target must be at least 1x1, got {target_w}x{target_h}"
        )));
    }
    if mask.width == 0 || mask.height == 0 {
        return Err(Error::invalid("cannot resize an empty mask"));
    }
    let cols: Vec<usize> = (0..target_w).map(|j| j * mask.width / target_w).collect();
    let mut data = Vec::with_capacity(target_w * target_h);
    for i in 0..target_h {
        let src_row = i * mask.height / target_h;
        let row = &mask.data[src_row * mask.width..(src_row + 1) * mask.width];
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Ok(BinaryMask {
        width: target_w,
        height: target_h,
        data,
    })
}
