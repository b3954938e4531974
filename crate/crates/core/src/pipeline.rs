//! End-to-end processing of one scene: viewpoint pairing, attention mask over
//! the reference window, alignment, differencing, gating and uncertainty fusion.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_mask_from_descriptors, FrameVerification, MaskGenConfig};
use crate::dataset::{pair_viewpoints, sweep_counts, Counts, Manifest, Scene};
use crate::detection::{difference_map, gate_with_mask, merge_uncertainty, DetectConfig, GateMode};
use crate::error::{Error, Result};
use crate::imaging::{load_image, load_mask_pgm, resize_nearest, BinaryMask, Image, Pose, ScoreMap};
use crate::par;
use crate::patch_features::{extract_descriptors, read_pdsc, DescriptorGrid};
use crate::warping::{
    estimate_alignment, flow_from_homography, load_flow, photometric_uncertainty, warp_reference, AlignConfig,
    FlowField,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mask: MaskGenConfig,
    pub detect: DetectConfig,
    pub align: AlignConfig,
    /// Warp the paired reference onto the live view before differencing.
    pub warp: bool,
    /// Window radius of the photometric uncertainty used with estimated flows.
    pub uncertainty_radius: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask: MaskGenConfig::default(),
            detect: DetectConfig::default(),
            align: AlignConfig::default(),
            warp: true,
            uncertainty_radius: 3,
        }
    }
}

impl PipelineConfig {
    /// Plain differencing: no gate, no uncertainty, no warp.
    pub fn baseline() -> Self {
        let mut cfg = Self::default();
        cfg.detect.gate_mode = GateMode::Off;
        cfg.detect.use_uncertainty = false;
        cfg.warp = false;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.patch.validate()?;
        self.mask.ransac.validate()?;
        self.align.ransac.validate()?;
        self.detect.validate()
    }
}

#[derive(Debug, Clone)]
pub struct LiveFrame {
    pub image: Image,
    pub ground_truth: Option<BinaryMask>,
}

/// Everything the pipeline needs for one scene. Descriptor grids are keyed by
/// frame id and flows by `(live_id, ref_id)`; missing entries are computed.
#[derive(Debug, Clone, Default)]
pub struct SceneData {
    pub name: String,
    /// Reference frames in traversal order.
    pub references: Vec<Image>,
    pub lives: Vec<LiveFrame>,
    pub descriptors: HashMap<String, DescriptorGrid>,
    pub flows: HashMap<(String, String), FlowField>,
}

impl From<Scene> for SceneData {
    fn from(scene: Scene) -> Self {
        SceneData {
            name: scene.name,
            references: scene.references,
            lives: vec![LiveFrame {
                image: scene.live,
                ground_truth: Some(scene.ground_truth),
            }],
            ..Default::default()
        }
    }
}

pub const DESCRIPTOR_DIR: &str = "descriptors";
pub const FLOW_DIR: &str = "flows";
pub const GT_DIR: &str = "gt";

pub fn flow_file_name(live_id: &str, ref_id: &str) -> String {
    format!("{live_id}__{ref_id}.flow")
}

/// Loads a scene directory: images from the manifest, plus `gt/<live>.pgm`,
/// `descriptors/<frame>.pdsc` and `flows/<live>__<ref>.flow` where present.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SceneData> {
    let (manifest, root) = Manifest::load(dir.as_ref())?;
    let load = |e: &crate::dataset::ManifestEntry| -> Result<Image> {
        let img = load_image(Manifest::resolve(&root, e))?;
        if (img.width(), img.height()) != (manifest.width, manifest.height) {
            return Err(Error::Data(format!(
                "{}: frame {} is {}x{}, manifest says {}x{}",
                manifest.name,
                e.frame_id,
                img.width(),
                img.height(),
                manifest.width,
                manifest.height
            )));
        }
        Ok(img.with_frame_id(e.frame_id.clone()).with_pose(e.pose))
    };
    let references = manifest.references().map(load).collect::<Result<Vec<_>>>()?;
    let mut lives = Vec::new();
    for e in manifest.live() {
        let gt_path = root.join(GT_DIR).join(format!("{}.pgm", e.frame_id));
        let ground_truth = if gt_path.is_file() {
            Some(load_mask_pgm(&gt_path)?)
        } else {
            None
        };
        lives.push(LiveFrame {
            image: load(e)?,
            ground_truth,
        });
    }
    let mut descriptors = HashMap::new();
    for e in &manifest.entries {
        let p = root.join(DESCRIPTOR_DIR).join(format!("{}.pdsc", e.frame_id));
        if p.is_file() {
            descriptors.insert(e.frame_id.clone(), read_pdsc(&p)?);
        }
    }
    let mut flows = HashMap::new();
    for l in manifest.live() {
        for r in manifest.references() {
            let p = root.join(FLOW_DIR).join(flow_file_name(&l.frame_id, &r.frame_id));
            if p.is_file() {
                flows.insert((l.frame_id.clone(), r.frame_id.clone()), load_flow(&p)?);
            }
        }
    }
    Ok(SceneData {
        name: manifest.name,
        references,
        lives,
        descriptors,
        flows,
    })
}

/// Scene directories of a corpus: `dir` itself if it holds a manifest,
/// otherwise its immediate subdirectories that do, sorted by name.
pub fn scene_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if dir.join(Manifest::FILE_NAME).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(Manifest::FILE_NAME).is_file() {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no scene manifests found", dir.display())));
    }
    out.sort();
    Ok(out)
}

/// Where the reference-to-live alignment came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Supplied flow file.
    External,
    /// Homography fitted from refined patch matches.
    Estimated,
    /// Warping disabled.
    Disabled,
    /// Estimation was degenerate; the identity was used.
    IdentityFallback,
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    /// `<scene>/<live_id>`.
    pub id: String,
    pub paired_ref: String,
    /// Reference frame ids inside the window, in traversal order.
    pub window: Vec<String>,
    pub verifications: Vec<FrameVerification>,
    /// Cell-resolution mask; `None` when the gate is off.
    pub grid_mask: Option<BinaryMask>,
    /// Mask resized to the live canvas.
    pub pixel_mask: Option<BinaryMask>,
    pub flow_source: FlowSource,
    pub warped: Image,
    pub validity: BinaryMask,
    pub difference: ScoreMap,
    pub uncertainty: Option<ScoreMap>,
    /// Final change score.
    pub score: ScoreMap,
    pub ground_truth: Option<BinaryMask>,
}

/// Indices of the references in the window `[k - T, k + T]` around `center`.
pub fn window_indices(center: usize, len: usize, half_window: usize) -> std::ops::Range<usize> {
    center.saturating_sub(half_window)..(center + half_window + 1).min(len)
}

fn descriptor_for<'a>(
    scene: &'a SceneData,
    img: &Image,
    cache: &'a HashMap<String, DescriptorGrid>,
) -> Result<&'a DescriptorGrid> {
    scene
        .descriptors
        .get(&img.frame_id)
        .or_else(|| cache.get(&img.frame_id))
        .ok_or_else(|| Error::Data(format!("no descriptors for frame {}", img.frame_id)))
}

/// Runs the pipeline for one live frame of `scene`.
pub fn process_frame(scene: &SceneData, live: &LiveFrame, cfg: &PipelineConfig) -> Result<FrameResult> {
    cfg.validate()?;
    let live_img = &live.image;
    let (w, h) = (live_img.width(), live_img.height());
    let live_pose = live_img
        .pose
        .ok_or_else(|| Error::Data(format!("live frame {} has no pose", live_img.frame_id)))?;
    let ref_poses: Vec<(String, Pose)> = scene
        .references
        .iter()
        .map(|r| {
            r.pose
                .map(|p| (r.frame_id.clone(), p))
                .ok_or_else(|| Error::Data(format!("reference {} has no pose", r.frame_id)))
        })
        .collect::<Result<_>>()?;
    let paired_id = pair_viewpoints(&live_pose, &ref_poses)?.to_string();
    let center = scene
        .references
        .iter()
        .position(|r| r.frame_id == paired_id)
        .expect("paired id comes from the references");
    let paired = &scene.references[center];
    let window_refs = &scene.references[window_indices(center, scene.references.len(), cfg.mask.half_window)];
    let window: Vec<String> = window_refs.iter().map(|r| r.frame_id.clone()).collect();

    let external_flow = scene.flows.get(&(live_img.frame_id.clone(), paired_id.clone()));
    let need_mask = cfg.detect.gate_mode != GateMode::Off;
    let need_alignment = cfg.warp && external_flow.is_none();

    // Descriptors not supplied on disk are extracted here.
    let mut wanted: Vec<&Image> = Vec::new();
    if need_mask || need_alignment {
        wanted.push(live_img);
        wanted.push(paired);
    }
    if need_mask {
        wanted.extend(window_refs.iter());
    }
    wanted.retain(|img| !scene.descriptors.contains_key(&img.frame_id));
    wanted.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    wanted.dedup_by(|a, b| a.frame_id == b.frame_id);
    let extracted = par::map_slice(&wanted, |img| extract_descriptors(img, &cfg.mask.patch))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let cache: HashMap<String, DescriptorGrid> =
        wanted.iter().map(|img| img.frame_id.clone()).zip(extracted).collect();

    let (grid_mask, pixel_mask, verifications) = if need_mask {
        let live_desc = descriptor_for(scene, live_img, &cache)?;
        let refs = window_refs
            .iter()
            .map(|r| Ok((r.frame_id.as_str(), descriptor_for(scene, r, &cache)?)))
            .collect::<Result<Vec<_>>>()?;
        let (mask, frames) = attention_mask_from_descriptors(live_desc, &refs, &cfg.mask)?;
        let pixel = resize_nearest(&mask, w, h)?;
        (Some(mask), Some(pixel), frames)
    } else {
        (None, None, Vec::new())
    };

    let (flow, flow_source) = if !cfg.warp {
        (FlowField::identity(w, h), FlowSource::Disabled)
    } else if let Some(f) = external_flow {
        (f.clone(), FlowSource::External)
    } else {
        let model = estimate_alignment(
            live_img,
            paired,
            descriptor_for(scene, live_img, &cache)?,
            descriptor_for(scene, paired, &cache)?,
            &cfg.align,
        )?;
        match model {
            Some(hm) => (flow_from_homography(&hm, w, h)?, FlowSource::Estimated),
            None => {
                log::warn!(
                    "{}/{}: alignment to {paired_id} is degenerate, using identity",
                    scene.name,
                    live_img.frame_id
                );
                (FlowField::identity(w, h), FlowSource::IdentityFallback)
            }
        }
    };

    let (warped, validity) = warp_reference(paired, &flow)?;
    let difference = difference_map(live_img, &warped, &validity, &cfg.detect)?;
    let gated = match &pixel_mask {
        Some(m) => gate_with_mask(&difference, m, cfg.detect.gate_mode)?,
        None => difference.clone(),
    };
    let (score, uncertainty) = if cfg.detect.use_uncertainty {
        let unc: Vec<f32> = if flow_source == FlowSource::External {
            flow.uncertainty()
                .iter()
                .zip(validity.data())
                .map(|(&u, &ok)| if ok == 1 { u } else { 1.0 })
                .collect()
        } else {
            let photo = photometric_uncertainty(live_img, &warped, &validity, cfg.uncertainty_radius)?;
            flow.uncertainty().iter().zip(&photo).map(|(&a, &b)| a.max(b)).collect()
        };
        let unc = ScoreMap::new(w, h, unc)?;
        (merge_uncertainty(&gated, &unc)?, Some(unc))
    } else {
        (gated, None)
    };

    Ok(FrameResult {
        id: format!("{}/{}", scene.name, live_img.frame_id),
        paired_ref: paired_id,
        window,
        verifications,
        grid_mask,
        pixel_mask,
        flow_source,
        warped,
        validity,
        difference,
        uncertainty,
        score,
        ground_truth: live.ground_truth.clone(),
    })
}

pub fn process_scene(scene: &SceneData, cfg: &PipelineConfig) -> Result<Vec<FrameResult>> {
    if scene.lives.is_empty() {
        return Err(Error::Data(format!("scene {} has no live frame", scene.name)));
    }
    scene.lives.iter().map(|l| process_frame(scene, l, cfg)).collect()
}

/// Per-frame summary kept by [`run_corpus`].
#[derive(Debug, Clone)]
pub struct FrameSummary {
    pub id: String,
    pub paired_ref: String,
    pub flow_source: FlowSource,
    pub mask_ones: Option<usize>,
    /// Sweep counts against the ground truth, when there is one.
    pub counts: Option<Vec<Counts>>,
}

/// Processes `n` scenes produced by `load` in parallel, calling `sink` with each
/// full result (for writing artifacts) and keeping only compact summaries.
pub fn run_corpus<L, S>(
    n: usize,
    load: L,
    cfg: &PipelineConfig,
    thresholds: &[f32],
    sink: S,
) -> Result<Vec<FrameSummary>>
where
    L: Fn(usize) -> Result<SceneData> + Sync + Send,
    S: Fn(&SceneData, &FrameResult) -> Result<()> + Sync + Send,
{
    let per_scene = par::map_range(n, |i| -> Result<Vec<FrameSummary>> {
        let scene = load(i)?;
        let mut out = Vec::with_capacity(scene.lives.len());
        for r in process_scene(&scene, cfg)? {
            sink(&scene, &r)?;
            let counts = match &r.ground_truth {
                Some(gt) => Some(sweep_counts(&r.score, gt, thresholds)?),
                None => None,
            };
            out.push(FrameSummary {
                id: r.id.clone(),
                paired_ref: r.paired_ref.clone(),
                flow_source: r.flow_source,
                mask_ones: r.grid_mask.as_ref().map(BinaryMask::count_ones),
                counts,
            });
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for s in per_scene {
        all.extend(s?);
    }
    Ok(all)
}
