//! Synthetic traversals: a textured background seen from 2T+1 jittered
//! reference viewpoints plus one live viewpoint with small planted objects.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Role};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::imaging::{save_gray_pgm, save_mask_pgm};
use crate::imaging::{BinaryMask, Image, Pose};

/// Background margin around the visible canvas, large enough that every
/// jittered view samples inside the background.
const MARGIN: usize = 32;
/// Planted objects keep this distance from the canvas border so they stay
/// inside every reference view's footprint.
const OBJECT_INSET: usize = 24;
const PLACEMENT_ATTEMPTS: usize = 100;
/// Metres per pixel of view translation, used to synthesize poses.
const METRES_PER_PIXEL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Reference frames per scene are `2 * half_window + 1`.
    pub half_window: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub brightness_jitter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            half_window: 10,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 8,
            max_object_size: 40,
            max_rotation_deg: 2.0,
            max_translation_px: 8.0,
            brightness_jitter: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 48 {
            return Err(Error::invalid(format!(
                "canvas {}x{} is smaller than 64x48",
                self.width, self.height
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("min_objects exceeds max_objects"));
        }
        if self.min_object_size == 0 || self.min_object_size > self.max_object_size {
            return Err(Error::invalid("object size range must satisfy 0 < min <= max"));
        }
        if self.max_object_size + 2 * OBJECT_INSET > self.width.min(self.height) {
            return Err(Error::invalid(format!(
                "objects up to {} px do not fit a {}x{} canvas",
                self.max_object_size, self.width, self.height
            )));
        }
        if !(0.0..=10.0).contains(&self.max_rotation_deg)
            || !(0.0..=(MARGIN as f64 / 2.0)).contains(&self.max_translation_px)
        {
            return Err(Error::invalid("viewpoint jitter out of range"));
        }
        if !(0.0..=0.5).contains(&self.brightness_jitter) {
            return Err(Error::invalid("brightness jitter out of range"));
        }
        Ok(())
    }
}

/// Axis-aligned planted rectangle in live-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PlantedObject {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.width).contains(&x) && (self.y..self.y + self.height).contains(&y)
    }

    fn overlaps(&self, other: &PlantedObject, gap: usize) -> bool {
        self.x < other.x + other.width + gap
            && other.x < self.x + self.width + gap
            && self.y < other.y + other.height + gap
            && other.y < self.y + self.height + gap
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub seed: u64,
    pub references: Vec<Image>,
    pub live: Image,
    pub ground_truth: BinaryMask,
    pub objects: Vec<PlantedObject>,
    /// True live -> reference homography for each reference, in order.
    pub live_to_ref: Vec<Homography>,
}

impl Scene {
    pub fn manifest(&self) -> Manifest {
        let entry = |img: &Image, role| ManifestEntry {
            frame_id: img.frame_id.clone(),
            path: format!("images/{}.pgm", img.frame_id),
            role,
            pose: img.pose.expect("synthesized frames carry poses"),
        };
        let mut entries: Vec<ManifestEntry> = self.references.iter().map(|r| entry(r, Role::Reference)).collect();
        entries.push(entry(&self.live, Role::Live));
        Manifest {
            name: self.name.clone(),
            width: self.live.width(),
            height: self.live.height(),
            seed: self.seed,
            entries,
        }
    }
}

/// Per-scene seed derived from a corpus seed and the scene index.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut z = corpus_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise plus random flat rectangles, in `[0,1]`.
fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f32> {
    let mut acc = vec![0f32; w * h];
    let mut total = 0f32;
    let mut amp = 1f32;
    for spacing in [64usize, 32, 16, 8, 4] {
        let (gw, gh) = (w / spacing + 2, h / spacing + 2);
        let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.gen()).collect();
        for y in 0..h {
            let (gy, fy) = (y / spacing, smooth((y % spacing) as f32 / spacing as f32));
            for x in 0..w {
                let (gx, fx) = (x / spacing, smooth((x % spacing) as f32 / spacing as f32));
                let at = |i: usize, j: usize| lattice[j * gw + i];
                let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
                let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
                acc[y * w + x] += amp * (top * (1.0 - fy) + bottom * fy);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    for v in &mut acc {
        *v /= total;
    }
    let rects = rng.gen_range(6..=12);
    for _ in 0..rects {
        let rw = rng.gen_range(w / 16..=w / 4);
        let rh = rng.gen_range(h / 16..=h / 4);
        let x0 = rng.gen_range(0..w - rw);
        let y0 = rng.gen_range(0..h - rh);
        let level: f32 = rng.gen_range(0.1..0.9);
        for y in y0..y0 + rh {
            for v in &mut acc[y * w + x0..y * w + x0 + rw] {
                *v = 0.6 * level + 0.4 * *v;
            }
        }
    }
    acc
}

fn sample(canvas: &[f32], cw: usize, ch: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (cw - 1) as f64);
    let y = y.clamp(0.0, (ch - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(cw - 1), (y0 + 1).min(ch - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = canvas[y0 * cw + x0] * (1.0 - fx) + canvas[y0 * cw + x1] * fx;
    let bottom = canvas[y1 * cw + x0] * (1.0 - fx) + canvas[y1 * cw + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// 8-bit quantization, so images survive a PGM round trip unchanged.
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct View {
    /// View pixel -> visible-canvas pixel.
    to_canvas: Homography,
    brightness: f32,
    pose: Pose,
}

fn random_view(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> View {
    let angle_deg = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg;
    let tx = rng.gen_range(-1.0..=1.0) * cfg.max_translation_px;
    let ty = rng.gen_range(-1.0..=1.0) * cfg.max_translation_px;
    let brightness = rng.gen_range(-1.0f32..=1.0) * cfg.brightness_jitter;
    let (cx, cy) = ((cfg.width - 1) as f64 / 2.0, (cfg.height - 1) as f64 / 2.0);
    View {
        to_canvas: Homography::rigid_about(angle_deg.to_radians(), cx, cy, tx, ty),
        brightness,
        pose: Pose::new(tx * METRES_PER_PIXEL, ty * METRES_PER_PIXEL, angle_deg),
    }
}

fn render(canvas: &[f32], cw: usize, ch: usize, view: &View, cfg: &SynthConfig) -> Vec<f32> {
    let shift = Homography::translation(MARGIN as f64, MARGIN as f64).compose(&view.to_canvas);
    let mut out = Vec::with_capacity(cfg.width * cfg.height);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let [sx, sy] = shift.apply([x as f64, y as f64]).expect("rigid transform is affine");
            out.push(quantize(sample(canvas, cw, ch, sx, sy) + view.brightness));
        }
    }
    out
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Vec<PlantedObject>> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<PlantedObject> = Vec::with_capacity(n);
    for k in 0..n {
        let mut attempt = 0;
        loop {
            if attempt == PLACEMENT_ATTEMPTS {
                return Err(Error::Data(format!(
                    "could not place object {k} without overlap after {PLACEMENT_ATTEMPTS} attempts"
                )));
            }
            attempt += 1;
            let width = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let height = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let x = rng.gen_range(OBJECT_INSET..=cfg.width - OBJECT_INSET - width);
            let y = rng.gen_range(OBJECT_INSET..=cfg.height - OBJECT_INSET - height);
            let candidate = PlantedObject { x, y, width, height };
            if placed.iter().all(|o| !o.overlaps(&candidate, 2)) {
                placed.push(candidate);
                break;
            }
        }
    }
    Ok(placed)
}

/// Draws a striped object whose levels contrast with the local background.
fn paint_object(rng: &mut ChaCha8Rng, live: &mut [f32], width: usize, obj: &PlantedObject) {
    let mean = (obj.y..obj.y + obj.height)
        .flat_map(|y| live[y * width + obj.x..y * width + obj.x + obj.width].iter())
        .sum::<f32>()
        / obj.area() as f32;
    let (lo, hi) = if mean > 0.5 { (0.02, 0.35) } else { (0.65, 0.98) };
    let period = rng.gen_range(2..=6usize);
    let vertical: bool = rng.gen();
    for y in obj.y..obj.y + obj.height {
        for x in obj.x..obj.x + obj.width {
            let t = if vertical { x - obj.x } else { y - obj.y };
            live[y * width + x] = quantize(if (t / period) % 2 == 0 { lo } else { hi });
        }
    }
}

/// Generates one scene; bit-identical for equal `(seed, cfg)`.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cw, ch) = (cfg.width + 2 * MARGIN, cfg.height + 2 * MARGIN);
    let canvas = background(&mut rng, cw, ch);

    let n_refs = 2 * cfg.half_window + 1;
    let views: Vec<View> = (0..=n_refs).map(|_| random_view(&mut rng, cfg)).collect();
    let (ref_views, live_view) = views.split_at(n_refs);
    let live_view = &live_view[0];

    let mut references = Vec::with_capacity(n_refs);
    let mut live_to_ref = Vec::with_capacity(n_refs);
    for (i, v) in ref_views.iter().enumerate() {
        let data = render(&canvas, cw, ch, v, cfg);
        references.push(
            Image::new(cfg.width, cfg.height, 1, data)?
                .with_frame_id(format!("ref_{i:03}"))
                .with_pose(v.pose),
        );
        let inv = v.to_canvas.inverse().expect("rigid transform is invertible");
        live_to_ref.push(inv.compose(&live_view.to_canvas));
    }

    let mut live = render(&canvas, cw, ch, live_view, cfg);
    let objects = place_objects(&mut rng, cfg)?;
    for obj in &objects {
        paint_object(&mut rng, &mut live, cfg.width, obj);
    }
    let ground_truth = BinaryMask::from_fn(cfg.width, cfg.height, |row, col| {
        objects.iter().any(|o| o.contains(col, row))
    });
    let live = Image::new(cfg.width, cfg.height, 1, live)?
        .with_frame_id("live_000")
        .with_pose(live_view.pose);
    Ok(Scene {
        name: format!("scene_{seed:016x}"),
        seed,
        references,
        live,
        ground_truth,
        objects,
        live_to_ref,
    })
}

/// Writes `manifest.json`, `images/<frame_id>.pgm` and `gt/<live_id>.pgm` under `dir`.
pub fn write_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
    }
    for img in scene.references.iter().chain(std::iter::once(&scene.live)) {
        save_gray_pgm(img, dir.join("images").join(format!("{}.pgm", img.frame_id)))?;
    }
    save_mask_pgm(&scene.ground_truth, dir.join("gt").join(format!("{}.pgm", scene.live.frame_id)))?;
    scene.manifest().save(dir.join(Manifest::FILE_NAME))
}
