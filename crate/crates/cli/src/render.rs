//! Five-panel overview: live | warped reference | attention overlay | score heat map | ground truth.

use std::path::Path;

use anyhow::{bail, Context};
use maskpipe::dataset::Manifest;
use maskpipe::imaging::{load_image, load_mask_pgm, save_png, BinaryMask, Image, ScoreMap};

use crate::load_score;

pub const PANELS: usize = 5;

/// Blue-cyan-yellow-red ramp; 0 maps to a dark blue.
pub fn heat(v: f32) -> [f32; 3] {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.3, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|k| ca[k] + t * (cb[k] - ca[k]));
        }
    }
    STOPS[4].1
}

fn gray(img: &Image, x: usize, y: usize) -> f32 {
    let c = img.channels();
    (0..c).map(|k| img.get(y, x, k)).sum::<f32>() / c as f32
}

pub fn compose(
    live: &Image,
    warped: &Image,
    mask: Option<&BinaryMask>,
    score: &ScoreMap,
    gt: Option<&BinaryMask>,
) -> anyhow::Result<Image> {
    let (w, h) = (live.width(), live.height());
    let same = |ww: usize, hh: usize| ww == w && hh == h;
    if !same(warped.width(), warped.height())
        || !same(score.width(), score.height())
        || mask.is_some_and(|m| !same(m.width(), m.height()))
        || gt.is_some_and(|m| !same(m.width(), m.height()))
    {
        bail!("result sizes do not match the {w}x{h} live frame");
    }
    let out_w = w * PANELS;
    let mut data = vec![0f32; out_w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let l = gray(live, x, y);
            let panels: [[f32; 3]; PANELS] = [
                [l; 3],
                [gray(warped, x, y); 3],
                match mask {
                    Some(m) if m.get(y, x) => [0.5 * l, 0.5 * l + 0.5, 0.5 * l],
                    _ => [l; 3],
                },
                heat(score.get(y, x)),
                [gt.map_or(0.0, |g| g.get(y, x) as u8 as f32); 3],
            ];
            for (p, rgb) in panels.iter().enumerate() {
                let i = (y * out_w + p * w + x) * 3;
                data[i..i + 3].copy_from_slice(rgb);
            }
        }
    }
    Ok(Image::new(out_w, h, 3, data)?)
}

pub fn cmd_render(scene: &Path, results: &Path, out: &Path, live: Option<&str>) -> anyhow::Result<()> {
    let (m, root) = Manifest::load(scene)?;
    let entry = match live {
        Some(id) => m
            .live()
            .find(|e| e.frame_id == id)
            .with_context(|| format!("{}: no live frame {id}", m.name))?,
        None => m.live().next().with_context(|| format!("{}: no live frame", m.name))?,
    };
    let dir = results.join(&m.name);
    let id = &entry.frame_id;
    let score = load_score(&dir.join(format!("{id}_score.fmap")))?;
    let warped_path = dir.join(format!("{id}_warped.pgm"));
    if !warped_path.is_file() {
        bail!("missing warped reference {}", warped_path.display());
    }
    let warped = load_image(&warped_path)?;
    let mask_path = dir.join(format!("{id}_attention.pgm"));
    let mask = mask_path.is_file().then(|| load_mask_pgm(&mask_path)).transpose()?;
    let gt_path = root.join("gt").join(format!("{id}.pgm"));
    let gt = gt_path.is_file().then(|| load_mask_pgm(&gt_path)).transpose()?;
    let live_img = load_image(Manifest::resolve(&root, entry))?;
    let panel = compose(&live_img, &warped, mask.as_ref(), &score, gt.as_ref())?;
    save_png(&panel, out)?;
    Ok(())
}
