use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::homography::{fit_homography, symmetric_transfer_error, Homography};
use super::matching::{MatchPair, MatchSet};
use crate::error::{Error, Result};
use crate::par;

/// Hypotheses evaluated per batch. Fixed so that parallel and sequential runs
/// visit exactly the same iterations.
const BATCH: usize = 32;

/// Twice the triangle area (px^2) below which a sample triple counts as collinear.
const MIN_SAMPLE_AREA2: f64 = 1.0;

/// Refinement passes over the consensus set.
const REFIT_PASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Inlier bound on the symmetric transfer error, in pixels.
    pub reproj_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            reproj_threshold: 3.0,
            max_iterations: 2000,
            confidence: 0.999,
            min_inliers: 8,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reproj_threshold > 0.0) {
            return Err(Error::invalid(format!(
                "reprojection threshold must be > 0, got {}",
                self.reproj_threshold
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid(format!(
                "confidence must lie in (0,1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Verified subset of a [`MatchSet`] together with the model (live -> reference).
#[derive(Debug, Clone, PartialEq)]
pub struct InlierSet {
    pub model: Homography,
    pub inliers: Vec<MatchPair>,
    pub reproj_threshold: f64,
    /// Set when there were too few matches or the best consensus fell short of
    /// `min_inliers`; `inliers` is then empty.
    pub degenerate: bool,
    /// Hypotheses actually considered.
    pub iterations: usize,
}

impl InlierSet {
    fn degenerate(model: Homography, cfg: &RansacConfig, iterations: usize) -> Self {
        Self {
            model,
            inliers: Vec::new(),
            reproj_threshold: cfg.reproj_threshold,
            degenerate: true,
            iterations,
        }
    }
}

fn area2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
}

fn has_collinear_triple(p: &[[f64; 2]; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| area2(p[t[0]], p[t[1]], p[t[2]]) < MIN_SAMPLE_AREA2)
}

struct Hypothesis {
    model: Homography,
    inliers: usize,
}

fn count_inliers(model: &Homography, pairs: &[MatchPair], threshold: f64) -> Option<usize> {
    let inv = model.inverse()?;
    Some(
        pairs
            .iter()
            .filter(|p| symmetric_transfer_error(model, &inv, p.live_pt, p.ref_pt) <= threshold)
            .count(),
    )
}

fn select_inliers(model: &Homography, pairs: &[MatchPair], threshold: f64) -> Vec<MatchPair> {
    let Some(inv) = model.inverse() else {
        return Vec::new();
    };
    pairs
        .iter()
        .filter(|p| symmetric_transfer_error(model, &inv, p.live_pt, p.ref_pt) <= threshold)
        .copied()
        .collect()
}

/// Hypothesis from iteration `iter`. Each iteration draws from its own ChaCha
/// stream, so the outcome depends only on `(seed, iter)`.
fn hypothesis(pairs: &[MatchPair], cfg: &RansacConfig, iter: usize) -> Option<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(iter as u64);
    let picks = index::sample(&mut rng, pairs.len(), 4);
    let mut src = [[0.0; 2]; 4];
    let mut dst = [[0.0; 2]; 4];
    for (k, i) in picks.iter().enumerate() {
        src[k] = pairs[i].live_pt;
        dst[k] = pairs[i].ref_pt;
    }
    if has_collinear_triple(&src) || has_collinear_triple(&dst) {
        return None;
    }
    let model = fit_homography(&src, &dst)?;
    let inliers = count_inliers(&model, pairs, cfg.reproj_threshold)?;
    Some(Hypothesis { model, inliers })
}

/// Iterations needed so that an all-inlier sample was drawn with probability `confidence`.
fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let all_good = inlier_ratio.powi(4);
    if all_good >= 1.0 {
        return 1;
    }
    if all_good <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - all_good).ln();
    if !k.is_finite() {
        return cap;
    }
    (k.ceil() as usize).clamp(1, cap)
}

/// Robust homography (live -> reference) over the match centers.
///
/// Minimal 4-point samples are scored by consensus size under the symmetric
/// transfer error; the winner is refit by normalized DLT on its consensus set.
/// The iteration count adapts to the best inlier ratio seen so far.
pub fn estimate_homography_ransac(matches: &MatchSet, cfg: &RansacConfig) -> Result<InlierSet> {
    cfg.validate()?;
    let pairs = &matches.pairs;
    if pairs.len() < 4 {
        return Ok(InlierSet::degenerate(Homography::identity(), cfg, 0));
    }

    let mut best: Option<Hypothesis> = None;
    let mut required = cfg.max_iterations;
    let mut iter = 0;
    while iter < required {
        let end = (iter + BATCH).min(cfg.max_iterations);
        let batch = par::map_range(end - iter, |k| hypothesis(pairs, cfg, iter + k));
        for (k, hyp) in batch.into_iter().enumerate() {
            if iter + k >= required {
                break;
            }
            let Some(hyp) = hyp else { continue };
            if best.as_ref().map_or(true, |b| hyp.inliers > b.inliers) {
                let ratio = hyp.inliers as f64 / pairs.len() as f64;
                required = required_iterations(ratio, cfg.confidence, cfg.max_iterations);
                best = Some(hyp);
            }
        }
        iter = end.min(required);
    }
    let considered = iter;

    let Some(best) = best else {
        return Ok(InlierSet::degenerate(Homography::identity(), cfg, considered));
    };

    let mut model = best.model;
    let mut inliers = select_inliers(&model, pairs, cfg.reproj_threshold);
    for _ in 0..REFIT_PASSES {
        if inliers.len() < 4 {
            break;
        }
        let src: Vec<[f64; 2]> = inliers.iter().map(|p| p.live_pt).collect();
        let dst: Vec<[f64; 2]> = inliers.iter().map(|p| p.ref_pt).collect();
        let Some(refit) = fit_homography(&src, &dst) else {
            break;
        };
        let refit_inliers = select_inliers(&refit, pairs, cfg.reproj_threshold);
        if refit_inliers.len() < inliers.len() {
            break;
        }
        let converged = refit_inliers.len() == inliers.len();
        model = refit;
        inliers = refit_inliers;
        if converged {
            break;
        }
    }

    if inliers.len() < cfg.min_inliers.max(4) {
        return Ok(InlierSet::degenerate(model, cfg, considered));
    }
    Ok(InlierSet {
        model,
        inliers,
        reproj_threshold: cfg.reproj_threshold,
        degenerate: false,
        iterations: considered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pair(a: [f64; 2], b: [f64; 2]) -> MatchPair {
        MatchPair {
            live_cell: (0, 0),
            ref_cell: (0, 0),
            distance: 0.0,
            live_pt: a,
            ref_pt: b,
        }
    }

    fn planted(h: &Homography, n: usize, seed: u64) -> MatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|_| {
                let p = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
                pair(p, h.apply(p).unwrap())
            })
            .collect();
        MatchSet { pairs }
    }

    #[test]
    fn recovers_known_homography_without_noise() {
        let h = Homography::from_row_slice(&[1.01, 0.02, -5.0, -0.015, 0.99, 7.0, 2e-5, 1e-5, 1.0]);
        let matches = planted(&h, 12, 3);
        let out = estimate_homography_ransac(&matches, &RansacConfig::default()).unwrap();
        assert!(!out.degenerate);
        assert_eq!(out.inliers.len(), 12);
        assert!(out.model.max_abs_diff(&h) < 1e-6, "{:?}", out.model);
    }

    #[test]
    fn identity_correspondences() {
        let matches = planted(&Homography::identity(), 20, 5);
        let out = estimate_homography_ransac(&matches, &RansacConfig::default()).unwrap();
        assert_eq!(out.inliers.len(), 20);
        assert!(out.model.max_abs_diff(&Homography::identity()) < 1e-9);
    }

    #[test]
    fn fewer_than_four_matches_is_degenerate() {
        let matches = planted(&Homography::identity(), 3, 1);
        let out = estimate_homography_ransac(&matches, &RansacConfig::default()).unwrap();
        assert!(out.degenerate);
        assert!(out.inliers.is_empty());
        assert_eq!(out.model, Homography::identity());
    }

    #[test]
    fn consensus_below_min_inliers_is_degenerate() {
        let matches = planted(&Homography::identity(), 6, 1);
        let out = estimate_homography_ransac(&matches, &RansacConfig::default()).unwrap();
        assert!(out.degenerate);
        assert!(out.inliers.is_empty());
    }

    #[test]
    fn collinear_samples_are_skipped() {
        // All points on one line except far fewer than needed for a model.
        let pairs = (0..30)
            .map(|i| {
                let p = [i as f64 * 10.0, i as f64 * 5.0];
                pair(p, p)
            })
            .collect();
        let out = estimate_homography_ransac(&MatchSet { pairs }, &RansacConfig::default()).unwrap();
        assert!(out.degenerate);
    }

    #[test]
    fn invalid_config_rejected() {
        let m = planted(&Homography::identity(), 10, 1);
        let bad = RansacConfig {
            reproj_threshold: 0.0,
            ..Default::default()
        };
        assert!(estimate_homography_ransac(&m, &bad).is_err());
        let bad = RansacConfig {
            confidence: 1.0,
            ..Default::default()
        };
        assert!(estimate_homography_ransac(&m, &bad).is_err());
    }

    #[test]
    fn adaptive_stop_shortens_clean_runs() {
        let matches = planted(&Homography::identity(), 50, 8);
        let out = estimate_homography_ransac(&matches, &RansacConfig::default()).unwrap();
        assert!(out.iterations < 50, "{}", out.iterations);
        assert_eq!(required_iterations(0.5, 0.99, 10_000), 72);
        assert_eq!(required_iterations(0.0, 0.99, 500), 500);
    }

    #[test]
    fn inliers_respect_threshold_and_reproduce_with_seed() {
        let h = Homography::rigid_about(0.02, 320.0, 240.0, 4.0, -3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut matches = planted(&h, 60, 4);
        for _ in 0..40 {
            matches.pairs.push(pair(
                [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)],
                [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)],
            ));
        }
        let cfg = RansacConfig {
            rng_seed: 17,
            ..Default::default()
        };
        let a = estimate_homography_ransac(&matches, &cfg).unwrap();
        let b = estimate_homography_ransac(&matches, &cfg).unwrap();
        assert_eq!(a, b);
        let inv = a.model.inverse().unwrap();
        for p in &a.inliers {
            assert!(symmetric_transfer_error(&a.model, &inv, p.live_pt, p.ref_pt) <= cfg.reproj_threshold);
        }
        assert!(a.inliers.len() >= 60);
    }
}
