//! Acceptance suite. Runs every primary criterion, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use maskpipe::attention::{apply_mask, attention_mask_from_descriptors, MaskGenConfig};
use maskpipe::dataset::{
    count, evaluate, pair_viewpoints, parse_sweep, scene_seed, synth_scene, Counts, EvalReport, Metrics, SynthConfig,
};
use maskpipe::detection::merge_uncertainty;
use maskpipe::geometry::{estimate_homography_ransac, mutual_nearest_neighbors, Homography, MatchPair, MatchSet,
    RansacConfig};
use maskpipe::imaging::{decode_fmap, encode_fmap, read_fmap, write_fmap, BinaryMask, FeatureMap, Pose, ScoreMap};
use maskpipe::patch_features::{descriptor_distance, extract_descriptors, DescriptorGrid};
use maskpipe::pipeline::{process_scene, PipelineConfig, SceneData};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs `f` on a single worker thread when rayon is enabled.
fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

fn ransac_oracle() -> Outcome {
    const TRIALS: u64 = 100;
    const MATCHES: usize = 200;
    const OUTLIERS: usize = 60;
    let mut passing = 0;
    let mut worst_time = Duration::ZERO;
    let mut total_time = Duration::ZERO;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let planted = Homography::from_row_slice(&[
            1.0 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-40.0..40.0),
            rng.gen_range(-0.1..0.1),
            1.0 + rng.gen_range(-0.1..0.1),
            rng.gen_range(-40.0..40.0),
            rng.gen_range(-1e-4..1e-4),
            rng.gen_range(-1e-4..1e-4),
            1.0,
        ]);
        let mut pairs = Vec::with_capacity(MATCHES);
        for i in 0..MATCHES {
            let src = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
            let mapped = planted.apply(src).unwrap();
            let dst = if i < MATCHES - OUTLIERS {
                // Noise uniform in the unit disk.
                let (r, t): (f64, f64) = (rng.gen::<f64>().sqrt(), rng.gen_range(0.0..std::f64::consts::TAU));
                [mapped[0] + r * t.cos(), mapped[1] + r * t.sin()]
            } else {
                loop {
                    let q = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
                    if (q[0] - mapped[0]).hypot(q[1] - mapped[1]) > 20.0 {
                        break q;
                    }
                }
            };
            pairs.push(MatchPair {
                live_cell: (i, 0),
                ref_cell: (i, 0),
                distance: 0.0,
                live_pt: src,
                ref_pt: dst,
            });
        }
        pairs.shuffle(&mut rng);
        let matches = MatchSet { pairs };
        let cfg = RansacConfig {
            rng_seed: trial,
            ..RansacConfig::default()
        };
        let start = Instant::now();
        let fit = single_threaded(|| estimate_homography_ransac(&matches, &cfg)).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        worst_time = worst_time.max(elapsed);
        total_time += elapsed;
        let ids: HashSet<usize> = fit.inliers.iter().map(|p| p.live_cell.0).collect();
        let recovered = ids.iter().filter(|&&i| i < MATCHES - OUTLIERS).count();
        let admitted = ids.len() - recovered;
        if recovered as f64 >= 0.99 * (MATCHES - OUTLIERS) as f64 && admitted as f64 <= 0.01 * OUTLIERS as f64 {
            passing += 1;
        }
    }
    let mean_ms = total_time.as_secs_f64() * 1e3 / TRIALS as f64;
    check(
        passing >= 95 && mean_ms < 50.0,
        format!(
            "{passing}/{TRIALS} trials recovered >= 99% inliers with <= 1% outliers; {mean_ms:.2} ms/frame mean, {:.2} ms worst (1 thread)",
            worst_time.as_secs_f64() * 1e3
        ),
    )
}

fn random_grid(rng: &mut ChaCha8Rng, gw: usize, gh: usize, dim: usize) -> DescriptorGrid {
    let mut data: Vec<f32> = Vec::with_capacity(gw * gh * dim);
    for cell in 0..gw * gh {
        let roll: f64 = rng.gen();
        if roll < 0.03 {
            data.extend(std::iter::repeat(0.0).take(dim));
        } else if roll < 0.08 && cell > 0 {
            // Duplicate an earlier cell to create exact distance ties.
            let src = rng.gen_range(0..cell);
            let copy: Vec<f32> = data[src * dim..(src + 1) * dim].to_vec();
            data.extend(copy);
        } else {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            data.extend(v.iter().map(|x| x / n));
        }
    }
    let centers = (0..gw * gh)
        .map(|i| [((i % gw) * 32 + 16) as u16, ((i / gw) * 32 + 16) as u16])
        .collect();
    DescriptorGrid::new(gw, gh, dim, data, centers).unwrap()
}

/// Double argmin over the full distance matrix; first minimum wins.
fn brute_force_mnn(live: &DescriptorGrid, reference: &DescriptorGrid) -> Vec<(usize, usize)> {
    let live_ok: Vec<usize> = (0..live.len()).filter(|&i| !live.is_zero(i)).collect();
    let ref_ok: Vec<usize> = (0..reference.len()).filter(|&j| !reference.is_zero(j)).collect();
    let d = |i: usize, j: usize| descriptor_distance(live.descriptor(i), reference.descriptor(j)).unwrap();
    let nearest_ref = |i: usize| {
        let mut best = (f64::INFINITY, usize::MAX);
        for &j in &ref_ok {
            if d(i, j) < best.0 {
                best = (d(i, j), j);
            }
        }
        best.1
    };
    let nearest_live = |j: usize| {
        let mut best = (f64::INFINITY, usize::MAX);
        for &i in &live_ok {
            if d(i, j) < best.0 {
                best = (d(i, j), i);
            }
        }
        best.1
    };
    live_ok
        .iter()
        .filter_map(|&i| {
            let j = nearest_ref(i);
            (j != usize::MAX && nearest_live(j) == i).then_some((i, j))
        })
        .collect()
}

fn mnn_equivalence() -> Outcome {
    let (gw, gh, dim) = (20, 15, 128);
    let mut mismatched = Vec::new();
    let mut total_pairs = 0;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + case);
        let live = random_grid(&mut rng, gw, gh, dim);
        let reference = random_grid(&mut rng, gw, gh, dim);
        let got: Vec<(usize, usize)> = mutual_nearest_neighbors(&live, &reference)
            .map_err(|e| e.to_string())?
            .pairs
            .iter()
            .map(|p| (p.live_cell.0 * gw + p.live_cell.1, p.ref_cell.0 * gw + p.ref_cell.1))
            .collect();
        let expected = brute_force_mnn(&live, &reference);
        total_pairs += expected.len();
        if got != expected {
            mismatched.push(case);
        }
    }
    check(
        mismatched.is_empty(),
        format!(
            "100 cases of 20x15x128 grids, {total_pairs} oracle pairs, mismatching cases: {mismatched:?}"
        ),
    )
}

fn monotonicity() -> Outcome {
    let synth = SynthConfig::default();
    let cfg = MaskGenConfig::default();
    let windows = [1usize, 5, 10];
    let mut violations = 0usize;
    let mut ones = [0usize; 3];
    for i in 0..50 {
        let scene = synth_scene(scene_seed(7, i), &synth).map_err(|e| e.to_string())?;
        let live = extract_descriptors(&scene.live, &cfg.patch).map_err(|e| e.to_string())?;
        let refs: Vec<DescriptorGrid> = scene
            .references
            .iter()
            .map(|r| extract_descriptors(r, &cfg.patch))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let center = scene.references.len() / 2;
        let mut masks: Vec<BinaryMask> = Vec::new();
        for (k, &t) in windows.iter().enumerate() {
            let set: Vec<(&str, &DescriptorGrid)> = (center - t..=center + t)
                .map(|j| (scene.references[j].frame_id.as_str(), &refs[j]))
                .collect();
            let (mask, _) = attention_mask_from_descriptors(&live, &set, &cfg).map_err(|e| e.to_string())?;
            ones[k] += mask.count_ones();
            masks.push(mask);
        }
        for pair in masks.windows(2) {
            violations += pair[1]
                .data()
                .iter()
                .zip(pair[0].data())
                .filter(|(&big, &small)| big > small)
                .count();
        }
    }
    check(
        violations == 0,
        format!(
            "50 scenes, nested windows T=1/5/10, total mask ones {:?}, violations {violations}",
            ones
        ),
    )
}

fn apply_mask_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let mut failures = Vec::new();
    for case in 0..50 {
        let (w, h, c) = (rng.gen_range(1..24), rng.gen_range(1..18), rng.gen_range(1..9));
        let data: Vec<f32> = (0..w * h * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let fmap = FeatureMap::new(w, h, c, data).unwrap();
        let mask = BinaryMask::new(w, h, (0..w * h).map(|_| rng.gen_range(0..=1)).collect()).unwrap();
        let out = apply_mask(&fmap, &mask).map_err(|e| e.to_string())?;
        let exact = (0..h).all(|i| {
            (0..w).all(|j| {
                (0..c).all(|k| {
                    let expected = if mask.get(i, j) { fmap.get(i, j, k) } else { 0.0 };
                    out.get(i, j, k).to_bits() == expected.to_bits()
                        || (expected == 0.0 && out.get(i, j, k) == 0.0)
                })
            })
        });
        let idempotent = apply_mask(&out, &mask).map_err(|e| e.to_string())? == out;
        if !(exact && idempotent) {
            failures.push(case);
        }
    }
    // Round trip through bytes and through a file, with awkward values included.
    let specials = [0.0f32, -0.0, 1.0, -1.5, f32::MIN_POSITIVE, 1e-42, f32::MAX, f32::MIN, 123.456];
    let data: Vec<f32> = (0..5 * 3 * 4).map(|i| specials[i % specials.len()] * (1.0 + i as f32 / 7.0)).collect();
    let fmap = FeatureMap::new(5, 3, 4, data).unwrap();
    let bytes_ok = decode_fmap(&encode_fmap(&fmap).unwrap()).unwrap().data().iter().map(|v| v.to_bits()).eq(fmap
        .data()
        .iter()
        .map(|v| v.to_bits()));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.fmap");
    write_fmap(&fmap, &path).map_err(|e| e.to_string())?;
    let file_ok = read_fmap(&path).unwrap().data().iter().map(|v| v.to_bits()).eq(fmap.data().iter().map(|v| v.to_bits()));
    check(
        failures.is_empty() && bytes_ok && file_ok,
        format!(
            "50 random maps exact and idempotent (failing cases {failures:?}); fmap round trip bit-exact: bytes {bytes_ok}, file {file_ok}"
        ),
    )
}

fn merge_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut mismatches = 0usize;
    let mut increases = 0usize;
    let mut pixels = 0usize;
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..64), rng.gen_range(1..48));
        let mut gen = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| match rng.gen_range(0..10) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.gen(),
                })
                .collect()
        };
        let s = ScoreMap::new(w, h, gen(w * h)).unwrap();
        let u = ScoreMap::new(w, h, gen(w * h)).unwrap();
        let m = merge_uncertainty(&s, &u).map_err(|e| e.to_string())?;
        for i in 0..w * h {
            let oracle = s.data()[i] * u.data()[i];
            mismatches += (m.data()[i].to_bits() != oracle.to_bits()) as usize;
            increases += (m.data()[i] > s.data()[i]) as usize;
        }
        pixels += w * h;
    }
    check(
        mismatches == 0 && increases == 0,
        format!("{pixels} pixels over 50 maps: {mismatches} differ from the product oracle, {increases} increased"),
    )
}

struct E2e {
    full: Metrics,
    full_tau: f32,
    baseline: Metrics,
    baseline_tau: f32,
    no_warp: Metrics,
    no_warp_tau: f32,
    full_runtime: Duration,
}

fn run_end_to_end() -> Result<E2e, String> {
    let synth = SynthConfig::default();
    let thresholds = parse_sweep("0:1:0.01").unwrap();
    let full_cfg = PipelineConfig::default();
    let baseline_cfg = PipelineConfig::baseline();
    let no_warp_cfg = PipelineConfig {
        warp: false,
        ..PipelineConfig::default()
    };
    let mut per = [Vec::new(), Vec::new(), Vec::new()];
    let mut full_runtime = Duration::ZERO;
    for i in 0..100 {
        let start = Instant::now();
        let scene = SceneData::from(synth_scene(scene_seed(42, i), &synth).map_err(|e| e.to_string())?);
        let synth_time = start.elapsed();
        for (k, cfg) in [&full_cfg, &baseline_cfg, &no_warp_cfg].into_iter().enumerate() {
            let start = Instant::now();
            let results = process_scene(&scene, cfg).map_err(|e| e.to_string())?;
            if k == 0 {
                full_runtime += synth_time + start.elapsed();
            }
            for r in results {
                let gt = r.ground_truth.as_ref().expect("synthetic scenes carry ground truth");
                let counts: Vec<Counts> =
                    maskpipe::dataset::sweep_counts(&r.score, gt, &thresholds).map_err(|e| e.to_string())?;
                per[k].push((r.id.clone(), counts));
            }
        }
    }
    let best = |p: Vec<(String, Vec<Counts>)>| -> Result<(f32, Metrics), String> {
        Ok(EvalReport::from_counts(&thresholds, p).map_err(|e| e.to_string())?.best())
    };
    let [f, b, n] = per;
    let (full_tau, full) = best(f)?;
    let (baseline_tau, baseline) = best(b)?;
    let (no_warp_tau, no_warp) = best(n)?;
    Ok(E2e {
        full,
        full_tau,
        baseline,
        baseline_tau,
        no_warp,
        no_warp_tau,
        full_runtime,
    })
}

fn end_to_end(e: &E2e) -> Outcome {
    let gain = e.full.f1 - e.baseline.f1;
    let secs = e.full_runtime.as_secs_f64();
    check(
        gain >= 0.05 && secs < 300.0,
        format!(
            "100 scenes seed 42 T=10: full F1 {:.4} (tau {:.2}) vs baseline F1 {:.4} (tau {:.2}), gain {gain:.4}; full pipeline {secs:.1} s",
            e.full.f1, e.full_tau, e.baseline.f1, e.baseline_tau
        ),
    )
}

fn no_warp_ablation(e: &E2e) -> Outcome {
    check(
        e.no_warp.f1 <= e.full.f1,
        format!(
            "no-warp F1 {:.4} (tau {:.2}) vs full F1 {:.4}",
            e.no_warp.f1, e.no_warp_tau, e.full.f1
        ),
    )
}

fn pairing_rule() -> Outcome {
    let r = |id: &str, x: f64, y: f64, yaw: f64| (id.to_string(), Pose::new(x, y, yaw));
    let origin = Pose::new(0.0, 0.0, 0.0);
    let mut cases: Vec<(&str, Pose, Vec<(String, Pose)>, &str)> = vec![
        ("single sub-degree ref", origin, vec![r("a", 0.2, 0.0, 0.5)], "a"),
        (
            "sub-degree beats closer misaligned ref",
            origin,
            vec![r("near", 0.01, 0.0, 1.0), r("aligned", 0.5, 0.5, -0.99)],
            "aligned",
        ),
        (
            "nearest among several sub-degree refs",
            origin,
            vec![r("a", 0.3, 0.0, 0.1), r("b", 0.2, 0.0, 0.9), r("c", 0.0, 0.1, -0.5), r("d", 0.0, 0.05, 5.0)],
            "c",
        ),
        (
            "fallback to nearest position when all >= 1 degree",
            origin,
            vec![r("a", 1.0, 0.0, 1.0), r("b", 0.3, 0.0, 90.0), r("c", 0.0, 0.5, -1.0)],
            "b",
        ),
        (
            "wraparound +180/-180",
            Pose::new(0.0, 0.0, 179.7),
            vec![r("same_side", 0.1, 0.0, 178.0), r("across", 0.9, 0.0, -179.9)],
            "across",
        ),
        (
            "wraparound -180/+180",
            Pose::new(0.0, 0.0, -179.6),
            vec![r("a", 0.1, 0.0, -178.2), r("b", 0.4, 0.0, 179.9)],
            "b",
        ),
        (
            "equal sub-degree distance tie goes to lowest id",
            origin,
            vec![r("ref_9", 1.0, 0.0, 0.5), r("ref_10", 0.0, 1.0, 0.5), r("ref_2", -1.0, 0.0, -0.5)],
            "ref_10",
        ),
        (
            "fallback tie goes to lowest id",
            origin,
            vec![r("b", 0.0, 2.0, 10.0), r("a", 2.0, 0.0, -10.0)],
            "a",
        ),
    ];
    let mut failures = Vec::new();
    let mut checked = 0;
    for (name, live, refs, expected) in cases.iter_mut() {
        // Every rotation and the reversal: the answer must not depend on order.
        let n = refs.len();
        for rev in [false, true] {
            for rot in 0..n {
                let mut order = refs.clone();
                if rev {
                    order.reverse();
                }
                order.rotate_left(rot);
                checked += 1;
                match pair_viewpoints(live, &order) {
                    Ok(got) if got == *expected => {}
                    other => failures.push(format!("{name}: {other:?}")),
                }
            }
        }
    }
    if pair_viewpoints(&origin, &[]).is_ok() {
        failures.push("empty reference list accepted".into());
    }
    check(
        failures.is_empty(),
        format!("{} cases, {checked} orderings, failures: {failures:?}", cases.len()),
    )
}

fn metrics_fixtures() -> Outcome {
    let m = |w: usize, h: usize, v: &[u8]| BinaryMask::new(w, h, v.to_vec()).unwrap();
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: Metrics, p: f64, r: f64, f: f64| {
        if (got.precision, got.recall, got.f1) != (p, r, f) {
            failures.push(format!("{name}: got {got:?}, expected P {p} R {r} F1 {f}"));
        }
    };
    let gt = m(4, 2, &[1, 1, 0, 0, 1, 1, 0, 0]);
    expect("pred = gt", evaluate(&[gt.clone()], &[gt.clone()]).unwrap(), 1.0, 1.0, 1.0);
    expect("empty pred", evaluate(&[m(4, 2, &[0; 8])], &[gt.clone()]).unwrap(), 0.0, 0.0, 0.0);
    expect("empty gt", evaluate(&[gt.clone()], &[m(4, 2, &[0; 8])]).unwrap(), 0.0, 0.0, 0.0);
    expect("both empty", evaluate(&[m(4, 2, &[0; 8])], &[m(4, 2, &[0; 8])]).unwrap(), 0.0, 0.0, 0.0);
    // 4 gt pixels, 4 predicted, 2 shared.
    let pred = m(4, 2, &[0, 1, 1, 0, 0, 1, 1, 0]);
    expect("half overlap", evaluate(&[pred], &[gt.clone()]).unwrap(), 0.5, 0.5, 0.5);
    // Pooled: image A tp 2 fp 1 fn 0, image B tp 0 fp 0 fn 3 -> P 2/3, R 2/5, F1 1/2.
    let (pa, ga) = (m(3, 1, &[1, 1, 1]), m(3, 1, &[1, 1, 0]));
    let (pb, gb) = (m(3, 1, &[0, 0, 0]), m(3, 1, &[1, 1, 1]));
    let pooled = evaluate(&[pa.clone(), pb.clone()], &[ga.clone(), gb.clone()]).unwrap();
    expect("pooled", pooled, 2.0 / 3.0, 2.0 / 5.0, 0.5);
    // No overlap at all: P = R = 0 so F1 falls back to 0.
    expect("disjoint", evaluate(&[m(2, 1, &[1, 0])], &[m(2, 1, &[0, 1])]).unwrap(), 0.0, 0.0, 0.0);
    if count(&pa, &ga).unwrap() != (Counts { tp: 2, fp: 1, fn_: 0 }) {
        failures.push("counts of image A".into());
    }
    if evaluate(&[m(2, 1, &[1, 0])], &[m(1, 2, &[0, 1])]).is_ok() {
        failures.push("dimension mismatch accepted".into());
    }
    check(failures.is_empty(), format!("8 hand-counted fixtures, failures: {failures:?}"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("ransac_oracle", ransac_oracle()),
        ("mnn_equivalence", mnn_equivalence()),
        ("mask_monotonicity", monotonicity()),
        ("apply_mask_contract", apply_mask_contract()),
        ("merge_uncertainty_contract", merge_contract()),
    ];
    match run_end_to_end() {
        Ok(e) => {
            results.push(("end_to_end_improvement", end_to_end(&e)));
            results.push(("no_warp_ablation", no_warp_ablation(&e)));
        }
        Err(err) => {
            results.push(("end_to_end_improvement", Err(err.clone())));
            results.push(("no_warp_ablation", Err(err)));
        }
    }
    results.push(("pairing_rule", pairing_rule()));
    results.push(("metrics_fixtures", metrics_fixtures()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
