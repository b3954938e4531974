use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskpipe::attention::apply_mask_files;
use maskpipe::dataset::{
    pair_viewpoints, parse_sweep, scene_seed, sweep_counts, synth_scene, write_scene, yaw_deviation, EvalReport,
    Manifest, SynthConfig,
};
use maskpipe::detection::GateMode;
use maskpipe::imaging::{load_mask_pgm, read_fmap, save_gray_pgm, save_mask_pgm, save_score_pgm, write_fmap,
    BinaryMask, Pose, ScoreMap};
use maskpipe::pipeline::{load_scene, process_scene, run_corpus, scene_dirs, FrameResult, PipelineConfig, SceneData};

mod render;

/// Exit code for malformed invocations; clap uses the same code for its own errors.
const EXIT_USAGE: u8 = 2;
const EXIT_FAILURE: u8 = 1;

/// Marks an error as a usage problem (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "maskpipe", version, about = "Attention-mask change detection for small objects")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of scenes with planted objects.
    Synth(SynthArgs),
    /// Print the reference viewpoint paired with each live frame.
    Pair(PairArgs),
    /// Compute attention masks.
    Mask(RunArgs),
    /// Run detection and write score maps, masks and the evaluation report.
    Detect(RunArgs),
    /// Re-evaluate saved score maps against ground truth.
    Eval(EvalArgs),
    /// Render a five-panel overview of one live frame.
    Render(RenderArgs),
    /// Multiply a feature map by an attention mask.
    ApplyMask(ApplyMaskArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    scenes: u64,
    /// Half-window length; each scene gets 2T+1 reference frames.
    #[arg(long = "T", default_value_t = 10)]
    half_window: usize,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
}

#[derive(Args)]
struct PairArgs {
    /// Scene directory or corpus directory.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Matched,
    Unmatched,
    Off,
}

#[derive(Args)]
struct PipelineArgs {
    /// RANSAC base seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", default_value_t = 10)]
    half_window: usize,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    #[arg(long, default_value_t = 32)]
    stride: usize,
    #[arg(long, default_value_t = 3.0)]
    ransac_thresh: f64,
    #[arg(long, value_enum, default_value_t = Gate::Matched)]
    gate: Gate,
    #[arg(long)]
    no_warp: bool,
    #[arg(long)]
    no_uncertainty: bool,
    #[arg(long, default_value = "0:1:0.01")]
    threshold_sweep: String,
    /// Fixed decision threshold; by default the best-F1 threshold of the sweep is reported.
    #[arg(long)]
    threshold: Option<f32>,
}

impl PipelineArgs {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.mask.half_window = self.half_window;
        cfg.mask.patch.patch_size = self.patch_size;
        cfg.mask.patch.stride = self.stride;
        cfg.mask.ransac.reproj_threshold = self.ransac_thresh;
        cfg.mask.ransac.rng_seed = self.seed;
        cfg.align.ransac.rng_seed = self.seed;
        cfg.detect.gate_mode = match self.gate {
            Gate::Matched => GateMode::SuppressMatched,
            Gate::Unmatched => GateMode::SuppressUnmatched,
            Gate::Off => GateMode::Off,
        };
        cfg.detect.use_uncertainty = !self.no_uncertainty;
        cfg.detect.decision_threshold = self.threshold;
        cfg.warp = !self.no_warp;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    fn thresholds(&self) -> anyhow::Result<Vec<f32>> {
        parse_sweep(&self.threshold_sweep).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scene directory or corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory of a previous `detect` run.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "0:1:0.01")]
    threshold_sweep: String,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory of a previous `detect` run.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Live frame to render (default: the first one in the manifest).
    #[arg(long)]
    live: Option<String>,
}

#[derive(Args)]
struct ApplyMaskArgs {
    #[arg(long)]
    fmap: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MASKPIPE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        set_jobs(jobs)?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pair(a) => cmd_pair(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Render(a) => render::cmd_render(&a.scene, &a.results, &a.out, a.live.as_deref()),
        Command::ApplyMask(a) => Ok(apply_mask_files(&a.fmap, &a.mask, &a.out)?),
    }
}

#[cfg(feature = "parallel")]
fn set_jobs(jobs: usize) -> anyhow::Result<()> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .context("configuring the worker pool")
}

#[cfg(not(feature = "parallel"))]
fn set_jobs(jobs: usize) -> anyhow::Result<()> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    if jobs > 1 {
        log::warn!("built without the `parallel` feature; --jobs {jobs} runs sequentially");
    }
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        half_window: a.half_window,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(&a.out)?;
    for i in 0..a.scenes as usize {
        let mut scene = synth_scene(scene_seed(a.seed, i), &cfg)?;
        scene.name = format!("scene_{i:03}");
        write_scene(&scene, a.out.join(&scene.name))?;
        log::info!("wrote {} ({} objects)", scene.name, scene.objects.len());
    }
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn cmd_pair(a: &PairArgs) -> anyhow::Result<()> {
    for dir in scene_dirs(&a.corpus)? {
        let (m, _) = Manifest::load(&dir)?;
        let refs: Vec<(String, Pose)> = m.references().map(|e| (e.frame_id.clone(), e.pose)).collect();
        for live in m.live() {
            let id = pair_viewpoints(&live.pose, &refs)?;
            let r = &refs.iter().find(|(rid, _)| rid == id).expect("paired id is a reference").1;
            println!(
                "{}/{} {} yaw_dev={:.3} dist={:.4}",
                m.name,
                live.frame_id,
                id,
                yaw_deviation(live.pose.yaw, r.yaw),
                (live.pose.x - r.x).hypot(live.pose.y - r.y)
            );
        }
    }
    Ok(())
}

fn frame_dir(out: &Path, scene: &SceneData) -> PathBuf {
    out.join(&scene.name)
}

fn live_id(r: &FrameResult) -> &str {
    r.id.rsplit('/').next().unwrap_or(&r.id)
}

fn cmd_mask(a: &RunArgs) -> anyhow::Result<()> {
    let mut cfg = a.pipeline.config()?;
    if cfg.detect.gate_mode == GateMode::Off {
        return Err(usage("mask needs a gate mode other than off"));
    }
    // Only the mask is wanted; skip the alignment work.
    cfg.warp = false;
    cfg.detect.use_uncertainty = false;
    for dir in scene_dirs(&a.corpus)? {
        let scene = load_scene(&dir)?;
        let out = frame_dir(&a.out, &scene);
        create_dir(&out)?;
        for r in process_scene(&scene, &cfg)? {
            let grid = r.grid_mask.as_ref().expect("gate is on");
            save_mask_pgm(grid, out.join(format!("{}_mask.pgm", live_id(&r))))?;
            save_mask_pgm(r.pixel_mask.as_ref().expect("gate is on"), out.join(format!("{}_attention.pgm", live_id(&r))))?;
            println!("{} window={} ones={}/{}", r.id, r.window.len(), grid.count_ones(), grid.width() * grid.height());
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct FrameRecord {
    id: String,
    paired_ref: String,
    flow_source: maskpipe::pipeline::FlowSource,
    mask_ones: Option<usize>,
}

fn write_frame_artifacts(out: &Path, scene: &SceneData, r: &FrameResult, fixed: Option<f32>) -> maskpipe::Result<()> {
    let dir = frame_dir(out, scene);
    std::fs::create_dir_all(&dir).map_err(|e| maskpipe::Error::Io { path: dir.clone(), source: e })?;
    let id = live_id(r);
    // Exact scores for `eval` and `render`; the PGM is a lossy preview.
    write_fmap(&r.score.to_feature_map(), dir.join(format!("{id}_score.fmap")))?;
    save_score_pgm(&r.score, dir.join(format!("{id}_score.pgm")))?;
    save_gray_pgm(&r.warped, dir.join(format!("{id}_warped.pgm")))?;
    if let Some(m) = &r.grid_mask {
        save_mask_pgm(m, dir.join(format!("{id}_mask.pgm")))?;
    }
    if let Some(m) = &r.pixel_mask {
        save_mask_pgm(m, dir.join(format!("{id}_attention.pgm")))?;
    }
    if let Some(t) = fixed {
        save_mask_pgm(&maskpipe::detection::threshold(&r.score, t)?, dir.join(format!("{id}_pred.pgm")))?;
    }
    Ok(())
}

fn cmd_detect(a: &RunArgs) -> anyhow::Result<()> {
    let cfg = a.pipeline.config()?;
    let thresholds = a.pipeline.thresholds()?;
    let dirs = scene_dirs(&a.corpus)?;
    create_dir(&a.out)?;
    let start = std::time::Instant::now();
    let summaries = run_corpus(
        dirs.len(),
        |i| load_scene(&dirs[i]),
        &cfg,
        &thresholds,
        |scene, r| write_frame_artifacts(&a.out, scene, r, cfg.detect.decision_threshold),
    )?;
    let records: Vec<FrameRecord> = summaries
        .iter()
        .map(|s| FrameRecord {
            id: s.id.clone(),
            paired_ref: s.paired_ref.clone(),
            flow_source: s.flow_source,
            mask_ones: s.mask_ones,
        })
        .collect();
    let frames_path = a.out.join("frames.json");
    std::fs::write(&frames_path, serde_json::to_string_pretty(&records)? + "\n")
        .with_context(|| format!("writing {}", frames_path.display()))?;

    let evaluated: Vec<(String, Vec<_>)> = summaries
        .into_iter()
        .filter_map(|s| s.counts.map(|c| (s.id, c)))
        .collect();
    if evaluated.is_empty() {
        log::warn!("no ground truth found; skipping the report");
        return Ok(());
    }
    let report = EvalReport::from_counts(&thresholds, evaluated)?;
    report.save(&a.out, cfg.detect.decision_threshold)?;
    let (tau, m) = report.best();
    println!(
        "{} frames in {:.1}s; best F1 {:.4} at threshold {tau:.2} (P {:.4}, R {:.4})",
        records.len(),
        start.elapsed().as_secs_f64(),
        m.f1,
        m.precision,
        m.recall
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let thresholds = parse_sweep(&a.threshold_sweep).map_err(|e| usage(e.to_string()))?;
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(format!("threshold {t} outside [0,1]")));
        }
    }
    let mut per_image = Vec::new();
    for dir in scene_dirs(&a.corpus)? {
        let (m, root) = Manifest::load(&dir)?;
        for live in m.live() {
            let gt_path = root.join("gt").join(format!("{}.pgm", live.frame_id));
            let score_path = a.results.join(&m.name).join(format!("{}_score.fmap", live.frame_id));
            let gt: BinaryMask = load_mask_pgm(&gt_path)?;
            let score = load_score(&score_path)?;
            per_image.push((format!("{}/{}", m.name, live.frame_id), sweep_counts(&score, &gt, &thresholds)?));
        }
    }
    let report = EvalReport::from_counts(&thresholds, per_image)?;
    report.write_csv(std::io::stdout().lock(), a.threshold)?;
    Ok(())
}

pub(crate) fn load_score(path: &Path) -> anyhow::Result<ScoreMap> {
    if !path.is_file() {
        bail!("missing score map {}", path.display());
    }
    let fmap = read_fmap(path)?;
    ScoreMap::from_feature_map(&fmap).with_context(|| format!("reading {}", path.display()))
}
