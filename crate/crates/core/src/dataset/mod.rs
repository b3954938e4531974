//! Corpus manifests, viewpoint pairing, synthetic scenes and pixel-wise evaluation.

mod eval;
mod manifest;
mod pairing;
mod synth;

pub use eval::{count, evaluate, evaluate_sweep, parse_sweep, sweep_counts, Counts, EvalReport, EvalRow, Metrics};
pub use manifest::{Manifest, ManifestEntry, Role};
pub use pairing::{pair_viewpoints, yaw_deviation, ANGLE_THRESHOLD_DEG};
pub use synth::{scene_seed, synth_scene, write_scene, PlantedObject, Scene, SynthConfig};
