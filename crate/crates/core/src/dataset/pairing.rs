use crate::error::{Error, Result};
use crate::imaging::Pose;

/// Yaw deviation (degrees) below which a reference counts as same-heading.
pub const ANGLE_THRESHOLD_DEG: f64 = 1.0;

/// Signed heading difference `a - b` wrapped to `(-180, 180]`.
pub fn yaw_deviation(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

fn position_distance(a: &Pose, b: &Pose) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Picks the reference viewpoint for a live pose.
///
/// Among references whose heading deviates by less than one degree, the
/// position-nearest wins; if there is none, the position-nearest of all
/// references is used regardless of heading. Ties go to the lowest frame id.
pub fn pair_viewpoints<'a>(live: &Pose, refs: &'a [(String, Pose)]) -> Result<&'a str> {
    if refs.is_empty() {
        return Err(Error::invalid("no reference viewpoints to pair with"));
    }
    let nearest = |aligned_only: bool| {
        refs.iter()
            .filter(|(_, p)| !aligned_only || yaw_deviation(live.yaw, p.yaw).abs() < ANGLE_THRESHOLD_DEG)
            .map(|(id, p)| (position_distance(live, p), id.as_str()))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
            .map(|(_, id)| id)
    };
    Ok(nearest(true).or_else(|| nearest(false)).expect("refs is non-empty"))
}
