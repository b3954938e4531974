use nalgebra::{DMatrix, Matrix3, Vector3};

/// Planar projective transform acting on pixel coordinates `(x, y)`.
///
/// Stored with `h33 = 1` whenever `h33` is not vanishingly small.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let h33 = m[(2, 2)];
        if h33.abs() > 1e-12 {
            Self(m / h33)
        } else {
            Self(m / m.norm())
        }
    }

    /// Row-major `[h11, h12, h13, h21, ..., h33]`.
    pub fn from_row_slice(h: &[f64; 9]) -> Self {
        Self::from_matrix(Matrix3::from_row_slice(h))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_row_slice(&[1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    /// Rotation by `angle` radians about `(cx, cy)` followed by a translation.
    pub fn rigid_about(angle: f64, cx: f64, cy: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_row_slice(&[
            c,
            -s,
            cx - c * cx + s * cy + tx,
            s,
            c,
            cy - s * cx - c * cy + ty,
            0.0,
            0.0,
            1.0,
        ])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let m = &self.0;
        let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
        if w.abs() < 1e-12 {
            return None;
        }
        Some([
            (m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / w,
            (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / w,
        ])
    }

    pub fn inverse(&self) -> Option<Homography> {
        let det = self.0.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return None;
        }
        self.0.try_inverse().map(Self::from_matrix)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Homography {
        Self::from_matrix(self.0 * other.0)
    }

    /// Largest absolute entry difference after normalization.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).abs().max()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Larger of the forward (`|H a - b|`) and backward (`|H^-1 b - a|`) transfer distances.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, a: [f64; 2], b: [f64; 2]) -> f64 {
    let dist = |p: Option<[f64; 2]>, q: [f64; 2]| match p {
        Some(p) => ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(),
        None => f64::INFINITY,
    };
    dist(h.apply(a), b).max(dist(h_inv.apply(b), a))
}

/// Similarity transform moving the centroid to the origin with mean distance sqrt(2).
fn normalizing_transform(points: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized direct linear transform: the homography mapping `src[i]` to `dst[i]`
/// in the algebraic least-squares sense. Needs at least 4 correspondences.
pub fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Homography> {
    if src.len() != dst.len() || src.len() < 4 {
        return None;
    }
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (p, q)) in src.iter().zip(dst).enumerate() {
        let ps = ts * Vector3::new(p[0], p[1], 1.0);
        let qs = td * Vector3::new(q[0], q[1], 1.0);
        let (x, y) = (ps[0], ps[1]);
        let (u, v) = (qs[0], qs[1]);
        let r = 2 * k;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse()?;
    let out = Homography::from_matrix(td_inv * hn * ts);
    if !out.is_finite() || out.0.determinant().abs() < 1e-12 {
        return None;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_h() -> Homography {
        Homography::from_row_slice(&[1.02, 0.03, 4.0, -0.02, 0.98, -3.0, 1e-5, -2e-5, 1.0])
    }

    #[test]
    fn exact_fit_from_four_points() {
        let h = sample_h();
        let src = [[10.0, 10.0], [600.0, 20.0], [590.0, 460.0], [30.0, 450.0]];
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| h.apply(p).unwrap()).collect();
        let fit = fit_homography(&src, &dst).unwrap();
        assert!(fit.max_abs_diff(&h) < 1e-9, "{fit:?}");
    }

    #[test]
    fn collinear_points_do_not_fit_a_usable_model() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let dst = src;
        match fit_homography(&src, &dst) {
            None => {}
            Some(h) => {
                // A rank-deficient system leaves the null space ambiguous; whatever
                // comes back must still be finite.
                assert!(h.is_finite());
            }
        }
    }

    #[test]
    fn inverse_and_compose() {
        let h = sample_h();
        let id = h.compose(&h.inverse().unwrap());
        assert!(id.max_abs_diff(&Homography::identity()) < 1e-12);
        let t = Homography::translation(3.0, -2.0);
        assert_eq!(t.apply([1.0, 1.0]).unwrap(), [4.0, -1.0]);
    }

    #[test]
    fn rigid_about_keeps_center_fixed() {
        let r = Homography::rigid_about(0.3, 320.0, 240.0, 0.0, 0.0);
        let c = r.apply([320.0, 240.0]).unwrap();
        assert!((c[0] - 320.0).abs() < 1e-9 && (c[1] - 240.0).abs() < 1e-9);
    }

    #[test]
    fn transfer_error_is_max_of_both_directions() {
        let h = Homography::identity();
        let e = symmetric_transfer_error(&h, &h, [0.0, 0.0], [3.0, 4.0]);
        assert!((e - 5.0).abs() < 1e-12);
    }

    #[test]
    fn h33_is_normalized() {
        let h = Homography::from_matrix(Matrix3::identity() * 4.0);
        assert_eq!(h, Homography::identity());
    }
}
