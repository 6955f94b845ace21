//! Numeric substrate: 6D rotations, pinhole projection, Procrustes alignment,
//! and generalized winding numbers.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous rotation parameterization: the first two columns of a rotation
/// matrix, stacked as `[c1; c2]`. Orthonormalized by Gram–Schmidt on decode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Rotation6D {
        matrix_to_rot6d_unchecked(&axis_angle_to_matrix(axis, angle))
    }

    pub fn as_slice(&self) -> &[f64; 6] {
        &self.0
    }
}

/// Pinhole camera at the origin looking down +z, y down, square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub image_size: [f64; 2],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::DegenerateInput(format!(
                "camera focal must be positive, got {}",
                self.focal
            )));
        }
        let [cx, cy] = self.principal_point;
        let [w, h] = self.image_size;
        if cx < 0.0 || cx > w || cy < 0.0 || cy > h {
            return Err(Error::DegenerateInput(format!(
                "principal point ({cx}, {cy}) outside image bounds {w}x{h}"
            )));
        }
        Ok(())
    }
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            focal: 1000.0,
            principal_point: [500.0, 500.0],
            image_size: [1000.0, 1000.0],
        }
    }
}

/// Least-squares similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points
            .iter()
            .map(|p| {
                let q = self.scale * (self.rotation * Vector3::new(p[0], p[1], p[2]))
                    + self.translation;
                [q.x, q.y, q.z]
            })
            .collect()
    }
}

/// Decode a 6D rotation into a rotation matrix via Gram–Schmidt.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let v = &r.0;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite input".into()));
    }
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let na = a.norm();
    if na < 1e-8 {
        return Err(Error::DegenerateRotation(format!("first vector norm {na}")));
    }
    let c1 = a / na;
    let u2 = b - c1.dot(&b) * c1;
    let n2 = u2.norm();
    if n2 < 1e-8 {
        return Err(Error::DegenerateRotation(format!(
            "second vector parallel to first (residual norm {n2})"
        )));
    }
    let c2 = u2 / n2;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Encode a rotation matrix as its first two columns.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rotation6D> {
    let err = (m.transpose() * m - Matrix3::identity()).norm();
    if err > 1e-4 {
        return Err(Error::NotARotation(format!("R^T R deviates by {err:.2e}")));
    }
    if (m.determinant() - 1.0).abs() > 1e-4 {
        return Err(Error::NotARotation(format!(
            "determinant {} != 1",
            m.determinant()
        )));
    }
    Ok(matrix_to_rot6d_unchecked(m))
}

pub(crate) fn matrix_to_rot6d_unchecked(m: &Matrix3<f64>) -> Rotation6D {
    Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Rodrigues rotation about `axis` (need not be unit) by `angle` radians.
pub fn axis_angle_to_matrix(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let a = Vector3::new(axis[0], axis[1], axis[2]);
    let n = a.norm();
    if n < 1e-12 {
        return Matrix3::identity();
    }
    let k = a / n;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + angle.sin() * kx + (1.0 - angle.cos()) * (kx * kx)
}

/// Rodrigues vector (axis * angle) for a rotation matrix.
pub fn matrix_to_axis_angle(m: &Matrix3<f64>) -> [f64; 3] {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    if angle < 1e-9 {
        return [0.0, 0.0, 0.0];
    }
    if (std::f64::consts::PI - angle).abs() < 1e-6 {
        // Near pi: extract axis from R + I.
        let b = m + Matrix3::identity();
        let col = (0..3)
            .map(|i| b.column(i).norm())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap();
        let axis = b.column(col).normalize();
        return [axis.x * angle, axis.y * angle, axis.z * angle];
    }
    let s = 2.0 * angle.sin();
    [
        (m[(2, 1)] - m[(1, 2)]) / s * angle,
        (m[(0, 2)] - m[(2, 0)]) / s * angle,
        (m[(1, 0)] - m[(0, 1)]) / s * angle,
    ]
}

/// Generalized winding number of each query point with respect to a triangle
/// mesh: the sum of signed solid angles over all faces divided by 4 pi.
/// A point is inside a closed mesh iff the value exceeds 0.5.
pub fn winding_numbers(
    points: &[[f64; 3]],
    vertices: &[[f64; 3]],
    faces: &[[u32; 3]],
) -> Result<Vec<f64>> {
    for f in faces {
        for &i in f {
            if i as usize >= vertices.len() {
                return Err(Error::InvalidMesh(format!(
                    "face index {} out of range (V = {})",
                    i,
                    vertices.len()
                )));
            }
        }
    }
    Ok(points
        .iter()
        .map(|p| winding_number_one(p, vertices, faces))
        .collect())
}

/// Solid-angle sum for a single point (van Oosterom–Strackee per triangle).
pub(crate) fn winding_number_one(p: &[f64; 3], vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> f64 {
    let mut total = 0.0;
    for f in faces {
        let a = sub3(&vertices[f[0] as usize], p);
        let b = sub3(&vertices[f[1] as usize], p);
        let c = sub3(&vertices[f[2] as usize], p);
        let la = norm3(&a);
        let lb = norm3(&b);
        let lc = norm3(&c);
        let numer = triple3(&a, &b, &c);
        let denom =
            la * lb * lc + dot3(&a, &b) * lc + dot3(&b, &c) * la + dot3(&c, &a) * lb;
        total += 2.0 * numer.atan2(denom);
    }
    total / (4.0 * std::f64::consts::PI)
}

#[inline]
fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
#[inline]
fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}
#[inline]
fn triple3(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) + a[1] * (b[2] * c[0] - b[0] * c[2])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}

/// Umeyama least-squares similarity alignment of `source` onto `target`,
/// with determinant correction so the rotation never reflects.
pub fn procrustes_similarity(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
) -> Result<SimilarityTransform> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "source has {n} points, target has {}",
            target.len()
        )));
    }
    if n < 3 {
        return Err(Error::DegenerateInput(format!("need at least 3 points, got {n}")));
    }
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let mut sigma_s = 0.0;
    let mut cov = Matrix3::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        let ds = Vector3::new(s[0] - mu_s[0], s[1] - mu_s[1], s[2] - mu_s[2]);
        let dt = Vector3::new(t[0] - mu_t[0], t[1] - mu_t[1], t[2] - mu_t[2]);
        sigma_s += ds.norm_squared();
        cov += dt * ds.transpose();
    }
    sigma_s /= n as f64;
    cov /= n as f64;
    if sigma_s < 1e-12 {
        return Err(Error::DegenerateInput("source has zero variance".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateInput("SVD failed".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateInput("SVD failed".into()))?;
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * vt;
    let scale = (svd.singular_values.component_mul(&s_diag)).sum() / sigma_s;
    let mu_s_v = Vector3::new(mu_s[0], mu_s[1], mu_s[2]);
    let mu_t_v = Vector3::new(mu_t[0], mu_t[1], mu_t[2]);
    let translation = mu_t_v - scale * (rotation * mu_s_v);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    let n = points.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Perspective projection of camera-frame points to pixels.
pub fn project(camera: &Camera, points: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        if p[2] <= 1e-6 {
            return Err(Error::BehindCamera { z: p[2] });
        }
        out.push([
            camera.focal * p[0] / p[2] + camera.principal_point[0],
            camera.focal * p[1] / p[2] + camera.principal_point[1],
        ]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        assert!((a - b).norm() < tol, "matrices differ:\n{a}\n{b}");
    }

    #[test]
    fn rot6d_identity() {
        let m = rot6d_to_matrix(&Rotation6D::IDENTITY).unwrap();
        mat_close(&m, &Matrix3::identity(), 1e-12);
    }

    #[test]
    fn rot6d_gram_schmidt_case() {
        // Hand Gram-Schmidt: a=(0,0,1) -> c1=(0,0,1); b=(0,1,0) already
        // orthogonal -> c2=(0,1,0); c3 = c1 x c2 = (-1,0,0).
        let m = rot6d_to_matrix(&Rotation6D([0.0, 0.0, 1.0, 0.0, 1.0, 0.0])).unwrap();
        let expected = Matrix3::from_columns(&[
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
        ]);
        mat_close(&m, &expected, 1e-12);
    }

    #[test]
    fn rot6d_round_trip_regenerates_matrix() {
        let r = Rotation6D([0.3, -1.2, 0.5, 0.9, 0.1, -0.4]);
        let m = rot6d_to_matrix(&r).unwrap();
        let r2 = matrix_to_rot6d(&m).unwrap();
        let m2 = rot6d_to_matrix(&r2).unwrap();
        mat_close(&m, &m2, 1e-12);
    }

    #[test]
    fn rot6d_orthonormal_det_one() {
        let r = Rotation6D([2.0, 0.1, -0.3, 0.5, 3.0, 0.7]);
        let m = rot6d_to_matrix(&r).unwrap();
        mat_close(&(m.transpose() * m), &Matrix3::identity(), 1e-10);
        assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn rot6d_degenerate_inputs_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([0.0; 6])),
            Err(Error::DegenerateRotation(_))
        ));
        // b parallel to a
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn matrix_to_rot6d_yaw90() {
        // 90 degree yaw about z: columns (0,1,0) and (-1,0,0).
        let m = axis_angle_to_matrix([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let r = matrix_to_rot6d(&m).unwrap();
        for (got, want) in r.0.iter().zip([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn matrix_to_rot6d_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(matrix_to_rot6d(&m), Err(Error::NotARotation(_))));
    }

    /// Closed unit cube (12 triangles, outward normals) centered at `c`.
    pub(crate) fn unit_cube(c: [f64; 3]) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
        let mut verts = Vec::new();
        for dz in [-0.5, 0.5] {
            for dy in [-0.5, 0.5] {
                for dx in [-0.5, 0.5] {
                    verts.push([c[0] + dx, c[1] + dy, c[2] + dz]);
                }
            }
        }
        // Faces with outward orientation (verified by centroid winding = 1).
        let faces: Vec<[u32; 3]> = vec![
            [0, 2, 1], [1, 2, 3], // z = -0.5
            [4, 5, 6], [5, 7, 6], // z = +0.5
            [0, 1, 4], [1, 5, 4], // y = -0.5
            [2, 6, 3], [3, 6, 7], // y = +0.5
            [0, 4, 2], [2, 4, 6], // x = -0.5
            [1, 3, 5], [3, 7, 5], // x = +0.5
        ];
        (verts, faces)
    }

    #[test]
    fn winding_cube_centroid_and_far_point() {
        let (v, f) = unit_cube([0.0, 0.0, 0.0]);
        let w = winding_numbers(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]], &v, &f).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn winding_rejects_bad_faces() {
        let (v, mut f) = unit_cube([0.0; 3]);
        f.push([0, 1, 99]);
        assert!(matches!(
            winding_numbers(&[[0.0; 3]], &v, &f),
            Err(Error::InvalidMesh(_))
        ));
    }

    #[test]
    fn winding_classifier_rigid_invariance() {
        let (v, f) = unit_cube([0.0; 3]);
        let rot = axis_angle_to_matrix([0.3, 1.0, -0.2], 0.9);
        let shift = Vector3::new(0.4, -2.0, 1.5);
        let v2: Vec<[f64; 3]> = v
            .iter()
            .map(|p| {
                let q = rot * Vector3::new(p[0], p[1], p[2]) + shift;
                [q.x, q.y, q.z]
            })
            .collect();
        let probes = [[0.2, 0.1, -0.3], [0.7, 0.0, 0.0], [0.49, 0.49, 0.49]];
        let w1 = winding_numbers(&probes, &v, &f).unwrap();
        let probes2: Vec<[f64; 3]> = probes
            .iter()
            .map(|p| {
                let q = rot * Vector3::new(p[0], p[1], p[2]) + shift;
                [q.x, q.y, q.z]
            })
            .collect();
        let w2 = winding_numbers(&probes2, &v2, &f).unwrap();
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert_eq!(*a > 0.5, *b > 0.5);
        }
    }

    #[test]
    fn procrustes_identity_and_exact_similarity() {
        let src = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.3, 0.7, -0.2],
        ];
        let t = procrustes_similarity(&src, &src).unwrap();
        assert_abs_diff_eq!(t.scale, 1.0, epsilon = 1e-12);
        mat_close(&t.rotation, &Matrix3::identity(), 1e-10);
        assert!(t.translation.norm() < 1e-12);

        let tgt: Vec<[f64; 3]> = src
            .iter()
            .map(|p| [2.0 * p[0] + 1.0, 2.0 * p[1] + 2.0, 2.0 * p[2] + 3.0])
            .collect();
        let t = procrustes_similarity(&src, &tgt).unwrap();
        assert_abs_diff_eq!(t.scale, 2.0, epsilon = 1e-10);
        mat_close(&t.rotation, &Matrix3::identity(), 1e-10);
        assert_abs_diff_eq!(t.translation.x, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(t.translation.y, 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(t.translation.z, 3.0, epsilon = 1e-10);
    }

    #[test]
    fn procrustes_zero_variance_rejected() {
        let src = vec![[1.0, 2.0, 3.0]; 5];
        let tgt = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ];
        assert!(matches!(
            procrustes_similarity(&src, &tgt),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn project_examples() {
        let cam = Camera::default();
        let px = project(&cam, &[[0.0, 0.0, 2.0], [1.0, 0.0, 2.0]]).unwrap();
        assert_abs_diff_eq!(px[0][0], 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px[0][1], 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px[1][0], 1000.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px[1][1], 500.0, epsilon = 1e-12);
        // Scaling along the ray leaves the projection unchanged.
        let p2 = project(&cam, &[[3.0, -1.5, 4.5]]).unwrap();
        let p3 = project(&cam, &[[6.0, -3.0, 9.0]]).unwrap();
        assert_abs_diff_eq!(p2[0][0], p3[0][0], epsilon = 1e-9);
        assert_abs_diff_eq!(p2[0][1], p3[0][1], epsilon = 1e-9);
    }

    #[test]
    fn project_behind_camera() {
        let cam = Camera::default();
        assert!(matches!(
            project(&cam, &[[0.0, 0.0, -1.0]]),
            Err(Error::BehindCamera { .. })
        ));
    }
}
