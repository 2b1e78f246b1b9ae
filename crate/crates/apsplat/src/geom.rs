//! Cameras, rigid transforms, quaternions, and the procedural synthetic-scene
//! generator that supplies geometry, ground-truth intrinsics, and multi-view
//! camera rigs.
//!
//! Scenes are ellipsoidal Gaussian blobs on a ground plane. Each blob carries
//! a constant albedo from a small palette and an analytic normal (the blob's
//! local +z axis, flipped into the upper hemisphere), which gives exact
//! per-primitive intrinsics without any inverse-rendering network.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

use crate::splat::GaussianPrimitive;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point behind camera (z = {z:.6}, near = {near:.6})")]
    BehindCamera { z: f64, near: f64 },
}

/// Unit quaternion in (w, x, y, z) component order.
///
/// `q` and `-q` map to the same rotation matrix; `normalize` keeps the norm
/// within 1e-9 of one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds and normalizes; a zero quaternion falls back to the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }.normalized()
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (angle * 0.5).sin_cos();
        Self { w: c, x: a.x * s, y: a.y * s, z: a.z * s }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * rhs` (apply `rhs` first, then `self`).
    pub fn mul(&self, rhs: &Self) -> Self {
        Self {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_matrix() * v
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self)
    }
}

/// Standard unit-quaternion rotation matrix, (w, x, y, z) order.
/// The caller is expected to pass a normalized quaternion.
pub fn quat_to_matrix(q: &UnitQuaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Inverse of [`quat_to_matrix`] up to sign (Shepperd's method).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> UnitQuaternion {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        UnitQuaternion {
            w: 0.25 * s,
            x: (m[(2, 1)] - m[(1, 2)]) / s,
            y: (m[(0, 2)] - m[(2, 0)]) / s,
            z: (m[(1, 0)] - m[(0, 1)]) / s,
        }
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        UnitQuaternion {
            w: (m[(2, 1)] - m[(1, 2)]) / s,
            x: 0.25 * s,
            y: (m[(0, 1)] + m[(1, 0)]) / s,
            z: (m[(0, 2)] + m[(2, 0)]) / s,
        }
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        UnitQuaternion {
            w: (m[(0, 2)] - m[(2, 0)]) / s,
            x: (m[(0, 1)] + m[(1, 0)]) / s,
            y: 0.25 * s,
            z: (m[(1, 2)] + m[(2, 1)]) / s,
        }
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        UnitQuaternion {
            w: (m[(1, 0)] - m[(0, 1)]) / s,
            x: (m[(0, 2)] + m[(2, 0)]) / s,
            y: (m[(1, 2)] + m[(2, 1)]) / s,
            z: 0.25 * s,
        }
    };
    q.normalized()
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub const IDENTITY: Self =
        Self { rotation: UnitQuaternion::IDENTITY, translation: Vector3::new(0.0, 0.0, 0.0) };

    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Self {
        Self { rotation: rotation.normalized(), translation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.conjugate();
        Self { rotation: inv_rot, translation: -inv_rot.rotate(&self.translation) }
    }

    /// Composition `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Self) -> Self {
        Self {
            rotation: self.rotation.mul(&rhs.rotation).normalized(),
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }
}

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: UnitQuaternion,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: UnitQuaternion,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self, GeomError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeomError::InvalidCamera(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidCamera("zero image size".into()));
        }
        if !(near < far) || near <= 0.0 {
            return Err(GeomError::InvalidCamera(format!("need 0 < near < far, got ({near}, {far})")));
        }
        if (rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(GeomError::InvalidCamera("rotation quaternion is not normalized".into()));
        }
        Ok(Self { fx, fy, cx, cy, width, height, rotation, translation, near, far })
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }
}

/// Pinhole projection: `u = fx*x/z + cx`, `v = fy*y/z + cy`, depth is
/// camera-space z. Errors when the point sits at or behind the near plane.
pub fn project(p_world: &Vector3<f64>, cam: &Camera) -> Result<(f64, f64, f64), GeomError> {
    let pc = cam.world_to_camera(p_world);
    if pc.z <= cam.near {
        return Err(GeomError::BehindCamera { z: pc.z, near: cam.near });
    }
    Ok((cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy, pc.z))
}

/// Inverse of [`project`] given the returned depth.
pub fn unproject(u: f64, v: f64, depth: f64, cam: &Camera) -> Vector3<f64> {
    let pc = Vector3::new((u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth);
    cam.rotation.conjugate().rotate(&(pc - cam.translation))
}

/// Procedural scene parameters. Deterministic in `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_gaussians: usize,
    /// World extent in meters; blob centers stay within `extent/2` per axis.
    pub extent: f64,
    pub palette: Vec<Vector3<f64>>,
    /// Ring camera count (a future-frame camera is added on top).
    pub camera_count: usize,
    pub camera_radius: f64,
    pub look_at: Vector3<f64>,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), GeomError> {
        if self.n_gaussians < 1 {
            return Err(GeomError::InvalidSpec("n_gaussians must be >= 1".into()));
        }
        if !(self.extent > 0.0) {
            return Err(GeomError::InvalidSpec("extent must be positive".into()));
        }
        if self.palette.is_empty() {
            return Err(GeomError::InvalidSpec("palette must be non-empty".into()));
        }
        if self.camera_count < 1 {
            return Err(GeomError::InvalidSpec("camera_count must be >= 1".into()));
        }
        if !(self.camera_radius > 0.0) {
            return Err(GeomError::InvalidSpec("camera_radius must be positive".into()));
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.focal > 0.0) {
            return Err(GeomError::InvalidSpec("bad image size or focal length".into()));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gaussians: 48,
            extent: 4.0,
            palette: default_palette(),
            camera_count: 3,
            camera_radius: 9.0,
            look_at: Vector3::new(0.0, 0.0, 0.4),
            image_width: 32,
            image_height: 32,
            focal: 45.0,
        }
    }
}

/// Five well-separated chromaticities; blob albedos are drawn from here.
pub fn default_palette() -> Vec<Vector3<f64>> {
    vec![
        Vector3::new(0.85, 0.22, 0.18),
        Vector3::new(0.20, 0.72, 0.30),
        Vector3::new(0.22, 0.38, 0.88),
        Vector3::new(0.90, 0.80, 0.25),
        Vector3::new(0.78, 0.78, 0.78),
    ]
}

/// Generated scene: primitives, per-primitive ground-truth intrinsics, and
/// the camera rig. The last camera is the future-frame (NVS) camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub albedo: Vec<Vector3<f64>>,
    pub normal: Vec<Vector3<f64>>,
    pub cameras: Vec<Camera>,
}

impl Scene {
    /// Ring cameras only (all but the trailing future-frame camera).
    pub fn ring_cameras(&self) -> &[Camera] {
        &self.cameras[..self.cameras.len() - 1]
    }

    pub fn future_camera(&self) -> &Camera {
        self.cameras.last().expect("scene always has cameras")
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for g in &self.gaussians {
            c += g.mean;
        }
        c / self.gaussians.len() as f64
    }
}

fn look_at_camera(
    position: Vector3<f64>,
    target: Vector3<f64>,
    spec: &SceneSpec,
) -> Result<Camera, GeomError> {
    let forward = (target - position).normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    // Rows of the world->camera rotation are the camera axes in world frame.
    let m = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let q = matrix_to_quat(&m);
    let t = -(q.rotate(&position));
    Camera::new(
        spec.focal,
        spec.focal,
        spec.image_width as f64 / 2.0,
        spec.image_height as f64 / 2.0,
        spec.image_width,
        spec.image_height,
        q,
        t,
        0.1,
        1000.0,
    )
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion {
    // Marsaglia-style: four normals, normalized. Good enough for scene texture.
    let mut comps = [0.0f64; 4];
    for c in &mut comps {
        *c = rng.random_range(-1.0..1.0);
    }
    let q = UnitQuaternion { w: comps[0], x: comps[1], y: comps[2], z: comps[3] };
    if q.norm() < 1e-6 {
        UnitQuaternion::IDENTITY
    } else {
        q.normalized()
    }
}

/// Deterministic procedural scene: flat ground pancakes plus tilted ellipsoid
/// platelets, a ring of cameras, and one future-frame camera further along
/// the ring. Pure function of the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, GeomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;

    let n = spec.n_gaussians;
    let n_ground = (n / 4).max(1);
    let mut gaussians = Vec::with_capacity(n);
    let mut albedo = Vec::with_capacity(n);
    let mut normal = Vec::with_capacity(n);

    for i in 0..n {
        let color = spec.palette[rng.random_range(0..spec.palette.len())];
        let opacity_logit = rng.random_range(2.2..3.5);
        if i < n_ground {
            // Ground pancake: large, flat, normal straight up, yaw-only spin.
            let mean = Vector3::new(
                rng.random_range(-0.4 * e..0.4 * e),
                rng.random_range(-0.4 * e..0.4 * e),
                0.0,
            );
            let sxy = rng.random_range(0.16 * e..0.28 * e);
            let sz = 0.02 * e;
            let yaw = rng.random_range(0.0..2.0 * PI);
            let rot = UnitQuaternion::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), yaw);
            gaussians.push(GaussianPrimitive {
                mean,
                log_scale: Vector3::new(sxy.ln(), sxy.ln(), sz.ln()),
                rotation: rot,
                opacity_logit,
                feature_id: i,
            });
            normal.push(Vector3::new(0.0, 0.0, 1.0));
        } else {
            // Object platelet: smaller ellipsoid above the plane, random tilt.
            let mean = Vector3::new(
                rng.random_range(-0.4 * e..0.4 * e),
                rng.random_range(-0.4 * e..0.4 * e),
                rng.random_range(0.08 * e..0.35 * e),
            );
            let sx = rng.random_range(0.06 * e..0.13 * e);
            let sy = rng.random_range(0.06 * e..0.13 * e);
            let sz = rng.random_range(0.02 * e..0.04 * e);
            let rot = random_unit_quat(&mut rng);
            // The blob's local +z axis is its analytic surface normal; keep it
            // in the upper hemisphere so ring lights can hit it.
            let mut nrm = rot.rotate(&Vector3::new(0.0, 0.0, 1.0));
            if nrm.z < 0.0 {
                nrm = -nrm;
            }
            gaussians.push(GaussianPrimitive {
                mean,
                log_scale: Vector3::new(sx.ln(), sy.ln(), sz.ln()),
                rotation: rot,
                opacity_logit,
                feature_id: i,
            });
            normal.push(nrm);
        }
        albedo.push(color);
    }

    // Camera ring at ~25 degrees elevation, plus a future-frame camera pushed
    // 40% of one ring step past camera 0 (the NVS target).
    let elev = 25.0f64.to_radians();
    let rh = spec.camera_radius * elev.cos();
    let rz = spec.camera_radius * elev.sin();
    let mut cameras = Vec::with_capacity(spec.camera_count + 1);
    let step = 2.0 * PI / spec.camera_count as f64;
    for k in 0..spec.camera_count {
        let phi = step * k as f64;
        let pos = spec.look_at + Vector3::new(rh * phi.cos(), rh * phi.sin(), rz);
        cameras.push(look_at_camera(pos, spec.look_at, spec)?);
    }
    let phi = 0.4 * step;
    let pos = spec.look_at + Vector3::new(rh * phi.cos(), rh * phi.sin(), rz);
    cameras.push(look_at_camera(pos, spec.look_at, spec)?);

    Ok(Scene { gaussians, albedo, normal, cameras })
}

/// Plain-text scene record, one primitive per line:
/// mean(3) log_scale(3) quaternion(4) opacity_logit albedo(3) normal(3).
/// Uses Rust's shortest round-trip float formatting, so the file is a stable
/// golden for a given spec.
pub fn scene_record(scene: &Scene) -> String {
    let mut out = String::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let a = scene.albedo[i];
        let n = scene.normal[i];
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            g.mean.x, g.mean.y, g.mean.z,
            g.log_scale.x, g.log_scale.y, g.log_scale.z,
            g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z,
            g.opacity_logit,
            a.x, a.y, a.z,
            n.x, n.y, n.z,
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rodrigues(axis: Vector3<f64>, angle: f64, v: Vector3<f64>) -> Vector3<f64> {
        // Independent axis-angle rotation oracle.
        let k = axis.normalize();
        v * angle.cos() + k.cross(&v) * angle.sin() + k * (k.dot(&v)) * (1.0 - angle.cos())
    }

    #[test]
    fn quat_identity_matrix() {
        assert_eq!(quat_to_matrix(&UnitQuaternion::IDENTITY), Matrix3::identity());
    }

    #[test]
    fn quat_90deg_about_z() {
        let q = UnitQuaternion::new(std::f64::consts::FRAC_PI_4.cos(), 0.0, 0.0, std::f64::consts::FRAC_PI_4.sin());
        let m = quat_to_matrix(&q);
        // First column is the image of e_x.
        assert_relative_eq!(m[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(m[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m[(2, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quat_matrix_matches_axis_angle_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..32 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if axis.norm() < 1e-3 {
                continue;
            }
            let angle = rng.random_range(-PI..PI);
            let q = UnitQuaternion::from_axis_angle(axis, angle);
            let m = quat_to_matrix(&q);
            // Orthonormal with unit determinant.
            assert_relative_eq!((m.transpose() * m), Matrix3::identity(), epsilon = 1e-9);
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-6);
            let v = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            assert_relative_eq!(m * v, rodrigues(axis, angle, v), epsilon = 1e-9);
        }
    }

    #[test]
    fn quat_matrix_roundtrip_up_to_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..64 {
            let q = random_unit_quat(&mut rng);
            let back = matrix_to_quat(&quat_to_matrix(&q));
            let dot = q.w * back.w + q.x * back.x + q.y * back.y + q.z * back.z;
            assert_relative_eq!(dot.abs(), 1.0, epsilon = 1e-9);
        }
    }

    fn test_camera() -> Camera {
        Camera::new(
            100.0,
            100.0,
            50.0,
            50.0,
            100,
            100,
            UnitQuaternion::IDENTITY,
            Vector3::zeros(),
            0.1,
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn project_on_axis() {
        let cam = test_camera();
        let (u, v, d) = project(&Vector3::new(0.0, 0.0, 3.0), &cam).unwrap();
        assert_eq!((u, v, d), (50.0, 50.0, 3.0));
    }

    #[test]
    fn project_hand_pinhole() {
        let cam = test_camera();
        let (u, v, d) = project(&Vector3::new(1.0, 0.0, 2.0), &cam).unwrap();
        assert_eq!((u, v, d), (100.0, 50.0, 2.0));
    }

    #[test]
    fn project_behind_camera_errors() {
        let cam = test_camera();
        let err = project(&Vector3::new(0.0, 0.0, cam.near / 2.0), &cam).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera { .. }));
    }

    #[test]
    fn project_unproject_roundtrip() {
        let spec = SceneSpec::default();
        let scene = generate_scene(&spec).unwrap();
        let cam = &scene.cameras[1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..32 {
            let p = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..1.5),
            );
            let (u, v, d) = project(&p, cam).unwrap();
            let back = unproject(u, v, d, cam);
            assert_relative_eq!(back, p, epsilon = 1e-6);
        }
    }

    #[test]
    fn scene_deterministic() {
        let spec = SceneSpec { seed: 9, ..SceneSpec::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(scene_record(&a), scene_record(&b));
        assert_eq!(a.cameras.len(), spec.camera_count + 1);
    }

    #[test]
    fn scene_single_gaussian() {
        let spec = SceneSpec { n_gaussians: 1, ..SceneSpec::default() };
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.gaussians.len(), 1);
        assert!(spec.palette.iter().any(|p| (p - scene.albedo[0]).norm() == 0.0));
    }

    #[test]
    fn scene_centroid_golden_seed7() {
        let spec = SceneSpec { seed: 7, n_gaussians: 64, ..SceneSpec::default() };
        let scene = generate_scene(&spec).unwrap();
        let c = scene.centroid();
        assert!(c.norm() < spec.extent / 4.0, "centroid {c:?} drifted");
        // Golden pinned from the generator output for this seed.
        let golden =
            Vector3::new(-0.059751190200438065, -0.010871919081973252, 0.6019106766113026);
        assert_relative_eq!(c, golden, epsilon = 1e-12);
    }

    #[test]
    fn scene_properties() {
        let spec = SceneSpec { seed: 11, n_gaussians: 32, ..SceneSpec::default() };
        let scene = generate_scene(&spec).unwrap();
        for g in &scene.gaussians {
            assert!(g.mean.x.abs() <= spec.extent / 2.0);
            assert!(g.mean.y.abs() <= spec.extent / 2.0);
            assert!(g.mean.z.abs() <= spec.extent / 2.0);
        }
        for n in &scene.normal {
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
        }
        // All cameras see the centroid.
        let c = scene.centroid();
        for cam in &scene.cameras {
            let (u, v, _) = project(&c, cam).unwrap();
            assert!(u >= 0.0 && u < cam.width as f64);
            assert!(v >= 0.0 && v < cam.height as f64);
        }
    }

    #[test]
    fn rigid_transform_compose_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..16 {
            let t = RigidTransform::new(
                random_unit_quat(&mut rng),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            );
            let p = Vector3::new(0.3, -0.7, 1.2);
            let q = t.inverse().apply(&t.apply(&p));
            assert_relative_eq!(q, p, epsilon = 1e-12);
            let composed = t.compose(&t.inverse());
            assert_relative_eq!(composed.apply(&p), p, epsilon = 1e-12);
        }
    }
}
