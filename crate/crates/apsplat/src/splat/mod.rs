//! Forward and backward differentiable rasterization of 3D Gaussians into
//! RGB, depth, and alpha images.
//!
//! The 2D footprint comes from the local-affine (Jacobian) projection of the
//! 3D covariance plus a fixed dilation on the diagonal. Gaussians are
//! depth-sorted per camera (ties broken by input index) and composited
//! front-to-back with per-pixel weights `w_i = alpha_i * prod_{j<i}(1 -
//! alpha_j)`. Pixel sample points sit at integer coordinates.

mod backward;

pub use backward::render_backward;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{Camera, UnitQuaternion};
use crate::img::Image;
use crate::util::sigmoid;

/// Opacity logits are clamped to this magnitude before the sigmoid. At the
/// negative cap the contribution underflows below one f64 ulp of the
/// accumulators, so a fully transparent Gaussian renders identically to an
/// omitted one.
pub const OPACITY_LOGIT_CAP: f64 = 40.0;
/// Componentwise bounds on `exp(log_scale)` in meters.
pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1e3;

#[derive(Debug, Error, PartialEq)]
pub enum SplatError {
    #[error("projected covariance of gaussian {index} is not invertible")]
    DegenerateCovariance { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One splatted primitive. Colors are supplied externally at render time;
/// `feature_id` indexes into whatever feature store produces them.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: UnitQuaternion,
    pub opacity_logit: f64,
    pub feature_id: usize,
}

#[derive(Debug, Clone)]
pub struct RenderSettings {
    /// Added to the diagonal of the projected 2D covariance (px^2).
    pub dilation: f64,
    /// Per-sample alpha ceiling; keeps transmittance gradients finite.
    pub alpha_clamp: f64,
    /// Footprint cut-off radius in units of the largest 2D standard deviation.
    pub cull_sigma: f64,
    /// Row count per accumulation tile; gradients reduce in tile order, so
    /// results depend on this constant but never on thread count.
    pub tile_rows: usize,
    /// Parallelize over tiles with rayon.
    pub parallel: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { dilation: 0.3, alpha_clamp: 0.999, cull_sigma: 3.0, tile_rows: 16, parallel: false }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Alpha-weighted expected depth per pixel (meters).
    pub depth: Vec<f64>,
    /// Accumulated compositing weight per pixel, in [0, 1].
    pub alpha: Vec<f64>,
}

/// Analytic gradients of a rendered image w.r.t. every Gaussian parameter,
/// the per-Gaussian colors, and the background color.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub mean: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    /// Gradient w.r.t. the raw (pre-normalization) quaternion, (w, x, y, z).
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    pub background: Vector3<f64>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            background: Vector3::zeros(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for i in 0..self.mean.len() {
            self.mean[i] += other.mean[i];
            self.log_scale[i] += other.log_scale[i];
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k];
            }
            self.opacity_logit[i] += other.opacity_logit[i];
            self.color[i] += other.color[i];
        }
        self.background += other.background;
    }
}

/// Per-gaussian projection state shared by the forward and backward passes.
pub(crate) struct Projected {
    pub idx: usize,
    pub center: Vector2<f64>,
    pub z: f64,
    pub mean_cam: Vector3<f64>,
    /// Projected 2D covariance (after dilation) and its inverse.
    pub inv_cov: Matrix2<f64>,
    pub sigma_cam: Matrix3<f64>,
    pub jac: [[f64; 3]; 2],
    pub rot_mat: Matrix3<f64>,
    /// exp(2 * clamped log_scale) per axis.
    pub scale_sq: Vector3<f64>,
    pub scale_clamped: [bool; 3],
    pub opacity: f64,
    pub logit_clamped: bool,
    pub color: Vector3<f64>,
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

pub(crate) fn project_gaussian(
    idx: usize,
    g: &GaussianPrimitive,
    color: Vector3<f64>,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<Option<Projected>, SplatError> {
    let rot_cam = cam.rotation_matrix();
    let mean_cam = rot_cam * g.mean + cam.translation;
    if mean_cam.z <= cam.near {
        return Ok(None);
    }

    let mut scale_sq = Vector3::zeros();
    let mut scale_clamped = [false; 3];
    for k in 0..3 {
        let s = g.log_scale[k].exp();
        let clamped = s.clamp(SCALE_MIN, SCALE_MAX);
        scale_clamped[k] = clamped != s;
        scale_sq[k] = clamped * clamped;
    }

    let rot_mat = g.rotation.normalized().to_matrix();
    let sigma_world = rot_mat * Matrix3::from_diagonal(&scale_sq) * rot_mat.transpose();
    let sigma_cam = rot_cam * sigma_world * rot_cam.transpose();

    let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
    let jac = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    let mut cov2 = Matrix2::zeros();
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += jac[a][i] * sigma_cam[(i, j)] * jac[b][j];
                }
            }
            cov2[(a, b)] = acc;
        }
    }
    cov2[(0, 0)] += settings.dilation;
    cov2[(1, 1)] += settings.dilation;

    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !det.is_finite() || det <= 0.0 {
        return Err(SplatError::DegenerateCovariance { index: idx });
    }
    let inv_cov = Matrix2::new(
        cov2[(1, 1)] / det,
        -cov2[(0, 1)] / det,
        -cov2[(1, 0)] / det,
        cov2[(0, 0)] / det,
    );

    let trace = cov2[(0, 0)] + cov2[(1, 1)];
    let disc = ((cov2[(0, 0)] - cov2[(1, 1)]).powi(2) + 4.0 * cov2[(0, 1)].powi(2)).sqrt();
    let lambda_max = (0.5 * (trace + disc)).max(0.0);
    let radius = settings.cull_sigma * lambda_max.sqrt();

    let u = cam.fx * x / z + cam.cx;
    let v = cam.fy * y / z + cam.cy;
    let x0 = (u - radius).floor().max(0.0) as i64;
    let x1 = ((u + radius).ceil() as i64).min(cam.width as i64 - 1);
    let y0 = (v - radius).floor().max(0.0) as i64;
    let y1 = ((v + radius).ceil() as i64).min(cam.height as i64 - 1);
    if x0 > x1 || y0 > y1 {
        return Ok(None);
    }

    let logit = g.opacity_logit.clamp(-OPACITY_LOGIT_CAP, OPACITY_LOGIT_CAP);
    Ok(Some(Projected {
        idx,
        center: Vector2::new(u, v),
        z,
        mean_cam,
        inv_cov,
        sigma_cam,
        jac,
        rot_mat,
        scale_sq,
        scale_clamped,
        opacity: sigmoid(logit),
        logit_clamped: logit != g.opacity_logit,
        color,
        x0,
        x1,
        y0,
        y1,
    }))
}

/// Projects, depth-sorts (ties by input index), and drops skipped gaussians.
pub(crate) fn prepare(
    gaussians: &[GaussianPrimitive],
    colors: &[Vector3<f64>],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<Vec<Projected>, SplatError> {
    if gaussians.len() != colors.len() {
        return Err(SplatError::ShapeMismatch(format!(
            "{} gaussians but {} colors",
            gaussians.len(),
            colors.len()
        )));
    }
    let mut projected = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        if let Some(p) = project_gaussian(i, g, colors[i], cam, settings)? {
            projected.push(p);
        }
    }
    projected.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.idx.cmp(&b.idx)));
    Ok(projected)
}

#[inline]
pub(crate) fn sample_alpha(p: &Projected, px: f64, py: f64, settings: &RenderSettings) -> f64 {
    let dx = px - p.center.x;
    let dy = py - p.center.y;
    let q = p.inv_cov[(0, 0)] * dx * dx
        + (p.inv_cov[(0, 1)] + p.inv_cov[(1, 0)]) * dx * dy
        + p.inv_cov[(1, 1)] * dy * dy;
    (p.opacity * (-0.5 * q).exp()).min(settings.alpha_clamp)
}

fn render_rows(
    projected: &[Projected],
    background: Vector3<f64>,
    settings: &RenderSettings,
    width: usize,
    y_range: std::ops::Range<usize>,
    rgb: &mut [f64],
    depth: &mut [f64],
    alpha: &mut [f64],
) {
    for (row_off, y) in y_range.enumerate() {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let mut transmittance = 1.0f64;
            let mut c = Vector3::zeros();
            let mut d = 0.0f64;
            for p in projected {
                if (x as i64) < p.x0 || (x as i64) > p.x1 || (y as i64) < p.y0 || (y as i64) > p.y1
                {
                    continue;
                }
                let a = sample_alpha(p, px, py, settings);
                let w = a * transmittance;
                c += p.color * w;
                d += p.z * w;
                transmittance *= 1.0 - a;
            }
            c += background * transmittance;
            let i = row_off * width + x;
            rgb[3 * i] = c.x;
            rgb[3 * i + 1] = c.y;
            rgb[3 * i + 2] = c.z;
            depth[i] = d;
            alpha[i] = 1.0 - transmittance;
        }
    }
}

/// Front-to-back alpha compositing over the depth-sorted footprint. Empty
/// input renders the background with zero alpha.
pub fn render(
    gaussians: &[GaussianPrimitive],
    colors: &[Vector3<f64>],
    cam: &Camera,
    background: Vector3<f64>,
    settings: &RenderSettings,
) -> Result<RenderOutput, SplatError> {
    let projected = prepare(gaussians, colors, cam, settings)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut rgb = Image::new(w, h);
    let mut depth = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];

    let tile_rows = settings.tile_rows.max(1);
    // Tiles are contiguous row bands; each owns disjoint output slices, so
    // parallel and sequential execution produce identical bits.
    let bands: Vec<(usize, &mut [f64], &mut [f64], &mut [f64])> = {
        let mut out = Vec::new();
        let mut rgb_rest: &mut [f64] = &mut rgb.data;
        let mut depth_rest: &mut [f64] = &mut depth;
        let mut alpha_rest: &mut [f64] = &mut alpha;
        let mut y = 0;
        while y < h {
            let rows = tile_rows.min(h - y);
            let (rgb_band, r1) = rgb_rest.split_at_mut(rows * w * 3);
            let (depth_band, r2) = depth_rest.split_at_mut(rows * w);
            let (alpha_band, r3) = alpha_rest.split_at_mut(rows * w);
            rgb_rest = r1;
            depth_rest = r2;
            alpha_rest = r3;
            out.push((y, rgb_band, depth_band, alpha_band));
            y += rows;
        }
        out
    };

    let run = |(y, rgb_band, depth_band, alpha_band): (usize, &mut [f64], &mut [f64], &mut [f64])| {
        let rows = depth_band.len() / w;
        render_rows(&projected, background, settings, w, y..y + rows, rgb_band, depth_band, alpha_band);
    };
    if settings.parallel {
        bands.into_par_iter().for_each(run);
    } else {
        bands.into_iter().for_each(run);
    }

    Ok(RenderOutput { rgb, depth, alpha })
}
