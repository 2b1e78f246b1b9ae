//! Analytic backward pass for the rasterizer.
//!
//! Per pixel, the forward compositing is replayed to record contributions,
//! then a reverse sweep distributes the upstream RGB gradient onto alpha and
//! color: d rgb/d alpha_i = T_i c_i - S_i / (1 - alpha_i) with S_i the color
//! sum behind gaussian i (including the background term). The per-gaussian
//! chain (inverse covariance -> 2D covariance -> camera covariance -> world
//! covariance -> scales/rotation, plus the projection Jacobian paths) runs
//! once per visible gaussian afterwards.
//!
//! Accumulation is tiled over row bands and reduced in tile order, so the
//! result depends on the tile height constant but not on thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{
    prepare, sample_alpha, GaussianPrimitive, Projected, RenderSettings, SplatError,
    SplatGradients,
};
use crate::geom::Camera;
use crate::img::Image;

struct TileGrads {
    color: Vec<Vector3<f64>>,
    center: Vec<Vector2<f64>>,
    inv_cov: Vec<Matrix2<f64>>,
    logit: Vec<f64>,
    background: Vector3<f64>,
}

impl TileGrads {
    fn zeros(n: usize) -> Self {
        Self {
            color: vec![Vector3::zeros(); n],
            center: vec![Vector2::zeros(); n],
            inv_cov: vec![Matrix2::zeros(); n],
            logit: vec![0.0; n],
            background: Vector3::zeros(),
        }
    }

    fn add_assign(&mut self, o: &TileGrads) {
        for i in 0..self.color.len() {
            self.color[i] += o.color[i];
            self.center[i] += o.center[i];
            self.inv_cov[i] += o.inv_cov[i];
            self.logit[i] += o.logit[i];
        }
        self.background += o.background;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    transmittance: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

fn tile_backward(
    projected: &[Projected],
    d_rgb: &Image,
    background: Vector3<f64>,
    settings: &RenderSettings,
    y_range: std::ops::Range<usize>,
) -> TileGrads {
    let width = d_rgb.width;
    let mut grads = TileGrads::zeros(projected.len());
    let mut contribs: Vec<Contribution> = Vec::with_capacity(projected.len());

    for y in y_range {
        for x in 0..width {
            let upstream = d_rgb.get(x, y);
            let (px, py) = (x as f64, y as f64);

            contribs.clear();
            let mut transmittance = 1.0f64;
            for (slot, p) in projected.iter().enumerate() {
                if (x as i64) < p.x0 || (x as i64) > p.x1 || (y as i64) < p.y0 || (y as i64) > p.y1
                {
                    continue;
                }
                let a = sample_alpha(p, px, py, settings);
                contribs.push(Contribution {
                    slot,
                    alpha: a,
                    transmittance,
                    clamped: a == settings.alpha_clamp,
                    dx: px - p.center.x,
                    dy: py - p.center.y,
                });
                transmittance *= 1.0 - a;
            }

            grads.background += upstream * transmittance;

            // Suffix starts with the background contribution behind the
            // last gaussian, then walks front as gaussians are popped.
            let mut suffix = background * transmittance;
            for c in contribs.iter().rev() {
                let p = &projected[c.slot];
                let w = c.alpha * c.transmittance;
                grads.color[c.slot] += upstream * w;

                if !c.clamped {
                    let d_alpha =
                        upstream.dot(&(p.color * c.transmittance - suffix / (1.0 - c.alpha)));
                    // alpha = opacity * exp(-q/2); express the partials in
                    // terms of alpha itself.
                    if !p.logit_clamped {
                        grads.logit[c.slot] += d_alpha * c.alpha * (1.0 - p.opacity);
                    }
                    let dq = d_alpha * (-0.5 * c.alpha);
                    let m = &p.inv_cov;
                    let d_dx = dq * (2.0 * m[(0, 0)] * c.dx + (m[(0, 1)] + m[(1, 0)]) * c.dy);
                    let d_dy = dq * (2.0 * m[(1, 1)] * c.dy + (m[(0, 1)] + m[(1, 0)]) * c.dx);
                    grads.center[c.slot] += Vector2::new(-d_dx, -d_dy);
                    grads.inv_cov[c.slot] += Matrix2::new(
                        dq * c.dx * c.dx,
                        dq * c.dx * c.dy,
                        dq * c.dx * c.dy,
                        dq * c.dy * c.dy,
                    );
                }

                suffix += p.color * w;
            }
        }
    }
    grads
}

/// Rotation-matrix gradient pulled back to the raw quaternion (w, x, y, z),
/// including the normalization step.
fn quat_backward(raw: &crate::geom::UnitQuaternion, d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = raw.norm();
    let q = raw.normalized();
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let g = d_rot;

    let dw = g[(0, 1)] * (-2.0 * z)
        + g[(0, 2)] * (2.0 * y)
        + g[(1, 0)] * (2.0 * z)
        + g[(1, 2)] * (-2.0 * x)
        + g[(2, 0)] * (-2.0 * y)
        + g[(2, 1)] * (2.0 * x);
    let dx = g[(0, 1)] * (2.0 * y)
        + g[(0, 2)] * (2.0 * z)
        + g[(1, 0)] * (2.0 * y)
        + g[(1, 1)] * (-4.0 * x)
        + g[(1, 2)] * (-2.0 * w)
        + g[(2, 0)] * (2.0 * z)
        + g[(2, 1)] * (2.0 * w)
        + g[(2, 2)] * (-4.0 * x);
    let dy = g[(0, 0)] * (-4.0 * y)
        + g[(0, 1)] * (2.0 * x)
        + g[(0, 2)] * (2.0 * w)
        + g[(1, 0)] * (2.0 * x)
        + g[(1, 2)] * (2.0 * z)
        + g[(2, 0)] * (-2.0 * w)
        + g[(2, 1)] * (2.0 * z)
        + g[(2, 2)] * (-4.0 * y);
    let dz = g[(0, 0)] * (-4.0 * z)
        + g[(0, 1)] * (-2.0 * w)
        + g[(0, 2)] * (2.0 * x)
        + g[(1, 0)] * (2.0 * w)
        + g[(1, 1)] * (-4.0 * z)
        + g[(1, 2)] * (2.0 * y)
        + g[(2, 0)] * (2.0 * x)
        + g[(2, 1)] * (2.0 * y);

    // Through q = raw / |raw|: dL/draw = (I - q q^T) dL/dq / |raw|.
    let gu = [dw, dx, dy, dz];
    let qv = [w, x, y, z];
    let dot: f64 = gu.iter().zip(&qv).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (gu[k] - qv[k] * dot) / n;
    }
    out
}

/// Analytic gradients of the composited image w.r.t. every Gaussian
/// parameter, the colors, and the background, given the upstream gradient of
/// the RGB output. Depth and alpha outputs carry no upstream here.
pub fn render_backward(
    gaussians: &[GaussianPrimitive],
    colors: &[Vector3<f64>],
    cam: &Camera,
    background: Vector3<f64>,
    settings: &RenderSettings,
    d_rgb: &Image,
) -> Result<SplatGradients, SplatError> {
    if d_rgb.width != cam.width as usize || d_rgb.height != cam.height as usize {
        return Err(SplatError::ShapeMismatch(format!(
            "upstream gradient is {}x{}, camera is {}x{}",
            d_rgb.width, d_rgb.height, cam.width, cam.height
        )));
    }
    let projected = prepare(gaussians, colors, cam, settings)?;
    let height = cam.height as usize;
    let tile_rows = settings.tile_rows.max(1);
    let ranges: Vec<std::ops::Range<usize>> = (0..height)
        .step_by(tile_rows)
        .map(|y| y..(y + tile_rows).min(height))
        .collect();

    let tiles: Vec<TileGrads> = if settings.parallel {
        ranges
            .into_par_iter()
            .map(|r| tile_backward(&projected, d_rgb, background, settings, r))
            .collect()
    } else {
        ranges
            .into_iter()
            .map(|r| tile_backward(&projected, d_rgb, background, settings, r))
            .collect()
    };
    let mut acc = TileGrads::zeros(projected.len());
    for t in &tiles {
        acc.add_assign(t);
    }

    let mut grads = SplatGradients::zeros(gaussians.len());
    grads.background = acc.background;

    let rot_cam = cam.rotation_matrix();
    for (slot, p) in projected.iter().enumerate() {
        let i = p.idx;
        grads.color[i] = acc.color[slot];
        grads.opacity_logit[i] = acc.logit[slot];

        // inverse covariance -> 2D covariance: dL/dS = -M G M with M = S^-1.
        let m = p.inv_cov;
        let d_cov2 = -m * acc.inv_cov[slot] * m;

        // 2D covariance -> camera covariance and Jacobian.
        let j = p.jac;
        let mut d_sigma_cam = Matrix3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        s += j[r][a] * d_cov2[(r, c)] * j[c][b];
                    }
                }
                d_sigma_cam[(a, b)] = s;
            }
        }
        // dL/dJ = 2 * d_cov2 * J * sigma_cam (d_cov2 symmetric).
        let mut d_jac = [[0.0f64; 3]; 2];
        for r in 0..2 {
            for cidx in 0..3 {
                let mut s = 0.0;
                for c2 in 0..2 {
                    for k in 0..3 {
                        s += 2.0 * d_cov2[(r, c2)] * j[c2][k] * p.sigma_cam[(k, cidx)];
                    }
                }
                d_jac[r][cidx] = s;
            }
        }

        // camera covariance -> world covariance -> scales and rotation.
        let d_sigma_w = rot_cam.transpose() * d_sigma_cam * rot_cam;
        let rg = p.rot_mat;
        let d_diag = rg.transpose() * d_sigma_w * rg;
        for k in 0..3 {
            if !p.scale_clamped[k] {
                grads.log_scale[i][k] = d_diag[(k, k)] * 2.0 * p.scale_sq[k];
            }
        }
        let d_rg = 2.0 * d_sigma_w * rg * Matrix3::from_diagonal(&p.scale_sq);
        grads.rotation[i] = quat_backward(&gaussians[i].rotation, &d_rg);

        // center and Jacobian -> camera-space mean -> world mean.
        let (x, y, z) = (p.mean_cam.x, p.mean_cam.y, p.mean_cam.z);
        let d_center = acc.center[slot];
        let mut d_mc = Vector3::new(
            d_center.x * cam.fx / z,
            d_center.y * cam.fy / z,
            d_center.x * (-cam.fx * x / (z * z)) + d_center.y * (-cam.fy * y / (z * z)),
        );
        d_mc.x += d_jac[0][2] * (-cam.fx / (z * z));
        d_mc.y += d_jac[1][2] * (-cam.fy / (z * z));
        d_mc.z += d_jac[0][0] * (-cam.fx / (z * z))
            + d_jac[0][2] * (2.0 * cam.fx * x / (z * z * z))
            + d_jac[1][1] * (-cam.fy / (z * z))
            + d_jac[1][2] * (2.0 * cam.fy * y / (z * z * z));

        grads.mean[i] = rot_cam.transpose() * d_mc;
    }

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{splat_fd_scene, splat_gradcheck};
    use crate::splat::{render, OPACITY_LOGIT_CAP};

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (gaussians, colors, cam, bg) = splat_fd_scene(1, 3);
        let upstream = Image::new(cam.width as usize, cam.height as usize);
        let grads =
            render_backward(&gaussians, &colors, &cam, bg, &RenderSettings::default(), &upstream)
                .unwrap();
        assert!(grads.mean.iter().all(|v| v.norm() == 0.0));
        assert!(grads.color.iter().all(|v| v.norm() == 0.0));
        assert!(grads.opacity_logit.iter().all(|&v| v == 0.0));
        assert_eq!(grads.background, Vector3::zeros());
    }

    #[test]
    fn single_gaussian_color_gradient_is_weight_sum() {
        let (gaussians, colors, cam, bg) = splat_fd_scene(2, 1);
        let settings = RenderSettings::default();
        // Loss = sum over pixels and channels of rgb -> upstream all ones.
        let upstream = Image::filled(cam.width as usize, cam.height as usize, Vector3::new(1.0, 1.0, 1.0));
        let grads = render_backward(&gaussians, &colors, &cam, bg, &settings, &upstream).unwrap();
        // With a single gaussian, w(p) = alpha(p); the alpha image is the sum
        // of weights directly.
        let out = render(&gaussians, &colors, &cam, bg, &settings).unwrap();
        let weight_sum: f64 = out.alpha.iter().sum();
        for k in 0..3 {
            approx::assert_relative_eq!(grads.color[0][k], weight_sum, epsilon = 1e-10);
        }
    }

    #[test]
    fn finite_difference_check_seed0() {
        splat_gradcheck(0, 3, 1e-3);
    }

    #[test]
    fn capped_logit_gets_zero_gradient() {
        let (mut gaussians, colors, cam, bg) = splat_fd_scene(4, 2);
        gaussians[0].opacity_logit = OPACITY_LOGIT_CAP + 5.0;
        let mut upstream = Image::new(cam.width as usize, cam.height as usize);
        for v in &mut upstream.data {
            *v = 0.5;
        }
        let grads =
            render_backward(&gaussians, &colors, &cam, bg, &RenderSettings::default(), &upstream)
                .unwrap();
        assert_eq!(grads.opacity_logit[0], 0.0);
    }
}
