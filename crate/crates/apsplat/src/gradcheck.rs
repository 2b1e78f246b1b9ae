//! Central finite-difference oracles for every analytic backward pass.
//!
//! These harnesses build randomized problems, evaluate the hand-derived
//! gradients, and compare them against central differences of the scalar
//! loss `sum(upstream * output)`. They live in the library (not under
//! `cfg(test)`) so both unit tests and the acceptance suite drive the same
//! code; nothing in the forward/backward implementations depends on them.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{Camera, UnitQuaternion};
use crate::img::Image;
use crate::net::{
    mlp_backward, mlp_forward, mlp_init, Activation, MlpParams, MlpSpec, Norm, Tensor,
};
use crate::splat::{render, render_backward, GaussianPrimitive, RenderSettings};
use crate::util::max_rel_err;

/// Randomized rasterizer scene placed safely inside a 16x16 view with
/// moderate opacities (no alpha clamping) and well-separated depths.
pub fn splat_fd_scene(
    seed: u64,
    n: usize,
) -> (Vec<GaussianPrimitive>, Vec<Vector3<f64>>, Camera, Vector3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(
        18.0,
        18.0,
        8.0,
        8.0,
        16,
        16,
        UnitQuaternion::new(0.92, 0.05, -0.1, 0.37),
        Vector3::new(0.05, -0.1, 0.2),
        0.1,
        1000.0,
    )
    .unwrap();
    let inv_rot = cam.rotation.conjugate();
    let mut gaussians = Vec::new();
    let mut colors = Vec::new();
    for i in 0..n {
        // Construct in camera space, then pull back to world.
        let pc = Vector3::new(
            rng.random_range(-0.7..0.7),
            rng.random_range(-0.7..0.7),
            3.0 + 1.5 * i as f64 + rng.random_range(0.0..0.5),
        );
        let mean = inv_rot.rotate(&(pc - cam.translation));
        let q = UnitQuaternion {
            w: rng.random_range(-1.0..1.0),
            x: rng.random_range(-1.0..1.0),
            y: rng.random_range(-1.0..1.0),
            z: rng.random_range(-1.0..1.0),
        };
        let q = if q.norm() < 0.3 { UnitQuaternion::IDENTITY } else { q };
        gaussians.push(GaussianPrimitive {
            mean,
            log_scale: Vector3::new(
                rng.random_range(-1.6..-0.8),
                rng.random_range(-1.6..-0.8),
                rng.random_range(-2.2..-1.4),
            ),
            rotation: q,
            opacity_logit: rng.random_range(-0.5..1.5),
            feature_id: i,
        });
        colors.push(Vector3::new(rng.random(), rng.random(), rng.random()));
    }
    let bg = Vector3::new(0.3, 0.25, 0.35);
    (gaussians, colors, cam, bg)
}

/// Finite-difference check of the rasterizer backward pass over every
/// parameter group (mean, log-scale, rotation, opacity logit, color,
/// background). Panics when the worst relative error reaches `tol`; returns
/// the worst error otherwise.
pub fn splat_gradcheck(seed: u64, n: usize, tol: f64) -> f64 {
    let (gaussians, colors, cam, bg) = splat_fd_scene(seed, n);
    // Large cull radius keeps the footprint cutoff out of the FD path.
    let settings = RenderSettings { cull_sigma: 9.0, ..RenderSettings::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut upstream = Image::new(cam.width as usize, cam.height as usize);
    for v in &mut upstream.data {
        *v = rng.random_range(-1.0..1.0);
    }

    let loss = |g: &[GaussianPrimitive], c: &[Vector3<f64>], b: Vector3<f64>| -> f64 {
        let out = render(g, c, &cam, b, &settings).unwrap();
        out.rgb.data.iter().zip(&upstream.data).map(|(a, u)| a * u).sum()
    };
    let fd = |mutate: &dyn Fn(&mut Vec<GaussianPrimitive>, &mut Vec<Vector3<f64>>, &mut Vector3<f64>, f64)| -> f64 {
        let h = 1e-4;
        let eval = |delta: f64| {
            let mut g = gaussians.clone();
            let mut c = colors.clone();
            let mut b = bg;
            mutate(&mut g, &mut c, &mut b, delta);
            loss(&g, &c, b)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    };

    let grads = render_backward(&gaussians, &colors, &cam, bg, &settings, &upstream).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..gaussians.len() {
        for k in 0..3 {
            analytic.push(grads.mean[i][k]);
            numeric.push(fd(&|g, _, _, d| g[i].mean[k] += d));
        }
        for k in 0..3 {
            analytic.push(grads.log_scale[i][k]);
            numeric.push(fd(&|g, _, _, d| g[i].log_scale[k] += d));
        }
        for k in 0..4 {
            analytic.push(grads.rotation[i][k]);
            numeric.push(fd(&|g, _, _, d| match k {
                0 => g[i].rotation.w += d,
                1 => g[i].rotation.x += d,
                2 => g[i].rotation.y += d,
                _ => g[i].rotation.z += d,
            }));
        }
        analytic.push(grads.opacity_logit[i]);
        numeric.push(fd(&|g, _, _, d| g[i].opacity_logit += d));
        for k in 0..3 {
            analytic.push(grads.color[i][k]);
            numeric.push(fd(&|_, c, _, d| c[i][k] += d));
        }
    }
    for k in 0..3 {
        analytic.push(grads.background[k]);
        numeric.push(fd(&|_, _, b, d| b[k] += d));
    }

    let err = max_rel_err(&analytic, &numeric, 1e-7);
    assert!(err < tol, "seed {seed}: rasterizer gradient error {err:.3e} >= {tol:.0e}");
    err
}

/// Finite-difference check of a 3-layer layernorm+gelu MLP, over all
/// parameters and the input batch.
pub fn mlp_gradcheck(seed: u64, tol: f64) -> f64 {
    let spec = MlpSpec::new(
        vec![6, 10, 8, 4],
        vec![Activation::Gelu, Activation::Gelu, Activation::None],
        vec![Norm::LayerNorm, Norm::LayerNorm, Norm::None],
        seed,
    )
    .unwrap();
    let params = mlp_init(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let batch = 3;
    let x = Tensor::from_values(
        &[batch, 6],
        (0..batch * 6).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let upstream = Tensor::from_values(
        &[batch, 4],
        (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let loss = |p: &MlpParams, xin: &Tensor| -> f64 {
        let (y, _) = mlp_forward(&spec, p, xin).unwrap();
        y.values.iter().zip(&upstream.values).map(|(a, b)| a * b).sum()
    };

    let (_, cache) = mlp_forward(&spec, &params, &x).unwrap();
    let (grads, dx) = mlp_backward(&spec, &params, &cache, &upstream).unwrap();

    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    // Mutating closure over any tensor inside MlpParams, addressed by a
    // selector function.
    type Select = fn(&mut MlpParams, usize) -> &mut Tensor;
    let select_weight: Select = |p, l| &mut p.layers[l].weight;
    let select_bias: Select = |p, l| &mut p.layers[l].bias;
    let select_gain: Select = |p, l| p.layers[l].ln_gain.as_mut().unwrap();
    let select_offset: Select = |p, l| p.layers[l].ln_offset.as_mut().unwrap();

    for (li, layer) in grads.layers.iter().enumerate() {
        let mut groups: Vec<(&Tensor, Select)> =
            vec![(&layer.weight, select_weight), (&layer.bias, select_bias)];
        if let Some(g) = &layer.ln_gain {
            groups.push((g, select_gain));
        }
        if let Some(o) = &layer.ln_offset {
            groups.push((o, select_offset));
        }
        for (gt, select) in groups {
            for vi in 0..gt.values.len() {
                analytic.push(gt.values[vi]);
                let mut plus = params.clone();
                select(&mut plus, li).values[vi] += h;
                let mut minus = params.clone();
                select(&mut minus, li).values[vi] -= h;
                numeric.push((loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h));
            }
        }
    }
    for vi in 0..x.values.len() {
        analytic.push(dx.values[vi]);
        let mut plus = x.clone();
        plus.values[vi] += h;
        let mut minus = x.clone();
        minus.values[vi] -= h;
        numeric.push((loss(&params, &plus) - loss(&params, &minus)) / (2.0 * h));
    }

    let err = max_rel_err(&analytic, &numeric, 1e-7);
    assert!(err < tol, "seed {seed}: mlp gradient error {err:.3e} >= {tol:.0e}");
    err
}
