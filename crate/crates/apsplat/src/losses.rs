//! Training losses and the paired training loop.
//!
//! Each step relights one scene under two sampled lights, runs both streams
//! on shared geometry with independent features and embeddings, renders the
//! base/adapted images plus one randomly directed cross render, and applies
//! the weighted objective
//!
//!   L = lm*L_mse + ls*L_depth + b1*L_inv + b2*L_aug + b3*L_swap + b4*L_base
//!
//! Gradient routing: L_mse / L_aug / L_swap reach only adapted-stream color
//! evaluations, L_inv / L_base only base-stream evaluations. The base
//! evaluation feeds a constant zero into the embedding slot, so no base loss
//! can move an embedding. The LPIPS and dynamic-mask weights are carried for
//! fidelity to the full objective but multiply a constant zero here.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::appearance::{
    assign_patches, encode_appearance_backward, extract_tokens_backward, factored_colors,
    factored_colors_backward, AppearanceEmbedding, AppearanceError, AppearanceModel, ColorPair,
    GaussianFeatures, ModelGrads, TokenGrid,
};
use crate::geom::{generate_scene, GeomError, Scene, SceneSpec};
use crate::img::Image;
use crate::net::{adam_step, AdamState, NetError};
use crate::relight::{
    make_pair_cached, sample_light, scene_intrinsics, LightRanges, PairedSample, RelightError,
    SceneIntrinsics,
};
use crate::splat::{render, render_backward, RenderSettings, SplatError};
use crate::util::sigmoid;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing loss term: {0}")]
    MissingTerm(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Relight(#[from] RelightError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Coefficients of the full objective. `lambda_p` (perceptual) and
/// `lambda_d` (dynamic mask) are carried but inert at this scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 5.0,
            lambda_p: 0.05,
            lambda_d: 0.05,
            lambda_s: 0.1,
            beta1: 1.0,
            beta2: 5.0,
            beta3: 0.5,
            beta4: 0.5,
        }
    }
}

fn mse_images(a: &Image, b: &Image) -> Result<f64, TrainError> {
    if !a.same_size(b) {
        return Err(TrainError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(a.mse(b))
}

/// Base invariance: the two base renders should match each other.
pub fn loss_inv(base_src: &Image, base_aug: &Image) -> Result<f64, TrainError> {
    mse_images(base_src, base_aug)
}

/// Augmented reconstruction: the adapted render must reproduce its target.
pub fn loss_aug(ada_aug: &Image, target_aug: &Image) -> Result<f64, TrainError> {
    mse_images(ada_aug, target_aug)
}

/// Base color consistency against the ground-truth albedo render.
pub fn loss_base(base_src: &Image, albedo: &Image) -> Result<f64, TrainError> {
    mse_images(base_src, albedo)
}

/// Cross-appearance reconstruction against the target matching the
/// embedding's source.
pub fn loss_swap(cross: &Image, target: &Image) -> Result<f64, TrainError> {
    mse_images(cross, target)
}

pub fn mse_planes(a: &[f64], b: &[f64]) -> Result<f64, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::ShapeMismatch(format!("{} vs {} depths", a.len(), b.len())));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// One of the two cross-appearance directions; exactly one is trained per
/// step (both give equivalent gradient signal in expectation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapDirection {
    /// Augmented features rendered with the source embedding; target is the
    /// source image.
    AugFeaturesSrcEmbedding,
    /// Source features rendered with the augmented embedding; target is the
    /// augmented image.
    SrcFeaturesAugEmbedding,
}

/// Fair coin from the dedicated swap RNG stream.
pub fn draw_swap_direction(rng: &mut ChaCha8Rng) -> SwapDirection {
    if rng.random::<bool>() {
        SwapDirection::AugFeaturesSrcEmbedding
    } else {
        SwapDirection::SrcFeaturesAugEmbedding
    }
}

/// Raw (unweighted) loss terms. NaN marks a term that was never computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    pub depth: f64,
    pub inv: f64,
    pub aug: f64,
    pub swap: f64,
    pub base: f64,
}

impl LossTerms {
    pub fn all(v: f64) -> Self {
        Self { mse: v, depth: v, inv: v, aug: v, swap: v, base: v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub weighted_mse: f64,
    pub weighted_depth: f64,
    pub weighted_inv: f64,
    pub weighted_aug: f64,
    pub weighted_swap: f64,
    pub weighted_base: f64,
    /// Inert at this scale; always false.
    pub lpips_active: bool,
    pub dyn_active: bool,
}

/// Weighted objective. The perceptual and dynamic slots contribute exactly
/// zero; their weights are carried in [`LossWeights`] only.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(f64, LossBreakdown), TrainError> {
    for (name, v) in [
        ("mse", terms.mse),
        ("depth", terms.depth),
        ("inv", terms.inv),
        ("aug", terms.aug),
        ("swap", terms.swap),
        ("base", terms.base),
    ] {
        if v.is_nan() {
            return Err(TrainError::MissingTerm(name.into()));
        }
    }
    let b = LossBreakdown {
        weighted_mse: weights.lambda_m * terms.mse,
        weighted_depth: weights.lambda_s * terms.depth,
        weighted_inv: weights.beta1 * terms.inv,
        weighted_aug: weights.beta2 * terms.aug,
        weighted_swap: weights.beta3 * terms.swap,
        weighted_base: weights.beta4 * terms.base,
        lpips_active: false,
        dyn_active: false,
        total: 0.0,
    };
    let total = b.weighted_mse
        + b.weighted_depth
        + b.weighted_inv
        + b.weighted_aug
        + b.weighted_swap
        + b.weighted_base;
    Ok((total, LossBreakdown { total, ..b }))
}

/// A scene prepared for training/evaluation: generated geometry, cached
/// intrinsics per camera, ground-truth depth per camera, and the fixed
/// per-Gaussian patch assignment on the reference (first ring) camera.
#[derive(Debug, Clone)]
pub struct ScenePack {
    pub scene: Scene,
    pub intrinsics: SceneIntrinsics,
    pub gt_depth: Vec<Vec<f64>>,
    pub patch_ids: Vec<usize>,
}

pub fn prepare_scene(
    spec: &SceneSpec,
    patch: usize,
    settings: &RenderSettings,
    data_background: Vector3<f64>,
) -> Result<ScenePack, TrainError> {
    let scene = generate_scene(spec)?;
    let intrinsics = scene_intrinsics(&scene, settings, data_background)?;
    let mut gt_depth = Vec::with_capacity(scene.cameras.len());
    for cam in &scene.cameras {
        let out = render(&scene.gaussians, &scene.albedo, cam, data_background, settings)?;
        gt_depth.push(out.depth);
    }
    let patch_ids = assign_patches(&scene.gaussians, &scene.cameras[0], patch);
    Ok(ScenePack { scene, intrinsics, gt_depth, patch_ids })
}

/// Renders the scene with adapted colors computed from the given features
/// and embedding. Passing the zero embedding yields the base render.
pub fn render_stream(
    model: &AppearanceModel,
    pack: &ScenePack,
    features: &[GaussianFeatures],
    a: &AppearanceEmbedding,
    cam_index: usize,
    settings: &RenderSettings,
) -> Result<crate::splat::RenderOutput, TrainError> {
    let (pairs, _) = factored_colors(features, a, &model.head_spec, &model.head)?;
    let colors: Vec<Vector3<f64>> = pairs.iter().map(|p| p.ada).collect();
    let out = render(
        &pack.scene.gaussians,
        &colors,
        &pack.scene.cameras[cam_index],
        model.background(),
        settings,
    )?;
    Ok(out)
}

/// Probe for the base-invariance loss of a fixed pair: mean over ring
/// cameras of the MSE between the two base renders. Deterministic.
pub fn probe_inv_loss(
    model: &AppearanceModel,
    pack: &ScenePack,
    pair: &PairedSample,
    settings: &RenderSettings,
) -> Result<f64, TrainError> {
    let ring = pack.scene.ring_cameras().len();
    let (feat_src, _) = model.gaussian_features(&pair.src[0], &pack.patch_ids)?;
    let (feat_aug, _) = model.gaussian_features(&pair.aug[0], &pack.patch_ids)?;
    let zero = AppearanceEmbedding::zero(model.dims.d_embed);
    let mut acc = 0.0;
    for cam in 0..ring {
        let base_src = render_stream(model, pack, &feat_src, &zero, cam, settings)?;
        let base_aug = render_stream(model, pack, &feat_aug, &zero, cam, settings)?;
        acc += loss_inv(&base_src.rgb, &base_aug.rgb)?;
    }
    Ok(acc / ring as f64)
}

/// Forward-only evaluation of every loss term on a fixed pair, camera, and
/// swap direction. Deterministic; used as a descent probe by tests and the
/// acceptance suite.
pub fn evaluate_losses(
    model: &AppearanceModel,
    pack: &ScenePack,
    pair: &PairedSample,
    cam_index: usize,
    direction: SwapDirection,
    weights: &LossWeights,
    settings: &RenderSettings,
) -> Result<(f64, LossTerms), TrainError> {
    let scene = &pack.scene;
    let ring = scene.ring_cameras().len();
    let (a_src, _, _) = model.embedding(&pair.src[..ring])?;
    let (a_aug, _, _) = model.embedding(&pair.aug[..ring])?;
    let (feat_src, _) = model.gaussian_features(&pair.src[0], &pack.patch_ids)?;
    let (feat_aug, _) = model.gaussian_features(&pair.aug[0], &pack.patch_ids)?;
    let zero = AppearanceEmbedding::zero(model.dims.d_embed);

    let base_src = render_stream(model, pack, &feat_src, &zero, cam_index, settings)?;
    let ada_src = render_stream(model, pack, &feat_src, &a_src, cam_index, settings)?;
    let base_aug = render_stream(model, pack, &feat_aug, &zero, cam_index, settings)?;
    let ada_aug = render_stream(model, pack, &feat_aug, &a_aug, cam_index, settings)?;
    let (cross, swap_target) = match direction {
        SwapDirection::AugFeaturesSrcEmbedding => (
            render_stream(model, pack, &feat_aug, &a_src, cam_index, settings)?,
            &pair.src[cam_index],
        ),
        SwapDirection::SrcFeaturesAugEmbedding => (
            render_stream(model, pack, &feat_src, &a_aug, cam_index, settings)?,
            &pair.aug[cam_index],
        ),
    };

    let terms = LossTerms {
        mse: mse_images(&ada_src.rgb, &pair.src[cam_index])?,
        depth: mse_planes(&ada_src.depth, &pack.gt_depth[cam_index])?,
        inv: loss_inv(&base_src.rgb, &base_aug.rgb)?,
        aug: loss_aug(&ada_aug.rgb, &pair.aug[cam_index])?,
        swap: loss_swap(&cross.rgb, swap_target)?,
        base: loss_base(&base_src.rgb, &pack.intrinsics.per_camera[cam_index].albedo)?,
    };
    let (total, _) = total_loss(&terms, weights)?;
    Ok((total, terms))
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
    pub direction: SwapDirection,
    pub scene_index: usize,
    pub camera_index: usize,
}

/// Paired training loop driver. Deterministic for a fixed seed in
/// single-threaded mode: scene choice is round-robin, the supervised camera
/// and the light pair come from the data RNG stream, the swap coin from its
/// own stream.
pub struct Trainer {
    pub model: AppearanceModel,
    pub scenes: Vec<ScenePack>,
    pub weights: LossWeights,
    pub light_ranges: LightRanges,
    pub settings: RenderSettings,
    pub data_background: Vector3<f64>,
    opt: AdamState,
    rng_data: ChaCha8Rng,
    rng_swap: ChaCha8Rng,
    step_count: u64,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: AppearanceModel,
        scenes: Vec<ScenePack>,
        weights: LossWeights,
        light_ranges: LightRanges,
        settings: RenderSettings,
        data_background: Vector3<f64>,
        lr: f64,
        seed: u64,
    ) -> Self {
        let sizes: Vec<usize> = {
            let grads = ModelGrads::zeros_like(&model);
            grads.slices().iter().map(|s| s.len()).collect()
        };
        Self {
            model,
            scenes,
            weights,
            light_ranges,
            settings,
            data_background,
            opt: AdamState::new(lr, &sizes),
            rng_data: ChaCha8Rng::seed_from_u64(seed),
            rng_swap: ChaCha8Rng::seed_from_u64(seed ^ 0x5f3759df),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Draws a fresh light pair for the given scene, deterministic in the
    /// data RNG stream.
    fn sample_pair(&mut self, scene_index: usize) -> PairedSample {
        let light_src = sample_light(&mut self.rng_data, &self.light_ranges);
        let light_aug = sample_light(&mut self.rng_data, &self.light_ranges);
        let pack = &self.scenes[scene_index];
        make_pair_cached(&pack.scene, &pack.intrinsics, &light_src, &light_aug, self.data_background)
    }

    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        assert!(!self.scenes.is_empty(), "trainer needs at least one scene");
        let scene_index = (self.step_count as usize) % self.scenes.len();
        let ring = self.scenes[scene_index].scene.ring_cameras().len();
        let cam_index = self.rng_data.random_range(0..ring);
        let pair = self.sample_pair(scene_index);
        let direction = draw_swap_direction(&mut self.rng_swap);
        let report = self.step_on(scene_index, cam_index, &pair, direction)?;
        Ok(report)
    }

    /// Runs one optimization step on an explicit (scene, camera, pair,
    /// direction) tuple. Factored out so tests can drive fixed inputs.
    pub fn step_on(
        &mut self,
        scene_index: usize,
        cam_index: usize,
        pair: &PairedSample,
        direction: SwapDirection,
    ) -> Result<LossReport, TrainError> {
        let step = self.step_count;
        let pack = &self.scenes[scene_index];
        let scene = &pack.scene;
        let ring = scene.ring_cameras().len();
        let cam = &scene.cameras[cam_index];
        let model = &self.model;
        let settings = &self.settings;
        let bg_model = model.background();

        // Embeddings from each stream's ring images.
        let (a_src, _tokens_src, enc_src) = model.embedding(&pair.src[..ring])?;
        let (a_aug, _tokens_aug, enc_aug) = model.embedding(&pair.aug[..ring])?;

        // Per-gaussian view features from each stream's reference camera.
        let (feat_src, grid_src) = model.gaussian_features(&pair.src[0], &pack.patch_ids)?;
        let (feat_aug, grid_aug) = model.gaussian_features(&pair.aug[0], &pack.patch_ids)?;

        // Factored colors: base+adapted per stream, plus one cross direction.
        let (pairs_src, cache_src) = factored_colors(&feat_src, &a_src, &model.head_spec, &model.head)?;
        let (pairs_aug, cache_aug) = factored_colors(&feat_aug, &a_aug, &model.head_spec, &model.head)?;
        let (cross_feats, cross_a) = match direction {
            SwapDirection::AugFeaturesSrcEmbedding => (&feat_aug, &a_src),
            SwapDirection::SrcFeaturesAugEmbedding => (&feat_src, &a_aug),
        };
        let (pairs_cross, cache_cross) =
            factored_colors(cross_feats, cross_a, &model.head_spec, &model.head)?;

        let colors = |f: fn(&ColorPair) -> Vector3<f64>, ps: &[ColorPair]| -> Vec<Vector3<f64>> {
            ps.iter().map(f).collect()
        };
        let base_src_colors = colors(|p| p.base, &pairs_src);
        let ada_src_colors = colors(|p| p.ada, &pairs_src);
        let base_aug_colors = colors(|p| p.base, &pairs_aug);
        let ada_aug_colors = colors(|p| p.ada, &pairs_aug);
        let cross_colors = colors(|p| p.ada, &pairs_cross);

        // Five renders on the supervised camera; geometry is shared.
        let g = &scene.gaussians;
        let base_src_out = render(g, &base_src_colors, cam, bg_model, settings)?;
        let ada_src_out = render(g, &ada_src_colors, cam, bg_model, settings)?;
        let base_aug_out = render(g, &base_aug_colors, cam, bg_model, settings)?;
        let ada_aug_out = render(g, &ada_aug_colors, cam, bg_model, settings)?;
        let cross_out = render(g, &cross_colors, cam, bg_model, settings)?;

        // Targets.
        let target_src = &pair.src[cam_index];
        let target_aug = &pair.aug[cam_index];
        let albedo_target = &pack.intrinsics.per_camera[cam_index].albedo;
        let swap_target = match direction {
            SwapDirection::AugFeaturesSrcEmbedding => target_src,
            SwapDirection::SrcFeaturesAugEmbedding => target_aug,
        };

        let terms = LossTerms {
            mse: mse_images(&ada_src_out.rgb, target_src)?,
            depth: mse_planes(&ada_src_out.depth, &pack.gt_depth[cam_index])?,
            inv: loss_inv(&base_src_out.rgb, &base_aug_out.rgb)?,
            aug: loss_aug(&ada_aug_out.rgb, target_aug)?,
            swap: loss_swap(&cross_out.rgb, swap_target)?,
            base: loss_base(&base_src_out.rgb, albedo_target)?,
        };
        let (total, breakdown) = total_loss(&terms, &self.weights)?;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, detail: format!("{terms:?}") });
        }

        // Upstream image gradients (mean-reduction MSE: 2 (a - b) / N).
        let w = &self.weights;
        let n = (target_src.data.len()) as f64;
        let grad_img = |a: &Image, b: &Image, scale: f64| -> Image {
            let mut out = Image::new(a.width, a.height);
            for i in 0..a.data.len() {
                out.data[i] = scale * 2.0 * (a.data[i] - b.data[i]) / n;
            }
            out
        };
        let d_ada_src = grad_img(&ada_src_out.rgb, target_src, w.lambda_m);
        let d_ada_aug = grad_img(&ada_aug_out.rgb, target_aug, w.beta2);
        let d_cross = grad_img(&cross_out.rgb, swap_target, w.beta3);
        let mut d_base_src = grad_img(&base_src_out.rgb, &base_aug_out.rgb, w.beta1);
        let d_base_src_albedo = grad_img(&base_src_out.rgb, albedo_target, w.beta4);
        for i in 0..d_base_src.data.len() {
            d_base_src.data[i] += d_base_src_albedo.data[i];
        }
        let d_base_aug = grad_img(&base_aug_out.rgb, &base_src_out.rgb, w.beta1);
        // Depth supervision reaches only geometry parameters, which are fixed
        // ground truth here, so it contributes no model gradient.

        // Rasterizer backward per stream: per-gaussian color gradients plus
        // the background gradient.
        let gb_base_src = render_backward(g, &base_src_colors, cam, bg_model, settings, &d_base_src)?;
        let gb_ada_src = render_backward(g, &ada_src_colors, cam, bg_model, settings, &d_ada_src)?;
        let gb_base_aug = render_backward(g, &base_aug_colors, cam, bg_model, settings, &d_base_aug)?;
        let gb_ada_aug = render_backward(g, &ada_aug_colors, cam, bg_model, settings, &d_ada_aug)?;
        let gb_cross = render_backward(g, &cross_colors, cam, bg_model, settings, &d_cross)?;

        let mut grads = ModelGrads::zeros_like(model);

        // Head backward per stream; base/adapted upstreams route separately.
        let fg_src = factored_colors_backward(
            &model.head_spec,
            &model.head,
            &cache_src,
            &gb_base_src.color,
            &gb_ada_src.color,
        )?;
        let fg_aug = factored_colors_backward(
            &model.head_spec,
            &model.head,
            &cache_aug,
            &gb_base_aug.color,
            &gb_ada_aug.color,
        )?;
        let zeros = vec![Vector3::zeros(); g.len()];
        let fg_cross = factored_colors_backward(
            &model.head_spec,
            &model.head,
            &cache_cross,
            &zeros,
            &gb_cross.color,
        )?;
        grads.head.add_assign(&fg_src.head);
        grads.head.add_assign(&fg_aug.head);
        grads.head.add_assign(&fg_cross.head);

        // View-feature gradients scatter into the feature extractor through
        // the patch assignment of each stream's reference image.
        let mut d_grid_src = TokenGrid {
            cols: grid_src.cols,
            rows: grid_src.rows,
            dim: grid_src.dim,
            data: vec![0.0; grid_src.data.len()],
        };
        let mut d_grid_aug = TokenGrid {
            cols: grid_aug.cols,
            rows: grid_aug.rows,
            dim: grid_aug.dim,
            data: vec![0.0; grid_aug.data.len()],
        };
        let scatter = |dg: &mut TokenGrid, i: usize, dv: &[f64]| {
            let pid = pack.patch_ids[i];
            for (k, v) in dv.iter().enumerate() {
                dg.data[pid * dg.dim + k] += v;
            }
        };
        for i in 0..g.len() {
            scatter(&mut d_grid_src, i, &fg_src.view[i]);
            scatter(&mut d_grid_aug, i, &fg_aug.view[i]);
            match direction {
                SwapDirection::AugFeaturesSrcEmbedding => scatter(&mut d_grid_aug, i, &fg_cross.view[i]),
                SwapDirection::SrcFeaturesAugEmbedding => scatter(&mut d_grid_src, i, &fg_cross.view[i]),
            }
        }
        extract_tokens_backward(
            std::slice::from_ref(&pair.src[0]),
            &model.feature_extractor,
            std::slice::from_ref(&d_grid_src),
            &mut grads.feature,
        )?;
        extract_tokens_backward(
            std::slice::from_ref(&pair.aug[0]),
            &model.feature_extractor,
            std::slice::from_ref(&d_grid_aug),
            &mut grads.feature,
        )?;

        // Embedding gradients flow through phi and the token extractor.
        let mut d_a_src = fg_src.embedding.clone();
        let mut d_a_aug = fg_aug.embedding.clone();
        match direction {
            SwapDirection::AugFeaturesSrcEmbedding => {
                for (acc, v) in d_a_src.iter_mut().zip(&fg_cross.embedding) {
                    *acc += v;
                }
            }
            SwapDirection::SrcFeaturesAugEmbedding => {
                for (acc, v) in d_a_aug.iter_mut().zip(&fg_cross.embedding) {
                    *acc += v;
                }
            }
        }
        let (phi_g_src, d_tok_src) =
            encode_appearance_backward(&model.phi_spec, &model.phi, &enc_src, &d_a_src)?;
        let (phi_g_aug, d_tok_aug) =
            encode_appearance_backward(&model.phi_spec, &model.phi, &enc_aug, &d_a_aug)?;
        grads.phi.add_assign(&phi_g_src);
        grads.phi.add_assign(&phi_g_aug);

        // Token gradients are uniform per camera; expand into full grids.
        let expand = |imgs: &[Image], per_cam: &[Vec<f64>], model: &AppearanceModel| -> Vec<TokenGrid> {
            let patch = model.dims.patch;
            let cols = imgs[0].width / patch;
            let rows = imgs[0].height / patch;
            per_cam
                .iter()
                .map(|dt| {
                    let mut grid = TokenGrid {
                        cols,
                        rows,
                        dim: dt.len(),
                        data: vec![0.0; cols * rows * dt.len()],
                    };
                    for t in 0..cols * rows {
                        grid.data[t * dt.len()..(t + 1) * dt.len()].copy_from_slice(dt);
                    }
                    grid
                })
                .collect()
        };
        let grids_src = expand(&pair.src[..ring], &d_tok_src, model);
        let grids_aug = expand(&pair.aug[..ring], &d_tok_aug, model);
        extract_tokens_backward(&pair.src[..ring], &model.token_extractor, &grids_src, &mut grads.token)?;
        extract_tokens_backward(&pair.aug[..ring], &model.token_extractor, &grids_aug, &mut grads.token)?;

        // Background logit gradient: every render shares the same learned
        // background color.
        let d_bg_total = gb_base_src.background
            + gb_ada_src.background
            + gb_base_aug.background
            + gb_ada_aug.background
            + gb_cross.background;
        for k in 0..3 {
            let s = sigmoid(self.model.bg_logit.values[k]);
            grads.bg_logit.values[k] = d_bg_total[k] * s * (1.0 - s);
        }

        // Adam over everything, in the canonical parameter order.
        {
            let grad_slices = grads.slices();
            let grad_refs: Vec<&[f64]> = grad_slices.to_vec();
            let mut param_slices = self.model.param_slices_mut();
            adam_step(&mut self.opt, &mut param_slices, &grad_refs)?;
        }

        self.step_count += 1;
        Ok(LossReport {
            step,
            total,
            terms,
            breakdown,
            direction,
            scene_index,
            camera_index: cam_index,
        })
    }
}
