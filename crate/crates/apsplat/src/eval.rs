//! Image quality metrics and the cross-appearance evaluation protocol:
//! render all four geometry-stream x embedding combinations of a pair and
//! compare each against the ground truth matching its target appearance.
//! Matched combinations (diagonal) should beat swapped ones (off-diagonal).

use nalgebra::Vector3;
use thiserror::Error;

use crate::appearance::{AppearanceEmbedding, AppearanceModel};
use crate::img::Image;
use crate::losses::{render_stream, ScenePack, TrainError};
use crate::relight::PairedSample;
use crate::splat::RenderSettings;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image too small for the {0}x{0} SSIM window")]
    TooSmall(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// PSNR cap returned for (near-)identical images; keeps CSV cells finite.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak-1 PSNR in dB: 10 log10(1 / MSE), capped at 99 dB when MSE < 1e-10.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if !a.same_size(b) {
        return Err(EvalError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a.mse(b);
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window_weights() -> Vec<f64> {
    // 11x11 Gaussian window, sigma 1.5, normalized to sum 1.
    let r = (SSIM_WINDOW / 2) as i64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -r..=r {
        for x in -r..=r {
            w.push((-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over valid (fully interior) window positions, per channel then
/// averaged. Windows are 11x11 Gaussian-weighted (sigma 1.5) with the
/// standard constants C1 = 0.01^2, C2 = 0.03^2 at unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if !a.same_size(b) {
        return Err(EvalError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(EvalError::TooSmall(SSIM_WINDOW));
    }
    let weights = ssim_window_weights();
    let r = SSIM_WINDOW / 2;
    let mut acc = 0.0f64;
    let mut count = 0.0f64;
    for ch in 0..3 {
        for cy in r..a.height - r {
            for cx in r..a.width - r {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let w = weights[wi];
                        wi += 1;
                        let x = cx + dx - r;
                        let y = cy + dy - r;
                        let va = a.data[3 * (y * a.width + x) + ch];
                        let vb = b.data[3 * (y * b.width + x) + ch];
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                acc += s;
                count += 1.0;
            }
        }
    }
    Ok(acc / count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSource {
    Src,
    Aug,
}

impl StreamSource {
    pub fn label(&self) -> &'static str {
        match self {
            StreamSource::Src => "src",
            StreamSource::Aug => "aug",
        }
    }
}

/// One cell of the 2x2 cross-appearance table. Rows vary the geometry-stream
/// (feature) source, columns the appearance embedding; the target ground
/// truth follows the embedding source.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub geometry_source: StreamSource,
    pub embedding_source: StreamSource,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn is_matched(&self) -> bool {
        self.geometry_source == self.embedding_source
    }
}

/// Renders the four feature x embedding combinations over every camera of
/// the pair and averages PSNR/SSIM against the embedding-matched targets.
/// Row order: (src,src), (src,aug), (aug,src), (aug,aug). Never mutates the
/// model.
pub fn cross_appearance_eval(
    model: &AppearanceModel,
    pack: &ScenePack,
    pair: &PairedSample,
    settings: &RenderSettings,
) -> Result<Vec<MetricRow>, EvalError> {
    let ring = pack.scene.ring_cameras().len();
    let (a_src, _, _) = model.embedding(&pair.src[..ring]).map_err(TrainError::from)?;
    let (a_aug, _, _) = model.embedding(&pair.aug[..ring]).map_err(TrainError::from)?;
    let (feat_src, _) = model.gaussian_features(&pair.src[0], &pack.patch_ids).map_err(TrainError::from)?;
    let (feat_aug, _) = model.gaussian_features(&pair.aug[0], &pack.patch_ids).map_err(TrainError::from)?;

    let combos: [(StreamSource, StreamSource, &Vec<_>, &AppearanceEmbedding); 4] = [
        (StreamSource::Src, StreamSource::Src, &feat_src, &a_src),
        (StreamSource::Src, StreamSource::Aug, &feat_src, &a_aug),
        (StreamSource::Aug, StreamSource::Src, &feat_aug, &a_src),
        (StreamSource::Aug, StreamSource::Aug, &feat_aug, &a_aug),
    ];

    let n_cams = pack.scene.cameras.len();
    let mut rows = Vec::with_capacity(4);
    for (geom_src, emb_src, feats, a) in combos {
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        for cam in 0..n_cams {
            let out = render_stream(model, pack, feats, a, cam, settings)?;
            let target = match emb_src {
                StreamSource::Src => &pair.src[cam],
                StreamSource::Aug => &pair.aug[cam],
            };
            psnr_acc += psnr(&out.rgb, target)?;
            ssim_acc += ssim(&out.rgb, target)?;
        }
        rows.push(MetricRow {
            geometry_source: geom_src,
            embedding_source: emb_src,
            psnr: psnr_acc / n_cams as f64,
            ssim: ssim_acc / n_cams as f64,
        });
    }
    Ok(rows)
}

/// PSNR of a render against both ground truths; used for the swapped-render
/// target-preference check.
pub fn target_preference(
    render: &Image,
    target_matched: &Image,
    target_mismatched: &Image,
) -> Result<(f64, f64), EvalError> {
    Ok((psnr(render, target_matched)?, psnr(render, target_mismatched)?))
}
