//! Toy convolutional noise predictor standing in for a pretrained
//! relighting diffusion model: three 3x3 convs with ReLU and a scalar time
//! embedding added as a per-channel bias after the first conv.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Denoiser, GuidanceError, Latent, NoiseSchedule};
use crate::img::Image;
use crate::net::{adam_step, conv3x3_backward, conv3x3_forward, AdamState, Conv3x3, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub channels: usize,
    pub hidden: usize,
    pub conv1: Conv3x3,
    /// Per-hidden-channel time bias coefficient; the scalar t/T scales it.
    pub time_scale: Tensor,
    pub conv2: Conv3x3,
    pub conv3: Conv3x3,
}

struct ForwardCache {
    h1: Vec<f64>,
    r1: Vec<f64>,
    h2: Vec<f64>,
    r2: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            channels,
            hidden,
            conv1: Conv3x3::init(channels, hidden, &mut rng),
            time_scale: Tensor::zeros(&[hidden]),
            conv2: Conv3x3::init(hidden, hidden, &mut rng),
            conv3: Conv3x3::init(hidden, channels, &mut rng),
        }
    }

    fn forward(&self, z: &Latent, t_norm: f64) -> (Vec<f64>, ForwardCache) {
        let (h, w) = (z.height, z.width);
        let mut h1 = conv3x3_forward(&self.conv1, &z.data, h, w).expect("conv1 shapes");
        for p in 0..h * w {
            for c in 0..self.hidden {
                h1[p * self.hidden + c] += self.time_scale.values[c] * t_norm;
            }
        }
        let r1: Vec<f64> = h1.iter().map(|&v| v.max(0.0)).collect();
        let h2 = conv3x3_forward(&self.conv2, &r1, h, w).expect("conv2 shapes");
        let r2: Vec<f64> = h2.iter().map(|&v| v.max(0.0)).collect();
        let out = conv3x3_forward(&self.conv3, &r2, h, w).expect("conv3 shapes");
        (out, ForwardCache { h1, r1, h2, r2 })
    }
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&self, z: &Latent, t: usize, schedule: &NoiseSchedule) -> Latent {
        let t_norm = t as f64 / schedule.steps as f64;
        let (out, _) = self.forward(z, t_norm);
        Latent { height: z.height, width: z.width, channels: self.channels, data: out }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserTrainStats {
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

fn forward_diffuse(x0: &Latent, eps: &Latent, alpha_bar: f64) -> Latent {
    x0.map2(eps, |x, e| alpha_bar.sqrt() * x + (1.0 - alpha_bar).sqrt() * e)
}

fn sample_probe(
    rng: &mut ChaCha8Rng,
    latents: &[Latent],
    schedule: &NoiseSchedule,
) -> (usize, usize, Latent) {
    let idx = rng.random_range(0..latents.len());
    let t = rng.random_range(1..=schedule.steps);
    let mut eps = Latent::zeros(latents[idx].height, latents[idx].width, latents[idx].channels);
    for v in &mut eps.data {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    (idx, t, eps)
}

/// Mean epsilon-prediction MSE over a fixed, seeded probe set. Deterministic
/// for a given model and seed, so it doubles as the descent metric.
pub fn denoiser_probe_loss(
    model: &ToyDenoiser,
    images: &[Image],
    schedule: &NoiseSchedule,
    seed: u64,
    n_probes: usize,
) -> f64 {
    let latents: Vec<Latent> = images.iter().map(Latent::from_image).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_probes {
        let (idx, t, eps) = sample_probe(&mut rng, &latents, schedule);
        let z_t = forward_diffuse(&latents[idx], &eps, schedule.alpha_bar[t]);
        let pred = model.predict_noise(&z_t, t, schedule);
        let n = pred.data.len() as f64;
        acc += pred
            .data
            .iter()
            .zip(&eps.data)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / n;
    }
    acc / n_probes as f64
}

/// Standard epsilon-prediction training with Adam. Zero steps returns the
/// initialized model unchanged.
pub fn train_toy_denoiser(
    images: &[Image],
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    lr: f64,
) -> Result<(ToyDenoiser, DenoiserTrainStats), GuidanceError> {
    if images.is_empty() {
        return Err(GuidanceError::EmptyDataset);
    }
    let latents: Vec<Latent> = images.iter().map(Latent::from_image).collect();
    let mut model = ToyDenoiser::new(3, 16, seed);
    let probe_seed = seed ^ 0x5eed_5eed;
    let initial = denoiser_probe_loss(&model, images, schedule, probe_seed, 16);

    let sizes: Vec<usize> = vec![
        model.conv1.weight.numel(),
        model.conv1.bias.numel(),
        model.time_scale.numel(),
        model.conv2.weight.numel(),
        model.conv2.bias.numel(),
        model.conv3.weight.numel(),
        model.conv3.bias.numel(),
    ];
    let mut opt = AdamState::new(lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    for _ in 0..steps {
        let (idx, t, eps) = sample_probe(&mut rng, &latents, schedule);
        let x0 = &latents[idx];
        let z_t = forward_diffuse(x0, &eps, schedule.alpha_bar[t]);
        let t_norm = t as f64 / schedule.steps as f64;
        let (pred, cache) = model.forward(&z_t, t_norm);

        let n = pred.len() as f64;
        let d_out: Vec<f64> =
            pred.iter().zip(&eps.data).map(|(p, e)| 2.0 * (p - e) / n).collect();

        let (h, w) = (z_t.height, z_t.width);
        let (g3, d_r2) = conv3x3_backward(&model.conv3, &cache.r2, h, w, &d_out)
            .expect("conv3 backward shapes");
        let d_h2: Vec<f64> = d_r2
            .iter()
            .zip(&cache.h2)
            .map(|(d, &pre)| if pre > 0.0 { *d } else { 0.0 })
            .collect();
        let (g2, d_r1) = conv3x3_backward(&model.conv2, &cache.r1, h, w, &d_h2)
            .expect("conv2 backward shapes");
        let d_h1: Vec<f64> = d_r1
            .iter()
            .zip(&cache.h1)
            .map(|(d, &pre)| if pre > 0.0 { *d } else { 0.0 })
            .collect();
        let mut g_time = vec![0.0f64; model.hidden];
        for p in 0..h * w {
            for c in 0..model.hidden {
                g_time[c] += d_h1[p * model.hidden + c] * t_norm;
            }
        }
        let (g1, _) = conv3x3_backward(&model.conv1, &z_t.data, h, w, &d_h1)
            .expect("conv1 backward shapes");

        let grads: Vec<&[f64]> = vec![
            &g1.weight.values,
            &g1.bias.values,
            &g_time,
            &g2.weight.values,
            &g2.bias.values,
            &g3.weight.values,
            &g3.bias.values,
        ];
        let mut params: Vec<&mut [f64]> = vec![
            &mut model.conv1.weight.values,
            &mut model.conv1.bias.values,
            &mut model.time_scale.values,
            &mut model.conv2.weight.values,
            &mut model.conv2.bias.values,
            &mut model.conv3.weight.values,
            &mut model.conv3.bias.values,
        ];
        adam_step(&mut opt, &mut params, &grads).expect("optimizer shapes are static");
    }

    let final_loss = denoiser_probe_loss(&model, images, schedule, probe_seed, 16);
    Ok((model, DenoiserTrainStats { initial_probe_loss: initial, final_probe_loss: final_loss }))
}
