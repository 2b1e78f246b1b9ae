//! Frequency-aware latent guidance for DDIM sampling.
//!
//! Operates directly in a small pixel/latent grid. Each denoising step
//! estimates the clean latent, replaces only its low-frequency component
//! with a blend toward a physics-based reference (weight w(t) = lambda*t/T,
//! strongest early), recomputes the noise so the trajectory stays on the
//! deterministic DDIM manifold, and takes the eta=0 update.

mod denoiser;

pub use denoiser::{
    denoiser_probe_loss, train_toy_denoiser, DenoiserTrainStats, ToyDenoiser,
};

use thiserror::Error;

use crate::img::Image;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha_bar is 1 (noiseless step has no recoverable noise)")]
    AlphaBarOne,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("empty dataset")]
    EmptyDataset,
}

/// Dense `h x w x c` grid of reals, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Image in [0,1] -> latent in [-1,1].
    pub fn from_image(img: &Image) -> Self {
        Self {
            height: img.height,
            width: img.width,
            channels: 3,
            data: img.data.iter().map(|v| 2.0 * v - 1.0).collect(),
        }
    }

    /// Latent in [-1,1] -> clamped image in [0,1].
    pub fn to_image(&self) -> Image {
        assert_eq!(self.channels, 3, "only 3-channel latents convert to images");
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn map2(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        assert!(self.same_shape(other));
        Latent {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Diffusion schedule: `alpha_bar[t]` for t = 0..=steps, with
/// `alpha_bar[0] = 1` and a strictly decreasing tail.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp. At the default desk scale (T = 50, beta in
    /// [0.004, 0.35]) alpha_bar falls from 1 to ~1e-4.
    pub fn linear_beta(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, GuidanceError> {
        if steps == 0 {
            return Err(GuidanceError::InvalidSchedule("steps must be >= 1".into()));
        }
        if !(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end {
            return Err(GuidanceError::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let frac = if steps == 1 { 1.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Ok(Self { steps, alpha_bar })
    }

    pub fn default_desk() -> Self {
        Self::linear_beta(50, 0.004, 0.35).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Guidance strength in [0, 1]; w(t) = lambda * t / T.
    pub lambda: f64,
    /// Gaussian blur sigma of the spectral split (pixels).
    pub sigma: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda: 0.7, sigma: 2.0 }
    }
}

impl GuidanceConfig {
    pub fn weight(&self, t: usize, steps: usize) -> f64 {
        self.lambda * t as f64 / steps as f64
    }
}

/// Mirror-reflect an index into [0, n), without repeating the edge sample.
fn reflect(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1D Gaussian kernel truncated at radius ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn blur_separable(z: &Latent, sigma: f64) -> Latent {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w, c) = (z.height as i64, z.width as i64, z.channels);
    // Horizontal pass.
    let mut tmp = vec![0.0f64; z.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x + ki as i64 - radius, w);
                    acc += kv * z.data[((y as usize * z.width) + sx) * c + ch];
                }
                tmp[((y as usize * z.width) + x as usize) * c + ch] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = Latent::zeros(z.height, z.width, z.channels);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y + ki as i64 - radius, h);
                    acc += kv * tmp[((sy * z.width as usize) + x as usize) * c + ch];
                }
                out.data[((y as usize * z.width) + x as usize) * c + ch] = acc;
            }
        }
    }
    out
}

#[inline]
fn reconstructs(low: f64, high: f64, z: f64) -> bool {
    (low + high).to_bits() == z.to_bits()
}

/// Splits one value into (low, high) with `low` within one ulp of `blurred`
/// and `low + high == z` bit-exact. Floating-point subtraction alone does
/// not guarantee reconstruction when |z| << |low|, so the complement is
/// recomputed until the identity holds (bounded, deterministic).
fn exact_split_value(z: f64, blurred: f64) -> (f64, f64) {
    let mut low = blurred;
    let mut high = z - low;
    if reconstructs(low, high, z) {
        return (low, high);
    }
    low = z - high;
    if reconstructs(low, high, z) {
        return (low, high);
    }
    high = z - low;
    if reconstructs(low, high, z) {
        return (low, high);
    }
    if reconstructs(0.0, z, z) {
        return (0.0, z);
    }
    (-0.0, z)
}

/// Spectral split: `z_low` is the separable Gaussian blur (reflect padding,
/// radius ceil(3 sigma), kernel normalized to sum 1) and `z_high = z -
/// z_low`. The reconstruction `z_low + z_high == z` holds bit-exactly for
/// every element.
pub fn lowpass(z: &Latent, sigma: f64) -> (Latent, Latent) {
    let blurred = blur_separable(z, sigma);
    let mut low = Latent::zeros(z.height, z.width, z.channels);
    let mut high = Latent::zeros(z.height, z.width, z.channels);
    for i in 0..z.data.len() {
        let (l, h) = exact_split_value(z.data[i], blurred.data[i]);
        low.data[i] = l;
        high.data[i] = h;
    }
    (low, high)
}

/// Clean-latent estimate: (z_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar).
pub fn estimate_x0(z_t: &Latent, eps: &Latent, alpha_bar_t: f64) -> Latent {
    assert!(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0);
    let sa = alpha_bar_t.sqrt();
    let sn = (1.0 - alpha_bar_t).sqrt();
    z_t.map2(eps, |z, e| (z - sn * e) / sa)
}

/// Guided clean-latent replacement: only the low band moves toward the
/// reference, weighted by w(t) = lambda*t/T. w = 0 short-circuits to the
/// input so an unguided trajectory is reproduced bit-for-bit.
pub fn guided_x0(
    x0_hat: &Latent,
    z_ref_low: &Latent,
    t: usize,
    steps: usize,
    cfg: &GuidanceConfig,
) -> Result<Latent, GuidanceError> {
    if !x0_hat.same_shape(z_ref_low) {
        return Err(GuidanceError::ShapeMismatch(format!(
            "x0 is {}x{}x{}, reference is {}x{}x{}",
            x0_hat.height, x0_hat.width, x0_hat.channels,
            z_ref_low.height, z_ref_low.width, z_ref_low.channels
        )));
    }
    let w = cfg.weight(t, steps);
    if w == 0.0 {
        return Ok(x0_hat.clone());
    }
    let (low, high) = lowpass(x0_hat, cfg.sigma);
    let mut out = x0_hat.clone();
    for i in 0..out.data.len() {
        out.data[i] = ((1.0 - w) * low.data[i] + w * z_ref_low.data[i]) + high.data[i];
    }
    Ok(out)
}

/// Noise that puts the modified clean estimate back on the deterministic
/// trajectory: (z_t - sqrt(alpha_bar) * x0) / sqrt(1 - alpha_bar).
pub fn recompute_noise(
    z_t: &Latent,
    x0_tilde: &Latent,
    alpha_bar_t: f64,
) -> Result<Latent, GuidanceError> {
    if alpha_bar_t >= 1.0 {
        return Err(GuidanceError::AlphaBarOne);
    }
    let sa = alpha_bar_t.sqrt();
    let sn = (1.0 - alpha_bar_t).sqrt();
    Ok(z_t.map2(x0_tilde, |z, x| (z - sa * x) / sn))
}

/// Noise predictor interface; the toy denoiser and test oracles implement it.
pub trait Denoiser {
    fn predict_noise(&self, z: &Latent, t: usize, schedule: &NoiseSchedule) -> Latent;
}

#[derive(Debug, Clone)]
pub struct DdimStep {
    pub t: usize,
    /// Guidance weight w(t) applied at this step (0 when unguided).
    pub weight: f64,
    /// max |z_t - (sqrt(a) x0 + sqrt(1-a) eps)| over elements, for the
    /// reconstruction identity; 0 exactly when the step was unguided.
    pub reconstruction_err: f64,
}

#[derive(Debug, Clone)]
pub struct DdimTrajectory {
    pub final_latent: Latent,
    pub steps: Vec<DdimStep>,
}

/// Deterministic (eta = 0) DDIM sampling from `z_init` at t = T down to 0,
/// optionally guided by a low-frequency reference. With `lambda = 0` or no
/// reference the trajectory is bitwise identical to vanilla DDIM.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z_init: &Latent,
    cfg: &GuidanceConfig,
    reference_low: Option<&Latent>,
) -> Result<DdimTrajectory, GuidanceError> {
    let mut z = z_init.clone();
    let mut steps = Vec::with_capacity(schedule.steps);
    for t in (1..=schedule.steps).rev() {
        let a_t = schedule.alpha_bar[t];
        let a_prev = schedule.alpha_bar[t - 1];
        let eps = denoiser.predict_noise(&z, t, schedule);
        if !eps.same_shape(&z) {
            return Err(GuidanceError::ShapeMismatch("denoiser output shape".into()));
        }
        let x0 = estimate_x0(&z, &eps, a_t);

        let w = match reference_low {
            Some(_) => cfg.weight(t, schedule.steps),
            None => 0.0,
        };
        let (x0_used, eps_used, recon_err) = if w == 0.0 {
            (x0, eps, 0.0)
        } else {
            let reference = reference_low.expect("w > 0 implies a reference");
            let x0_tilde = guided_x0(&x0, reference, t, schedule.steps, cfg)?;
            let eps_tilde = recompute_noise(&z, &x0_tilde, a_t)?;
            let mut err = 0.0f64;
            let sa = a_t.sqrt();
            let sn = (1.0 - a_t).sqrt();
            for i in 0..z.data.len() {
                let rebuilt = sa * x0_tilde.data[i] + sn * eps_tilde.data[i];
                err = err.max((z.data[i] - rebuilt).abs());
            }
            (x0_tilde, eps_tilde, err)
        };

        let sa_prev = a_prev.sqrt();
        let sn_prev = (1.0 - a_prev).sqrt();
        z = x0_used.map2(&eps_used, |x, e| sa_prev * x + sn_prev * e);
        steps.push(DdimStep { t, weight: w, reconstruction_err: recon_err });
    }
    Ok(DdimTrajectory { final_latent: z, steps })
}

/// Mean absolute difference of low-frequency content at paired pixel
/// locations of two latents (the cross-view agreement statistic).
pub fn low_frequency_agreement(
    a: &Latent,
    b: &Latent,
    pairs: &[((usize, usize), (usize, usize))],
    sigma: f64,
) -> f64 {
    let (low_a, _) = lowpass(a, sigma);
    let (low_b, _) = lowpass(b, sigma);
    let mut acc = 0.0;
    let mut n = 0.0;
    for &((xa, ya), (xb, yb)) in pairs {
        for ch in 0..a.channels {
            let va = low_a.data[(ya * a.width + xa) * a.channels + ch];
            let vb = low_b.data[(yb * b.width + xb) * b.channels + ch];
            acc += (va - vb).abs();
            n += 1.0;
        }
    }
    acc / n
}
