//! Fixed 3x3 convolution with zero padding, used only by the toy denoiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NetError, Tensor};

/// 3x3 same-padding convolution over channel-interleaved `h x w x c` grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl Conv3x3 {
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut weight = Tensor::zeros(&[out_channels, in_channels, 3, 3]);
        for v in &mut weight.values {
            *v = rng.random_range(-bound..bound);
        }
        Self { in_channels, out_channels, weight, bias: Tensor::zeros(&[out_channels]) }
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3Grads {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_input(conv: &Conv3x3, input: &[f64], h: usize, w: usize) -> Result<(), NetError> {
    if input.len() != h * w * conv.in_channels {
        return Err(NetError::ShapeMismatch(format!(
            "conv input has {} values, expected {}x{}x{}",
            input.len(),
            h,
            w,
            conv.in_channels
        )));
    }
    Ok(())
}

pub fn conv3x3_forward(
    conv: &Conv3x3,
    input: &[f64],
    h: usize,
    w: usize,
) -> Result<Vec<f64>, NetError> {
    check_input(conv, input, h, w)?;
    let (ci, co) = (conv.in_channels, conv.out_channels);
    let mut out = vec![0.0f64; h * w * co];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for oc in 0..co {
                let mut acc = conv.bias.values[oc];
                for ky in -1..=1i64 {
                    for kx in -1..=1i64 {
                        let (sy, sx) = (y + ky, x + kx);
                        if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let base = ((sy as usize) * w + sx as usize) * ci;
                        let wbase = ((oc * ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize;
                        for icx in 0..ci {
                            acc += conv.weight.values[wbase + icx * 9] * input[base + icx];
                        }
                    }
                }
                out[((y as usize) * w + x as usize) * co + oc] = acc;
            }
        }
    }
    Ok(out)
}

/// Returns parameter gradients and the gradient w.r.t. the input grid.
pub fn conv3x3_backward(
    conv: &Conv3x3,
    input: &[f64],
    h: usize,
    w: usize,
    d_out: &[f64],
) -> Result<(Conv3x3Grads, Vec<f64>), NetError> {
    check_input(conv, input, h, w)?;
    let (ci, co) = (conv.in_channels, conv.out_channels);
    if d_out.len() != h * w * co {
        return Err(NetError::ShapeMismatch("conv upstream gradient size".into()));
    }
    let mut gw = conv.weight.zeros_like();
    let mut gb = conv.bias.zeros_like();
    let mut gin = vec![0.0f64; input.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for oc in 0..co {
                let d = d_out[((y as usize) * w + x as usize) * co + oc];
                if d == 0.0 {
                    continue;
                }
                gb.values[oc] += d;
                for ky in -1..=1i64 {
                    for kx in -1..=1i64 {
                        let (sy, sx) = (y + ky, x + kx);
                        if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let base = ((sy as usize) * w + sx as usize) * ci;
                        let wbase = ((oc * ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize;
                        for icx in 0..ci {
                            gw.values[wbase + icx * 9] += d * input[base + icx];
                            gin[base + icx] += d * conv.weight.values[wbase + icx * 9];
                        }
                    }
                }
            }
        }
    }
    Ok((Conv3x3Grads { weight: gw, bias: gb }, gin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::max_rel_err;
    use rand::SeedableRng;

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let conv = Conv3x3::init(2, 3, &mut rng);
        let (h, w) = (5, 4);
        let input: Vec<f64> = (0..h * w * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let loss = |c: &Conv3x3, inp: &[f64]| -> f64 {
            conv3x3_forward(c, inp, h, w)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum()
        };

        let (grads, gin) = conv3x3_backward(&conv, &input, h, w, &upstream).unwrap();

        // The loss is linear in every argument, so central differences carry
        // no truncation error; a larger step keeps roundoff noise small.
        let fd = 1e-4;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..conv.weight.values.len() {
            analytic.push(grads.weight.values[i]);
            let mut plus = conv.clone();
            plus.weight.values[i] += fd;
            let mut minus = conv.clone();
            minus.weight.values[i] -= fd;
            numeric.push((loss(&plus, &input) - loss(&minus, &input)) / (2.0 * fd));
        }
        for i in 0..conv.bias.values.len() {
            analytic.push(grads.bias.values[i]);
            let mut plus = conv.clone();
            plus.bias.values[i] += fd;
            let mut minus = conv.clone();
            minus.bias.values[i] -= fd;
            numeric.push((loss(&plus, &input) - loss(&minus, &input)) / (2.0 * fd));
        }
        for i in 0..input.len() {
            analytic.push(gin[i]);
            let mut plus = input.clone();
            plus[i] += fd;
            let mut minus = input.clone();
            minus[i] -= fd;
            numeric.push((loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * fd));
        }
        let err = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err < 1e-6, "conv gradient error {err:.3e}");
    }
}
