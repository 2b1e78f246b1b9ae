//! Batched dense layers: linear -> optional layernorm -> activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MlpSpec, NetError, Norm, Tensor, LAYERNORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[out, in]`, row-major.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    pub ln_gain: Option<Tensor>,
    pub ln_offset: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    /// Flat view over every parameter tensor, in a stable order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(g) = &l.ln_gain {
                out.push(g);
            }
            if let Some(b) = &l.ln_offset {
                out.push(b);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(g) = &mut l.ln_gain {
                out.push(g);
            }
            if let Some(b) = &mut l.ln_offset {
                out.push(b);
            }
        }
        out
    }
}

pub type LayerGrads = LayerParams;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                    ln_gain: l.ln_gain.as_ref().map(Tensor::zeros_like),
                    ln_offset: l.ln_offset.as_ref().map(Tensor::zeros_like),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.values.iter_mut().zip(&b.weight.values) {
                *x += y;
            }
            for (x, y) in a.bias.values.iter_mut().zip(&b.bias.values) {
                *x += y;
            }
            if let (Some(ag), Some(bg)) = (&mut a.ln_gain, &b.ln_gain) {
                for (x, y) in ag.values.iter_mut().zip(&bg.values) {
                    *x += y;
                }
            }
            if let (Some(ab), Some(bb)) = (&mut a.ln_offset, &b.ln_offset) {
                for (x, y) in ab.values.iter_mut().zip(&bb.values) {
                    *x += y;
                }
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(g) = &l.ln_gain {
                out.push(g);
            }
            if let Some(b) = &l.ln_offset {
                out.push(b);
            }
        }
        out
    }
}

/// Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases, layernorm
/// gain 1 / offset 0.
pub fn mlp_init(spec: &MlpSpec) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut layers = Vec::with_capacity(spec.n_layers());
    for l in 0..spec.n_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut w = Tensor::zeros(&[fan_out, fan_in]);
        for v in &mut w.values {
            *v = rng.random_range(-bound..bound);
        }
        let (ln_gain, ln_offset) = match spec.norms[l] {
            Norm::LayerNorm => {
                let mut g = Tensor::zeros(&[fan_out]);
                g.values.fill(1.0);
                (Some(g), Some(Tensor::zeros(&[fan_out])))
            }
            Norm::None => (None, None),
        };
        layers.push(LayerParams { weight: w, bias: Tensor::zeros(&[fan_out]), ln_gain, ln_offset });
    }
    MlpParams { layers }
}

struct LnCache {
    inv_std: Vec<f64>,
    xhat: Vec<f64>,
}

/// Everything the exact backward pass needs, captured per layer.
pub struct MlpCache {
    spec_desc: String,
    batch: usize,
    /// Input to each layer (len = n_layers + 1; last entry is the output).
    xs: Vec<Vec<f64>>,
    /// Pre-activation (post-norm) values per layer.
    pre_act: Vec<Vec<f64>>,
    ln: Vec<Option<LnCache>>,
}

fn check_params(spec: &MlpSpec, params: &MlpParams) -> Result<(), NetError> {
    if params.layers.len() != spec.n_layers() {
        return Err(NetError::ShapeMismatch(format!(
            "{} layers in spec, {} in params",
            spec.n_layers(),
            params.layers.len()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        if layer.weight.shape != [fan_out, fan_in] || layer.bias.shape != [fan_out] {
            return Err(NetError::ShapeMismatch(format!("layer {l} parameter shapes")));
        }
        let need_ln = spec.norms[l] == Norm::LayerNorm;
        if need_ln != layer.ln_gain.is_some() || need_ln != layer.ln_offset.is_some() {
            return Err(NetError::ShapeMismatch(format!("layer {l} layernorm parameters")));
        }
    }
    Ok(())
}

/// Forward over a `[batch, in]` tensor. Returns `[batch, out]` plus the cache
/// for [`mlp_backward`].
pub fn mlp_forward(
    spec: &MlpSpec,
    params: &MlpParams,
    x: &Tensor,
) -> Result<(Tensor, MlpCache), NetError> {
    check_params(spec, params)?;
    if x.shape.len() != 2 || x.shape[1] != spec.input_width() {
        return Err(NetError::ShapeMismatch(format!(
            "input {:?} does not match spec width {}",
            x.shape,
            spec.input_width()
        )));
    }
    let batch = x.shape[0];
    let mut xs = vec![x.values.clone()];
    let mut pre_act = Vec::new();
    let mut ln_caches = Vec::new();

    for l in 0..spec.n_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let input = &xs[l];
        let layer = &params.layers[l];
        let mut z = vec![0.0f64; batch * fan_out];
        for b in 0..batch {
            let row = &input[b * fan_in..(b + 1) * fan_in];
            for o in 0..fan_out {
                let wrow = &layer.weight.values[o * fan_in..(o + 1) * fan_in];
                let mut acc = layer.bias.values[o];
                for i in 0..fan_in {
                    acc += wrow[i] * row[i];
                }
                z[b * fan_out + o] = acc;
            }
        }

        let (h, lnc) = match spec.norms[l] {
            Norm::None => (z, None),
            Norm::LayerNorm => {
                let gain = layer.ln_gain.as_ref().unwrap();
                let offset = layer.ln_offset.as_ref().unwrap();
                let mut h = vec![0.0f64; batch * fan_out];
                let mut inv_std = vec![0.0f64; batch];
                let mut xhat = vec![0.0f64; batch * fan_out];
                for b in 0..batch {
                    let row = &z[b * fan_out..(b + 1) * fan_out];
                    let mean = row.iter().sum::<f64>() / fan_out as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fan_out as f64;
                    let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    inv_std[b] = s;
                    for o in 0..fan_out {
                        let xh = (row[o] - mean) * s;
                        xhat[b * fan_out + o] = xh;
                        h[b * fan_out + o] = gain.values[o] * xh + offset.values[o];
                    }
                }
                (h, Some(LnCache { inv_std, xhat }))
            }
        };

        let act = spec.acts[l];
        let y: Vec<f64> = h.iter().map(|&v| act.apply(v)).collect();
        pre_act.push(h);
        ln_caches.push(lnc);
        xs.push(y);
    }

    let out = Tensor::from_values(&[batch, spec.output_width()], xs.last().unwrap().clone())?;
    Ok((
        out,
        MlpCache { spec_desc: spec.describe(), batch, xs, pre_act, ln: ln_caches },
    ))
}

/// Exact backward through the cached forward. Returns parameter gradients and
/// the gradient w.r.t. the input batch.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &MlpParams,
    cache: &MlpCache,
    dy: &Tensor,
) -> Result<(MlpGrads, Tensor), NetError> {
    check_params(spec, params)?;
    if cache.spec_desc != spec.describe() {
        return Err(NetError::StaleCache(format!(
            "cache built for {}, backward called with {}",
            cache.spec_desc,
            spec.describe()
        )));
    }
    if dy.shape != [cache.batch, spec.output_width()] {
        return Err(NetError::ShapeMismatch(format!(
            "upstream {:?}, expected [{}, {}]",
            dy.shape,
            cache.batch,
            spec.output_width()
        )));
    }

    let batch = cache.batch;
    let mut grads = MlpGrads::zeros_like(params);
    let mut d_out = dy.values.clone();

    for l in (0..spec.n_layers()).rev() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        let act = spec.acts[l];

        // Through the activation.
        let mut dh = d_out;
        for (v, &pre) in dh.iter_mut().zip(&cache.pre_act[l]) {
            *v *= act.grad(pre);
        }

        // Through the optional layernorm.
        let dz = match (&cache.ln[l], spec.norms[l]) {
            (Some(ln), Norm::LayerNorm) => {
                let gain = layer.ln_gain.as_ref().unwrap();
                let g_gain = g.ln_gain.as_mut().unwrap();
                let g_off = g.ln_offset.as_mut().unwrap();
                let mut dz = vec![0.0f64; batch * fan_out];
                for b in 0..batch {
                    let xh = &ln.xhat[b * fan_out..(b + 1) * fan_out];
                    let dhr = &dh[b * fan_out..(b + 1) * fan_out];
                    let mut dxhat = vec![0.0f64; fan_out];
                    for o in 0..fan_out {
                        g_gain.values[o] += dhr[o] * xh[o];
                        g_off.values[o] += dhr[o];
                        dxhat[o] = dhr[o] * gain.values[o];
                    }
                    let mean_dx = dxhat.iter().sum::<f64>() / fan_out as f64;
                    let mean_dx_xh =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / fan_out as f64;
                    let s = ln.inv_std[b];
                    for o in 0..fan_out {
                        dz[b * fan_out + o] = s * (dxhat[o] - mean_dx - xh[o] * mean_dx_xh);
                    }
                }
                dz
            }
            (None, Norm::None) => dh,
            _ => return Err(NetError::StaleCache(format!("layer {l} norm cache out of sync"))),
        };

        // Through the linear map.
        let input = &cache.xs[l];
        let mut dx = vec![0.0f64; batch * fan_in];
        for b in 0..batch {
            let xrow = &input[b * fan_in..(b + 1) * fan_in];
            let dzrow = &dz[b * fan_out..(b + 1) * fan_out];
            for o in 0..fan_out {
                let d = dzrow[o];
                g.bias.values[o] += d;
                let wrow = &layer.weight.values[o * fan_in..(o + 1) * fan_in];
                let gwrow = &mut g.weight.values[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    gwrow[i] += d * xrow[i];
                    dx[b * fan_in + i] += d * wrow[i];
                }
            }
        }
        d_out = dx;
    }

    let d_input = Tensor::from_values(&[batch, spec.input_width()], d_out)?;
    Ok((grads, d_input))
}

#[cfg(test)]
mod tests {
    use super::super::Activation;
    use super::*;

    fn simple_spec() -> MlpSpec {
        MlpSpec::new(
            vec![3, 5, 2],
            vec![Activation::Relu, Activation::None],
            vec![Norm::None, Norm::None],
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_map_to_zero() {
        let spec = MlpSpec::new(vec![4, 3], vec![Activation::None], vec![Norm::None], 0).unwrap();
        let mut params = mlp_init(&spec);
        params.layers[0].weight.values.fill(0.0);
        let x = Tensor::from_values(&[2, 4], vec![1.0, -2.0, 3.0, 0.5, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let (y, _) = mlp_forward(&spec, &params, &x).unwrap();
        assert!(y.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let spec =
            MlpSpec::new(vec![2, 2], vec![Activation::Sigmoid], vec![Norm::None], 0).unwrap();
        let mut params = mlp_init(&spec);
        params.layers[0].weight.values.fill(0.0);
        let x = Tensor::from_values(&[1, 2], vec![0.7, -0.3]).unwrap();
        let (y, _) = mlp_forward(&spec, &params, &x).unwrap();
        assert_eq!(y.values, vec![0.5, 0.5]);
    }

    #[test]
    fn two_layer_matches_dense_matmul_oracle() {
        let spec = simple_spec();
        let params = mlp_init(&spec);
        let x = Tensor::from_values(&[1, 3], vec![0.3, -0.8, 1.1]).unwrap();
        let (y, _) = mlp_forward(&spec, &params, &x).unwrap();

        // Straight-line dense oracle.
        let w1 = &params.layers[0].weight.values;
        let w2 = &params.layers[1].weight.values;
        let mut h = [0.0f64; 5];
        for o in 0..5 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += w1[o * 3 + i] * x.values[i];
            }
            h[o] = acc.max(0.0);
        }
        for o in 0..2 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += w2[o * 5 + i] * h[i];
            }
            assert!((y.values[o] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let spec = simple_spec();
        let params = mlp_init(&spec);
        let x = Tensor::from_values(&[2, 3], vec![0.1; 6]).unwrap();
        let (_, cache) = mlp_forward(&spec, &params, &x).unwrap();
        let dy = Tensor::zeros(&[2, 2]);
        let (grads, dx) = mlp_backward(&spec, &params, &cache, &dy).unwrap();
        assert!(dx.values.iter().all(|&v| v == 0.0));
        assert!(grads.layers.iter().all(|l| l.weight.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_net_passes_gradient_through() {
        let spec = MlpSpec::new(vec![3, 3], vec![Activation::None], vec![Norm::None], 0).unwrap();
        let mut params = mlp_init(&spec);
        params.layers[0].weight.values.fill(0.0);
        for i in 0..3 {
            params.layers[0].weight.values[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_values(&[1, 3], vec![0.5, -0.2, 0.9]).unwrap();
        let (_, cache) = mlp_forward(&spec, &params, &x).unwrap();
        let dy = Tensor::from_values(&[1, 3], vec![1.5, -2.5, 0.25]).unwrap();
        let (_, dx) = mlp_backward(&spec, &params, &cache, &dy).unwrap();
        assert_eq!(dx.values, dy.values);
    }

    #[test]
    fn layernorm_gelu_stack_matches_finite_differences() {
        crate::gradcheck::mlp_gradcheck(0, 1e-4);
    }

    #[test]
    fn stale_cache_detected() {
        let spec = simple_spec();
        let params = mlp_init(&spec);
        let x = Tensor::from_values(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let (_, cache) = mlp_forward(&spec, &params, &x).unwrap();
        let other = MlpSpec::new(
            vec![3, 5, 2],
            vec![Activation::Gelu, Activation::None],
            vec![Norm::None, Norm::None],
            11,
        )
        .unwrap();
        let dy = Tensor::zeros(&[1, 2]);
        let err = mlp_backward(&other, &params, &cache, &dy).unwrap_err();
        assert!(matches!(err, NetError::StaleCache(_)));
    }
}
