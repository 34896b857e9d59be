//! Forward pass with activation caching, and the reverse pass that produces
//! gradients for the adapter tensors only.

use nalgebra::{DMatrix, DVector};

use super::{AdapterParams, EncoderWeights, LayerAdapters, LayerWeights, LoraParams};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn linear(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut y = x * w.transpose();
    for mut row in y.row_iter_mut() {
        row += b.transpose();
    }
    y
}

struct NormCache {
    normed: DMatrix<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &DMatrix<f64>, gain: &DVector<f64>, bias: &DVector<f64>) -> (DMatrix<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut normed = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normed.row_iter_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.apply(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let mut y = normed.clone();
    for mut row in y.row_iter_mut() {
        row.component_mul_assign(&gain.transpose());
        row += bias.transpose();
    }
    (y, NormCache { normed, inv_std })
}

fn layer_norm_backward(dy: &DMatrix<f64>, cache: &NormCache, gain: &DVector<f64>) -> DMatrix<f64> {
    let d = dy.ncols() as f64;
    let mut dx = dy.clone();
    for (i, mut row) in dx.row_iter_mut().enumerate() {
        row.component_mul_assign(&gain.transpose());
        let n = cache.normed.row(i);
        let mean_dn = row.sum() / d;
        let mean_dn_n = row.dot(&n) / d;
        let inv = cache.inv_std[i];
        for j in 0..row.len() {
            row[j] = inv * (row[j] - mean_dn - n[j] * mean_dn_n);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows(s: &mut DMatrix<f64>) {
    for mut row in s.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

fn sinusoidal(frames: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(frames, dim, |t, j| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = t as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Activations of one layer needed by the reverse pass.
struct LayerCache {
    ln1: NormCache,
    n1: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    lora_q_mid: Option<DMatrix<f64>>,
    lora_v_mid: Option<DMatrix<f64>>,
    probs: Vec<DMatrix<f64>>,
    ln2: NormCache,
    ffn_pre: DMatrix<f64>,
    ffn_out: DMatrix<f64>,
    bottleneck_pre: Option<DMatrix<f64>>,
    bottleneck_act: Option<DMatrix<f64>>,
}

/// Per-layer outputs of one forward pass plus everything the reverse pass needs.
pub struct EncoderTrace {
    outputs: Vec<DMatrix<f64>>,
    caches: Vec<LayerCache>,
}

impl EncoderTrace {
    /// Hidden states after each layer, each `T × D`.
    pub fn outputs(&self) -> &[DMatrix<f64>] {
        &self.outputs
    }

    pub fn into_outputs(self) -> Vec<DMatrix<f64>> {
        self.outputs
    }

    /// Sign pattern of every bottleneck pre-activation; finite-difference
    /// checks use it to detect steps that cross a relu kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.caches
            .iter()
            .filter_map(|c| c.bottleneck_pre.as_ref())
            .flat_map(|m| m.iter().map(|&z| z > 0.0))
            .collect()
    }
}

fn lora_project(
    n: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    lora: Option<&LoraParams>,
    scaling: f64,
) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let base = linear(n, w, b);
    match lora {
        None => (base, None),
        Some(p) => {
            let mid = n * p.a.transpose();
            let delta = &mid * p.b.transpose() * scaling;
            (base + delta, Some(mid))
        }
    }
}

fn layer_forward(
    x: &DMatrix<f64>,
    w: &LayerWeights,
    adapter: Option<&LayerAdapters>,
    scaling: f64,
    heads: usize,
) -> (DMatrix<f64>, LayerCache) {
    let (n1, ln1) = layer_norm(x, &w.ln1_gain, &w.ln1_bias);
    let (q, lora_q_mid) = lora_project(&n1, &w.wq, &w.bq, adapter.map(|a| &a.query), scaling);
    let k = linear(&n1, &w.wk, &w.bk);
    let (v, lora_v_mid) = lora_project(&n1, &w.wv, &w.bv, adapter.map(|a| &a.value), scaling);

    let (t, d) = x.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn_concat = DMatrix::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let mut p = qh * kh.transpose() * scale;
        softmax_rows(&mut p);
        attn_concat.columns_mut(h * dh, dh).copy_from(&(&p * vh));
        probs.push(p);
    }
    let h1 = x + linear(&attn_concat, &w.wo, &w.bo);

    let (n2, ln2) = layer_norm(&h1, &w.ln2_gain, &w.ln2_bias);
    let ffn_pre = linear(&n2, &w.w1, &w.b1);
    let ffn_act = ffn_pre.map(gelu);
    let ffn_out = linear(&ffn_act, &w.w2, &w.b2);

    let (adapted, bottleneck_pre, bottleneck_act) = match adapter {
        None => (ffn_out.clone(), None, None),
        Some(a) => {
            let pre = &ffn_out * a.bottleneck.down.transpose();
            let act = pre.map(|z| z.max(0.0));
            let out = &ffn_out + &act * a.bottleneck.up.transpose();
            (out, Some(pre), Some(act))
        }
    };
    let y = h1 + adapted;

    let cache = LayerCache {
        ln1,
        n1,
        q,
        k,
        v,
        lora_q_mid,
        lora_v_mid,
        probs,
        ln2,
        ffn_pre,
        ffn_out,
        bottleneck_pre,
        bottleneck_act,
    };
    (y, cache)
}

/// Runs the encoder on a `T × D` sequence. With adapters, query/value
/// projections gain `(α/r)·B·A·x` and each FFN output gets a residual
/// bottleneck block.
pub fn encoder_forward(
    weights: &EncoderWeights,
    adapters: Option<&AdapterParams>,
    input: &DMatrix<f64>,
) -> Result<EncoderTrace> {
    let cfg = &weights.config;
    if input.ncols() != cfg.model_dim {
        return Err(Error::dims("encoder input dim", cfg.model_dim, input.ncols()));
    }
    if input.nrows() == 0 {
        return Err(Error::EmptyInput("encoder input has no frames".into()));
    }
    if let Some(a) = adapters {
        a.check(cfg)?;
    }
    let scaling = adapters.map_or(0.0, |a| a.config.scaling());
    let mut x = if cfg.positional {
        input + sinusoidal(input.nrows(), cfg.model_dim)
    } else {
        input.clone()
    };
    let mut outputs = Vec::with_capacity(cfg.num_layers);
    let mut caches = Vec::with_capacity(cfg.num_layers);
    for (l, w) in weights.layers.iter().enumerate() {
        let adapter = adapters.map(|a| &a.layers[l]);
        let (y, cache) = layer_forward(&x, w, adapter, scaling, cfg.num_heads);
        outputs.push(y.clone());
        caches.push(cache);
        x = y;
    }
    Ok(EncoderTrace { outputs, caches })
}

fn lora_backward(
    dproj: &DMatrix<f64>,
    n: &DMatrix<f64>,
    mid: &DMatrix<f64>,
    lora: &LoraParams,
    scaling: f64,
    grad: &mut LoraParams,
) -> DMatrix<f64> {
    grad.b = dproj.tr_mul(mid) * scaling;
    let dmid = dproj * &lora.b * scaling;
    grad.a = dmid.tr_mul(n);
    dmid * &lora.a
}

fn ensure_finite(m: &DMatrix<f64>, layer: usize, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite {what} in encoder layer {}",
            layer + 1
        )))
    }
}

/// Returns `dL/d(layer input)` and fills `grad` with the adapter gradients.
fn layer_backward(
    dy: &DMatrix<f64>,
    w: &LayerWeights,
    a: &LayerAdapters,
    c: &LayerCache,
    scaling: f64,
    heads: usize,
    grad: &mut LayerAdapters,
) -> DMatrix<f64> {
    // y = h1 + f + up·relu(down·f)
    let d_adapted = dy;
    let pre = c.bottleneck_pre.as_ref().expect("adapter forward");
    let act = c.bottleneck_act.as_ref().expect("adapter forward");
    grad.bottleneck.up = d_adapted.tr_mul(act);
    let mut d_pre = d_adapted * &a.bottleneck.up;
    d_pre.zip_apply(pre, |g, z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    grad.bottleneck.down = d_pre.tr_mul(&c.ffn_out);
    let d_ffn_out = d_adapted + &d_pre * &a.bottleneck.down;

    let d_act = &d_ffn_out * &w.w2;
    let d_pre_ffn = d_act.zip_map(&c.ffn_pre, |g, u| g * gelu_grad(u));
    let dn2 = &d_pre_ffn * &w.w1;
    let dh1 = dy + layer_norm_backward(&dn2, &c.ln2, &w.ln2_gain);

    let d_concat = &dh1 * &w.wo;
    let (t, d) = dy.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = DMatrix::zeros(t, d);
    let mut dk = DMatrix::zeros(t, d);
    let mut dv = DMatrix::zeros(t, d);
    for h in 0..heads {
        let p = &c.probs[h];
        let d_out = d_concat.columns(h * dh, dh);
        let vh = c.v.columns(h * dh, dh);
        let dp = d_out * vh.transpose();
        dv.columns_mut(h * dh, dh).copy_from(&(p.transpose() * d_out));
        // softmax backward, row-wise
        let mut ds = p.component_mul(&dp);
        for i in 0..t {
            let dot = ds.row(i).sum();
            for j in 0..t {
                ds[(i, j)] -= p[(i, j)] * dot;
            }
        }
        ds *= scale;
        dq.columns_mut(h * dh, dh).copy_from(&(&ds * c.k.columns(h * dh, dh)));
        dk.columns_mut(h * dh, dh)
            .copy_from(&(ds.transpose() * c.q.columns(h * dh, dh)));
    }

    let mut dn1 = &dq * &w.wq + &dk * &w.wk + &dv * &w.wv;
    dn1 += lora_backward(
        &dq,
        &c.n1,
        c.lora_q_mid.as_ref().expect("adapter forward"),
        &a.query,
        scaling,
        &mut grad.query,
    );
    dn1 += lora_backward(
        &dv,
        &c.n1,
        c.lora_v_mid.as_ref().expect("adapter forward"),
        &a.value,
        scaling,
        &mut grad.value,
    );
    dh1 + layer_norm_backward(&dn1, &c.ln1, &w.ln1_gain)
}

/// Back-propagates per-layer output gradients (`T × D` each) through an
/// adapted forward pass. Only adapter gradients are produced; backbone
/// weights receive none.
pub fn encoder_backward(
    weights: &EncoderWeights,
    adapters: &AdapterParams,
    trace: &EncoderTrace,
    d_outputs: &[DMatrix<f64>],
) -> Result<AdapterParams> {
    let cfg = &weights.config;
    if d_outputs.len() != cfg.num_layers {
        return Err(Error::dims("output gradient layers", cfg.num_layers, d_outputs.len()));
    }
    if trace.caches.iter().any(|c| c.bottleneck_pre.is_none()) {
        return Err(Error::Validation("trace was recorded without adapters".into()));
    }
    let scaling = adapters.config.scaling();
    let mut grads = adapters.zeros_like();
    let mut carry: Option<DMatrix<f64>> = None;
    for l in (0..cfg.num_layers).rev() {
        ensure_finite(&trace.outputs[l], l, "activation")?;
        let dy = match carry.take() {
            Some(c) => &d_outputs[l] + c,
            None => d_outputs[l].clone(),
        };
        ensure_finite(&dy, l, "gradient")?;
        let dx = layer_backward(
            &dy,
            &weights.layers[l],
            &adapters.layers[l],
            &trace.caches[l],
            scaling,
            cfg.num_heads,
            &mut grads.layers[l],
        );
        carry = Some(dx);
    }
    Ok(grads)
}
