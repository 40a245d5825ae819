//! Parameter storage plus the hand-written forward and backward passes.
//!
//! Everything is f64 and row-major: a linear layer stores `w[k * fan_out + j]`
//! so the inner loops of both passes run over contiguous memory. Attention
//! uses an additive key mask (a large negative finite value at pad
//! positions), and dropout is the inverted kind with masks cached for the
//! backward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::featurize::FeaturizedExample;
use crate::tokenize::PAD_ID;

use super::{loss_and_dlogits, valid_positions, LayerGroup, ModelConfig, SpanScores};

const KEY_MASK_NEG: f64 = -1e30;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: vec![0.0; fan_in * fan_out],
            b: vec![0.0; fan_out],
            fan_in,
            fan_out,
        }
    }

    fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha20Rng) -> Linear {
        let mut lin = Linear::zeros(fan_in, fan_out);
        fill_normal(&mut lin.w, std, rng);
        lin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn ones(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn zeros(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Embeddings {
    pub token: Vec<f64>,
    pub position: Vec<f64>,
    pub segment: Vec<f64>,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_attn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln_ffn: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSet {
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TensorKey {
    pub group: LayerGroup,
    pub name: &'static str,
}

pub(crate) struct TensorRef<'a> {
    pub key: TensorKey,
    pub shape: Vec<usize>,
    pub data: &'a Vec<f64>,
}

pub(crate) struct TensorMut<'a> {
    pub key: TensorKey,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<f64>,
}

impl TensorRef<'_> {
    pub fn key_string(&self) -> String {
        format!("{}.{}", self.key.group, self.key.name)
    }
}

impl TensorMut<'_> {
    pub fn key_string(&self) -> String {
        format!("{}.{}", self.key.group, self.key.name)
    }
}

fn fill_normal(data: &mut [f64], std: f64, rng: &mut ChaCha20Rng) {
    for slot in data {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *slot = z * std;
    }
}

impl ParamSet {
    /// Allocates and initializes all tensors in storage order: weights and
    /// embeddings from normal(0, init_std), biases and layer-norm shifts
    /// zero, layer-norm scales one.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> ParamSet {
        let d = cfg.hidden;
        let mut token = vec![0.0; cfg.vocab_size * d];
        let mut position = vec![0.0; cfg.max_positions * d];
        let mut segment = vec![0.0; cfg.segments * d];
        fill_normal(&mut token, cfg.init_std, rng);
        fill_normal(&mut position, cfg.init_std, rng);
        fill_normal(&mut segment, cfg.init_std, rng);
        let embeddings = Embeddings {
            token,
            position,
            segment,
            ln: LayerNorm::ones(d),
        };
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer {
                wq: Linear::init(d, d, cfg.init_std, rng),
                wk: Linear::init(d, d, cfg.init_std, rng),
                wv: Linear::init(d, d, cfg.init_std, rng),
                wo: Linear::init(d, d, cfg.init_std, rng),
                ln_attn: LayerNorm::ones(d),
                ff_in: Linear::init(d, cfg.ffn_dim, cfg.init_std, rng),
                ff_out: Linear::init(cfg.ffn_dim, d, cfg.init_std, rng),
                ln_ffn: LayerNorm::ones(d),
            })
            .collect();
        let head = Linear::init(d, 2, cfg.init_std, rng);
        ParamSet {
            embeddings,
            layers,
            head,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> ParamSet {
        let d = cfg.hidden;
        ParamSet {
            embeddings: Embeddings {
                token: vec![0.0; cfg.vocab_size * d],
                position: vec![0.0; cfg.max_positions * d],
                segment: vec![0.0; cfg.segments * d],
                ln: LayerNorm::zeros(d),
            },
            layers: (0..cfg.num_layers)
                .map(|_| EncoderLayer {
                    wq: Linear::zeros(d, d),
                    wk: Linear::zeros(d, d),
                    wv: Linear::zeros(d, d),
                    wo: Linear::zeros(d, d),
                    ln_attn: LayerNorm::zeros(d),
                    ff_in: Linear::zeros(d, cfg.ffn_dim),
                    ff_out: Linear::zeros(cfg.ffn_dim, d),
                    ln_ffn: LayerNorm::zeros(d),
                })
                .collect(),
            head: Linear::zeros(d, 2),
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        debug_assert_eq!(mine.len(), theirs.len());
        for (dst, src) in mine.iter_mut().zip(theirs) {
            debug_assert_eq!(dst.key, src.key);
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += *b;
            }
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        let e = &self.embeddings;
        let d = e.ln.gamma.len();
        let emb = LayerGroup::Embedding;
        out.push(tref(emb, "token", vec![e.token.len() / d, d], &e.token));
        out.push(tref(
            emb,
            "position",
            vec![e.position.len() / d, d],
            &e.position,
        ));
        out.push(tref(
            emb,
            "segment",
            vec![e.segment.len() / d, d],
            &e.segment,
        ));
        out.push(tref(emb, "layer_norm.gamma", vec![d], &e.ln.gamma));
        out.push(tref(emb, "layer_norm.beta", vec![d], &e.ln.beta));
        for (i, layer) in self.layers.iter().enumerate() {
            let g = LayerGroup::Transformer(i + 1);
            for (name, lin) in [
                ("attention.query", &layer.wq),
                ("attention.key", &layer.wk),
                ("attention.value", &layer.wv),
                ("attention.output", &layer.wo),
            ] {
                out.push(tref(
                    g,
                    weight_name(name),
                    vec![lin.fan_in, lin.fan_out],
                    &lin.w,
                ));
                out.push(tref(g, bias_name(name), vec![lin.fan_out], &lin.b));
            }
            out.push(tref(
                g,
                "attention.layer_norm.gamma",
                vec![d],
                &layer.ln_attn.gamma,
            ));
            out.push(tref(
                g,
                "attention.layer_norm.beta",
                vec![d],
                &layer.ln_attn.beta,
            ));
            for (name, lin) in [
                ("ffn.intermediate", &layer.ff_in),
                ("ffn.output", &layer.ff_out),
            ] {
                out.push(tref(
                    g,
                    weight_name(name),
                    vec![lin.fan_in, lin.fan_out],
                    &lin.w,
                ));
                out.push(tref(g, bias_name(name), vec![lin.fan_out], &lin.b));
            }
            out.push(tref(
                g,
                "ffn.layer_norm.gamma",
                vec![d],
                &layer.ln_ffn.gamma,
            ));
            out.push(tref(g, "ffn.layer_norm.beta", vec![d], &layer.ln_ffn.beta));
        }
        out.push(tref(
            LayerGroup::Head,
            "weight",
            vec![self.head.fan_in, self.head.fan_out],
            &self.head.w,
        ));
        out.push(tref(
            LayerGroup::Head,
            "bias",
            vec![self.head.fan_out],
            &self.head.b,
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let d = self.embeddings.ln.gamma.len();
        let e = &mut self.embeddings;
        let emb = LayerGroup::Embedding;
        let token_rows = e.token.len() / d;
        let pos_rows = e.position.len() / d;
        let seg_rows = e.segment.len() / d;
        out.push(tmut(emb, "token", vec![token_rows, d], &mut e.token));
        out.push(tmut(emb, "position", vec![pos_rows, d], &mut e.position));
        out.push(tmut(emb, "segment", vec![seg_rows, d], &mut e.segment));
        out.push(tmut(emb, "layer_norm.gamma", vec![d], &mut e.ln.gamma));
        out.push(tmut(emb, "layer_norm.beta", vec![d], &mut e.ln.beta));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let g = LayerGroup::Transformer(i + 1);
            for (name, lin) in [
                ("attention.query", &mut layer.wq),
                ("attention.key", &mut layer.wk),
                ("attention.value", &mut layer.wv),
                ("attention.output", &mut layer.wo),
            ] {
                let (fan_in, fan_out) = (lin.fan_in, lin.fan_out);
                out.push(tmut(
                    g,
                    weight_name(name),
                    vec![fan_in, fan_out],
                    &mut lin.w,
                ));
                out.push(tmut(g, bias_name(name), vec![fan_out], &mut lin.b));
            }
            out.push(tmut(
                g,
                "attention.layer_norm.gamma",
                vec![d],
                &mut layer.ln_attn.gamma,
            ));
            out.push(tmut(
                g,
                "attention.layer_norm.beta",
                vec![d],
                &mut layer.ln_attn.beta,
            ));
            for (name, lin) in [
                ("ffn.intermediate", &mut layer.ff_in),
                ("ffn.output", &mut layer.ff_out),
            ] {
                let (fan_in, fan_out) = (lin.fan_in, lin.fan_out);
                out.push(tmut(
                    g,
                    weight_name(name),
                    vec![fan_in, fan_out],
                    &mut lin.w,
                ));
                out.push(tmut(g, bias_name(name), vec![fan_out], &mut lin.b));
            }
            out.push(tmut(
                g,
                "ffn.layer_norm.gamma",
                vec![d],
                &mut layer.ln_ffn.gamma,
            ));
            out.push(tmut(
                g,
                "ffn.layer_norm.beta",
                vec![d],
                &mut layer.ln_ffn.beta,
            ));
        }
        let (fan_in, fan_out) = (self.head.fan_in, self.head.fan_out);
        out.push(tmut(
            LayerGroup::Head,
            "weight",
            vec![fan_in, fan_out],
            &mut self.head.w,
        ));
        out.push(tmut(
            LayerGroup::Head,
            "bias",
            vec![fan_out],
            &mut self.head.b,
        ));
        out
    }
}

fn tref<'a>(
    group: LayerGroup,
    name: &'static str,
    shape: Vec<usize>,
    data: &'a Vec<f64>,
) -> TensorRef<'a> {
    TensorRef {
        key: TensorKey { group, name },
        shape,
        data,
    }
}

fn tmut<'a>(
    group: LayerGroup,
    name: &'static str,
    shape: Vec<usize>,
    data: &'a mut Vec<f64>,
) -> TensorMut<'a> {
    TensorMut {
        key: TensorKey { group, name },
        shape,
        data,
    }
}

fn weight_name(prefix: &'static str) -> &'static str {
    match prefix {
        "attention.query" => "attention.query.weight",
        "attention.key" => "attention.key.weight",
        "attention.value" => "attention.value.weight",
        "attention.output" => "attention.output.weight",
        "ffn.intermediate" => "ffn.intermediate.weight",
        "ffn.output" => "ffn.output.weight",
        _ => unreachable!(),
    }
}

fn bias_name(prefix: &'static str) -> &'static str {
    match prefix {
        "attention.query" => "attention.query.bias",
        "attention.key" => "attention.key.bias",
        "attention.value" => "attention.value.bias",
        "attention.output" => "attention.output.bias",
        "ffn.intermediate" => "ffn.intermediate.bias",
        "ffn.output" => "ffn.output.bias",
        _ => unreachable!(),
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax output per head, concatenated: `att[a * n * n ..]`.
    att: Vec<f64>,
    att_mask: Option<Vec<f64>>,
    ctx: Vec<f64>,
    out_mask: Option<Vec<f64>>,
    ln_attn: LnCache,
    h_mid: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    ffn_mask: Option<Vec<f64>>,
    ln_ffn: LnCache,
}

struct Cache {
    emb_ln: LnCache,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_hidden: Vec<f64>,
}

struct DropoutDraw {
    p: f64,
    rng: ChaCha20Rng,
}

impl DropoutDraw {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.p {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }
}

fn apply_mask(data: &mut [f64], mask: &[f64]) {
    for (x, m) in data.iter_mut().zip(mask) {
        *x *= m;
    }
}

fn linear_fwd(x: &[f64], n: usize, lin: &Linear) -> Vec<f64> {
    let (fin, fout) = (lin.fan_in, lin.fan_out);
    let mut y = Vec::with_capacity(n * fout);
    for _ in 0..n {
        y.extend_from_slice(&lin.b);
    }
    for t in 0..n {
        let x_row = &x[t * fin..(t + 1) * fin];
        let y_row = &mut y[t * fout..(t + 1) * fout];
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let w_row = &lin.w[k * fout..(k + 1) * fout];
            for (yj, wj) in y_row.iter_mut().zip(w_row) {
                *yj += xv * wj;
            }
        }
    }
    y
}

/// Accumulates dW and db into `grad` and optionally returns dx.
fn linear_bwd(
    x: &[f64],
    n: usize,
    lin: &Linear,
    dy: &[f64],
    grad: &mut Linear,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (fin, fout) = (lin.fan_in, lin.fan_out);
    for t in 0..n {
        let x_row = &x[t * fin..(t + 1) * fin];
        let dy_row = &dy[t * fout..(t + 1) * fout];
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let gw_row = &mut grad.w[k * fout..(k + 1) * fout];
            for (gw, dyj) in gw_row.iter_mut().zip(dy_row) {
                *gw += xv * dyj;
            }
        }
        for (gb, dyj) in grad.b.iter_mut().zip(dy_row) {
            *gb += dyj;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0; n * fin];
    for t in 0..n {
        let dy_row = &dy[t * fout..(t + 1) * fout];
        let dx_row = &mut dx[t * fin..(t + 1) * fin];
        for (k, dxk) in dx_row.iter_mut().enumerate() {
            let w_row = &lin.w[k * fout..(k + 1) * fout];
            let mut sum = 0.0;
            for (dyj, wj) in dy_row.iter().zip(w_row) {
                sum += dyj * wj;
            }
            *dxk = sum;
        }
    }
    Some(dx)
}

fn ln_fwd(x: &[f64], n: usize, d: usize, ln: &LayerNorm, eps: f64) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[t] = r;
        let xh_row = &mut xhat[t * d..(t + 1) * d];
        let y_row = &mut y[t * d..(t + 1) * d];
        for i in 0..d {
            let xh = (row[i] - mean) * r;
            xh_row[i] = xh;
            y_row[i] = ln.gamma[i] * xh + ln.beta[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd(
    dy: &[f64],
    n: usize,
    d: usize,
    cache: &LnCache,
    ln: &LayerNorm,
    grad: &mut LayerNorm,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for t in 0..n {
        let dy_row = &dy[t * d..(t + 1) * d];
        let xh_row = &cache.xhat[t * d..(t + 1) * d];
        // dxhat = dy * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dy_row[i] * ln.gamma[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh_row[i];
            grad.gamma[i] += dy_row[i] * xh_row[i];
            grad.beta[i] += dy_row[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[t];
        let dx_row = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let dxh = dy_row[i] * ln.gamma[i];
            dx_row[i] = r * (dxh - mean_dxhat - xh_row[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

fn forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    ex: &FeaturizedExample,
    dropout: Option<(f64, u64)>,
    want_cache: bool,
) -> (SpanScores, Option<Cache>) {
    let n = ex.input_ids.len();
    let d = cfg.hidden;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let key_mask: Vec<f64> = ex
        .input_ids
        .iter()
        .map(|&id| if id == PAD_ID { KEY_MASK_NEG } else { 0.0 })
        .collect();

    let mut draw = dropout.map(|(p, seed)| DropoutDraw {
        p,
        rng: ChaCha20Rng::seed_from_u64(seed),
    });

    let e = &params.embeddings;
    let mut emb_sum = vec![0.0; n * d];
    for t in 0..n {
        let tok_row = &e.token[ex.input_ids[t] as usize * d..][..d];
        let pos_row = &e.position[t * d..][..d];
        let seg_row = &e.segment[ex.segment_ids[t] as usize * d..][..d];
        let out = &mut emb_sum[t * d..(t + 1) * d];
        for i in 0..d {
            out[i] = tok_row[i] + pos_row[i] + seg_row[i];
        }
    }
    let (mut h, emb_ln) = ln_fwd(&emb_sum, n, d, &e.ln, cfg.layer_norm_eps);
    let emb_mask = draw.as_mut().map(|dr| dr.mask(n * d));
    if let Some(mask) = &emb_mask {
        apply_mask(&mut h, mask);
    }

    let mut layer_caches = Vec::with_capacity(if want_cache { cfg.num_layers } else { 0 });
    for layer in &params.layers {
        let input = h;
        let q = linear_fwd(&input, n, &layer.wq);
        let k = linear_fwd(&input, n, &layer.wk);
        let v = linear_fwd(&input, n, &layer.wv);

        let mut att = vec![0.0; heads * n * n];
        for a in 0..heads {
            let off = a * dh;
            let att_h = &mut att[a * n * n..(a + 1) * n * n];
            for i in 0..n {
                let q_row = &q[i * d + off..i * d + off + dh];
                let s_row = &mut att_h[i * n..(i + 1) * n];
                for j in 0..n {
                    let k_row = &k[j * d + off..j * d + off + dh];
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q_row[c] * k_row[c];
                    }
                    s_row[j] = dot * scale + key_mask[j];
                }
                softmax_row(s_row);
            }
        }
        let att_mask = draw.as_mut().map(|dr| dr.mask(heads * n * n));
        let mut att_dropped = att.clone();
        if let Some(mask) = &att_mask {
            apply_mask(&mut att_dropped, mask);
        }

        let mut ctx = vec![0.0; n * d];
        for a in 0..heads {
            let off = a * dh;
            let att_h = &att_dropped[a * n * n..(a + 1) * n * n];
            for i in 0..n {
                let ctx_row = &mut ctx[i * d + off..i * d + off + dh];
                let att_row = &att_h[i * n..(i + 1) * n];
                for (j, &w) in att_row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let v_row = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        ctx_row[c] += w * v_row[c];
                    }
                }
            }
        }

        let mut attn_out = linear_fwd(&ctx, n, &layer.wo);
        let out_mask = draw.as_mut().map(|dr| dr.mask(n * d));
        if let Some(mask) = &out_mask {
            apply_mask(&mut attn_out, mask);
        }
        let mut res1 = input.clone();
        for (r, o) in res1.iter_mut().zip(&attn_out) {
            *r += o;
        }
        let (h_mid, ln_attn) = ln_fwd(&res1, n, d, &layer.ln_attn, cfg.layer_norm_eps);

        let ff_pre = linear_fwd(&h_mid, n, &layer.ff_in);
        let ff_act: Vec<f64> = ff_pre.iter().map(|&u| gelu(u)).collect();
        let mut ff_out = linear_fwd(&ff_act, n, &layer.ff_out);
        let ffn_mask = draw.as_mut().map(|dr| dr.mask(n * d));
        if let Some(mask) = &ffn_mask {
            apply_mask(&mut ff_out, mask);
        }
        let mut res2 = h_mid.clone();
        for (r, f) in res2.iter_mut().zip(&ff_out) {
            *r += f;
        }
        let (h_next, ln_ffn) = ln_fwd(&res2, n, d, &layer.ln_ffn, cfg.layer_norm_eps);

        if want_cache {
            layer_caches.push(LayerCache {
                input,
                q,
                k,
                v,
                att,
                att_mask,
                ctx,
                out_mask,
                ln_attn,
                h_mid,
                ff_pre,
                ff_act,
                ffn_mask,
                ln_ffn,
            });
        }
        h = h_next;
    }

    let logits = linear_fwd(&h, n, &params.head);
    let mut start_logits = Vec::with_capacity(n);
    let mut end_logits = Vec::with_capacity(n);
    for t in 0..n {
        start_logits.push(logits[t * 2]);
        end_logits.push(logits[t * 2 + 1]);
    }
    let scores = SpanScores {
        start_logits,
        end_logits,
    };
    let cache = want_cache.then_some(Cache {
        emb_ln,
        emb_mask,
        layers: layer_caches,
        final_hidden: h,
    });
    (scores, cache)
}

pub(crate) fn forward_scores(
    params: &ParamSet,
    cfg: &ModelConfig,
    ex: &FeaturizedExample,
    dropout: Option<(f64, u64)>,
) -> Result<SpanScores> {
    let (scores, _) = forward(params, cfg, ex, dropout, false);
    if !scores.start_logits.iter().all(|v| v.is_finite())
        || !scores.end_logits.iter().all(|v| v.is_finite())
    {
        return Err(Error::numerical(format!(
            "example {}: non-finite logits",
            ex.pair_id
        )));
    }
    Ok(scores)
}

/// Forward, loss, and backward for one example. Returns the unweighted loss
/// and gradients of `weight * loss`. `lowest_layer` (0-based) bounds how deep
/// parameter gradients are needed; `embedding` asks for embedding gradients.
pub(crate) fn example_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    ex: &FeaturizedExample,
    weight: f64,
    lowest_layer: usize,
    embedding: bool,
    dropout: Option<(f64, u64)>,
) -> Result<(f64, ParamSet)> {
    let gold = ex
        .gold_span
        .ok_or_else(|| Error::validation(format!("example {} has no gold span", ex.pair_id)))?;
    let (scores, cache) = forward(params, cfg, ex, dropout, true);
    let cache = cache.expect("cache requested");
    let valid = valid_positions(ex);
    let (loss, mut d_start, mut d_end) = loss_and_dlogits(&scores, gold, &valid, &ex.pair_id)?;
    for v in d_start.iter_mut().chain(d_end.iter_mut()) {
        *v *= weight;
    }

    let mut grads = ParamSet::zeros(cfg);
    backward(
        params,
        cfg,
        ex,
        &cache,
        &d_start,
        &d_end,
        lowest_layer,
        embedding,
        &mut grads,
    );
    Ok((loss, grads))
}

#[allow(clippy::too_many_arguments)]
fn backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    ex: &FeaturizedExample,
    cache: &Cache,
    d_start: &[f64],
    d_end: &[f64],
    lowest_layer: usize,
    embedding: bool,
    grads: &mut ParamSet,
) {
    let n = ex.input_ids.len();
    let d = cfg.hidden;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let num_layers = cfg.num_layers;

    let mut dlogits = vec![0.0; n * 2];
    for t in 0..n {
        dlogits[t * 2] = d_start[t];
        dlogits[t * 2 + 1] = d_end[t];
    }
    let want_deeper = embedding || lowest_layer < num_layers;
    let dfinal = linear_bwd(
        &cache.final_hidden,
        n,
        &params.head,
        &dlogits,
        &mut grads.head,
        want_deeper,
    );
    let Some(mut dh_cur) = dfinal else {
        return;
    };

    for li in (lowest_layer..num_layers).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let g = &mut grads.layers[li];

        let mut dh_mid = ln_bwd(&dh_cur, n, d, &lc.ln_ffn, &layer.ln_ffn, &mut g.ln_ffn);
        // res2 = h_mid + dropout(ff_out): the layer-norm input gradient flows
        // to both addends.
        let mut d_ffout = dh_mid.clone();
        if let Some(mask) = &lc.ffn_mask {
            apply_mask(&mut d_ffout, mask);
        }
        let dg = linear_bwd(&lc.ff_act, n, &layer.ff_out, &d_ffout, &mut g.ff_out, true)
            .expect("dx requested");
        let mut du = dg;
        for (duv, &u) in du.iter_mut().zip(&lc.ff_pre) {
            *duv *= gelu_prime(u);
        }
        let dh_mid2 =
            linear_bwd(&lc.h_mid, n, &layer.ff_in, &du, &mut g.ff_in, true).expect("dx requested");
        for (a, b) in dh_mid.iter_mut().zip(&dh_mid2) {
            *a += *b;
        }

        let dres1 = ln_bwd(&dh_mid, n, d, &lc.ln_attn, &layer.ln_attn, &mut g.ln_attn);
        let mut dh_in = dres1.clone();
        let mut d_attnout = dres1;
        if let Some(mask) = &lc.out_mask {
            apply_mask(&mut d_attnout, mask);
        }
        let dctx =
            linear_bwd(&lc.ctx, n, &layer.wo, &d_attnout, &mut g.wo, true).expect("dx requested");

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for a in 0..heads {
            let off = a * dh;
            let att_h = &lc.att[a * n * n..(a + 1) * n * n];
            let mask_h = lc.att_mask.as_ref().map(|m| &m[a * n * n..(a + 1) * n * n]);

            // Gradients through ctx = att_dropped @ v.
            let mut datt = vec![0.0; n * n];
            for i in 0..n {
                let dctx_row = &dctx[i * d + off..i * d + off + dh];
                let datt_row = &mut datt[i * n..(i + 1) * n];
                let att_row = &att_h[i * n..(i + 1) * n];
                for j in 0..n {
                    let keep = mask_h.map_or(1.0, |m| m[i * n + j]);
                    if keep == 0.0 {
                        continue;
                    }
                    let v_row = &v_slice(&lc.v, j, d, off, dh);
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += dctx_row[c] * v_row[c];
                    }
                    // d(att_dropped) then through the dropout mask.
                    datt_row[j] = dot * keep;
                    let w = att_row[j] * keep;
                    if w != 0.0 {
                        let dv_row = &mut dv[j * d + off..j * d + off + dh];
                        for c in 0..dh {
                            dv_row[c] += w * dctx_row[c];
                        }
                    }
                }
            }

            // Softmax backward row by row, then the scaled dot product.
            for i in 0..n {
                let att_row = &att_h[i * n..(i + 1) * n];
                let datt_row = &mut datt[i * n..(i + 1) * n];
                let mut dot = 0.0;
                for j in 0..n {
                    dot += datt_row[j] * att_row[j];
                }
                for j in 0..n {
                    datt_row[j] = att_row[j] * (datt_row[j] - dot);
                }
                let q_row = &lc.q[i * d + off..i * d + off + dh];
                let dq_row = &mut dq[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let ds = datt_row[j] * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k_row = &lc.k[j * d + off..j * d + off + dh];
                    let dk_row = &mut dk[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        dq_row[c] += ds * k_row[c];
                        dk_row[c] += ds * q_row[c];
                    }
                }
            }
        }

        for (dproj, lin, glin) in [
            (&dq, &layer.wq, &mut g.wq),
            (&dk, &layer.wk, &mut g.wk),
            (&dv, &layer.wv, &mut g.wv),
        ] {
            let dx = linear_bwd(&lc.input, n, lin, dproj, glin, true).expect("dx requested");
            for (a, b) in dh_in.iter_mut().zip(&dx) {
                *a += *b;
            }
        }
        dh_cur = dh_in;
    }

    if embedding {
        let mut d_emb_out = dh_cur;
        if let Some(mask) = &cache.emb_mask {
            apply_mask(&mut d_emb_out, mask);
        }
        let e = &params.embeddings;
        let d_emb_sum = ln_bwd(
            &d_emb_out,
            n,
            d,
            &cache.emb_ln,
            &e.ln,
            &mut grads.embeddings.ln,
        );
        for t in 0..n {
            let src = &d_emb_sum[t * d..(t + 1) * d];
            let tok = &mut grads.embeddings.token[ex.input_ids[t] as usize * d..][..d];
            for i in 0..d {
                tok[i] += src[i];
            }
            let pos = &mut grads.embeddings.position[t * d..][..d];
            for i in 0..d {
                pos[i] += src[i];
            }
            let seg = &mut grads.embeddings.segment[ex.segment_ids[t] as usize * d..][..d];
            for i in 0..d {
                seg[i] += src[i];
            }
        }
    }
}

fn v_slice(v: &[f64], j: usize, d: usize, off: usize, dh: usize) -> &[f64] {
    &v[j * d + off..j * d + off + dh]
}
