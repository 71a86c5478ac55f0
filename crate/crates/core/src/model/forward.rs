//! Encoder forward pass with an activation cache, and its exact backward.
//!
//! Layout conventions: a batch of `B` windows of `L` rows is processed as
//! `N = B·L` token rows; all activations are row-major `N×width` buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{linear, linear_backward};
use super::params::{LayerSpans, Params, Span};
use super::{D_FF, D_MODEL, HEAD_DIM, LN_EPS, N_HEADS};
use crate::error::{Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Inverted-dropout scale masks of one layer (entries are 0 or `1/(1-p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDropout {
    pub attn: Vec<f64>,
    pub ffn: Vec<f64>,
}

pub enum Dropout<'a> {
    Off,
    Sample { rate: f64, rng: &'a mut ChaCha8Rng },
    Replay(&'a [LayerDropout]),
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights, `B×H×L×L`.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub drop_attn: Option<Vec<f64>>,
    pub xhat1: Vec<f64>,
    pub rstd1: Vec<f64>,
    pub h1: Vec<f64>,
    /// FFN pre-activation.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub drop_ffn: Option<Vec<f64>>,
    pub xhat2: Vec<f64>,
    pub rstd2: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Cache {
    pub batch: usize,
    pub window_len: usize,
    pub input: Vec<f64>,
    pub is_mask: Vec<bool>,
    pub layers: Vec<LayerCache>,
    pub logits: Vec<f64>,
    params_version: u64,
}

impl Cache {
    pub fn rows(&self) -> usize {
        self.batch * self.window_len
    }

    pub fn dropout_masks(&self) -> Option<Vec<LayerDropout>> {
        self.layers
            .iter()
            .map(|l| {
                Some(LayerDropout {
                    attn: l.drop_attn.clone()?,
                    ffn: l.drop_ffn.clone()?,
                })
            })
            .collect()
    }
}

/// Token embedding plus positional vectors.
pub(crate) fn embed(params: &Params, input: &[f64], rows: usize) -> Vec<f64> {
    let layout = params.layout();
    let (d_in, len) = (layout.input_width, layout.window_len);
    let mut h = linear(input, params.tensor(layout.w_in), Some(params.tensor(layout.b_in)), rows, d_in, D_MODEL);
    let pos = params.tensor(layout.pos);
    for (n, row) in h.chunks_exact_mut(D_MODEL).enumerate() {
        let p = &pos[(n % len) * D_MODEL..(n % len + 1) * D_MODEL];
        for (v, pv) in row.iter_mut().zip(p) {
            *v += pv;
        }
    }
    h
}

/// Dot product of two head slices with four independent accumulators.
fn dot_head(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    for (ca, cb) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for lane in 0..4 {
            acc[lane] += ca[lane] * cb[lane];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// One head of one window's attention. `q`, `k` and `v` rows are `stride`
/// apart; writes `L·L` probabilities and the head's `L×16` block of `ctx`.
pub(crate) fn attention_head(q: &[f64], k: &[f64], v: &[f64], stride: usize, len: usize, head: usize, probs: &mut [f64], ctx: &mut [f64]) {
    let scale = 1.0 / (HEAD_DIM as f64).sqrt();
    let col = head * HEAD_DIM;
    for i in 0..len {
        let qi = &q[i * stride + col..][..HEAD_DIM];
        let p = &mut probs[i * len..][..len];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = scale * dot_head(qi, &k[j * stride + col..][..HEAD_DIM]);
            max = max.max(*pj);
        }
        let mut total = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            total += *pj;
        }
        let inv = 1.0 / total;
        let out: &mut [f64; HEAD_DIM] = (&mut ctx[i * D_MODEL + col..][..HEAD_DIM]).try_into().expect("head width");
        out.fill(0.0);
        for (j, pj) in p.iter_mut().enumerate() {
            *pj *= inv;
            let vj: &[f64; HEAD_DIM] = v[j * stride + col..][..HEAD_DIM].try_into().expect("head width");
            for c in 0..HEAD_DIM {
                out[c] += *pj * vj[c];
            }
        }
    }
}

/// Attention of one window, all heads: writes `H·L·L` probabilities and
/// `L×D` context.
pub(crate) fn attention_window(q: &[f64], k: &[f64], v: &[f64], stride: usize, len: usize, probs: &mut [f64], ctx: &mut [f64]) {
    for head in 0..N_HEADS {
        attention_head(q, k, v, stride, len, head, &mut probs[head * len * len..][..len * len], ctx);
    }
}

/// Scaled dot-product attention over each window, all heads. Returns
/// `(probs, ctx)`.
pub(crate) fn attention_core(q: &[f64], k: &[f64], v: &[f64], batch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; batch * N_HEADS * len * len];
    let mut ctx = vec![0.0; batch * len * D_MODEL];
    let block = len * D_MODEL;
    for b in 0..batch {
        let w = b * block..(b + 1) * block;
        attention_window(
            &q[w.clone()],
            &k[w.clone()],
            &v[w.clone()],
            D_MODEL,
            len,
            &mut probs[b * N_HEADS * len * len..][..N_HEADS * len * len],
            &mut ctx[w],
        );
    }
    (probs, ctx)
}

/// Sum of one row with eight independent accumulators.
fn row_sum(r: &[f64; D_MODEL], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0; 8];
    for chunk in r.chunks_exact(8) {
        for lane in 0..8 {
            acc[lane] += f(chunk[lane]);
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Normalizes one row; writes `y` and optionally `xhat`, returns `1/σ`.
fn norm_row(r: &[f64; D_MODEL], gain: &[f64; D_MODEL], bias: &[f64; D_MODEL], y: &mut [f64], xhat: Option<&mut [f64]>) -> f64 {
    let mean = row_sum(r, |v| v) / D_MODEL as f64;
    let var = row_sum(r, |v| (v - mean) * (v - mean)) / D_MODEL as f64;
    let s = 1.0 / (var + LN_EPS).sqrt();
    let y: &mut [f64; D_MODEL] = y.try_into().expect("row width");
    for c in 0..D_MODEL {
        y[c] = gain[c] * ((r[c] - mean) * s) + bias[c];
    }
    if let Some(xhat) = xhat {
        for (xh, v) in xhat.iter_mut().zip(r) {
            *xh = (v - mean) * s;
        }
    }
    s
}

fn row_params<'a>(gain: &'a [f64], bias: &'a [f64]) -> (&'a [f64; D_MODEL], &'a [f64; D_MODEL]) {
    (gain.try_into().expect("gain width"), bias.try_into().expect("bias width"))
}

pub(crate) fn layer_norm(r: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (gain, bias) = row_params(gain, bias);
    let mut y = vec![0.0; r.len()];
    let mut xhat = vec![0.0; r.len()];
    let rstd = r
        .chunks_exact(D_MODEL)
        .zip(y.chunks_exact_mut(D_MODEL).zip(xhat.chunks_exact_mut(D_MODEL)))
        .map(|(row, (yr, xr))| norm_row(row.try_into().expect("row width"), gain, bias, yr, Some(xr)))
        .collect();
    (y, xhat, rstd)
}

/// `LayerNorm(skip + drop⊙branch)` writing only the normalized rows into
/// `out`. A dropout mask shorter than the input repeats cyclically.
pub(crate) fn residual_norm_into(skip: &[f64], branch: &[f64], drop: Option<&[f64]>, gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let (gain, bias) = row_params(gain, bias);
    let mut r = [0.0; D_MODEL];
    for (n, ((s, b), o)) in skip
        .chunks_exact(D_MODEL)
        .zip(branch.chunks_exact(D_MODEL))
        .zip(out.chunks_exact_mut(D_MODEL))
        .enumerate()
    {
        match drop {
            Some(m) => {
                let off = (n * D_MODEL) % m.len();
                for ((rv, sv), (bv, mv)) in r.iter_mut().zip(s).zip(b.iter().zip(&m[off..off + D_MODEL])) {
                    *rv = sv + bv * mv;
                }
            }
            None => {
                for ((rv, sv), bv) in r.iter_mut().zip(s).zip(b) {
                    *rv = sv + bv;
                }
            }
        }
        norm_row(&r, gain, bias, o, None);
    }
}

fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: &[f64], gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let mut dr = vec![0.0; dy.len()];
    let mut dxhat = [0.0; D_MODEL];
    for (n, s) in rstd.iter().enumerate() {
        let dyr = &dy[n * D_MODEL..(n + 1) * D_MODEL];
        let xr = &xhat[n * D_MODEL..(n + 1) * D_MODEL];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..D_MODEL {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xr[c];
        }
        mean_d /= D_MODEL as f64;
        mean_dx /= D_MODEL as f64;
        for c in 0..D_MODEL {
            dr[n * D_MODEL + c] = s * (dxhat[c] - mean_d - xr[c] * mean_dx);
        }
    }
    dr
}

fn sample_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Residual add (with optional dropout on the branch) followed by layer norm.
pub(crate) fn residual_norm(
    skip: &[f64],
    branch: &[f64],
    drop: Option<&[f64]>,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = match drop {
        Some(m) => skip.iter().zip(branch).zip(m).map(|((s, b), m)| s + b * m).collect(),
        None => skip.iter().zip(branch).map(|(s, b)| s + b).collect(),
    };
    layer_norm(&r, gain, bias)
}

pub(crate) fn head(params: &Params, h: &[f64], rows: usize) -> Vec<f64> {
    let l = params.layout();
    linear(h, params.tensor(l.w_out), Some(params.tensor(l.b_out)), rows, D_MODEL, l.input_width)
}

fn layer_forward(params: &Params, spans: &LayerSpans, input: Vec<f64>, batch: usize, len: usize, masks: (Option<Vec<f64>>, Option<Vec<f64>>)) -> LayerCache {
    let rows = batch * len;
    let t = |s: Span| params.tensor(s);
    let q = linear(&input, t(spans.wq), None, rows, D_MODEL, D_MODEL);
    let k = linear(&input, t(spans.wk), None, rows, D_MODEL, D_MODEL);
    let v = linear(&input, t(spans.wv), None, rows, D_MODEL, D_MODEL);
    let (probs, ctx) = attention_core(&q, &k, &v, batch, len);
    let o = linear(&ctx, t(spans.wo), None, rows, D_MODEL, D_MODEL);
    let (drop_attn, drop_ffn) = masks;
    let (h1, xhat1, rstd1) = residual_norm(&input, &o, drop_attn.as_deref(), t(spans.ln1_gain), t(spans.ln1_bias));
    let f = linear(&h1, t(spans.w1), Some(t(spans.b1)), rows, D_MODEL, D_FF);
    let g: Vec<f64> = f.iter().map(|&x| gelu(x)).collect();
    let z = linear(&g, t(spans.w2), Some(t(spans.b2)), rows, D_FF, D_MODEL);
    let (output, xhat2, rstd2) = residual_norm(&h1, &z, drop_ffn.as_deref(), t(spans.ln2_gain), t(spans.ln2_bias));
    LayerCache {
        input,
        q,
        k,
        v,
        probs,
        ctx,
        drop_attn,
        xhat1,
        rstd1,
        h1,
        f,
        g,
        drop_ffn,
        xhat2,
        rstd2,
        output,
    }
}

/// Runs the encoder on `batch` windows. `input` and `is_mask` are
/// `B·L×D` row-major (see [`super::params::apply_mask`]).
pub fn forward(params: &Params, input: &[f64], is_mask: &[bool], batch: usize, mut dropout: Dropout<'_>) -> Result<Cache> {
    let layout = params.layout();
    let (d_in, len) = (layout.input_width, layout.window_len);
    let rows = batch * len;
    if input.len() != rows * d_in || is_mask.len() != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} entries, expected {}x{}x{}",
            input.len(),
            batch,
            len,
            d_in
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    if let Dropout::Replay(m) = &dropout {
        if m.len() != layout.layers.len() || m.iter().any(|l| l.attn.len() != rows * D_MODEL || l.ffn.len() != rows * D_MODEL) {
            return Err(Error::ShapeMismatch("replayed dropout masks".into()));
        }
    }
    let mut h = embed(params, input, rows);
    let mut layers = Vec::with_capacity(layout.layers.len());
    for (li, spans) in layout.layers.iter().enumerate() {
        let masks = match &mut dropout {
            Dropout::Off => (None, None),
            Dropout::Sample { rate, rng } if *rate > 0.0 => (
                Some(sample_mask(rows * D_MODEL, *rate, rng)),
                Some(sample_mask(rows * D_MODEL, *rate, rng)),
            ),
            Dropout::Sample { .. } => (None, None),
            Dropout::Replay(m) => (Some(m[li].attn.clone()), Some(m[li].ffn.clone())),
        };
        let cache = layer_forward(params, spans, h, batch, len, masks);
        h = cache.output.clone();
        layers.push(cache);
    }
    let logits = head(params, &h, rows);
    Ok(Cache {
        batch,
        window_len: len,
        input: input.to_vec(),
        is_mask: is_mask.to_vec(),
        layers,
        logits,
        params_version: params.version(),
    })
}

fn attention_backward(cache: &LayerCache, dctx: &[f64], batch: usize, len: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (HEAD_DIM as f64).sqrt();
    let mut dq = vec![0.0; dctx.len()];
    let mut dk = vec![0.0; dctx.len()];
    let mut dv = vec![0.0; dctx.len()];
    let mut dp = vec![0.0; len];
    for b in 0..batch {
        for head in 0..N_HEADS {
            let col = head * HEAD_DIM;
            let at = |n: usize| (b * len + n) * D_MODEL + col;
            for i in 0..len {
                let p = &cache.probs[((b * N_HEADS + head) * len + i) * len..][..len];
                let dci = &dctx[at(i)..][..HEAD_DIM];
                for j in 0..len {
                    let vj = &cache.v[at(j)..][..HEAD_DIM];
                    dp[j] = dci.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let dvj = &mut dv[at(j)..][..HEAD_DIM];
                    for (o, g) in dvj.iter_mut().zip(dci) {
                        *o += p[j] * g;
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                for j in 0..len {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..HEAD_DIM {
                        dq[at(i) + c] += ds * cache.k[at(j) + c];
                        dk[at(j) + c] += ds * cache.q[at(i) + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Exact gradient of a scalar objective with respect to every parameter,
/// given its gradient with respect to the logits. The cache must come from
/// a forward pass on the same, unmodified parameters.
pub fn backward(params: &Params, cache: &Cache, dlogits: &[f64]) -> Result<Vec<f64>> {
    if cache.params_version != params.version() {
        return Err(Error::StaleCache("parameters changed since the forward pass".into()));
    }
    let layout = params.layout();
    let (d_in, len, batch) = (layout.input_width, layout.window_len, cache.batch);
    let rows = batch * len;
    if dlogits.len() != rows * d_in {
        return Err(Error::ShapeMismatch("logit gradient".into()));
    }
    let mut grad = vec![0.0; layout.total];
    let t = |s: Span| params.tensor(s);

    let last = &cache.layers.last().expect("at least one layer").output;
    let (gw, rest) = split_two(&mut grad, layout.w_out, layout.b_out);
    let mut dh = linear_backward(dlogits, last, t(layout.w_out), gw, Some(rest), rows, D_MODEL, d_in, true).expect("dx requested");

    for (spans, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        let (dgain, dbias) = split_two(&mut grad, spans.ln2_gain, spans.ln2_bias);
        let dr2 = layer_norm_backward(&dh, &lc.xhat2, &lc.rstd2, t(spans.ln2_gain), dgain, dbias);
        let dz: Vec<f64> = match &lc.drop_ffn {
            Some(m) => dr2.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => dr2.clone(),
        };
        let (gw2, gb2) = split_two(&mut grad, spans.w2, spans.b2);
        let dg = linear_backward(&dz, &lc.g, t(spans.w2), gw2, Some(gb2), rows, D_FF, D_MODEL, true).expect("dx");
        let df: Vec<f64> = dg.iter().zip(&lc.f).map(|(g, &x)| g * gelu_grad(x)).collect();
        let (gw1, gb1) = split_two(&mut grad, spans.w1, spans.b1);
        let dh1_ffn = linear_backward(&df, &lc.h1, t(spans.w1), gw1, Some(gb1), rows, D_MODEL, D_FF, true).expect("dx");
        let dh1: Vec<f64> = dr2.iter().zip(&dh1_ffn).map(|(a, b)| a + b).collect();

        let (dgain, dbias) = split_two(&mut grad, spans.ln1_gain, spans.ln1_bias);
        let dr1 = layer_norm_backward(&dh1, &lc.xhat1, &lc.rstd1, t(spans.ln1_gain), dgain, dbias);
        let d_o: Vec<f64> = match &lc.drop_attn {
            Some(m) => dr1.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => dr1.clone(),
        };
        let dctx = linear_backward(&d_o, &lc.ctx, t(spans.wo), &mut grad[spans.wo.range()], None, rows, D_MODEL, D_MODEL, true).expect("dx");
        let (dq, dk, dv) = attention_backward(lc, &dctx, batch, len);
        let mut dinput = dr1;
        for (dx, w) in [(&dq, spans.wq), (&dk, spans.wk), (&dv, spans.wv)] {
            let part = linear_backward(dx, &lc.input, t(w), &mut grad[w.range()], None, rows, D_MODEL, D_MODEL, true).expect("dx");
            for (a, b) in dinput.iter_mut().zip(&part) {
                *a += b;
            }
        }
        dh = dinput;
    }

    let pos = layout.pos;
    for (n, row) in dh.chunks_exact(D_MODEL).enumerate() {
        let slot = &mut grad[pos.offset + (n % len) * D_MODEL..][..D_MODEL];
        for (g, v) in slot.iter_mut().zip(row) {
            *g += v;
        }
    }
    let (gw, gb) = split_two(&mut grad, layout.w_in, layout.b_in);
    let dx = linear_backward(&dh, &cache.input, t(layout.w_in), gw, Some(gb), rows, d_in, D_MODEL, true).expect("dx");
    grad[layout.mask_value.offset] = dx.iter().zip(&cache.is_mask).filter(|(_, m)| **m).map(|(g, _)| g).sum();
    Ok(grad)
}

/// Two disjoint mutable views of the gradient vector; `a` must precede `b`.
fn split_two(grad: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = grad.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}
