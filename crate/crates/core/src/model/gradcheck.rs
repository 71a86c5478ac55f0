//! Central finite-difference oracle for the hand-written backward pass.
//!
//! Every parameter is perturbed by `±h` and the loss is re-evaluated. Doing
//! that with full forward passes is far too slow for tens of thousands of
//! parameters, so the oracle enters the network at the first activation a
//! parameter touches: perturbing `W[i][j]` in `y = W x` changes `y[:, i]` by
//! exactly `±h·x[:, j]`, after which the unchanged remainder of the network
//! runs on a batch of perturbed copies. GELU inputs of perturbed copies are
//! evaluated with a fourth-order expansion around the unperturbed value when
//! the offset is tiny (truncation below 1e-16) and exactly otherwise.

use std::cell::RefCell;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::forward::{attention_head, attention_window, backward, forward, gelu, residual_norm_into, Cache, Dropout, LayerDropout};
use super::linalg::{linear, linear_into};
use super::loss::{focal_loss, focal_term};
use super::params::{apply_mask, init_with_width, InitRule, Params, Span};
use super::train::sample_mask_set;
use super::{D_FF, D_MODEL, HEAD_DIM, N_HEADS, N_LAYERS};
use crate::error::Result;
use crate::sensor::HomeSchema;

/// Perturbed copies evaluated per batched suffix pass.
const COPIES_PER_PASS: usize = 64;
/// Largest GELU input offset handled by the local expansion.
const TAYLOR_RADIUS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub models: usize,
    pub widths: Vec<usize>,
    pub window_len: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub focal_gamma: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            models: 25,
            widths: vec![6, 12],
            window_len: 5,
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            focal_gamma: 2.0,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub input_width: usize,
    pub seed: u64,
    pub parameters: usize,
    pub dropout: bool,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub models: Vec<ModelReport>,
    pub max_rel_error: f64,
    pub elapsed_secs: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// One masked reconstruction problem on a single window.
#[derive(Debug, Clone)]
pub struct Problem {
    pub input: Vec<f64>,
    pub is_mask: Vec<bool>,
    pub targets: Vec<f64>,
    pub gamma: f64,
    pub dropout: Option<Vec<LayerDropout>>,
}

impl Problem {
    pub fn loss(&self, params: &Params) -> Result<f64> {
        let dropout = match &self.dropout {
            Some(m) => Dropout::Replay(m),
            None => Dropout::Off,
        };
        let cache = forward(params, &self.input, &self.is_mask, 1, dropout)?;
        Ok(focal_loss(&cache.logits, &self.targets, &self.is_mask, self.gamma)?.0)
    }

    pub fn analytic_gradient(&self, params: &Params) -> Result<(Cache, Vec<f64>)> {
        let dropout = match &self.dropout {
            Some(m) => Dropout::Replay(m),
            None => Dropout::Off,
        };
        let cache = forward(params, &self.input, &self.is_mask, 1, dropout)?;
        let (_, dlogits) = focal_loss(&cache.logits, &self.targets, &self.is_mask, self.gamma)?;
        let grad = backward(params, &cache, &dlogits)?;
        Ok((cache, grad))
    }
}

/// Random parameters at a scale where attention is far from uniform and
/// every nonlinearity is exercised.
pub fn random_model(input_width: usize, window_len: usize, seed: u64) -> Result<Params> {
    let mut params = init_with_width(input_width, window_len, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let layout = params.layout().clone();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let data = params.data_mut();
    for t in &layout.tensors {
        let fan_in = t.span.cols.max(1) as f64;
        for v in &mut data[t.span.range()] {
            *v = match t.init {
                InitRule::Normal => unit.sample(&mut rng) / fan_in.sqrt(),
                InitRule::Zeros => 0.1 * unit.sample(&mut rng),
                InitRule::Ones => 1.0 + 0.1 * unit.sample(&mut rng),
                InitRule::MaskFill => rng.random_range(0.2..0.8),
            };
        }
    }
    Ok(params)
}

/// A random single-window problem for a schema of `input_width / 2` binary
/// sensors.
pub fn random_problem(params: &Params, gamma: f64, dropout_rate: f64, seed: u64) -> Result<Problem> {
    let layout = params.layout();
    let ids: Vec<String> = (0..layout.input_width / 2).map(|i| format!("s{i}")).collect();
    let schema = HomeSchema::build(&ids, &[])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let bits: Vec<u8> = (0..layout.window_len * layout.input_width)
        .map(|_| rng.random_bool(0.4) as u8)
        .collect();
    let masked = sample_mask_set(schema.len(), 0.4, &mut rng);
    let input = apply_mask(&bits, &schema, &masked, params.mask_value());
    let dropout = if dropout_rate > 0.0 {
        let probe = forward(
            params,
            &input.values,
            &input.is_mask,
            1,
            Dropout::Sample {
                rate: dropout_rate,
                rng: &mut rng,
            },
        )?;
        probe.dropout_masks()
    } else {
        None
    };
    Ok(Problem {
        input: input.values,
        is_mask: input.is_mask,
        targets: bits.iter().map(|&b| f64::from(b)).collect(),
        gamma,
        dropout,
    })
}

/// Where a perturbation first enters the network.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Entry {
    LayerInput(usize),
    Query(usize),
    Key(usize),
    Value(usize),
    AttnOut(usize),
    FfnIn(usize),
    FfnPre(usize),
    FfnOut(usize),
    Logits,
}

/// How parameter `(i, j)` of a tensor shifts column `i` of the entry
/// activation.
#[derive(Debug, Clone, Copy)]
enum Shift<'a> {
    /// Weight: `±h·x[t][j]` for source activation `x` of the given width.
    Weight(&'a [f64], usize),
    /// Bias: `±h` in every row.
    Bias,
    /// Layer-norm gain: `±h·xhat[t][i]`.
    Gain(&'a [f64]),
    /// Positional vector: `±h` in row `i` only, column `j`.
    Position,
}

struct GeluExpansion {
    base_f: Vec<f64>,
    base_g: Vec<f64>,
    coeffs: Vec<[f64; 4]>,
}

impl GeluExpansion {
    fn new(f: &[f64], g: &[f64]) -> Self {
        const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
        let coeffs = f
            .iter()
            .map(|&x| {
                let phi = INV_SQRT_2PI * (-0.5 * x * x).exp();
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let x2 = x * x;
                [
                    cdf + x * phi,
                    phi * (2.0 - x2) / 2.0,
                    phi * (x2 * x - 4.0 * x) / 6.0,
                    phi * (-x2 * x2 + 7.0 * x2 - 4.0) / 24.0,
                ]
            })
            .collect();
        GeluExpansion {
            base_f: f.to_vec(),
            base_g: g.to_vec(),
            coeffs,
        }
    }

    fn eval_one(&self, at: usize, x: f64) -> f64 {
        let delta = x - self.base_f[at];
        if delta.abs() <= TAYLOR_RADIUS {
            let c = &self.coeffs[at];
            self.base_g[at] + delta * (c[0] + delta * (c[1] + delta * (c[2] + delta * c[3])))
        } else {
            gelu(x)
        }
    }

    fn eval(&self, f: &[f64], out: &mut [f64]) {
        let mut far = false;
        for (chunk, dst) in f.chunks_exact(self.base_f.len()).zip(out.chunks_exact_mut(self.base_f.len())) {
            for ((((&x, &x0), &g0), c), o) in chunk.iter().zip(&self.base_f).zip(&self.base_g).zip(&self.coeffs).zip(dst) {
                let delta = x - x0;
                far |= delta.abs() > TAYLOR_RADIUS;
                *o = g0 + delta * (c[0] + delta * (c[1] + delta * (c[2] + delta * c[3])));
            }
        }
        if far {
            for (chunk, dst) in f.chunks_exact(self.base_f.len()).zip(out.chunks_exact_mut(self.base_f.len())) {
                for ((&x, &x0), o) in chunk.iter().zip(&self.base_f).zip(dst) {
                    if (x - x0).abs() > TAYLOR_RADIUS {
                        *o = gelu(x);
                    }
                }
            }
        }
    }
}

struct LayerBase {
    /// `[Wq; Wk; Wv]` stacked, `3D×D`.
    qkv: Vec<f64>,
    attn_out: Vec<f64>,
    ffn_out: Vec<f64>,
    gelu: GeluExpansion,
}

struct Engine<'a> {
    params: &'a Params,
    problem: &'a Problem,
    cache: &'a Cache,
    bases: Vec<LayerBase>,
    masked_count: usize,
    /// Recycled activation buffers; fresh large allocations dominate the
    /// cost of a pass otherwise.
    pool: RefCell<Vec<Vec<f64>>>,
}

impl<'a> Engine<'a> {
    fn new(params: &'a Params, problem: &'a Problem, cache: &'a Cache) -> Self {
        let layout = params.layout();
        let rows = layout.window_len;
        let bases = layout
            .layers
            .iter()
            .zip(&cache.layers)
            .map(|(s, lc)| LayerBase {
                qkv: [s.wq, s.wk, s.wv].iter().flat_map(|&t| params.tensor(t).iter().copied()).collect(),
                attn_out: linear(&lc.ctx, params.tensor(s.wo), None, rows, D_MODEL, D_MODEL),
                ffn_out: linear(&lc.g, params.tensor(s.w2), Some(params.tensor(s.b2)), rows, D_FF, D_MODEL),
                gelu: GeluExpansion::new(&lc.f, &lc.g),
            })
            .collect();
        Engine {
            params,
            problem,
            cache,
            bases,
            masked_count: problem.is_mask.iter().filter(|m| **m).count(),
            pool: RefCell::new(Vec::new()),
        }
    }

    fn rows(&self) -> usize {
        self.params.layout().window_len
    }

    fn buf(&self, len: usize) -> Vec<f64> {
        let mut v = self.pool.borrow_mut().pop().unwrap_or_default();
        v.clear();
        v.resize(len, 0.0);
        v
    }

    fn tiled(&self, base: &[f64], copies: usize) -> Vec<f64> {
        let mut v = self.pool.borrow_mut().pop().unwrap_or_default();
        v.clear();
        for _ in 0..copies {
            v.extend_from_slice(base);
        }
        v
    }

    fn recycle(&self, bufs: impl IntoIterator<Item = Vec<f64>>) {
        self.pool.borrow_mut().extend(bufs);
    }

    fn drop_masks(&self, layer: usize) -> (Option<&[f64]>, Option<&[f64]>) {
        match &self.problem.dropout {
            Some(m) => (Some(&m[layer].attn), Some(&m[layer].ffn)),
            None => (None, None),
        }
    }

    fn linear(&self, x: &[f64], w: &[f64], bias: Option<Span>, copies: usize, input: usize, output: usize) -> Vec<f64> {
        let rows = copies * self.rows();
        let mut y = self.buf(rows * output);
        linear_into(x, w, bias.map(|b| self.params.tensor(b)), rows, input, output, &mut y);
        y
    }

    fn norm(&self, skip: &[f64], branch: &[f64], drop: Option<&[f64]>, gain: Span, bias: Span) -> Vec<f64> {
        let mut out = self.buf(skip.len());
        residual_norm_into(skip, branch, drop, self.params.tensor(gain), self.params.tensor(bias), &mut out);
        out
    }

    fn losses(&self, logits: &[f64], copies: usize) -> Vec<f64> {
        let scale = 1.0 / self.masked_count as f64;
        let width = self.rows() * self.params.layout().input_width;
        (0..copies)
            .map(|c| {
                let z = &logits[c * width..(c + 1) * width];
                let total: f64 = (0..width)
                    .filter(|&i| self.problem.is_mask[i])
                    .map(|i| focal_term(z[i], self.problem.targets[i], self.problem.gamma).0)
                    .sum();
                total * scale
            })
            .collect()
    }

    fn from_layer(&self, layer: usize, h: Vec<f64>, copies: usize) -> Vec<f64> {
        let layout = self.params.layout();
        if layer == N_LAYERS {
            let logits = self.linear(&h, self.params.tensor(layout.w_out), Some(layout.b_out), copies, D_MODEL, layout.input_width);
            let losses = self.losses(&logits, copies);
            self.recycle([h, logits]);
            return losses;
        }
        let s = &layout.layers[layer];
        let rows = self.rows();
        let block = rows * D_MODEL;
        let qkv = self.linear(&h, &self.bases[layer].qkv, None, copies, D_MODEL, 3 * D_MODEL);
        let mut ctx = self.buf(copies * block);
        let mut probs = vec![0.0; N_HEADS * rows * rows];
        for (c, out) in ctx.chunks_exact_mut(block).enumerate() {
            let w = &qkv[3 * c * block..3 * (c + 1) * block];
            attention_window(w, &w[D_MODEL..], &w[2 * D_MODEL..], 3 * D_MODEL, rows, &mut probs, out);
        }
        let o = self.linear(&ctx, self.params.tensor(s.wo), None, copies, D_MODEL, D_MODEL);
        self.recycle([qkv, ctx]);
        self.from_attn_out(layer, o, h, copies)
    }

    /// Entry at one of q/k/v where copy `c` differs from the base only in
    /// column `cols[c]`, so only that column's head is recomputed.
    fn from_qkv(&self, layer: usize, qkv: [&[f64]; 3], skip: Vec<f64>, copies: usize, cols: &[usize]) -> Vec<f64> {
        let s = &self.params.layout().layers[layer];
        let rows = self.rows();
        let block = rows * D_MODEL;
        let base_ctx = &self.cache.layers[layer].ctx;
        let wo = self.params.tensor(s.wo);
        let mut probs = vec![0.0; rows * rows];
        let mut ctx = vec![0.0; block];
        let mut o = self.tiled(&self.bases[layer].attn_out, copies);
        for (c, &col) in cols.iter().enumerate() {
            let head = col / HEAD_DIM;
            let w = c * block..(c + 1) * block;
            let [q, k, v] = qkv.map(|t| &t[w.clone()]);
            attention_head(q, k, v, D_MODEL, rows, head, &mut probs, &mut ctx);
            let at = head * HEAD_DIM;
            for t in 0..rows {
                let mut d = [0.0; HEAD_DIM];
                for (e, dv) in d.iter_mut().enumerate() {
                    *dv = ctx[t * D_MODEL + at + e] - base_ctx[t * D_MODEL + at + e];
                }
                let dst = &mut o[c * block + t * D_MODEL..][..D_MODEL];
                for (r, ov) in dst.iter_mut().enumerate() {
                    let w = &wo[r * D_MODEL + at..][..HEAD_DIM];
                    *ov += d.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        self.from_attn_out(layer, o, skip, copies)
    }

    fn from_attn_out(&self, layer: usize, o: Vec<f64>, skip: Vec<f64>, copies: usize) -> Vec<f64> {
        let s = &self.params.layout().layers[layer];
        let (m1, _) = self.drop_masks(layer);
        let h1 = self.norm(&skip, &o, m1, s.ln1_gain, s.ln1_bias);
        self.recycle([o, skip]);
        self.from_ffn_in(layer, h1, copies)
    }

    fn from_ffn_in(&self, layer: usize, h1: Vec<f64>, copies: usize) -> Vec<f64> {
        let s = &self.params.layout().layers[layer];
        let f = self.linear(&h1, self.params.tensor(s.w1), Some(s.b1), copies, D_MODEL, D_FF);
        let mut g = self.buf(f.len());
        self.bases[layer].gelu.eval(&f, &mut g);
        let z = self.linear(&g, self.params.tensor(s.w2), Some(s.b2), copies, D_FF, D_MODEL);
        self.recycle([f, g]);
        self.from_ffn_out(layer, z, h1, copies)
    }

    /// FFN entry where copy `c` differs from the base only in column
    /// `cols[c]` of the pre-activation.
    fn from_ffn_column(&self, layer: usize, f: &[f64], h1: Vec<f64>, copies: usize, cols: &[usize]) -> Vec<f64> {
        let s = &self.params.layout().layers[layer];
        let rows = self.rows();
        let w2 = self.params.tensor(s.w2);
        let base_g = &self.cache.layers[layer].g;
        let mut z = self.tiled(&self.bases[layer].ffn_out, copies);
        for (c, &col) in cols.iter().enumerate() {
            for t in 0..rows {
                let dg = self.bases[layer].gelu.eval_one(t * D_FF + col, f[(c * rows + t) * D_FF + col]) - base_g[t * D_FF + col];
                if dg != 0.0 {
                    let at = (c * rows + t) * D_MODEL;
                    for (r, zv) in z[at..at + D_MODEL].iter_mut().enumerate() {
                        *zv += dg * w2[r * D_FF + col];
                    }
                }
            }
        }
        self.from_ffn_out(layer, z, h1, copies)
    }

    fn from_ffn_out(&self, layer: usize, z: Vec<f64>, h1: Vec<f64>, copies: usize) -> Vec<f64> {
        let s = &self.params.layout().layers[layer];
        let (_, m2) = self.drop_masks(layer);
        let h2 = self.norm(&h1, &z, m2, s.ln2_gain, s.ln2_bias);
        self.recycle([z, h1]);
        self.from_layer(layer + 1, h2, copies)
    }

    fn base(&self, entry: Entry) -> Vec<f64> {
        let c = self.cache;
        match entry {
            Entry::LayerInput(l) if l == N_LAYERS => c.layers[N_LAYERS - 1].output.clone(),
            Entry::LayerInput(l) => c.layers[l].input.clone(),
            Entry::Query(l) => c.layers[l].q.clone(),
            Entry::Key(l) => c.layers[l].k.clone(),
            Entry::Value(l) => c.layers[l].v.clone(),
            Entry::AttnOut(l) => self.bases[l].attn_out.clone(),
            Entry::FfnIn(l) => c.layers[l].h1.clone(),
            Entry::FfnPre(l) => c.layers[l].f.clone(),
            Entry::FfnOut(l) => self.bases[l].ffn_out.clone(),
            Entry::Logits => c.logits.clone(),
        }
    }

    /// Losses of `copies` perturbed copies of the entry activation.
    /// `cols[c]` is the single column copy `c` perturbs.
    fn run(&self, entry: Entry, perturbed: Vec<f64>, copies: usize, cols: &[usize]) -> Vec<f64> {
        let c = self.cache;
        match entry {
            Entry::LayerInput(l) => self.from_layer(l, perturbed, copies),
            Entry::Query(l) | Entry::Key(l) | Entry::Value(l) => {
                let lc = &c.layers[l];
                let pick = |e: Entry, base: &[f64]| if e == entry { None } else { Some(self.tiled(base, copies)) };
                let others = [pick(Entry::Query(l), &lc.q), pick(Entry::Key(l), &lc.k), pick(Entry::Value(l), &lc.v)];
                let skip = self.tiled(&lc.input, copies);
                let qkv = [0, 1, 2].map(|i| others[i].as_deref().unwrap_or(&perturbed));
                let losses = self.from_qkv(l, qkv, skip, copies, cols);
                self.recycle(others.into_iter().flatten());
                self.recycle([perturbed]);
                losses
            }
            Entry::AttnOut(l) => self.from_attn_out(l, perturbed, self.tiled(&c.layers[l].input, copies), copies),
            Entry::FfnIn(l) => self.from_ffn_in(l, perturbed, copies),
            Entry::FfnPre(l) => {
                let losses = self.from_ffn_column(l, &perturbed, self.tiled(&c.layers[l].h1, copies), copies, cols);
                self.recycle([perturbed]);
                losses
            }
            Entry::FfnOut(l) => self.from_ffn_out(l, perturbed, self.tiled(&c.layers[l].h1, copies), copies),
            Entry::Logits => {
                let losses = self.losses(&perturbed, copies);
                self.recycle([perturbed]);
                losses
            }
        }
    }

    /// Central differences for every parameter of one tensor.
    fn tensor_differences(&self, span: Span, entry: Entry, shift: Shift<'_>, step: f64, out: &mut [f64]) {
        let base = self.base(entry);
        let rows = self.rows();
        let width = base.len() / rows;
        let per_pass = COPIES_PER_PASS / 2;
        let n = span.len();
        let mut cols = Vec::with_capacity(COPIES_PER_PASS);
        let mut start = 0;
        while start < n {
            let count = per_pass.min(n - start);
            let mut copies = self.tiled(&base, 2 * count);
            cols.clear();
            for c in 0..count {
                let idx = start + c;
                let (i, j) = (idx / span.cols, idx % span.cols);
                let col = if matches!(shift, Shift::Weight(..)) { i } else { j };
                cols.extend([col, col]);
                for (sign, copy) in [(1.0, 2 * c), (-1.0, 2 * c + 1)] {
                    let block = &mut copies[copy * base.len()..(copy + 1) * base.len()];
                    match shift {
                        Shift::Weight(src, src_width) => {
                            for t in 0..rows {
                                block[t * width + i] += sign * step * src[t * src_width + j];
                            }
                        }
                        Shift::Bias => {
                            for t in 0..rows {
                                block[t * width + j] += sign * step;
                            }
                        }
                        Shift::Gain(xhat) => {
                            for t in 0..rows {
                                block[t * width + j] += sign * step * xhat[t * width + j];
                            }
                        }
                        Shift::Position => block[i * width + j] += sign * step,
                    }
                }
            }
            let losses = self.run(entry, copies, 2 * count, &cols);
            for c in 0..count {
                out[start + c] = (losses[2 * c] - losses[2 * c + 1]) / (2.0 * step);
            }
            start += count;
        }
    }
}

/// Finite-difference gradient of `problem` at `params`, one entry per
/// parameter.
pub fn numeric_gradient(params: &Params, problem: &Problem, step: f64) -> Result<Vec<f64>> {
    let (cache, _) = problem.analytic_gradient(params)?;
    let engine = Engine::new(params, problem, &cache);
    let layout = params.layout();
    let mut grad = vec![0.0; layout.total];
    let mut diff = |span: Span, entry: Entry, shift: Shift<'_>| {
        engine.tensor_differences(span, entry, shift, step, &mut grad[span.range()]);
    };
    diff(layout.w_in, Entry::LayerInput(0), Shift::Weight(&problem.input, layout.input_width));
    diff(layout.b_in, Entry::LayerInput(0), Shift::Bias);
    diff(layout.pos, Entry::LayerInput(0), Shift::Position);
    for (l, (s, lc)) in layout.layers.iter().zip(&cache.layers).enumerate() {
        diff(s.wq, Entry::Query(l), Shift::Weight(&lc.input, D_MODEL));
        diff(s.wk, Entry::Key(l), Shift::Weight(&lc.input, D_MODEL));
        diff(s.wv, Entry::Value(l), Shift::Weight(&lc.input, D_MODEL));
        diff(s.wo, Entry::AttnOut(l), Shift::Weight(&lc.ctx, D_MODEL));
        diff(s.ln1_gain, Entry::FfnIn(l), Shift::Gain(&lc.xhat1));
        diff(s.ln1_bias, Entry::FfnIn(l), Shift::Bias);
        diff(s.w1, Entry::FfnPre(l), Shift::Weight(&lc.h1, D_MODEL));
        diff(s.b1, Entry::FfnPre(l), Shift::Bias);
        diff(s.w2, Entry::FfnOut(l), Shift::Weight(&lc.g, D_FF));
        diff(s.b2, Entry::FfnOut(l), Shift::Bias);
        diff(s.ln2_gain, Entry::LayerInput(l + 1), Shift::Gain(&lc.xhat2));
        diff(s.ln2_bias, Entry::LayerInput(l + 1), Shift::Bias);
    }
    let last = &cache.layers[N_LAYERS - 1].output;
    diff(layout.w_out, Entry::Logits, Shift::Weight(last, D_MODEL));
    diff(layout.b_out, Entry::Logits, Shift::Bias);

    // the mask fill feeds the input itself; use two full passes
    let at = layout.mask_value.offset;
    let mut shifted = params.clone();
    let mut probe = |delta: f64| -> Result<f64> {
        shifted.data_mut()[at] = params.data()[at] + delta;
        let mut p = problem.clone();
        for (v, m) in p.input.iter_mut().zip(&p.is_mask) {
            if *m {
                *v = params.data()[at] + delta;
            }
        }
        p.loss(&shifted)
    };
    grad[at] = (probe(step)? - probe(-step)?) / (2.0 * step);
    Ok(grad)
}

/// Compares analytic and numeric gradients of one model.
pub fn check_model(params: &Params, problem: &Problem, config: &GradcheckConfig, seed: u64) -> Result<ModelReport> {
    let (_, analytic) = problem.analytic_gradient(params)?;
    let numeric = numeric_gradient(params, problem, config.step)?;
    let mut worst = (0.0, 0usize);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n, config.abs_floor);
        if !(e <= worst.0) {
            worst = (e, i);
        }
    }
    let (info, within) = params.layout().locate(worst.1).expect("index in range");
    Ok(ModelReport {
        input_width: params.layout().input_width,
        seed,
        parameters: params.len(),
        dropout: problem.dropout.is_some(),
        max_rel_error: worst.0,
        worst_parameter: format!("{}[{}]", info.name, within),
        analytic: analytic[worst.1],
        numeric: numeric[worst.1],
    })
}

/// Runs the full suite: `models` random models cycling through `widths`,
/// every other one with a recorded dropout mask.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut models = Vec::with_capacity(config.models);
    for m in 0..config.models {
        let width = config.widths[m % config.widths.len()];
        let seed = config.seed.wrapping_add(m as u64);
        let params = random_model(width, config.window_len, seed)?;
        let rate = if m % 2 == 1 { config.dropout_rate } else { 0.0 };
        let problem = random_problem(&params, config.focal_gamma, rate, seed)?;
        let report = check_model(&params, &problem, config, seed)?;
        log::info!(
            "model {m}: D={width} max rel error {:.3e} at {}",
            report.max_rel_error,
            report.worst_parameter
        );
        models.push(report);
    }
    let max_rel_error = models.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let elapsed: Duration = started.elapsed();
    Ok(GradcheckReport {
        passed: max_rel_error < config.tolerance,
        models,
        max_rel_error,
        elapsed_secs: elapsed.as_secs_f64(),
    })
}
