//! Parameter layout, initialization and input masking.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{D_FF, D_MODEL, N_LAYERS};
use crate::error::{Error, Result};
use crate::sensor::HomeSchema;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Initial fill value for masked input bits.
pub const INIT_MASK_VALUE: f64 = 0.5;

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    Normal,
    Zeros,
    Ones,
    MaskFill,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub span: Span,
    pub init: InitRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpans {
    pub wq: Span,
    pub wk: Span,
    pub wv: Span,
    pub wo: Span,
    pub ln1_gain: Span,
    pub ln1_bias: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
    pub ln2_gain: Span,
    pub ln2_bias: Span,
}

/// Shapes and offsets of every tensor, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input_width: usize,
    pub window_len: usize,
    pub w_in: Span,
    pub b_in: Span,
    pub pos: Span,
    pub mask_value: Span,
    pub layers: Vec<LayerSpans>,
    pub w_out: Span,
    pub b_out: Span,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: InitRule) -> Span {
        let span = Span {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += span.len();
        self.tensors.push(TensorInfo { name, span, init });
        span
    }
}

impl Layout {
    pub fn new(input_width: usize, window_len: usize) -> Self {
        use InitRule::*;
        let d = D_MODEL;
        let mut b = Builder {
            tensors: Vec::new(),
            offset: 0,
        };
        let w_in = b.push("w_in".into(), d, input_width, Normal);
        let b_in = b.push("b_in".into(), 1, d, Zeros);
        let pos = b.push("pos".into(), window_len, d, Normal);
        let mask_value = b.push("mask_value".into(), 1, 1, MaskFill);
        let layers = (0..N_LAYERS)
            .map(|l| {
                let mut p = |n: &str, r, c, i| b.push(format!("layer{l}.{n}"), r, c, i);
                LayerSpans {
                    wq: p("wq", d, d, Normal),
                    wk: p("wk", d, d, Normal),
                    wv: p("wv", d, d, Normal),
                    wo: p("wo", d, d, Normal),
                    ln1_gain: p("ln1_gain", 1, d, Ones),
                    ln1_bias: p("ln1_bias", 1, d, Zeros),
                    w1: p("w1", D_FF, d, Normal),
                    b1: p("b1", 1, D_FF, Zeros),
                    w2: p("w2", d, D_FF, Normal),
                    b2: p("b2", 1, d, Zeros),
                    ln2_gain: p("ln2_gain", 1, d, Ones),
                    ln2_bias: p("ln2_bias", 1, d, Zeros),
                }
            })
            .collect();
        let w_out = b.push("w_out".into(), input_width, d, Normal);
        let b_out = b.push("b_out".into(), 1, input_width, Zeros);
        Layout {
            input_width,
            window_len,
            w_in,
            b_in,
            pos,
            mask_value,
            layers,
            w_out,
            b_out,
            total: b.offset,
            tensors: b.tensors,
        }
    }

    /// Name of the tensor holding flat index `i` and the index within it.
    pub fn locate(&self, i: usize) -> Option<(&TensorInfo, usize)> {
        self.tensors
            .iter()
            .find(|t| t.span.range().contains(&i))
            .map(|t| (t, i - t.span.offset))
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// All trainable parameters as one flat vector plus its layout.
///
/// Every mutable access stamps a fresh version so that forward caches taken
/// before the mutation are detected as stale.
#[derive(Debug, Clone)]
pub struct Params {
    layout: Layout,
    data: Vec<f64>,
    version: u64,
}

impl PartialEq for Params {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.data == other.data
    }
}

impl Params {
    pub fn from_data(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(Params {
            layout,
            data,
            version: next_version(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.version = next_version();
        &mut self.data
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, span: Span) -> &[f64] {
        &self.data[span.range()]
    }

    pub fn mask_value(&self) -> f64 {
        self.data[self.layout.mask_value.offset]
    }

    /// Rounds every parameter to the nearest `f32`, matching what a
    /// checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for v in self.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Fresh parameters for a schema of width `D`.
pub fn init_params(schema: &HomeSchema, window_len: usize, seed: u64) -> Result<Params> {
    init_with_width(schema.width(), window_len, seed)
}

pub fn init_with_width(input_width: usize, window_len: usize, seed: u64) -> Result<Params> {
    if input_width < 2 {
        return Err(Error::InvalidSchema("input width must be at least 2".into()));
    }
    if window_len == 0 {
        return Err(Error::InvalidConfig("window length must be positive".into()));
    }
    let layout = Layout::new(input_width, window_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("finite std");
    let mut data = vec![0.0; layout.total];
    for t in &layout.tensors {
        let slot = &mut data[t.span.range()];
        match t.init {
            InitRule::Normal => slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            InitRule::Zeros => slot.fill(0.0),
            InitRule::Ones => slot.fill(1.0),
            InitRule::MaskFill => slot.fill(INIT_MASK_VALUE),
        }
    }
    Params::from_data(layout, data)
}

/// Model input for a stack of windows: real values plus which entries hold
/// the mask fill.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub values: Vec<f64>,
    pub is_mask: Vec<bool>,
}

impl MaskedInput {
    pub fn with_capacity(n: usize) -> Self {
        MaskedInput {
            values: Vec::with_capacity(n),
            is_mask: Vec::with_capacity(n),
        }
    }
}

/// Replaces every bit of each masked sensor, in every row, with
/// `mask_value`. `bits` holds whole rows of width `D`; `masked[k]` selects
/// sensor `k`.
pub fn apply_mask(bits: &[u8], schema: &HomeSchema, masked: &[bool], mask_value: f64) -> MaskedInput {
    let mut out = MaskedInput::with_capacity(bits.len());
    apply_mask_into(bits, schema, masked, mask_value, &mut out);
    out
}

pub fn apply_mask_into(bits: &[u8], schema: &HomeSchema, masked: &[bool], mask_value: f64, out: &mut MaskedInput) {
    let width = schema.width();
    let mut column_mask = vec![false; width];
    for (sensor, &m) in schema.sensors().iter().zip(masked) {
        if m {
            column_mask[sensor.bits()].fill(true);
        }
    }
    for row in bits.chunks_exact(width) {
        for (&bit, &m) in row.iter().zip(&column_mask) {
            out.values.push(if m { mask_value } else { f64::from(bit) });
            out.is_mask.push(m);
        }
    }
}
