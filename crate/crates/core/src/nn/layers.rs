//! Transformer building blocks expressed as tape operations.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Mat, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, fan_out);
        Self { w, b }
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), fan_in, fan_out);
        let b = store.add_zeros(format!("{name}.b"), 1, fan_out);
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), 1, dim),
            beta: store.add_zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.normalize_rows(x, LN_EPS);
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "model dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Multi-head attention of `query` rows over `memory` rows. `mask` is added to the
    /// `n × m` score matrix of every head.
    pub fn forward(&self, t: &mut Tape, query: Var, memory: Var, mask: Option<&Mat>) -> Var {
        let (k, v) = self.project_memory(t, memory);
        self.attend(t, query, k, v, mask)
    }

    /// Key and value projections of `memory`, reusable across queries.
    pub fn project_memory(&self, t: &mut Tape, memory: Var) -> (Var, Var) {
        (self.k.forward(t, memory), self.v.forward(t, memory))
    }

    pub fn attend(&self, t: &mut Tape, query: Var, k: Var, v: Var, mask: Option<&Mat>) -> Var {
        let q = self.q.forward(t, query);
        let dim = t.value(q).ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, lo, hi), t.slice_cols(k, lo, hi), t.slice_cols(v, lo, hi))
            };
            let s = t.matmul_t(qh, kh);
            let mut s = t.scale(s, scale);
            if let Some(m) = mask {
                s = t.add_const(s, m);
            }
            let p = t.softmax_rows(s);
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.o.forward(t, cat)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }
}

/// Self-attention block followed by a feed-forward block, post-norm.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: Option<&Mat>) -> Var {
        let a = self.attn.forward(t, x, x, mask);
        let x = t.add(x, a);
        let x = self.ln1.forward(t, x);
        let f = self.ffn.forward(t, x);
        let x = t.add(x, f);
        self.ln2.forward(t, x)
    }
}

/// Cross-attention of one stream (query) over another (key/value), then feed-forward.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CrossLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl CrossLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, query: Var, memory: Var) -> Var {
        let a = self.attn.forward(t, query, memory, None);
        let x = t.add(query, a);
        let x = self.ln1.forward(t, x);
        let f = self.ffn.forward(t, x);
        let x = t.add(x, f);
        self.ln2.forward(t, x)
    }
}

/// Causal self-attention, cross-attention over encoder memory, feed-forward.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub cross: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            self_attn: Attention::new(store, &format!("{name}.self"), dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            cross: Attention::new(store, &format!("{name}.cross"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, memory: Var, causal: &Mat) -> Var {
        let kv = self.cross.project_memory(t, memory);
        self.forward_cached(t, x, kv, causal)
    }

    /// Like [`DecoderLayer::forward`] with the cross-attention keys and values precomputed.
    pub fn forward_cached(&self, t: &mut Tape, x: Var, (k, v): (Var, Var), causal: &Mat) -> Var {
        let a = self.self_attn.forward(t, x, x, Some(causal));
        let x = t.add(x, a);
        let x = self.ln1.forward(t, x);
        let c = self.cross.attend(t, x, k, v, None);
        let x = t.add(x, c);
        let x = self.ln2.forward(t, x);
        let f = self.ffn.forward(t, x);
        let x = t.add(x, f);
        self.ln3.forward(t, x)
    }
}

pub const MASKED: f64 = -1e9;

pub fn causal_mask(n: usize) -> Mat {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { MASKED } else { 0.0 })
}

/// Fixed sinusoidal position table of shape `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}
