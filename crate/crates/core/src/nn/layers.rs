use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), fan_in, fan_out, std, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, fan_out);
        Self { w, b, fan_in, fan_out }
    }

    /// Weights and bias start at zero; used for residual output heads.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), fan_in, fan_out);
        let b = store.add_zeros(format!("{name}.b"), 1, fan_out);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, self.w);
        let b = t.param(s, self.b);
        t.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.g"), 1, dim),
            bias: store.add_zeros(format!("{name}.b"), 1, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        t.layer_norm(x, g, b)
    }
}

/// Two linear maps with a SiLU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, rng),
            l2: Linear::new(store, &format!("{name}.1"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(t, s, x);
        let h = t.silu(h);
        self.l2.forward(t, s, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Same as [`new`](Self::new) but with a zero output projection.
    pub fn zero_out(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::zeroed(store, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, query: Var, context: Var, group: Option<usize>) -> Var {
        let q = self.wq.forward(t, s, query);
        let k = self.wk.forward(t, s, context);
        let v = self.wv.forward(t, s, context);
        let a = t.attention(q, k, v, self.heads, group);
        self.wo.forward(t, s, a)
    }
}
