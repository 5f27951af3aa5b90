//! Small layer building blocks over a [`Session`].

use rand::Rng;

use super::params::{ParamId, ParamStore, Session};
use crate::autodiff::Var;
use crate::rng::{fill_normal, DetRng};
use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Weight initialization for a [`Linear`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Xavier-uniform weights, zero bias.
    Xavier,
    /// Zero weights, constant bias.
    Zero { bias: f64 },
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut DetRng) -> Self {
        let (w, b) = match init {
            Init::Xavier => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                (Tensor::from_parts(vec![fan_in, fan_out], data), Tensor::zeros(&[fan_out]))
            }
            Init::Zero { bias } => (Tensor::zeros(&[fan_in, fan_out]), Tensor::full(&[fan_out], bias)),
        };
        Linear {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), b),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let rows = s.graph.shape(x)[0];
        let y = s.graph.matmul(x, w)?;
        let bias = s.graph.tile_rows(b, rows)?;
        s.graph.add(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        s.graph.layer_norm(x, g, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        out_init: Init,
        rng: &mut DetRng,
    ) -> Self {
        let (i, h, o) = dims;
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), i, h, Init::Xavier, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), h, o, out_init, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.relu(h);
        self.fc2.forward(s, h)
    }
}

/// Single-head scaled dot-product self-attention over rows.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut DetRng) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, Init::Xavier, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, Init::Xavier, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, Init::Xavier, rng),
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let scores = s.graph.matmul_t(q, k)?;
        let scores = s.graph.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = s.graph.softmax(scores, 1)?;
        let mixed = s.graph.matmul(weights, v)?;
        self.out.forward(s, mixed)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut DetRng) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, hidden, dim), Init::Xavier, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(s, x)?;
        let h = self.attn.forward(s, h)?;
        let x = s.graph.add(x, h)?;
        let h = self.ln_mlp.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.graph.add(x, h)
    }
}

/// `[rows x cols]` tensor with N(0, sigma^2) entries.
pub fn normal_tensor(rng: &mut DetRng, shape: &[usize], sigma: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    fill_normal(rng, t.data_mut(), sigma);
    t
}
