use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Truncated-normal (σ = 0.02) weight `[input, output]`, zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::trunc_normal(&[input, output], 0.02, rng));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention over all rows of `[L, dim]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
        }
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, len: usize, head_dim: usize) -> Result<Var> {
        let x = tape.reshape(x, &[len, self.heads, head_dim])?;
        tape.permute(x, &[1, 0, 2])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || !shape[1].is_multiple_of(self.heads) {
            return dim_err(format!("attention input {shape:?} with {} heads", self.heads));
        }
        let (len, dim) = (shape[0], shape[1]);
        let head_dim = dim / self.heads;
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let q = self.split_heads(tape, q, len, head_dim)?;
        let k = self.split_heads(tape, k, len, head_dim)?;
        let v = self.split_heads(tape, v, len, head_dim)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[len, dim])?;
        self.proj.forward(tape, store, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
