//! Neural layers expressed as tape programs over named parameters.

use rand::Rng;

use crate::store::{ParamStore, Session};
use crate::tape::{Tape, TensorId};
use crate::{NdError, Result};

/// y = x . w^T + b for x [b, i], w [o, i], b [o].
pub fn linear_forward(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let y = tape.matmul_tb(x, w)?;
    tape.add_row(y, b)
}

/// GRU cell parameters registered under a name prefix.
///
/// Gates use the fused layout w_* [hidden, input + hidden] applied to
/// concat(x, h); the candidate gate sees concat(x, r * h).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    prefix: String,
}

impl GruCell {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cat = input_dim + hidden_dim;
        for gate in ["z", "r", "h"] {
            store.init_uniform(&format!("{prefix}.w{gate}"), &[hidden_dim, cat], rng)?;
            store.init_zeros(&format!("{prefix}.b{gate}"), &[hidden_dim])?;
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            prefix: prefix.to_string(),
        })
    }

    /// Reattach to parameters already present in a store.
    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let wz = store.get(&format!("{prefix}.wz"))?;
        let hidden_dim = wz.shape[0];
        let input_dim = wz.shape[1] - hidden_dim;
        Ok(Self {
            input_dim,
            hidden_dim,
            prefix: prefix.to_string(),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        ["wz", "bz", "wr", "br", "wh", "bh"]
            .iter()
            .map(|s| format!("{}.{}", self.prefix, s))
            .collect()
    }

    /// h_t = (1 - z) * h_prev + z * h_tilde, sigmoid gates, tanh candidate.
    pub fn step(&self, s: &mut Session, h_prev: TensorId, x: TensorId) -> Result<TensorId> {
        let (b_x, i) = dims2(s, x)?;
        let (b_h, h) = dims2(s, h_prev)?;
        if i != self.input_dim || h != self.hidden_dim || b_x != b_h {
            return Err(NdError::Shape {
                op: "gru_step",
                lhs: vec![b_x, i],
                rhs: vec![b_h, h],
            });
        }
        let wz = s.param(&format!("{}.wz", self.prefix))?;
        let bz = s.param(&format!("{}.bz", self.prefix))?;
        let wr = s.param(&format!("{}.wr", self.prefix))?;
        let br = s.param(&format!("{}.br", self.prefix))?;
        let wh = s.param(&format!("{}.wh", self.prefix))?;
        let bh = s.param(&format!("{}.bh", self.prefix))?;

        let xh = s.tape.concat_last(&[x, h_prev])?;
        let z_pre = linear_forward(&mut s.tape, xh, wz, bz)?;
        let z = s.tape.sigmoid(z_pre);
        let r_pre = linear_forward(&mut s.tape, xh, wr, br)?;
        let r = s.tape.sigmoid(r_pre);
        let rh = s.tape.mul(r, h_prev)?;
        let xrh = s.tape.concat_last(&[x, rh])?;
        let c_pre = linear_forward(&mut s.tape, xrh, wh, bh)?;
        let cand = s.tape.tanh(c_pre);
        // h + z * (cand - h)
        let diff = s.tape.sub(cand, h_prev)?;
        let zd = s.tape.mul(z, diff)?;
        s.tape.add(h_prev, zd)
    }
}

fn dims2(s: &Session, t: TensorId) -> Result<(usize, usize)> {
    let sh = s.tape.shape(t);
    if sh.len() != 2 {
        return Err(NdError::Shape {
            op: "expect_2d",
            lhs: sh.to_vec(),
            rhs: vec![],
        });
    }
    Ok((sh[0], sh[1]))
}

/// Multi-head scaled dot-product attention with learned q/k/v/out maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    prefix: String,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NdError::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.init_uniform(&format!("{prefix}.{w}"), &[dim, dim], rng)?;
        }
        store.init_zeros(&format!("{prefix}.bo"), &[dim])?;
        Ok(Self {
            dim,
            heads,
            prefix: prefix.to_string(),
        })
    }

    pub fn attach(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let wq = store.get(&format!("{prefix}.wq"))?;
        let dim = wq.shape[0];
        if heads == 0 || dim % heads != 0 {
            return Err(NdError::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            prefix: prefix.to_string(),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        ["wq", "wk", "wv", "wo", "bo"]
            .iter()
            .map(|s| format!("{}.{}", self.prefix, s))
            .collect()
    }

    /// query [lq, d], keys_values [l, d] -> [lq, d].
    pub fn forward(&self, s: &mut Session, query: TensorId, keys_values: TensorId) -> Result<TensorId> {
        let (_, dq) = dims2(s, query)?;
        let (_, dk) = dims2(s, keys_values)?;
        if dq != self.dim || dk != self.dim {
            return Err(NdError::Shape {
                op: "multi_head_attention",
                lhs: s.tape.shape(query).to_vec(),
                rhs: s.tape.shape(keys_values).to_vec(),
            });
        }
        let wq = s.param(&format!("{}.wq", self.prefix))?;
        let wk = s.param(&format!("{}.wk", self.prefix))?;
        let wv = s.param(&format!("{}.wv", self.prefix))?;
        let wo = s.param(&format!("{}.wo", self.prefix))?;
        let bo = s.param(&format!("{}.bo", self.prefix))?;

        let q = s.tape.matmul_tb(query, wq)?;
        let k = s.tape.matmul_tb(keys_values, wk)?;
        let v = s.tape.matmul_tb(keys_values, wv)?;

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = s.tape.slice_last(q, head * dh, dh)?;
            let kh = s.tape.slice_last(k, head * dh, dh)?;
            let vh = s.tape.slice_last(v, head * dh, dh)?;
            let scores = s.tape.matmul_tb(qh, kh)?;
            let scaled = s.tape.scale(scores, scale);
            let attn = s.tape.softmax(scaled);
            head_outs.push(s.tape.matmul(attn, vh)?);
        }
        let cat = s.tape.concat_last(&head_outs)?;
        linear_forward(&mut s.tape, cat, wo, bo)
    }
}
