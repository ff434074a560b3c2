use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = init.trunc_normal(&[out_features, in_features], INIT_STD);
        Self::with_weight(store, name, w, in_features, out_features)
    }

    /// Truncated normal with std `1/√in_features`, which keeps the output
    /// variance of a unit-variance input; for layers outside a residual path.
    pub fn fan_in<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = init.trunc_normal(&[out_features, in_features], (in_features as f64).sqrt().recip());
        Self::with_weight(store, name, w, in_features, out_features)
    }

    /// All-zero weight and bias.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[out_features, in_features]), in_features, out_features)
    }

    fn with_weight<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        w: Tensor<T>,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.get(self.weight), Some(p.get(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let dims = [out_channels, in_channels / groups, kernel, kernel];
        Conv2d {
            kernel: store.add(format!("{name}.weight"), init.conv_normal(&dims, groups)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            padding,
            groups,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> usize {
        out_channels * (in_channels / groups) * kernel * kernel + out_channels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.get(self.kernel),
            Some(p.get(self.bias)),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// `Linear(D → ⌈rD⌉) → GELU → Linear(⌈rD⌉ → D)`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn hidden(dim: usize, ratio: f64) -> usize {
        ((dim as f64 * ratio).ceil() as usize).max(1)
    }

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, ratio: f64) -> Self {
        let hidden = Self::hidden(dim, ratio);
        Ffn {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn param_count(dim: usize, ratio: f64) -> usize {
        let hidden = Self::hidden(dim, ratio);
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mhsa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Mhsa {
            qkv: Linear::new(store, init, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, 3 * dim) + Linear::param_count(dim, dim)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }

    /// Output plus the `[T × T]` attention matrix of each head.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.dim;
        let xd = tape.dims(x).to_vec();
        if xd.len() != 2 || xd[1] != d {
            return Err(Error::shape("mhsa", &[xd[0], d], &xd));
        }
        let dh = d / self.heads;
        let qkv = self.qkv.forward(tape, p, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice(qkv, 1, h * dh, dh)?;
            let k = tape.slice(qkv, 1, d + h * dh, dh)?;
            let v = tape.slice(qkv, 1, 2 * d + h * dh, dh)?;
            let kt = tape.transpose2d(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, v)?);
            maps.push(attn);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        Ok((self.proj.forward(tape, p, merged)?, maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_count() {
        assert_eq!(Linear::param_count(7, 7), 56);
        let mut store = ParamStore::<f64>::new();
        Linear::new(&mut store, &mut Init::new(0), "l", 7, 7);
        assert_eq!(store.numel(), 56);
    }

    #[test]
    fn zero_ffn_gives_zero_and_keeps_dims() {
        let mut store = ParamStore::<f64>::new();
        let ffn = Ffn::new(&mut store, &mut Init::new(0), "f", 6, 0.25);
        for id in store.ids().collect::<Vec<_>>() {
            let dims = store.get(id).dims().to_vec();
            store.set(id, Tensor::zeros(&dims)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[3, 6], 1.5));
        let y = ffn.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.dims(y), &[3, 6]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(Ffn::hidden(6, 0.25), 2);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        assert!(Mhsa::new(&mut store, &mut Init::new(0), "a", 10, 3).is_err());
    }

    #[test]
    fn single_token_attention_is_value_chain() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(4);
        let attn = Mhsa::new(&mut store, &mut init, "a", 4, 2).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_f64(&[1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap());
        let (y, maps) = attn.forward_with_weights(&mut tape, &p, x).unwrap();
        for m in maps {
            assert_eq!(tape.value(m).data(), &[1.0]);
        }
        // value slice of qkv, then the output projection
        let qkv = attn.qkv.forward(&mut tape, &p, x).unwrap();
        let v = tape.slice(qkv, 1, 8, 4).unwrap();
        let expected = attn.proj.forward(&mut tape, &p, v).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expected)).unwrap() < 1e-15);
    }
}
