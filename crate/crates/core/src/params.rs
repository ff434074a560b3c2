//! Named parameter storage and initialization.
//!
//! Modules register their tensors in a [`ParamStore`] at construction and keep
//! only [`ParamId`]s. A forward pass binds the store onto a tape, turning each
//! parameter into a leaf [`Var`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.names.iter().zip(self.values.iter().map(Tensor::dims)))
            .finish()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Names are unique; registering a name twice is a
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = self.values.len();
        let previous = self.by_name.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.dims() != value.dims() {
            return Err(Error::shape("set_param", slot.dims(), value.dims()));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter whose name also exists in `other`; returns the
    /// number copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for (id, name, _) in other.iter() {
            if let Some(mine) = self.find(name) {
                self.set(mine, other.get(id).clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Normal with the given std, resampled outside ±2 std.
    pub fn trunc_normal<T: Scalar>(&mut self, dims: &[usize], std: f64) -> Tensor<T> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z = self.normal();
                if z.abs() <= 2.0 {
                    break T::from_f64(z * std);
                }
            })
            .collect();
        Tensor::new(dims, data).expect("dims match data")
    }

    /// He-normal on fan-out, for convolution kernels `[out, in/g, k, k]`.
    pub fn conv_normal<T: Scalar>(&mut self, dims: &[usize], groups: usize) -> Tensor<T> {
        let fan_out = dims[0] / groups * dims[2] * dims[3];
        let std = (2.0 / fan_out as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.normal() * std)).collect();
        Tensor::new(dims, data).expect("dims match data")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_deterministic() {
        let a: Tensor<f64> = Init::new(5).trunc_normal(&[200], 0.02);
        let b: Tensor<f64> = Init::new(5).trunc_normal(&[200], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn store_lookup_and_binding() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a.weight", Tensor::zeros(&[2, 3]));
        let b = store.add("b.bias", Tensor::zeros(&[3]));
        assert_eq!(store.numel(), 9);
        assert_eq!(store.numel_with_prefix("a."), 6);
        assert_eq!(store.find("b.bias"), Some(b));
        assert!(store.set(a, Tensor::zeros(&[3, 2])).is_err());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        assert_eq!(tape.dims(bound.get(a)), &[2, 3]);
        assert!(tape.requires_grad(bound.get(b)));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::zeros(&[1]));
        store.add("x", Tensor::zeros(&[1]));
    }
}
