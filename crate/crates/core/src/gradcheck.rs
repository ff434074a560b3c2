//! Central finite-difference checking of tape gradients.
//!
//! Each checked entry is moved by `±eps` and the loss re-evaluated on a fresh
//! tape. Bilinear sampling is only piecewise smooth, and with many sample
//! points some perturbation nearly always pushes one across a pixel edge,
//! where the difference quotient straddles a kink. The perturbed evaluations
//! therefore pin every sample to the cell it occupies at the unperturbed
//! point, so both sides are evaluated on the piece whose derivative the tape
//! computes. Entries where this changed anything are counted in `crossed`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry roundoff near 1e-11 at eps = 1e-4, so gradients below this
/// floor (including ones that vanish identically, like attention key biases)
/// are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Entries checked per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-4,
            samples_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// Checked entries whose perturbation moved a sample point across a
    /// cell edge.
    pub crossed: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Largest analytic gradient magnitude among checked entries.
    pub max_grad: f64,
}

impl TensorCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel < tol
    }
}

type LossFn<'a> = dyn Fn(&mut Tape<f64>, &Bound) -> Result<Var> + 'a;

impl GradCheck {
    /// Checks `d loss / d p` for every tensor `p` of `store`.
    pub fn run(
        &self,
        store: &ParamStore<f64>,
        loss: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
    ) -> Result<Vec<TensorCheck>> {
        self.run_dyn(store, &loss)
    }

    /// Checks the gradient of `f` with respect to each of `inputs`.
    pub fn run_inputs(
        &self,
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<Vec<TensorCheck>> {
        let mut store = ParamStore::new();
        let ids: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
            .collect();
        self.run_dyn(&store, &|tape, p| {
            let vars: Vec<Var> = ids.iter().map(|&id| p.get(id)).collect();
            f(tape, &vars)
        })
    }

    fn run_dyn(&self, store: &ParamStore<f64>, loss: &LossFn<'_>) -> Result<Vec<TensorCheck>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let l = loss(&mut tape, &p)?;
        tape.backward(l)?;
        let base_cells = tape.sample_cells();
        let grads: Vec<Tensor<f64>> = store
            .ids()
            .map(|id| {
                tape.grad(p.get(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).dims()))
            })
            .collect();
        drop(tape);

        let eval = |s: &ParamStore<f64>| -> Result<(f64, usize)> {
            let mut tape = Tape::new();
            tape.pin_cells(base_cells.clone());
            let p = s.bind(&mut tape, false);
            let l = loss(&mut tape, &p)?;
            Ok((tape.value(l).item(), tape.pinned_crossings()))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = store.clone();
        let mut reports = Vec::with_capacity(store.len());
        for id in store.ids() {
            let n = store.get(id).len();
            let indices: Vec<usize> = if n <= self.samples_per_tensor {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, self.samples_per_tensor).into_vec();
                v.sort_unstable();
                v
            };
            let mut r = TensorCheck {
                name: store.name(id).to_string(),
                numel: n,
                checked: 0,
                crossed: 0,
                max_rel: 0.0,
                max_abs: 0.0,
                max_grad: 0.0,
            };
            for i in indices {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + self.eps;
                let (lp, cp) = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig - self.eps;
                let (lm, cm) = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig;
                if cp + cm > 0 {
                    r.crossed += 1;
                }
                let numeric = (lp - lm) / (2.0 * self.eps);
                let analytic = grads[id.index()].data()[i];
                r.checked += 1;
                r.max_rel = r.max_rel.max(relative_error(analytic, numeric));
                r.max_abs = r.max_abs.max((analytic - numeric).abs());
                r.max_grad = r.max_grad.max(analytic.abs());
            }
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Adds `N(0, std²)` noise to every parameter, moving zero-initialized
/// projections (offsets, attention logits, gates, heads) off their special
/// values so the check runs at a generic point.
pub fn perturb(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
}

/// Worst relative error over a set of reports, failing on an empty check.
pub fn worst(reports: &[TensorCheck]) -> Result<f64> {
    if let Some(r) = reports.iter().find(|r| r.checked == 0) {
        return Err(Error::invalid("gradcheck", format!("no entry of `{}` was checked", r.name)));
    }
    Ok(reports.iter().map(|r| r.max_rel).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_passes() {
        let gc = GradCheck::default();
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let ok = gc
            .run_inputs(std::slice::from_ref(&x), |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum_all(sq)
            })
            .unwrap();
        assert!(worst(&ok).unwrap() < 1e-8);
        assert_eq!(ok[0].checked, 3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }
}
