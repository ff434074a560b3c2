//! SGD-with-momentum training on the toy segmentation task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::CoMer;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{lit, Scalar, Tensor};
use crate::toy::{ToySample, ToyTask};

/// `v ← μ·v + g; θ ← θ − lr·v` for every parameter.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        let velocity = store.ids().map(|id| Tensor::zeros(store.get(id).dims())).collect();
        Sgd { lr, momentum, velocity }
    }

    /// Applies one update; `grads[i]` belongs to the `i`-th parameter, `None`
    /// meaning a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>]) {
        let (lr, mu) = (lit::<T>(self.lr), lit::<T>(self.momentum));
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let v = self.velocity[id.index()].data_mut();
            match g {
                Some(g) => {
                    for (v, &g) in v.iter_mut().zip(g.data()) {
                        *v = mu * *v + g;
                    }
                }
                None => v.iter_mut().for_each(|v| *v *= mu),
            }
            for (p, &v) in store.get_mut(id).data_mut().iter_mut().zip(v.iter()) {
                *p -= lr * v;
            }
        }
    }
}

fn batch_loss<T: Scalar>(
    model: &CoMer<T>,
    tape: &mut Tape<T>,
    p: &crate::params::Bound,
    batch: &[&ToySample<T>],
) -> Result<crate::tape::Var> {
    let mut total = None;
    for s in batch {
        let img = tape.constant(s.image.clone());
        let l = model.loss(tape, p, img, &s.labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("train_step", "empty batch"))?;
    tape.scale(total, 1.0 / batch.len() as f64)
}

/// Mean loss over `batch`, then one optimizer update of every parameter.
pub fn train_step<T: Scalar>(model: &mut CoMer<T>, opt: &mut Sgd<T>, batch: &[&ToySample<T>]) -> Result<f64> {
    let mut tape = Tape::unchecked();
    let p = model.store.bind(&mut tape, true);
    let loss = batch_loss(model, &mut tape, &p, batch)?;
    let value = tape.value(loss).item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "train_step loss" });
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&Tensor<T>>> = model.store.ids().map(|id| tape.grad(p.get(id))).collect();
    opt.step(&mut model.store, &grads);
    Ok(value)
}

/// Mean loss over the whole set, without gradients.
pub fn evaluate<T: Scalar>(model: &CoMer<T>, task: &ToyTask<T>) -> Result<f64> {
    let mut sum = 0.0;
    for s in &task.samples {
        let mut tape = Tape::unchecked();
        let p = model.store.bind(&mut tape, false);
        let l = batch_loss(model, &mut tape, &p, &[s])?;
        sum += tape.value(l).item().to_f64();
    }
    Ok(sum / task.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub images: usize,
    /// Seeds parameter init, the dataset and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 10,
            images: 50,
            seed: 0,
        }
    }
}

/// Training aborts once a step's loss exceeds this multiple of the first.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: CoMer<T>,
    /// Mini-batch loss of every step, before its update.
    pub losses: Vec<f64>,
    /// Mean loss over the full set after the last step.
    pub final_loss: f64,
}

/// Deterministic run: batches walk a per-epoch shuffle of the set.
pub fn train_toy<T: Scalar>(
    model: CoMer<T>,
    tc: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    if tc.batch_size == 0 || tc.images == 0 {
        return Err(Error::Config("batch_size and images must be positive".into()));
    }
    let mut model = model;
    let (h, w) = (model.cfg.vit.img_h, model.cfg.vit.img_w);
    let task = ToyTask::<T>::generate(tc.seed, tc.images, h, w)?;
    let mut opt = Sgd::new(&model.store, tc.lr, tc.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<&ToySample<T>> = (0..tc.batch_size.min(tc.images))
            .map(|_| {
                if order.is_empty() {
                    order = (0..tc.images).collect();
                    order.shuffle(&mut rng);
                }
                &task.samples[order.pop().expect("refilled above")]
            })
            .collect();
        let loss = train_step(&mut model, &mut opt, &batch)?;
        if let Some(&first) = losses.first() {
            if loss > DIVERGENCE_FACTOR * first {
                return Err(Error::invalid(
                    "train_toy",
                    format!("diverged at step {step}: loss {loss} > {DIVERGENCE_FACTOR} x initial {first}"),
                ));
            }
        }
        on_step(step, loss);
        losses.push(loss);
    }
    let final_loss = evaluate(&model, &task)?;
    Ok(TrainOutcome {
        model,
        losses,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CoMerConfig;

    #[test]
    fn zero_lr_keeps_parameters_and_loss() {
        let model = CoMer::<f32>::new(&CoMerConfig::toy(), 0).unwrap();
        let before = model.store.clone();
        let tc = TrainConfig {
            steps: 3,
            lr: 0.0,
            batch_size: 2,
            images: 4,
            ..TrainConfig::default()
        };
        let out = train_toy(model, &tc, |_, _| {}).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id).data(), out.model.store.get(id).data());
        }
        for l in out.losses {
            assert!((l - 4f64.ln()).abs() < 1e-6, "{l}");
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[1], &[1.0]).unwrap());
        let mut opt = Sgd::new(&store, 0.1, 0.5);
        let g = Tensor::from_f64(&[1], &[1.0]).unwrap();
        opt.step(&mut store, &[Some(&g)]);
        opt.step(&mut store, &[Some(&g)]);
        // v1 = 1, v2 = 1.5
        assert!((store.get(id).data()[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-15);
    }
}
