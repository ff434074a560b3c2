//! Whole-model checks: finite-difference gradients and zero-gate
//! transparency against a standalone ViT.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CoMerConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{perturb, GradCheck, TensorCheck};
use crate::model::CoMer;
use crate::pyramid::STRIDES;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::vit::PlainVit;

/// Standard deviation of the noise added to every parameter before a
/// model gradcheck.
pub const PERTURB_STD: f64 = 0.05;

/// A random image and random labels on the 1/8 grid.
pub fn random_batch(cfg: &CoMerConfig, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.vit.img_h, cfg.vit.img_w);
    let image = Tensor::randn(&[3, h, w], 1.0, &mut rng);
    let labels = (0..(h / 8) * (w / 8))
        .map(|_| rng.random_range(0..cfg.num_classes))
        .collect();
    (image, labels)
}

/// Gradchecks the segmentation loss with respect to every parameter of a
/// freshly built, perturbed model.
pub fn gradcheck_model(cfg: &CoMerConfig, seed: u64, gc: &GradCheck) -> Result<Vec<TensorCheck>> {
    let mut model = CoMer::<f64>::new(cfg, seed)?;
    perturb(&mut model.store, PERTURB_STD, seed.wrapping_add(1));
    let (image, labels) = random_batch(cfg, seed.wrapping_add(2));
    gc.run(&model.store, |tape, p| {
        let img = tape.constant(image.clone());
        model.loss(tape, p, img, &labels)
    })
}

/// Name of the module a parameter belongs to (its name minus the last
/// component, e.g. `cti_v.0.attn.offsets`).
pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Reports merged per module, in first-appearance order.
pub fn by_group(reports: &[TensorCheck]) -> Vec<TensorCheck> {
    let mut groups: Vec<TensorCheck> = Vec::new();
    for r in reports {
        let g = group_of(&r.name);
        match groups.iter_mut().find(|x| x.name == g) {
            Some(x) => {
                x.numel += r.numel;
                x.checked += r.checked;
                x.crossed += r.crossed;
                x.max_rel = x.max_rel.max(r.max_rel);
                x.max_abs = x.max_abs.max(r.max_abs);
                x.max_grad = x.max_grad.max(r.max_grad);
            }
            None => groups.push(TensorCheck {
                name: g.to_string(),
                ..r.clone()
            }),
        }
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeCheck {
    pub name: String,
    pub got: Vec<usize>,
    pub expected: Vec<usize>,
}

impl ShapeCheck {
    pub fn passes(&self) -> bool {
        self.got == self.expected
    }
}

/// Forwards a random image through a fresh model and compares every
/// output level, CNN level and token count with the stride contract.
pub fn shape_checks<T: Scalar>(cfg: &CoMerConfig, seed: u64) -> Result<Vec<ShapeCheck>> {
    let model = CoMer::<T>::new(cfg, seed)?;
    let (h, w, d) = (cfg.vit.img_h, cfg.vit.img_w, cfg.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let img = tape.constant(Tensor::<T>::randn(&[3, h, w], 1.0, &mut rng));
    let feats = model.forward(&mut tape, &p, img)?;

    let mut out = Vec::new();
    let mut push = |name: String, got: &[usize], expected: Vec<usize>| {
        out.push(ShapeCheck {
            name,
            got: got.to_vec(),
            expected,
        })
    };
    for (i, &v) in feats.vit_layers.iter().enumerate() {
        let name = if i == 0 { "vit_embed".to_string() } else { format!("vit_block_{}", i - 1) };
        push(name, tape.dims(v), vec![(h / 16) * (w / 16), d]);
    }
    let mut total = 0;
    for (l, &s) in STRIDES.iter().enumerate() {
        let expected = vec![d, h / s, w / s];
        push(format!("level_1/{s}"), tape.dims(feats.out[l]), expected.clone());
        push(format!("cnn_1/{s}"), tape.dims(feats.cnn[l]), expected);
        push(format!("tokens_1/{s}"), &[feats.shapes.tokens(l)], vec![(h / s) * (w / s)]);
        total += (h / s) * (w / s);
    }
    push("tokens_total".into(), &[feats.shapes.total()], vec![total]);
    if let Some(q) = feats.quarter {
        push("level_1/4".into(), tape.dims(q), vec![d, h / 4, w / 4]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivReport {
    /// Max |Δ| of the ViT tokens after the embedding and after each block.
    pub layers: Vec<f64>,
}

impl EquivReport {
    pub fn max(&self) -> f64 {
        self.layers.iter().copied().fold(0.0, f64::max)
    }

    /// Index into `layers` of the first nonzero difference.
    pub fn first_mismatch(&self) -> Option<usize> {
        self.layers.iter().position(|&d| d != 0.0)
    }
}

/// Compares the ViT token stream of `model` against a standalone ViT given
/// copies of the same weights.
pub fn equiv_plain_vit(model: &CoMer<f64>, image: &Tensor<f64>) -> Result<EquivReport> {
    let mut plain = PlainVit::<f64>::new(&model.cfg.vit, 0)?;
    let copied = plain.store.copy_matching(&model.store)?;
    if copied != plain.store.len() {
        return Err(Error::invalid(
            "equiv",
            format!("only {copied} of {} ViT tensors found in the model", plain.store.len()),
        ));
    }
    let reference = plain.layer_tokens(image)?;

    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let feats = model.forward(&mut tape, &p, img)?;
    if feats.vit_layers.len() != reference.len() {
        return Err(Error::invalid("equiv", "layer count differs"));
    }
    let layers = feats
        .vit_layers
        .iter()
        .zip(&reference)
        .map(|(&v, r)| tape.value(v).max_abs_diff(r).unwrap_or(f64::INFINITY))
        .collect();
    Ok(EquivReport { layers })
}

/// Zero-gate check on a fresh model; `alpha` overrides every gate first.
pub fn equiv_init(cfg: &CoMerConfig, seed: u64, alpha: Option<f64>) -> Result<EquivReport> {
    let mut model = CoMer::<f64>::new(cfg, seed)?;
    if let Some(a) = alpha {
        for id in model.alphas() {
            model.store.set(id, Tensor::from_f64(&[1], &[a])?)?;
        }
    }
    let (image, _) = random_batch(cfg, seed.wrapping_add(1));
    equiv_plain_vit(&model, &image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Toggles;

    #[test]
    fn zero_gate_is_exact() {
        let r = equiv_init(&CoMerConfig::toy(), 0, None).unwrap();
        assert_eq!(r.layers.len(), 5);
        assert_eq!(r.max(), 0.0);
    }

    #[test]
    fn nonzero_gate_differs_from_first_block() {
        let r = equiv_init(&CoMerConfig::toy(), 0, Some(0.1)).unwrap();
        assert_eq!(r.layers[0], 0.0);
        assert_eq!(r.first_mismatch(), Some(1));
    }

    #[test]
    fn without_cti_to_vit_alpha_is_irrelevant() {
        let mut cfg = CoMerConfig::toy();
        cfg.toggles = Toggles {
            cti_to_vit: false,
            ..Toggles::ALL_ON
        };
        assert_eq!(equiv_init(&cfg, 3, Some(0.1)).unwrap().max(), 0.0);
    }

    #[test]
    fn groups_strip_last_component() {
        assert_eq!(group_of("cti_v.0.attn.offsets.weight"), "cti_v.0.attn.offsets");
        assert_eq!(group_of("cti_v.1.alpha"), "cti_v.1");
    }
}
