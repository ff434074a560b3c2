//! CNN-Transformer interaction: multi-scale deformable attention over the
//! pyramid tokens, and the fusion / injection steps between the branches.

use crate::config::CtiConfig;
use crate::error::{Error, Result};
use crate::nn::{Ffn, LayerNorm, Linear};
use crate::params::{Bound, Init, ParamStore};
use crate::pyramid::LevelShapes;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const LEVELS: usize = 3;

/// Multi-scale deformable attention. Offsets and attention logits are
/// predicted from the query; both projections start at zero, so a fresh
/// module samples every level uniformly at the reference points.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub value: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub output: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformAttn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) || points == 0 {
            return Err(Error::Config(format!(
                "deformable attention: dim {dim}, {heads} heads, {points} points"
            )));
        }
        let samples = heads * LEVELS * points;
        Ok(DeformAttn {
            value: Linear::new(store, init, &format!("{name}.value"), dim, dim),
            offsets: Linear::zeros(store, &format!("{name}.offsets"), dim, 2 * samples),
            weights: Linear::zeros(store, &format!("{name}.weights"), dim, samples),
            output: Linear::new(store, init, &format!("{name}.output"), dim, dim),
            heads,
            points,
        })
    }

    pub fn param_count(dim: usize, heads: usize, points: usize) -> usize {
        let samples = heads * LEVELS * points;
        2 * Linear::param_count(dim, dim) + Linear::param_count(dim, 2 * samples) + Linear::param_count(dim, samples)
    }

    /// Softmax-normalized attention weights `[T × heads·L·K]`, each
    /// `(query, head)` block summing to one.
    pub fn attention_weights<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, query: Var) -> Result<Var> {
        let t = tape.dims(query)[0];
        let per_head = LEVELS * self.points;
        let logits = self.weights.forward(tape, p, query)?;
        let logits = tape.reshape(logits, &[t * self.heads, per_head])?;
        let w = tape.softmax(logits, 1)?;
        tape.reshape(w, &[t, self.heads * per_head])
    }

    /// Queries and values are both `[T × D]` token sequences over `shapes`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        query: Var,
        value: Var,
        shapes: &LevelShapes,
    ) -> Result<Var> {
        let total = shapes.total();
        for v in [query, value] {
            if tape.dims(v).len() != 2 || tape.dims(v)[0] != total {
                return Err(Error::shape("deform_attn", &[total, self.value.in_features], tape.dims(v)));
            }
        }
        let v = self.value.forward(tape, p, value)?;
        let off = self.offsets.forward(tape, p, query)?;
        let w = self.attention_weights(tape, p, query)?;
        let refs = shapes.reference_points();
        let sampled = tape.ms_deform_sample(v, off, w, &shapes.shapes, &refs, self.heads, self.points)?;
        self.output.forward(tape, p, sampled)
    }
}

/// `t = F′ + Attn(LN₁(F′)); O = t + FFN(LN₂(t))`.
#[derive(Clone, Debug)]
pub struct CtiBlock {
    pub norm1: LayerNorm,
    pub attn: DeformAttn,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl CtiBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        cfg: &CtiConfig,
    ) -> Result<Self> {
        Ok(CtiBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: DeformAttn::new(store, init, &format!("{name}.attn"), dim, cfg.heads, cfg.points)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: Ffn::new(store, init, &format!("{name}.ffn"), dim, cfg.ffn_ratio),
        })
    }

    pub fn param_count(dim: usize, cfg: &CtiConfig) -> usize {
        2 * LayerNorm::param_count(dim)
            + DeformAttn::param_count(dim, cfg.heads, cfg.points)
            + Ffn::param_count(dim, cfg.ffn_ratio)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, fused: Var, shapes: &LevelShapes) -> Result<Var> {
        let n = self.norm1.forward(tape, p, fused)?;
        let a = self.attn.forward(tape, p, n, n, shapes)?;
        let t = tape.add(fused, a)?;
        let n = self.norm2.forward(tape, p, t)?;
        let f = self.ffn.forward(tape, p, n)?;
        tape.add(t, f)
    }
}

/// `F′ = {F₃, F₄ + X, F₅}`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, x: Var, f: Var, shapes: &LevelShapes) -> Result<Var> {
    let [f3, f4, f5] = tape.split_levels(f, shapes)?;
    if tape.dims(x) != tape.dims(f4) {
        return Err(Error::shape("fuse", tape.dims(f4), tape.dims(x)));
    }
    let mid = tape.add(f4, x)?;
    tape.concat(&[f3, mid, f5], 0)
}

/// Sum of the three levels of `o`, each resized onto the 1/16 grid, as
/// tokens of that grid.
pub fn align_to_vit<T: Scalar>(tape: &mut Tape<T>, o: Var, shapes: &LevelShapes) -> Result<Var> {
    let [o3, o4, o5] = tape.split_levels(o, shapes)?;
    let (gh, gw) = shapes.shapes[1];
    let mut acc = o4;
    for (tokens, l) in [(o3, 0), (o5, 2)] {
        let (h, w) = shapes.shapes[l];
        let map = tape.tokens_to_map(tokens, h, w)?;
        let map = tape.bilinear_resize(map, gh, gw)?;
        let aligned = tape.map_to_tokens(map)?;
        acc = tape.add(acc, aligned)?;
    }
    Ok(acc)
}

/// `X̂ = α·align(O) + X`, with `alpha` a one-element variable.
pub fn inject_to_vit<T: Scalar>(tape: &mut Tape<T>, x: Var, o: Var, alpha: Var, shapes: &LevelShapes) -> Result<Var> {
    let aligned = align_to_vit(tape, o, shapes)?;
    if tape.dims(aligned) != tape.dims(x) {
        return Err(Error::shape("inject_to_vit", tape.dims(aligned), tape.dims(x)));
    }
    let gated = tape.mul(aligned, alpha)?;
    tape.add(gated, x)
}

/// `F̂ = O + F′`.
pub fn inject_to_cnn<T: Scalar>(tape: &mut Tape<T>, fused: Var, o: Var) -> Result<Var> {
    tape.add(o, fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> LevelShapes {
        LevelShapes::for_image(64, 64).unwrap()
    }

    #[test]
    fn fuse_touches_only_middle_level() {
        let s = shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::randn(&[84, 3], 1.0, &mut rng));
        let x = tape.constant(Tensor::randn(&[16, 3], 1.0, &mut rng));
        let zx = tape.constant(Tensor::zeros(&[16, 3]));
        let fused = fuse(&mut tape, x, f, &s).unwrap();
        let same = fuse(&mut tape, zx, f, &s).unwrap();
        assert_eq!(tape.value(same), tape.value(f));
        let (a, b) = (tape.value(fused).data(), tape.value(f).data());
        for tok in 0..84 {
            let changed = (0..3).any(|c| a[tok * 3 + c] != b[tok * 3 + c]);
            assert_eq!(changed, (64..80).contains(&tok), "token {tok}");
        }
        let bad = tape.constant(Tensor::zeros(&[15, 3]));
        assert!(fuse(&mut tape, bad, f, &s).is_err());
    }

    #[test]
    fn injection_rules() {
        let s = shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[16, 2], 1.0, &mut rng));
        let o = tape.constant(Tensor::randn(&[84, 2], 1.0, &mut rng));
        let zero = tape.constant(Tensor::scalar(0.0));
        let one = tape.constant(Tensor::scalar(1.0));
        let y = inject_to_vit(&mut tape, x, o, zero, &s).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let c = tape.constant(Tensor::full(&[84, 2], 0.25));
        let y = inject_to_vit(&mut tape, x, c, one, &s).unwrap();
        let expect: Vec<f64> = tape.value(x).data().iter().map(|v| v + 0.75).collect();
        assert!(tape.value(y).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-15));

        let mut only4 = Tensor::zeros(&[84, 2]);
        only4.data_mut()[128..160].copy_from_slice(&tape.value(o).data()[128..160]);
        let o4 = tape.constant(only4);
        let y = inject_to_vit(&mut tape, x, o4, one, &s).unwrap();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(v, tape.value(x).data()[i] + tape.value(o).data()[128 + i]);
        }

        let z = tape.constant(Tensor::zeros(&[84, 2]));
        let f = inject_to_cnn(&mut tape, o, z).unwrap();
        assert_eq!(tape.value(f), tape.value(o));
    }

    #[test]
    fn zero_projections_leave_residual() {
        let s = shapes();
        let cfg = CtiConfig {
            heads: 4,
            points: 4,
            ffn_ratio: 0.25,
        };
        let mut store = ParamStore::<f64>::new();
        let block = CtiBlock::new(&mut store, &mut Init::new(3), "c", 8, &cfg).unwrap();
        assert_eq!(store.numel(), CtiBlock::param_count(8, &cfg));
        for id in store.ids().collect::<Vec<_>>() {
            if !store.name(id).contains("norm") {
                let dims = store.get(id).dims().to_vec();
                store.set(id, Tensor::zeros(&dims)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = tape.constant(Tensor::randn(&[84, 8], 1.0, &mut rng));
        let o = block.forward(&mut tape, &p, f, &s).unwrap();
        assert_eq!(tape.value(o), tape.value(f));
    }

    #[test]
    fn fresh_weights_are_uniform() {
        let s = shapes();
        let mut store = ParamStore::<f64>::new();
        let attn = DeformAttn::new(&mut store, &mut Init::new(5), "a", 8, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let q = tape.constant(Tensor::randn(&[s.total(), 8], 1.0, &mut rng));
        let w = attn.attention_weights(&mut tape, &p, q).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }
}
