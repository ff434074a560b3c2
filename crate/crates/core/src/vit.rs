//! The plain ViT branch: patch embedding plus pre-norm transformer blocks,
//! split evenly into interaction stages.

use std::ops::Range;

use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ffn, LayerNorm, Mhsa};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const POS_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    /// `[gh·gw × D]` for the configured input size.
    pub pos: ParamId,
    pub grid: (usize, usize),
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &ViTConfig) -> Self {
        let (p, d) = (cfg.patch, cfg.dim);
        let w = init.trunc_normal(&[d, 3, p, p], 0.02);
        let kernel = store.add(format!("{name}.proj.weight"), w);
        let bias = store.add(format!("{name}.proj.bias"), Tensor::zeros(&[d]));
        let grid = cfg.grid();
        let pos = store.add(format!("{name}.pos"), init.trunc_normal(&[grid.0 * grid.1, d], POS_STD));
        PatchEmbed {
            proj: Conv2d {
                kernel,
                bias,
                stride: p,
                padding: 0,
                groups: 1,
            },
            pos,
            grid,
            patch: p,
            dim: d,
        }
    }

    pub fn param_count(cfg: &ViTConfig) -> usize {
        let (gh, gw) = cfg.grid();
        Conv2d::param_count(3, cfg.dim, cfg.patch, 1) + gh * gw * cfg.dim
    }

    /// `[3 × H × W] → [(H/16)·(W/16) × D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let d = tape.dims(image).to_vec();
        if d.len() != 3 || d[0] != 3 {
            return Err(Error::invalid("patch_embed", format!("expected [3,H,W], got {d:?}")));
        }
        if !d[1].is_multiple_of(32) || !d[2].is_multiple_of(32) {
            return Err(Error::invalid(
                "patch_embed",
                format!("input {}×{} is not divisible by 32", d[1], d[2]),
            ));
        }
        let (gh, gw) = (d[1] / self.patch, d[2] / self.patch);
        let map = self.proj.forward(tape, p, image)?;
        let tokens = tape.map_to_tokens(map)?;
        let pos = self.position(tape, p, gh, gw)?;
        tape.add(tokens, pos)
    }

    /// Positional embedding for a `gh × gw` grid, resized from the stored one
    /// when the grids differ.
    pub fn position<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, gh: usize, gw: usize) -> Result<Var> {
        let pos = p.get(self.pos);
        if (gh, gw) == self.grid {
            return Ok(pos);
        }
        let map = tape.tokens_to_map(pos, self.grid.0, self.grid.1)?;
        let map = tape.bilinear_resize(map, gh, gw)?;
        tape.map_to_tokens(map)
    }
}

/// `X ← X + MHSA(LN(X)); X ← X + FFN(LN(X))`.
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: Mhsa,
    pub norm2: LayerNorm,
    pub mlp: Ffn,
}

impl VitBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &ViTConfig) -> Result<Self> {
        Ok(VitBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            attn: Mhsa::new(store, init, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            mlp: Ffn::new(store, init, &format!("{name}.mlp"), cfg.dim, cfg.mlp_ratio),
        })
    }

    pub fn param_count(cfg: &ViTConfig) -> usize {
        2 * LayerNorm::param_count(cfg.dim) + Mhsa::param_count(cfg.dim) + Ffn::param_count(cfg.dim, cfg.mlp_ratio)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct VitBranch {
    pub embed: PatchEmbed,
    pub blocks: Vec<VitBlock>,
    pub dim: usize,
}

impl VitBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &ViTConfig) -> Result<Self> {
        let embed = PatchEmbed::new(store, init, &format!("{name}.embed"), cfg);
        let blocks = (0..cfg.depth)
            .map(|i| VitBlock::new(store, init, &format!("{name}.blocks.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(VitBranch {
            embed,
            blocks,
            dim: cfg.dim,
        })
    }

    pub fn param_count(cfg: &ViTConfig) -> usize {
        PatchEmbed::param_count(cfg) + cfg.depth * VitBlock::param_count(cfg)
    }

    /// Block indices of stage `stage` (1-based) out of `stages`.
    pub fn stage_range(&self, stage: usize, stages: usize) -> Result<Range<usize>> {
        let depth = self.blocks.len();
        if stages == 0 || !depth.is_multiple_of(stages) {
            return Err(Error::Config(format!("depth {depth} is not divisible into {stages} stages")));
        }
        if stage == 0 || stage > stages {
            return Err(Error::invalid("run_stage", format!("stage {stage} outside 1..={stages}")));
        }
        let per = depth / stages;
        Ok((stage - 1) * per..stage * per)
    }

    /// Applies the given blocks in order, pushing the tokens after each block
    /// onto `trace` when one is given.
    pub fn run_blocks<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mut x: Var,
        range: Range<usize>,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        for block in &self.blocks[range] {
            x = block.forward(tape, p, x)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
        }
        Ok(x)
    }

    pub fn run_stage<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        stage: usize,
        stages: usize,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let range = self.stage_range(stage, stages)?;
        self.run_blocks(tape, p, x, range, trace)
    }
}

/// A standalone plain ViT, named so its parameters line up with the ViT
/// branch of the full model.
#[derive(Clone, Debug)]
pub struct PlainVit<T: Scalar> {
    pub cfg: ViTConfig,
    pub store: ParamStore<T>,
    pub branch: VitBranch,
}

impl<T: Scalar> PlainVit<T> {
    pub fn new(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let branch = VitBranch::new(&mut store, &mut Init::new(seed), "vit", cfg)?;
        Ok(PlainVit {
            cfg: cfg.clone(),
            store,
            branch,
        })
    }

    /// Tokens after the embedding and after every block.
    pub fn layer_tokens(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let x = self.branch.embed.forward(&mut tape, &p, img)?;
        let mut trace = vec![x];
        self.branch
            .run_blocks(&mut tape, &p, x, 0..self.branch.blocks.len(), Some(&mut trace))?;
        Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CoMerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ViTConfig {
        CoMerConfig::toy().vit
    }

    #[test]
    fn embed_token_counts() {
        let vit = PlainVit::<f64>::new(&toy(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let p = vit.store.bind(&mut tape, false);
        for (side, tokens) in [(64, 16), (96, 36)] {
            let img = tape.constant(Tensor::randn(&[3, side, side], 1.0, &mut rng));
            let x = vit.branch.embed.forward(&mut tape, &p, img).unwrap();
            assert_eq!(tape.dims(x), &[tokens, 16]);
        }
        let img = tape.constant(Tensor::zeros(&[3, 48, 64]));
        assert!(vit.branch.embed.forward(&mut tape, &p, img).is_err());
    }

    #[test]
    fn zero_image_and_pos_give_bias() {
        let mut vit = PlainVit::<f64>::new(&toy(), 1).unwrap();
        let pos = vit.branch.embed.pos;
        vit.store.set(pos, Tensor::zeros(&[16, 16])).unwrap();
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let b = vit.branch.embed.proj.bias;
        vit.store.set(b, Tensor::from_f64(&[16], &bias).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = vit.store.bind(&mut tape, false);
        let img = tape.constant(Tensor::zeros(&[3, 64, 64]));
        let x = vit.branch.embed.forward(&mut tape, &p, img).unwrap();
        for row in tape.value(x).data().chunks(16) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let mut vit = PlainVit::<f64>::new(&toy(), 2).unwrap();
        let ids: Vec<_> = vit
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("vit.blocks.0.") && !n.contains("norm"))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let dims = vit.store.get(id).dims().to_vec();
            vit.store.set(id, Tensor::zeros(&dims)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let p = vit.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn(&[16, 16], 1.0, &mut rng));
        let y = vit.branch.blocks[0].forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn stages_partition_blocks() {
        let mut cfg = toy();
        cfg.depth = 8;
        let vit = PlainVit::<f64>::new(&cfg, 3).unwrap();
        assert_eq!(vit.branch.stage_range(2, 4).unwrap(), 2..4);
        assert!(vit.branch.stage_range(0, 4).is_err());
        assert!(vit.branch.stage_range(5, 4).is_err());
        assert!(vit.branch.stage_range(1, 3).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let p = vit.store.bind(&mut tape, false);
        let x0 = tape.constant(Tensor::randn(&[16, 16], 1.0, &mut rng));
        let mut x = x0;
        for s in 1..=4 {
            x = vit.branch.run_stage(&mut tape, &p, x, s, 4, None).unwrap();
        }
        let all = vit.branch.run_blocks(&mut tape, &p, x0, 0..8, None).unwrap();
        assert_eq!(tape.value(x), tape.value(all));
    }

    #[test]
    fn counts_match_allocation() {
        for variant in crate::config::Variant::ALL {
            let cfg = CoMerConfig::variant(variant).vit;
            if cfg.dim > 400 {
                continue;
            }
            let vit = PlainVit::<f32>::new(&cfg, 0).unwrap();
            assert_eq!(vit.store.numel(), VitBranch::param_count(&cfg));
        }
    }
}
