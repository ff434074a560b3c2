//! The assembled two-branch backbone.

use crate::cnn::{Mrfp, Stem};
use crate::config::CoMerConfig;
use crate::count::{self, ParamBreakdown};
use crate::cti::{self, CtiBlock};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::pyramid::LevelShapes;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::VitBranch;

/// Per-stage modules; absent when the matching toggle is off.
#[derive(Clone, Debug)]
pub struct Stage {
    pub mrfp: Option<Mrfp>,
    pub to_vit: Option<(CtiBlock, ParamId)>,
    pub to_cnn: Option<CtiBlock>,
}

/// Transposed 2×2 conv from the 1/8 output to an extra 1/4 level.
#[derive(Clone, Debug)]
pub struct QuarterLevel {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// One zero-initialized 1×1 classifier per output level.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub convs: Vec<Conv2d>,
}

impl SegHead {
    fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, classes: usize) -> Self {
        let convs = (0..3)
            .map(|l| {
                let kernel = store.add(format!("head.cls{l}.weight"), Tensor::zeros(&[classes, dim, 1, 1]));
                let bias = store.add(format!("head.cls{l}.bias"), Tensor::zeros(&[classes]));
                Conv2d {
                    kernel,
                    bias,
                    stride: 1,
                    padding: 0,
                    groups: 1,
                }
            })
            .collect();
        SegHead { convs }
    }

    /// Logits of all levels summed on the 1/8 grid: `[K × H/8 × W/8]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, levels: &[Var; 3]) -> Result<Var> {
        let (h, w) = (tape.dims(levels[0])[1], tape.dims(levels[0])[2]);
        let mut acc = self.convs[0].forward(tape, p, levels[0])?;
        for l in 1..3 {
            let logits = self.convs[l].forward(tape, p, levels[l])?;
            let up = tape.bilinear_resize(logits, h, w)?;
            acc = tape.add(acc, up)?;
        }
        Ok(acc)
    }
}

/// Variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Features {
    pub shapes: LevelShapes,
    /// ViT tokens after the embedding and after every block.
    pub vit_layers: Vec<Var>,
    /// Final ViT tokens as a `[D × H/16 × W/16]` map.
    pub vit_map: Var,
    /// Final CNN-branch levels.
    pub cnn: [Var; 3],
    /// CNN levels plus the ViT map resized to each level.
    pub out: [Var; 3],
    pub quarter: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CoMer<T: Scalar> {
    pub cfg: CoMerConfig,
    pub store: ParamStore<T>,
    pub vit: VitBranch,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub quarter: Option<QuarterLevel>,
    pub head: SegHead,
}

impl<T: Scalar> CoMer<T> {
    pub fn new(cfg: &CoMerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = cfg.dim();
        let vit = VitBranch::new(&mut store, &mut init, "vit", &cfg.vit)?;
        let stem = Stem::new(&mut store, &mut init, "stem", cfg.stem_width, d);
        let mut stages = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let t = cfg.toggles;
            let mrfp = if t.mrfp {
                Some(Mrfp::new(&mut store, &mut init, &format!("mrfp.{i}"), d, &cfg.mrfp)?)
            } else {
                None
            };
            let to_vit = if t.cti_to_vit {
                let block = CtiBlock::new(&mut store, &mut init, &format!("cti_v.{i}"), d, &cfg.cti)?;
                let alpha = store.add(format!("cti_v.{i}.alpha"), Tensor::zeros(&[1]));
                Some((block, alpha))
            } else {
                None
            };
            let to_cnn = if t.cti_to_cnn {
                Some(CtiBlock::new(&mut store, &mut init, &format!("cti_c.{i}"), d, &cfg.cti)?)
            } else {
                None
            };
            stages.push(Stage { mrfp, to_vit, to_cnn });
        }
        let quarter = cfg.quarter_level.then(|| QuarterLevel {
            weight: store.add("quarter.weight", init.trunc_normal(&[d, d, 2, 2], 0.02)),
            bias: store.add("quarter.bias", Tensor::zeros(&[d])),
        });
        let head = SegHead::new(&mut store, d, cfg.num_classes);
        Ok(CoMer {
            cfg: cfg.clone(),
            store,
            vit,
            stem,
            stages,
            quarter,
            head,
        })
    }

    /// Parameter counts read off the allocated store.
    pub fn breakdown(&self) -> ParamBreakdown {
        ParamBreakdown::from_fn(|prefix| self.store.numel_with_prefix(prefix))
    }

    pub fn analytic_breakdown(&self) -> ParamBreakdown {
        count::analytic(&self.cfg)
    }

    pub fn alphas(&self) -> Vec<ParamId> {
        self.stages.iter().filter_map(|s| s.to_vit.as_ref().map(|v| v.1)).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Features> {
        let d = tape.dims(image).to_vec();
        if d.len() != 3 || d[0] != 3 {
            return Err(Error::invalid("forward", format!("expected [3,H,W] image, got {d:?}")));
        }
        let shapes = LevelShapes::for_image(d[1], d[2])?;
        let (gh, gw) = shapes.shapes[1];
        let n = self.stages.len();

        let mut x = self.vit.embed.forward(tape, p, image)?;
        let mut vit_layers = vec![x];
        let pyramid = self.stem.forward(tape, p, image)?;
        let mut f = tape.flatten_pyramid(&pyramid)?;

        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(mrfp) = &stage.mrfp {
                f = mrfp.forward(tape, p, f, &shapes)?;
            }
            if let Some((block, alpha)) = &stage.to_vit {
                let fused = cti::fuse(tape, x, f, &shapes)?;
                let o = block.forward(tape, p, fused, &shapes)?;
                x = cti::inject_to_vit(tape, x, o, p.get(*alpha), &shapes)?;
            }
            x = self.vit.run_stage(tape, p, x, i + 1, n, Some(&mut vit_layers))?;
            if let Some(block) = &stage.to_cnn {
                let fused = cti::fuse(tape, x, f, &shapes)?;
                let o = block.forward(tape, p, fused, &shapes)?;
                f = cti::inject_to_cnn(tape, fused, o)?;
            }
        }

        let vit_map = tape.tokens_to_map(x, gh, gw)?;
        let cnn = tape.unflatten_pyramid(f, &shapes)?;
        let mut out = cnn;
        for (l, o) in out.iter_mut().enumerate() {
            let (h, w) = shapes.shapes[l];
            let v = if (h, w) == (gh, gw) {
                vit_map
            } else {
                tape.bilinear_resize(vit_map, h, w)?
            };
            *o = tape.add(*o, v)?;
        }
        let quarter = match &self.quarter {
            Some(q) => Some(tape.up_conv2x2(out[0], p.get(q.weight), p.get(q.bias))?),
            None => None,
        };
        Ok(Features {
            shapes,
            vit_layers,
            vit_map,
            cnn,
            out,
            quarter,
        })
    }

    /// Mean cross-entropy of the head's 1/8-grid logits against `labels`
    /// given on that grid.
    pub fn loss(&self, tape: &mut Tape<T>, p: &Bound, image: Var, labels: &[usize]) -> Result<Var> {
        let feats = self.forward(tape, p, image)?;
        let logits = self.head.forward(tape, p, &feats.out)?;
        tape.cross_entropy(logits, labels)
    }

    /// Forward on a fresh verification tape, returning the output levels.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let feats = self.forward(&mut tape, &p, img)?;
        let mut outs: Vec<Tensor<T>> = feats.out.iter().map(|&v| tape.value(v).clone()).collect();
        if let Some(q) = feats.quarter {
            outs.push(tape.value(q).clone());
        }
        Ok(outs)
    }

    pub fn cast<U: Scalar>(&self) -> CoMer<U> {
        CoMer {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            vit: self.vit.clone(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            quarter: self.quarter.clone(),
            head: self.head.clone(),
        }
    }
}
