//! Convolutional branch: a strided stem producing the 1/8, 1/16 and 1/32
//! pyramid, and the multi-receptive-field feature pyramid (MRFP) block.

use crate::config::MrfpConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{Bound, Init, ParamStore};
use crate::pyramid::LevelShapes;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Five 3×3 stride-2 convs with GELU; the last three outputs feed 1×1
/// projections to the model width.
#[derive(Clone, Debug)]
pub struct Stem {
    pub convs: Vec<Conv2d>,
    pub proj: Vec<Conv2d>,
}

impl Stem {
    /// `(in, out)` channels of the five strided convs.
    pub fn widths(width: usize) -> [(usize, usize); 5] {
        let w = width;
        [(3, w), (w, w), (w, 2 * w), (2 * w, 4 * w), (4 * w, 4 * w)]
    }

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, width: usize, dim: usize) -> Self {
        let widths = Self::widths(width);
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::new(store, init, &format!("{name}.conv{i}"), cin, cout, 3, 2, 1, 1))
            .collect();
        let proj = widths[2..]
            .iter()
            .enumerate()
            .map(|(l, &(_, c))| Conv2d::new(store, init, &format!("{name}.proj{l}"), c, dim, 1, 1, 0, 1))
            .collect();
        Stem { convs, proj }
    }

    pub fn param_count(width: usize, dim: usize) -> usize {
        let widths = Self::widths(width);
        let convs: usize = widths.iter().map(|&(i, o)| Conv2d::param_count(i, o, 3, 1)).sum();
        let proj: usize = widths[2..].iter().map(|&(_, c)| Conv2d::param_count(c, dim, 1, 1)).sum();
        convs + proj
    }

    /// `[3 × H × W]` → `{C₃, C₄, C₅}`, each `[D × H/s × W/s]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<[Var; 3]> {
        let d = tape.dims(image).to_vec();
        if d.len() != 3 || d[0] != 3 || !d[1].is_multiple_of(32) || !d[2].is_multiple_of(32) {
            return Err(Error::invalid(
                "conv_stem",
                format!("expected [3,H,W] with H, W divisible by 32, got {d:?}"),
            ));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(3);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, p, x)?;
            x = tape.gelu(x)?;
            if i >= 2 {
                levels.push(self.proj[i - 2].forward(tape, p, x)?);
            }
        }
        Ok([levels[0], levels[1], levels[2]])
    }
}

/// `F = FC_up(DWConv(FC_down(C)))`, the depthwise convs split over
/// contiguous channel groups with one kernel size per group, applied to each
/// level separately.
#[derive(Clone, Debug)]
pub struct Mrfp {
    pub fc_down: Linear,
    pub convs: Vec<Conv2d>,
    pub fc_up: Linear,
    pub reduced: usize,
}

impl Mrfp {
    pub fn reduced_dim(dim: usize, cfg: &MrfpConfig) -> usize {
        (dim as f64 * cfg.reduce_ratio).round() as usize
    }

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        cfg: &MrfpConfig,
    ) -> Result<Self> {
        let reduced = Self::reduced_dim(dim, cfg);
        let groups = cfg.kernels.len();
        if groups == 0 || reduced == 0 || !reduced.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "reduced width {reduced} is not divisible into {groups} groups"
            )));
        }
        if cfg.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("mrfp kernels {:?} must be odd", cfg.kernels)));
        }
        let per = reduced / groups;
        let convs = cfg
            .kernels
            .iter()
            .enumerate()
            .map(|(m, &k)| Conv2d::new(store, init, &format!("{name}.dw{m}"), per, per, k, 1, k / 2, per))
            .collect();
        Ok(Mrfp {
            fc_down: Linear::fan_in(store, init, &format!("{name}.fc_down"), dim, reduced),
            convs,
            fc_up: Linear::fan_in(store, init, &format!("{name}.fc_up"), reduced, dim),
            reduced,
        })
    }

    pub fn param_count(dim: usize, cfg: &MrfpConfig) -> usize {
        let reduced = Self::reduced_dim(dim, cfg);
        let per = reduced / cfg.kernels.len();
        let convs: usize = cfg.kernels.iter().map(|&k| Conv2d::param_count(per, per, k, per)).sum();
        Linear::param_count(dim, reduced) + convs + Linear::param_count(reduced, dim)
    }

    /// Grouped depthwise convs on one `[D′ × h × w]` map.
    pub fn conv_groups<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, map: Var) -> Result<Var> {
        let per = self.reduced / self.convs.len();
        let sizes = vec![per; self.convs.len()];
        let groups = tape.split(map, 0, &sizes)?;
        let outs = groups
            .into_iter()
            .zip(&self.convs)
            .map(|(g, conv)| conv.forward(tape, p, g))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 0)
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, shapes: &LevelShapes) -> Result<Var> {
        let down = self.fc_down.forward(tape, p, tokens)?;
        let maps = tape.unflatten_pyramid(down, shapes)?;
        let mut mixed = maps;
        for m in mixed.iter_mut() {
            *m = self.conv_groups(tape, p, *m)?;
        }
        let flat = tape.flatten_pyramid(&mixed)?;
        self.fc_up.forward(tape, p, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mrfp_cfg(kernels: &[usize], ratio: f64) -> MrfpConfig {
        MrfpConfig {
            kernels: kernels.to_vec(),
            reduce_ratio: ratio,
        }
    }

    #[test]
    fn stem_shapes_and_count() {
        let mut store = ParamStore::<f64>::new();
        let stem = Stem::new(&mut store, &mut Init::new(0), "stem", 8, 16);
        assert_eq!(store.numel(), Stem::param_count(8, 16));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(Tensor::zeros(&[3, 64, 64]));
        let levels = stem.forward(&mut tape, &p, img).unwrap();
        let dims: Vec<_> = levels.iter().map(|&l| tape.dims(l).to_vec()).collect();
        assert_eq!(dims, vec![vec![16, 8, 8], vec![16, 4, 4], vec![16, 2, 2]]);
        for l in levels {
            assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
        }
        let bad = tape.constant(Tensor::zeros(&[3, 48, 64]));
        assert!(stem.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn identity_mrfp_is_identity() {
        let cfg = mrfp_cfg(&[3, 5], 1.0);
        let mut store = ParamStore::<f64>::new();
        let m = Mrfp::new(&mut store, &mut Init::new(1), "m", 4, &cfg).unwrap();
        let eye = Tensor::from_f64(&[4, 4], &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        store.set(m.fc_down.weight, eye.clone()).unwrap();
        store.set(m.fc_up.weight, eye).unwrap();
        for conv in &m.convs {
            let dims = store.get(conv.kernel).dims().to_vec();
            let k = dims[2];
            let mut delta = Tensor::zeros(&dims);
            for c in 0..dims[0] {
                delta.data_mut()[c * k * k + (k / 2) * k + k / 2] = 1.0;
            }
            store.set(conv.kernel, delta).unwrap();
        }
        let shapes = LevelShapes::for_image(64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let t = tape.constant(Tensor::randn(&[84, 4], 1.0, &mut rng));
        let y = m.forward(&mut tape, &p, t, &shapes).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(t)).unwrap() < 1e-15);
    }

    #[test]
    fn rejects_indivisible_groups() {
        let mut store = ParamStore::<f64>::new();
        assert!(Mrfp::new(&mut store, &mut Init::new(0), "m", 16, &mrfp_cfg(&[3, 5, 7], 0.5)).is_err());
        assert!(Mrfp::new(&mut store, &mut Init::new(0), "n", 16, &mrfp_cfg(&[4], 0.5)).is_err());
    }

    #[test]
    fn count_matches_allocation() {
        for kernels in [&[3][..], &[3, 5], &[3, 5, 7], &[3, 5, 7, 9]] {
            let cfg = mrfp_cfg(kernels, 0.5);
            let mut store = ParamStore::<f32>::new();
            Mrfp::new(&mut store, &mut Init::new(0), "m", 24, &cfg).unwrap();
            assert_eq!(store.numel(), Mrfp::param_count(24, &cfg));
        }
    }
}
