//! Brute-force loop implementations of the model's heavier operators, written
//! directly over `f64` slices without the tape, plus randomized comparisons
//! of each against the tape version.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnn::Mrfp;
use crate::config::{CoMerConfig, MrfpConfig};
use crate::cti::{DeformAttn, LEVELS};
use crate::error::Result;
use crate::nn::{Linear, Mhsa};
use crate::params::{Init, ParamStore};
use crate::pyramid::LevelShapes;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Row-major `y[t][o] = b[o] + Σᵢ x[t][i]·w[o][i]`.
pub fn linear(x: &[f64], tokens: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; tokens * dout];
    for t in 0..tokens {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[t * din + i] * w[o * din + i];
            }
            y[t * dout + o] = acc;
        }
    }
    y
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

/// Cross-correlation with explicit zero padding.
pub fn conv2d(x: &[f64], weight: &[f64], bias: &[f64], s: ConvShape) -> Vec<f64> {
    let ho = (s.h + 2 * s.pad - s.k) / s.stride + 1;
    let wo = (s.w + 2 * s.pad - s.k) / s.stride + 1;
    let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
    let ph = s.h + 2 * s.pad;
    let pw = s.w + 2 * s.pad;
    let mut padded = vec![0.0; s.cin * ph * pw];
    for c in 0..s.cin {
        for i in 0..s.h {
            for j in 0..s.w {
                padded[(c * ph + i + s.pad) * pw + j + s.pad] = x[(c * s.h + i) * s.w + j];
            }
        }
    }
    let mut y = vec![0.0; s.cout * ho * wo];
    for o in 0..s.cout {
        let g = o / cout_g;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias[o];
                for c in 0..cin_g {
                    for a in 0..s.k {
                        for b in 0..s.k {
                            let xv = padded[((g * cin_g + c) * ph + i * s.stride + a) * pw + j * s.stride + b];
                            acc += xv * weight[((o * cin_g + c) * s.k + a) * s.k + b];
                        }
                    }
                }
                y[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    y
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for e in v.iter_mut() {
        *e = (*e - m).exp();
        z += *e;
    }
    for e in v.iter_mut() {
        *e /= z;
    }
}

pub struct AttnWeights<'a> {
    pub qkv_w: &'a [f64],
    pub qkv_b: &'a [f64],
    pub proj_w: &'a [f64],
    pub proj_b: &'a [f64],
}

/// Dense multi-head self-attention over `x: [t × d]`.
pub fn mhsa(x: &[f64], t: usize, d: usize, heads: usize, p: &AttnWeights<'_>) -> Vec<f64> {
    let qkv = linear(x, t, p.qkv_w, p.qkv_b, d, 3 * d);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let mut row = vec![0.0; t];
            for (j, r) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..dh {
                    s += qkv[i * 3 * d + h * dh + c] * qkv[j * 3 * d + d + h * dh + c];
                }
                *r = s * scale;
            }
            softmax_in_place(&mut row);
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, a) in row.iter().enumerate() {
                    acc += a * qkv[j * 3 * d + 2 * d + h * dh + c];
                }
                merged[i * d + h * dh + c] = acc;
            }
        }
    }
    linear(&merged, t, p.proj_w, p.proj_b, d, d)
}

/// Bilinear sample of channels `c0..c0+n` of a token-major level map
/// (`tokens[(i·w + j)·d + c]`), zero outside the map.
fn sample_level(tokens: &[f64], d: usize, h: usize, w: usize, c0: usize, n: usize, x: f64, y: f64) -> Vec<f64> {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let mut out = vec![0.0; n];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (cx, cy, wt) in corners {
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        let tok = cy as usize * w + cx as usize;
        for (c, o) in out.iter_mut().enumerate() {
            *o += wt * tokens[tok * d + c0 + c];
        }
    }
    out
}

pub struct DeformWeights<'a> {
    pub value: (&'a [f64], &'a [f64]),
    pub offsets: (&'a [f64], &'a [f64]),
    pub weights: (&'a [f64], &'a [f64]),
    pub output: (&'a [f64], &'a [f64]),
}

/// Multi-scale deformable attention, one query / head / level / point at a time.
pub fn deform_attn(
    query: &[f64],
    value: &[f64],
    d: usize,
    shapes: &LevelShapes,
    heads: usize,
    points: usize,
    p: &DeformWeights<'_>,
) -> Vec<f64> {
    let t = shapes.total();
    let samples = heads * LEVELS * points;
    let v = linear(value, t, p.value.0, p.value.1, d, d);
    let off = linear(query, t, p.offsets.0, p.offsets.1, d, 2 * samples);
    let logits = linear(query, t, p.weights.0, p.weights.1, d, samples);
    let starts = shapes.offsets();
    let dh = d / heads;
    let mut merged = vec![0.0; t * d];
    let mut q = 0;
    for &(qh, qw) in &shapes.shapes {
        for qi in 0..qh {
            for qj in 0..qw {
                let rx = (qj as f64 + 0.5) / qw as f64;
                let ry = (qi as f64 + 0.5) / qh as f64;
                for h in 0..heads {
                    let mut a = logits[q * samples + h * LEVELS * points..][..LEVELS * points].to_vec();
                    softmax_in_place(&mut a);
                    for l in 0..LEVELS {
                        let (lh, lw) = shapes.shapes[l];
                        let level = &v[starts[l] * d..(starts[l] + lh * lw) * d];
                        for k in 0..points {
                            let s = (h * LEVELS + l) * points + k;
                            let x = rx * lw as f64 + off[q * 2 * samples + 2 * s] - 0.5;
                            let y = ry * lh as f64 + off[q * 2 * samples + 2 * s + 1] - 0.5;
                            let val = sample_level(level, d, lh, lw, h * dh, dh, x, y);
                            for c in 0..dh {
                                merged[q * d + h * dh + c] += a[l * points + k] * val[c];
                            }
                        }
                    }
                }
                q += 1;
            }
        }
    }
    linear(&merged, t, p.output.0, p.output.1, d, d)
}

pub struct MrfpWeights<'a> {
    pub down: (&'a [f64], &'a [f64]),
    /// `(kernel size, weight, bias)` per channel group.
    pub convs: Vec<(usize, &'a [f64], &'a [f64])>,
    pub up: (&'a [f64], &'a [f64]),
}

/// FC-down, grouped depthwise convs on every level separately, FC-up.
pub fn mrfp(tokens: &[f64], d: usize, reduced: usize, shapes: &LevelShapes, p: &MrfpWeights<'_>) -> Vec<f64> {
    let t = shapes.total();
    let down = linear(tokens, t, p.down.0, p.down.1, d, reduced);
    let per = reduced / p.convs.len();
    let starts = shapes.offsets();
    let mut mixed = vec![0.0; t * reduced];
    for (l, &(h, w)) in shapes.shapes.iter().enumerate() {
        for (g, &(k, wt, b)) in p.convs.iter().enumerate() {
            let mut map = vec![0.0; per * h * w];
            for c in 0..per {
                for i in 0..h {
                    for j in 0..w {
                        map[(c * h + i) * w + j] = down[(starts[l] + i * w + j) * reduced + g * per + c];
                    }
                }
            }
            let shape = ConvShape {
                cin: per,
                cout: per,
                h,
                w,
                k,
                stride: 1,
                pad: k / 2,
                groups: per,
            };
            let y = conv2d(&map, wt, b, shape);
            for c in 0..per {
                for i in 0..h {
                    for j in 0..w {
                        mixed[(starts[l] + i * w + j) * reduced + g * per + c] = y[(c * h + i) * w + j];
                    }
                }
            }
        }
    }
    linear(&mixed, t, p.up.0, p.up.1, reduced, d)
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(dims, std, rng)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Randomizes every tensor in the store.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let dims = store.get(id).dims().to_vec();
        store.set(id, randn(rng, &dims, std)).expect("same dims");
    }
}

/// Tape conv2d vs the loop oracle over random shapes, kernels {1,3,5},
/// strides {1,2} and groups {1, channels}.
pub fn check_conv2d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let cin = rng.random_range(1..=4);
        let depthwise = rng.random_bool(0.5);
        let (groups, cout) = if depthwise {
            (cin, cin)
        } else {
            (1, rng.random_range(1..=4))
        };
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = if rng.random_bool(0.5) { k / 2 } else { 0 };
        let h = rng.random_range(k.max(2)..=7);
        let w = rng.random_range(k.max(2)..=7);
        let shape = ConvShape {
            cin,
            cout,
            h,
            w,
            k,
            stride,
            pad,
            groups,
        };
        let x = randn(&mut rng, &[cin, h, w], 1.0);
        let wt = randn(&mut rng, &[cout, cin / groups, k, k], 1.0);
        let b = randn(&mut rng, &[cout], 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad, groups)?;
        let expect = conv2d(x.data(), wt.data(), b.data(), shape);
        worst = worst.max(max_diff(tape.value(y).data(), &expect));
    }
    Ok(worst)
}

/// Tape MHSA module vs the dense oracle.
pub fn check_mhsa(seed: u64, dim: usize, heads: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in [1, 3, rng.random_range(2..=20)] {
        let mut store = ParamStore::new();
        let attn = Mhsa::new(&mut store, &mut Init::new(seed), "a", dim, heads)?;
        scramble(&mut store, &mut rng, 0.5);
        let x = randn(&mut rng, &[t, dim], 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = attn.forward(&mut tape, &p, xv)?;
        let g = |l: &Linear| (store.get(l.weight).data(), store.get(l.bias).data());
        let ((qw, qb), (pw, pb)) = (g(&attn.qkv), g(&attn.proj));
        let weights = AttnWeights {
            qkv_w: qw,
            qkv_b: qb,
            proj_w: pw,
            proj_b: pb,
        };
        let expect = mhsa(x.data(), t, dim, heads, &weights);
        worst = worst.max(max_diff(tape.value(y).data(), &expect));
    }
    Ok(worst)
}

/// Tape deformable attention vs the loop oracle, with offsets large enough
/// to reach across pixels and outside the maps.
pub fn check_deform(seed: u64, dim: usize, heads: usize, points: usize, img: (usize, usize)) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = LevelShapes::for_image(img.0, img.1)?;
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut Init::new(seed), "a", dim, heads, points)?;
    scramble(&mut store, &mut rng, 0.5);
    let off_w = randn(&mut rng, &[2 * heads * LEVELS * points, dim], 1.5);
    store.set(attn.offsets.weight, off_w)?;
    let q = randn(&mut rng, &[shapes.total(), dim], 1.0);
    let v = randn(&mut rng, &[shapes.total(), dim], 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (qv, vv) = (tape.constant(q.clone()), tape.constant(v.clone()));
    let y = attn.forward(&mut tape, &p, qv, vv, &shapes)?;
    let g = |l: &Linear| (store.get(l.weight).data(), store.get(l.bias).data());
    let weights = DeformWeights {
        value: g(&attn.value),
        offsets: g(&attn.offsets),
        weights: g(&attn.weights),
        output: g(&attn.output),
    };
    let expect = deform_attn(q.data(), v.data(), dim, &shapes, heads, points, &weights);
    Ok(max_diff(tape.value(y).data(), &expect))
}

/// Tape MRFP vs the loop oracle.
pub fn check_mrfp(seed: u64, dim: usize, cfg: &MrfpConfig, img: (usize, usize)) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = LevelShapes::for_image(img.0, img.1)?;
    let mut store = ParamStore::new();
    let m = Mrfp::new(&mut store, &mut Init::new(seed), "m", dim, cfg)?;
    scramble(&mut store, &mut rng, 0.5);
    let x = randn(&mut rng, &[shapes.total(), dim], 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, &p, xv, &shapes)?;
    let g = |l: &Linear| (store.get(l.weight).data(), store.get(l.bias).data());
    let weights = MrfpWeights {
        down: g(&m.fc_down),
        convs: m
            .convs
            .iter()
            .zip(&cfg.kernels)
            .map(|(c, &k)| (k, store.get(c.kernel).data(), store.get(c.bias).data()))
            .collect(),
        up: g(&m.fc_up),
    };
    let expect = mrfp(x.data(), dim, m.reduced, &shapes, &weights);
    Ok(max_diff(tape.value(y).data(), &expect))
}

/// Freshly initialized deformable attention (zero offset and weight
/// projections) with one point per level: every query must read the value
/// at its own reference location on each level, averaged over levels. The
/// expectation is written out with plain bilinear weights.
pub fn check_zero_offset(seed: u64, dim: usize, heads: usize, img: (usize, usize)) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = LevelShapes::for_image(img.0, img.1)?;
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut Init::new(seed), "a", dim, heads, 1)?;
    let q = randn(&mut rng, &[shapes.total(), dim], 1.0);
    let v = randn(&mut rng, &[shapes.total(), dim], 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (qv, vv) = (tape.constant(q.clone()), tape.constant(v.clone()));
    let y = attn.forward(&mut tape, &p, qv, vv, &shapes)?;

    let g = |l: &Linear| (store.get(l.weight).data(), store.get(l.bias).data());
    let t = shapes.total();
    let value = linear(v.data(), t, g(&attn.value).0, g(&attn.value).1, dim, dim);
    let starts = shapes.offsets();
    let mut mean = vec![0.0; t * dim];
    for (qi, &[rx, ry]) in shapes.reference_points().iter().enumerate() {
        for (l, &(h, w)) in shapes.shapes.iter().enumerate() {
            let x = rx * w as f64 - 0.5;
            let y = ry * h as f64 - 0.5;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for (cx, cy, wt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ] {
                if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 || wt == 0.0 {
                    continue;
                }
                let row = starts[l] + cy as usize * w + cx as usize;
                for c in 0..dim {
                    mean[qi * dim + c] += wt * value[row * dim + c] / LEVELS as f64;
                }
            }
        }
    }
    let expect = linear(&mean, t, g(&attn.output).0, g(&attn.output).1, dim, dim);
    Ok(max_diff(tape.value(y).data(), &expect))
}

/// Maximum absolute error of each operator over the fixed small cases and
/// the shapes implied by `cfg`, for one seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleErrors {
    pub deform: f64,
    pub conv2d: f64,
    pub mhsa: f64,
    pub mrfp: f64,
}

impl OracleErrors {
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("deform_attn", self.deform),
            ("conv2d", self.conv2d),
            ("mhsa", self.mhsa),
            ("mrfp", self.mrfp),
        ]
    }

    pub fn max(&self) -> f64 {
        self.entries().iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: &OracleErrors) {
        self.deform = self.deform.max(other.deform);
        self.conv2d = self.conv2d.max(other.conv2d);
        self.mhsa = self.mhsa.max(other.mhsa);
        self.mrfp = self.mrfp.max(other.mrfp);
    }
}

pub fn check_all(cfg: &CoMerConfig, seed: u64) -> Result<OracleErrors> {
    let img = (cfg.vit.img_h, cfg.vit.img_w);
    let small_mrfp = MrfpConfig {
        kernels: vec![3, 5],
        reduce_ratio: 1.0,
    };
    Ok(OracleErrors {
        deform: check_deform(seed, 4, 1, 2, (64, 64))?.max(check_deform(
            seed,
            cfg.dim(),
            cfg.cti.heads,
            cfg.cti.points,
            img,
        )?),
        conv2d: check_conv2d(seed)?,
        mhsa: check_mhsa(seed, 4, 1)?.max(check_mhsa(seed, cfg.dim(), cfg.vit.heads)?),
        mrfp: check_mrfp(seed, 4, &small_mrfp, (32, 32))?.max(check_mrfp(seed, cfg.dim(), &cfg.mrfp, img)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_oracle_delta_kernel() {
        let x: Vec<f64> = (0..25).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let s = ConvShape {
            cin: 1,
            cout: 1,
            h: 5,
            w: 5,
            k: 3,
            stride: 1,
            pad: 1,
            groups: 1,
        };
        assert_eq!(conv2d(&x, &w, &[0.0], s), x);
    }

    #[test]
    fn sample_level_nodes_and_outside() {
        let tokens = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sample_level(&tokens, 1, 2, 2, 0, 1, 1.0, 0.0), vec![2.0]);
        assert_eq!(sample_level(&tokens, 1, 2, 2, 0, 1, 0.5, 0.5), vec![2.5]);
        assert_eq!(sample_level(&tokens, 1, 2, 2, 0, 1, -3.0, 0.0), vec![0.0]);
    }

    #[test]
    fn zero_offset_reads_reference_points() {
        assert!(check_zero_offset(0, 4, 1, (64, 64)).unwrap() < 1e-12);
    }

    #[test]
    fn toy_suite_one_seed() {
        let errs = check_all(&CoMerConfig::toy(), 0).unwrap();
        assert!(errs.max() < 1e-10, "{errs:?}");
    }
}
