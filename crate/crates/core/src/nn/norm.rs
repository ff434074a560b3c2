use crate::error::{Error, Result};
use crate::tape::{split_at_axis, GradSink, Op, Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};

pub(crate) struct LayerNormSaved<T> {
    width: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: Var,
    gamma: Var,
    beta: Var,
    saved: &LayerNormSaved<T>,
    gamma_v: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let d = saved.width;
    if sink.wants(x) {
        let inv_d = lit::<T>(1.0 / d as f64);
        let mut gx = Vec::with_capacity(g.len());
        for ((grow, xrow), &inv) in g
            .chunks_exact(d)
            .zip(saved.xhat.chunks_exact(d))
            .zip(&saved.inv_std)
        {
            let dxhat: Vec<T> = grow.iter().zip(gamma_v).map(|(&a, &b)| a * b).collect();
            let sum: T = dxhat.iter().copied().sum();
            let dot: T = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
            for (&dh, &xh) in dxhat.iter().zip(xrow) {
                gx.push(inv * (dh - inv_d * sum - xh * inv_d * dot));
            }
        }
        sink.add(x, gx);
    }
    if sink.wants(gamma) {
        let mut gg = vec![T::zero(); d];
        for (grow, xrow) in g.chunks_exact(d).zip(saved.xhat.chunks_exact(d)) {
            for ((acc, &a), &b) in gg.iter_mut().zip(grow).zip(xrow) {
                *acc += a * b;
            }
        }
        sink.add(gamma, gg);
    }
    if sink.wants(beta) {
        let mut gb = vec![T::zero(); d];
        for grow in g.chunks_exact(d) {
            for (acc, &a) in gb.iter_mut().zip(grow) {
                *acc += a;
            }
        }
        sink.add(beta, gb);
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SoftmaxSpec {
    outer: usize,
    len: usize,
    inner: usize,
}

impl SoftmaxSpec {
    pub(crate) fn backward<T: Scalar>(&self, x: Var, y: &[T], g: &[T], sink: &mut GradSink<'_, T>) {
        let (len, inner) = (self.len, self.inner);
        sink.add_with(x, |gx| {
            for o in 0..self.outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
        });
    }
}

impl<T: Scalar> Tape<T> {
    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let dims = self.dims(x).to_vec();
        let d = *dims.last().expect("non-empty dims");
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape("layer_norm", &[d], self.dims(gamma)));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let inv_d = lit::<T>(1.0 / d as f64);
        let eps = lit::<T>(eps);
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for ((&v, &gm), &bt) in row.iter().zip(gv).zip(bv) {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(xh * gm + bt);
            }
        }
        let value = Tensor::new(&dims, out)?;
        let saved = LayerNormSaved {
            width: d,
            xhat,
            inv_std,
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {dims:?}")));
        }
        let (outer, len, inner) = split_at_axis(&dims, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = src[at(0)];
                for a in 1..len {
                    max = max.max(src[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let value = Tensor::new(&dims, out)?;
        let spec = SoftmaxSpec { outer, len, inner };
        self.push(value, Op::Softmax { x, spec }, &[x])
    }
}
