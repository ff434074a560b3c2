//! Multi-scale deformable sampling: for every query, head, level and point,
//! bilinearly sample that head's channels of the level's value map at the
//! query's reference point shifted by a learned offset, and blend the samples
//! with the attention weights.

use crate::error::{Error, Result};
use crate::nn::interp::{floor_cell, taps_in};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Clone, Debug)]
pub(crate) struct DeformSpec {
    queries: usize,
    dim: usize,
    heads: usize,
    points: usize,
    /// `(h, w)` per level.
    levels: Vec<(usize, usize)>,
    /// First value row of each level.
    starts: Vec<usize>,
    /// Normalized `(x, y)` reference point per query.
    refs: Vec<[f64; 2]>,
    /// Integer cell pair per sample, overriding `floor` when set.
    pinned: Option<Vec<i64>>,
}

impl DeformSpec {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Visits every sample as `(query, head, level, slot)` where `slot` is
    /// the flat index into the attention-weight row, along with the pixel
    /// location of the sample.
    fn for_each_sample<T: Scalar>(&self, offsets: &[T], mut f: impl FnMut(usize, usize, usize, usize, T, T)) {
        let nl = self.levels.len();
        let per_query = self.heads * nl * self.points;
        let half = lit::<T>(0.5);
        for q in 0..self.queries {
            let [rx, ry] = self.refs[q];
            for h in 0..self.heads {
                for (l, &(lh, lw)) in self.levels.iter().enumerate() {
                    let base_x = lit::<T>(rx * lw as f64);
                    let base_y = lit::<T>(ry * lh as f64);
                    for k in 0..self.points {
                        let slot = (h * nl + l) * self.points + k;
                        let off = (q * per_query + slot) * 2;
                        let px = base_x + offsets[off] - half;
                        let py = base_y + offsets[off + 1] - half;
                        f(q, h, l, slot, px, py);
                    }
                }
            }
        }
    }

    /// Cells actually used by the samples.
    pub(crate) fn cells<T: Scalar>(&self, offsets: &[T], out: &mut Vec<i64>) {
        match &self.pinned {
            Some(c) => out.extend_from_slice(c),
            None => out.extend(self.natural_cells(offsets)),
        }
    }

    fn natural_cells<T: Scalar>(&self, offsets: &[T]) -> Vec<i64> {
        let mut out = Vec::with_capacity(offsets.len());
        self.for_each_sample(offsets, |_, _, _, _, px, py| {
            let (cx, cy) = floor_cell(px, py);
            out.push(cx);
            out.push(cy);
        });
        out
    }

    #[inline]
    fn taps<T: Scalar>(&self, q: usize, slot: usize, l: usize, px: T, py: T) -> crate::nn::interp::Taps<T> {
        let (lh, lw) = self.levels[l];
        let cell = match &self.pinned {
            Some(c) => {
                let n = 2 * (q * self.heads * self.levels.len() * self.points + slot);
                (c[n], c[n + 1])
            }
            None => floor_cell(px, py),
        };
        taps_in(px, py, cell, lh, lw)
    }

    fn forward<T: Scalar>(&self, value: &[T], offsets: &[T], weights: &[T]) -> Vec<T> {
        let (d, dh) = (self.dim, self.head_dim());
        let per_query = self.heads * self.levels.len() * self.points;
        let mut out = vec![T::zero(); self.queries * d];
        self.for_each_sample(offsets, |q, h, l, slot, px, py| {
            let a = weights[q * per_query + slot];
            let t = self.taps(q, slot, l, px, py);
            let dst = &mut out[q * d + h * dh..q * d + (h + 1) * dh];
            for c in 0..4 {
                if !t.valid[c] {
                    continue;
                }
                let row = (self.starts[l] + t.idx[c]) * d + h * dh;
                let w = a * t.w[c];
                for (o, &v) in dst.iter_mut().zip(&value[row..row + dh]) {
                    *o += w * v;
                }
            }
        });
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        value: Var,
        offsets: Var,
        weights: Var,
        vv: &[T],
        ov: &[T],
        wv: &[T],
        g: &[T],
        sink: &mut GradSink<'_, T>,
    ) {
        let (d, dh) = (self.dim, self.head_dim());
        let per_query = self.heads * self.levels.len() * self.points;
        let want_v = sink.wants(value);
        let want_o = sink.wants(offsets);
        let want_w = sink.wants(weights);
        let mut gv = if want_v { vec![T::zero(); vv.len()] } else { Vec::new() };
        let mut go = if want_o { vec![T::zero(); ov.len()] } else { Vec::new() };
        let mut gw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        self.for_each_sample(ov, |q, h, l, slot, px, py| {
            let a = wv[q * per_query + slot];
            let t = self.taps(q, slot, l, px, py);
            let gq = &g[q * d + h * dh..q * d + (h + 1) * dh];
            let (mut s, mut sx, mut sy) = (T::zero(), T::zero(), T::zero());
            for c in 0..4 {
                if !t.valid[c] {
                    continue;
                }
                let row = (self.starts[l] + t.idx[c]) * d + h * dh;
                let vrow = &vv[row..row + dh];
                let dot: T = gq.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                s += t.w[c] * dot;
                sx += t.dwdx[c] * dot;
                sy += t.dwdy[c] * dot;
                if want_v {
                    let w = a * t.w[c];
                    for (acc, &gg) in gv[row..row + dh].iter_mut().zip(gq) {
                        *acc += w * gg;
                    }
                }
            }
            if want_w {
                gw[q * per_query + slot] += s;
            }
            if want_o {
                let off = (q * per_query + slot) * 2;
                go[off] += a * sx;
                go[off + 1] += a * sy;
            }
        });
        if want_v {
            sink.add(value, gv);
        }
        if want_o {
            sink.add(offsets, go);
        }
        if want_w {
            sink.add(weights, gw);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Core of multi-scale deformable attention.
    ///
    /// * `value`: `[Tv × D]`, the levels' tokens concatenated row-major in
    ///   `levels` order.
    /// * `offsets`: `[Tq × heads·L·points·2]`, pixel offsets `(dx, dy)` in
    ///   the sampled level, ordered `(head, level, point, xy)`.
    /// * `weights`: `[Tq × heads·L·points]`, already normalized.
    /// * `refs`: normalized `(x, y)` reference point of each query.
    ///
    /// Returns `[Tq × D]`, head `h` owning channels `h·D/heads ..`.
    #[allow(clippy::too_many_arguments)]
    pub fn ms_deform_sample(
        &mut self,
        value: Var,
        offsets: Var,
        weights: Var,
        levels: &[(usize, usize)],
        refs: &[[f64; 2]],
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        self.check(value)?;
        self.check(offsets)?;
        self.check(weights)?;
        let vd = self.dims(value).to_vec();
        if vd.len() != 2 || heads == 0 || !vd[1].is_multiple_of(heads) {
            return Err(Error::invalid(
                "ms_deform_sample",
                format!("value {vd:?} not divisible into {heads} heads"),
            ));
        }
        let total: usize = levels.iter().map(|(h, w)| h * w).sum();
        if vd[0] != total {
            return Err(Error::shape("ms_deform_sample", &[total, vd[1]], &vd));
        }
        let q = refs.len();
        let per_query = heads * levels.len() * points;
        if self.dims(offsets) != [q, per_query * 2] {
            return Err(Error::shape("ms_deform_sample", &[q, per_query * 2], self.dims(offsets)));
        }
        if self.dims(weights) != [q, per_query] {
            return Err(Error::shape("ms_deform_sample", &[q, per_query], self.dims(weights)));
        }
        let mut starts = Vec::with_capacity(levels.len());
        let mut acc = 0;
        for &(h, w) in levels {
            starts.push(acc);
            acc += h * w;
        }
        let mut spec = DeformSpec {
            queries: q,
            dim: vd[1],
            heads,
            points,
            levels: levels.to_vec(),
            starts,
            refs: refs.to_vec(),
            pinned: None,
        };
        if self.has_pinned() {
            let natural = spec.natural_cells(self.value(offsets).data());
            spec.pinned = self.take_pinned(&natural)?;
        }
        let data = spec.forward(
            self.value(value).data(),
            self.value(offsets).data(),
            self.value(weights).data(),
        );
        let out = Tensor::new(&[q, vd[1]], data)?;
        self.push(
            out,
            Op::Deform {
                value,
                offsets,
                weights,
                spec: Box::new(spec),
            },
            &[value, offsets, weights],
        )
    }
}
