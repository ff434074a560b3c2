//! Bilinear interpolation: grid resizing (align-corners-false, clamped at the
//! border) and point sampling (zero outside the map).

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};

/// One output row/column of a resize: two source indices and the weight of
/// the second.
#[derive(Clone, Copy, Debug)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            AxisTap { lo, hi, frac: s - lo as f64 }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct ResizeSpec {
    channels: usize,
    in_h: usize,
    in_w: usize,
    rows: Vec<AxisTap>,
    cols: Vec<AxisTap>,
}

impl ResizeSpec {
    fn new(channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizeSpec {
            channels,
            in_h,
            in_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }

    /// `f(out_index, in_index, weight)` for the four taps of every output.
    fn for_each_tap<T: Scalar>(&self, mut f: impl FnMut(usize, usize, T)) {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let cols: Vec<(usize, usize, T, T)> = self
            .cols
            .iter()
            .map(|c| (c.lo, c.hi, lit::<T>(1.0 - c.frac), lit::<T>(c.frac)))
            .collect();
        for ch in 0..self.channels {
            let src = ch * self.in_h * self.in_w;
            for (oy, r) in self.rows.iter().enumerate() {
                let (wy0, wy1) = (lit::<T>(1.0 - r.frac), lit::<T>(r.frac));
                for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                    let o = (ch * oh + oy) * ow + ox;
                    f(o, src + r.lo * self.in_w + x0, wy0 * wx0);
                    f(o, src + r.lo * self.in_w + x1, wy0 * wx1);
                    f(o, src + r.hi * self.in_w + x0, wy1 * wx0);
                    f(o, src + r.hi * self.in_w + x1, wy1 * wx1);
                }
            }
        }
    }

    pub(crate) fn backward<T: Scalar>(&self, x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        sink.add_with(x, |gx| self.for_each_tap(|o, i, w: T| gx[i] += g[o] * w));
    }
}

/// The four neighbours of a fractional point, with their bilinear weights and
/// the weights' derivatives along x and y. Neighbours outside the map are
/// marked invalid and contribute zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    pub idx: [usize; 4],
    pub valid: [bool; 4],
    pub w: [T; 4],
    pub dwdx: [T; 4],
    pub dwdy: [T; 4],
}

#[inline]
pub(crate) fn floor_cell<T: Scalar>(px: T, py: T) -> (i64, i64) {
    (px.floor().to_f64() as i64, py.floor().to_f64() as i64)
}

/// Taps for `(px, py)` in pixel coordinates of an `h × w` map (the pixel at
/// column `j`, row `i` sits at `(j, i)`), using the bilinear piece of cell
/// `(x0, y0)`. Normally that is the cell containing the point; otherwise the
/// piece is extended polynomially.
#[inline]
pub(crate) fn taps_in<T: Scalar>(px: T, py: T, (x0i, y0i): (i64, i64), h: usize, w: usize) -> Taps<T> {
    let fx = px - lit::<T>(x0i as f64);
    let fy = py - lit::<T>(y0i as f64);
    let one = T::one();
    let mut idx = [0usize; 4];
    let mut valid = [false; 4];
    for (c, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let (cx, cy) = (x0i + dx, y0i + dy);
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            valid[c] = true;
            idx[c] = cy as usize * w + cx as usize;
        }
    }
    Taps {
        idx,
        valid,
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        dwdx: [-(one - fy), one - fy, -fy, fy],
        dwdy: [-(one - fx), -fx, one - fx, fx],
    }
}

pub(crate) fn sample_backward<T: Scalar>(
    x: Var,
    points: Var,
    xv: &Tensor<T>,
    pv: &[T],
    cells: Option<&[i64]>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (c, h, w) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
    let plane = h * w;
    let tap = |p: usize| {
        let cell = match cells {
            Some(c) => (c[2 * p], c[2 * p + 1]),
            None => floor_cell(pv[2 * p], pv[2 * p + 1]),
        };
        taps_in(pv[2 * p], pv[2 * p + 1], cell, h, w)
    };
    let data = xv.data();
    let np = pv.len() / 2;
    if sink.wants(x) {
        sink.add_with(x, |gx| {
            for p in 0..np {
                let t = tap(p);
                for k in 0..4 {
                    if !t.valid[k] {
                        continue;
                    }
                    for ch in 0..c {
                        gx[ch * plane + t.idx[k]] += g[p * c + ch] * t.w[k];
                    }
                }
            }
        });
    }
    if sink.wants(points) {
        let mut gp = vec![T::zero(); pv.len()];
        for p in 0..np {
            let t = tap(p);
            for k in 0..4 {
                if !t.valid[k] {
                    continue;
                }
                for ch in 0..c {
                    let gv = g[p * c + ch] * data[ch * plane + t.idx[k]];
                    gp[2 * p] += gv * t.dwdx[k];
                    gp[2 * p + 1] += gv * t.dwdy[k];
                }
            }
        }
        sink.add(points, gp);
    }
}

impl<T: Scalar> Tape<T> {
    /// Bilinear resize of `x: [C × H × W]` to `[C × out_h × out_w]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x).to_vec();
        if d.len() != 3 {
            return Err(Error::invalid("bilinear_resize", format!("expected [C,H,W], got {d:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output size must be positive"));
        }
        let spec = ResizeSpec::new(d[0], d[1], d[2], out_h, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); d[0] * out_h * out_w];
        spec.for_each_tap(|o, i, w: T| out[o] += src[i] * w);
        let value = Tensor::new(&[d[0], out_h, out_w], out)?;
        self.push(value, Op::Resize { x, spec }, &[x])
    }

    /// Samples `x: [C × H × W]` at `points: [P × 2]` (pixel `(x, y)` pairs),
    /// giving `[P × C]`. Differentiable in both the map and the points.
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        self.check(x)?;
        self.check(points)?;
        let d = self.dims(x).to_vec();
        let pd = self.dims(points).to_vec();
        if d.len() != 3 || pd.len() != 2 || pd[1] != 2 {
            return Err(Error::invalid(
                "bilinear_sample",
                format!("expected [C,H,W] map and [P,2] points, got {d:?} and {pd:?}"),
            ));
        }
        let (c, h, w) = (d[0], d[1], d[2]);
        let natural: Vec<i64> = self
            .value(points)
            .data()
            .chunks(2)
            .flat_map(|p| {
                let (cx, cy) = floor_cell(p[0], p[1]);
                [cx, cy]
            })
            .collect();
        let cells = self.take_pinned(&natural)?;
        let used = cells.as_deref().unwrap_or(&natural);
        let src = self.value(x).data();
        let pv = self.value(points).data();
        let mut out = vec![T::zero(); pd[0] * c];
        for p in 0..pd[0] {
            let t = taps_in(pv[2 * p], pv[2 * p + 1], (used[2 * p], used[2 * p + 1]), h, w);
            for k in 0..4 {
                if !t.valid[k] {
                    continue;
                }
                for ch in 0..c {
                    out[p * c + ch] += t.w[k] * src[ch * h * w + t.idx[k]];
                }
            }
        }
        let value = Tensor::new(&[pd[0], c], out)?;
        self.push(value, Op::Sample { x, points, cells }, &[x, points])
    }
}
