//! 2-D cross-correlation with stride, zero padding and channel groups, plus
//! the 2×2 stride-2 transposed convolution used to build a 1/4 level.

use crate::error::{Error, Result};
use crate::tape::{matmul_nn, matmul_nt, matmul_tn, GradSink, Op, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    /// Input patches of group `g` as a `[cin/g·k·k × ho·wo]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], g: usize) -> Vec<T> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let n = ho * wo;
        let mut cols = vec![T::zero(); self.patch_len() * n];
        for ci in 0..self.in_per_group() {
            let plane = &x[(g * self.in_per_group() + ci) * self.height * self.width..][..self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..][..self.width];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch matrix of group `g` back onto the input grid.
    fn col2im<T: Scalar>(&self, cols: &[T], g: usize, gx: &mut [T]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let n = ho * wo;
        for ci in 0..self.in_per_group() {
            let plane = &mut gx[(g * self.in_per_group() + ci) * self.height * self.width..][..self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..][..self.width];
                        for (ox, &v) in row[oy * wo..][..wo].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
        let plane = self.out_height() * self.out_width();
        let (cout_g, kl) = (self.out_per_group(), self.patch_len());
        let mut out = Vec::with_capacity(self.out_channels * plane);
        for g in 0..self.groups {
            let cols = self.im2col(x, g);
            let wg = &w[g * cout_g * kl..][..cout_g * kl];
            out.extend(matmul_nn(wg, &cols, cout_g, kl, plane));
        }
        if let Some(b) = b {
            for (co, chunk) in out.chunks_exact_mut(plane).enumerate() {
                for v in chunk {
                    *v += b[co];
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        xv: &[T],
        wv: &[T],
        g: &[T],
        sink: &mut GradSink<'_, T>,
    ) {
        let plane = self.out_height() * self.out_width();
        let (cout_g, kl) = (self.out_per_group(), self.patch_len());
        let (want_x, want_w) = (sink.wants(x), sink.wants(w));
        if want_x || want_w {
            let mut gx = want_x.then(|| vec![T::zero(); xv.len()]);
            let mut gw = want_w.then(|| Vec::with_capacity(wv.len()));
            for grp in 0..self.groups {
                let gg = &g[grp * cout_g * plane..][..cout_g * plane];
                if let Some(gw) = gw.as_mut() {
                    let cols = self.im2col(xv, grp);
                    gw.extend(matmul_nt(gg, &cols, cout_g, plane, kl));
                }
                if let Some(gx) = gx.as_mut() {
                    let wg = &wv[grp * cout_g * kl..][..cout_g * kl];
                    let gcols = matmul_tn(wg, gg, cout_g, kl, plane);
                    self.col2im(&gcols, grp, gx);
                }
            }
            if let Some(gx) = gx {
                sink.add(x, gx);
            }
            if let Some(gw) = gw {
                sink.add(w, gw);
            }
        }
        if let Some(b) = b {
            let gb = g.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
            sink.add(b, gb);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl UpConvSpec {
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height, self.width);
        let (ho, wo) = (2 * h, 2 * w);
        for ci in 0..self.in_channels {
            for co in 0..self.out_channels {
                for a in 0..2 {
                    for bb in 0..2 {
                        let wi = ((ci * self.out_channels + co) * 2 + a) * 2 + bb;
                        for i in 0..h {
                            for j in 0..w {
                                let o = (co * ho + 2 * i + a) * wo + 2 * j + bb;
                                f(o, (ci * h + i) * w + j, wi);
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        x: Var,
        w: Var,
        b: Var,
        xv: &[T],
        wv: &[T],
        g: &[T],
        sink: &mut GradSink<'_, T>,
    ) {
        if sink.wants(x) {
            sink.add_with(x, |gx| self.for_each_tap(|o, i, wi| gx[i] += g[o] * wv[wi]));
        }
        if sink.wants(w) {
            sink.add_with(w, |gw| self.for_each_tap(|o, i, wi| gw[wi] += g[o] * xv[i]));
        }
        let plane = 4 * self.height * self.width;
        let gb = g.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
        sink.add(b, gb);
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: [C × H × W]` with `w: [out × C/groups × k × k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 || wd.len() != 4 || wd[2] != wd[3] {
            return Err(Error::invalid(
                "conv2d",
                format!("expected [C,H,W] input and [O,I,k,k] kernel, got {xd:?} and {wd:?}"),
            ));
        }
        let (cin, h, wid) = (xd[0], xd[1], xd[2]);
        let (cout, k) = (wd[0], wd[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || wd[1] * groups != cin {
            return Err(Error::invalid(
                "conv2d",
                format!("{cin} input / {cout} output channels incompatible with {groups} groups and kernel {wd:?}"),
            ));
        }
        if stride == 0 || h + 2 * padding < k || wid + 2 * padding < k {
            return Err(Error::invalid("conv2d", format!("kernel {k} does not fit input {xd:?}")));
        }
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: wid,
            kernel: k,
            stride,
            padding,
            groups,
        };
        let mut parents = vec![x, w];
        let bias = match b {
            Some(b) => {
                self.check(b)?;
                if self.dims(b) != [cout] {
                    return Err(Error::shape("conv2d", &[cout], self.dims(b)));
                }
                parents.push(b);
                Some(self.value(b).data())
            }
            None => None,
        };
        let data = spec.forward(self.value(x).data(), self.value(w).data(), bias);
        let value = Tensor::new(&[cout, spec.out_height(), spec.out_width()], data)?;
        self.push(value, Op::Conv2d { x, w, b, spec }, &parents)
    }

    /// Transposed 2×2 convolution with stride 2: `[C × H × W] → [O × 2H × 2W]`,
    /// kernel layout `[C × O × 2 × 2]`.
    pub fn up_conv2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 || wd.len() != 4 || wd[0] != xd[0] || wd[2] != 2 || wd[3] != 2 {
            return Err(Error::shape("up_conv2x2", &[xd[0], 0, 2, 2], &wd));
        }
        let spec = UpConvSpec {
            in_channels: xd[0],
            out_channels: wd[1],
            height: xd[1],
            width: xd[2],
        };
        if self.dims(b) != [spec.out_channels] {
            return Err(Error::shape("up_conv2x2", &[spec.out_channels], self.dims(b)));
        }
        let plane = 4 * spec.height * spec.width;
        let mut out = vec![T::zero(); spec.out_channels * plane];
        for (co, chunk) in out.chunks_exact_mut(plane).enumerate() {
            chunk.fill(self.value(b).data()[co]);
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        spec.for_each_tap(|o, i, wi| out[o] += xv[i] * wv[wi]);
        let value = Tensor::new(&[spec.out_channels, 2 * spec.height, 2 * spec.width], out)?;
        self.push(value, Op::UpConv2x2 { x, w, b, spec }, &[x, w, b])
    }
}
