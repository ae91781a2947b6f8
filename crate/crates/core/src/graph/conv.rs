//! Convolution and fixed resampling operators.

use super::{BackCtx, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Shape, Tensor};

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths are checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `weight` is `Cout×Cin×k×k`; `bias`, when given, is `1×Cout×1×1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        ensure!(ws.h == ws.w, "conv kernel must be square, got {ws}");
        ensure!(ws.c == xs.c, "conv expects {} input channels, got {}", ws.c, xs.c);
        ensure!(stride >= 1, "conv stride must be positive");
        ensure!(
            xs.h + 2 * pad >= ws.h && xs.w + 2 * pad >= ws.w,
            "conv kernel {} larger than padded input {xs}",
            ws.h
        );
        if let Some(b) = bias {
            ensure!(
                self.shape(b) == Shape::new(1, ws.b, 1, 1),
                "conv bias shape {} != 1×{}×1×1",
                self.shape(b),
                ws.b
            );
        }
        let geom = ConvGeom {
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            k: ws.h,
            stride,
            pad,
            ho: conv2d_output_size(xs.h, ws.h, stride, pad),
            wo: conv2d_output_size(xs.w, ws.h, stride, pad),
        };
        let cout = ws.b;
        let out_shape = Shape::new(xs.b, cout, geom.ho, geom.wo);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let wv = self.value(weight).data();
            let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { geom.rows() * geom.cols() }];
            let item_out = cout * geom.cols();
            for b in 0..xs.b {
                let col_ref: &[f64] = if geom.is_pointwise() {
                    xv.item(b)
                } else {
                    im2col(xv.item(b), &geom, &mut cols);
                    &cols
                };
                let dst = &mut out.data_mut()[b * item_out..(b + 1) * item_out];
                gemm(cout, geom.rows(), geom.cols(), wv, false, col_ref, false, 0.0, dst);
            }
            if let Some(bias) = bias {
                let bv = self.value(bias).data().to_vec();
                for b in 0..xs.b {
                    for (c, &bc) in bv.iter().enumerate() {
                        out.plane_mut(b, c).iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        let parents: Vec<Var> = match bias {
            Some(b) => vec![x, weight, b],
            None => vec![x, weight],
        };
        Ok(self.op(
            out,
            &parents,
            Box::new(move |ctx: &BackCtx| {
                let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad);
                let need_x = ctx.needs[0];
                let need_w = ctx.needs[1];
                let mut dx = need_x.then(|| Tensor::zeros(xs));
                let mut dw = need_w.then(|| Tensor::zeros(ws));
                let rows = geom.rows();
                let ncols = geom.cols();
                let mut cols = vec![0.0; rows * ncols];
                for b in 0..xs.b {
                    let gy = g.item(b);
                    if let Some(dw) = dw.as_mut() {
                        let col_ref: &[f64] = if geom.is_pointwise() {
                            xv.item(b)
                        } else {
                            im2col(xv.item(b), &geom, &mut cols);
                            &cols
                        };
                        gemm(cout, ncols, rows, gy, false, col_ref, true, 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        let n = xs.c * xs.plane();
                        let dst = &mut dx.data_mut()[b * n..(b + 1) * n];
                        if geom.is_pointwise() {
                            gemm(rows, cout, ncols, wv, true, gy, false, 0.0, dst);
                        } else {
                            gemm(rows, cout, ncols, wv, true, gy, false, 0.0, &mut cols);
                            col2im(&cols, &geom, dst);
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut db = Tensor::zeros(Shape::new(1, cout, 1, 1));
                        for b in 0..xs.b {
                            for c in 0..cout {
                                db.data_mut()[c] += g.plane(b, c).iter().sum::<f64>();
                            }
                        }
                        db
                    }));
                }
                grads
            }),
        ))
    }

    /// Per-channel "valid" correlation with a fixed `kh×kw` kernel.
    pub fn depthwise_fixed(&mut self, x: Var, kernel: &[f64], kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(x);
        ensure!(kernel.len() == kh * kw, "kernel buffer does not match {kh}×{kw}");
        ensure!(s.h >= kh && s.w >= kw, "input {s} smaller than kernel {kh}×{kw}");
        let (ho, wo) = (s.h - kh + 1, s.w - kw + 1);
        let out_shape = s.with_hw(ho, wo);
        let xv = self.value(x);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..s.b {
            for c in 0..s.c {
                let src = xv.plane(b, c);
                let dst = out.plane_mut(b, c);
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let row = &src[(y + ky) * s.w + xx..(y + ky) * s.w + xx + kw];
                            for kx in 0..kw {
                                acc += kernel[ky * kw + kx] * row[kx];
                            }
                        }
                        dst[y * wo + xx] = acc;
                    }
                }
            }
        }
        let kernel = kernel.to_vec();
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                let mut dx = Tensor::zeros(s);
                for b in 0..s.b {
                    for c in 0..s.c {
                        let gp = g.plane(b, c);
                        let dst = dx.plane_mut(b, c);
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = gp[y * wo + xx];
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        dst[(y + ky) * s.w + xx + kx] += kernel[ky * kw + kx] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Factor-2 bilinear reduction (half-pixel centres), i.e. the mean of each
    /// 2×2 block.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        ensure!(s.h % 2 == 0 && s.w % 2 == 0, "downsample2 needs even dims, got {s}");
        let out = downsample2_tensor(self.value(x));
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                vec![Some(Tensor::from_fn(s, |b, c, y, x| 0.25 * g.at(b, c, y / 2, x / 2)))]
            }),
        ))
    }

    /// Keep every second row and column, starting at 0.
    pub fn decimate2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (ho, wo) = (s.h.div_ceil(2), s.w.div_ceil(2));
        let xv = self.value(x);
        let out = Tensor::from_fn(s.with_hw(ho, wo), |b, c, y, xx| xv.at(b, c, 2 * y, 2 * xx));
        self.op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                let mut dx = Tensor::zeros(s);
                for b in 0..s.b {
                    for c in 0..s.c {
                        for y in 0..ho {
                            for x in 0..wo {
                                dx.set(b, c, 2 * y, 2 * x, g.at(b, c, y, x));
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Bilinear ×2 upsampling without corner alignment.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = upsample2_tensor(self.value(x));
        self.op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx| vec![Some(upsample2_adjoint(ctx.grad, s))]),
        )
    }
}

pub(crate) fn downsample2_tensor(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s.with_hw(s.h / 2, s.w / 2), |b, c, y, xx| {
        0.25 * (x.at(b, c, 2 * y, 2 * xx)
            + x.at(b, c, 2 * y, 2 * xx + 1)
            + x.at(b, c, 2 * y + 1, 2 * xx)
            + x.at(b, c, 2 * y + 1, 2 * xx + 1))
    })
}

/// Source taps and weights for output index `o` of a ×2 half-pixel upsample
/// of a length-`n` axis.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let l = src - i0 as f64;
    (i0, i1, l)
}

pub(crate) fn upsample2_tensor(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let ys: Vec<_> = (0..ho).map(|o| up_taps(o, s.h)).collect();
    let xs: Vec<_> = (0..wo).map(|o| up_taps(o, s.w)).collect();
    Tensor::from_fn(s.with_hw(ho, wo), |b, c, y, xx| {
        let (y0, y1, ly) = ys[y];
        let (x0, x1, lx) = xs[xx];
        let p = x.plane(b, c);
        (1.0 - ly) * ((1.0 - lx) * p[y0 * s.w + x0] + lx * p[y0 * s.w + x1])
            + ly * ((1.0 - lx) * p[y1 * s.w + x0] + lx * p[y1 * s.w + x1])
    })
}

fn upsample2_adjoint(g: &Tensor, s: Shape) -> Tensor {
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let ys: Vec<_> = (0..ho).map(|o| up_taps(o, s.h)).collect();
    let xs: Vec<_> = (0..wo).map(|o| up_taps(o, s.w)).collect();
    let mut dx = Tensor::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            let gp = g.plane(b, c);
            let dst = dx.plane_mut(b, c);
            for y in 0..ho {
                let (y0, y1, ly) = ys[y];
                for x in 0..wo {
                    let (x0, x1, lx) = xs[x];
                    let gv = gp[y * wo + x];
                    dst[y0 * s.w + x0] += (1.0 - ly) * (1.0 - lx) * gv;
                    dst[y0 * s.w + x1] += (1.0 - ly) * lx * gv;
                    dst[y1 * s.w + x0] += ly * (1.0 - lx) * gv;
                    dst[y1 * s.w + x1] += ly * lx * gv;
                }
            }
        }
    }
    dx
}
