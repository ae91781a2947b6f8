//! Training objective: DoG edge loss, global pixel loss, Fourier loss and
//! the mask-weighted Sobel detail loss.
//!
//! Norms are per-element normalized: `‖·‖₂` is the root-mean-square and
//! `‖·‖₁` the mean absolute value.

use std::fmt;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::config::LossWeights;
use crate::error::{ensure, Error, Result};
use crate::graph::{BackCtx, Graph, Pad, Var};
use crate::tensor::Tensor;

/// 1-D Gaussian taps of the DoG extractor.
pub const DOG_KERNEL: [f64; 5] = [0.05, 0.25, 0.4, 0.25, 0.05];
pub const SOBEL_EPS: f64 = 1e-8;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Separable 5×5 Gaussian with reflection borders.
fn gaussian(g: &mut Graph, x: Var) -> Result<Var> {
    let p = g.reflect_pad(x, Pad::uniform(2))?;
    let rows = g.depthwise_fixed(p, &DOG_KERNEL, 1, 5)?;
    g.depthwise_fixed(rows, &DOG_KERNEL, 5, 1)
}

/// `E(x) = x − G(Up(Down(G(x))))`, `Down` keeping the even pixels of the
/// blurred image. Odd dims are reflect-padded to even and cropped back.
pub fn dog(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let pad = Pad {
        bottom: s.h % 2,
        right: s.w % 2,
        ..Pad::default()
    };
    let xp = g.reflect_pad(x, pad)?;
    let blurred = gaussian(g, xp)?;
    let down = g.decimate2(blurred);
    let up = g.upsample2(down);
    let low = gaussian(g, up)?;
    let e = g.sub(xp, low)?;
    g.crop(e, 0, 0, s.h, s.w)
}

pub fn dog_extract(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let e = dog(&mut g, v)?;
    Ok(g.value(e).clone())
}

fn check_scales(g: &Graph, what: &str, a: &[Var], b: &[Var]) -> Result<()> {
    ensure!(
        a.len() == b.len() && !a.is_empty(),
        "{what}: {} scales against {} reference scales",
        a.len(),
        b.len()
    );
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        ensure!(g.shape(x) == g.shape(y), "{what}: scale {i} shapes {} vs {}", g.shape(x), g.shape(y));
    }
    Ok(())
}

/// Σ over scales and over the `out` and `warp` streams of
/// `rms(E(I) − E(I_gt))`.
pub fn edge_loss(g: &mut Graph, outs: &[Var], warps: &[Var], gts: &[Var]) -> Result<Var> {
    check_scales(g, "edge loss", outs, gts)?;
    check_scales(g, "edge loss", warps, gts)?;
    let mut terms = Vec::with_capacity(2 * gts.len());
    for i in 0..gts.len() {
        for stream in [outs[i], warps[i]] {
            // E is linear, so E(a) − E(b) = E(a − b).
            let d = g.sub(stream, gts[i])?;
            let e = dog(g, d)?;
            terms.push(g.rms(e));
        }
    }
    g.add_n(&terms)
}

/// Σ over scales of `rms(I_out − I_gt)`.
pub fn global_loss(g: &mut Graph, outs: &[Var], gts: &[Var]) -> Result<Var> {
    check_scales(g, "global loss", outs, gts)?;
    let mut terms = Vec::with_capacity(gts.len());
    for (&o, &t) in outs.iter().zip(gts) {
        let d = g.sub(o, t)?;
        terms.push(g.rms(d));
    }
    g.add_n(&terms)
}

/// In-place 2-D FFT of a row-major `h×w` buffer.
fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over all coefficients of `|Re| + |Im|` of the per-plane 2-D DFT.
fn fourier_l1(g: &mut Graph, d: Var) -> Var {
    let s = g.shape(d);
    let count = s.numel() as f64;
    let mut planner = FftPlanner::new();
    let mut spectra = Vec::with_capacity(s.b * s.c);
    let mut total = 0.0;
    let dv = g.value(d);
    for b in 0..s.b {
        for c in 0..s.c {
            let mut buf: Vec<Complex64> = dv.plane(b, c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft2(&mut buf, s.h, s.w, false, &mut planner);
            total += buf.iter().map(|z| z.re.abs() + z.im.abs()).sum::<f64>();
            spectra.push(buf);
        }
    }
    g.op(
        Tensor::scalar(total / count),
        &[d],
        Box::new(move |ctx: &BackCtx| {
            // ∂/∂x_n Σ_k |Re F_k| + |Im F_k| = Re Σ_k (sgn Re F_k + i sgn Im F_k) e^{+iθ_kn}.
            let scale = ctx.grad.data()[0] / count;
            let mut planner = FftPlanner::new();
            let mut dx = Tensor::zeros(s);
            for b in 0..s.b {
                for c in 0..s.c {
                    let spec = &spectra[b * s.c + c];
                    let mut buf: Vec<Complex64> = spec.iter().map(|z| Complex64::new(sign(z.re), sign(z.im))).collect();
                    fft2(&mut buf, s.h, s.w, true, &mut planner);
                    for (dst, z) in dx.plane_mut(b, c).iter_mut().zip(&buf) {
                        *dst = z.re * scale;
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Σ over scales of the mean absolute Fourier-coefficient difference.
pub fn frequency_loss(g: &mut Graph, outs: &[Var], gts: &[Var]) -> Result<Var> {
    check_scales(g, "frequency loss", outs, gts)?;
    let mut terms = Vec::with_capacity(gts.len());
    for (&o, &t) in outs.iter().zip(gts) {
        let d = g.sub(o, t)?;
        terms.push(fourier_l1(g, d));
    }
    g.add_n(&terms)
}

/// `√(gx² + gy² + ε)` with 3×3 Sobel kernels and reflection borders.
pub fn sobel_magnitude(g: &mut Graph, x: Var) -> Result<Var> {
    let p = g.reflect_pad(x, Pad::uniform(1))?;
    let gx = g.depthwise_fixed(p, &SOBEL_X, 3, 3)?;
    let gy = g.depthwise_fixed(p, &SOBEL_Y, 3, 3)?;
    let (gx2, gy2) = (g.square(gx), g.square(gy));
    let sum = g.add(gx2, gy2)?;
    let sum = g.add_scalar(sum, SOBEL_EPS);
    Ok(g.sqrt(sum))
}

/// Σ over scales of `mean |∇I_out ⊙ M − ∇I_gt ⊙ M|`, with `M` detached.
pub fn detail_loss(g: &mut Graph, outs: &[Var], gts: &[Var], masks: &[Var]) -> Result<Var> {
    check_scales(g, "detail loss", outs, gts)?;
    ensure!(masks.len() == gts.len(), "detail loss: {} masks for {} scales", masks.len(), gts.len());
    let mut terms = Vec::with_capacity(gts.len());
    for i in 0..gts.len() {
        let (ms, os) = (g.shape(masks[i]), g.shape(outs[i]));
        ensure!(
            ms.c == 1 && ms.b == os.b && ms.h == os.h && ms.w == os.w,
            "detail loss: mask {ms} does not match {os} at scale {i}"
        );
        let m = g.detach(masks[i]);
        let a = sobel_magnitude(g, outs[i])?;
        let b = sobel_magnitude(g, gts[i])?;
        let am = g.mul(a, m)?;
        let bm = g.mul(b, m)?;
        let d = g.sub(am, bm)?;
        let d = g.abs(d);
        terms.push(g.mean(d));
    }
    g.add_n(&terms)
}

/// Scalar values of the four components and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub edge: f64,
    pub global: f64,
    pub frequency: f64,
    pub detail: f64,
}

impl LossValues {
    pub const CSV_HEADER: &'static str = "total,edge,global,frequency,detail";

    pub fn csv_fields(&self) -> String {
        format!("{},{},{},{},{}", self.total, self.edge, self.global, self.frequency, self.detail)
    }

    /// Fails on the first non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("edge", self.edge),
            ("global", self.global),
            ("frequency", self.frequency),
            ("detail", self.detail),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name,
                    value: v,
                    dump: self.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for LossValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} edge={} global={} frequency={} detail={}",
            self.total, self.edge, self.global, self.frequency, self.detail
        )
    }
}

/// Graph handles of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub edge: Var,
    pub global: Var,
    pub frequency: Var,
    pub detail: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).data()[0];
        LossValues {
            total: v(self.total),
            edge: v(self.edge),
            global: v(self.global),
            frequency: v(self.frequency),
            detail: v(self.detail),
        }
    }
}

/// Per-scale planes entering the objective, index 0 finest.
#[derive(Clone, Debug)]
pub struct LossInputs<'a> {
    pub outs: &'a [Var],
    pub warps: &'a [Var],
    pub masks: &'a [Var],
    pub gts: &'a [Var],
}

/// `λ1·L_edge + λ2·L_global + λ3·L_frequency + λ4·L_detail`.
pub fn total_loss(g: &mut Graph, inputs: &LossInputs<'_>, w: &LossWeights) -> Result<LossTerms> {
    let edge = edge_loss(g, inputs.outs, inputs.warps, inputs.gts)?;
    let global = global_loss(g, inputs.outs, inputs.gts)?;
    let frequency = frequency_loss(g, inputs.outs, inputs.gts)?;
    let detail = detail_loss(g, inputs.outs, inputs.gts, inputs.masks)?;
    let weighted = [
        g.mul_scalar(edge, w.edge),
        g.mul_scalar(global, w.global),
        g.mul_scalar(frequency, w.frequency),
        g.mul_scalar(detail, w.detail),
    ];
    let total = g.add_n(&weighted)?;
    let terms = LossTerms {
        total,
        edge,
        global,
        frequency,
        detail,
    };
    terms.values(g).check_finite()?;
    Ok(terms)
}

/// Tensor-level objective, for reporting and oracle comparison.
pub fn loss_values(
    outs: &[Tensor],
    warps: &[Tensor],
    masks: &[Tensor],
    gts: &[Tensor],
    w: &LossWeights,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let mut consts = |ts: &[Tensor]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    let (o, wp, m, t) = (consts(outs), consts(warps), consts(masks), consts(gts));
    let terms = total_loss(
        &mut g,
        &LossInputs {
            outs: &o,
            warps: &wp,
            masks: &m,
            gts: &t,
        },
        w,
    )?;
    Ok(terms.values(&g))
}
