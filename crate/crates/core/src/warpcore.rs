//! Differentiable geometric kernels: backward warping, coarse-to-fine field
//! composition, bi-directional blending and the correlation layer.
//!
//! Conventions:
//! - A deformation field is `B×2×h×w`; channel 0 is the horizontal and
//!   channel 1 the vertical displacement, in pixels of its own scale.
//! - `backward_warp(x, φ)(y, x')` samples `x` bilinearly at
//!   `(x' + φ_h, y + φ_v)`. Samples outside the image read zeros.

use crate::error::{ensure, Error, Result};
use crate::graph::{BackCtx, Graph, Var};
use crate::tensor::{Shape, Tensor};

/// Per-pixel displacement field at one pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(Tensor);

impl DeformationField {
    pub fn new(phi: Tensor) -> Result<Self> {
        ensure!(phi.shape().c == 2, "deformation field needs 2 channels, got {}", phi.shape());
        ensure!(phi.is_finite(), "deformation field contains non-finite values");
        Ok(DeformationField(phi))
    }

    /// The same displacement `(dx, dy)` everywhere.
    pub fn constant(b: usize, h: usize, w: usize, dx: f64, dy: f64) -> Self {
        DeformationField(Tensor::from_fn(Shape::new(b, 2, h, w), |_, c, _, _| {
            if c == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Euclidean displacement length per pixel, `B×1×h×w`.
    pub fn magnitude(&self) -> Tensor {
        let s = self.0.shape();
        Tensor::from_fn(s.with_c(1), |b, _, y, x| {
            self.0.at(b, 0, y, x).hypot(self.0.at(b, 1, y, x))
        })
    }
}

/// Misregistration probability map, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MisregMask(Tensor);

impl MisregMask {
    pub fn new(m: Tensor) -> Result<Self> {
        ensure!(m.shape().c == 1, "mask needs 1 channel, got {}", m.shape());
        ensure!(
            m.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "mask values must lie in [0, 1]"
        );
        Ok(MisregMask(m))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Correlation cost volume with `(2p+1)²` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    pub cor: Tensor,
    pub range: usize,
}

impl CorrelationVolume {
    /// Channel holding horizontal shift `m` and vertical shift `n`, both in
    /// `0..=2p`.
    pub fn channel_of(range: usize, m: usize, n: usize) -> usize {
        n * (2 * range + 1) + m
    }
}

#[inline]
fn corner_taps(sx: f64, sy: f64) -> (isize, isize, f64, f64) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    (x0 as isize, y0 as isize, sx - x0, sy - y0)
}

#[inline]
fn fetch(p: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        p[y as usize * w + x as usize]
    }
}

fn warp_forward(x: &Tensor, phi: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for b in 0..s.b {
        let (fh, fv) = (phi.plane(b, 0), phi.plane(b, 1));
        for c in 0..s.c {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for y in 0..s.h {
                for xx in 0..s.w {
                    let i = y * s.w + xx;
                    let (x0, y0, wx, wy) = corner_taps(xx as f64 + fh[i], y as f64 + fv[i]);
                    let v00 = fetch(src, s.h, s.w, y0, x0);
                    let v01 = fetch(src, s.h, s.w, y0, x0 + 1);
                    let v10 = fetch(src, s.h, s.w, y0 + 1, x0);
                    let v11 = fetch(src, s.h, s.w, y0 + 1, x0 + 1);
                    dst[i] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
    }
    out
}

fn warp_backward(x: &Tensor, phi: &Tensor, g: &Tensor, need_x: bool, need_phi: bool) -> (Option<Tensor>, Option<Tensor>) {
    let s = x.shape();
    let mut dx = need_x.then(|| Tensor::zeros(s));
    let mut dphi = need_phi.then(|| Tensor::zeros(phi.shape()));
    for b in 0..s.b {
        let (fh, fv) = (phi.plane(b, 0), phi.plane(b, 1));
        for c in 0..s.c {
            let src = x.plane(b, c);
            let gp = g.plane(b, c);
            for y in 0..s.h {
                for xx in 0..s.w {
                    let i = y * s.w + xx;
                    let gv = gp[i];
                    if gv == 0.0 {
                        continue;
                    }
                    let (x0, y0, wx, wy) = corner_taps(xx as f64 + fh[i], y as f64 + fv[i]);
                    if let Some(dphi) = dphi.as_mut() {
                        let v00 = fetch(src, s.h, s.w, y0, x0);
                        let v01 = fetch(src, s.h, s.w, y0, x0 + 1);
                        let v10 = fetch(src, s.h, s.w, y0 + 1, x0);
                        let v11 = fetch(src, s.h, s.w, y0 + 1, x0 + 1);
                        let dsx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10);
                        let dsy = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01);
                        dphi.plane_mut(b, 0)[i] += gv * dsx;
                        dphi.plane_mut(b, 1)[i] += gv * dsy;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst = dx.plane_mut(b, c);
                        let taps = [
                            (y0, x0, (1.0 - wy) * (1.0 - wx)),
                            (y0, x0 + 1, (1.0 - wy) * wx),
                            (y0 + 1, x0, wy * (1.0 - wx)),
                            (y0 + 1, x0 + 1, wy * wx),
                        ];
                        for (ty, tx, wt) in taps {
                            if ty >= 0 && tx >= 0 && (ty as usize) < s.h && (tx as usize) < s.w {
                                dst[ty as usize * s.w + tx as usize] += wt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dphi)
}

fn check_field(xs: Shape, ps: Shape) -> Result<()> {
    ensure!(ps.c == 2, "deformation field must have 2 channels, got {ps}");
    ensure!(
        xs.b == ps.b && xs.h == ps.h && xs.w == ps.w,
        "plane {xs} and field {ps} disagree in batch or spatial dims"
    );
    Ok(())
}

/// Bilinear backward warp, differentiable in both the plane and the field.
pub fn warp(g: &mut Graph, x: Var, phi: Var) -> Result<Var> {
    check_field(g.shape(x), g.shape(phi))?;
    let out = warp_forward(g.value(x), g.value(phi));
    Ok(g.op(
        out,
        &[x, phi],
        Box::new(|ctx: &BackCtx| {
            let (dx, dphi) = warp_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, ctx.needs[0], ctx.needs[1]);
            vec![dx, dphi]
        }),
    ))
}

/// Tensor-level [`warp`].
pub fn backward_warp(x: &Tensor, phi: &DeformationField) -> Result<Tensor> {
    check_field(x.shape(), phi.tensor().shape())?;
    Ok(warp_forward(x, phi.tensor()))
}

/// How a coarse field refines the next finer one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    /// `φ_i ⊙ (1 + 2·Up(φ_coarse))`.
    #[default]
    Multiplicative,
    /// `φ_i + 2·Up(φ_coarse)` (ablation).
    Additive,
}

/// Coarse-to-fine refinement of `phi_fine` by the next coarser field.
pub fn compose(g: &mut Graph, phi_fine: Var, phi_coarse: Var, mode: Refinement) -> Result<Var> {
    let (fs, cs) = (g.shape(phi_fine), g.shape(phi_coarse));
    ensure!(
        fs.c == 2 && cs.c == 2 && fs.b == cs.b,
        "compose expects two 2-channel fields, got {fs} and {cs}"
    );
    ensure!(
        fs.h == 2 * cs.h && fs.w == 2 * cs.w,
        "fine field {fs} is not exactly twice coarse field {cs}"
    );
    let up = g.upsample2(phi_coarse);
    let up2 = g.mul_scalar(up, 2.0);
    match mode {
        Refinement::Multiplicative => {
            let factor = g.add_scalar(up2, 1.0);
            g.mul(phi_fine, factor)
        }
        Refinement::Additive => g.add(phi_fine, up2),
    }
}

/// Tensor-level multiplicative [`compose`].
pub fn compose_fields(phi_fine: &DeformationField, phi_coarse: &DeformationField) -> Result<DeformationField> {
    let mut g = Graph::new();
    let f = g.constant(phi_fine.tensor().clone());
    let c = g.constant(phi_coarse.tensor().clone());
    let out = compose(&mut g, f, c, Refinement::Multiplicative)?;
    DeformationField::new(g.value(out).clone())
}

/// Refine a coarse-to-fine list of raw fields (index 0 finest). The coarsest
/// field is returned unchanged; every finer one is composed with its already
/// refined coarser neighbour.
pub fn refine_chain(g: &mut Graph, raw: &[Var], mode: Refinement) -> Result<Vec<Var>> {
    ensure!(!raw.is_empty(), "empty field chain");
    let mut refined = raw.to_vec();
    for i in (0..raw.len() - 1).rev() {
        refined[i] = compose(g, raw[i], refined[i + 1], mode)?;
    }
    Ok(refined)
}

/// `m ⊙ BW(x, φ) + (1 − m) ⊙ BW(x, −φ)`.
pub fn blend(g: &mut Graph, x: Var, phi: Var, m: Var) -> Result<Var> {
    let (xs, ms) = (g.shape(x), g.shape(m));
    ensure!(
        ms.c == 1 && ms.b == xs.b && ms.h == xs.h && ms.w == xs.w,
        "mask {ms} does not match plane {xs}"
    );
    ensure!(
        g.value(m).data().iter().all(|v| (0.0..=1.0).contains(v)),
        "mask values must lie in [0, 1]"
    );
    let fwd = warp(g, x, phi)?;
    let neg = g.neg(phi);
    let rev = warp(g, x, neg)?;
    let a = g.mul(m, fwd)?;
    let one_minus = {
        let t = g.neg(m);
        g.add_scalar(t, 1.0)
    };
    let b = g.mul(one_minus, rev)?;
    g.add(a, b)
}

/// Tensor-level [`blend`].
pub fn bidirectional_blend(x: &Tensor, phi: &DeformationField, m: &MisregMask) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, pv, mv) = (
        g.constant(x.clone()),
        g.constant(phi.tensor().clone()),
        g.constant(m.tensor().clone()),
    );
    let out = blend(&mut g, xv, pv, mv)?;
    Ok(g.value(out).clone())
}

fn correlation_forward(fw: &Tensor, fs: &Tensor, p: usize) -> Tensor {
    let s = fw.shape();
    let d = 2 * p + 1;
    let inv = 1.0 / s.c as f64;
    let mut out = Tensor::zeros(Shape::new(s.b, d * d, s.h, s.w));
    for b in 0..s.b {
        for n in 0..d {
            for m in 0..d {
                let k = n * d + m;
                let mut acc = vec![0.0; s.plane()];
                for c in 0..s.c {
                    let wp = fw.plane(b, c);
                    let sp = fs.plane(b, c);
                    for y in 0..s.h {
                        let sy = y as isize + n as isize - p as isize;
                        if sy < 0 || sy >= s.h as isize {
                            continue;
                        }
                        for x in 0..s.w {
                            let sx = x as isize + m as isize - p as isize;
                            if sx < 0 || sx >= s.w as isize {
                                continue;
                            }
                            acc[y * s.w + x] += wp[y * s.w + x] * sp[sy as usize * s.w + sx as usize];
                        }
                    }
                }
                for (o, a) in out.plane_mut(b, k).iter_mut().zip(acc) {
                    *o = a * inv;
                }
            }
        }
    }
    out
}

/// Correlation layer: for each shift `(m, n)` in `0..=2p`, the channel
/// average of `f_warp` times the zero-padded source cropped at `(m, n)`.
/// Output channel `n·(2p+1) + m`.
pub fn correlation(g: &mut Graph, f_warp: Var, f_src: Var, p: usize) -> Result<Var> {
    let (ws, ss) = (g.shape(f_warp), g.shape(f_src));
    ensure!(ws == ss, "correlation inputs differ: {ws} vs {ss}");
    ensure!(p >= 1, "correlation range must be at least 1");
    let out = correlation_forward(g.value(f_warp), g.value(f_src), p);
    Ok(g.op(
        out,
        &[f_warp, f_src],
        Box::new(move |ctx: &BackCtx| {
            let (fw, fs, gr) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let s = fw.shape();
            let d = 2 * p + 1;
            let inv = 1.0 / s.c as f64;
            let mut dw = ctx.needs[0].then(|| Tensor::zeros(s));
            let mut ds = ctx.needs[1].then(|| Tensor::zeros(s));
            for b in 0..s.b {
                for n in 0..d {
                    for m in 0..d {
                        let gp = gr.plane(b, n * d + m);
                        for c in 0..s.c {
                            for y in 0..s.h {
                                let sy = y as isize + n as isize - p as isize;
                                if sy < 0 || sy >= s.h as isize {
                                    continue;
                                }
                                for x in 0..s.w {
                                    let sx = x as isize + m as isize - p as isize;
                                    if sx < 0 || sx >= s.w as isize {
                                        continue;
                                    }
                                    let gi = gp[y * s.w + x] * inv;
                                    let si = sy as usize * s.w + sx as usize;
                                    let wi = y * s.w + x;
                                    if let Some(dw) = dw.as_mut() {
                                        dw.plane_mut(b, c)[wi] += gi * fs.plane(b, c)[si];
                                    }
                                    if let Some(ds) = ds.as_mut() {
                                        ds.plane_mut(b, c)[si] += gi * fw.plane(b, c)[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dw, ds]
        }),
    ))
}

/// Tensor-level [`correlation`].
pub fn correlation_layer(f_warp: &Tensor, f_src: &Tensor, p: usize) -> Result<CorrelationVolume> {
    if f_warp.shape() != f_src.shape() {
        return Err(Error::Contract(format!(
            "correlation inputs differ: {} vs {}",
            f_warp.shape(),
            f_src.shape()
        )));
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(f_warp.clone()), g.constant(f_src.clone()));
    let out = correlation(&mut g, a, b, p)?;
    Ok(CorrelationVolume {
        cor: g.value(out).clone(),
        range: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::reference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(s, |_, _, _, _| rng.gen_range(lo..hi))
    }

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, x| x as f64)
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 8, 8), 0.0, 1.0);
        let out = backward_warp(&x, &DeformationField::constant(2, 8, 8, 0.0, 0.0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn unit_shift_reads_right_neighbour() {
        let x = ramp(8, 8);
        let out = backward_warp(&x, &DeformationField::constant(1, 8, 8, 1.0, 0.0)).unwrap();
        let oracle = reference::bilinear_warp(&x, &DeformationField::constant(1, 8, 8, 1.0, 0.0).into_tensor());
        for y in 0..8 {
            for xx in 0..7 {
                assert!((out.at(0, 0, y, xx) - (xx as f64 + 1.0)).abs() < 1e-12);
            }
        }
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn half_shift_interpolates() {
        let x = ramp(8, 8);
        let out = backward_warp(&x, &DeformationField::constant(1, 8, 8, 0.5, 0.0)).unwrap();
        for y in 0..8 {
            for xx in 0..7 {
                assert!((out.at(0, 0, y, xx) - (xx as f64 + 0.5)).abs() < 1e-12);
            }
        }
        // Last column blends with zero padding.
        assert!((out.at(0, 0, 0, 7) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn compose_examples() {
        let one = DeformationField::constant(1, 8, 8, 1.0, 1.0);
        let zero_c = DeformationField::constant(1, 4, 4, 0.0, 0.0);
        let half_c = DeformationField::constant(1, 4, 4, 0.5, 0.5);
        assert_eq!(compose_fields(&one, &zero_c).unwrap(), one);
        let zero_f = DeformationField::constant(1, 8, 8, 0.0, 0.0);
        assert_eq!(compose_fields(&zero_f, &half_c).unwrap(), zero_f);
        let two = compose_fields(&one, &half_c).unwrap();
        assert!(two.tensor().data().iter().all(|&v| v == 2.0));
        let bad = DeformationField::constant(1, 5, 4, 0.0, 0.0);
        assert!(compose_fields(&one, &bad).is_err());
    }

    #[test]
    fn refine_chain_matches_pairwise_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f0 = rand_tensor(&mut rng, Shape::new(1, 2, 16, 16), -1.0, 1.0);
        let f1 = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0);
        let f2 = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        let mut g = Graph::new();
        let raw: Vec<Var> = [&f0, &f1, &f2].iter().map(|t| g.constant((*t).clone())).collect();
        let chain = refine_chain(&mut g, &raw, Refinement::Multiplicative).unwrap();
        let d = |t: &Tensor| DeformationField::new(t.clone()).unwrap();
        let r1 = compose_fields(&d(&f1), &d(&f2)).unwrap();
        let r0 = compose_fields(&d(&f0), &r1).unwrap();
        assert_eq!(g.value(chain[2]), &f2);
        assert_eq!(g.value(chain[1]), r1.tensor());
        assert_eq!(g.value(chain[0]), r0.tensor());
    }

    #[test]
    fn blend_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
        let phi = DeformationField::new(rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -2.0, 2.0)).unwrap();
        let ones = MisregMask::new(Tensor::full(Shape::new(1, 1, 8, 8), 1.0)).unwrap();
        let zeros = MisregMask::new(Tensor::zeros(Shape::new(1, 1, 8, 8))).unwrap();
        let fwd = backward_warp(&x, &phi).unwrap();
        let rev = backward_warp(&x, &DeformationField::new(phi.tensor().neg()).unwrap()).unwrap();
        assert_eq!(bidirectional_blend(&x, &phi, &ones).unwrap(), fwd);
        assert_eq!(bidirectional_blend(&x, &phi, &zeros).unwrap(), rev);
        let zero_phi = DeformationField::constant(1, 8, 8, 0.0, 0.0);
        let half = MisregMask::new(Tensor::full(Shape::new(1, 1, 8, 8), 0.3)).unwrap();
        assert!(bidirectional_blend(&x, &zero_phi, &half).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn blend_rejects_out_of_range_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let p = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let m = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.5));
        assert!(blend(&mut g, x, p, m).is_err());
        assert!(MisregMask::new(Tensor::full(Shape::new(1, 1, 2, 2), -0.1)).is_err());
    }

    #[test]
    fn correlation_examples() {
        let s = Shape::new(1, 4, 5, 5);
        let zero = correlation_layer(&Tensor::full(s, 0.7), &Tensor::zeros(s), 1).unwrap();
        assert!(zero.cor.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.cor.shape().c, 9);

        let a = 0.6;
        let c = correlation_layer(&Tensor::full(s, a), &Tensor::full(s, a), 1).unwrap();
        let oracle = reference::correlation(&Tensor::full(s, a), &Tensor::full(s, a), 1);
        assert!(c.cor.max_abs_diff(&oracle) < 1e-12);
        let center = CorrelationVolume::channel_of(1, 1, 1);
        assert!(c.cor.plane(0, center).iter().all(|v| (v - a * a).abs() < 1e-12));
        // Shift (m=0, n=0) reads up-left: zero on the first row and column.
        let k00 = CorrelationVolume::channel_of(1, 0, 0);
        assert_eq!(c.cor.at(0, k00, 0, 2), 0.0);
        assert!((c.cor.at(0, k00, 2, 2) - a * a).abs() < 1e-12);

        let mut src = Tensor::zeros(s);
        src.set(0, 2, 2, 2, 1.0);
        let warpf = Tensor::full(s, 1.0);
        let onehot = correlation_layer(&warpf, &src, 1).unwrap();
        for n in 0..3 {
            for m in 0..3 {
                let k = CorrelationVolume::channel_of(1, m, n);
                for y in 0..5 {
                    for x in 0..5 {
                        // The one-hot at (2,2) appears where y+n-1 = 2 and x+m-1 = 2.
                        let want = if y + n == 3 && x + m == 3 { 0.25 } else { 0.0 };
                        assert_eq!(onehot.cor.at(0, k, y, x), want);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_and_correlation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), 0.0, 1.0);
        let phi = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -1.7, 1.7);
        let m = rand_tensor(&mut rng, Shape::new(1, 1, 8, 8), 0.0, 1.0);
        let report = check_gradients(&[x.clone(), phi.clone(), m], 1e-6, |g, v| {
            let out = blend(g, v[0], v[1], v[2])?;
            let out = g.square(out);
            Ok(g.sum(out))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");

        let coarse = rand_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        let report = check_gradients(&[phi, coarse], 1e-6, |g, v| {
            let out = compose(g, v[0], v[1], Refinement::Multiplicative)?;
            let out = g.square(out);
            Ok(g.sum(out))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");

        let a = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0);
        let b = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0);
        let report = check_gradients(&[a, b], 1e-6, |g, v| {
            let out = correlation(g, v[0], v[1], 1)?;
            let out = g.square(out);
            Ok(g.sum(out))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn warp_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(1, 2, 8, 8);
            let x = rand_tensor(&mut rng, s, -1.0, 1.0);
            let y = rand_tensor(&mut rng, s, -1.0, 1.0);
            let phi = DeformationField::new(rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -3.0, 3.0)).unwrap();
            let mut comb = x.scale(a);
            comb.axpy(b, &y);
            let lhs = backward_warp(&comb, &phi).unwrap();
            let mut rhs = backward_warp(&x, &phi).unwrap().scale(a);
            rhs.axpy(b, &backward_warp(&y, &phi).unwrap());
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }

        #[test]
        fn interior_weights_sum_to_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (10, 10);
            // Keep sample points at least one pixel inside the border.
            let phi = Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| {
                let p = if c == 0 { x } else { y } as f64;
                rng.gen_range((1.0 - p)..(h as f64 - 2.0 - p))
            });
            let out = backward_warp(&Tensor::full(Shape::new(1, 1, h, w), 1.0), &DeformationField::new(phi).unwrap()).unwrap();
            prop_assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        }

        #[test]
        fn blend_is_convex(seed in any::<u64>(), mv in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, Shape::new(1, 1, 8, 8), 0.0, 1.0);
            let phi = DeformationField::new(rand_tensor(&mut rng, Shape::new(1, 2, 8, 8), -2.0, 2.0)).unwrap();
            let m = MisregMask::new(Tensor::full(Shape::new(1, 1, 8, 8), mv)).unwrap();
            let out = bidirectional_blend(&x, &phi, &m).unwrap();
            let a = backward_warp(&x, &phi).unwrap();
            let b = backward_warp(&x, &DeformationField::new(phi.tensor().neg()).unwrap()).unwrap();
            for i in 0..out.numel() {
                let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
                prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn correlation_center_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_tensor(&mut rng, Shape::new(1, 3, 6, 6), -1.0, 1.0);
            let h = rand_tensor(&mut rng, Shape::new(1, 3, 6, 6), -1.0, 1.0);
            let k = CorrelationVolume::channel_of(1, 1, 1);
            let a = correlation_layer(&f, &h, 1).unwrap().cor.channels(k, 1).unwrap();
            let b = correlation_layer(&h, &f, 1).unwrap().cor.channels(k, 1).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }
}
