//! Padding, cropping and patch token mixing.

use super::{BackCtx, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Shape, Tensor};

/// Reflection (edge not repeated) of index `i` into `0..n`.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Pad {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pad::default()
    }
}

pub(crate) fn reflect_pad_tensor(x: &Tensor, pad: Pad) -> Tensor {
    let s = x.shape();
    let (ho, wo) = (s.h + pad.top + pad.bottom, s.w + pad.left + pad.right);
    Tensor::from_fn(s.with_hw(ho, wo), |b, c, y, xx| {
        let sy = reflect_index(y as isize - pad.top as isize, s.h);
        let sx = reflect_index(xx as isize - pad.left as isize, s.w);
        x.at(b, c, sy, sx)
    })
}

impl Graph {
    /// Reflection padding. Each pad must be smaller than the padded axis.
    pub fn reflect_pad(&mut self, x: Var, pad: Pad) -> Result<Var> {
        if pad.is_zero() {
            return Ok(x);
        }
        let s = self.shape(x);
        ensure!(
            pad.top.max(pad.bottom) < s.h.max(2) && pad.left.max(pad.right) < s.w.max(2),
            "reflect pad {pad:?} too large for {s}"
        );
        let out = reflect_pad_tensor(self.value(x), pad);
        let os = out.shape();
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
                        for y in 0..os.h {
                            let sy = reflect_index(y as isize - pad.top as isize, s.h);
                            for x in 0..os.w {
                                let sx = reflect_index(x as isize - pad.left as isize, s.w);
                                dst[sy * s.w + sx] += gp[y * os.w + x];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Spatial window `h×w` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if top == 0 && left == 0 && h == s.h && w == s.w {
            return Ok(x);
        }
        let out = self.value(x).window(top, left, h, w)?;
        Ok(self.op(
            out,
            &[x],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                let mut dx = Tensor::zeros(s);
                for b in 0..s.b {
                    for c in 0..s.c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx.set(b, c, top + y, left + xx, g.at(b, c, y, xx));
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Token mixing inside non-overlapping `s×s` patches.
    ///
    /// Within each patch the `s²` pixels are tokens in row-major order. For
    /// every channel, `out[t'] = Σ_t mix[t', t] · u[t] + bias[t']` where
    /// `mix` is `1×1×s²×s²` and `bias` is `1×1×1×s²`. Spatial dims must be
    /// multiples of `s`.
    pub fn patch_token_mix(&mut self, u: Var, mix: Var, bias: Var, s: usize) -> Result<Var> {
        let us = self.shape(u);
        let n = s * s;
        ensure!(s >= 1, "patch size must be positive");
        ensure!(
            us.h % s == 0 && us.w % s == 0,
            "spatial dims {}×{} not divisible by patch {s}",
            us.h,
            us.w
        );
        ensure!(self.shape(mix) == Shape::new(1, 1, n, n), "token mix must be 1×1×{n}×{n}");
        ensure!(self.shape(bias) == Shape::new(1, 1, 1, n), "token bias must be 1×1×1×{n}");
        let (uv, mv, bv) = (self.value(u), self.value(mix).data(), self.value(bias).data());
        let mut out = Tensor::zeros(us);
        let mut tok = vec![0.0; n];
        for b in 0..us.b {
            for c in 0..us.c {
                let src = uv.plane(b, c);
                let dst = out.plane_mut(b, c);
                for py in (0..us.h).step_by(s) {
                    for px in (0..us.w).step_by(s) {
                        for t in 0..n {
                            tok[t] = src[(py + t / s) * us.w + px + t % s];
                        }
                        for to in 0..n {
                            let row = &mv[to * n..(to + 1) * n];
                            let acc: f64 = row.iter().zip(&tok).map(|(a, b)| a * b).sum();
                            dst[(py + to / s) * us.w + px + to % s] = acc + bv[to];
                        }
                    }
                }
            }
        }
        Ok(self.op(
            out,
            &[u, mix, bias],
            Box::new(move |ctx: &BackCtx| {
                let (uv, mv, g) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad);
                let mut du = ctx.needs[0].then(|| Tensor::zeros(us));
                let mut dm = vec![0.0; n * n];
                let mut db = vec![0.0; n];
                let mut tok = vec![0.0; n];
                let mut gt = vec![0.0; n];
                for b in 0..us.b {
                    for c in 0..us.c {
                        let src = uv.plane(b, c);
                        let gp = g.plane(b, c);
                        for py in (0..us.h).step_by(s) {
                            for px in (0..us.w).step_by(s) {
                                for t in 0..n {
                                    let i = (py + t / s) * us.w + px + t % s;
                                    tok[t] = src[i];
                                    gt[t] = gp[i];
                                }
                                for to in 0..n {
                                    db[to] += gt[to];
                                    for ti in 0..n {
                                        dm[to * n + ti] += gt[to] * tok[ti];
                                    }
                                }
                                if let Some(du) = du.as_mut() {
                                    let dst = du.plane_mut(b, c);
                                    for ti in 0..n {
                                        let acc: f64 =
                                            (0..n).map(|to| mv[to * n + ti] * gt[to]).sum();
                                        dst[(py + ti / s) * us.w + px + ti % s] = acc;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    du,
                    ctx.needs[1].then(|| Tensor::from_vec(Shape::new(1, 1, n, n), dm).expect("sized")),
                    ctx.needs[2].then(|| Tensor::from_vec(Shape::new(1, 1, 1, n), db).expect("sized")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn pad_crop_mix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut r = |s| Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let x = r(Shape::new(1, 2, 5, 4));
        let mix = r(Shape::new(1, 1, 9, 9));
        let bias = r(Shape::new(1, 1, 1, 9));
        let report = check_gradients(&[x, mix, bias], 1e-6, |g, v| {
            let p = g.reflect_pad(
                v[0],
                Pad {
                    top: 0,
                    bottom: 1,
                    left: 1,
                    right: 1,
                },
            )?;
            let m = g.patch_token_mix(p, v[1], v[2], 3)?;
            let c = g.crop(m, 0, 1, 5, 4)?;
            let c = g.square(c);
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn identity_mix_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f64);
        let mut eye = Tensor::zeros(Shape::new(1, 1, 4, 4));
        for i in 0..4 {
            eye.set(0, 0, i, i, 1.0);
        }
        let xv = g.constant(x.clone());
        let mv = g.constant(eye);
        let bv = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 4)));
        let y = g.patch_token_mix(xv, mv, bv, 2).unwrap();
        assert_eq!(g.value(y), &x);
    }
}
