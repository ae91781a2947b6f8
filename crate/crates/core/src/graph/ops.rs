use super::{BackCtx, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Shape, Tensor};

fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for k in 0..4 {
        out[k] = match (da[k], db[k]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(crate::Error::Contract(format!(
                    "shapes {a} and {b} do not broadcast"
                )))
            }
        };
    }
    Ok(Shape::from_dims(out))
}

/// Element strides of `s` viewed inside `out`; broadcast dimensions get 0.
fn strides_in(s: Shape, out: Shape) -> [usize; 4] {
    let d = s.dims();
    let full = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let o = out.dims();
    let mut st = [0; 4];
    for k in 0..4 {
        st[k] = if d[k] == o[k] { full[k] } else { 0 };
    }
    st
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == out && b.shape() == out {
        return a.zip_map(b, f).expect("same shape");
    }
    let sa = strides_in(a.shape(), out);
    let sb = strides_in(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..out.b {
        for c in 0..out.c {
            for y in 0..out.h {
                let ia = n * sa[0] + c * sa[1] + y * sa[2];
                let ib = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out.w {
                    data.push(f(ad[ia + x * sa[3]], bd[ib + x * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data).expect("sized")
}

/// Sum `g` over the dimensions where `target` is broadcast.
pub(crate) fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let out = g.shape();
    let st = strides_in(target, out);
    let mut acc = Tensor::zeros(target);
    let gd = g.data();
    let ad = acc.data_mut();
    let mut i = 0;
    for n in 0..out.b {
        for c in 0..out.c {
            for y in 0..out.h {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..out.w {
                    ad[base + x * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    acc
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)?;
        let value = broadcast_zip(self.value(a), self.value(b), out, |x, y| x + y);
        Ok(self.op(
            value,
            &[a, b],
            Box::new(move |ctx: &BackCtx| {
                vec![
                    ctx.needs[0].then(|| reduce_to(ctx.grad, sa)),
                    ctx.needs[1].then(|| reduce_to(ctx.grad, sb)),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)?;
        let value = broadcast_zip(self.value(a), self.value(b), out, |x, y| x - y);
        Ok(self.op(
            value,
            &[a, b],
            Box::new(move |ctx: &BackCtx| {
                vec![
                    ctx.needs[0].then(|| reduce_to(ctx.grad, sa)),
                    ctx.needs[1].then(|| reduce_to(&ctx.grad.neg(), sb)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)?;
        let value = broadcast_zip(self.value(a), self.value(b), out, |x, y| x * y);
        Ok(self.op(
            value,
            &[a, b],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                let out = g.shape();
                vec![
                    ctx.needs[0].then(|| reduce_to(&broadcast_zip(g, ctx.inputs[1], out, |u, v| u * v), sa)),
                    ctx.needs[1].then(|| reduce_to(&broadcast_zip(g, ctx.inputs[0], out, |u, v| u * v), sb)),
                ]
            }),
        ))
    }

    /// Sum of equally shaped terms.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        ensure!(!terms.is_empty(), "add_n of nothing");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.op(value, &[a], Box::new(|ctx: &BackCtx| vec![Some(ctx.grad.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.op(value, &[a], Box::new(move |ctx: &BackCtx| vec![Some(ctx.grad.scale(k))]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.op(
            value,
            &[a],
            Box::new(move |ctx: &BackCtx| {
                let (x, y, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
                let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::from_vec(ctx.grad.shape(), data).expect("sized"))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x < 0.0 { 0.0 } else { x.sqrt() },
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Sum of all elements as a `1×1×1×1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let value = Tensor::scalar(self.value(a).sum());
        self.op(
            value,
            &[a],
            Box::new(move |ctx: &BackCtx| vec![Some(Tensor::full(s, ctx.grad.data()[0]))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).numel() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Root of the mean of squared elements.
    pub fn rms(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let m = self.mean(sq);
        self.sqrt(m)
    }

    /// Concatenate along the channel dimension.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of nothing");
        let s0 = self.shape(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s.b == s0.b && s.h == s0.h && s.w == s0.w,
                "concat shape mismatch {s} vs {s0}"
            );
            widths.push(s.c);
        }
        let total: usize = widths.iter().sum();
        let out_shape = s0.with_c(total);
        let mut value = Tensor::zeros(out_shape);
        let mut offset = 0;
        for (&p, &cw) in parts.iter().zip(&widths) {
            let src = self.value(p).clone();
            for b in 0..s0.b {
                for c in 0..cw {
                    value.plane_mut(b, offset + c).copy_from_slice(src.plane(b, c));
                }
            }
            offset += cw;
        }
        Ok(self.op(
            value,
            parts,
            Box::new(move |ctx: &BackCtx| {
                let mut out = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (k, &cw) in widths.iter().enumerate() {
                    out.push(ctx.needs[k].then(|| ctx.grad.channels(offset, cw).expect("in range")));
                    offset += cw;
                }
                out
            }),
        ))
    }

    /// Spatial mean per channel: `B×C×1×1`.
    pub fn mean_hw(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let x = self.value(a);
        let n = s.plane() as f64;
        let mut value = Tensor::zeros(s.with_hw(1, 1));
        for b in 0..s.b {
            for c in 0..s.c {
                value.set(b, c, 0, 0, x.plane(b, c).iter().sum::<f64>() / n);
            }
        }
        self.op(
            value,
            &[a],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                vec![Some(Tensor::from_fn(s, |b, c, _, _| g.at(b, c, 0, 0) / n))]
            }),
        )
    }

    /// Mean over channels: `B×1×H×W`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let x = self.value(a);
        let inv = 1.0 / s.c as f64;
        let value = Tensor::from_fn(s.with_c(1), |b, _, y, xx| {
            (0..s.c).map(|c| x.at(b, c, y, xx)).sum::<f64>() * inv
        });
        self.op(
            value,
            &[a],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                vec![Some(Tensor::from_fn(s, |b, _, y, x| g.at(b, 0, y, x) * inv))]
            }),
        )
    }

    /// Max over channels: `B×1×H×W`. Ties route the gradient to the first maximum.
    pub fn channel_max(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let x = self.value(a);
        let mut argmax = vec![0usize; s.b * s.plane()];
        let mut value = Tensor::zeros(s.with_c(1));
        for b in 0..s.b {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut best = 0;
                    let mut bv = x.at(b, 0, y, xx);
                    for c in 1..s.c {
                        let v = x.at(b, c, y, xx);
                        if v > bv {
                            bv = v;
                            best = c;
                        }
                    }
                    argmax[(b * s.h + y) * s.w + xx] = best;
                    value.set(b, 0, y, xx, bv);
                }
            }
        }
        self.op(
            value,
            &[a],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad;
                let mut out = Tensor::zeros(s);
                for b in 0..s.b {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            let c = argmax[(b * s.h + y) * s.w + x];
                            out.set(b, c, y, x, g.at(b, 0, y, x));
                        }
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Softmax over all elements of a `1×1×1×K` vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        ensure!(s.b == 1 && s.c == 1 && s.h == 1, "softmax expects 1×1×1×K, got {s}");
        let x = self.value(a).data();
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let value = Tensor::from_vec(s, e.iter().map(|v| v / z).collect())?;
        Ok(self.op(
            value,
            &[a],
            Box::new(|ctx: &BackCtx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let data = y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect();
                vec![Some(Tensor::from_vec(ctx.output.shape(), data).expect("sized"))]
            }),
        ))
    }

    /// Element `k` of a `1×1×1×K` vector as a scalar.
    pub fn select(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a);
        ensure!(s.b == 1 && s.c == 1 && s.h == 1 && k < s.w, "select {k} from {s}");
        let value = Tensor::scalar(self.value(a).data()[k]);
        Ok(self.op(
            value,
            &[a],
            Box::new(move |ctx: &BackCtx| {
                let mut g = Tensor::zeros(s);
                g.data_mut()[k] = ctx.grad.data()[0];
                vec![Some(g)]
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

    fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
        Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn broadcast_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, Shape::new(2, 3, 4, 5));
        let m = rand_tensor(&mut rng, Shape::new(2, 1, 4, 5));
        let w = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1));
        let report = check_gradients(&[a, m, w], 1e-6, |g, v| {
            let t = g.mul(v[0], v[1])?;
            let t = g.mul(t, v[2])?;
            let t = g.sub(t, v[1])?;
            let t = g.square(t);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn unary_and_reductions_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, Shape::new(1, 4, 3, 3));
        let logits = rand_tensor(&mut rng, Shape::new(1, 1, 1, 3));
        let report = check_gradients(&[a, logits], 1e-6, |g, v| {
            let s = g.sigmoid(v[0]);
            let r = g.relu(v[0]);
            let mx = g.channel_max(v[0]);
            let mn = g.channel_mean(s);
            let hw = g.mean_hw(r);
            let sm = g.softmax(v[1])?;
            let w1 = g.select(sm, 1)?;
            let cat = g.concat_channels(&[mx, mn])?;
            let t1 = g.mul(cat, w1)?;
            let t2 = g.abs(t1);
            let a = g.rms(t2);
            let b = g.sum(hw);
            let ab = g.add(a, b)?;
            Ok(ab)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        let s = g.softmax(l).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        assert!(g.add(a, b).is_err());
    }
}
