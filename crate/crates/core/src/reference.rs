//! Slow, literal reference implementations used as oracles by the test
//! suites and by `selftest`. Each follows the defining formula directly and
//! shares no code with the optimized kernels.

use crate::tensor::{Shape, Tensor};

/// Bilinear backward warp via the tent-kernel sum over every source pixel:
/// `out(y,x) = Σ_{v,u} in(v,u)·max(0,1−|x+φh−u|)·max(0,1−|y+φv−v|)`.
pub fn bilinear_warp(x: &Tensor, phi: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s, |b, c, y, xx| {
        let sx = xx as f64 + phi.at(b, 0, y, xx);
        let sy = y as f64 + phi.at(b, 1, y, xx);
        let mut acc = 0.0;
        for v in 0..s.h {
            let wy = (1.0 - (sy - v as f64).abs()).max(0.0);
            if wy == 0.0 {
                continue;
            }
            for u in 0..s.w {
                let wx = (1.0 - (sx - u as f64).abs()).max(0.0);
                acc += x.at(b, c, v, u) * wx * wy;
            }
        }
        acc
    })
}

/// Correlation volume from an explicitly zero-padded source.
pub fn correlation(f_warp: &Tensor, f_src: &Tensor, p: usize) -> Tensor {
    let s = f_src.shape();
    let (ph, pw) = (s.h + 2 * p, s.w + 2 * p);
    let mut padded = vec![0.0; s.b * s.c * ph * pw];
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    padded[((b * s.c + c) * ph + y + p) * pw + x + p] = f_src.at(b, c, y, x);
                }
            }
        }
    }
    let d = 2 * p + 1;
    Tensor::from_fn(Shape::new(s.b, d * d, s.h, s.w), |b, k, y, x| {
        let (n, m) = (k / d, k % d);
        let mut acc = 0.0;
        for c in 0..s.c {
            acc += padded[((b * s.c + c) * ph + y + n) * pw + x + m] * f_warp.at(b, c, y, x);
        }
        acc / s.c as f64
    })
}

/// Direct `O(n²)` 2-D DFT of one `h×w` plane, returning `(re, im)`.
pub fn dft2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for ky in 0..h {
        for kx in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let theta = -2.0
                        * std::f64::consts::PI
                        * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                    sr += plane[y * w + x] * theta.cos();
                    si += plane[y * w + x] * theta.sin();
                }
            }
            re[ky * w + kx] = sr;
            im[ky * w + kx] = si;
        }
    }
    (re, im)
}

/// Frequency distance: mean over coefficients of `|Δre| + |Δim|`.
pub fn frequency_distance(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let mut total = 0.0;
    for n in 0..s.b {
        for c in 0..s.c {
            let diff: Vec<f64> = a.plane(n, c).iter().zip(b.plane(n, c)).map(|(x, y)| x - y).collect();
            let (re, im) = dft2(&diff, s.h, s.w);
            total += re.iter().zip(&im).map(|(r, i)| r.abs() + i.abs()).sum::<f64>();
        }
    }
    total / s.numel() as f64
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// 5×5 Gaussian blur with reflection boundaries, built from the 2-D kernel
/// `kᵀk` directly.
pub fn gaussian_blur(x: &Tensor) -> Tensor {
    let k = [0.05, 0.25, 0.4, 0.25, 0.05];
    let s = x.shape();
    Tensor::from_fn(s, |b, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..5 {
            for dx in 0..5 {
                let sy = reflect(y as isize + dy as isize - 2, s.h);
                let sx = reflect(xx as isize + dx as isize - 2, s.w);
                acc += k[dy] * k[dx] * x.at(b, c, sy, sx);
            }
        }
        acc
    })
}

/// Half-pixel bilinear ×2 upsample written as explicit source coordinates.
pub fn upsample2(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.b, s.c, 2 * s.h, 2 * s.w), |b, c, y, xx| {
        let fy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (s.h - 1) as f64);
        let fx = ((xx as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (s.w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (ly, lx) = (fy - y0 as f64, fx - x0 as f64);
        x.at(b, c, y0, x0) * (1.0 - ly) * (1.0 - lx)
            + x.at(b, c, y0, x1) * (1.0 - ly) * lx
            + x.at(b, c, y1, x0) * ly * (1.0 - lx)
            + x.at(b, c, y1, x1) * ly * lx
    })
}

/// `x − G(Up(Down(G(x))))` where `Down` keeps the even pixels of the
/// already blurred `G(x)`. Even spatial dims only.
pub fn dog(x: &Tensor) -> Tensor {
    let s = x.shape();
    if s.h % 2 == 1 || s.w % 2 == 1 {
        // Mirror one extra row/column, then cut back.
        let (h, w) = (s.h + s.h % 2, s.w + s.w % 2);
        let padded = Tensor::from_fn(Shape::new(s.b, s.c, h, w), |b, c, y, xx| {
            x.at(b, c, reflect(y as isize, s.h), reflect(xx as isize, s.w))
        });
        let e = dog(&padded);
        return Tensor::from_fn(s, |b, c, y, xx| e.at(b, c, y, xx));
    }
    let blurred = gaussian_blur(x);
    let down = Tensor::from_fn(Shape::new(s.b, s.c, s.h / 2, s.w / 2), |b, c, y, xx| {
        blurred.at(b, c, 2 * y, 2 * xx)
    });
    let up = upsample2(&down);
    let reblur = gaussian_blur(&up);
    Tensor::from_fn(s, |b, c, y, xx| x.at(b, c, y, xx) - reblur.at(b, c, y, xx))
}

pub fn rms(a: &Tensor, b: &Tensor) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    (acc / a.numel() as f64).sqrt()
}

/// Sobel gradient magnitude `√(gx² + gy² + ε)` with reflection boundaries.
pub fn sobel_magnitude(x: &Tensor, eps: f64) -> Tensor {
    let s = x.shape();
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    Tensor::from_fn(s, |b, c, y, xx| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for dy in 0..3 {
            for dx in 0..3 {
                let v = x.at(
                    b,
                    c,
                    reflect(y as isize + dy as isize - 1, s.h),
                    reflect(xx as isize + dx as isize - 1, s.w),
                );
                gx += kx[dy][dx] * v;
                gy += ky[dy][dx] * v;
            }
        }
        (gx * gx + gy * gy + eps).sqrt()
    })
}

/// Mean of `|(∇a − ∇b)·m|` with the mask broadcast over channels.
pub fn masked_sobel_distance(a: &Tensor, b: &Tensor, m: &Tensor, eps: f64) -> f64 {
    let (ga, gb) = (sobel_magnitude(a, eps), sobel_magnitude(b, eps));
    let s = a.shape();
    let mut acc = 0.0;
    for n in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mv = m.at(n, 0, y, x);
                    acc += (ga.at(n, c, y, x) * mv - gb.at(n, c, y, x) * mv).abs();
                }
            }
        }
    }
    acc / s.numel() as f64
}

/// Shannon entropy (bits) over 256 levels of a single-channel image.
pub fn entropy(img: &[f64]) -> f64 {
    let mut counts = [0usize; 256];
    for &v in img {
        counts[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let n = img.len() as f64;
    let mut h = 0.0;
    for &c in counts.iter() {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

pub fn spatial_frequency(img: &[f64], h: usize, w: usize) -> f64 {
    let (mut rf, mut nr) = (0.0, 0usize);
    let (mut cf, mut nc) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                let d = img[y * w + x] - img[y * w + x - 1];
                rf += d * d;
                nr += 1;
            }
            if y > 0 {
                let d = img[y * w + x] - img[(y - 1) * w + x];
                cf += d * d;
                nc += 1;
            }
        }
    }
    let rf = if nr > 0 { rf / nr as f64 } else { 0.0 };
    let cf = if nc > 0 { cf / nc as f64 } else { 0.0 };
    (rf + cf).sqrt()
}

pub fn average_gradient(img: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let dx = img[y * w + x + 1] - img[y * w + x];
            let dy = img[(y + 1) * w + x] - img[y * w + x];
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

pub fn std_dev(img: &[f64]) -> f64 {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    (img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// SSIM of two equally sized windows with uniform weighting.
pub fn ssim_window(a: &[f64], b: &[f64]) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}
