//! Synthetic misregistration and training-sample construction.
//!
//! The continuous affine (scale → rotate → translate about the image
//! centre) deforms the infrared image only. Flips and 90° rotations are
//! pair-level augmentation by default: they are applied to the visible image,
//! the registered infrared image and the deformed infrared image alike, so
//! the residual misalignment stays within the continuous ranges.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{luma, ImagePlane, Tensor};

pub const ROTATION_RANGE_DEG: (f64, f64) = (-2.0, 2.0);
pub const TRANSLATION_RANGE_PX: (f64, f64) = (-2.0, 2.0);
pub const SCALE_RANGE: (f64, f64) = (0.95, 1.08);
pub const DISCRETE_OP_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns, `0..=3`.
    pub rot90_k: u8,
}

/// Unit-interval draws behind one [`AffineParams`] sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDraws {
    pub rotation: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// `Some(k)` with `k ∈ 1..=3` when the quarter-turn op fires.
    pub rot90: Option<u8>,
}

fn lerp(range: (f64, f64), u: f64) -> f64 {
    range.0 + u * (range.1 - range.0)
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rotation_deg: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            scale: 1.0,
            flip_h: false,
            flip_v: false,
            rot90_k: 0,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineParams {
            translate_x: dx,
            translate_y: dy,
            ..AffineParams::identity()
        }
    }

    pub fn from_draws(d: AffineDraws) -> Self {
        AffineParams {
            rotation_deg: lerp(ROTATION_RANGE_DEG, d.rotation),
            translate_x: lerp(TRANSLATION_RANGE_PX, d.translate_x),
            translate_y: lerp(TRANSLATION_RANGE_PX, d.translate_y),
            scale: lerp(SCALE_RANGE, d.scale),
            flip_h: d.flip_h,
            flip_v: d.flip_v,
            rot90_k: d.rot90.unwrap_or(0),
        }
    }

    pub fn in_ranges(&self) -> bool {
        let within = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        within(self.rotation_deg, ROTATION_RANGE_DEG)
            && within(self.translate_x, TRANSLATION_RANGE_PX)
            && within(self.translate_y, TRANSLATION_RANGE_PX)
            && within(self.scale, SCALE_RANGE)
            && self.rot90_k <= 3
    }

    /// The same parameters without flips and quarter turns.
    pub fn continuous_only(&self) -> Self {
        AffineParams {
            flip_h: false,
            flip_v: false,
            rot90_k: 0,
            ..*self
        }
    }
}

impl fmt::Display for AffineParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rotation_deg={} translate_x={} translate_y={} scale={} flip_h={} flip_v={} rot90_k={}",
            self.rotation_deg, self.translate_x, self.translate_y, self.scale, self.flip_h, self.flip_v, self.rot90_k
        )
    }
}

impl FromStr for AffineParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = AffineParams::identity();
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad affine token {tok:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad number in {tok:?}")));
            let flag = |v: &str| v.parse::<bool>().map_err(|_| Error::Format(format!("bad flag in {tok:?}")));
            match k {
                "rotation_deg" => p.rotation_deg = num(v)?,
                "translate_x" => p.translate_x = num(v)?,
                "translate_y" => p.translate_y = num(v)?,
                "scale" => p.scale = num(v)?,
                "flip_h" => p.flip_h = flag(v)?,
                "flip_v" => p.flip_v = flag(v)?,
                "rot90_k" => {
                    p.rot90_k = v.parse().map_err(|_| Error::Format(format!("bad rot90_k in {tok:?}")))?
                }
                _ => return Err(Error::Format(format!("unknown affine key {k:?}"))),
            }
        }
        Ok(p)
    }
}

/// Draw misregistration parameters: continuous fields uniform in their
/// ranges; horizontal flip, vertical flip and a quarter-turn rotation each
/// fire independently with probability ½.
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R) -> AffineParams {
    let draws = AffineDraws {
        rotation: rng.gen::<f64>(),
        translate_x: rng.gen::<f64>(),
        translate_y: rng.gen::<f64>(),
        scale: rng.gen::<f64>(),
        flip_h: rng.gen_bool(DISCRETE_OP_PROBABILITY),
        flip_v: rng.gen_bool(DISCRETE_OP_PROBABILITY),
        rot90: rng.gen_bool(DISCRETE_OP_PROBABILITY).then(|| rng.gen_range(1..=3)),
    };
    AffineParams::from_draws(draws)
}

/// Edge-replicating bilinear sample.
fn sample_clamped(p: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
    (1.0 - ly) * ((1.0 - lx) * p[y0 * w + x0] + lx * p[y0 * w + x1])
        + ly * ((1.0 - lx) * p[y1 * w + x0] + lx * p[y1 * w + x1])
}

/// Continuous part only: content is scaled, rotated counter-clockwise by
/// `rotation_deg` (in image coordinates, y down) and translated.
pub fn continuous_affine(img: &ImagePlane, p: &AffineParams) -> ImagePlane {
    let s = img.shape();
    let (cy, cx) = ((s.h as f64 - 1.0) / 2.0, (s.w as f64 - 1.0) / 2.0);
    let theta = p.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let identity = p.rotation_deg == 0.0 && p.scale == 1.0 && p.translate_x == 0.0 && p.translate_y == 0.0;
    if identity {
        return img.clone();
    }
    Tensor::from_fn(s, |b, c, y, x| {
        // Invert q ↦ R·S·(q − c) + c + t.
        let dx = x as f64 - cx - p.translate_x;
        let dy = y as f64 - cy - p.translate_y;
        let rx = cos * dx + sin * dy;
        let ry = -sin * dx + cos * dy;
        let sx = rx / p.scale + cx;
        let sy = ry / p.scale + cy;
        sample_clamped(img.plane(b, c), s.h, s.w, sy, sx)
    })
}

/// Flips, then counter-clockwise quarter turns. Odd quarter turns need a
/// square image.
pub fn discrete_ops(img: &ImagePlane, p: &AffineParams) -> Result<ImagePlane> {
    let s = img.shape();
    let k = p.rot90_k % 4;
    ensure!(
        k % 2 == 0 || s.h == s.w,
        "odd quarter turns need a square image, got {}×{}",
        s.h,
        s.w
    );
    if !p.flip_h && !p.flip_v && k == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (s.h, s.w);
    Ok(Tensor::from_fn(s, |b, c, y, x| {
        // Undo the rotation first (it was applied last).
        let (ry, rx) = match k {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        };
        let sy = if p.flip_v { h - 1 - ry } else { ry };
        let sx = if p.flip_h { w - 1 - rx } else { rx };
        img.at(b, c, sy, sx)
    }))
}

/// Continuous affine about the centre followed by flips and quarter turns.
pub fn apply_affine(img: &ImagePlane, p: &AffineParams) -> Result<ImagePlane> {
    discrete_ops(&continuous_affine(img, p), p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// Luminance = max(luma(vi), luma(ir)); chrominance from vi.
    #[default]
    Max,
    /// `0.5·vi + 0.5·ir`.
    Mean,
}

impl FromStr for FuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(FuseMode::Max),
            "mean" => Ok(FuseMode::Mean),
            other => Err(Error::Config(format!("unknown fuser {other:?}"))),
        }
    }
}

impl fmt::Display for FuseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseMode::Max => "max",
            FuseMode::Mean => "mean",
        })
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Raise the luma of an RGB pixel to `target` by an equal shift of every
/// channel (which keeps Cb/Cr), spilling into unsaturated channels on clip.
fn lift_luma(rgb: [f64; 3], target: f64) -> [f64; 3] {
    let mut out = rgb;
    let luma = |p: &[f64; 3]| p.iter().zip(LUMA).map(|(v, w)| v * w).sum::<f64>();
    for _ in 0..4 {
        let deficit = target - luma(&out);
        if deficit <= 1e-15 {
            break;
        }
        let free: f64 = (0..3).filter(|&i| out[i] < 1.0).map(|i| LUMA[i]).sum();
        if free <= 0.0 {
            break;
        }
        let step = deficit / free;
        for v in out.iter_mut() {
            if *v < 1.0 {
                *v = (*v + step).min(1.0);
            }
        }
    }
    out
}

/// Built-in stand-in fusion backbone. `ir` may have 1 or 3 channels.
pub fn baseline_fuse(vi: &ImagePlane, ir: &ImagePlane, mode: FuseMode) -> Result<ImagePlane> {
    let (vs, is) = (vi.shape(), ir.shape());
    ensure!(
        vs.b == is.b && vs.h == is.h && vs.w == is.w && (is.c == 1 || is.c == vs.c),
        "fuse shape mismatch: vi {vs}, ir {is}"
    );
    let ir_full = if is.c == 1 && vs.c != 1 { ir.repeat_channels(vs.c)? } else { ir.clone() };
    match mode {
        FuseMode::Mean => Ok(vi.zip_map(&ir_full, |a, b| 0.5 * a + 0.5 * b)?.clamp01()),
        FuseMode::Max => {
            let ir_l = luma(ir)?;
            if vs.c == 1 {
                return Ok(vi.zip_map(&ir_l, f64::max)?.clamp01());
            }
            ensure!(vs.c == 3, "max fusion needs a 1- or 3-channel visible image, got {vs}");
            let vi_l = luma(vi)?;
            let mut out = vi.clamp01();
            for b in 0..vs.b {
                for i in 0..vs.plane() {
                    let target = vi_l.plane(b, 0)[i].max(ir_l.plane(b, 0)[i]).clamp(0.0, 1.0);
                    let px = [out.plane(b, 0)[i], out.plane(b, 1)[i], out.plane(b, 2)[i]];
                    let lifted = lift_luma(px, target);
                    for (c, v) in lifted.iter().enumerate() {
                        out.plane_mut(b, c)[i] = *v;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// A registered pair with its synthetic misregistration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub visible: ImagePlane,
    pub deformed_infrared: ImagePlane,
    /// Fusion of (visible, deformed infrared).
    pub fused_deformed: ImagePlane,
    /// Fusion of the undeformed pair.
    pub fused_registered: ImagePlane,
    pub params: AffineParams,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleOptions {
    pub fuser: FuseMode,
    pub deform_only_ir: bool,
}

/// Geometry of the registered pair after pair-level augmentation.
pub fn registered_view(img: &ImagePlane, params: &AffineParams, opts: &SampleOptions) -> Result<ImagePlane> {
    if opts.deform_only_ir {
        Ok(img.clone())
    } else {
        discrete_ops(img, params)
    }
}

/// Build a sample from a registered pair with explicit parameters.
///
/// When `external_fused` (a fusion of the registered pair by some other
/// backbone) is given it becomes the registered target, and the deformed
/// fusion is that image plus the change the built-in fuser shows between the
/// deformed and registered pairs.
pub fn make_training_sample_with(
    vi: &ImagePlane,
    ir: &ImagePlane,
    params: AffineParams,
    opts: &SampleOptions,
    external_fused: Option<&ImagePlane>,
) -> Result<TrainingSample> {
    let vi_reg = registered_view(vi, &params, opts)?;
    let ir_reg = registered_view(ir, &params, opts)?;
    let ir_def = apply_affine(ir, &params)?;
    let gt_builtin = baseline_fuse(&vi_reg, &ir_reg, opts.fuser)?;
    let f_builtin = baseline_fuse(&vi_reg, &ir_def, opts.fuser)?;
    let (fused_registered, fused_deformed) = match external_fused {
        None => (gt_builtin, f_builtin),
        Some(ext) => {
            ensure!(ext.shape() == vi.shape(), "external fused image {} does not match {}", ext.shape(), vi.shape());
            let ext_reg = registered_view(ext, &params, opts)?;
            let mut f = ext_reg.clone();
            f.axpy(1.0, &f_builtin);
            f.axpy(-1.0, &gt_builtin);
            (ext_reg, f.clamp01())
        }
    };
    Ok(TrainingSample {
        visible: vi_reg,
        deformed_infrared: ir_def,
        fused_deformed,
        fused_registered,
        params,
    })
}

/// Sample parameters from `rng` and build the training quadruple.
pub fn make_training_sample<R: Rng + ?Sized>(
    vi: &ImagePlane,
    ir: &ImagePlane,
    rng: &mut R,
    opts: &SampleOptions,
    external_fused: Option<&ImagePlane>,
) -> Result<TrainingSample> {
    let params = sample_affine(rng);
    make_training_sample_with(vi, ir, params, opts, external_fused)
}
