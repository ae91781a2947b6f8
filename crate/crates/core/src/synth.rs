//! Seeded synthetic-shapes corpus with per-object masks.
//!
//! Each pair is a registered visible/infrared scene of a few filled shapes
//! over smooth backgrounds. Every shape shows up in both modalities (with
//! different appearance), so misaligning the infrared image misaligns shared
//! edges in the fusion. Masks record where each shape is visible after
//! occlusion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::save_image;
use crate::error::{ensure, Result};
use crate::metrics::{iou, prior_map, BinaryMask};
use crate::network::Model;
use crate::register::{register, warp_mask};
use crate::simulate::{apply_affine, make_training_sample_with, registered_view, AffineParams, SampleOptions, TrainingSample};
use crate::tensor::{ImagePlane, Shape, Tensor};
use crate::train::TrainPair;

pub const DEFAULT_SIZE: usize = 64;

/// One registered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub id: String,
    /// `1×3×H×W`.
    pub visible: ImagePlane,
    /// `1×1×H×W`.
    pub infrared: ImagePlane,
    /// Visible support of every object, in painting order.
    pub objects: Vec<BinaryMask>,
}

impl SynthPair {
    /// Training view with the infrared replicated to three channels.
    pub fn to_train_pair(&self) -> Result<TrainPair> {
        Ok(TrainPair {
            id: self.id.clone(),
            visible: self.visible.clone(),
            infrared: self.infrared.repeat_channels(3)?,
            fused: None,
        })
    }
}

enum Outline {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
}

impl Outline {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Outline::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Outline::Rect { top, left, bottom, right } => y >= top && y <= bottom && x >= left && x <= right,
        }
    }
}

/// Generate one `size×size` scene.
pub fn generate_pair<R: Rng + ?Sized>(rng: &mut R, id: impl Into<String>, size: usize) -> Result<SynthPair> {
    ensure!(size >= 16, "synthetic scenes need at least 16 pixels per side, got {size}");
    let n = size as f64;
    let shape = Shape::new(1, 3, size, size);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.5));
    let (gy, gx) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let (fy, fx) = (rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4));
    let mut visible = Tensor::from_fn(shape, |_, c, y, x| {
        let (yf, xf) = (y as f64 / n, x as f64 / n);
        base[c] + gy * yf + gx * xf + 0.05 * (fy * y as f64).sin() * (fx * x as f64).cos()
    });
    let ir_base = rng.gen_range(0.1..0.25);
    let ir_tilt = rng.gen_range(-0.08..0.08);
    let mut infrared = Tensor::from_fn(shape.with_c(1), |_, _, y, _| ir_base + ir_tilt * y as f64 / n);

    let count = rng.gen_range(2..=4);
    let mut owner = vec![usize::MAX; size * size];
    for k in 0..count {
        let margin = n * 0.12;
        let (cy, cx) = (rng.gen_range(margin..n - margin), rng.gen_range(margin..n - margin));
        let (ry, rx) = (rng.gen_range(n * 0.09..n * 0.22), rng.gen_range(n * 0.09..n * 0.22));
        let outline = if rng.gen_bool(0.5) {
            Outline::Ellipse { cy, cx, ry, rx }
        } else {
            Outline::Rect {
                top: cy - ry,
                left: cx - rx,
                bottom: cy + ry,
                right: cx + rx,
            }
        };
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.95));
        let stripe = rng.gen_range(0.5..1.2);
        let stripe_dir = rng.gen_range(0.0..std::f64::consts::PI);
        let (sd, cd) = stripe_dir.sin_cos();
        let warm = rng.gen_bool(0.6);
        let heat = if warm { rng.gen_range(0.75..0.95) } else { rng.gen_range(0.45..0.6) };
        for y in 0..size {
            for x in 0..size {
                if !outline.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                owner[y * size + x] = k;
                let t = 0.08 * (stripe * (cd * x as f64 + sd * y as f64)).sin();
                for (c, &col) in color.iter().enumerate() {
                    visible.set(0, c, y, x, col + t);
                }
                let r = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).min(1.0);
                infrared.set(0, 0, y, x, heat - 0.1 * r);
            }
        }
    }
    visible.map_inplace(|v| v.clamp(0.0, 1.0));
    infrared.map_inplace(|v| v.clamp(0.0, 1.0));
    let objects = (0..count)
        .map(|k| BinaryMask::from_fn(size, size, |y, x| owner[y * size + x] == k))
        .filter(|m| !m.is_empty())
        .collect();
    Ok(SynthPair {
        id: id.into(),
        visible,
        infrared,
        objects,
    })
}

/// `count` scenes named `synth_0000`, `synth_0001`, ... from one seed.
pub fn generate_corpus(seed: u64, count: usize, size: usize) -> Result<Vec<SynthPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| generate_pair(&mut rng, format!("synth_{i:04}"), size))
        .collect()
}

/// Write `vi/`, `ir/` and `masks/<id>_<k>.png` under `root`.
pub fn write_corpus(root: &Path, pairs: &[SynthPair]) -> Result<()> {
    for p in pairs {
        save_image(&p.visible, &root.join("vi").join(format!("{}.png", p.id)))?;
        save_image(&p.infrared, &root.join("ir").join(format!("{}.png", p.id)))?;
        for (k, m) in p.objects.iter().enumerate() {
            save_image(&m.to_plane(), &root.join("masks").join(format!("{}_{k}.png", p.id)))?;
        }
    }
    Ok(())
}

/// Reference and deformed views of an object mask under `params`.
pub fn mask_views(mask: &BinaryMask, params: &AffineParams, opts: &SampleOptions) -> Result<(BinaryMask, BinaryMask)> {
    let plane = mask.to_plane();
    let reference = registered_view(&plane, params, opts)?;
    let deformed = apply_affine(&plane, params)?;
    Ok((BinaryMask::from_plane(&reference, 0.5), BinaryMask::from_plane(&deformed, 0.5)))
}

/// A held-out quadruple with its object masks.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutCase {
    pub id: String,
    pub sample: TrainingSample,
    /// Object masks in the registered geometry.
    pub reference_masks: Vec<BinaryMask>,
    /// The same masks moved with the infrared image.
    pub deformed_masks: Vec<BinaryMask>,
}

/// Full-frame quadruples for `pairs`, with affine draws from `seed`.
pub fn held_out_cases(pairs: &[SynthPair], seed: u64, opts: &SampleOptions) -> Result<Vec<HeldOutCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| {
            let params = crate::simulate::sample_affine(&mut rng);
            let ir = p.infrared.repeat_channels(3)?;
            let sample = make_training_sample_with(&p.visible, &ir, params, opts, None)?;
            let (reference_masks, deformed_masks) = p
                .objects
                .iter()
                .map(|m| mask_views(m, &params, opts))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            Ok(HeldOutCase {
                id: p.id.clone(),
                sample,
                reference_masks,
                deformed_masks,
            })
        })
        .collect()
}

/// Registration accuracy of a model on held-out cases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GainReport {
    pub cases: usize,
    pub objects: usize,
    pub iou_before: f64,
    pub iou_after: f64,
    pub prior_before: f64,
    pub prior_after: f64,
}

impl GainReport {
    pub fn iou_gain(&self) -> f64 {
        self.iou_after - self.iou_before
    }

    pub fn prior_gain(&self) -> f64 {
        self.prior_after - self.prior_before
    }
}

/// Mean object IoU against the reference masks before and after
/// registration (deformed masks moved by the predicted finest field and
/// mask), and mean patch similarity of the fused image and of the output
/// against the registered fusion.
pub fn measure_gain(model: &Model, cases: &[HeldOutCase], patch: usize, stride: usize) -> Result<GainReport> {
    ensure!(!cases.is_empty(), "no held-out cases");
    let mut r = GainReport {
        cases: cases.len(),
        ..GainReport::default()
    };
    for case in cases {
        let s = &case.sample;
        let reg = register(model, &s.visible, &s.deformed_infrared, &s.fused_deformed)?;
        r.prior_before += prior_map(&s.fused_deformed, &s.fused_registered, patch, stride)?.mean();
        r.prior_after += prior_map(&reg.output, &s.fused_registered, patch, stride)?.mean();
        for (a, b) in case.reference_masks.iter().zip(&case.deformed_masks) {
            let moved = warp_mask(b, &reg, model.config.one_way_warp)?;
            r.iou_before += iou(a, b)?;
            r.iou_after += iou(a, &moved)?;
            r.objects += 1;
        }
    }
    r.prior_before /= cases.len() as f64;
    r.prior_after /= cases.len() as f64;
    if r.objects > 0 {
        r.iou_before /= r.objects as f64;
        r.iou_after /= r.objects as f64;
    }
    Ok(r)
}
