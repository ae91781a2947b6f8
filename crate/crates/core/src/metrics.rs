//! Fusion-quality metrics (EN, SF, AG, SD), mask-overlap registration scores
//! (IoU, PR) and the patch-SSIM prior map.
//!
//! Multi-channel inputs are reduced to grayscale with BT.601 luma weights;
//! batched inputs are scored per item and averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::tensor::{luma, ImagePlane, Tensor};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_PRIOR_PATCH: usize = 32;
pub const DEFAULT_PRIOR_STRIDE: usize = 16;

/// Boolean `h×w` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(bits.len() == h * w, "mask of {h}×{w} needs {} bits, got {}", h * w, bits.len());
        Ok(BinaryMask { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..h * w).map(|i| f(i / w, i % w)).collect();
        BinaryMask { h, w, bits }
    }

    /// Pixels of the first plane of `img` with value ≥ `threshold`.
    pub fn from_plane(img: &Tensor, threshold: f64) -> Self {
        let s = img.shape();
        BinaryMask {
            h: s.h,
            w: s.w,
            bits: img.plane(0, 0).iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `1×1×h×w` plane of zeros and ones.
    pub fn to_plane(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(crate::tensor::Shape::new(1, 1, self.h, self.w), data).expect("mask dims")
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        ensure!(
            self.dims() == other.dims(),
            "mask dims {:?} and {:?} differ",
            self.dims(),
            other.dims()
        );
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// Per-item grayscale planes of `img` (luma for 3 channels).
fn gray_items(img: &ImagePlane) -> Result<Vec<Vec<f64>>> {
    let s = img.shape();
    let g = if s.c == 1 { img.clone() } else { luma(img)? };
    Ok((0..s.b).map(|b| g.plane(b, 0).to_vec()).collect())
}

fn per_item(img: &ImagePlane, f: impl Fn(&[f64], usize, usize) -> f64) -> Result<f64> {
    let s = img.shape();
    let items = gray_items(img)?;
    Ok(items.iter().map(|p| f(p, s.h, s.w)).sum::<f64>() / items.len() as f64)
}

fn entropy_plane(p: &[f64]) -> f64 {
    let mut hist = [0u64; 256];
    for &v in p {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let n = p.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.log2()
        })
        .sum()
}

/// Shannon entropy in bits of the 256-bin histogram.
pub fn entropy(img: &ImagePlane) -> Result<f64> {
    per_item(img, |p, _, _| entropy_plane(p))
}

fn spatial_frequency_plane(p: &[f64], h: usize, w: usize) -> f64 {
    let mean_sq = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let mut row = 0.0;
    for y in 0..h {
        for x in 1..w {
            let d = p[y * w + x] - p[y * w + x - 1];
            row += d * d;
        }
    }
    let mut col = 0.0;
    for y in 1..h {
        for x in 0..w {
            let d = p[y * w + x] - p[(y - 1) * w + x];
            col += d * d;
        }
    }
    (mean_sq(row, h * w.saturating_sub(1)) + mean_sq(col, h.saturating_sub(1) * w)).sqrt()
}

/// `√(RF² + CF²)` with RF, CF the RMS horizontal and vertical differences.
pub fn spatial_frequency(img: &ImagePlane) -> Result<f64> {
    per_item(img, spatial_frequency_plane)
}

fn average_gradient_plane(p: &[f64], h: usize, w: usize) -> f64 {
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = p[y * w + x + 1] - p[y * w + x];
            let dy = p[(y + 1) * w + x] - p[y * w + x];
            acc += ((dx * dx + dy * dy) * 0.5).sqrt();
        }
    }
    acc / ((h - 1) * (w - 1)) as f64
}

/// Mean of `√((dx² + dy²)/2)` over pixels with both forward differences.
pub fn average_gradient(img: &ImagePlane) -> Result<f64> {
    per_item(img, average_gradient_plane)
}

fn std_dev_plane(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Population standard deviation.
pub fn std_dev(img: &ImagePlane) -> Result<f64> {
    per_item(img, |p, _, _| std_dev_plane(p))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct QualityMetrics {
    pub en: f64,
    pub sf: f64,
    pub ag: f64,
    pub sd: f64,
}

impl QualityMetrics {
    pub fn of(img: &ImagePlane) -> Result<Self> {
        Ok(QualityMetrics {
            en: entropy(img)?,
            sf: spatial_frequency(img)?,
            ag: average_gradient(img)?,
            sd: std_dev(img)?,
        })
    }

    pub fn delta(&self, before: &QualityMetrics) -> QualityMetrics {
        QualityMetrics {
            en: self.en - before.en,
            sf: self.sf - before.sf,
            ag: self.ag - before.ag,
            sd: self.sd - before.sd,
        }
    }
}

/// `|a∩b| / |a∪b|`, 1 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b)?;
    let inter = a.overlap(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Harmonic mean of precision and recall of `pred` against `reference`.
pub fn pr_score(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    pred.check_same(reference)?;
    ensure!(!reference.is_empty(), "reference mask is empty");
    let inter = pred.overlap(reference) as f64;
    if pred.is_empty() || inter == 0.0 {
        return Ok(0.0);
    }
    let p = inter / pred.count() as f64;
    let r = inter / reference.count() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// SSIM of two equally sized windows with uniform weights.
pub fn ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Patch-grid SSIM between a fused image and its reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriorMap {
    /// Row-major `grid_h × grid_w`.
    pub ssim: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PriorMap {
    pub fn at(&self, gy: usize, gx: usize) -> f64 {
        self.ssim[gy * self.grid_w + gx]
    }

    pub fn mean(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }

    /// Per-pixel view: each pixel takes the minimum over the patches covering
    /// it, or 1 when none does.
    pub fn pixel_map(&self, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::full(crate::tensor::Shape::new(1, 1, h, w), 1.0);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let v = self.at(gy, gx);
                for y in gy * self.stride..(gy * self.stride + self.patch).min(h) {
                    for x in gx * self.stride..(gx * self.stride + self.patch).min(w) {
                        let cur = out.at(0, 0, y, x);
                        out.set(0, 0, y, x, cur.min(v));
                    }
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,top,left,ssim\n");
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let _ = writeln!(s, "{gy},{gx},{},{},{}", gy * self.stride, gx * self.stride, self.at(gy, gx));
            }
        }
        s
    }
}

/// SSIM over a sliding `patch×patch` window with the given stride, on luma,
/// averaged over batch items.
pub fn prior_map(fused: &ImagePlane, gt: &ImagePlane, patch: usize, stride: usize) -> Result<PriorMap> {
    let (fs, gs) = (fused.shape(), gt.shape());
    ensure!(fs == gs, "prior map inputs differ: {fs} vs {gs}");
    ensure!(patch >= 1 && stride >= 1, "patch and stride must be positive");
    ensure!(patch <= fs.h.min(fs.w), "patch {patch} exceeds image {}×{}", fs.h, fs.w);
    let (grid_h, grid_w) = ((fs.h - patch) / stride + 1, (fs.w - patch) / stride + 1);
    let (fa, ga) = (gray_items(fused)?, gray_items(gt)?);
    let mut map = vec![0.0; grid_h * grid_w];
    let mut wa = vec![0.0; patch * patch];
    let mut wb = vec![0.0; patch * patch];
    for (pa, pb) in fa.iter().zip(&ga) {
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                for dy in 0..patch {
                    let row = (gy * stride + dy) * fs.w + gx * stride;
                    wa[dy * patch..(dy + 1) * patch].copy_from_slice(&pa[row..row + patch]);
                    wb[dy * patch..(dy + 1) * patch].copy_from_slice(&pb[row..row + patch]);
                }
                map[gy * grid_w + gx] += ssim(&wa, &wb) / fa.len() as f64;
            }
        }
    }
    Ok(PriorMap {
        ssim: map,
        grid_h,
        grid_w,
        patch,
        stride,
    })
}

/// One object seen in two views: `a` is the reference geometry and `b` the
/// object as it appears in the evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub object: String,
    pub a: BinaryMask,
    pub b: BinaryMask,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub before: QualityMetrics,
    pub after: QualityMetrics,
    pub delta: QualityMetrics,
    pub iou_before: Option<f64>,
    pub iou_after: Option<f64>,
    pub pr_before: Option<f64>,
    pub pr_after: Option<f64>,
    pub mask_pairs: usize,
}

impl EvalReport {
    pub fn iou_delta(&self) -> Option<f64> {
        Some(self.iou_after? - self.iou_before?)
    }

    pub fn pr_delta(&self) -> Option<f64> {
        Some(self.pr_after? - self.pr_before?)
    }
}

fn mean_scores(pairs: &[MaskPair]) -> Result<(f64, f64)> {
    let (mut iou_sum, mut pr_sum) = (0.0, 0.0);
    for p in pairs {
        iou_sum += iou(&p.a, &p.b)?;
        pr_sum += pr_score(&p.b, &p.a)?;
    }
    let n = pairs.len() as f64;
    Ok((iou_sum / n, pr_sum / n))
}

/// Quality metrics before/after registration plus mean IoU and PR over the
/// supplied mask pairs of each image.
pub fn evaluate_run(
    before: &ImagePlane,
    after: &ImagePlane,
    before_masks: &[MaskPair],
    after_masks: &[MaskPair],
) -> Result<EvalReport> {
    let qb = QualityMetrics::of(before)?;
    let qa = QualityMetrics::of(after)?;
    let mut report = EvalReport {
        before: qb,
        after: qa,
        delta: qa.delta(&qb),
        ..EvalReport::default()
    };
    if before_masks.is_empty() && after_masks.is_empty() {
        log::warn!("no mask pairs supplied; reporting quality metrics only");
        return Ok(report);
    }
    if !before_masks.is_empty() {
        let (i, p) = mean_scores(before_masks)?;
        report.iou_before = Some(i);
        report.pr_before = Some(p);
    }
    if !after_masks.is_empty() {
        let (i, p) = mean_scores(after_masks)?;
        report.iou_after = Some(i);
        report.pr_after = Some(p);
    }
    report.mask_pairs = before_masks.len().max(after_masks.len());
    Ok(report)
}

pub const REPORT_CSV_HEADER: &str = "id,en_before,en_after,sf_before,sf_after,ag_before,ag_after,sd_before,sd_after,\
iou_before,iou_after,iou_delta,pr_before,pr_after,pr_delta,mask_pairs";

pub fn report_csv_row(id: &str, r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{id},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.before.en,
        r.after.en,
        r.before.sf,
        r.after.sf,
        r.before.ag,
        r.after.ag,
        r.before.sd,
        r.after.sd,
        opt(r.iou_before),
        opt(r.iou_after),
        opt(r.iou_delta()),
        opt(r.pr_before),
        opt(r.pr_after),
        opt(r.pr_delta()),
        r.mask_pairs
    )
}

/// Mask files `<stem>_<objid>_a.<ext>` / `<stem>_<objid>_b.<ext>` grouped by
/// stem, then object id. Objects lacking either side are skipped with a
/// warning.
pub fn scan_mask_pairs(dir: &Path) -> Result<BTreeMap<String, Vec<(String, PathBuf, PathBuf)>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut sides: BTreeMap<(String, String), (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some((rest, side)) = name.rsplit_once('_') else { continue };
        let Some((stem, obj)) = rest.rsplit_once('_') else { continue };
        let slot = sides.entry((stem.to_string(), obj.to_string())).or_default();
        match side {
            "a" => slot.0 = Some(path),
            "b" => slot.1 = Some(path),
            _ => {}
        }
    }
    let mut out: BTreeMap<String, Vec<(String, PathBuf, PathBuf)>> = BTreeMap::new();
    for ((stem, obj), (a, b)) in sides {
        match (a, b) {
            (Some(a), Some(b)) => out.entry(stem).or_default().push((obj, a, b)),
            _ => log::warn!("mask pair {stem}_{obj} is missing a side; skipped"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| f(y, x))
    }

    fn random(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| rng.gen::<f64>())
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&gray(4, 4, |_, _| 0.3)).unwrap(), 0.0);
        assert!((entropy(&gray(4, 4, |y, _| if y < 2 { 0.0 } else { 1.0 })).unwrap() - 1.0).abs() < 1e-12);
        assert!((entropy(&gray(256, 1, |y, _| y as f64 / 255.0)).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_frequency_examples() {
        assert_eq!(spatial_frequency(&gray(5, 5, |_, _| 0.7)).unwrap(), 0.0);
        let checker = gray(6, 6, |y, x| ((x + y) % 2) as f64);
        assert!((spatial_frequency(&checker).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn average_gradient_and_std_examples() {
        let ramp = gray(6, 6, |_, x| 0.1 * x as f64);
        assert!((average_gradient(&ramp).unwrap() - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(average_gradient(&gray(4, 4, |_, _| 0.2)).unwrap(), 0.0);
        let half = gray(4, 4, |y, _| if y < 2 { 0.0 } else { 1.0 });
        assert!((std_dev(&half).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quality_metrics_match_oracles() {
        for seed in 0..5 {
            let img = random(9 + seed as usize, 12, seed);
            let p = img.plane(0, 0);
            let (h, w) = (img.shape().h, img.shape().w);
            assert!((entropy(&img).unwrap() - reference::entropy(p)).abs() < 1e-9);
            assert!((spatial_frequency(&img).unwrap() - reference::spatial_frequency(p, h, w)).abs() < 1e-9);
            assert!((average_gradient(&img).unwrap() - reference::average_gradient(p, h, w)).abs() < 1e-9);
            assert!((std_dev(&img).unwrap() - reference::std_dev(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let b = BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = BinaryMask::from_fn(4, 4, |y, x| y >= 3 && x >= 3);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        assert_eq!(iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 1.0);
        assert!(iou(&a, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn pr_examples() {
        let a = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(pr_score(&a, &a).unwrap(), 1.0);
        let far = BinaryMask::from_fn(4, 4, |y, x| y >= 3 && x >= 3);
        assert_eq!(pr_score(&far, &a).unwrap(), 0.0);
        assert_eq!(pr_score(&BinaryMask::empty(4, 4), &a).unwrap(), 0.0);
        assert!(pr_score(&a, &BinaryMask::empty(4, 4)).is_err());
        // Same-size shifted square: P = R = 1/4.
        let b = BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        assert!((pr_score(&b, &a).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn prior_map_examples() {
        let img = random(40, 40, 1);
        let m = prior_map(&img, &img, 16, 8).unwrap();
        assert_eq!((m.grid_h, m.grid_w), (4, 4));
        assert!(m.ssim.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let (a, b) = (0.3, 0.6);
        let m = prior_map(&gray(8, 8, |_, _| a), &gray(8, 8, |_, _| b), 8, 8).unwrap();
        let want = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((m.ssim[0] - want).abs() < 1e-12);
        assert!(prior_map(&img, &img, 41, 1).is_err());
    }

    #[test]
    fn prior_map_localizes_half_frame_change() {
        let tex = |y: usize, x: usize| 0.5 + 0.4 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos());
        let base = gray(32, 64, tex);
        let shifted = gray(32, 64, |y, x| if x >= 32 { tex(y, x + 2) } else { tex(y, x) });
        let m = prior_map(&shifted, &base, 16, 16).unwrap();
        for gy in 0..m.grid_h {
            for gx in 0..m.grid_w {
                if gx < 2 {
                    assert!((m.at(gy, gx) - 1.0).abs() < 1e-12);
                } else {
                    assert!(m.at(gy, gx) < 0.99);
                }
            }
        }
        assert!(m.ssim.iter().zip(&reference_map(&shifted, &base)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn reference_map(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let mut out = Vec::new();
        for gy in 0..2 {
            for gx in 0..4 {
                let wa = a.window(gy * 16, gx * 16, 16, 16).unwrap();
                let wb = b.window(gy * 16, gx * 16, 16, 16).unwrap();
                out.push(reference::ssim_window(wa.data(), wb.data()));
            }
        }
        out
    }

    #[test]
    fn evaluate_identity_run_has_zero_deltas() {
        let img = random(16, 16, 2);
        let m = BinaryMask::from_fn(16, 16, |y, x| y > 4 && x > 4);
        let pairs = vec![MaskPair {
            object: "0".into(),
            a: m.clone(),
            b: m,
        }];
        let r = evaluate_run(&img, &img, &pairs, &pairs).unwrap();
        assert_eq!(r.delta, QualityMetrics::default());
        assert_eq!(r.iou_after, Some(1.0));
        assert_eq!(r.iou_delta(), Some(0.0));
        let q = evaluate_run(&img, &img, &[], &[]).unwrap();
        assert_eq!(q.iou_before, None);
    }

    #[test]
    fn mask_files_pair_by_convention() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["s1_0_a.png", "s1_0_b.png", "s1_1_a.png", "s2_7_a.png", "s2_7_b.png"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        let found = scan_mask_pairs(dir.path()).unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found["s1"].len(), 1);
        assert_eq!(found["s2"][0].0, "7");
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = BinaryMask::from_fn(6, 6, |_, _| rng.gen_bool(0.4));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let b = BinaryMask::from_fn(6, 6, |_, _| rng.gen_bool(0.4));
            let i = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(i, iou(&b, &a).unwrap());
            if !a.is_empty() {
                let p = pr_score(&b, &a).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
            }
            let img = random(8, 8, seed);
            let en = entropy(&img).unwrap();
            prop_assert!((0.0..=8.0).contains(&en));
        }

        #[test]
        fn quality_is_batch_replication_invariant(seed in any::<u64>()) {
            let img = random(8, 8, seed);
            let twice = Tensor::stack(&[img.clone(), img.clone()]).unwrap();
            let (q1, q2) = (QualityMetrics::of(&img).unwrap(), QualityMetrics::of(&twice).unwrap());
            prop_assert!((q1.en - q2.en).abs() < 1e-12 && (q1.sf - q2.sf).abs() < 1e-12);
            prop_assert!((q1.ag - q2.ag).abs() < 1e-12 && (q1.sd - q2.sd).abs() < 1e-12);
        }

        #[test]
        fn center_ssim_is_symmetric(seed in any::<u64>()) {
            let (a, b) = (random(8, 8, seed), random(8, 8, seed.wrapping_add(1)));
            let (m1, m2) = (prior_map(&a, &b, 8, 8).unwrap(), prior_map(&b, &a, 8, 8).unwrap());
            prop_assert!((m1.ssim[0] - m2.ssim[0]).abs() < 1e-12);
            prop_assert!(m1.ssim[0] >= -1.0 && m1.ssim[0] <= 1.0);
        }
    }
}
