//! Image I/O, dataset layout and patch cropping.
//!
//! Dataset layout: `root/{vi,ir}/<stem>.<ext>` with optional
//! `root/fused/<stem>.<ext>` and `root/masks/<stem>.<ext>`. Pairs are matched
//! by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use log::warn;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::graph::{reflect_pad_tensor, Pad};
use crate::tensor::{ImagePlane, Shape, Tensor};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub identifier: String,
    pub visible_path: PathBuf,
    pub infrared_path: PathBuf,
    pub fused_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Gray = 1,
    Rgb = 3,
}

impl Channels {
    pub fn count(self) -> usize {
        self as usize
    }
}

/// Decode a raster into a `1×C×H×W` plane scaled to `[0, 1]`.
pub fn load_image(path: &Path, channels: Channels) -> Result<ImagePlane> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    Ok(from_dynamic(&img, channels))
}

fn from_dynamic(img: &DynamicImage, channels: Channels) -> ImagePlane {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let gray_source = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let shape = Shape::new(1, channels.count(), h, w);
    match (channels, sixteen) {
        (Channels::Gray, false) => {
            let g = img.to_luma8();
            Tensor::from_fn(shape, |_, _, y, x| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        }
        (Channels::Gray, true) => {
            let g = img.to_luma16();
            Tensor::from_fn(shape, |_, _, y, x| g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
        }
        (Channels::Rgb, false) if gray_source => {
            let g = img.to_luma8();
            Tensor::from_fn(shape, |_, _, y, x| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        }
        (Channels::Rgb, true) if gray_source => {
            let g = img.to_luma16();
            Tensor::from_fn(shape, |_, _, y, x| g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
        }
        (Channels::Rgb, false) => {
            let c = img.to_rgb8();
            Tensor::from_fn(shape, |_, ch, y, x| c.get_pixel(x as u32, y as u32)[ch] as f64 / 255.0)
        }
        (Channels::Rgb, true) => {
            let c = img.to_rgb16();
            Tensor::from_fn(shape, |_, ch, y, x| c.get_pixel(x as u32, y as u32)[ch] as f64 / 65535.0)
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write batch item 0 as an 8-bit PNG/JPEG (format from the extension).
/// One channel is written as grayscale, three as RGB.
pub fn save_image(img: &ImagePlane, path: &Path) -> Result<()> {
    let s = img.shape();
    ensure!(s.c == 1 || s.c == 3, "can only save 1- or 3-channel planes, got {s}");
    let (w, h) = (s.w as u32, s.h as u32);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let result = if s.c == 1 {
        let buf: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([quantize(img.at(0, 0, y as usize, x as usize))]));
        buf.save(path)
    } else {
        let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([quantize(img.at(0, 0, y, x)), quantize(img.at(0, 1, y, x)), quantize(img.at(0, 2, y, x))])
        });
        buf.save(path)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Load a binary mask: pixels at or above half intensity are set.
pub fn load_mask(path: &Path) -> Result<crate::metrics::BinaryMask> {
    let t = load_image(path, Channels::Gray)?;
    Ok(crate::metrics::BinaryMask::from_plane(&t, 0.5))
}

/// `size×size` window with its top-left corner at `(top, left)`.
pub fn crop_patch(img: &ImagePlane, top: usize, left: usize, size: usize) -> Result<ImagePlane> {
    let s = img.shape();
    if top + size > s.h || left + size > s.w {
        return Err(Error::Range(format!(
            "crop {size}×{size} at ({top},{left}) exceeds {}×{}",
            s.h, s.w
        )));
    }
    img.window(top, left, size, size)
}

/// Uniformly placed `size×size` window, identical for every plane in
/// `planes` (which must share spatial dims).
pub fn random_crop<R: Rng>(planes: &[&ImagePlane], size: usize, rng: &mut R) -> Result<Vec<ImagePlane>> {
    ensure!(!planes.is_empty(), "random_crop of nothing");
    let s = planes[0].shape();
    for p in planes {
        ensure!(p.shape().h == s.h && p.shape().w == s.w, "random_crop planes disagree in size");
    }
    if size > s.h || size > s.w {
        return Err(Error::Range(format!("patch {size} larger than image {}×{}", s.h, s.w)));
    }
    let top = rng.gen_range(0..=s.h - size);
    let left = rng.gen_range(0..=s.w - size);
    planes.iter().map(|p| crop_patch(p, top, left, size)).collect()
}

/// Reflection pad recorded so outputs can be cut back to the source size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad: Pad,
}

/// Reflect-pad bottom/right so both spatial dims are multiples of `multiple`.
pub fn pad_to_multiple(img: &ImagePlane, multiple: usize) -> Result<(ImagePlane, Padding)> {
    ensure!(multiple >= 1, "multiple must be positive");
    let s = img.shape();
    let pad = Pad {
        top: 0,
        left: 0,
        bottom: (multiple - s.h % multiple) % multiple,
        right: (multiple - s.w % multiple) % multiple,
    };
    ensure!(
        (pad.bottom < s.h || pad.bottom == 0) && (pad.right < s.w || pad.right == 0),
        "image {s} too small to reflect-pad to a multiple of {multiple}"
    );
    let padded = if pad.is_zero() { img.clone() } else { reflect_pad_tensor(img, pad) };
    Ok((
        padded,
        Padding {
            orig_h: s.h,
            orig_w: s.w,
            pad,
        },
    ))
}

pub fn unpad(img: &ImagePlane, padding: &Padding) -> Result<ImagePlane> {
    img.window(padding.pad.top, padding.pad.left, padding.orig_h, padding.orig_w)
}

/// Image files directly under `dir`, keyed by file stem. A missing directory
/// yields an empty map.
pub fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !path.is_file() || !ext_ok {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub records: Vec<PairRecord>,
    /// Paths present in only one of `vi/` and `ir/`.
    pub unpaired: Vec<PathBuf>,
}

/// Pair up `vi/` and `ir/` files by stem, in lexicographic stem order.
pub fn scan_dataset_report(root: &Path) -> Result<ScanReport> {
    let vi = images_by_stem(&root.join("vi"))?;
    let ir = images_by_stem(&root.join("ir"))?;
    let fused = images_by_stem(&root.join("fused"))?;
    let masks = images_by_stem(&root.join("masks"))?;
    let mut report = ScanReport::default();
    for (stem, vp) in &vi {
        match ir.get(stem) {
            Some(ip) => report.records.push(PairRecord {
                identifier: stem.clone(),
                visible_path: vp.clone(),
                infrared_path: ip.clone(),
                fused_path: fused.get(stem).cloned(),
                mask_path: masks.get(stem).cloned(),
            }),
            None => report.unpaired.push(vp.clone()),
        }
    }
    report
        .unpaired
        .extend(ir.iter().filter(|(s, _)| !vi.contains_key(*s)).map(|(_, p)| p.clone()));
    report.unpaired.sort();
    Ok(report)
}

/// [`scan_dataset_report`], logging a warning for each unpaired file.
pub fn scan_dataset(root: &Path) -> Result<Vec<PairRecord>> {
    let report = scan_dataset_report(root)?;
    for p in &report.unpaired {
        warn!("skipping unpaired file {}", p.display());
    }
    if report.records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(report.records)
}

/// Load the visible (RGB) and infrared (replicated to RGB) images of a
/// record, checking they share dimensions.
pub fn load_pair(rec: &PairRecord) -> Result<(ImagePlane, ImagePlane)> {
    let vi = load_image(&rec.visible_path, Channels::Rgb)?;
    let ir = load_image(&rec.infrared_path, Channels::Rgb)?;
    let (a, b) = (vi.shape(), ir.shape());
    ensure!(
        a.h == b.h && a.w == b.w,
        "{}: visible {}×{} and infrared {}×{} differ",
        rec.identifier,
        a.h,
        a.w,
        b.h,
        b.w
    );
    Ok((vi, ir))
}
