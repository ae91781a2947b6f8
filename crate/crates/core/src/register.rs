//! Inference on arbitrary-size images and the output files.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{pad_to_multiple, save_image, unpad};
use crate::error::{ensure, Error, Result};
use crate::metrics::BinaryMask;
use crate::network::Model;
use crate::tensor::{ImagePlane, Tensor};
use crate::warpcore::{backward_warp, bidirectional_blend, DeformationField, MisregMask};

/// Finest-scale results at the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    /// Corrected fusion `I_out⁰`, `B×3×H×W`.
    pub output: ImagePlane,
    /// Warped fusion before the refinement block.
    pub warped: ImagePlane,
    pub mask: MisregMask,
    pub field: DeformationField,
}

fn as_rgb(img: &ImagePlane, what: &str) -> Result<ImagePlane> {
    match img.shape().c {
        3 => Ok(img.clone()),
        1 => img.repeat_channels(3),
        c => Err(Error::Contract(format!("{what} must have 1 or 3 channels, got {c}"))),
    }
}

/// Run `model` on one triple. Inputs are reflect-padded to the pyramid
/// divisor and the outputs cut back to the input size.
pub fn register(model: &Model, visible: &ImagePlane, infrared: &ImagePlane, fused: &ImagePlane) -> Result<Registration> {
    let (vi, ir, f) = (
        as_rgb(visible, "visible image")?,
        as_rgb(infrared, "infrared image")?,
        as_rgb(fused, "fused image")?,
    );
    let s = f.shape();
    ensure!(
        vi.shape() == s && ir.shape() == s,
        "input shapes differ: visible {}, infrared {}, fused {s}",
        vi.shape(),
        ir.shape()
    );
    let d = model.config.divisor();
    let (vi, _) = pad_to_multiple(&vi, d)?;
    let (ir, _) = pad_to_multiple(&ir, d)?;
    let (f, padding) = pad_to_multiple(&f, d)?;
    let finest = model
        .forward(&vi, &ir, &f)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Contract("model produced no scales".into()))?;
    Ok(Registration {
        output: unpad(&finest.i_out, &padding)?,
        warped: unpad(&finest.i_warp, &padding)?,
        mask: MisregMask::new(unpad(finest.mask.tensor(), &padding)?)?,
        field: DeformationField::new(unpad(finest.phi.tensor(), &padding)?)?,
    })
}

/// Move a mask drawn on the misregistered fusion the way the model moved the
/// image: one-way backward warp or the mask-weighted blend, then threshold
/// at one half.
pub fn warp_mask(mask: &BinaryMask, reg: &Registration, one_way: bool) -> Result<BinaryMask> {
    let plane = mask.to_plane();
    let (h, w) = mask.dims();
    let fs = reg.field.tensor().shape();
    ensure!(fs.h == h && fs.w == w, "mask {h}×{w} does not match field {}×{}", fs.h, fs.w);
    let moved = if one_way {
        backward_warp(&plane, &reg.field)?
    } else {
        bidirectional_blend(&plane, &reg.field, &reg.mask)?
    };
    Ok(BinaryMask::from_plane(&moved, 0.5))
}

/// Black → red → yellow → white ramp over `[0, 1]`.
pub fn heat_image(values: &Tensor) -> Result<ImagePlane> {
    let s = values.shape();
    ensure!(s.c == 1, "heat image needs a single channel, got {s}");
    let peak = values.max().max(f64::MIN_POSITIVE);
    Ok(Tensor::from_fn(s.with_c(3), |b, c, y, x| {
        let t = (values.at(b, 0, y, x) / peak).clamp(0.0, 1.0) * 3.0;
        (t - c as f64).clamp(0.0, 1.0)
    }))
}

/// `y,x,dx,dy` rows for batch item 0.
pub fn field_csv(field: &DeformationField) -> String {
    let t = field.tensor();
    let s = t.shape();
    let mut out = String::from("y,x,dx,dy\n");
    for y in 0..s.h {
        for x in 0..s.w {
            let _ = writeln!(out, "{y},{x},{},{}", t.at(0, 0, y, x), t.at(0, 1, y, x));
        }
    }
    out
}

/// Write `I_out.png`, `mask.png`, `field.png` and `field.csv` into `dir`.
pub fn write_outputs(reg: &Registration, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&reg.output.clamp01(), &dir.join("I_out.png"))?;
    save_image(reg.mask.tensor(), &dir.join("mask.png"))?;
    save_image(&heat_image(&reg.field.magnitude())?, &dir.join("field.png"))?;
    let csv = dir.join("field.csv");
    std::fs::write(&csv, field_csv(&reg.field)).map_err(|e| Error::io(&csv, e))
}
