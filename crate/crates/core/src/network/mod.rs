//! The learnable pipeline: per-stream pyramid extractors, the
//! misregistration-localization head and the Modality Retainment Block (MRB).
//!
//! Parameter names:
//! - `fe.{f,vi,ir}.s{i}.*`: extractor of each stream at scale `i`.
//! - `loc.s{i}.*`: localization head.
//! - `mrb.s{i}.*`: retainment block, including `gmlp{s}.*` per patch size.

mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, MrbVariant};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Pad, Var};
use crate::tensor::{Shape, Tensor};
use crate::warpcore::{self, DeformationField, MisregMask};

pub use params::{ParamVars, Params};
use params::{Builder, Init};

/// Input stream of an extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Fused,
    Visible,
    Infrared,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Fused, Stream::Visible, Stream::Infrared];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Fused => "f",
            Stream::Visible => "vi",
            Stream::Infrared => "ir",
        }
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Contract(format!("unknown stream tag {s:?}")))
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Initialization knobs that do not change the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    /// Initial bias of the mask head's output logit. Zero makes the untrained
    /// mask exactly ½.
    pub mask_logit: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { mask_logit: 2.0 }
    }
}

/// Per-scale graph handles produced by [`Model::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    pub i_warp: Var,
    pub f_warp: Var,
    /// `None` when the MRB is disabled.
    pub i_bias: Option<Var>,
    pub i_out: Var,
    pub mask: Var,
    pub phi: Var,
}

/// Per-scale results as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput {
    pub i_warp: Tensor,
    pub f_warp: Tensor,
    pub i_bias: Tensor,
    pub i_out: Tensor,
    pub mask: MisregMask,
    pub phi: DeformationField,
}

impl ScaleOutput {
    fn from_vars(g: &Graph, v: &ScaleVars) -> Result<Self> {
        let i_out = g.value(v.i_out).clone();
        Ok(ScaleOutput {
            i_warp: g.value(v.i_warp).clone(),
            f_warp: g.value(v.f_warp).clone(),
            i_bias: match v.i_bias {
                Some(b) => g.value(b).clone(),
                None => Tensor::zeros(i_out.shape()),
            },
            i_out,
            mask: MisregMask::new(g.value(v.mask).clone())?,
            phi: DeformationField::new(g.value(v.phi).clone())?,
        })
    }
}

fn conv(g: &mut Graph, pv: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = pv.get(&format!("{name}.w"))?;
    let b = pv.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn conv_relu(g: &mut Graph, pv: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = conv(g, pv, name, x, stride, pad)?;
    Ok(g.relu(y))
}

/// Image pyramid by repeated factor-2 bilinear reduction, finest first.
pub fn image_pyramid(g: &mut Graph, img: Var, depth: usize) -> Result<Vec<Var>> {
    let mut levels = vec![img];
    for i in 1..depth {
        let next = g.downsample2(levels[i - 1])?;
        levels.push(next);
    }
    Ok(levels)
}

/// Tensor-level [`image_pyramid`].
pub fn image_pyramid_tensor(img: &Tensor, depth: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let v = g.constant(img.clone());
    let levels = image_pyramid(&mut g, v, depth)?;
    Ok(levels.into_iter().map(|l| g.value(l).clone()).collect())
}

/// Per-scale features of one stream: `C0·2^i` channels at `H/2^i × W/2^i`.
pub fn extract_pyramid(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    images: &[Var],
    stream: Stream,
) -> Result<Vec<Var>> {
    ensure!(
        images.len() == cfg.pyramid_depth,
        "{} pyramid levels for depth {}",
        images.len(),
        cfg.pyramid_depth
    );
    let mut feats: Vec<Var> = Vec::with_capacity(images.len());
    for (i, &img) in images.iter().enumerate() {
        let p = format!("fe.{}.s{i}", stream.tag());
        let a = conv_relu(g, pv, &format!("{p}.conv1"), img, 1, 1)?;
        let a = conv_relu(g, pv, &format!("{p}.conv2"), a, 1, 1)?;
        let f = if i == 0 {
            a
        } else {
            let reduced = conv_relu(g, pv, &format!("{p}.reduce"), feats[i - 1], 2, 1)?;
            let cat = g.concat_channels(&[a, reduced])?;
            conv_relu(g, pv, &format!("{p}.fuse"), cat, 1, 1)?
        };
        feats.push(f);
    }
    Ok(feats)
}

/// Raw per-scale `(M, φ)` from the concatenated stream features.
pub fn localize_raw(g: &mut Graph, pv: &ParamVars, fused: &[Var], vis: &[Var], ir: &[Var]) -> Result<Vec<(Var, Var)>> {
    ensure!(
        fused.len() == vis.len() && vis.len() == ir.len(),
        "pyramids disagree in scale count: {}, {}, {}",
        fused.len(),
        vis.len(),
        ir.len()
    );
    let mut out = Vec::with_capacity(fused.len());
    for i in 0..fused.len() {
        let p = format!("loc.s{i}");
        let cat = g.concat_channels(&[fused[i], vis[i], ir[i]])?;
        let h = conv_relu(g, pv, &format!("{p}.conv1"), cat, 1, 1)?;
        let h = conv_relu(g, pv, &format!("{p}.conv2"), h, 1, 1)?;
        let logit = conv(g, pv, &format!("{p}.mask"), h, 1, 1)?;
        let m = g.sigmoid(logit);
        let phi = conv(g, pv, &format!("{p}.phi"), h, 1, 1)?;
        out.push((m, phi));
    }
    Ok(out)
}

/// Masks and coarse-to-fine refined fields per scale (index 0 finest).
pub fn localize(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    fused: &[Var],
    vis: &[Var],
    ir: &[Var],
) -> Result<Vec<(Var, Var)>> {
    let raw = localize_raw(g, pv, fused, vis, ir)?;
    let fields: Vec<Var> = raw.iter().map(|r| r.1).collect();
    let refined = warpcore::refine_chain(g, &fields, cfg.refinement)?;
    Ok(raw.iter().zip(refined).map(|(r, phi)| (r.0, phi)).collect())
}

/// `(X·W1) ⊙ relu(token_mix(X·W2))` over `s×s` patches. Spatial dims that
/// are not multiples of `s` are reflect-padded and cropped back.
pub fn gmlp_block(g: &mut Graph, x: Var, w1: Var, w2: Var, mix: Var, mix_bias: Var, s: usize) -> Result<Var> {
    let xs = g.shape(x);
    let pad = Pad {
        bottom: (s - xs.h % s) % s,
        right: (s - xs.w % s) % s,
        ..Pad::default()
    };
    let xp = g.reflect_pad(x, pad)?;
    let proj = g.conv2d(xp, w1, None, 1, 0)?;
    let gate_in = g.conv2d(xp, w2, None, 1, 0)?;
    let mixed = g.patch_token_mix(gate_in, mix, mix_bias, s)?;
    let gate = g.relu(mixed);
    let y = g.mul(proj, gate)?;
    g.crop(y, 0, 0, xs.h, xs.w)
}

/// Everything the MRB emits at one scale.
#[derive(Clone, Copy, Debug)]
pub struct MrbOutput {
    pub f_ff: Var,
    pub f_gmlp: Var,
    pub att_vi: Var,
    pub att_ir: Var,
    pub i_bias: Var,
    pub i_out: Var,
}

/// Modality Retainment Block at scale `i`.
#[allow(clippy::too_many_arguments)]
pub fn mrb_forward(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    scale: usize,
    f_warp: Var,
    f_vi: Var,
    f_ir: Var,
    i_warp: Var,
) -> Result<MrbOutput> {
    match cfg.mrb_variant {
        MrbVariant::Gmlp => {}
        MrbVariant::Dc => return Err(Error::NotImplemented("deformable-convolution MRB (dc)".into())),
        MrbVariant::Dt => return Err(Error::NotImplemented("deformable-transformer MRB (dt)".into())),
    }
    let p = format!("mrb.s{scale}");
    let cor_vi = warpcore::correlation(g, f_warp, f_vi, cfg.correlation_range)?;
    let cor_ir = warpcore::correlation(g, f_warp, f_ir, cfg.correlation_range)?;
    let cat = g.concat_channels(&[f_warp, f_vi, f_ir, cor_vi, cor_ir])?;
    let x = conv(g, pv, &format!("{p}.compress"), cat, 1, 0)?;

    let logits = pv.get(&format!("{p}.scale_logits"))?;
    let weights = g.softmax(logits)?;
    let mut branches = Vec::with_capacity(cfg.patch_scales.len());
    for (k, &s) in cfg.patch_scales.iter().enumerate() {
        let q = format!("{p}.gmlp{s}");
        let y = gmlp_block(
            g,
            x,
            pv.get(&format!("{q}.w1"))?,
            pv.get(&format!("{q}.w2"))?,
            pv.get(&format!("{q}.mix"))?,
            pv.get(&format!("{q}.mix_bias"))?,
            s,
        )?;
        let w = g.select(weights, k)?;
        branches.push(g.mul(y, w)?);
    }
    let f_gmlp = g.add_n(&branches)?;

    let pooled = g.mean_hw(f_vi);
    let a = conv(g, pv, &format!("{p}.att_vi"), pooled, 1, 0)?;
    let a = g.sigmoid(a);
    let att_vi = g.add_scalar(a, 1.0);

    let mx = g.channel_max(f_ir);
    let mean = g.channel_mean(f_ir);
    let stats = g.concat_channels(&[mx, mean])?;
    let a = conv(g, pv, &format!("{p}.att_ir"), stats, 1, 3)?;
    let a = g.sigmoid(a);
    let att_ir = g.add_scalar(a, 1.0);

    let with_vi = g.mul(f_gmlp, att_vi)?;
    let with_ir = g.mul(f_gmlp, att_ir)?;
    let f_ff = g.add_n(&[f_gmlp, with_vi, with_ir])?;

    let h = conv_relu(g, pv, &format!("{p}.bias1"), f_ff, 1, 1)?;
    let i_bias = conv(g, pv, &format!("{p}.bias2"), h, 1, 1)?;
    let i_out = g.add(i_warp, i_bias)?;
    Ok(MrbOutput {
        f_ff,
        f_gmlp,
        att_vi,
        att_ir,
        i_bias,
        i_out,
    })
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Fresh parameters. The φ head, the bias head and the attention
    /// convolutions start at zero, so the untrained network returns the
    /// fused input unchanged.
    pub fn new(config: ModelConfig, seed: u64, init: InitOptions) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut b = Builder {
            params: &mut params,
            rng: &mut rng,
        };
        let n = config.pyramid_depth;
        for stream in Stream::ALL {
            for i in 0..n {
                let c = config.channels_at(i);
                let p = format!("fe.{}.s{i}", stream.tag());
                b.conv(&format!("{p}.conv1"), c, 3, 3, Init::He);
                b.conv(&format!("{p}.conv2"), c, c, 3, Init::He);
                if i > 0 {
                    b.conv(&format!("{p}.reduce"), c, config.channels_at(i - 1), 3, Init::He);
                    b.conv(&format!("{p}.fuse"), c, 2 * c, 3, Init::He);
                }
            }
        }
        let k = (2 * config.correlation_range + 1).pow(2);
        for i in 0..n {
            let c = config.channels_at(i);
            let p = format!("loc.s{i}");
            b.conv(&format!("{p}.conv1"), c, 3 * c, 3, Init::He);
            b.conv(&format!("{p}.conv2"), c, c, 3, Init::He);
            b.conv(&format!("{p}.mask"), 1, c, 3, Init::Zero);
            b.constant(&format!("{p}.mask.b"), Shape::new(1, 1, 1, 1), init.mask_logit);
            b.conv(&format!("{p}.phi"), 2, c, 3, Init::Zero);

            let p = format!("mrb.s{i}");
            b.conv(&format!("{p}.compress"), c, 3 * c + 2 * k, 1, Init::He);
            b.constant(
                &format!("{p}.scale_logits"),
                Shape::new(1, 1, 1, config.patch_scales.len()),
                0.0,
            );
            for &s in &config.patch_scales {
                let q = format!("{p}.gmlp{s}");
                let bound = (3.0 / c as f64).sqrt();
                b.uniform(&format!("{q}.w1"), Shape::new(c, c, 1, 1), bound);
                b.uniform(&format!("{q}.w2"), Shape::new(c, c, 1, 1), bound);
                b.uniform(&format!("{q}.mix"), Shape::new(1, 1, s * s, s * s), 0.01);
                b.constant(&format!("{q}.mix_bias"), Shape::new(1, 1, 1, s * s), 1.0);
            }
            b.conv(&format!("{p}.att_vi"), c, c, 1, Init::Zero);
            b.conv(&format!("{p}.att_ir"), 1, 2, 7, Init::Zero);
            b.conv(&format!("{p}.bias1"), c, c, 3, Init::He);
            b.conv(&format!("{p}.bias2"), 3, c, 3, Init::Zero);
        }
        Ok(Model { config, params })
    }

    /// Check that `params` has exactly the layout this config builds.
    pub fn with_params(config: ModelConfig, params: Params) -> Result<Self> {
        let template = Model::new(config.clone(), 0, InitOptions::default())?;
        let want: Vec<(&str, Shape)> = template.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let got: Vec<(&str, Shape)> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if want != got {
            return Err(Error::CheckpointMismatch(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(Model { config, params })
    }

    /// Full forward pass on bound parameters. Inputs are `B×3×H×W` with
    /// `H`, `W` multiples of [`ModelConfig::divisor`].
    pub fn forward_graph(&self, g: &mut Graph, pv: &ParamVars, vi: Var, ir: Var, fused: Var) -> Result<Vec<ScaleVars>> {
        let cfg = &self.config;
        let s = g.shape(fused);
        ensure!(
            g.shape(vi) == s && g.shape(ir) == s,
            "input shapes differ: vi {}, ir {}, fused {s}",
            g.shape(vi),
            g.shape(ir)
        );
        ensure!(s.c == 3, "inputs must have 3 channels, got {s}");
        let d = cfg.divisor();
        ensure!(s.h % d == 0 && s.w % d == 0, "input {s} is not a multiple of {d}; pad it first");
        if !cfg.no_mrb {
            // Fail before any work on the unimplemented variants.
            match cfg.mrb_variant {
                MrbVariant::Gmlp => {}
                other => return Err(Error::NotImplemented(format!("MRB variant {other:?}"))),
            }
        }
        let n = cfg.pyramid_depth;
        let imgs_f = image_pyramid(g, fused, n)?;
        let imgs_vi = image_pyramid(g, vi, n)?;
        let imgs_ir = image_pyramid(g, ir, n)?;
        let feat_f = extract_pyramid(g, pv, cfg, &imgs_f, Stream::Fused)?;
        let feat_vi = extract_pyramid(g, pv, cfg, &imgs_vi, Stream::Visible)?;
        let feat_ir = extract_pyramid(g, pv, cfg, &imgs_ir, Stream::Infrared)?;
        let estimates = localize(g, pv, cfg, &feat_f, &feat_vi, &feat_ir)?;

        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (mask, phi) = estimates[i];
            // One-way warping is the m ≡ 1 case of the blend.
            let (i_warp, f_warp) = if cfg.one_way_warp {
                (warpcore::warp(g, imgs_f[i], phi)?, warpcore::warp(g, feat_f[i], phi)?)
            } else {
                (
                    warpcore::blend(g, imgs_f[i], phi, mask)?,
                    warpcore::blend(g, feat_f[i], phi, mask)?,
                )
            };
            let (i_bias, i_out) = if cfg.no_mrb {
                (None, i_warp)
            } else {
                let m = mrb_forward(g, pv, cfg, i, f_warp, feat_vi[i], feat_ir[i], i_warp)?;
                (Some(m.i_bias), m.i_out)
            };
            out.push(ScaleVars {
                i_warp,
                f_warp,
                i_bias,
                i_out,
                mask,
                phi,
            });
        }
        Ok(out)
    }

    /// Inference forward pass on plain arrays.
    pub fn forward(&self, vi: &Tensor, ir: &Tensor, fused: &Tensor) -> Result<Vec<ScaleOutput>> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let (a, b, c) = (g.constant(vi.clone()), g.constant(ir.clone()), g.constant(fused.clone()));
        let vars = self.forward_graph(&mut g, &pv, a, b, c)?;
        vars.iter().map(|v| ScaleOutput::from_vars(&g, v)).collect()
    }
}

#[cfg(test)]
mod tests;
