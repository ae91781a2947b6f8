//! Grouped property suite behind the `selftest` command.
//!
//! Every group is a list of named checks with pass/fail and a short numeric
//! detail. The transcript contains no timings, so repeated runs with the
//! same seed print identical text.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, ModelConfig, RunConfig};
use crate::gradcheck::{check_gradients, check_gradients_at, GradReport};
use crate::graph::{Graph, Var};
use crate::losses::{self, loss_values, SOBEL_EPS};
use crate::metrics::{self, iou, pr_score, prior_map, BinaryMask};
use crate::network::{InitOptions, Model, ParamVars};
use crate::reference;
use crate::simulate::{self, AffineParams};
use crate::tensor::{Shape, Tensor};
use crate::train::{lr_schedule, objective_with_detail_masks, Batch};
use crate::warpcore::{self, backward_warp, bidirectional_blend, compose_fields, DeformationField, MisregMask, Refinement};
use crate::error::Result;

/// Tolerance of the warp identities and oracle comparison.
pub const WARP_TOL: f64 = 1e-6;
/// Relative tolerance of the finite-difference checks.
pub const GRAD_TOL: f64 = 1e-3;
/// Tolerance of the loss and metric oracle comparisons.
pub const ORACLE_TOL: f64 = 1e-5;
/// Number of affine draws in the simulation group.
pub const AFFINE_DRAWS: usize = 10_000;
/// Allowed deviation of each discrete-op frequency from one half.
pub const FLIP_TOL: f64 = 0.02;

/// Signature of a tensor-level backward warp.
pub type WarpKernel = fn(&Tensor, &DeformationField) -> Result<Tensor>;

/// Warp with the displacement sign flipped: samples at `x − φ`. Used as a
/// negative control; the warp group must reject it.
pub fn corrupted_warp(x: &Tensor, phi: &DeformationField) -> Result<Tensor> {
    backward_warp(x, &DeformationField::new(phi.tensor().neg())?)
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Kernel under test in the warp group.
    pub warp: WarpKernel,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            warp: backward_warp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl Group {
    fn new(name: &'static str) -> Self {
        Group { name, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Record `err ≤ tol`.
    fn within(&mut self, name: impl Into<String>, err: f64, tol: f64) {
        self.check(name, err <= tol, format!("error {err:.3e} (tolerance {tol:.0e})"));
    }

    /// Record a result that may have failed to compute at all.
    fn attempt(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.check(name, ok, detail),
            Err(e) => self.check(name, false, format!("error: {e}")),
        }
    }

    fn gradient(&mut self, name: &str, r: Result<GradReport>) {
        self.attempt(
            name,
            r.map(|rep| {
                (
                    rep.max_rel_err < GRAD_TOL,
                    format!("max relative error {:.3e} over {} entries", rep.max_rel_err, rep.checked),
                )
            }),
        );
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub groups: Vec<Group>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(Group::passed)
    }

    pub fn failed_groups(&self) -> Vec<&'static str> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.name).collect()
    }

    /// One line per group, plus one indented line per failing check.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let ok = g.checks.iter().filter(|c| c.passed).count();
            let verdict = if g.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{verdict} {} ({ok}/{})", g.name, g.checks.len());
            for c in g.failures() {
                let _ = writeln!(out, "    failed: {}: {}", c.name, c.detail);
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(s, |_, _, _, _| rng.gen_range(lo..hi))
}

fn textured(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    let (fx, fy, ph) = (rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.0..6.0));
    Tensor::from_fn(s, |_, c, y, x| {
        0.5 + 0.35 * ((x as f64 * fx + ph + c as f64).sin() * (y as f64 * fy).cos())
    })
}

fn field(t: Tensor) -> Result<DeformationField> {
    DeformationField::new(t)
}

/// Blend built from an arbitrary warp kernel.
fn blend_with(warp: WarpKernel, x: &Tensor, phi: &DeformationField, m: &Tensor) -> Result<Tensor> {
    let fwd = warp(x, phi)?;
    let rev = warp(x, &field(phi.tensor().neg())?)?;
    let s = x.shape();
    Ok(Tensor::from_fn(s, |b, c, y, xx| {
        let w = m.at(b, 0, y, xx);
        w * fwd.at(b, c, y, xx) + (1.0 - w) * rev.at(b, c, y, xx)
    }))
}

/// Warp identities on 8×8 inputs.
pub fn warp_group(opts: &SuiteOptions) -> Group {
    let mut g = Group::new("warp-identities");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x11);
    let warp = opts.warp;
    let s = Shape::new(1, 2, 8, 8);
    let x = uniform(&mut rng, s, 0.0, 1.0);
    let y = uniform(&mut rng, s, 0.0, 1.0);
    let phi = match field(uniform(&mut rng, s, -2.5, 2.5)) {
        Ok(f) => f,
        Err(e) => {
            g.check("setup", false, e.to_string());
            return g;
        }
    };
    let m = uniform(&mut rng, s.with_c(1), 0.0, 1.0);

    g.attempt(
        "zero field is the identity",
        warp(&x, &DeformationField::constant(1, 8, 8, 0.0, 0.0)).map(|o| {
            let e = o.max_abs_diff(&x);
            (e <= WARP_TOL, format!("error {e:.3e}"))
        }),
    );
    g.attempt(
        "unit horizontal shift reads the right neighbour",
        warp(&x, &DeformationField::constant(1, 8, 8, 1.0, 0.0)).map(|o| {
            let mut e: f64 = 0.0;
            for c in 0..2 {
                for r in 0..8 {
                    for col in 0..7 {
                        e = e.max((o.at(0, c, r, col) - x.at(0, c, r, col + 1)).abs());
                    }
                }
            }
            (e <= WARP_TOL, format!("error {e:.3e}"))
        }),
    );
    g.attempt(
        "matches brute-force bilinear oracle",
        warp(&x, &phi).map(|o| {
            let e = o.max_abs_diff(&reference::bilinear_warp(&x, phi.tensor()));
            (e <= WARP_TOL, format!("error {e:.3e}"))
        }),
    );
    g.attempt(
        "linear in the image",
        (|| {
            let (a, b) = (0.7, -1.3);
            let mut combo = x.scale(a);
            combo.axpy(b, &y);
            let lhs = warp(&combo, &phi)?;
            let mut rhs = warp(&x, &phi)?.scale(a);
            rhs.axpy(b, &warp(&y, &phi)?);
            let e = lhs.max_abs_diff(&rhs);
            Ok((e <= WARP_TOL, format!("error {e:.3e}")))
        })(),
    );
    g.attempt(
        "partition of unity in the interior",
        (|| {
            let inner = field(uniform(&mut rng, s, -1.0, 1.0))?;
            let ones = Tensor::full(s, 1.0);
            let o = warp(&ones, &inner)?;
            let mut e: f64 = 0.0;
            for c in 0..2 {
                for r in 1..7 {
                    for col in 1..7 {
                        e = e.max((o.at(0, c, r, col) - 1.0).abs());
                    }
                }
            }
            Ok((e <= WARP_TOL, format!("error {e:.3e}")))
        })(),
    );
    g.attempt(
        "blend branches swap under ±φ with complementary masks",
        (|| {
            let lhs = blend_with(warp, &x, &phi, &m)?;
            let neg = field(phi.tensor().neg())?;
            let rhs = blend_with(warp, &x, &neg, &m.map(|v| 1.0 - v))?;
            let e = lhs.max_abs_diff(&rhs);
            Ok((e <= WARP_TOL, format!("error {e:.3e}")))
        })(),
    );
    g.attempt(
        "blend agrees with the network kernel",
        (|| {
            let ours = blend_with(warp, &x, &phi, &m)?;
            let net = bidirectional_blend(&x, &phi, &MisregMask::new(m.clone())?)?;
            let e = ours.max_abs_diff(&net);
            Ok((e <= WARP_TOL, format!("error {e:.3e}")))
        })(),
    );
    g
}

/// Coarse-to-fine composition identities.
pub fn refinement_group() -> Group {
    let mut g = Group::new("field-refinement");
    let fine = DeformationField::constant(1, 8, 8, 0.8, -0.3);
    let exact = |r: Result<DeformationField>, want: &dyn Fn(usize) -> f64| -> Result<(bool, String)> {
        let f = r?;
        let bad = f
            .tensor()
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v != want(i / 64))
            .count();
        Ok((bad == 0, format!("{bad} entries differ")))
    };
    g.attempt(
        "zero coarse field leaves the fine field unchanged",
        exact(
            compose_fields(&fine, &DeformationField::constant(1, 4, 4, 0.0, 0.0)),
            &|c| if c == 0 { 0.8 } else { -0.3 },
        ),
    );
    g.attempt(
        "zero fine field annihilates",
        exact(
            compose_fields(&DeformationField::constant(1, 8, 8, 0.0, 0.0), &DeformationField::constant(1, 4, 4, 1.7, -2.2)),
            &|_| 0.0,
        ),
    );
    g.attempt(
        "unit fine field with half coarse field gives 2",
        exact(
            compose_fields(&DeformationField::constant(1, 8, 8, 1.0, 1.0), &DeformationField::constant(1, 4, 4, 0.5, 0.5)),
            &|_| 2.0,
        ),
    );
    g
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        pyramid_depth: 2,
        ..ModelConfig::default()
    }
}

/// Analytic gradient of the total loss against central differences for
/// `count` randomly picked parameters of a 16×16, 4-channel, 2-level model.
pub fn network_gradient_check(seed: u64, count: usize) -> Result<GradReport> {
    let mut model = Model::new(tiny_model_config(), seed, InitOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    model.params.randomize(&mut rng, 0.3);
    let s = Shape::new(1, 3, 16, 16);
    let batch = Batch {
        visible: textured(&mut rng, s),
        infrared: textured(&mut rng, s),
        fused: textured(&mut rng, s),
        target: textured(&mut rng, s),
    };
    // The detail loss weighs by constant masks; freeze them at this point.
    let masks: Vec<Tensor> = model
        .forward(&batch.visible, &batch.infrared, &batch.fused)?
        .into_iter()
        .map(|o| o.mask.tensor().clone())
        .collect();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let picks: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            (i, rng.gen_range(0..inputs[i].numel()))
        })
        .collect();
    let w = LossWeights::default();
    check_gradients_at(&inputs, &picks, 1e-6, |g, vars| {
        let pv = ParamVars::from_named(names.iter().map(String::as_str), vars);
        let (_, terms) = objective_with_detail_masks(g, &model, &pv, &batch, &w, Some(&masks))?;
        Ok(terms.total)
    })
}

fn sum_of_squares(g: &mut Graph, v: Var) -> Var {
    let sq = g.square(v);
    g.sum(sq)
}

/// Finite-difference checks of the kernels, the losses and the network.
pub fn gradient_group(opts: &SuiteOptions) -> Group {
    let mut grp = Group::new("gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x22);
    let s = Shape::new(1, 2, 8, 8);
    let x = uniform(&mut rng, s, 0.0, 1.0);
    let phi = uniform(&mut rng, s, -1.7, 1.7);
    let m = uniform(&mut rng, s.with_c(1), 0.0, 1.0);
    let coarse = uniform(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);

    grp.gradient(
        "backward warp (image and field)",
        check_gradients(&[x.clone(), phi.clone()], 1e-6, |g, v| {
            let o = warpcore::warp(g, v[0], v[1])?;
            Ok(sum_of_squares(g, o))
        }),
    );
    grp.gradient(
        "bidirectional blend",
        check_gradients(&[x.clone(), phi.clone(), m.clone()], 1e-6, |g, v| {
            let o = warpcore::blend(g, v[0], v[1], v[2])?;
            Ok(sum_of_squares(g, o))
        }),
    );
    grp.gradient(
        "field composition",
        // The product is quartic in the inputs; a wider step keeps round-off
        // below the truncation error.
        check_gradients(&[phi.clone(), coarse], 1e-4, |g, v| {
            let o = warpcore::compose(g, v[0], v[1], Refinement::Multiplicative)?;
            Ok(sum_of_squares(g, o))
        }),
    );
    let a = uniform(&mut rng, s, -1.0, 1.0);
    let b = uniform(&mut rng, s, -1.0, 1.0);
    grp.gradient(
        "correlation layer",
        check_gradients(&[a, b], 1e-6, |g, v| {
            let o = warpcore::correlation(g, v[0], v[1], 1)?;
            Ok(sum_of_squares(g, o))
        }),
    );

    let out = uniform(&mut rng, s, 0.0, 1.0);
    let warped = uniform(&mut rng, s, 0.0, 1.0);
    let gt = uniform(&mut rng, s, 0.0, 1.0);
    let losses: [(&str, fn(&mut Graph, &[Var]) -> Result<Var>); 4] = [
        ("edge loss", |g, v| losses::edge_loss(g, &v[0..1], &v[1..2], &v[2..3])),
        ("global loss", |g, v| losses::global_loss(g, &v[0..1], &v[2..3])),
        ("frequency loss", |g, v| losses::frequency_loss(g, &v[0..1], &v[2..3])),
        ("detail loss", |g, v| losses::detail_loss(g, &v[0..1], &v[2..3], &v[3..4])),
    ];
    for (name, f) in losses {
        grp.gradient(
            name,
            check_gradients(&[out.clone(), warped.clone(), gt.clone()], 1e-6, |g, v| {
                let mut all = v.to_vec();
                all.push(g.constant(m.clone()));
                f(g, &all)
            }),
        );
    }
    grp.gradient("20 network parameters", network_gradient_check(opts.seed, 20));
    grp
}

/// Case sizes of the oracle groups: 10 cases with sides in 8..=32.
fn oracle_sizes(rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..10).map(|_| (rng.gen_range(8..=32), rng.gen_range(8..=32))).collect()
}

/// Losses against literal reference implementations.
pub fn loss_oracle_group(opts: &SuiteOptions) -> Group {
    let mut grp = Group::new("loss-oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x33);
    let unit = LossWeights {
        edge: 1.0,
        global: 1.0,
        frequency: 1.0,
        detail: 1.0,
    };
    let (mut edge, mut global, mut freq, mut detail) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut failed = None;
    for (h, w) in oracle_sizes(&mut rng) {
        let s = Shape::new(1, 3, h, w);
        let (o, wp, gt) = (
            uniform(&mut rng, s, 0.0, 1.0),
            uniform(&mut rng, s, 0.0, 1.0),
            uniform(&mut rng, s, 0.0, 1.0),
        );
        let m = uniform(&mut rng, s.with_c(1), 0.0, 1.0);
        match loss_values(&[o.clone()], &[wp.clone()], &[m.clone()], &[gt.clone()], &unit) {
            Ok(v) => {
                let e = reference::rms(&reference::dog(&o), &reference::dog(&gt))
                    + reference::rms(&reference::dog(&wp), &reference::dog(&gt));
                edge = edge.max((v.edge - e).abs());
                global = global.max((v.global - reference::rms(&o, &gt)).abs());
                freq = freq.max((v.frequency - reference::frequency_distance(&o, &gt)).abs());
                detail = detail.max((v.detail - reference::masked_sobel_distance(&o, &gt, &m, SOBEL_EPS)).abs());
            }
            Err(e) => failed = Some(format!("{h}×{w}: {e}")),
        }
    }
    if let Some(msg) = failed {
        grp.check("loss evaluation", false, msg);
    }
    grp.within("edge loss vs difference-of-Gaussians oracle", edge, ORACLE_TOL);
    grp.within("global loss vs RMS oracle", global, ORACLE_TOL);
    grp.within("frequency loss vs direct DFT oracle", freq, ORACLE_TOL);
    grp.within("detail loss vs Sobel oracle", detail, ORACLE_TOL);
    grp
}

/// Quality and overlap metrics against references and closed forms.
pub fn metric_oracle_group(opts: &SuiteOptions) -> Group {
    let mut grp = Group::new("metric-oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x44);
    let (mut en, mut sf, mut ag, mut sd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut failed = None;
    for (h, w) in oracle_sizes(&mut rng) {
        let img = uniform(&mut rng, Shape::new(1, 1, h, w), 0.0, 1.0);
        let p = img.plane(0, 0);
        let r = (|| -> Result<()> {
            en = en.max((metrics::entropy(&img)? - reference::entropy(p)).abs());
            sf = sf.max((metrics::spatial_frequency(&img)? - reference::spatial_frequency(p, h, w)).abs());
            ag = ag.max((metrics::average_gradient(&img)? - reference::average_gradient(p, h, w)).abs());
            sd = sd.max((metrics::std_dev(&img)? - reference::std_dev(p)).abs());
            Ok(())
        })();
        if let Err(e) = r {
            failed = Some(format!("{h}×{w}: {e}"));
        }
    }
    if let Some(msg) = failed {
        grp.check("metric evaluation", false, msg);
    }
    grp.within("entropy", en, ORACLE_TOL);
    grp.within("spatial frequency", sf, ORACLE_TOL);
    grp.within("average gradient", ag, ORACLE_TOL);
    grp.within("standard deviation", sd, ORACLE_TOL);

    let a = BinaryMask::from_fn(8, 8, |y, x| y < 4 && x < 4);
    let b = BinaryMask::from_fn(8, 8, |y, x| y < 4 && (2..6).contains(&x));
    grp.attempt(
        "IoU of half-overlapping squares is 1/3",
        iou(&a, &b).map(|v| ((v - 1.0 / 3.0).abs() < 1e-12, format!("IoU {v}"))),
    );
    grp.attempt(
        "IoU and PR of identical masks are 1",
        iou(&a, &a).and_then(|i| pr_score(&a, &a).map(|p| (i == 1.0 && p == 1.0, format!("IoU {i}, PR {p}")))),
    );
    grp.attempt(
        "patch similarity of an image with itself is 1",
        prior_map(&textured(&mut rng, Shape::new(1, 3, 24, 24)), &textured(&mut rng, Shape::new(1, 3, 24, 24)), 8, 4)
            .and_then(|_| {
                let t = textured(&mut rng, Shape::new(1, 3, 24, 24));
                let map = prior_map(&t, &t, 8, 4)?;
                let e = map.ssim.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
                Ok((e < 1e-12, format!("error {e:.3e}")))
            }),
    );
    grp
}

/// Misregistration sampler ranges and discrete-op frequencies.
pub fn simulation_group(opts: &SuiteOptions) -> Group {
    let mut grp = Group::new("simulation-ranges");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x55);
    let draws: Vec<AffineParams> = (0..AFFINE_DRAWS).map(|_| simulate::sample_affine(&mut rng)).collect();
    let outside = draws.iter().filter(|p| !p.in_ranges()).count();
    grp.check(
        format!("{AFFINE_DRAWS} draws inside the configured ranges"),
        outside == 0,
        format!("{outside} outside"),
    );
    let freq = |f: fn(&AffineParams) -> bool| draws.iter().filter(|p| f(p)).count() as f64 / AFFINE_DRAWS as f64;
    for (name, p) in [
        ("horizontal flip frequency", freq(|p| p.flip_h)),
        ("vertical flip frequency", freq(|p| p.flip_v)),
        ("quarter-turn frequency", freq(|p| p.rot90_k != 0)),
    ] {
        grp.check(name, (p - 0.5).abs() <= FLIP_TOL, format!("{p:.4}"));
    }
    grp
}

/// Learning-rate schedule endpoints of the full-scale configuration.
pub fn schedule_group() -> Group {
    let mut grp = Group::new("lr-schedule");
    let cfg = RunConfig::full();
    let total = 1000;
    grp.attempt(
        "first step uses lr_start exactly",
        lr_schedule(0, total, cfg.lr_start, cfg.lr_end).map(|v| (v == 2e-4, format!("{v:e}"))),
    );
    grp.attempt(
        "last step uses lr_end exactly",
        lr_schedule(total, total, cfg.lr_start, cfg.lr_end).map(|v| (v == 1e-6, format!("{v:e}"))),
    );
    grp
}

/// Every group, in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    SuiteReport {
        groups: vec![
            warp_group(opts),
            refinement_group(),
            gradient_group(opts),
            loss_oracle_group(opts),
            metric_oracle_group(opts),
            simulation_group(opts),
            schedule_group(),
        ],
    }
}
