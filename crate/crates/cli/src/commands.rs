//! One function per subcommand. Each returns the process exit status.

use std::path::Path;

use fusionreg::checkpoint;
use fusionreg::data::{self, Channels};
use fusionreg::metrics::{self, MaskPair};
use fusionreg::register as reg;
use fusionreg::selftest::{self, SuiteOptions};
use fusionreg::simulate::{self, FuseMode, SampleOptions};
use fusionreg::train::{self as trainer, TrainOptions, TrainPair, TrainState};
use fusionreg::warpcore::{backward_warp, DeformationField};
use fusionreg::{MrbVariant, RunConfig, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::runlog::{parent_dir, require_dir, require_file, write_run_record, CliError, CliResult};
use crate::{EvaluateArgs, PriorArgs, RegisterArgs, SelftestArgs, SimulateArgs, TrainArgs, WarpDemoArgs};

fn resolve_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config file")?;
            RunConfig::from_file(p)?
        }
        None => RunConfig::desk(),
    };
    if a.no_mrb {
        cfg.set("no_mrb", "true")?;
    }
    if a.one_way_warp {
        cfg.set("one_way_warp", "true")?;
    }
    if let Some(v) = &a.mrb_variant {
        cfg.set("mrb_variant", v)?;
    }
    if let Some(n) = a.layers {
        cfg.set("pyramid_depth", &n.to_string())?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    if cfg.model.mrb_variant != MrbVariant::Gmlp && !cfg.model.no_mrb {
        return Err(CliError::usage(format!(
            "mrb variant {:?} is not implemented; use gmlp or --no-mrb",
            cfg.model.mrb_variant
        )));
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CliResult<u8> {
    require_dir(&a.data, "dataset")?;
    let cfg = resolve_config(&a)?;
    let records = data::scan_dataset(&a.data)?;
    let mut pairs = Vec::with_capacity(records.len());
    for rec in &records {
        let (visible, infrared) = data::load_pair(rec)?;
        let fused = match &rec.fused_path {
            Some(p) => Some(data::load_image(p, Channels::Rgb)?),
            None => None,
        };
        pairs.push(TrainPair {
            id: rec.identifier.clone(),
            visible,
            infrared,
            fused,
        });
    }
    let mut state = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            checkpoint::load(p, Some(&cfg.model))?.0
        }
        None => TrainState::for_run(&cfg)?,
    };
    write_run_record(
        &a.out,
        "train",
        json!({
            "config": cfg,
            "config_text": cfg.to_kv_text(),
            "data": a.data,
            "pairs": pairs.len(),
            "resume": a.resume,
            "resume_step": state.step,
            "planned_steps": trainer::planned_steps(&cfg, pairs.len()),
        }),
    )?;
    std::fs::write(a.out.join("config.txt"), cfg.to_kv_text())
        .map_err(|e| anyhow::anyhow!("writing config.txt: {e}"))?;
    log::info!("training on {} pairs from step {}", pairs.len(), state.step);
    let summary = trainer::train(
        &mut state,
        &pairs,
        &cfg,
        &TrainOptions {
            out_dir: Some(a.out.clone()),
            loss_report: None,
        },
    )?;
    checkpoint::save(
        &state,
        &checkpoint::Meta {
            loss: summary.last_loss.unwrap_or(f64::NAN),
        },
        &a.out.join("ckpt").join("final.ckpt"),
    )?;
    println!(
        "trained {} steps over {} epochs; first loss {}, last loss {}",
        summary.steps,
        summary.epochs,
        fmt_opt(summary.first_loss),
        fmt_opt(summary.last_loss)
    );
    Ok(0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}"))
}

fn fuser(name: &str) -> CliResult<FuseMode> {
    Ok(name.parse()?)
}

pub fn register(a: RegisterArgs) -> CliResult<u8> {
    require_file(&a.vi, "visible image")?;
    require_file(&a.ir, "infrared image")?;
    require_file(&a.ckpt, "checkpoint")?;
    let vi = data::load_image(&a.vi, Channels::Rgb)?;
    let ir = data::load_image(&a.ir, Channels::Gray)?;
    let fused = if a.fuse_internally {
        simulate::baseline_fuse(&vi, &ir, fuser(&a.fuser)?)?
    } else {
        let p = a
            .fused
            .as_ref()
            .ok_or_else(|| CliError::usage("--fused is required unless --fuse-internally is given"))?;
        require_file(p, "fused image")?;
        data::load_image(p, Channels::Rgb)?
    };
    let model = checkpoint::load_model(&a.ckpt, None)?;
    write_run_record(
        &a.out,
        "register",
        json!({
            "vi": a.vi,
            "ir": a.ir,
            "fused": a.fused,
            "fuse_internally": a.fuse_internally.then_some(&a.fuser),
            "ckpt": a.ckpt,
            "model": model.config,
        }),
    )?;
    let r = reg::register(&model, &vi, &ir, &fused)?;
    reg::write_outputs(&r, &a.out)?;
    println!(
        "registered {}x{}; mean |field| {:.4} px, mean mask {:.4}",
        fused.shape().w,
        fused.shape().h,
        r.field.magnitude().mean(),
        r.mask.tensor().mean()
    );
    Ok(0)
}

pub fn simulate(a: SimulateArgs) -> CliResult<u8> {
    require_dir(&a.input, "input dataset")?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let records = data::scan_dataset(&a.input)?;
    let opts = SampleOptions {
        fuser: fuser(&a.fuser)?,
        deform_only_ir: a.deform_only_ir,
    };
    write_run_record(
        &a.out,
        "simulate",
        json!({ "in": a.input, "seed": a.seed, "fuser": a.fuser, "count": a.count, "deform_only_ir": a.deform_only_ir }),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut manifest = String::from("# stem affine parameters\n");
    for k in 0..a.count {
        let rec = &records[k % records.len()];
        let (vi, ir) = data::load_pair(rec)?;
        let s = simulate::make_training_sample(&vi, &ir.channels(0, 1)?, &mut rng, &opts, None)?;
        let stem = format!("{}_{k:04}", rec.identifier);
        for (suffix, img) in [
            ("vi", &s.visible),
            ("ir", &s.deformed_infrared),
            ("f", &s.fused_deformed),
            ("gt", &s.fused_registered),
        ] {
            data::save_image(img, &a.out.join(format!("{stem}_{suffix}.png")))?;
        }
        manifest.push_str(&format!("{stem} {}\n", s.params));
    }
    let path = a.out.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    println!("wrote {} quadruples to {}", a.count, a.out.display());
    Ok(0)
}

fn load_mask_pairs(dir: &Path, stem: &str) -> CliResult<Vec<MaskPair>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let all = metrics::scan_mask_pairs(dir)?;
    let mut out = Vec::new();
    for (object, a, b) in all.get(stem).into_iter().flatten() {
        out.push(MaskPair {
            object: object.clone(),
            a: data::load_mask(a)?,
            b: data::load_mask(b)?,
        });
    }
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<u8> {
    require_dir(&a.before, "--before")?;
    require_dir(&a.after, "--after")?;
    if let Some(m) = &a.masks {
        require_dir(m, "--masks")?;
    }
    let before = data::images_by_stem(&a.before)?;
    let after = data::images_by_stem(&a.after)?;
    let stems: Vec<&String> = before.keys().filter(|s| after.contains_key(*s)).collect();
    if stems.is_empty() {
        return Err(CliError::usage("no image stems are shared by --before and --after"));
    }
    let out_dir = parent_dir(&a.out);
    write_run_record(
        out_dir,
        "evaluate",
        json!({ "before": a.before, "after": a.after, "masks": a.masks, "out": a.out, "images": stems.len() }),
    )?;
    let mut csv = format!("{}\n", metrics::REPORT_CSV_HEADER);
    let mut iou_deltas = Vec::new();
    for stem in stems {
        let b = data::load_image(&before[stem], Channels::Rgb)?;
        let f = data::load_image(&after[stem], Channels::Rgb)?;
        let (mb, ma) = match &a.masks {
            Some(m) => (load_mask_pairs(&m.join("before"), stem)?, load_mask_pairs(&m.join("after"), stem)?),
            None => (Vec::new(), Vec::new()),
        };
        let r = metrics::evaluate_run(&b, &f, &mb, &ma)?;
        iou_deltas.extend(r.iou_delta());
        csv.push_str(&metrics::report_csv_row(stem, &r));
        csv.push('\n');
    }
    std::fs::write(&a.out, csv).map_err(|e| anyhow::anyhow!("writing {}: {e}", a.out.display()))?;
    if !iou_deltas.is_empty() {
        let mean = iou_deltas.iter().sum::<f64>() / iou_deltas.len() as f64;
        println!("mean IoU change over {} images: {:+.4}", iou_deltas.len(), mean);
    }
    println!("report written to {}", a.out.display());
    Ok(0)
}

pub fn prior_analysis(a: PriorArgs) -> CliResult<u8> {
    require_file(&a.fused, "fused image")?;
    require_file(&a.gt, "reference image")?;
    if a.patch == 0 || a.stride == 0 {
        return Err(CliError::usage("--patch and --stride must be positive"));
    }
    let fused = data::load_image(&a.fused, Channels::Rgb)?;
    let gt = data::load_image(&a.gt, Channels::Rgb)?;
    let s = fused.shape();
    if gt.shape() != s {
        return Err(CliError::usage(format!("image sizes differ: {s} vs {}", gt.shape())));
    }
    if a.patch > s.h.min(s.w) {
        return Err(CliError::usage(format!("--patch {} exceeds the image size {}x{}", a.patch, s.w, s.h)));
    }
    let map = metrics::prior_map(&fused, &gt, a.patch, a.stride)?;
    let csv_path = a.out.with_extension("csv");
    write_run_record(
        parent_dir(&a.out),
        "prior-analysis",
        json!({ "fused": a.fused, "gt": a.gt, "patch": a.patch, "stride": a.stride, "out": a.out, "csv": csv_path }),
    )?;
    // Dissimilarity drives the heat ramp: bright where the fusion departs
    // from its reference.
    let dissim = map.pixel_map(s.h, s.w).map(|v| (1.0 - v).clamp(0.0, 1.0));
    data::save_image(&dissim, &a.out)?;
    std::fs::write(&csv_path, map.to_csv()).map_err(|e| anyhow::anyhow!("writing {}: {e}", csv_path.display()))?;
    let low = map.ssim.iter().filter(|&&v| v < 0.9).count();
    println!(
        "mean patch SSIM {:.4}; {low} of {} patches below 0.9",
        map.mean(),
        map.ssim.len()
    );
    Ok(0)
}

fn checkerboard(size: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let on = (y / 8 + x / 8) % 2 == 0;
        if on {
            0.9 - 0.2 * c as f64
        } else {
            0.1 + 0.1 * c as f64
        }
    })
}

pub fn warp_demo(a: WarpDemoArgs) -> CliResult<u8> {
    let img = match &a.input {
        Some(p) => {
            require_file(p, "input image")?;
            data::load_image(p, Channels::Rgb)?
        }
        None if a.size == 0 => return Err(CliError::usage("--size must be positive")),
        None => checkerboard(a.size),
    };
    if !(a.dx.is_finite() && a.dy.is_finite()) {
        return Err(CliError::usage("--dx and --dy must be finite"));
    }
    write_run_record(
        parent_dir(&a.out),
        "warp-demo",
        json!({ "input": a.input, "size": a.size, "dx": a.dx, "dy": a.dy, "out": a.out }),
    )?;
    let s = img.shape();
    let field = DeformationField::constant(s.b, s.h, s.w, a.dx, a.dy);
    let warped = backward_warp(&img, &field)?;
    data::save_image(&warped.clamp01(), &a.out)?;
    println!("warped {}x{} by ({}, {}) into {}", s.w, s.h, a.dx, a.dy, a.out.display());
    Ok(0)
}

pub fn selftest(a: SelftestArgs) -> CliResult<u8> {
    let opts = SuiteOptions {
        seed: a.seed,
        warp: if a.corrupt_warp {
            selftest::corrupted_warp
        } else {
            backward_warp
        },
    };
    write_run_record(&a.out, "selftest", json!({ "seed": a.seed, "corrupt_warp": a.corrupt_warp }))?;
    let report = selftest::run_suite(&opts);
    print!("{}", report.transcript());
    if report.passed() {
        println!("all groups passed");
        Ok(0)
    } else {
        println!("failing groups: {}", report.failed_groups().join(", "));
        Ok(crate::EXIT_INTERNAL)
    }
}
