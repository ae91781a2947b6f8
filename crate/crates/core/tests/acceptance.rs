//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fusionreg::checkpoint;
use fusionreg::network::{image_pyramid_tensor, InitOptions};
use fusionreg::register::register;
use fusionreg::selftest::{self, Group, SuiteOptions};
use fusionreg::synth::{generate_corpus, held_out_cases, measure_gain, DEFAULT_SIZE};
use fusionreg::train::{fixed_samples, mean_loss, sample_options, train, TrainOptions, TrainPair, TrainState};
use fusionreg::warpcore::backward_warp;
use fusionreg::{Model, ModelConfig, RunConfig, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_PAIRS: usize = 32;
const HELD_OUT_PAIRS: usize = 8;
/// Fixed samples for the before/after loss comparison.
const LOSS_PROBE_SEED: u64 = 5;
const HELD_OUT_SEED: u64 = 77;
const PRIOR_PATCH: usize = 32;
const PRIOR_STRIDE: usize = 16;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    fn from_groups(groups: &[Group]) -> Self {
        let failures: Vec<String> = groups
            .iter()
            .flat_map(|g| g.failures().map(move |c| format!("{}: {} ({})", g.name, c.name, c.detail)))
            .collect();
        let checks: usize = groups.iter().map(|g| g.checks.len()).sum();
        if failures.is_empty() {
            Outcome::new(true, format!("{checks} checks"))
        } else {
            Outcome::new(false, failures.join("; "))
        }
    }
}

struct Ledger {
    failures: usize,
}

impl Ledger {
    /// Run `body`, enforce the time budget and print the verdict line.
    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, body: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut out = body();
        let took = start.elapsed();
        if let Some(b) = budget {
            if took > b {
                out.passed = false;
                out.detail = format!("{}; over the {:.0} s budget", out.detail, b.as_secs_f64());
            }
        }
        let verdict = if out.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{:.2} s]", out.detail, took.as_secs_f64());
        if !out.passed {
            self.failures += 1;
        }
    }
}

fn random_image(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::from_fn(s, |_, _, _, _| rng.gen::<f64>())
}

fn identity_registrar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let cfg = ModelConfig {
            base_channels: 4,
            pyramid_depth: 2 + i % 2,
            ..ModelConfig::default()
        };
        let model = match Model::new(cfg, i as u64, InitOptions::default()) {
            Ok(m) => m,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let s = Shape::new(1, 3, rng.gen_range(9..40), rng.gen_range(9..40));
        let (vi, ir, fused) = (random_image(&mut rng, s), random_image(&mut rng, s.with_c(1)), random_image(&mut rng, s));
        match register(&model, &vi, &ir, &fused) {
            Ok(r) => worst = worst.max(r.output.max_abs_diff(&fused)),
            Err(e) => return Outcome::new(false, e.to_string()),
        }
    }
    Outcome::new(worst <= 1e-6, format!("max |I_out − I_f| = {worst:.3e} over 10 inputs (limit 1e-6)"))
}

fn randomized_model(cfg: ModelConfig, seed: u64) -> fusionreg::Result<Model> {
    let mut model = Model::new(cfg, seed, InitOptions::default())?;
    model.params.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 0.3);
    Ok(model)
}

fn ablation_wiring() -> fusionreg::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = Shape::new(1, 3, 32, 32);
    let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));
    let base = ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    };

    let no_mrb = randomized_model(ModelConfig { no_mrb: true, ..base.clone() }, 3)?;
    let outs = no_mrb.forward(&vi, &ir, &f)?;
    let mrb_ok = outs.iter().all(|o| o.i_out.data() == o.i_warp.data());

    let one_way = randomized_model(ModelConfig { one_way_warp: true, ..base }, 4)?;
    let outs = one_way.forward(&vi, &ir, &f)?;
    let levels = image_pyramid_tensor(&f, one_way.config.pyramid_depth)?;
    let mut warp_ok = true;
    for (o, level) in outs.iter().zip(&levels) {
        warp_ok &= backward_warp(level, &o.phi)?.data() == o.i_warp.data();
    }
    Ok(Outcome::new(
        mrb_ok && warp_ok,
        format!("no-mrb I_out ≡ I_warp: {mrb_ok}; one-way I_warp ≡ BW(I_f, φ): {warp_ok}"),
    ))
}

fn checkpoint_round_trip() -> fusionreg::Result<Outcome> {
    let cfg = ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    };
    let model = randomized_model(cfg.clone(), 12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = Shape::new(1, 3, 24, 24);
    let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));
    let before = model.forward(&vi, &ir, &f)?;
    let dir = tempfile::tempdir().map_err(|e| fusionreg::Error::Format(e.to_string()))?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save_model(&model, &path)?;
    let loaded = checkpoint::load_model(&path, Some(&cfg))?;
    let after = loaded.forward(&vi, &ir, &f)?;
    let same = before == after && loaded.params == model.params;
    Ok(Outcome::new(same, format!("forward outputs bitwise identical: {same}")))
}

struct DeskRun {
    ratio: f64,
    loss_before: f64,
    loss_after: f64,
    steps: u64,
    model: Model,
}

fn desk_training(pairs: &[TrainPair], cfg: &RunConfig) -> fusionreg::Result<DeskRun> {
    let probe = fixed_samples(pairs, cfg, LOSS_PROBE_SEED)?;
    let mut state = TrainState::for_run(cfg)?;
    let before = mean_loss(&state.model, &probe, cfg.batch_size, &cfg.loss_weights)?.total;
    let summary = train(&mut state, pairs, cfg, &TrainOptions::default())?;
    let after = mean_loss(&state.model, &probe, cfg.batch_size, &cfg.loss_weights)?.total;
    Ok(DeskRun {
        ratio: after / before,
        loss_before: before,
        loss_after: after,
        steps: summary.steps,
        model: state.model,
    })
}

fn unwrap_or_fail(r: fusionreg::Result<Outcome>) -> Outcome {
    r.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")))
}

fn main() -> ExitCode {
    let mut ledger = Ledger { failures: 0 };
    let opts = SuiteOptions::default();

    ledger.run(1, "identity registrar", Some(Duration::from_secs(10)), identity_registrar);
    ledger.run(2, "warp kernel suite", Some(Duration::from_secs(30)), || {
        Outcome::from_groups(&[selftest::warp_group(&opts)])
    });
    ledger.run(3, "gradient suite", Some(Duration::from_secs(120)), || {
        Outcome::from_groups(&[selftest::gradient_group(&opts)])
    });
    ledger.run(4, "loss and metric oracles", None, || {
        Outcome::from_groups(&[selftest::loss_oracle_group(&opts), selftest::metric_oracle_group(&opts)])
    });
    ledger.run(5, "field composition identities", None, || {
        Outcome::from_groups(&[selftest::refinement_group()])
    });
    ledger.run(6, "simulation ranges", None, || {
        Outcome::from_groups(&[selftest::simulation_group(&opts)])
    });

    let cfg = RunConfig::desk();
    let corpus = generate_corpus(cfg.rng_seed, TRAIN_PAIRS + HELD_OUT_PAIRS, DEFAULT_SIZE);
    let mut desk: Option<DeskRun> = None;
    ledger.run(7, "desk-scale convergence", Some(Duration::from_secs(600)), || {
        let run = corpus.as_ref().map_err(|e| fusionreg::Error::Format(e.to_string())).and_then(|c| {
            let pairs = c[..TRAIN_PAIRS]
                .iter()
                .map(|p| p.to_train_pair())
                .collect::<fusionreg::Result<Vec<_>>>()?;
            desk_training(&pairs, &cfg)
        });
        match run {
            Ok(r) => {
                let finite = r.model.params.is_finite();
                let o = Outcome::new(
                    r.ratio < 0.5 && finite,
                    format!(
                        "loss {:.4} → {:.4} after {} steps, ratio {:.3} (limit < 0.5), parameters finite: {finite}",
                        r.loss_before, r.loss_after, r.steps, r.ratio
                    ),
                );
                desk = Some(r);
                o
            }
            Err(e) => Outcome::new(false, format!("training failed: {e}")),
        }
    });
    ledger.run(8, "desk-scale registration gain", Some(Duration::from_secs(300)), || {
        let (Some(run), Ok(c)) = (&desk, &corpus) else {
            return Outcome::new(false, "no trained model");
        };
        let gain = held_out_cases(&c[TRAIN_PAIRS..], HELD_OUT_SEED, &sample_options(&cfg))
            .and_then(|cases| measure_gain(&run.model, &cases, PRIOR_PATCH, PRIOR_STRIDE));
        match gain {
            Ok(g) => Outcome::new(
                g.iou_gain() >= 0.02 && g.prior_after > g.prior_before,
                format!(
                    "IoU {:.4} → {:.4} ({:+.2} points, need ≥ +2), prior {:.4} → {:.4}, {} objects in {} pairs",
                    g.iou_before,
                    g.iou_after,
                    100.0 * g.iou_gain(),
                    g.prior_before,
                    g.prior_after,
                    g.objects,
                    g.cases
                ),
            ),
            Err(e) => Outcome::new(false, format!("error: {e}")),
        }
    });

    ledger.run(9, "ablation wiring", None, || unwrap_or_fail(ablation_wiring()));
    ledger.run(10, "learning-rate schedule endpoints", None, || {
        Outcome::from_groups(&[selftest::schedule_group()])
    });
    ledger.run(11, "checkpoint round trip", None, || unwrap_or_fail(checkpoint_round_trip()));

    if ledger.failures == 0 {
        println!("all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} of 11 criteria failed", ledger.failures);
        ExitCode::FAILURE
    }
}
