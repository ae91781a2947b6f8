//! Adam optimization with a cosine learning-rate schedule, global-norm
//! gradient clipping, CSV logging and per-epoch checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{LossWeights, RunConfig};
use crate::data::random_crop;
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::losses::{self, LossInputs, LossTerms, LossValues};
use crate::network::{image_pyramid, InitOptions, Model, ParamVars, Params, ScaleVars};
use crate::simulate::{make_training_sample, SampleOptions, TrainingSample};
use crate::tensor::{ImagePlane, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    ensure!(step <= total_steps, "step {step} beyond schedule length {total_steps}");
    if total_steps == 0 {
        return Ok(lr_start);
    }
    if step == 0 {
        return Ok(lr_start);
    }
    if step == total_steps {
        return Ok(lr_end);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Stacked training quadruples, each `B×3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub visible: Tensor,
    pub infrared: Tensor,
    pub fused: Tensor,
    pub target: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[TrainingSample]) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let stack = |f: fn(&TrainingSample) -> &Tensor| -> Result<Tensor> {
            let items: Vec<Tensor> = samples.iter().map(|s| f(s).clone()).collect();
            Tensor::stack(&items)
        };
        Ok(Batch {
            visible: stack(|s| &s.visible)?,
            infrared: stack(|s| &s.deformed_infrared)?,
            fused: stack(|s| &s.fused_deformed)?,
            target: stack(|s| &s.fused_registered)?,
        })
    }
}

/// Forward pass plus the weighted objective against the target pyramid.
pub fn objective(
    g: &mut Graph,
    model: &Model,
    pv: &ParamVars,
    batch: &Batch,
    w: &LossWeights,
) -> Result<(Vec<ScaleVars>, LossTerms)> {
    objective_with_detail_masks(g, model, pv, batch, w, None)
}

/// [`objective`] with the detail-loss weighting masks supplied from outside.
///
/// The detail loss treats the masks as constants, so the function whose
/// gradient training follows is the loss with masks frozen at the current
/// point. Finite-difference checks need exactly that function.
pub fn objective_with_detail_masks(
    g: &mut Graph,
    model: &Model,
    pv: &ParamVars,
    batch: &Batch,
    w: &LossWeights,
    detail_masks: Option<&[Tensor]>,
) -> Result<(Vec<ScaleVars>, LossTerms)> {
    let vi = g.constant(batch.visible.clone());
    let ir = g.constant(batch.infrared.clone());
    let f = g.constant(batch.fused.clone());
    let gt = g.constant(batch.target.clone());
    let scales = model.forward_graph(g, pv, vi, ir, f)?;
    let gts = image_pyramid(g, gt, model.config.pyramid_depth)?;
    let outs: Vec<_> = scales.iter().map(|s| s.i_out).collect();
    let warps: Vec<_> = scales.iter().map(|s| s.i_warp).collect();
    let masks: Vec<_> = match detail_masks {
        Some(fixed) => {
            ensure!(fixed.len() == scales.len(), "expected {} masks, got {}", scales.len(), fixed.len());
            fixed.iter().map(|m| g.constant(m.clone())).collect()
        }
        None => scales.iter().map(|s| s.mask).collect(),
    };
    let terms = losses::total_loss(
        g,
        &LossInputs {
            outs: &outs,
            warps: &warps,
            masks: &masks,
            gts: &gts,
        },
        w,
    )?;
    Ok((scales, terms))
}

/// Loss of `model` on `batch` without building gradients.
pub fn evaluate_loss(model: &Model, batch: &Batch, w: &LossWeights) -> Result<LossValues> {
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, false);
    let (_, terms) = objective(&mut g, model, &pv, batch, w)?;
    Ok(terms.values(&g))
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Adam first moments.
    pub moment1: Params,
    /// Adam second moments.
    pub moment2: Params,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub best_loss: f64,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        TrainState {
            moment1: model.params.zeros_like(),
            moment2: model.params.zeros_like(),
            model,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_loss: f64::INFINITY,
        }
    }

    /// Fresh state for a run configuration.
    pub fn for_run(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(
            cfg.model.clone(),
            cfg.rng_seed,
            InitOptions {
                mask_logit: cfg.mask_logit_init,
            },
        )?;
        // Parameter init and data sampling draw from distinct streams.
        Ok(TrainState::new(model, cfg.rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub lr: f64,
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Pre-update loss.
    pub loss: LossValues,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One Adam update; returns the loss before the update.
pub fn train_step(state: &mut TrainState, batch: &Batch, opts: &StepOptions) -> Result<StepReport> {
    let mut g = Graph::new();
    let pv = state.model.params.bind(&mut g, true);
    let (_, terms) = objective(&mut g, &state.model, &pv, batch, &opts.weights)?;
    let loss = terms.values(&g);
    let mut grads = g.backward(terms.total);

    let mut collected = Vec::with_capacity(state.model.params.len());
    let mut sq = 0.0;
    for (name, var) in pv.iter() {
        let shape = g.shape(var);
        let gr = grads.take(var).unwrap_or_else(|| Tensor::zeros(shape));
        sq += gr.sq_norm();
        collected.push((name.to_string(), gr));
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            component: "gradient",
            value: grad_norm,
            dump: loss.to_string(),
        });
    }
    let scale = match opts.grad_clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, gr) in collected {
        let p = state.model.params.get_mut(&name)?;
        let m = state.moment1.get_mut(&name)?;
        let v = state.moment2.get_mut(&name)?;
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in gr.data().iter().enumerate() {
            let gi = gi * scale;
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= opts.lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    state.step += 1;
    Ok(StepReport { loss, grad_norm })
}

/// A registered source pair, optionally with an externally fused image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub visible: ImagePlane,
    pub infrared: ImagePlane,
    pub fused: Option<ImagePlane>,
}

/// Crop a patch from `pair` and synthesize its misregistered quadruple.
pub fn sample_from_pair<R: rand::Rng>(
    pair: &TrainPair,
    patch: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<TrainingSample> {
    let mut planes = vec![&pair.visible, &pair.infrared];
    if let Some(f) = &pair.fused {
        planes.push(f);
    }
    let crops = random_crop(&planes, patch, rng)?;
    make_training_sample(&crops[0], &crops[1], rng, opts, crops.get(2))
}

/// Fixed evaluation quadruples drawn with their own seed.
pub fn fixed_samples(pairs: &[TrainPair], cfg: &RunConfig, seed: u64) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = sample_options(cfg);
    pairs
        .iter()
        .map(|p| sample_from_pair(p, cfg.patch_size, &opts, &mut rng))
        .collect()
}

/// Mean loss over `samples`, evaluated in chunks of `batch_size`.
pub fn mean_loss(model: &Model, samples: &[TrainingSample], batch_size: usize, w: &LossWeights) -> Result<LossValues> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let mut acc = LossValues::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let v = evaluate_loss(model, &Batch::from_samples(chunk)?, w)?;
        let k = chunk.len() as f64;
        acc.total += v.total * k;
        acc.edge += v.edge * k;
        acc.global += v.global * k;
        acc.frequency += v.frequency * k;
        acc.detail += v.detail * k;
    }
    let n = samples.len() as f64;
    Ok(LossValues {
        total: acc.total / n,
        edge: acc.edge / n,
        global: acc.global / n,
        frequency: acc.frequency / n,
        detail: acc.detail / n,
    })
}

pub fn sample_options(cfg: &RunConfig) -> SampleOptions {
    SampleOptions {
        fuser: cfg.fuser,
        deform_only_ir: cfg.deform_only_ir,
    }
}

/// Steps one full run will take.
pub fn planned_steps(cfg: &RunConfig, pairs: usize) -> usize {
    let per_epoch = pairs.div_ceil(cfg.batch_size);
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Run directory; `log.csv` and `ckpt/` go here. `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Also write per-step loss components here.
    pub loss_report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub best_loss: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,total,edge,global,frequency,detail,grad_norm";

struct Logs {
    files: Vec<BufWriter<File>>,
}

impl Logs {
    fn open(paths: &[PathBuf], append: bool) -> Result<Self> {
        let mut files = Vec::new();
        for p in paths {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let fresh = !append || !p.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            files.push(w);
        }
        Ok(Logs { files })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        for f in &mut self.files {
            writeln!(f, "{line}").map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for f in &mut self.files {
            f.flush().map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }
}

/// Run (or continue) training. Each epoch visits every pair once in a
/// shuffled order, drawing a fresh crop and misregistration per visit.
pub fn train(state: &mut TrainState, pairs: &[TrainPair], cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure!(!pairs.is_empty(), "no training pairs");
    ensure!(
        state.model.config == cfg.model,
        "state model configuration differs from the run configuration"
    );
    let total = planned_steps(cfg, pairs.len());
    let sample_opts = sample_options(cfg);
    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join("ckpt"));
    let mut log_paths: Vec<PathBuf> = opts.out_dir.iter().map(|d| d.join("log.csv")).collect();
    log_paths.extend(opts.loss_report.iter().cloned());
    let mut logs = Logs::open(&log_paths, state.step > 0)?;

    let mut first_loss = None;
    let mut last_loss = None;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    while (state.step as usize) < total && (state.epoch as usize) < cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if state.step as usize >= total {
                break;
            }
            let samples = chunk
                .iter()
                .map(|&i| sample_from_pair(&pairs[i], cfg.patch_size, &sample_opts, &mut state.rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_samples(&samples)?;
            let lr = lr_schedule(state.step as usize, total, cfg.lr_start, cfg.lr_end)?;
            let report = train_step(
                state,
                &batch,
                &StepOptions {
                    weights: cfg.loss_weights,
                    lr,
                    grad_clip: cfg.grad_clip,
                },
            )?;
            let l = report.loss;
            first_loss.get_or_insert(l.total);
            last_loss = Some(l.total);
            epoch_sum += l.total;
            epoch_n += 1;
            logs.row(&format!(
                "{},{},{lr},{},{}",
                state.step,
                state.epoch,
                l.csv_fields(),
                report.grad_norm
            ))?;
            log::debug!("step {} lr {lr:.3e} {l}", state.step);
        }
        state.epoch += 1;
        logs.flush()?;
        if epoch_n == 0 {
            break;
        }
        let epoch_loss = epoch_sum / epoch_n as f64;
        log::info!("epoch {} step {} mean loss {epoch_loss:.6}", state.epoch, state.step);
        let improved = epoch_loss < state.best_loss;
        if improved {
            state.best_loss = epoch_loss;
        }
        if let Some(dir) = &ckpt_dir {
            let meta = checkpoint::Meta { loss: epoch_loss };
            checkpoint::save(state, &meta, &dir.join(format!("epoch_{:04}.ckpt", state.epoch)))?;
            if improved {
                checkpoint::save(state, &meta, &dir.join("best.ckpt"))?;
            }
        }
    }
    logs.flush()?;
    if !state.model.params.is_finite() {
        return Err(Error::NonFinite {
            component: "parameters",
            value: f64::NAN,
            dump: format!("step {}", state.step),
        });
    }
    Ok(TrainSummary {
        steps: state.step,
        epochs: state.epoch,
        first_loss,
        last_loss,
        best_loss: state.best_loss,
    })
}

/// Path of the newest per-epoch checkpoint under `dir/ckpt`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir.join("ckpt"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found.pop()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::simulate::AffineParams;
    use crate::tensor::Shape;
    use rand::Rng;

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                base_channels: 4,
                ..ModelConfig::default()
            },
            patch_size: 16,
            batch_size: 2,
            epochs: 2,
            max_steps: None,
            ..RunConfig::desk()
        }
    }

    fn pairs(n: usize, size: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (a, b) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
                let s = Shape::new(1, 3, size, size);
                TrainPair {
                    id: format!("p{i}"),
                    visible: Tensor::from_fn(s, |_, _, y, x| 0.5 + 0.4 * ((x as f64 * a).sin() * (y as f64 * b).cos())),
                    infrared: Tensor::from_fn(s, |_, _, y, x| if (x / 4 + y / 4) % 2 == 0 { 0.8 } else { 0.2 }),
                    fused: None,
                }
            })
            .collect()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 1000, 2e-4, 1e-6).unwrap(), 2e-4);
        assert_eq!(lr_schedule(1000, 1000, 2e-4, 1e-6).unwrap(), 1e-6);
        assert!((lr_schedule(500, 1000, 2e-4, 1e-6).unwrap() - 1.005e-4).abs() < 1e-18);
        assert!(lr_schedule(1001, 1000, 2e-4, 1e-6).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=97 {
            let lr = lr_schedule(s, 97, 2e-4, 1e-6).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn batch_for(cfg: &RunConfig) -> Batch {
        let samples = fixed_samples(&pairs(2, 16, 1), cfg, 5).unwrap();
        Batch::from_samples(&samples).unwrap()
    }

    #[test]
    fn steps_are_deterministic_and_zero_lr_is_a_no_op() {
        let cfg = tiny_run();
        let batch = batch_for(&cfg);
        let opts = StepOptions {
            weights: cfg.loss_weights,
            lr: 1e-3,
            grad_clip: Some(1.0),
        };
        let mut a = TrainState::for_run(&cfg).unwrap();
        let mut b = TrainState::for_run(&cfg).unwrap();
        for _ in 0..2 {
            train_step(&mut a, &batch, &opts).unwrap();
            train_step(&mut b, &batch, &opts).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(a.step, 2);

        let mut c = TrainState::for_run(&cfg).unwrap();
        let before = c.model.params.clone();
        train_step(&mut c, &batch, &StepOptions { lr: 0.0, ..opts }).unwrap();
        assert_eq!(c.model.params, before);
    }

    #[test]
    fn step_reports_pre_update_loss() {
        let cfg = tiny_run();
        let batch = batch_for(&cfg);
        let mut s = TrainState::for_run(&cfg).unwrap();
        let want = evaluate_loss(&s.model, &batch, &cfg.loss_weights).unwrap();
        let opts = StepOptions {
            weights: cfg.loss_weights,
            lr: 1e-3,
            grad_clip: Some(1.0),
        };
        let got = train_step(&mut s, &batch, &opts).unwrap();
        assert_eq!(got.loss, want);
    }

    #[test]
    fn identity_samples_have_zero_initial_loss() {
        let cfg = tiny_run();
        let p = &pairs(1, 16, 2)[0];
        let sample = crate::simulate::make_training_sample_with(
            &p.visible,
            &p.infrared,
            AffineParams::identity(),
            &sample_options(&cfg),
            None,
        )
        .unwrap();
        let state = TrainState::for_run(&cfg).unwrap();
        let v = evaluate_loss(&state.model, &Batch::from_samples(&[sample]).unwrap(), &cfg.loss_weights).unwrap();
        assert!(v.total.abs() < 1e-9, "{v}");
    }

    #[test]
    fn training_run_writes_log_and_checkpoints() {
        let cfg = tiny_run();
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::for_run(&cfg).unwrap();
        let data = pairs(3, 20, 3);
        let summary = train(
            &mut state,
            &data,
            &cfg,
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                loss_report: None,
            },
        )
        .unwrap();
        assert_eq!(summary.steps, 4);
        assert_eq!(summary.epochs, 2);
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert!(log.starts_with(LOG_HEADER));
        assert!(dir.path().join("ckpt/epoch_0002.ckpt").exists());
        assert!(dir.path().join("ckpt/best.ckpt").exists());
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), dir.path().join("ckpt/epoch_0002.ckpt"));
    }

    #[test]
    fn resumed_training_continues_from_checkpoint() {
        let data = pairs(3, 16, 4);
        let full_cfg = RunConfig {
            epochs: 2,
            ..tiny_run()
        };
        let mut full = TrainState::for_run(&full_cfg).unwrap();
        train(&mut full, &data, &full_cfg, &TrainOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let half_cfg = RunConfig {
            epochs: 1,
            ..full_cfg.clone()
        };
        let mut half = TrainState::for_run(&full_cfg).unwrap();
        train(
            &mut half,
            &data,
            &half_cfg,
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                loss_report: None,
            },
        )
        .unwrap();
        let (mut resumed, _) = checkpoint::load(&dir.path().join("ckpt/epoch_0001.ckpt"), Some(&full_cfg.model)).unwrap();
        assert_eq!(resumed, half);
        train(&mut resumed, &data, &full_cfg, &TrainOptions::default()).unwrap();
        assert_eq!(resumed.epoch, full.epoch);
        assert_eq!(resumed.step, full.step);
    }
}
