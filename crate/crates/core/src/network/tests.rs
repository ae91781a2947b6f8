use super::*;
use crate::config::LossWeights;
use crate::gradcheck::check_gradients_at;
use crate::train::{objective, objective_with_detail_masks, Batch};
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::from_fn(s, |_, _, _, _| rng.gen::<f64>())
}

/// Smooth texture with some per-seed variation, in [0, 1].
fn textured(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    let (fx, fy, ph) = (rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.0..6.0));
    Tensor::from_fn(s, |_, c, y, x| {
        0.5 + 0.35 * ((x as f64 * fx + ph + c as f64).sin() * (y as f64 * fy).cos())
    })
}

fn zero_mask_model(cfg: ModelConfig) -> Model {
    Model::new(cfg, 7, InitOptions { mask_logit: 0.0 }).unwrap()
}

#[test]
fn stream_tags_parse() {
    assert_eq!("vi".parse::<Stream>().unwrap(), Stream::Visible);
    assert!(matches!("rgb".parse::<Stream>(), Err(Error::Contract(_))));
}

#[test]
fn extractor_shapes_zero_input_and_determinism() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 1, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = random_image(&mut rng, Shape::new(1, 3, 32, 32));
    let run = |img: &Tensor| {
        let mut g = Graph::new();
        let pv = model.params.bind(&mut g, false);
        let x = g.constant(img.clone());
        let pyr = image_pyramid(&mut g, x, 2).unwrap();
        let feats = extract_pyramid(&mut g, &pv, &cfg, &pyr, Stream::Infrared).unwrap();
        feats.iter().map(|&f| g.value(f).clone()).collect::<Vec<_>>()
    };
    let feats = run(&img);
    assert_eq!(feats[0].shape(), Shape::new(1, 4, 32, 32));
    assert_eq!(feats[1].shape(), Shape::new(1, 8, 16, 16));
    assert_eq!(feats, run(&img));
    let zero = run(&Tensor::zeros(img.shape()));
    assert!(zero.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn default_width_matches_documented_shapes() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 1, InitOptions::default()).unwrap();
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, false);
    let x = g.constant(Tensor::full(Shape::new(1, 3, 256, 256), 0.5));
    let pyr = image_pyramid(&mut g, x, 2).unwrap();
    let feats = extract_pyramid(&mut g, &pv, &cfg, &pyr, Stream::Fused).unwrap();
    assert_eq!(g.shape(feats[0]), Shape::new(1, 16, 256, 256));
    assert_eq!(g.shape(feats[1]), Shape::new(1, 32, 128, 128));
}

#[test]
fn zero_heads_give_identity_estimates() {
    let model = zero_mask_model(tiny_config());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Shape::new(2, 3, 16, 16);
    let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));
    let outs = model.forward(&vi, &ir, &f).unwrap();
    for o in &outs {
        assert!(o.phi.tensor().data().iter().all(|&v| v == 0.0));
        assert!(o.mask.tensor().data().iter().all(|&v| v == 0.5));
        assert_eq!(o.i_out, o.i_warp);
    }
    assert!(outs[0].i_out.max_abs_diff(&f) <= 1e-6);
}

#[test]
fn default_init_is_identity_registrar() {
    let model = Model::new(tiny_config(), 3, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Shape::new(1, 3, 16, 16);
    let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));
    let outs = model.forward(&vi, &ir, &f).unwrap();
    assert!(outs[0].i_out.max_abs_diff(&f) <= 1e-12);
    let m = outs[0].mask.tensor().data()[0];
    assert!((m - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
}

#[test]
fn fine_field_is_refined_by_coarse_field() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 4, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.params.randomize(&mut rng, 0.3);
    let s = Shape::new(1, 3, 16, 16);
    let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, false);
    let (a, b, c) = (g.constant(vi), g.constant(ir), g.constant(f));
    let imgs: Vec<Vec<Var>> = [c, a, b].iter().map(|&x| image_pyramid(&mut g, x, 2).unwrap()).collect();
    let feats: Vec<Vec<Var>> = Stream::ALL
        .iter()
        .zip(&imgs)
        .map(|(&st, im)| extract_pyramid(&mut g, &pv, &cfg, im, st).unwrap())
        .collect();
    let raw = localize_raw(&mut g, &pv, &feats[0], &feats[1], &feats[2]).unwrap();
    let refined = localize(&mut g, &pv, &cfg, &feats[0], &feats[1], &feats[2]).unwrap();
    let raw0 = DeformationField::new(g.value(raw[0].1).clone()).unwrap();
    let phi1 = DeformationField::new(g.value(refined[1].1).clone()).unwrap();
    assert_eq!(g.value(refined[1].1), g.value(raw[1].1));
    let want = warpcore::compose_fields(&raw0, &phi1).unwrap();
    assert_eq!(g.value(refined[0].1), want.tensor());
}

#[test]
fn masks_stay_in_unit_interval_for_random_params() {
    let mut model = Model::new(tiny_config(), 5, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Shape::new(1, 3, 8, 8);
    for trial in 0..100 {
        if trial % 10 == 0 {
            model.params.randomize(&mut rng, 1.0);
        }
        let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));
        for o in model.forward(&vi, &ir, &f).unwrap() {
            assert!(o.mask.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn mrb_identities_at_init() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 6, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, false);
    let fs = Shape::new(1, 4, 8, 8);
    let (fw, fv, fi) = (
        g.constant(random_image(&mut rng, fs)),
        g.constant(random_image(&mut rng, fs)),
        g.constant(random_image(&mut rng, fs)),
    );
    let iw = g.constant(random_image(&mut rng, Shape::new(1, 3, 8, 8)));
    let out = mrb_forward(&mut g, &pv, &cfg, 0, fw, fv, fi, iw).unwrap();
    assert!(g.value(out.att_vi).data().iter().all(|&v| v == 1.5));
    assert!(g.value(out.att_ir).data().iter().all(|&v| v == 1.5));
    let four = g.value(out.f_gmlp).scale(4.0);
    assert!(g.value(out.f_ff).max_abs_diff(&four) < 1e-12);
    assert_eq!(g.value(out.i_out), g.value(iw));

    // Equal logits weight the two patch-scale branches equally.
    let x = {
        let cat_in = [fw, fv, fi];
        let cv = warpcore::correlation(&mut g, fw, fv, 1).unwrap();
        let ci = warpcore::correlation(&mut g, fw, fi, 1).unwrap();
        let cat = g.concat_channels(&[cat_in[0], cat_in[1], cat_in[2], cv, ci]).unwrap();
        conv(&mut g, &pv, "mrb.s0.compress", cat, 1, 0).unwrap()
    };
    let branch = |g: &mut Graph, s: usize| {
        let q = format!("mrb.s0.gmlp{s}");
        let y = gmlp_block(
            g,
            x,
            pv.get(&format!("{q}.w1")).unwrap(),
            pv.get(&format!("{q}.w2")).unwrap(),
            pv.get(&format!("{q}.mix")).unwrap(),
            pv.get(&format!("{q}.mix_bias")).unwrap(),
            s,
        )
        .unwrap();
        g.value(y).clone()
    };
    let (b1, b3) = (branch(&mut g, 1), branch(&mut g, 3));
    let avg = b1.zip_map(&b3, |a, b| 0.5 * a + 0.5 * b).unwrap();
    assert!(g.value(out.f_gmlp).max_abs_diff(&avg) < 1e-12);
}

#[test]
fn attention_multipliers_are_strictly_between_one_and_two() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 8, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    model.params.randomize(&mut rng, 2.0);
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, false);
    let fs = Shape::new(1, 4, 6, 6);
    let mut feat = || {
        let t = Tensor::from_fn(fs, |_, _, _, _| rng.gen_range(-3.0..3.0));
        g.constant(t)
    };
    let (fw, fv, fi) = (feat(), feat(), feat());
    let iw = g.constant(Tensor::zeros(Shape::new(1, 3, 6, 6)));
    let out = mrb_forward(&mut g, &pv, &cfg, 0, fw, fv, fi, iw).unwrap();
    for a in [out.att_vi, out.att_ir] {
        assert!(g.value(a).data().iter().all(|&v| v > 1.0 && v < 2.0));
    }
}

#[test]
fn gmlp_examples() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = Shape::new(1, 2, 6, 6);
    let x = g.constant(random_image(&mut rng, s));
    let w = g.constant(random_image(&mut rng, Shape::new(2, 2, 1, 1)));
    let mix0 = g.constant(Tensor::zeros(Shape::new(1, 1, 9, 9)));
    let bias0 = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 9)));
    let y = gmlp_block(&mut g, x, w, w, mix0, bias0, 3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let zx = g.constant(Tensor::zeros(s));
    let mix = g.constant(random_image(&mut rng, Shape::new(1, 1, 9, 9)));
    let bias = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 9)));
    let y = gmlp_block(&mut g, zx, w, w, mix, bias, 3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // s = 1 with unit projections and gate: x·relu(x) = x² for x > 0.
    let xv = 0.7;
    let x1 = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), xv));
    let one = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
    let zero = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let y = gmlp_block(&mut g, x1, one, one, one, zero, 1).unwrap();
    assert!((g.value(y).data()[0] - xv * xv).abs() < 1e-15);

    // Dims that are not multiples of s are padded and cropped back.
    let odd = g.constant(random_image(&mut rng, Shape::new(1, 2, 8, 7)));
    let y = gmlp_block(&mut g, odd, w, w, mix, bias, 3).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 2, 8, 7));
}

#[test]
fn ablation_flags() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = Shape::new(1, 3, 16, 16);
    let (vi, ir, f) = (random_image(&mut rng, s), random_image(&mut rng, s), random_image(&mut rng, s));

    let cfg = ModelConfig {
        no_mrb: true,
        ..tiny_config()
    };
    let mut model = Model::new(cfg, 9, InitOptions::default()).unwrap();
    model.params.randomize(&mut rng, 0.2);
    for o in model.forward(&vi, &ir, &f).unwrap() {
        assert_eq!(o.i_out, o.i_warp);
    }

    let cfg = ModelConfig {
        one_way_warp: true,
        ..tiny_config()
    };
    let mut model = Model::new(cfg, 9, InitOptions::default()).unwrap();
    model.params.randomize(&mut rng, 0.2);
    let outs = model.forward(&vi, &ir, &f).unwrap();
    let mut fi = f.clone();
    for (i, o) in outs.iter().enumerate() {
        if i > 0 {
            fi = crate::graph::downsample2_tensor(&fi);
        }
        assert_eq!(o.i_warp, warpcore::backward_warp(&fi, &o.phi).unwrap());
    }
}

#[test]
fn unimplemented_variants_refuse() {
    for v in [MrbVariant::Dc, MrbVariant::Dt] {
        let cfg = ModelConfig {
            mrb_variant: v,
            ..tiny_config()
        };
        let model = Model::new(cfg, 0, InitOptions::default()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 8, 8));
        assert!(matches!(model.forward(&x, &x, &x), Err(Error::NotImplemented(_))));
    }
}

#[test]
fn shape_contract_and_padding_requirement() {
    let model = Model::new(tiny_config(), 0, InitOptions::default()).unwrap();
    let x = Tensor::full(Shape::new(2, 3, 12, 20), 0.3);
    let outs = model.forward(&x, &x, &x).unwrap();
    assert_eq!(outs[1].i_out.shape(), Shape::new(2, 3, 6, 10));
    assert_eq!(outs[1].phi.tensor().shape(), Shape::new(2, 2, 6, 10));
    assert_eq!(outs[1].mask.tensor().shape(), Shape::new(2, 1, 6, 10));
    let odd = Tensor::zeros(Shape::new(1, 3, 9, 8));
    assert!(model.forward(&odd, &odd, &odd).is_err());
}

#[test]
fn gradients_reach_every_parameter() {
    let mut model = Model::new(tiny_config(), 10, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    model.params.randomize(&mut rng, 0.3);
    // Positive biases keep every rectifier alive somewhere.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with("mix_bias") {
            t.map_inplace(f64::abs);
        }
    }
    let s = Shape::new(1, 3, 16, 16);
    let (vi, ir, f, gt) = (
        textured(&mut rng, s),
        textured(&mut rng, s),
        textured(&mut rng, s),
        textured(&mut rng, s),
    );
    let mut g = Graph::new();
    let pv = model.params.bind(&mut g, true);
    let batch = Batch {
        visible: vi,
        infrared: ir,
        fused: f,
        target: gt,
    };
    let (_, terms) = objective(&mut g, &model, &pv, &batch, &LossWeights::default()).unwrap();
    let grads = g.backward(terms.total);
    let mut nonzero = 0;
    for (name, var) in pv.iter() {
        let gr = grads.get(var).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(gr.is_finite(), "{name}");
        if gr.data().iter().any(|&v| v != 0.0) {
            nonzero += 1;
        }
    }
    let total = model.params.len();
    assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total} parameter tensors receive gradient");
}

#[test]
fn end_to_end_gradient_check() {
    let mut model = Model::new(tiny_config(), 11, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    model.params.randomize(&mut rng, 0.3);
    let s = Shape::new(1, 3, 16, 16);
    let batch = Batch {
        visible: textured(&mut rng, s),
        infrared: textured(&mut rng, s),
        fused: textured(&mut rng, s),
        target: textured(&mut rng, s),
    };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let picks: Vec<(usize, usize)> = (0..20)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            (i, rng.gen_range(0..inputs[i].numel()))
        })
        .collect();
    // The detail loss weights by constant masks; freeze them at this point.
    let masks: Vec<Tensor> = model
        .forward(&batch.visible, &batch.infrared, &batch.fused)
        .unwrap()
        .into_iter()
        .map(|o| o.mask.tensor().clone())
        .collect();
    let report = check_gradients_at(&inputs, &picks, 1e-6, |g, vars| {
        let pv = ParamVars::from_named(names.iter().map(String::as_str), vars);
        let w = LossWeights::default();
        let (_, terms) = objective_with_detail_masks(g, &model, &pv, &batch, &w, Some(&masks))?;
        Ok(terms.total)
    })
    .unwrap();
    let worst = report.worst.map(|(i, _, _, _)| names[i].clone());
    assert!(report.max_rel_err < 1e-3, "{report:?} {worst:?}");
}

