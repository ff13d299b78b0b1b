use fiberseg_core::baselines::*;
use fiberseg_core::filters::{compute_feature_stack, DEFAULT_FEATURE_SCALES};
use fiberseg_core::infer::*;
use fiberseg_core::metrics::*;
use fiberseg_core::model::*;
use fiberseg_core::phantom::*;
use fiberseg_core::train::*;
use fiberseg_core::volgrid::*;
use std::time::Instant;

fn dice_of(gt: &LabelVolume, pred: &LabelVolume) -> f64 {
    dice(confusion(gt, pred).unwrap())
}

#[test]
#[ignore]
fn iteration_speed() {
    for (dim, patch, label) in [
        (2u8, (1usize, 32usize, 32usize), "2d-32"),
        (2, (1, 64, 64), "2d-64"),
        (3, (16, 16, 16), "3d-16"),
        (3, (32, 32, 32), "3d-32"),
    ] {
        let dims = Dims::new(48, 96, 96);
        let mut spec = PhantomSpec::new(dims, 3.9);
        spec.length_range_um = (60.0, 120.0);
        let (gray, labels) = generate_phantom(&spec).unwrap();
        let gray = normalize(&gray).unwrap();
        let mut model = build_model(&ModelConfig::new(dim, Variant::Shallow), 1).unwrap();
        let cfg = TrainConfig {
            iterations: 30,
            patch_shape: patch,
            ..TrainConfig::new(patch)
        };
        let t0 = Instant::now();
        train_loop(&gray, &labels, &mut model, &cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64() / 30.0;
        println!("{label}: {:.3} s/iter → 2000 iters ≈ {:.0} s", dt, dt * 2000.0);
    }
}

#[test]
#[ignore]
fn lr_baseline_ordering() {
    let t_all = Instant::now();
    let dims = Dims::new(64, 64, 64);
    let spec_train = PhantomSpec::new(dims, 8.3);
    let mut spec_eval = spec_train.clone();
    spec_eval.seed = 4242;
    let (train_gray, train_labels) = generate_phantom(&spec_train).unwrap();
    let (eval_gray, eval_labels) = generate_phantom(&spec_eval).unwrap();
    println!("phantoms: {:.1}s, fiber fracs {:.4}/{:.4}", t_all.elapsed().as_secs_f64(),
        train_labels.fiber_fraction(), eval_labels.fiber_fraction());

    // Otsu on eval
    let t = Instant::now();
    let tau = otsu_threshold(&eval_gray, 256).unwrap();
    let otsu_dice = dice_of(&eval_labels, &Binarize::apply(&eval_gray, tau));
    println!("otsu: dice {otsu_dice:.4} ({:.1}s)", t.elapsed().as_secs_f64());

    // Best threshold oracle on eval
    let (_, best) = best_dice_threshold(&eval_gray, &eval_labels, 256).unwrap();
    println!("best-threshold: dice {best:.4}");

    // Frangi: fit threshold on train, apply to eval
    let t = Instant::now();
    let params = FrangiParams::for_pitch(8.3);
    let v_train = frangi_vesselness(&train_gray, &params).unwrap();
    let (tau_f, frangi_train_dice) = best_dice_threshold(&v_train, &train_labels, 256).unwrap();
    let v_eval = frangi_vesselness(&eval_gray, &params).unwrap();
    let frangi_dice = dice_of(&eval_labels, &Binarize::apply(&v_eval, tau_f));
    println!("frangi: train-fit dice {frangi_train_dice:.4}, eval dice {frangi_dice:.4} ({:.1}s)", t.elapsed().as_secs_f64());

    // RF
    let t = Instant::now();
    let train_norm = normalize(&train_gray).unwrap();
    let eval_norm = normalize(&eval_gray).unwrap();
    let stack_train = compute_feature_stack(&train_norm, &DEFAULT_FEATURE_SCALES).unwrap();
    let stack_eval = compute_feature_stack(&eval_norm, &DEFAULT_FEATURE_SCALES).unwrap();
    let forest = train_forest(&stack_train, &train_labels, &ForestConfig::default()).unwrap();
    let rf_pred = forest_predict(&forest, &stack_eval).unwrap();
    let rf_dice = dice_of(&eval_labels, &rf_pred);
    println!("rf: dice {rf_dice:.4} ({:.1}s)", t.elapsed().as_secs_f64());

    println!("total {:.1}s", t_all.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn degradation_sweep() {
    for (psf, noise) in [(3.0, 0.10), (3.0, 0.15), (4.5, 0.10), (4.5, 0.15), (4.5, 0.20), (6.0, 0.15)] {
        // LR side
        let mut lr = PhantomSpec::new(Dims::new(64, 64, 64), 8.3);
        lr.psf_sigma_um = psf;
        lr.noise_sigma = noise;
        let mut lr_eval = lr.clone();
        lr_eval.seed = 4242;
        let (tg, tl) = generate_phantom(&lr).unwrap();
        let (eg, el) = generate_phantom(&lr_eval).unwrap();
        let tau = otsu_threshold(&eg, 256).unwrap();
        let otsu = dice_of(&el, &Binarize::apply(&eg, tau));
        let (_, best) = best_dice_threshold(&eg, &el, 256).unwrap();
        let params = FrangiParams::for_pitch(8.3);
        let vt = frangi_vesselness(&tg, &params).unwrap();
        let (tau_f, _) = best_dice_threshold(&vt, &tl, 256).unwrap();
        let ve = frangi_vesselness(&eg, &params).unwrap();
        let frangi = dice_of(&el, &Binarize::apply(&ve, tau_f));
        let tn = normalize(&tg).unwrap();
        let en = normalize(&eg).unwrap();
        let st = compute_feature_stack(&tn, &DEFAULT_FEATURE_SCALES).unwrap();
        let se = compute_feature_stack(&en, &DEFAULT_FEATURE_SCALES).unwrap();
        let forest = train_forest(&st, &tl, &ForestConfig::default()).unwrap();
        let rf = dice_of(&el, &forest_predict(&forest, &se).unwrap());

        // MR side (96³ for speed), Otsu only
        let mut mr = PhantomSpec::new(Dims::new(96, 96, 96), 3.9);
        mr.psf_sigma_um = psf;
        mr.noise_sigma = noise;
        mr.seed = 7;
        let (mg, ml) = generate_phantom(&mr).unwrap();
        let mtau = otsu_threshold(&mg, 256).unwrap();
        let motsu = dice_of(&ml, &Binarize::apply(&mg, mtau));
        let (_, mbest) = best_dice_threshold(&mg, &ml, 256).unwrap();

        println!(
            "psf={psf} noise={noise}: LR otsu {otsu:.3} frangi {frangi:.3} rf {rf:.3} best {best:.3} | MR otsu {motsu:.3} best {mbest:.3}"
        );
    }
}

#[test]
#[ignore]
fn psf_sweep() {
    for (psf, noise) in [(4.5, 0.05), (6.0, 0.05), (7.5, 0.05), (6.0, 0.08), (7.5, 0.08)] {
        let mut lr = PhantomSpec::new(Dims::new(64, 64, 64), 8.3);
        lr.psf_sigma_um = psf;
        lr.noise_sigma = noise;
        let mut lr_eval = lr.clone();
        lr_eval.seed = 4242;
        let (tg, tl) = generate_phantom(&lr).unwrap();
        let (eg, el) = generate_phantom(&lr_eval).unwrap();
        let tau = otsu_threshold(&eg, 256).unwrap();
        let otsu = dice_of(&el, &Binarize::apply(&eg, tau));
        let (_, best) = best_dice_threshold(&eg, &el, 256).unwrap();
        let params = FrangiParams::for_pitch(8.3);
        let vt = frangi_vesselness(&tg, &params).unwrap();
        let (tau_f, _) = best_dice_threshold(&vt, &tl, 256).unwrap();
        let ve = frangi_vesselness(&eg, &params).unwrap();
        let frangi = dice_of(&el, &Binarize::apply(&ve, tau_f));
        let tn = normalize(&tg).unwrap();
        let en = normalize(&eg).unwrap();
        let st = compute_feature_stack(&tn, &DEFAULT_FEATURE_SCALES).unwrap();
        let se = compute_feature_stack(&en, &DEFAULT_FEATURE_SCALES).unwrap();
        let forest = train_forest(&st, &tl, &ForestConfig::default()).unwrap();
        let rf = dice_of(&el, &forest_predict(&forest, &se).unwrap());

        let mut mr = PhantomSpec::new(Dims::new(96, 96, 96), 3.9);
        mr.psf_sigma_um = psf;
        mr.noise_sigma = noise;
        mr.seed = 7;
        let (mg, ml) = generate_phantom(&mr).unwrap();
        let mtau = otsu_threshold(&mg, 256).unwrap();
        let motsu = dice_of(&ml, &Binarize::apply(&mg, mtau));
        let (_, mbest) = best_dice_threshold(&mg, &ml, 256).unwrap();

        println!(
            "psf={psf} noise={noise}: LR otsu {otsu:.3} frangi {frangi:.3} rf {rf:.3} best {best:.3} | MR otsu {motsu:.3} best {mbest:.3}"
        );
    }
}

#[test]
#[ignore]
fn mr_band() {
    for psf in [3.0, 3.5, 3.75, 4.0, 4.25] {
        for (dims, seeds) in [(96usize, [7u64, 8])] {
            for seed in seeds {
                let mut mr = PhantomSpec::new(Dims::new(dims, dims, dims), 3.9);
                mr.psf_sigma_um = psf;
                mr.seed = seed;
                let (mg, ml) = generate_phantom(&mr).unwrap();
                let mtau = otsu_threshold(&mg, 256).unwrap();
                let motsu = dice_of(&ml, &Binarize::apply(&mg, mtau));
                let (_, mbest) = best_dice_threshold(&mg, &ml, 256).unwrap();
                println!("MR psf={psf} seed={seed}: otsu {motsu:.3} best {mbest:.3}");
            }
        }
    }
}

#[test]
#[ignore]
fn lr_band() {
    for (psf, noise) in [(4.0, 0.12), (4.0, 0.15), (4.5, 0.12), (4.5, 0.15), (4.5, 0.18)] {
        for (s_train, s_eval) in [(42u64, 4242u64), (1, 10001)] {
            let mut lr = PhantomSpec::new(Dims::new(64, 64, 64), 8.3);
            lr.psf_sigma_um = psf;
            lr.noise_sigma = noise;
            lr.seed = s_train;
            let mut lr_eval = lr.clone();
            lr_eval.seed = s_eval;
            let (tg, tl) = generate_phantom(&lr).unwrap();
            let (eg, el) = generate_phantom(&lr_eval).unwrap();
            let tau = otsu_threshold(&eg, 256).unwrap();
            let otsu = dice_of(&el, &Binarize::apply(&eg, tau));
            let (_, best) = best_dice_threshold(&eg, &el, 256).unwrap();
            let params = FrangiParams::for_pitch(8.3);
            let vt = frangi_vesselness(&tg, &params).unwrap();
            let (tau_f, _) = best_dice_threshold(&vt, &tl, 256).unwrap();
            let ve = frangi_vesselness(&eg, &params).unwrap();
            let frangi = dice_of(&el, &Binarize::apply(&ve, tau_f));
            let tn = normalize(&tg).unwrap();
            let en = normalize(&eg).unwrap();
            let st = compute_feature_stack(&tn, &DEFAULT_FEATURE_SCALES).unwrap();
            let se = compute_feature_stack(&en, &DEFAULT_FEATURE_SCALES).unwrap();
            let forest = train_forest(&st, &tl, &ForestConfig::default()).unwrap();
            let rf = dice_of(&el, &forest_predict(&forest, &se).unwrap());
            println!("LR psf={psf} noise={noise} seeds {s_train}/{s_eval}: otsu {otsu:.3} frangi {frangi:.3} rf {rf:.3} best {best:.3}");
        }
    }
}

#[test]
#[ignore]
fn rf_capacity() {
    for (psf, noise) in [(4.0, 0.15), (4.5, 0.15)] {
        for (s_train, s_eval) in [(42u64, 4242u64), (1, 10001)] {
            let mut lr = PhantomSpec::new(Dims::new(64, 64, 64), 8.3);
            lr.psf_sigma_um = psf;
            lr.noise_sigma = noise;
            lr.seed = s_train;
            let mut lr_eval = lr.clone();
            lr_eval.seed = s_eval;
            let (tg, tl) = generate_phantom(&lr).unwrap();
            let (eg, el) = generate_phantom(&lr_eval).unwrap();
            let tn = normalize(&tg).unwrap();
            let en = normalize(&eg).unwrap();
            let st = compute_feature_stack(&tn, &DEFAULT_FEATURE_SCALES).unwrap();
            let se = compute_feature_stack(&en, &DEFAULT_FEATURE_SCALES).unwrap();
            let cfg = ForestConfig { n_trees: 100, max_depth: 16, samples_per_class: 40_000, ..ForestConfig::default() };
            let forest = train_forest(&st, &tl, &cfg).unwrap();
            let rf = dice_of(&el, &forest_predict(&forest, &se).unwrap());
            let params = FrangiParams::for_pitch(8.3);
            let vt = frangi_vesselness(&tg, &params).unwrap();
            let (tau_f, _) = best_dice_threshold(&vt, &tl, 256).unwrap();
            let ve = frangi_vesselness(&eg, &params).unwrap();
            let frangi = dice_of(&el, &Binarize::apply(&ve, tau_f));
            println!("psf={psf} noise={noise} seeds {s_train}/{s_eval}: frangi {frangi:.3} rf-big {rf:.3}");
        }
    }
}

#[test]
#[ignore]
fn lr_nets() {
    use fiberseg_core::model::build_model;
    let t0 = Instant::now();
    let mut lr = PhantomSpec::new(Dims::new(64, 64, 64), 8.3);
    lr.psf_sigma_um = 4.5;
    lr.noise_sigma = 0.15;
    lr.seed = 42;
    let mut lr_eval = lr.clone();
    lr_eval.seed = 4242;
    let (tg, tl) = generate_phantom(&lr).unwrap();
    let (eg, el) = generate_phantom(&lr_eval).unwrap();
    let tn = normalize(&tg).unwrap();

    for (preset_name, iters) in [("lr2d-shallow", 2000u64), ("lr3d-shallow", 2000)] {
        let p = preset(preset_name).unwrap();
        let mut model = build_model(&p.model, 7).unwrap();
        let mut tc = TrainConfig::new(p.patch_shape);
        tc.iterations = iters;
        tc.seed = 1234;
        let t1 = Instant::now();
        let rec = train_loop(&tn, &tl, &mut model, &tc).unwrap();
        let train_secs = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let (_, seg) = normalize_then_predict(&mut model, &eg, None, None).unwrap();
        let d = dice_of(&el, &seg);
        let head: f64 = rec.losses[..200].iter().sum::<f64>() / 200.0;
        let tail: f64 = rec.losses[rec.losses.len() - 200..].iter().sum::<f64>() / 200.0;
        println!(
            "{preset_name}: dice {d:.4} (train {train_secs:.0}s predict {:.0}s; loss {head:.3}→{tail:.3})",
            t2.elapsed().as_secs_f64()
        );
    }
    println!("lr_nets total {:.0}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn mr_net() {
    use fiberseg_core::model::build_model;
    let t0 = Instant::now();
    let mut mr = PhantomSpec::new(Dims::new(128, 128, 128), 3.9);
    mr.psf_sigma_um = 4.0;
    mr.seed = 7;
    let mut mr_eval = mr.clone();
    mr_eval.seed = 77;
    let (tg, tl) = generate_phantom(&mr).unwrap();
    let (eg, el) = generate_phantom(&mr_eval).unwrap();
    let tau = otsu_threshold(&eg, 256).unwrap();
    let otsu = dice_of(&el, &Binarize::apply(&eg, tau));
    println!("MR eval otsu {otsu:.4} ({:.0}s)", t0.elapsed().as_secs_f64());

    let tn = normalize(&tg).unwrap();
    let p = preset("mr2d-shallow").unwrap();
    let mut model = build_model(&p.model, 7).unwrap();
    let mut tc = TrainConfig::new(p.patch_shape);
    tc.iterations = 2000;
    tc.seed = 1234;
    let t1 = Instant::now();
    let rec = train_loop(&tn, &tl, &mut model, &tc).unwrap();
    println!("trained {:.0}s, loss {:.3}→{:.3}", t1.elapsed().as_secs_f64(),
        rec.losses[..200].iter().sum::<f64>() / 200.0,
        rec.losses[rec.losses.len()-200..].iter().sum::<f64>() / 200.0);
    let t2 = Instant::now();
    let (_, seg) = normalize_then_predict(&mut model, &eg, None, None).unwrap();
    let d = dice_of(&el, &seg);
    println!("mr2d-shallow: dice {d:.4} (predict {:.0}s); total {:.0}s", t2.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64());
}
