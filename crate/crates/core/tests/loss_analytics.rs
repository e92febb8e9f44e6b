//! Analytic and brute-force oracle checks of every loss term and of the
//! joint objective composition.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use uasnet_core::adversarial::{
    gan_d_loss, gan_g_loss, joint_objective, seg_loss, BatchTargets, TermWeights,
};
use uasnet_core::autodiff::Tape;
use uasnet_core::model::{ArchConfig, ModelBundle, ModelConfig, ModelKind};
use uasnet_core::nn::seeded_rng;

const LN2: f64 = std::f64::consts::LN_2;

fn constmap(tape: &mut Tape, shape: &[usize], v: f32) -> uasnet_core::autodiff::NodeId {
    tape.constant(ArrayD::from_elem(IxDyn(shape), v))
}

#[test]
fn seg_loss_of_uniform_half_is_three_ln_two() {
    let mut tape = Tape::new();
    let shape = [2usize, 1, 8, 8];
    let preds = (
        constmap(&mut tape, &shape, 0.5),
        constmap(&mut tape, &shape, 0.5),
        constmap(&mut tape, &shape, 0.5),
    );
    let targets = (
        constmap(&mut tape, &shape, 1.0),
        constmap(&mut tape, &shape, 0.0),
        constmap(&mut tape, &shape, 1.0),
    );
    let nodes = seg_loss(&mut tape, preds, targets);
    let total = tape.scalar_f64(nodes.total);
    assert!(
        (total - 3.0 * LN2).abs() < 1e-6,
        "expected 3 ln 2, got {total}"
    );
}

#[test]
fn seg_loss_of_perfect_predictions_is_near_zero() {
    let mut tape = Tape::new();
    let shape = [1usize, 1, 4, 4];
    let preds = (
        constmap(&mut tape, &shape, 1.0),
        constmap(&mut tape, &shape, 0.0),
        constmap(&mut tape, &shape, 1.0),
    );
    let targets = (
        constmap(&mut tape, &shape, 1.0),
        constmap(&mut tape, &shape, 0.0),
        constmap(&mut tape, &shape, 1.0),
    );
    let nodes = seg_loss(&mut tape, preds, targets);
    let total = tape.scalar_f64(nodes.total);
    assert!(total >= 0.0 && total < 1e-5, "clamped optimum, got {total}");
}

#[test]
fn seg_loss_matches_elementwise_oracle() {
    let mut rng = seeded_rng(41, "bce-oracle");
    let shape = (2usize, 1usize, 6usize, 6usize);
    let pred = Array4::from_shape_fn(shape, |_| rng.gen_range(0.01..0.99f32));
    let target = Array4::from_shape_fn(shape, |_| f32::from(rng.gen_bool(0.5)));

    // brute-force elementwise BCE
    let mut expect = 0.0f64;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
        expect -= t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
    }
    expect /= pred.len() as f64;

    let mut tape = Tape::new();
    let p = tape.constant(pred.into_dyn());
    let t = tape.constant(target.into_dyn());
    let got = tape.bce_mean(p, t);
    assert!((tape.scalar_f64(got) - expect).abs() < 1e-6);
}

#[test]
fn gan_terms_at_uniform_discriminator() {
    let mut tape = Tape::new();
    let d_real = constmap(&mut tape, &[1, 1, 4, 4], 0.5);
    let d_fake = constmap(&mut tape, &[1, 1, 4, 4], 0.5);
    let d = gan_d_loss(&mut tape, d_real, d_fake);
    let g = gan_g_loss(&mut tape, d_fake);
    assert!((tape.scalar_f64(d) - 2.0 * LN2).abs() < 1e-6);
    assert!((tape.scalar_f64(g) - LN2).abs() < 1e-6);
}

#[test]
fn gan_d_at_perfect_discriminator_is_near_zero() {
    let mut tape = Tape::new();
    let d_real = constmap(&mut tape, &[1, 1, 4, 4], 1.0);
    let d_fake = constmap(&mut tape, &[1, 1, 4, 4], 0.0);
    let d = gan_d_loss(&mut tape, d_real, d_fake);
    let v = tape.scalar_f64(d);
    assert!(v >= 0.0 && v < 1e-5, "got {v}");
}

#[test]
fn gan_d_monotone_in_real_score() {
    // with the fake score fixed, a higher real score lowers the loss
    let mut prev = f64::INFINITY;
    for real in [0.3f32, 0.5, 0.7, 0.9] {
        let mut tape = Tape::new();
        let d_real = constmap(&mut tape, &[1, 1, 2, 2], real);
        let d_fake = constmap(&mut tape, &[1, 1, 2, 2], 0.4);
        let d = gan_d_loss(&mut tape, d_real, d_fake);
        let v = tape.scalar_f64(d);
        assert!(v < prev, "gan_d not decreasing at real={real}");
        prev = v;
    }
}

#[test]
fn gan_terms_match_direct_formula_on_random_scores() {
    let mut rng = seeded_rng(43, "gan-oracle");
    let real = Array4::from_shape_fn((1, 1, 5, 5), |_| rng.gen_range(0.05..0.95f32));
    let fake = Array4::from_shape_fn((1, 1, 5, 5), |_| rng.gen_range(0.05..0.95f32));
    let mut d_expect = 0.0f64;
    let mut g_expect = 0.0f64;
    for (&r, &f) in real.iter().zip(fake.iter()) {
        d_expect -= (r as f64).ln() + (1.0 - f as f64).ln();
        g_expect -= (f as f64).ln();
    }
    d_expect /= real.len() as f64;
    g_expect /= fake.len() as f64;
    let mut tape = Tape::new();
    let rn = tape.constant(real.into_dyn());
    let fnode = tape.constant(fake.into_dyn());
    let d = gan_d_loss(&mut tape, rn, fnode);
    let g = gan_g_loss(&mut tape, fnode);
    assert!((tape.scalar_f64(d) - d_expect).abs() < 1e-6);
    assert!((tape.scalar_f64(g) - g_expect).abs() < 1e-6);
}

#[test]
fn malignancy_ce_analytics_and_oracle() {
    // uniform logits -> ln 2
    let mut tape = Tape::new();
    let logits = tape.constant(ArrayD::from_elem(IxDyn(&[3, 2]), 0.7f32));
    let ce = tape.softmax_ce(logits, vec![0, 1, 0]);
    assert!((tape.scalar_f64(ce) - LN2).abs() < 1e-6);

    // confident and correct -> near zero
    let mut tape = Tape::new();
    let mut arr = ArrayD::zeros(IxDyn(&[2, 2]));
    arr[[0, 0]] = 20.0;
    arr[[1, 1]] = 20.0;
    let logits = tape.constant(arr);
    let ce = tape.softmax_ce(logits, vec![0, 1]);
    assert!(tape.scalar_f64(ce) < 1e-6);

    // random logits vs softmax-CE oracle
    let mut rng = seeded_rng(44, "ce-oracle");
    let raw = Array4::from_shape_fn((4, 2, 1, 1), |_| rng.gen_range(-3.0..3.0f32));
    let flat: Vec<f32> = raw.iter().copied().collect();
    let labels = vec![0usize, 1, 1, 0];
    let mut expect = 0.0f64;
    for (n, &label) in labels.iter().enumerate() {
        let a = flat[2 * n] as f64;
        let b = flat[2 * n + 1] as f64;
        let m = a.max(b);
        let z = (a - m).exp() + (b - m).exp();
        let chosen = if label == 0 { a } else { b };
        expect -= (chosen - m) - z.ln();
    }
    expect /= labels.len() as f64;
    let mut tape = Tape::new();
    let logits = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[4, 2]), flat.clone()).unwrap(),
    );
    let ce = tape.softmax_ce(logits, labels);
    assert!((tape.scalar_f64(ce) - expect).abs() < 1e-6);
}

#[test]
fn l1_analytics_and_oracle() {
    let mut tape = Tape::new();
    let a = constmap(&mut tape, &[1, 1, 4, 4], 0.25);
    let same = constmap(&mut tape, &[1, 1, 4, 4], 0.25);
    let zero = tape.l1_mean(a, same);
    assert_eq!(tape.scalar_f64(zero), 0.0);

    let shifted = constmap(&mut tape, &[1, 1, 4, 4], 0.75);
    let half = tape.l1_mean(a, shifted);
    assert!((tape.scalar_f64(half) - 0.5).abs() < 1e-7);

    let mut rng = seeded_rng(45, "l1-oracle");
    let x = Array4::from_shape_fn((2, 1, 3, 3), |_| rng.gen_range(-2.0..2.0f32));
    let y = Array4::from_shape_fn((2, 1, 3, 3), |_| rng.gen_range(-2.0..2.0f32));
    let expect: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / x.len() as f64;
    let xn = tape.constant(x.into_dyn());
    let yn = tape.constant(y.into_dyn());
    let got = tape.l1_mean(xn, yn);
    assert!((tape.scalar_f64(got) - expect).abs() < 1e-6);
}

fn tiny_bundle(jap: bool) -> ModelBundle {
    let config = ModelConfig {
        kind: ModelKind::Uasnet,
        arch: ArchConfig {
            widths: vec![16, 16, 16, 16, 16],
            bottleneck_width: 32,
            fa_cat_placement: vec![0, 1],
            otsu_masked: false,
        },
        adv: Default::default(),
    };
    ModelBundle::new(config, 11, jap).unwrap()
}

fn random_batch(seed: u64) -> (Array4<f32>, BatchTargets) {
    let mut rng = seeded_rng(seed, "objective-batch");
    let images = Array4::from_shape_fn((2, 1, 32, 32), |_| rng.gen_range(-900.0..100.0f32));
    let mask = |r: f32| {
        Array4::from_shape_fn((2, 1, 32, 32), |(_, _, i, j)| {
            let d = ((i as f32 - 16.0).powi(2) + (j as f32 - 16.0).powi(2)).sqrt();
            f32::from(d < r)
        })
    };
    (
        images,
        BatchTargets {
            union: mask(10.0),
            inter: mask(5.0),
            reference: mask(7.0),
            labels: vec![Some(0), Some(1)],
        },
    )
}

#[test]
fn joint_objective_equals_sum_of_terms() {
    let bundle = tiny_bundle(true);
    let (images, targets) = random_batch(1);
    let weights = TermWeights {
        seg: 1.0,
        l1: 0.7,
        gan: 1.3,
        malig: 0.5,
    };
    let mut tape = Tape::new();
    let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
    let objective = joint_objective(&mut tape, &bundle, &fwd, &images, &targets, weights, true)
        .unwrap();
    let total = tape.scalar_f64(objective.total_min);
    let parts = tape.scalar_f64(objective.seg.total) * weights.seg as f64
        + tape.scalar_f64(objective.l1.unwrap()) * weights.l1 as f64
        + tape.scalar_f64(objective.gan_g.unwrap()) * weights.gan as f64
        + tape.scalar_f64(objective.malig.unwrap()) * weights.malig as f64;
    assert!(
        (total - parts).abs() < 1e-9,
        "total {total} vs parts {parts}"
    );
}

#[test]
fn joint_objective_with_zero_losses_is_zero() {
    let bundle = tiny_bundle(true);
    let (images, targets) = random_batch(2);
    let weights = TermWeights {
        seg: 0.0,
        l1: 0.0,
        gan: 0.0,
        malig: 0.0,
    };
    let mut tape = Tape::new();
    let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
    let objective = joint_objective(&mut tape, &bundle, &fwd, &images, &targets, weights, true)
        .unwrap();
    assert!(tape.scalar_f64(objective.total_min).abs() < 1e-12);
}

#[test]
fn jap_disabled_reports_adversarial_terms_absent() {
    let bundle = tiny_bundle(false);
    let (images, targets) = random_batch(3);
    let mut tape = Tape::new();
    let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
    let objective = joint_objective(
        &mut tape,
        &bundle,
        &fwd,
        &images,
        &targets,
        TermWeights::default(),
        false,
    )
    .unwrap();
    let breakdown = objective.breakdown(&tape);
    assert!(breakdown.l1_gen.is_none());
    assert!(breakdown.gan_g.is_none());
    assert!(breakdown.gan_d.is_none());
    assert!(breakdown.malig_ce.is_none());
    assert!((breakdown.total_min_players - breakdown.seg_bce).abs() < 1e-6);
}

#[test]
fn seg_loss_is_permutation_invariant() {
    let mut rng = seeded_rng(46, "perm");
    let n = 36usize;
    let pred: Vec<f32> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
    let target: Vec<f32> = (0..n).map(|_| f32::from(rng.gen_bool(0.5))).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng);
    let build = |p: &[f32], t: &[f32]| -> f64 {
        let mut tape = Tape::new();
        let pn = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 6, 6]), p.to_vec()).unwrap());
        let tn = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 6, 6]), t.to_vec()).unwrap());
        let loss = tape.bce_mean(pn, tn);
        tape.scalar_f64(loss)
    };
    let base = build(&pred, &target);
    let pred_p: Vec<f32> = perm.iter().map(|&i| pred[i]).collect();
    let target_p: Vec<f32> = perm.iter().map(|&i| target[i]).collect();
    let permuted = build(&pred_p, &target_p);
    assert!((base - permuted).abs() < 1e-12);
}
