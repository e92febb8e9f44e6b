//! Finite-difference verification of every differentiable op and of the
//! gradient-flow contracts of the full network: blocked paths through the
//! adaptive filters, no dead branches, and player-correct gradient routing.

use ndarray::{ArrayD, IxDyn};
use uasnet_core::adversarial::{
    discriminator_step_loss, joint_objective, BatchTargets, TermWeights,
};
use uasnet_core::autodiff::{Ax, Tape};
use uasnet_core::model::facat::{AdaptiveMethod, FaCat};
use uasnet_core::model::{ArchConfig, ModelBundle, ModelConfig, ModelKind};
use uasnet_core::nn::{seeded_rng, ParamStore};

fn rand_array(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], scale: f32) -> Ax {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * scale).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central-difference check of d(loss)/d(param) for every listed slot.
/// `loss_fn` must rebuild the graph from the store each call.
fn fd_check(
    store: &mut ParamStore,
    slots: &[usize],
    loss_fn: &dyn Fn(&ParamStore) -> f64,
    h: f32,
    rel_tol: f64,
    min_grad: f64,
) -> (f64, usize) {
    // analytic gradients come from the same builder run once with a tape
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let analytic = analytic_grads(store, slots, loss_fn);
    for (k, &slot) in slots.iter().enumerate() {
        let n = store.value(slot).len();
        for idx in 0..n {
            let orig = store.value(slot).as_slice().unwrap()[idx];
            let set = |store: &mut ParamStore, v: f32| {
                store.value_mut(slot).as_slice_mut().unwrap()[idx] = v;
            };
            set(store, orig + h);
            let up = loss_fn(store);
            set(store, orig - h);
            let down = loss_fn(store);
            set(store, orig);
            let fd = (up - down) / (2.0 * h as f64);
            let g = analytic[k][idx];
            let denom = g.abs().max(fd.abs());
            if denom < min_grad {
                continue;
            }
            let rel = (fd - g).abs() / denom;
            worst = worst.max(rel);
            checked += 1;
            assert!(
                rel <= rel_tol,
                "slot {slot} elem {idx}: analytic {g:.8e} vs fd {fd:.8e} (rel {rel:.3e})"
            );
        }
    }
    (worst, checked)
}

/// The analytic gradient of the same loss builder, via one tape backward.
fn analytic_grads(
    store: &ParamStore,
    slots: &[usize],
    _loss_fn: &dyn Fn(&ParamStore) -> f64,
) -> Vec<Vec<f64>> {
    // The builder used by callers routes through `build_on_tape`, stored in
    // a thread local to keep fd_check's signature simple.
    BUILDER.with(|b| {
        let builder = b.borrow();
        let builder = builder.as_ref().expect("builder registered");
        let mut tape = Tape::new();
        let loss = builder(&mut tape, store);
        let mut grads = tape.backward(loss, store.len());
        slots
            .iter()
            .map(|&slot| match grads.take(slot) {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; store.value(slot).len()],
            })
            .collect()
    })
}

type Builder = Box<dyn Fn(&mut Tape, &ParamStore) -> uasnet_core::autodiff::NodeId>;

thread_local! {
    static BUILDER: std::cell::RefCell<Option<Builder>> = const { std::cell::RefCell::new(None) };
}

/// Registers a graph builder and returns a plain loss evaluator for it.
fn with_builder(builder: Builder) -> impl Fn(&ParamStore) -> f64 {
    BUILDER.with(|b| *b.borrow_mut() = Some(builder));
    |store: &ParamStore| {
        BUILDER.with(|b| {
            let builder = b.borrow();
            let builder = builder.as_ref().unwrap();
            let mut tape = Tape::new();
            let loss = builder(&mut tape, store);
            tape.scalar_f64(loss)
        })
    }
}

#[test]
fn ops_match_finite_differences() {
    let mut rng = seeded_rng(100, "fd-ops");
    // a compact graph exercising conv (two geometries), pooling, upsampling,
    // concatenation, dense heads, gating and all the loss heads
    let mut store = ParamStore::new();
    let w1 = store.add("w1", rand_array(&mut rng, &[4, 2, 3, 3], 0.4));
    let b1 = store.add("b1", rand_array(&mut rng, &[4], 0.1));
    let w2 = store.add("w2", rand_array(&mut rng, &[4, 4, 4, 4], 0.3));
    let b2 = store.add("b2", rand_array(&mut rng, &[4], 0.1));
    let lin = store.add("lin", rand_array(&mut rng, &[8, 3], 0.5));
    let lint = store.add("lint", rand_array(&mut rng, &[2, 3], 0.5));
    let x = rand_array(&mut rng, &[2, 2, 8, 8], 1.0);
    let bce_target =
        rand_array(&mut rng, &[2, 8, 4, 4], 0.5).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let l1_target = rand_array(&mut rng, &[2, 8, 4, 4], 0.5);
    let gate_w = rand_array(&mut rng, &[8, 8], 0.5);
    let mix = rand_array(&mut rng, &[2, 8, 4, 4], 0.5);

    let slots = vec![w1, b1, w2, b2, lin, lint];
    let loss_fn = with_builder(Box::new(move |tape, store| {
        let xin = tape.constant(x.clone());
        let w1n = store.leaf(tape, 0);
        let b1n = store.leaf(tape, 1);
        let h = tape.conv2d(xin, w1n, b1n, 1, 1); // (2,4,8,8)
        let h = tape.leaky_relu(h, 0.2);
        let p = tape.maxpool2(h); // (2,4,4,4)
        let w2n = store.leaf(tape, 2);
        let b2n = store.leaf(tape, 3);
        let c = tape.conv2d(p, w2n, b2n, 2, 1); // (2,4,2,2), stride-2 4x4 kernel
        let c = tape.relu(c);
        let up = tape.upsample2(c); // (2,4,4,4)
        let cat = tape.concat_channels(&[up, p]); // (2,8,4,4)
        let gate_src = tape.spatial_mean(cat); // (2,8)
        let gw = tape.constant(gate_w.clone());
        let gate = tape.linear(gate_src, gw, None);
        let gate = tape.sigmoid(gate);
        let gated = tape.scale_channels(cat, gate); // (2,8,4,4)
        let mixer = tape.constant(mix.clone());
        let mixed = tape.mul(gated, mixer);
        let squash = tape.tanh(mixed);

        // classifier head through both dense ops
        let pooled = tape.spatial_mean(squash); // (2,8)
        let lw = store.leaf(tape, 4);
        let feats = tape.linear(pooled, lw, None); // (2,3)
        let ltw = store.leaf(tape, 5);
        let logits = tape.linear_t(feats, ltw); // (2,2)
        let ce = tape.softmax_ce(logits, vec![0, 1]);

        // probability head
        let half = tape.mul_scalar(squash, 0.5);
        let probs = tape.sigmoid(half);
        let tgt = tape.constant(bce_target.clone());
        let bce = tape.bce_mean(probs, tgt);

        let l1t = tape.constant(l1_target.clone());
        let l1 = tape.l1_mean(gated, l1t);
        let s1 = tape.add(ce, bce);
        tape.add(s1, l1)
    }));
    let (worst, checked) = fd_check(&mut store, &slots, &loss_fn, 2e-3, 2e-2, 1e-3);
    assert!(checked > 100, "too few informative gradient elements");
    println!("per-op fd worst rel err {worst:.3e} over {checked} elements");
}

/// f64 twin of the SE forward plus an L1 loss: the independent oracle for
/// tight finite-difference checks (f32 forward evaluations cannot resolve
/// 1e-4 agreement through the cancellation in L(w+h) - L(w-h)).
pub fn se_l1_loss_f64(
    x: &Ax,
    w1: &ndarray::Array2<f64>,
    w2: &ndarray::Array2<f64>,
    target: &Ax,
) -> f64 {
    let xv = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (b, c, h, w) = xv.dim();
    assert_eq!(b, 1);
    let squeezed = w2.nrows();
    let mut z = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                s += xv[[0, ch, i, j]] as f64;
            }
        }
        z[ch] = s / (h * w) as f64;
    }
    let mut hidden = vec![0.0f64; squeezed];
    for k in 0..squeezed {
        let mut s = 0.0;
        for ch in 0..c {
            s += w2[[k, ch]] * z[ch];
        }
        hidden[k] = s.max(0.0);
    }
    let tv = target.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut loss = 0.0f64;
    for ch in 0..c {
        let mut zt = 0.0;
        for k in 0..squeezed {
            zt += w1[[ch, k]] * hidden[k];
        }
        let gate = 1.0 / (1.0 + (-zt).exp());
        for i in 0..h {
            for j in 0..w {
                loss += (xv[[0, ch, i, j]] as f64 * gate - tv[[0, ch, i, j]] as f64).abs();
            }
        }
    }
    loss
}

#[test]
fn se_block_gradients_meet_tight_tolerance() {
    for channels in [16usize, 32, 64] {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(7 + channels as u64, "se-fd");
        let block = FaCat::init(
            &mut store,
            &mut rng,
            "t",
            channels,
            AdaptiveMethod::Sobel,
            false,
        )
        .unwrap();
        // keep the squeeze relu active at the probe point so every parameter
        // has a nontrivial slope to check
        store.value_mut(block.w2).mapv_inplace(f32::abs);
        let x = rand_array(&mut rng, &[1, channels, 4, 4], 0.5).mapv(|v| v + 0.7);
        let target = rand_array(&mut rng, &[1, channels, 4, 4], 1.0);
        let n_elems = (channels * 16) as f32;

        // analytic gradients from the engine (sum-reduced L1 head)
        let mut tape = Tape::new();
        let xin = tape.constant(x.clone());
        let u = block.se_forward(&mut tape, &store, xin);
        let t = tape.constant(target.clone());
        let mean = tape.l1_mean(u, t);
        let loss = tape.mul_scalar(mean, n_elems);
        let mut grads = tape.backward(loss, store.len());
        let g1 = grads.take(block.w1).expect("w1 gradient");
        let g2 = grads.take(block.w2).expect("w2 gradient");

        // finite differences on the f64 twin
        let to64 = |slot: usize| -> ndarray::Array2<f64> {
            store
                .value(slot)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .mapv(|v| v as f64)
        };
        let w1_64 = to64(block.w1);
        let w2_64 = to64(block.w2);
        let h = 1e-5f64;
        let mut worst: f64 = 0.0;
        let mut checked = 0usize;
        for (which, analytic) in [(0, &g1), (1, &g2)] {
            // one f32 ulp of the accumulation already exceeds 1e-4 of a
            // near-zero slope, so check elements of meaningful magnitude
            let gmax = analytic
                .iter()
                .map(|v| v.abs() as f64)
                .fold(0.0f64, f64::max);
            let floor = (0.05 * gmax).max(1e-4);
            let base_shape = if which == 0 { w1_64.dim() } else { w2_64.dim() };
            for r in 0..base_shape.0 {
                for c in 0..base_shape.1 {
                    let mut up1 = w1_64.clone();
                    let mut dn1 = w1_64.clone();
                    let mut up2 = w2_64.clone();
                    let mut dn2 = w2_64.clone();
                    if which == 0 {
                        up1[[r, c]] += h;
                        dn1[[r, c]] -= h;
                    } else {
                        up2[[r, c]] += h;
                        dn2[[r, c]] -= h;
                    }
                    let fd = (se_l1_loss_f64(&x, &up1, &up2, &target)
                        - se_l1_loss_f64(&x, &dn1, &dn2, &target))
                        / (2.0 * h);
                    let g = analytic
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()[[r, c]] as f64;
                    let denom = g.abs().max(fd.abs());
                    if denom < floor {
                        continue;
                    }
                    let rel = (fd - g).abs() / denom;
                    worst = worst.max(rel);
                    checked += 1;
                    assert!(
                        rel <= 1e-4,
                        "C={channels} w{} [{r},{c}]: analytic {g:.9e} vs fd {fd:.9e} (rel {rel:.3e})",
                        which + 1
                    );
                }
            }
        }
        assert!(
            checked >= channels,
            "C={channels}: only {checked} informative elements"
        );
        println!("SE block C={channels}: worst rel {worst:.3e} over {checked} elements");
    }
}

#[test]
fn filter_path_is_a_gradient_barrier() {
    for method in [AdaptiveMethod::Sobel, AdaptiveMethod::Otsu] {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(31, "barrier");
        let block = FaCat::init(&mut store, &mut rng, "t", 16, method, false).unwrap();
        let x = rand_array(&mut rng, &[1, 16, 6, 6], 1.0);
        let target = rand_array(&mut rng, &[1, 17, 6, 6], 1.0);
        let compress_w = block.compress.w;
        let compress_b = block.compress.b;
        let block2 = block.clone();
        let x2 = x.clone();
        let loss_fn = with_builder(Box::new(move |tape, store| {
            let xin = tape.constant(x2.clone());
            let out = block2.forward(tape, store, xin).unwrap();
            let t = tape.constant(target.clone());
            tape.l1_mean(out, t)
        }));

        // analytic gradient through the compression conv must be exactly zero
        let mut tape = Tape::new();
        let xin = tape.constant(x.clone());
        let out = block.forward(&mut tape, &store, xin).unwrap();
        let tgt_shape = tape.value(out).raw_dim();
        let t = tape.constant(ArrayD::zeros(tgt_shape));
        let loss = tape.l1_mean(out, t);
        let mut grads = tape.backward(loss, store.len());
        for slot in [compress_w, compress_b] {
            match grads.take(slot) {
                None => {}
                Some(g) => assert!(
                    g.iter().all(|&v| v == 0.0),
                    "{method:?}: compression received gradient"
                ),
            }
        }

        // for Otsu the loss is locally flat in the compression weights, so
        // small finite differences see (near-)zero slopes as well
        if method == AdaptiveMethod::Otsu {
            let base = loss_fn(&store);
            for idx in 0..4 {
                let orig = store.value(compress_w).as_slice().unwrap()[idx];
                store.value_mut(compress_w).as_slice_mut().unwrap()[idx] = orig + 1e-4;
                let up = loss_fn(&store);
                store.value_mut(compress_w).as_slice_mut().unwrap()[idx] = orig;
                assert!(
                    (up - base).abs() < 1e-6,
                    "otsu fd response {} should be ~0",
                    up - base
                );
            }
        }
    }
}

fn thin_config() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Uasnet,
        arch: ArchConfig {
            widths: vec![16, 32, 64, 64, 64],
            bottleneck_width: 128,
            fa_cat_placement: vec![0, 1],
            otsu_masked: false,
        },
        adv: Default::default(),
    }
}

fn toy_batch(seed: u64, b: usize, size: usize) -> (ndarray::Array4<f32>, BatchTargets) {
    use rand::Rng;
    let mut rng = seeded_rng(seed, "toy-batch");
    let images = ndarray::Array4::from_shape_fn((b, 1, size, size), |_| {
        rng.gen::<f32>() * 800.0 - 800.0
    });
    let disk = |cx: f32, cy: f32, r: f32| {
        ndarray::Array4::from_shape_fn((b, 1, size, size), |(_, _, i, j)| {
            let d = ((i as f32 - cy).powi(2) + (j as f32 - cx).powi(2)).sqrt();
            if d < r {
                1.0
            } else {
                0.0
            }
        })
    };
    let c = size as f32 / 2.0;
    (
        images,
        BatchTargets {
            union: disk(c, c, size as f32 * 0.3),
            inter: disk(c, c, size as f32 * 0.15),
            reference: disk(c, c, size as f32 * 0.22),
            labels: (0..b).map(|i| Some(i % 2)).collect(),
        },
    )
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    // "on at least one random batch": the SE bottleneck can transiently
    // saturate for a single batch, so take the union over several batches.
    // A width-C/16 relu bottleneck can also start saturated for an unlucky
    // sign draw (it then degrades to a constant 0.5 gate); this check is
    // about severed paths, so make the relu alive and require flow.
    let mut bundle = ModelBundle::new(thin_config(), 5, true).unwrap();
    for slot in 0..bundle.store.len() {
        if bundle.store.name(slot).ends_with(".facat.se.w2") {
            bundle.store.value_mut(slot).mapv_inplace(f32::abs);
        }
    }
    let mut alive = vec![false; bundle.store.len()];
    for batch_seed in 0..4u64 {
        let (images, targets) = toy_batch(batch_seed, 2, 32);
        let mut tape = Tape::new();
        let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
        let objective = joint_objective(
            &mut tape,
            &bundle,
            &fwd,
            &images,
            &targets,
            TermWeights::default(),
            true,
        )
        .unwrap();
        let mut grads = tape.backward(objective.total_min, bundle.store.len());
        for (slot, flag) in alive.iter_mut().enumerate() {
            if let Some(g) = grads.take(slot) {
                if g.iter().any(|&v| v != 0.0) {
                    *flag = true;
                }
            }
        }
    }
    let mut dead = Vec::new();
    for slot in 0..bundle.store.len() {
        let name = bundle.store.name(slot).to_string();
        if name.starts_with("disc.") {
            continue; // the discriminator trains in its own step
        }
        if name.contains(".facat.sa.compress.") {
            // only consumer is the stop-gradient filter: must stay blocked
            assert!(!alive[slot], "{name} unexpectedly received gradient");
            continue;
        }
        if !alive[slot] {
            dead.push(name);
        }
    }
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
}

#[test]
fn discriminator_step_routes_gradients_only_to_discriminator() {
    let bundle = ModelBundle::new(thin_config(), 6, true).unwrap();
    let (images, _) = toy_batch(2, 2, 32);
    let mut tape = Tape::new();
    let (loss, value) = discriminator_step_loss(&mut tape, &bundle, &images).unwrap();
    assert!(value.is_finite());
    let mut grads = tape.backward(loss, bundle.store.len());
    let mut disc_nonzero = false;
    for slot in 0..bundle.store.len() {
        let name = bundle.store.name(slot).to_string();
        let g = grads.take(slot);
        if name.starts_with("disc.") {
            if g.map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false) {
                disc_nonzero = true;
            }
        } else {
            assert!(
                g.map(|g| g.iter().all(|&v| v == 0.0)).unwrap_or(true),
                "non-discriminator parameter {name} received gradient in the D step"
            );
        }
    }
    assert!(disc_nonzero, "discriminator got no gradient at all");
}

#[test]
fn adversarial_terms_route_into_their_players() {
    let bundle = ModelBundle::new(thin_config(), 7, true).unwrap();
    let (images, targets) = toy_batch(3, 2, 32);
    let mut tape = Tape::new();
    let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
    let objective = joint_objective(
        &mut tape,
        &bundle,
        &fwd,
        &images,
        &targets,
        TermWeights::default(),
        true,
    )
    .unwrap();

    // malignancy loss must reach segmentation parameters through r_pred
    let malig = objective.malig.expect("labels present");
    let mut grads = tape.backward(malig, bundle.store.len());
    let mut seg_touched = false;
    let mut clf_touched = false;
    for slot in 0..bundle.store.len() {
        let name = bundle.store.name(slot).to_string();
        if let Some(g) = grads.take(slot) {
            if g.iter().any(|&v| v != 0.0) {
                if name.starts_with("seg.") {
                    seg_touched = true;
                }
                if name.starts_with("clf.") {
                    clf_touched = true;
                }
                assert!(
                    !name.starts_with("gen.") && !name.starts_with("disc."),
                    "{name} should not receive malignancy gradient"
                );
            }
        }
    }
    assert!(seg_touched, "segmentation net misses malignancy gradient");
    assert!(clf_touched, "classifier misses its own gradient");

    // generator terms reach the generator (and the segmentation net through
    // the differentiable soft MCM conditioning)
    let mut tape = Tape::new();
    let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
    let objective = joint_objective(
        &mut tape,
        &bundle,
        &fwd,
        &images,
        &targets,
        TermWeights::default(),
        true,
    )
    .unwrap();
    let l1 = objective.l1.expect("jap on");
    let gan_g = objective.gan_g.expect("jap on");
    let gen_loss = tape.add(l1, gan_g);
    let mut grads = tape.backward(gen_loss, bundle.store.len());
    let mut gen_touched = false;
    let mut seg_through_mcm = false;
    for slot in 0..bundle.store.len() {
        let name = bundle.store.name(slot).to_string();
        if let Some(g) = grads.take(slot) {
            if g.iter().any(|&v| v != 0.0) {
                if name.starts_with("gen.") {
                    gen_touched = true;
                }
                if name.starts_with("seg.") {
                    seg_through_mcm = true;
                }
            }
        }
    }
    assert!(gen_touched, "generator misses l1/gan gradients");
    assert!(seg_through_mcm, "soft MCM conditioning path is severed");
}

#[test]
fn encoder_is_shared_across_branches() {
    let bundle = ModelBundle::new(thin_config(), 8, true).unwrap();
    let (images, _) = toy_batch(4, 1, 32);
    let mut tape = Tape::new();
    let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
    let u0 = tape.value(fwd.union).clone();
    let i0 = tape.value(fwd.inter).clone();
    let r0 = tape.value(fwd.r).clone();

    let mut perturbed = ModelBundle::new(thin_config(), 8, true).unwrap();
    let slot = perturbed.store.slot_by_name("seg.enc.s0.c1.weight").unwrap();
    perturbed.store.value_mut(slot).as_slice_mut().unwrap()[0] += 0.35;
    let mut tape = Tape::new();
    let fwd = perturbed.forward_batch(&mut tape, &images, None).unwrap();
    assert_ne!(&u0, tape.value(fwd.union), "union unaffected by encoder");
    assert_ne!(&i0, tape.value(fwd.inter), "inter unaffected by encoder");
    assert_ne!(&r0, tape.value(fwd.r), "overall unaffected by encoder");
}
