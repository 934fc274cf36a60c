mod common;

use acla_core::attention::{
    acla_forward, block_wrap, cla_forward, clnl_forward, nl_forward, AttentionParams, KeyGating, LayerBank, Variant,
};
use acla_core::gating::Mode;
use acla_core::gradcheck;
use acla_core::params::ParamStore;
use acla_core::{Error, Shape, Tape, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn module(variant: Variant, c: usize, k: usize, referred: usize, seed: u64) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "att", variant, c, k, referred, &mut rng(seed)).unwrap();
    (store, p)
}

fn linear_value(store: &ParamStore, p: &AttentionParams, v: &[f64]) -> Vec<f64> {
    linear(store, p.g, v)
}

#[test]
fn nl_single_position_is_value_embedding() {
    let (store, p) = module(Variant::Nl, 3, 0, 1, 1);
    let x = rand_map(1, 1, 3, &mut rng(2));
    let y = nl_forward(&store, &p, &x).unwrap();
    let expect = linear_value(&store, &p, x.pixel(0, 0));
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn nl_identical_positions_give_identical_output() {
    let (store, p) = module(Variant::Nl, 3, 0, 1, 3);
    let px = [0.4, -1.0, 2.0];
    let x = Tensor::from_fn(Shape::new(3, 3, 3), |_, _, c| px[c]);
    let y = nl_forward(&store, &p, &x).unwrap();
    let expect = linear_value(&store, &p, &px);
    for r in 0..3 {
        for c in 0..3 {
            for ch in 0..3 {
                assert!((y.at(r, c, ch) - expect[ch]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn nl_matches_brute_force() {
    for seed in 0..5 {
        let mut r = rng(10 + seed);
        let (store, p) = module(Variant::Nl, 3, 0, 1, seed);
        let x = rand_map(4, 4, 3, &mut r);
        let y = nl_forward(&store, &p, &x).unwrap();
        let o = dense_oracle(&store, p.theta.unwrap(), p.phi.unwrap(), p.g, &x, &[&x]);
        assert!(y.max_abs_diff(&o) < 1e-10);
    }
}

#[test]
fn block_wrap_cases() {
    let mut r = rng(4);
    let (mut store, p) = module(Variant::Cla, 3, 2, 1, 5);
    let x = rand_map(3, 3, 3, &mut r);
    let y = rand_map(3, 3, 3, &mut r);
    // h starts at zero
    assert!(block_wrap(&store, &p, &x, &y).unwrap().bit_eq(&x));

    *store.get_mut(p.h.w) = Tensor::identity(3);
    let zero = Tensor::zeros(x.shape());
    assert!(block_wrap(&store, &p, &x, &zero).unwrap().max_abs_diff(&x) == 0.0);

    randomize(&mut store, p.h, 1.0, &mut r);
    let z = block_wrap(&store, &p, &x, &y).unwrap();
    let expect = Tensor::from_fn(x.shape(), |rr, cc, ch| linear(&store, p.h, y.pixel(rr, cc))[ch] + x.at(rr, cc, ch));
    assert!(z.max_abs_diff(&expect) < 1e-12);

    let bad = rand_map(2, 3, 3, &mut r);
    assert!(matches!(block_wrap(&store, &p, &x, &bad), Err(Error::Dimension { .. })));
}

#[test]
fn clnl_first_layer_equals_nl() {
    let mut r = rng(6);
    let (store, p) = module(Variant::Clnl, 3, 0, 2, 7);
    let x1 = rand_map(3, 3, 3, &mut r);
    let x2 = rand_map(3, 3, 3, &mut r);
    let bank = LayerBank::new(vec![x1.clone(), x2]).unwrap();
    let a = clnl_forward(&store, &p, &bank, 1).unwrap();
    let b = nl_forward(&store, &p, &x1).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn clnl_duplicate_layers_do_not_change_output() {
    let mut r = rng(8);
    let (store, p) = module(Variant::Clnl, 2, 0, 2, 9);
    let x = rand_map(3, 3, 2, &mut r);
    let bank = LayerBank::new(vec![x.clone(), x.clone()]).unwrap();
    let one = clnl_forward(&store, &p, &bank, 1).unwrap();
    let two = clnl_forward(&store, &p, &bank, 2).unwrap();
    assert!(one.max_abs_diff(&two) < 1e-12);
}

#[test]
fn clnl_matches_brute_force() {
    for seed in 0..5 {
        let mut r = rng(20 + seed);
        let (store, p) = module(Variant::Clnl, 2, 0, 2, seed);
        let x1 = rand_map(3, 3, 2, &mut r);
        let x2 = rand_map(3, 3, 2, &mut r);
        let bank = LayerBank::new(vec![x1.clone(), x2.clone()]).unwrap();
        let y = clnl_forward(&store, &p, &bank, 2).unwrap();
        let o = dense_oracle(&store, p.theta.unwrap(), p.phi.unwrap(), p.g, &x2, &[&x1, &x2]);
        assert!(y.max_abs_diff(&o) < 1e-10);
    }
}

#[test]
fn clnl_rejects_empty_bank() {
    let (store, p) = module(Variant::Clnl, 2, 0, 1, 1);
    let bank = LayerBank::default();
    assert!(matches!(clnl_forward(&store, &p, &bank, 1), Err(Error::Contract { .. })));
}

#[test]
fn cla_single_key_at_query_is_value_embedding() {
    let mut r = rng(30);
    let (store, p) = module(Variant::Cla, 3, 1, 1, 31);
    let x = rand_map(4, 3, 3, &mut r);
    let bank = LayerBank::new(vec![x.clone()]).unwrap();
    let (y, trace) = cla_forward(&store, &p, &bank, 1).unwrap();
    let expect = Tensor::from_fn(x.shape(), |rr, cc, ch| linear(&store, p.g, x.pixel(rr, cc))[ch]);
    assert!(y.max_abs_diff(&expect) < 1e-12);
    assert_eq!(trace.len(), 12);
    assert!(trace.iter().all(|t| (t.weight - 1.0).abs() < 1e-15));
}

#[test]
fn cla_two_identical_layers_split_weight_evenly() {
    let mut r = rng(32);
    let (mut store, p) = module(Variant::Cla, 3, 1, 2, 33);
    // equal logits
    *store.get_mut(p.weight.unwrap().w) = Tensor::zeros(Shape::new(1, 3, 2));
    let x = rand_map(3, 3, 3, &mut r);
    let bank = LayerBank::new(vec![x.clone(), x.clone()]).unwrap();
    let (y, trace) = cla_forward(&store, &p, &bank, 2).unwrap();
    let expect = Tensor::from_fn(x.shape(), |rr, cc, ch| linear(&store, p.g, x.pixel(rr, cc))[ch]);
    assert!(y.max_abs_diff(&expect) < 1e-12);
    assert!(trace.iter().all(|t| (t.weight - 0.5).abs() < 1e-15));
}

fn random_offsets(store: &mut ParamStore, p: &AttentionParams, r: &mut ChaCha8Rng) {
    randomize(store, p.offset.unwrap(), 0.8, r);
}

#[test]
fn cla_matches_explicit_oracle() {
    for seed in 0..5 {
        let mut r = rng(40 + seed);
        let (mut store, p) = module(Variant::Cla, 3, 3, 2, seed);
        random_offsets(&mut store, &p, &mut r);
        let x1 = rand_map(5, 4, 3, &mut r);
        let x2 = rand_map(5, 4, 3, &mut r);
        let bank = LayerBank::new(vec![x1.clone(), x2.clone()]).unwrap();
        let (y, trace) = cla_forward(&store, &p, &bank, 2).unwrap();
        let oracle = SampledOracle {
            store: &store,
            offset: p.offset.unwrap(),
            weight: p.weight.unwrap(),
            g: p.g,
            mask: None,
            k: 3,
            gates: vec![1.0, 1.0],
        };
        assert!(y.max_abs_diff(&oracle.run(&x2, &[&x1, &x2])) < 1e-10);
        // per-query weights sum to one
        for q in trace.chunks(6) {
            let s: f64 = q.iter().map(|t| t.weight).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(q.iter().all(|t| t.weight >= 0.0));
        }
    }
}

#[test]
fn cla_rejects_bad_arguments() {
    let mut store = ParamStore::new();
    assert!(matches!(
        AttentionParams::new(&mut store, "a", Variant::Cla, 2, 0, 1, &mut rng(0)),
        Err(Error::Contract { .. })
    ));
    let (store, p) = module(Variant::Cla, 2, 2, 2, 1);
    let bank = LayerBank::new(vec![rand_map(2, 2, 2, &mut rng(1))]).unwrap();
    // sized for two referred layers, only one available
    assert!(cla_forward(&store, &p, &bank, 1).is_err());
    assert!(cla_forward(&store, &p, &bank, 3).is_err());
}

fn infer_gating(r: &mut ChaCha8Rng) -> KeyGating<'_> {
    KeyGating { mode: Mode::Infer, tau: 1.0, rng: r, force_on: false }
}

#[test]
fn acla_with_all_masks_on_matches_cla() {
    let mut r = rng(50);
    let (mut store, p) = module(Variant::Acla, 3, 2, 2, 51);
    random_offsets(&mut store, &p, &mut r);
    let mask = p.mask.unwrap();
    *store.get_mut(mask.w) = Tensor::zeros(Shape::new(1, 3, 1));
    *store.get_mut(mask.b) = Tensor::scalar(5.0).reshape(Shape::new(1, 1, 1)).unwrap();
    let x1 = rand_map(4, 4, 3, &mut r);
    let x2 = rand_map(4, 4, 3, &mut r);
    let bank = LayerBank::new(vec![x1.clone(), x2.clone()]).unwrap();
    let mut nr = rng(0);
    let (ya, trace) = acla_forward(&store, &p, &bank, 2, &mut infer_gating(&mut nr), &[1.0, 1.0]).unwrap();
    assert!(trace.iter().all(|t| t.hard == 1.0));

    // a CLA module carrying the same tensors
    let mut cla_store = ParamStore::new();
    let cp = AttentionParams::new(&mut cla_store, "att", Variant::Cla, 3, 2, 2, &mut rng(0)).unwrap();
    for (dst, src) in [(cp.g, p.g), (cp.h, p.h), (cp.offset.unwrap(), p.offset.unwrap()), (cp.weight.unwrap(), p.weight.unwrap())] {
        *cla_store.get_mut(dst.w) = store.get(src.w).clone();
        *cla_store.get_mut(dst.b) = store.get(src.b).clone();
    }
    let (yc, _) = cla_forward(&cla_store, &cp, &bank, 2).unwrap();
    assert!(ya.max_abs_diff(&yc) <= 1e-12);
}

#[test]
fn acla_with_all_masks_off_is_zero() {
    let mut r = rng(52);
    let (mut store, p) = module(Variant::Acla, 3, 2, 1, 53);
    let mask = p.mask.unwrap();
    *store.get_mut(mask.w) = Tensor::zeros(Shape::new(1, 3, 1));
    *store.get_mut(mask.b) = Tensor::filled(Shape::new(1, 1, 1), -5.0);
    randomize(&mut store, p.h, 1.0, &mut r);
    *store.get_mut(p.h.b) = Tensor::zeros(Shape::new(1, 1, 3));
    let x = rand_map(3, 3, 3, &mut r);
    let bank = LayerBank::new(vec![x.clone()]).unwrap();
    let mut nr = rng(0);
    let (y, _) = acla_forward(&store, &p, &bank, 1, &mut infer_gating(&mut nr), &[1.0]).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let z = block_wrap(&store, &p, &x, &y).unwrap();
    assert!(z.bit_eq(&x));
}

#[test]
fn acla_mixed_masks_match_oracle_and_weight_invariants() {
    for seed in 0..5 {
        let mut r = rng(60 + seed);
        let (mut store, p) = module(Variant::Acla, 3, 3, 2, seed);
        random_offsets(&mut store, &p, &mut r);
        randomize(&mut store, p.mask.unwrap(), 1.0, &mut r);
        *store.get_mut(p.mask.unwrap().b) = Tensor::zeros(Shape::new(1, 1, 1));
        let x1 = rand_map(4, 5, 3, &mut r);
        let x2 = rand_map(4, 5, 3, &mut r);
        let bank = LayerBank::new(vec![x1.clone(), x2.clone()]).unwrap();
        let gates = [r.gen_range(0.2..1.0), r.gen_range(0.2..1.0)];
        let tau = 0.7;
        let mut nr = rng(0);
        let mut kg = KeyGating { mode: Mode::Infer, tau, rng: &mut nr, force_on: false };
        let (y, trace) = acla_forward(&store, &p, &bank, 2, &mut kg, &gates).unwrap();
        let oracle = SampledOracle {
            store: &store,
            offset: p.offset.unwrap(),
            weight: p.weight.unwrap(),
            g: p.g,
            mask: Some((p.mask.unwrap(), tau)),
            k: 3,
            gates: gates.to_vec(),
        };
        assert!(y.max_abs_diff(&oracle.run(&x2, &[&x1, &x2])) < 1e-10);

        let on = trace.iter().filter(|t| t.hard == 1.0).count();
        assert!(on > 0 && on < trace.len(), "mask pattern should be mixed");
        for q in trace.chunks(6) {
            let kept: f64 = q.iter().filter(|t| t.hard == 1.0).map(|t| t.weight).sum();
            let eff: f64 = q.iter().map(|t| t.hard * t.weight).sum();
            assert!(eff <= 1.0 + 1e-9);
            assert!((eff - kept).abs() < 1e-15);
            for layer in [1, 2] {
                let n = q.iter().filter(|t| t.layer == layer).count();
                assert!(n <= 3);
            }
        }
        // beta is the mask unit applied to the sampled key feature
        let unit = p.mask.unwrap();
        for t in trace.iter().take(10) {
            let b = linear(&store, unit, &t.value)[0];
            assert!((t.beta.unwrap() - b).abs() < 1e-12);
        }
    }
}

#[test]
fn acla_end_to_end_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng(200 + seed);
        let c = 2;
        let k = 2;
        let x1 = rand_map(4, 4, c, &mut r);
        let x2 = rand_map(4, 4, c, &mut r);
        // projections are inputs of the check so their gradients are covered
        let w_off = Tensor::randn(Shape::new(1, c, 2 * k * 2), 0.05, &mut r);
        let b_off = Tensor::from_fn(Shape::new(1, 1, 2 * k * 2), |_, _, _| {
            let whole = r.gen_range(-1..=1) as f64;
            whole + r.gen_range(0.35..0.65)
        });
        let w_f = Tensor::randn(Shape::new(1, c, k * 2), 0.5, &mut r);
        let w_g = Tensor::randn(Shape::new(1, c, c), 0.5, &mut r);
        let w_m = Tensor::randn(Shape::new(1, c, 1), 0.5, &mut r);
        let gates = Tensor::from_vec(Shape::new(1, 1, 2), vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).unwrap();
        let noise = Tensor::randn(Shape::new(4, 4, k), 1.0, &mut r);
        // keep the check away from the hard-threshold jumps: masks forced on
        let inputs = [x1, x2, w_off, b_off, w_f, w_g, w_m, gates];
        let rep = gradcheck::check(&inputs, 1e-5, |t, v| {
            let offs = t.conv1x1(v[1], v[2], Some(v[3]))?;
            let logits = t.conv1x1(v[1], v[4], None)?;
            let weights = t.softmax_channels(logits);
            let mut terms = Vec::new();
            for (idx, &x) in [v[0], v[1]].iter().enumerate() {
                let o = t.slice_channels(offs, 2 * k * idx, 2 * k)?;
                let vals = t.conv1x1(x, v[5], None)?;
                let samples = t.deform_sample(vals, o)?;
                let beta_map = t.conv1x1(x, v[6], None)?;
                let beta = t.deform_sample(beta_map, o)?;
                let soft = acla_core::gating::relaxed_on_tape(t, beta, 0.8, Some(&noise))?;
                let w_l = t.slice_channels(weights, k * idx, k)?;
                let coef = t.mul(w_l, soft)?;
                let term = t.weighted_sum_keys(coef, samples)?;
                let gs = t.slice_channels(v[7], idx, 1)?;
                let s = t.sigmoid(gs);
                terms.push(t.mul_scalar(term, s)?);
            }
            let y = t.add_n(&terms)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}

#[test]
fn acla_module_forward_gradient_with_straight_through() {
    let mut r = rng(300);
    let (mut store, p) = module(Variant::Acla, 2, 2, 1, 301);
    randomize(&mut store, p.mask.unwrap(), 1.0, &mut r);
    randomize(&mut store, p.h, 1.0, &mut r);
    let x = rand_map(3, 3, 2, &mut r);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let xv = tape.constant(x);
    let mut nr = rng(0);
    let mut kg = KeyGating { mode: Mode::Infer, tau: 1.0, rng: &mut nr, force_on: false };
    let out = p.attend(&mut tape, &bound, xv, &[xv], None, Some(&mut kg)).unwrap();
    let z = p.block(&mut tape, &bound, xv, out.y).unwrap();
    let loss = tape.mean(z);
    let grads = tape.backward(loss).unwrap();
    // the mask unit receives gradient only through the straight-through path
    let gm = grads.get(bound[p.mask.unwrap().w]).unwrap();
    assert!(gm.data().iter().any(|&v| v != 0.0));
}
