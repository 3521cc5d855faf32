use proptest::prelude::*;
use tcvae_numerics::{gradient_check, Graph, NumericsError, ParamStore, Result, Tensor, Var};

/// Builds `sum(f(x) ⊙ weights)` so every output entry matters to the loss.
fn weighted_loss(
    g: &mut Graph<f64>,
    y: Var,
    weights: &Tensor<f64>,
) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn store_with(name: &str, shape: &[usize], data: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add(name, Tensor::from_f64(shape, data).unwrap()).unwrap();
    s
}

fn weights_for(shape: &[usize], seed: u64) -> Tensor<f64> {
    tcvae_numerics::standard_normal(shape, seed)
}

type UnaryFn = fn(&mut Graph<f64>, Var) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, UnaryFn, fn(f64) -> f64)> {
    // The last entry maps an arbitrary draw into the op's smooth domain.
    vec![
        ("neg", |g, x| Ok(g.neg(x)), |v| v),
        ("scale", |g, x| Ok(g.scale(x, -1.7)), |v| v),
        ("add_scalar", |g, x| Ok(g.add_scalar(x, 0.3)), |v| v),
        ("sigmoid", |g, x| Ok(g.sigmoid(x)), |v| v),
        ("tanh", |g, x| Ok(g.tanh(x)), |v| v),
        ("relu", |g, x| Ok(g.relu(x)), |v| if v.abs() < 0.05 { v + 0.1 } else { v }),
        ("gelu", |g, x| Ok(g.gelu(x)), |v| v),
        ("exp", |g, x| Ok(g.exp(x)), |v| v),
        ("log", |g, x| Ok(g.log(x)), |v| v.abs() + 0.2),
        ("softplus", |g, x| Ok(g.softplus(x)), |v| v),
        ("square", |g, x| Ok(g.square(x)), |v| v),
        ("sqrt", |g, x| Ok(g.sqrt(x)), |v| v.abs() + 0.2),
        ("softmax", |g, x| g.softmax(x), |v| v),
        ("sum_axis0", |g, x| g.sum_axis(x, 0), |v| v),
        ("mean_axis1", |g, x| g.mean_axis(x, 1), |v| v),
        ("transpose", |g, x| g.transpose(x), |v| v),
        ("roll", |g, x| g.roll(x, 0, 1), |v| v),
        ("narrow", |g, x| {
            let n = g.shape(x)[1];
            g.narrow(x, 1, n / 2, n - n / 2)
        }, |v| v),
        ("reciprocal", |g, x| g.reciprocal(x), |v| v.abs() + 0.5),
    ]
}

fn check_unary(f: UnaryFn, shape: &[usize], data: &[f64], seed: u64) -> f64 {
    let store = store_with("x", shape, data);
    let id = store.id("x").unwrap();
    let out_shape = {
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = f(&mut g, x).unwrap();
        g.shape(y).to_vec()
    };
    let w = weights_for(&out_shape, seed);
    let report = gradient_check(&store, 1e-5, |s, g| {
        let x = g.param(s, id);
        let y = f(g, x)?;
        weighted_loss(g, y, &w)
    })
    .unwrap();
    report.max_rel_error()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives_match_finite_differences(
        rows in 1usize..=8,
        cols in 1usize..=8,
        seed in 0u64..1000,
    ) {
        let raw = tcvae_numerics::standard_normal::<f64>(&[rows * cols], seed);
        for (name, f, domain) in unary_ops() {
            let data: Vec<f64> = raw.data().iter().map(|&v| domain(v)).collect();
            let err = check_unary(f, &[rows, cols], &data, seed + 1);
            prop_assert!(err < 1e-6, "{name}: relative error {err:e} at {rows}x{cols}");
        }
    }

    #[test]
    fn sort_matches_finite_differences(len in 1usize..=8, cols in 1usize..=8, seed in 0u64..1000) {
        // distinct, well-separated values so no tie is crossed
        let mut data = Vec::with_capacity(len * cols);
        let perm = tcvae_numerics::standard_normal::<f64>(&[len * cols], seed);
        for (i, p) in perm.data().iter().enumerate() {
            data.push(i as f64 * 0.37 + 0.01 * p.tanh());
        }
        // shuffle deterministically along the sorted axis
        data.reverse();
        let err = check_unary(|g, x| g.sort(x, 0), &[len, cols], &data, seed);
        prop_assert!(err < 1e-6, "sort error {err:e}");
    }

    #[test]
    fn binary_primitives_match_finite_differences(
        rows in 1usize..=8,
        cols in 1usize..=8,
        inner in 1usize..=8,
        seed in 0u64..1000,
    ) {
        let a = tcvae_numerics::standard_normal::<f64>(&[rows, inner], seed);
        let b = tcvae_numerics::standard_normal::<f64>(&[inner, cols], seed + 7);
        let c = tcvae_numerics::standard_normal::<f64>(&[rows, inner], seed + 9);
        let row = tcvae_numerics::standard_normal::<f64>(&[inner], seed + 11);
        let col = tcvae_numerics::standard_normal::<f64>(&[rows, 1], seed + 13);
        let mut store = ParamStore::new();
        let ia = store.add("a", a).unwrap();
        let ib = store.add("b", b).unwrap();
        let ic = store.add("c", c).unwrap();
        let ir = store.add("row", row).unwrap();
        let il = store.add("col", col).unwrap();
        let w1 = weights_for(&[rows, cols], seed + 3);
        let w2 = weights_for(&[rows, inner], seed + 4);
        let report = gradient_check(&store, 1e-5, |s, g| {
            let a = g.param(s, ia);
            let b = g.param(s, ib);
            let c = g.param(s, ic);
            let r = g.param(s, ir);
            let l = g.param(s, il);
            let ab = g.matmul(a, b)?;
            let t1 = weighted_loss(g, ab, &w1)?;
            let sum = g.add(a, r)?;          // row broadcast
            let prod = g.mul(sum, l)?;       // column broadcast
            let diff = g.sub(prod, c)?;
            let t2 = weighted_loss(g, diff, &w2)?;
            let cat = g.concat(&[a, c], 1)?;
            let cat = g.narrow(cat, 1, inner / 2, inner)?;
            let t3 = weighted_loss(g, cat, &w2)?;
            let lc = g.lincomb(&[(a, 0.5), (c, -2.0), (a, 1.25)])?;
            let t4 = weighted_loss(g, lc, &w2)?;
            let tot = g.add(t1, t2)?;
            let tot = g.add(tot, t3)?;
            g.add(tot, t4)
        }).unwrap();
        prop_assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
    }
}

#[test]
fn batched_matmul_expand_gather_and_layer_norm_gradients() {
    let mut store = ParamStore::new();
    let ia = store.add("a", tcvae_numerics::standard_normal(&[2, 3, 4], 1)).unwrap();
    let ib = store.add("b", tcvae_numerics::standard_normal(&[2, 4, 5], 2)).unwrap();
    let it = store.add("table", tcvae_numerics::standard_normal(&[6, 5], 3)).unwrap();
    let ig = store.add("gain", tcvae_numerics::standard_normal(&[5], 4)).unwrap();
    let ibias = store.add("bias", tcvae_numerics::standard_normal(&[5], 5)).unwrap();
    let ie = store.add("e", tcvae_numerics::standard_normal(&[2, 1, 5], 6)).unwrap();
    let w = weights_for(&[2, 3, 5], 9);
    let report = gradient_check(&store, 1e-5, |s, g| {
        let a = g.param(s, ia);
        let b = g.param(s, ib);
        let ab = g.matmul(a, b)?;
        let t = g.param(s, it);
        let rows = g.gather_rows(t, &[0, 5, 5, 2, 1, 0])?;
        let rows = g.reshape(rows, &[2, 3, 5])?;
        let e = g.param(s, ie);
        let e = g.expand(e, &[2, 3, 5])?;
        let x = g.add(ab, rows)?;
        let x = g.add(x, e)?;
        let gain = g.param(s, ig);
        let bias = g.param(s, ibias);
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        weighted_loss(g, y, &w)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
}

#[test]
fn square_at_three_has_gradient_six() {
    let store = store_with("p", &[], &[3.0]);
    let id = store.id("p").unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let l = g.square(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[6.0]);
}

#[test]
fn identity_has_gradient_one() {
    for v in [-4.0, 0.0, 2.5] {
        let store = store_with("p", &[], &[v]);
        let id = store.id("p").unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[1.0]);
    }
}

#[test]
fn sigmoid_of_matrix_vector_product_matches_central_differences() {
    let store = store_with("W", &[2, 2], &[0.3, -1.2, 0.8, 0.5]);
    let id = store.id("W").unwrap();
    let x = Tensor::from_f64(&[2, 1], &[1.5, -0.7]).unwrap();
    let report = gradient_check(&store, 1e-5, |s, g| {
        let w = g.param(s, id);
        let xv = g.constant(x.clone());
        let wx = g.matmul(w, xv)?;
        let sg = g.sigmoid(wx);
        Ok(g.sum(sg))
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn quadratic_check_is_tight() {
    let store = store_with("p", &[3], &[1.0, -2.0, 0.5]);
    let id = store.id("p").unwrap();
    let report = gradient_check(&store, 1e-5, |s, g| {
        let p = g.param(s, id);
        let sq = g.square(p);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-8, "{report:?}");
    assert_eq!(report.params.len(), 1);
}

#[test]
fn empty_store_gives_empty_report() {
    let store = ParamStore::<f64>::new();
    let report = gradient_check(&store, 1e-5, |_, g| Ok(g.scalar(1.0))).unwrap();
    assert!(report.is_empty());
}

#[test]
fn nondeterministic_loss_is_detected() {
    use std::cell::Cell;
    let store = store_with("p", &[1], &[1.0]);
    let id = store.id("p").unwrap();
    let calls = Cell::new(0.0);
    let err = gradient_check(&store, 1e-5, |s, g| {
        calls.set(calls.get() + 1.0);
        let p = g.param(s, id);
        let c = g.scalar(calls.get());
        let y = g.mul(p, c)?;
        Ok(g.sum(y))
    })
    .unwrap_err();
    assert!(matches!(err, NumericsError::NonDeterministic { .. }));
}

#[test]
fn backward_rejects_non_scalar_and_non_finite_losses() {
    let store = store_with("p", &[2], &[1.0, 2.0]);
    let id = store.id("p").unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, id);
    assert!(matches!(g.backward(p), Err(NumericsError::NonScalarLoss(_))));

    let z = g.scalar(0.0);
    let l = g.log(z);
    assert!(matches!(g.backward(l), Err(NumericsError::NonFiniteLoss(_))));
    assert!(g.check_finite().is_err());
}

#[test]
fn gradient_check_rejects_bad_step() {
    let store = store_with("p", &[1], &[1.0]);
    assert!(gradient_check(&store, 0.0, |_, g| Ok(g.scalar(0.0))).is_err());
}

fn composite_grads(store: &ParamStore<f64>, a: f64, b: f64) -> Vec<f64> {
    let id = store.id("p").unwrap();
    let mut g = Graph::new();
    let p = g.param(store, id);
    let t = g.tanh(p);
    let l1 = g.sum(t);
    let sq = g.square(p);
    let e = g.exp(sq);
    let l2 = g.mean(e);
    let s1 = g.scale(l1, a);
    let s2 = g.scale(l2, b);
    let l = g.add(s1, s2).unwrap();
    g.backward(l).unwrap().get(id).unwrap().data().to_vec()
}

proptest! {
    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
        let data = tcvae_numerics::standard_normal::<f64>(&[5], seed);
        let store = store_with("p", &[5], data.data());
        let g1 = composite_grads(&store, 1.0, 0.0);
        let g2 = composite_grads(&store, 0.0, 1.0);
        let gc = composite_grads(&store, a, b);
        for i in 0..5 {
            let expect = a * g1[i] + b * g2[i];
            prop_assert!((gc[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn seeded_evaluations_are_bit_identical(seed in 0u64..1000) {
        let run = || {
            let store = store_with("p", &[4], &[0.1, 0.2, -0.3, 0.4]);
            let id = store.id("p").unwrap();
            let mut g = Graph::new();
            let mu = g.param(&store, id);
            let sigma = g.constant(Tensor::full(&[4], 0.5));
            let z = tcvae_numerics::seeded_gaussian(&mut g, mu, sigma, seed).unwrap();
            let s = g.sigmoid(z);
            let l = g.sum(s);
            let v = g.scalar_value(l).unwrap().to_bits();
            let gr: Vec<u64> = g.backward(l).unwrap().get(id).unwrap().data().iter().map(|x| x.to_bits()).collect();
            (v, gr)
        };
        prop_assert_eq!(run(), run());
    }
}

fn every_op_loss(s: &ParamStore<f64>, g: &mut Graph<f64>) -> Result<Var> {
    let a = g.param(s, s.id("a")?);
    let t = g.param(s, s.id("table")?);
    let b = g.param(s, s.id("b")?);
    let rows = g.gather_rows(t, &[1, 3, 1])?;
    let x = g.add(a, rows)?;
    let x = g.sort(x, 0)?;
    let y = g.matmul(x, b)?;
    let y = g.gelu(y);
    let bt = g.transpose(b)?;
    let bb = g.reshape(bt, &[1, 2, 4])?;
    let bb = g.expand(bb, &[3, 2, 4])?;
    let yy = g.reshape(y, &[3, 1, 2])?;
    let z = g.matmul(yy, bb)?;
    let z = g.reshape(z, &[3, 4])?;
    let z = g.roll(z, 1, 1)?;
    let z = g.softmax(z)?;
    let c = g.concat(&[z, x], 1)?;
    let c = g.narrow(c, 1, 2, 5)?;
    let c = g.lincomb(&[(c, 0.5), (c, -1.5)])?;
    let c = g.sum_axis(c, 0)?;
    let c = g.tanh(c);
    let c = g.sigmoid(c);
    let c = g.softplus(c);
    let c = g.add_scalar(c, 0.25);
    let c = g.sqrt(c);
    let c = g.log(c);
    let c = g.relu(c);
    let c = g.exp(c);
    let c = g.square(c);
    let c = g.neg(c);
    let c = g.scale(c, 1.5);
    let c = g.mul(c, c)?;
    let d = g.scale(c, 0.3);
    let c = g.sub(c, d)?;
    let m = g.mean(x);
    let s = g.sum(c);
    g.add(s, m)
}

fn every_op_store(seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("a", tcvae_numerics::standard_normal(&[3, 4], seed)).unwrap();
    s.add("table", tcvae_numerics::standard_normal(&[5, 4], seed + 1)).unwrap();
    s.add("b", tcvae_numerics::standard_normal(&[4, 2], seed + 2)).unwrap();
    s
}

proptest! {
    #[test]
    fn replay_matches_fresh_recording(seed in 0u64..1000, delta in -2.0f64..2.0, pick in 0usize..100) {
        let store = every_op_store(seed);
        let mut g = Graph::new();
        let loss = every_op_loss(&store, &mut g).unwrap();
        for (id, p) in store.iter() {
            let i = pick % p.value.numel();
            let mut probe = p.value.clone();
            probe.data_mut()[i] += delta;
            let replayed = g.replay(loss, id, &probe).unwrap();
            let mut moved = store.clone();
            moved.set_value(id, probe).unwrap();
            let mut fresh = Graph::new();
            let l = every_op_loss(&moved, &mut fresh).unwrap();
            let expect = fresh.scalar_value(l).unwrap();
            prop_assert_eq!(replayed.item().unwrap().to_bits(), expect.to_bits());
        }
    }
}

#[test]
fn replay_of_unchanged_value_is_recorded_value() {
    let store = every_op_store(4);
    let mut g = Graph::new();
    let loss = every_op_loss(&store, &mut g).unwrap();
    let id = store.id("table").unwrap();
    let mut probe = store.value(id).clone();
    // row 0 is never gathered
    probe.data_mut()[0] += 10.0;
    let r = g.replay(loss, id, &probe).unwrap();
    assert_eq!(r.item().unwrap().to_bits(), g.scalar_value(loss).unwrap().to_bits());
    let bad = Tensor::<f64>::zeros(&[2]);
    assert!(g.replay(loss, id, &bad).is_err());
}
