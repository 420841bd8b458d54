use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::rng::Key;
use crate::Error;

fn rand_tensor(key: Key, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n as u64).map(|i| key.normal_at(i)).collect()).unwrap()
}

/// Central differences of `f` with respect to every coordinate of every input.
fn fd_grads(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    h: f64,
) -> Vec<Vec<f64>> {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::new();
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            g.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

fn analytic(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    vars.iter()
        .map(|&v| tape.grad(v).unwrap().into_data())
        .collect()
}

fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    libm::sqrt(diff) / (libm::sqrt(na) + libm::sqrt(nb)).max(1e-12)
}

fn assert_fd(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let err = rel_err(&analytic(inputs, f), &fd_grads(inputs, f, 1e-6));
    assert!(err <= tol, "relative error {err}");
}

#[test]
fn matmul_identity_and_scalar_chain() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::eye(2));
    let b = t.constant(Tensor::from_rows(&[[5.0], [7.0]]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[5.0, 7.0]);

    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_rows(&[[2.0]]).unwrap(), true);
    let b = t.leaf(Tensor::from_rows(&[[3.0]]).unwrap(), true);
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).item(), 6.0);
    t.backward(c).unwrap();
    assert_eq!(t.grad(a).unwrap().item(), 3.0);
    assert_eq!(t.grad(b).unwrap().item(), 2.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let key = Key::new(11);
    let a = rand_tensor(key.derive(0), &[3, 4]);
    let b = rand_tensor(key.derive(1), &[4, 2]);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.at(i, p) * b.at(p, j);
            }
            assert!((t.value(c).at(i, j) - s).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap(), true);
    let s = t.sign(x);
    assert_eq!(t.value(s).data(), &[-1.0, 0.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap(), true);
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);
    let l = t.sum(r);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[1], vec![-3.0]).unwrap(), true);
    let a = t.abs(x);
    assert_eq!(t.value(a).item(), 3.0);
    t.backward(a).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), -1.0);
}

#[test]
fn abs_subgradient_at_zero_and_sign_is_constant() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![0.0, 1.5]).unwrap(), true);
    let a = t.abs(x);
    let s = t.sign(x);
    let p = t.mul(a, s).unwrap();
    let l = t.sum(p);
    t.backward(l).unwrap();
    // d/dx |x|·sign(x) with sign held constant: sign(x)·sign(x)
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn elementwise_broadcast_and_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let c = t.leaf(Tensor::scalar(2.0), true);
    let y = t.mul(x, c).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0]);
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(c).unwrap().item(), 6.0);
    let z = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.add(x, z), Err(Error::Dimension { .. })));
}

#[test]
fn segment_mean_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[1.0, 1.0], [3.0, 3.0]]).unwrap());
    let (m, empty) = t.segment_mean(x, &[0, 0], 1).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 2.0]);
    assert!(empty.is_empty());

    let x = t.constant(Tensor::from_rows(&[[5.0]]).unwrap());
    let (m, empty) = t.segment_mean(x, &[1], 2).unwrap();
    assert_eq!(t.value(m).data(), &[0.0, 5.0]);
    assert_eq!(empty, vec![0]);

    assert!(matches!(
        t.segment_mean(x, &[2], 2),
        Err(Error::Index { index: 2, .. })
    ));
}

#[test]
fn segment_mean_matches_loop() {
    let key = Key::new(3);
    let x = rand_tensor(key, &[20, 4]);
    let ids: Vec<usize> = (0..20).map(|i| (key.u64_at(1000 + i) % 3) as usize).collect();
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let (m, _) = t.segment_mean(vx, &ids, 3).unwrap();
    for s in 0..3 {
        let rows: Vec<usize> = (0..20).filter(|&r| ids[r] == s).collect();
        for c in 0..4 {
            let mean = rows.iter().map(|&r| x.at(r, c)).sum::<f64>() / rows.len() as f64;
            assert!((t.value(m).at(s, c) - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn gather_rows_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap(), true);
    let g = t.gather_rows(x, &[2, 0]).unwrap();
    assert_eq!(t.value(g).data(), &[3.0, 1.0]);

    let g = t.gather_rows(x, &[0, 0]).unwrap();
    let l = t.sum(g);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 0.0, 0.0]);

    assert!(matches!(
        t.gather_rows(x, &[3]),
        Err(Error::Index { index: 3, len: 3, .. })
    ));
}

#[test]
fn gather_rows_matches_loop() {
    let key = Key::new(5);
    let x = rand_tensor(key, &[7, 3]);
    let idx: Vec<usize> = (0..12).map(|i| (key.u64_at(99 + i) % 7) as usize).collect();
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let g = t.gather_rows(vx, &idx).unwrap();
    for (k, &r) in idx.iter().enumerate() {
        assert_eq!(t.value(g).row(k), x.row(r));
    }
}

#[test]
fn loss_examples() {
    let mut t = Tape::new();
    let s = t.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let l = t.cross_entropy(s, &[0]).unwrap();
    assert!((t.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(
        t.cross_entropy(s, &[2]),
        Err(Error::Index { index: 2, .. })
    ));

    let a = t.constant(Tensor::scalar(1.0));
    let b = t.constant(Tensor::scalar(1.0));
    let l = t.mse(a, b).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn cross_entropy_is_stable_for_large_scores() {
    let mut t = Tape::new();
    let s = t.leaf(Tensor::from_rows(&[[1000.0, -1000.0]]).unwrap(), true);
    let l = t.cross_entropy(s, &[1]).unwrap();
    assert!((t.value(l).item() - 2000.0).abs() < 1e-9);
    t.backward(l).unwrap();
    assert!(t.grad(s).unwrap().is_finite());
}

#[test]
fn losses_match_finite_differences() {
    for i in 0..20 {
        let key = Key::new(100 + i);
        let scores = rand_tensor(key.derive(0), &[3, 4]);
        let targets = [(i % 4) as usize, 1, 3];
        assert_fd(
            &[scores.clone()],
            &|t, v| t.cross_entropy(v[0], &targets).unwrap(),
            1e-6,
        );
        let ys = [0.0, 1.0, 0.25, 1.0];
        let logits = rand_tensor(key.derive(1), &[4]);
        assert_fd(&[logits], &|t, v| t.binary_ce(v[0], &ys).unwrap(), 1e-6);
        let p = rand_tensor(key.derive(2), &[2, 3]);
        let q = rand_tensor(key.derive(3), &[2, 3]);
        assert_fd(&[p, q], &|t, v| t.mse(v[0], v[1]).unwrap(), 1e-6);
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 12.0);

    let z = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(z), Err(Error::Usage(_))));
}

#[test]
fn sum_relu_wx_matches_finite_differences() {
    for i in 0..20 {
        let key = Key::new(200 + i);
        let w = rand_tensor(key.derive(0), &[3, 4]);
        let x = rand_tensor(key.derive(1), &[4, 2]);
        assert_fd(
            &[w, x],
            &|t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                let r = t.relu(p);
                t.sum(r)
            },
            1e-6,
        );
    }
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    for i in 0..20 {
        let key = Key::new(300 + i);
        let x = rand_tensor(key.derive(0), &[5, 3]);
        let b = rand_tensor(key.derive(1), &[3]);
        let s = rand_tensor(key.derive(2), &[5, 1]);
        let ids = [0usize, 2, 2, 1, 0];
        assert_fd(
            &[x.clone(), b, s],
            &|t, v| {
                let a = t.add_row(v[0], v[1]).unwrap();
                let m = t.mul_col(a, v[2]).unwrap();
                let sp = t.softplus(m);
                let ab = t.abs(a);
                let d = t.sub(sp, ab).unwrap();
                let (seg, _) = t.segment_mean(d, &ids, 3).unwrap();
                let g = t.gather_rows(seg, &[2, 0, 0, 1]).unwrap();
                let sc = t.scale(g, 0.7);
                let sl = t.slice_cols(sc, 1, 2).unwrap();
                let r = t.reshape(sl, &[2, 4]).unwrap();
                let c = t.concat_rows(&[r, r]).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.mean(sq)
            },
            1e-6,
        );
        assert_fd(
            &[x],
            &|t, v| {
                let w = t.window_max(v[0], &[0..2, 2..4, 4..5]).unwrap();
                let sq = t.mul(w, w).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
    }
}

#[test]
fn window_max_ties_route_to_lowest_row() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[[2.0], [2.0], [1.0]]).unwrap(), true);
    let m = t.window_max(x, &[0..3]).unwrap();
    assert_eq!(t.value(m).item(), 2.0);
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn unreachable_leaves_get_zero_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(1.0), true);
    let y = t.leaf(Tensor::scalar(2.0), true);
    let l = t.scale(x, 2.0);
    t.backward(l).unwrap();
    assert_eq!(t.grad(y).unwrap().item(), 0.0);
}

#[test]
fn optimizer_descends_and_respects_zero_gradients() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::scalar(1.0)).unwrap();
    store.insert("z", Tensor::scalar(0.5)).unwrap();
    let mut adam = Adam::new(0.1);
    let f = |w: f64| w * w;
    let before = f(store.get("w").unwrap().item());
    store.accumulate_grad("w", &Tensor::scalar(2.0)).unwrap();
    store.accumulate_grad("z", &Tensor::scalar(0.0)).unwrap();
    adam.step(&mut store, |_| true).unwrap();
    assert!(f(store.get("w").unwrap().item()) < before);
    assert_eq!(store.get("z").unwrap().item(), 0.5);
    assert!(store.grad("w").is_none());
}

#[test]
fn optimizer_requires_gradients() {
    let mut store = ParameterStore::new();
    store.insert("a.w", Tensor::scalar(1.0)).unwrap();
    store.insert("b.w", Tensor::scalar(1.0)).unwrap();
    store.accumulate_grad("a.w", &Tensor::scalar(1.0)).unwrap();
    let err = Adam::default().step(&mut store, |_| true).unwrap_err();
    match err {
        Error::Usage(msg) => assert!(msg.contains("b.w")),
        other => panic!("unexpected {other:?}"),
    }
    // nothing was updated
    assert_eq!(store.get("a.w").unwrap().item(), 1.0);
    Adam::default().step(&mut store, |n| n == "a.w").unwrap();
}

#[test]
fn optimizer_solves_least_squares() {
    // y = 2x + 1 exactly, so the optimum loss is zero.
    let xs: Vec<f64> = (0..8).map(|i| i as f64 / 4.0 - 1.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let mut store = ParameterStore::new();
    store.insert("a", Tensor::scalar(0.0)).unwrap();
    store.insert("b", Tensor::scalar(0.0)).unwrap();
    let mut adam = Adam::new(0.1);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let mut s = Session::new(&store, |_| true);
        let a = s.param("a").unwrap();
        let b = s.param("b").unwrap();
        let t = &mut s.tape;
        let x = t.constant(Tensor::new(&[8], xs.clone()).unwrap());
        let y = t.constant(Tensor::new(&[8], ys.clone()).unwrap());
        let ax = t.mul(x, a).unwrap();
        let p = t.add(ax, b).unwrap();
        let l = t.mse(p, y).unwrap();
        loss = t.value(l).item();
        t.backward(l).unwrap();
        let grads = s.gradients();
        drop(s);
        for (n, g) in grads {
            store.accumulate_grad(&n, &g).unwrap();
        }
        adam.step(&mut store, |_| true).unwrap();
    }
    assert!(loss <= 1e-6, "loss {loss}");
}

#[test]
fn session_binds_lazily_and_once() {
    let mut store = ParameterStore::new();
    store.insert("p", Tensor::scalar(2.0)).unwrap();
    store.insert("q", Tensor::scalar(3.0)).unwrap();
    let mut s = Session::new(&store, |n| n == "p");
    let p1 = s.param("p").unwrap();
    let p2 = s.param("p").unwrap();
    assert_eq!(p1, p2);
    let q = s.param("q").unwrap();
    assert!(!s.tape.requires_grad(q));
    assert!(matches!(s.param("missing"), Err(Error::Usage(_))));
}

#[test]
fn store_rejects_duplicates_and_iterates_sorted() {
    let mut store = ParameterStore::new();
    store.insert("b", Tensor::scalar(0.0)).unwrap();
    store.insert("a", Tensor::scalar(0.0)).unwrap();
    assert!(store.insert("a", Tensor::scalar(1.0)).is_err());
    let names: Vec<&str> = store.names().collect();
    assert_eq!(names, vec!["a", "b"]);
}

proptest! {
    #[test]
    fn backward_is_linear(vals in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let x0 = Tensor::new(&[4], vals).unwrap();
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let sq = t.mul(x, x).unwrap();
            let a = t.sum(sq);
            let r = t.relu(x);
            let b = t.mean(r);
            let root = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(root).unwrap();
            t.grad(x).unwrap()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for k in 0..4 {
            prop_assert!((ga.data()[k] + gb.data()[k] - gs.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_mean_broadcast_is_a_projection(
        vals in proptest::collection::vec(-5.0f64..5.0, 12),
        ids in proptest::collection::vec(0usize..3, 6),
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[6, 2], vals).unwrap());
        let (m, _) = t.segment_mean(x, &ids, 3).unwrap();
        let once = t.gather_rows(m, &ids).unwrap();
        let (m2, _) = t.segment_mean(once, &ids, 3).unwrap();
        let twice = t.gather_rows(m2, &ids).unwrap();
        prop_assert!(t.value(once).max_abs_diff(t.value(twice)) < 1e-12);
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let key = Key::new(seed);
            let mut t = Tape::new();
            let w = t.leaf(rand_tensor(key.derive(0), &[3, 3]), true);
            let x = t.constant(rand_tensor(key.derive(1), &[4, 3]));
            let y = t.matmul(x, w).unwrap();
            let r = t.softplus(y);
            let l = t.cross_entropy(r, &[0, 1, 2, 0]).unwrap();
            t.backward(l).unwrap();
            (t.value(l).item().to_bits(), t.grad(w).unwrap())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ga, gb);
    }
}
