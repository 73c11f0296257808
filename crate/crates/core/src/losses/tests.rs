use super::*;
use crate::autograd::check::{max_rel_error, numeric_grad};
use crate::encoders::{InitSpec, StoreRole};
use ndarray::{array, s, Array1};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let mut a = randn(rng, r, c);
    for mut row in a.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    a
}

fn stack(rows: &[ArrayView1<f64>]) -> Array2<f64> {
    ndarray::stack(ndarray::Axis(0), rows).unwrap()
}

/// Candidate rows of anchor `i` in the order positive, same side, cross side.
fn candidates(i: usize, same: &Array2<f64>, cross: &Array2<f64>) -> Array2<f64> {
    let mut rows = vec![cross.row(i)];
    rows.extend((0..same.nrows()).filter(|&j| j != i).map(|j| same.row(j)));
    rows.extend((0..cross.nrows()).filter(|&j| j != i).map(|j| cross.row(j)));
    stack(&rows)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum()
}

fn brute_align(j1: &Array2<f64>, j2: &Array2<f64>, m1: &Array2<f64>, m2: &Array2<f64>, tau: f64) -> f64 {
    let b = j1.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let p = alignment_distribution(j1.row(i), candidates(i, j1, j2).view(), tau).unwrap();
        let q = alignment_distribution(m1.row(i), candidates(i, m1, m2).view(), tau).unwrap();
        total += kl(&p, &q);
        let p = alignment_distribution(j2.row(i), candidates(i, j2, j1).view(), tau).unwrap();
        let q = alignment_distribution(m2.row(i), candidates(i, m2, m1).view(), tau).unwrap();
        total += kl(&p, &q);
    }
    total / b as f64
}

fn drop_row(a: &Array2<f64>, i: usize) -> Array2<f64> {
    let rows: Vec<_> = (0..a.nrows()).filter(|&j| j != i).map(|j| a.row(j)).collect();
    if rows.is_empty() {
        Array2::zeros((0, a.ncols()))
    } else {
        stack(&rows)
    }
}

fn brute_contrastive(x1: &Array2<f64>, x2: &Array2<f64>, y1: &Array2<f64>, y2: &Array2<f64>, tau: f64) -> f64 {
    let b = x1.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let q12 = contrastive_q(x1.row(i), y2.row(i), drop_row(y1, i).view(), drop_row(y2, i).view(), tau).unwrap();
        let q21 = contrastive_q(x2.row(i), y1.row(i), drop_row(y2, i).view(), drop_row(y1, i).view(), tau).unwrap();
        total -= (0.5 * (q12 + q21)).ln();
    }
    total / b as f64
}

#[test]
fn distribution_cases() {
    let same = array![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
    let p = alignment_distribution(array![0.6, 0.8].view(), same.view(), 0.1).unwrap();
    assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

    let cands = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
    let p = alignment_distribution(array![1.0, 0.0].view(), cands.view(), 1e-3).unwrap();
    assert!((p[0] - 1.0).abs() < 1e-12);

    let p = alignment_distribution(array![1.0, 0.0].view(), cands.view(), 0.5).unwrap();
    let z = 2f64.exp() + 1.0 + 1.2f64.exp();
    for (got, want) in p.iter().zip([2f64.exp() / z, 1.0 / z, 1.2f64.exp() / z]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert!(matches!(alignment_distribution(array![1.0].view(), array![[1.0]].view(), 0.0), Err(Error::Argument(_))));
}

#[test]
fn align_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (j1, j2) = (unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4));
    assert!(align_loss(&j1, &j2, &j1, &j2, 0.1).unwrap().abs() < 1e-12);

    // Two pairs: every anchor sees a positive, one same-side and one cross-side negative.
    let j1 = array![[1.0, 0.0], [0.0, 1.0]];
    let j2 = array![[0.8, 0.6], [0.6, 0.8]];
    let m1 = array![[0.0, 1.0], [1.0, 0.0]];
    let m2 = array![[1.0, 0.0], [0.0, 1.0]];
    let tau = 0.5;
    let dist = |a: [f64; 2], c: [[f64; 2]; 3]| {
        let l: Vec<f64> = c.iter().map(|v| (a[0] * v[0] + a[1] * v[1]) / tau).collect();
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        l.iter().map(|x| x.exp() / z).collect::<Vec<f64>>()
    };
    let mut want = 0.0;
    // anchor: (embedding, positive, same-side negative, cross-side negative)
    let views = |a: &Array2<f64>, i: usize| [a[[i, 0]], a[[i, 1]]];
    for i in 0..2 {
        let o = 1 - i;
        want += kl(
            &dist(views(&j1, i), [views(&j2, i), views(&j1, o), views(&j2, o)]),
            &dist(views(&m1, i), [views(&m2, i), views(&m1, o), views(&m2, o)]),
        );
        want += kl(
            &dist(views(&j2, i), [views(&j1, i), views(&j2, o), views(&j1, o)]),
            &dist(views(&m2, i), [views(&m1, i), views(&m2, o), views(&m1, o)]),
        );
    }
    want /= 2.0;
    assert!((align_loss(&j1, &j2, &m1, &m2, tau).unwrap() - want).abs() < 1e-12);
    assert!((brute_align(&j1, &j2, &m1, &m2, tau) - want).abs() < 1e-12);
    assert!(matches!(align_loss(&Array2::zeros((0, 2)), &j2, &m1, &m2, tau), Err(Error::Argument(_))));
}

#[test]
fn contrastive_q_cases() {
    let e = array![1.0, 0.0];
    let none = Array2::zeros((0, 2));
    assert_eq!(contrastive_q(e.view(), e.view(), none.view(), none.view(), 0.1).unwrap(), 1.0);

    let one = array![[1.0, 0.0]];
    let q = contrastive_q(e.view(), e.view(), one.view(), one.view(), 0.1).unwrap();
    assert!((q - 1.0 / 3.0).abs() < 1e-15);

    let a = array![0.6, 0.8];
    let pos = array![0.8, 0.6];
    let n1 = array![[0.0, 1.0]];
    let n2 = array![[1.0, 0.0], [-0.6, 0.8]];
    let d = |u: f64| (u / 0.1).exp();
    let want = d(0.96) / (d(0.96) + d(0.8) + d(0.6) + d(0.28));
    let q = contrastive_q(a.view(), pos.view(), n1.view(), n2.view(), 0.1).unwrap();
    assert!((q - want).abs() < 1e-15);
}

#[test]
fn contrastive_loss_cases() {
    let x = array![[0.6, 0.8]];
    assert_eq!(contrastive_loss(&x, &x, &x, &x, 0.1).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let [x1, x2, y1, y2] = std::array::from_fn(|_| unit_rows(&mut rng, 2, 3));
    let got = contrastive_loss(&x1, &x2, &y1, &y2, 0.1).unwrap();
    assert!((got - brute_contrastive(&x1, &x2, &y1, &y2, 0.1)).abs() < 1e-12);
    assert!(matches!(contrastive_loss(&x1, &x2, &y1, &y2, -1.0), Err(Error::Argument(_))));
}

#[test]
fn candidate_batch_checks() {
    let pairs = vec![AlignedPair::new(0, 5), AlignedPair::new(1, 6), AlignedPair::new(2, 7)];
    let b = CandidateBatch::new(pairs).unwrap();
    assert_eq!(b.same_side_negatives(1).collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(b.cross_side_negatives(0).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(b.targets(), vec![5, 6, 7]);
    assert!(CandidateBatch::new(vec![]).is_err());
    assert!(CandidateBatch::new(vec![AlignedPair::new(0, 1), AlignedPair::new(2, 1)]).is_err());
}

fn mine_setup(seed: u64, in_dim: usize) -> (MineNetwork, ParameterStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = MineNetwork::new("mine.t", in_dim, 6);
    let store = net.new_store(&mut rng);
    (net, store)
}

#[test]
fn mine_constant_statistic_is_zero() {
    let (net, mut store) = mine_setup(3, 2);
    store.set("mine.t.w2", Array2::zeros((6, 1)));
    store.set("mine.t.b2", array![[2.5]]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (randn(&mut rng, 10, 2), randn(&mut rng, 10, 2));
    assert!(net.estimate(&store, &a, &b).unwrap().abs() < 1e-15);
    assert!(matches!(net.estimate(&store, &a.slice(s![..1, ..]).to_owned(), &b), Err(Error::Argument(_))));
}

#[test]
fn mi_loss_sums_four_negated_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let nets: [MineNetwork; 4] = std::array::from_fn(|k| MineNetwork::for_modality(Modality::MI_SUBSET[k], 4, 3, 5));
    let mut store = ParameterStore::new(StoreRole::Online);
    for net in &nets {
        net.init(&mut store, &mut rng);
    }
    let joint = randn(&mut rng, n, 4);
    let modal: [Array2<f64>; 4] = std::array::from_fn(|_| randn(&mut rng, n, 3));
    let perms: [Vec<usize>; 4] = std::array::from_fn(|k| (0..n).map(|i| (i + k + 1) % n).collect());
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let jv = g.constant(joint.clone());
    let mv = modal.clone().map(|m| g.constant(m));
    let (loss, est) = mi_loss(&mut g, &nets, &p, jv, mv, &perms, None);
    let mut want = 0.0;
    for k in 0..4 {
        let paired = ndarray::concatenate![ndarray::Axis(1), joint, modal[k]];
        let shuffled = ndarray::concatenate![ndarray::Axis(1), joint, modal[k].select(ndarray::Axis(0), &perms[k])];
        let i = nets[k].estimate(&store, &paired, &shuffled).unwrap();
        assert!((est[k] - i).abs() < 1e-14);
        want -= i;
    }
    assert!((g.scalar(loss) - want).abs() < 1e-13);
}

#[test]
fn bias_corrected_objective_reports_the_plain_estimate() {
    let (net, store) = mine_setup(6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (randn(&mut rng, 8, 2), randn(&mut rng, 8, 2));
    let plain = net.estimate(&store, &a, &b).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let (av, bv) = (g.constant(a), g.constant(b));
    let mut ema = MineEma::new(0.01);
    let (_, est) = mine_objective(&mut g, &net, &p, av, bv, Some(&mut ema));
    assert!((est - plain).abs() < 1e-13);
    assert!(ema.log_mean.is_some());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, d, tau) = (4, 6, 0.5);
    let inputs: [Array2<f64>; 4] = std::array::from_fn(|_| unit_rows(&mut rng, b, d));

    let check = |f: &dyn Fn(&mut Graph, [Var; 4]) -> Var, wrt: &[usize]| {
        let mut g = Graph::new();
        let vars = inputs.clone().map(|a| g.param(a));
        let root = f(&mut g, vars);
        let grads = g.backward(root);
        for &k in wrt {
            let numeric = numeric_grad(&inputs[k], 1e-5, |x| {
                let mut g = Graph::new();
                let mut arrs = inputs.clone();
                arrs[k] = x.clone();
                let vars = arrs.map(|a| g.constant(a));
                let r = f(&mut g, vars);
                g.scalar(r)
            });
            let err = max_rel_error(grads.get(vars[k]).unwrap(), &numeric);
            assert!(err < 1e-4, "input {k}: {err}");
        }
        (grads, vars)
    };
    check(&|g, v| contrastive_loss_graph(g, v[0], v[1], v[2], v[3], tau), &[0, 1, 2, 3]);
    let (grads, vars) = check(&|g, v| align_loss_graph(g, v[0], v[1], v[2], v[3], tau), &[2, 3]);
    // The joint side is a fixed target.
    assert!(grads.get(vars[0]).is_none() && grads.get(vars[1]).is_none());
}

#[test]
fn mi_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4;
    let nets: [MineNetwork; 4] = std::array::from_fn(|k| MineNetwork::for_modality(Modality::MI_SUBSET[k], 5, 3, 4));
    let mut store = ParameterStore::new(StoreRole::Online);
    for net in &nets {
        net.init(&mut store, &mut rng);
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let (r, c) = store.get(name).dim();
        store.set(name, randn(&mut rng, r, c));
    }
    let joint = randn(&mut rng, n, 5);
    let modal: [Array2<f64>; 4] = std::array::from_fn(|_| randn(&mut rng, n, 3));
    let perms: [Vec<usize>; 4] = std::array::from_fn(|k| (0..n).map(|i| (i + k + 1) % n).collect());
    let eval = |store: &ParameterStore, joint: &Array2<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let jv = g.constant(joint.clone());
        let mv = modal.clone().map(|m| g.constant(m));
        let (l, _) = mi_loss(&mut g, &nets, &p, jv, mv, &perms, None);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let jv = g.param(joint.clone());
    let mv = modal.clone().map(|m| g.constant(m));
    let (l, _) = mi_loss(&mut g, &nets, &p, jv, mv, &perms, None);
    let grads = g.backward(l);
    for name in &names {
        let numeric = numeric_grad(store.get(name), 1e-5, |x| {
            let mut s = store.clone();
            s.set(name, x.clone());
            eval(&s, &joint)
        });
        let err = max_rel_error(grads.get(p.var(name)).unwrap(), &numeric);
        assert!(err < 1e-4, "{name}: {err}");
    }
    let numeric = numeric_grad(&joint, 1e-5, |x| eval(&store, x));
    assert!(max_rel_error(grads.get(jv).unwrap(), &numeric) < 1e-4);
}

#[test]
fn momentum_cases() {
    let mut online = ParameterStore::new(StoreRole::Online);
    online.insert("w", array![[1.0, -2.0], [0.5, 3.0]], InitSpec::Glorot);
    let mut target = online.copy_as(StoreRole::Target);
    target.set("w", array![[0.3, 0.1], [7.0, -1.0]]);
    let mut copy = target.clone();
    momentum_update(&mut copy, &online, 0.0);
    assert_eq!(copy.get("w"), online.get("w"));

    let eps = 1e-3;
    let mut t = target.clone();
    t.set("w", Array2::zeros((2, 2)));
    let mut o = online.clone();
    o.set("w", Array2::ones((2, 2)));
    momentum_update(&mut t, &o, 1.0 - eps);
    assert!(t.get("w").iter().all(|v| (v - eps).abs() < 1e-15));

    momentum_update(&mut target, &online, 0.999);
    let want = array![[0.999 * 0.3 + 0.001 * 1.0, 0.999 * 0.1 - 0.001 * 2.0], [0.999 * 7.0 + 0.001 * 0.5, -0.999 + 0.003]];
    assert!(target.get("w").iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
#[should_panic(expected = "different schemas")]
fn momentum_rejects_schema_mismatch() {
    let mut a = ParameterStore::new(StoreRole::Target);
    a.insert("w", Array2::zeros((1, 1)), InitSpec::Zeros);
    let b = ParameterStore::new(StoreRole::Online);
    momentum_update(&mut a, &b, 0.5);
}

#[test]
fn total_loss_cases() {
    assert_eq!(total_loss([0.0; 6], 0.0, [0.0; 7]).total, 0.0);
    let b = total_loss([1.0; 6], -0.5, [2.0; 7]);
    assert_eq!(b.total, 6.0 - 0.5 + 14.0);
    let b = total_loss([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 0.25, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    assert!((b.total - (2.1 + 0.25 + 28.0)).abs() < 1e-12);
    let (epoch, back) = LossBreakdown::from_json(&b.to_json(17)).unwrap();
    assert_eq!((epoch, back), (17, b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn align_loss_nonnegative_and_matches_brute_force(seed in any::<u64>(), b in 1usize..5, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [j1, j2, m1, m2] = std::array::from_fn(|_| unit_rows(&mut rng, b, 3));
        let l = align_loss(&j1, &j2, &m1, &m2, tau).unwrap();
        prop_assert!(l >= -1e-12);
        prop_assert!((l - brute_align(&j1, &j2, &m1, &m2, tau)).abs() < 1e-9 * (1.0 + l.abs()));
    }

    #[test]
    fn contrastive_matches_brute_force(seed in any::<u64>(), b in 1usize..5, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [x1, x2, y1, y2] = std::array::from_fn(|_| unit_rows(&mut rng, b, 3));
        let l = contrastive_loss(&x1, &x2, &y1, &y2, tau).unwrap();
        prop_assert!(l >= -1e-12);
        prop_assert!((l - brute_contrastive(&x1, &x2, &y1, &y2, tau)).abs() < 1e-9 * (1.0 + l));
    }

    #[test]
    fn q_in_unit_interval_and_monotone(seed in any::<u64>(), k in 0usize..4, bump in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, 1, 3).row(0).to_owned();
        let pos = randn(&mut rng, 1, 3).row(0).to_owned();
        let (n1, n2) = (randn(&mut rng, k, 3), randn(&mut rng, k, 3));
        let q = contrastive_q(a.view(), pos.view(), n1.view(), n2.view(), 0.5).unwrap();
        prop_assert!(q > 0.0 && q <= 1.0);
        // Moving the positive towards the anchor raises its similarity.
        let closer: Array1<f64> = &pos + &(&a * bump);
        let q2 = contrastive_q(a.view(), closer.view(), n1.view(), n2.view(), 0.5).unwrap();
        prop_assert!(q2 >= q);
    }

    #[test]
    fn mine_shift_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let (net, mut store) = mine_setup(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let (a, b) = (randn(&mut rng, 7, 3), randn(&mut rng, 7, 3));
        let before = net.estimate(&store, &a, &b).unwrap();
        let b2 = store.get("mine.t.b2")[[0, 0]];
        store.set("mine.t.b2", array![[b2 + shift]]);
        let after = net.estimate(&store, &a, &b).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn temperature_preserves_argmax(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(&mut rng, 1, 4);
        let cands = unit_rows(&mut rng, 5, 4);
        let argmax = |p: Vec<f64>| p.iter().enumerate().fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
        let p1 = alignment_distribution(a.row(0), cands.view(), 0.3).unwrap();
        let p2 = alignment_distribution(a.row(0), cands.view(), 0.3 / c).unwrap();
        prop_assert_eq!(argmax(p1), argmax(p2));
    }

    #[test]
    fn momentum_converges_geometrically(kappa in 0.5f64..0.99, t0 in -3.0f64..3.0, o in -3.0f64..3.0) {
        prop_assume!((t0 - o).abs() > 1e-3);
        let mut online = ParameterStore::new(StoreRole::Online);
        online.insert("w", array![[o]], InitSpec::Zeros);
        let mut target = online.copy_as(StoreRole::Target);
        target.set("w", array![[t0]]);
        let mut gap = (t0 - o).abs();
        for _ in 0..20 {
            momentum_update(&mut target, &online, kappa);
            let next = (target.get("w")[[0, 0]] - o).abs();
            prop_assert!((next / gap - kappa).abs() < 1e-6);
            gap = next;
        }
    }
}
