use contourlab_autodiff::{primitive_checks, ParamSet, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes_gradcheck_over_ten_seeds() {
    for seed in 0..10 {
        for (name, report) in primitive_checks(seed).unwrap() {
            assert!(
                report.max_rel_error < 1e-4,
                "seed {seed} {name}: {report:?}"
            );
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let z = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let label = rng.random_range(0..2usize);
        let ps = ParamSet::new();
        let mut tape = Tape::<f64>::new(&ps);
        let zv = tape.leaf(Tensor::from_vec(vec![2], z.to_vec()));
        let loss = tape.softmax_cross_entropy(zv, &[label]).unwrap();
        let g = tape.backward(loss).unwrap();
        let norm = z[0].exp() + z[1].exp();
        for c in 0..2 {
            let expect = z[c].exp() / norm - if c == label { 1.0 } else { 0.0 };
            assert!((g.wrt(zv).unwrap()[c] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn mse_matches_brute_force_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut brute = 0.0;
    for i in 0..100 {
        brute += (a[i] - b[i]).powi(2);
    }
    brute /= 100.0;
    let ps = ParamSet::new();
    let mut tape = Tape::<f64>::new(&ps);
    let av = tape.constant(Tensor::from_vec(vec![100], a));
    let bv = tape.constant(Tensor::from_vec(vec![100], b));
    let m = tape.mse(av, bv).unwrap();
    assert!((tape.value(m)[0] - brute).abs() < 1e-6);
}

#[test]
fn f32_forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f32> = (0..2 * 4 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f32> = (0..8 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = || {
        let mut ps = ParamSet::<f32>::new();
        let kid = ps.insert("k", Tensor::from_vec(vec![8, 4, 3], k.clone())).unwrap();
        let bid = ps.insert("b", Tensor::zeros(vec![8])).unwrap();
        let mut tape = Tape::new(&ps);
        let xv = tape.constant(Tensor::from_vec(vec![2, 4, 20], x.clone()));
        let (kv, bv) = (tape.param(kid), tape.param(bid));
        let y = tape.conv1d(xv, kv, bv).unwrap();
        let y = tape.relu(y);
        let y = tape.maxpool1d(y).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn cross_entropy_is_shift_invariant(
        z0 in -30.0f64..30.0,
        z1 in -30.0f64..30.0,
        c in -100.0f64..100.0,
        label in 0usize..2,
    ) {
        let ps = ParamSet::new();
        let mut tape = Tape::<f64>::new(&ps);
        let a = tape.constant(Tensor::from_vec(vec![2], vec![z0, z1]));
        let b = tape.constant(Tensor::from_vec(vec![2], vec![z0 + c, z1 + c]));
        let la = tape.softmax_cross_entropy(a, &[label]).unwrap();
        let lb = tape.softmax_cross_entropy(b, &[label]).unwrap();
        prop_assert!((tape.value(la)[0] - tape.value(lb)[0]).abs() < 1e-6);
    }
}
