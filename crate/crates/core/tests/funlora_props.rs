use funlora::funlora::{combine, importance, init_adapter, param_count, Adapter, AdapterSpec, Combine, FunctionalKind};
use funlora::linalg::{numerical_rank, singular_values, DEFAULT_RANK_TOL};
use funlora::rng::{rng_for, Stream};
use funlora::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn adapter(kind: FunctionalKind, a: Vec<f64>, b: Vec<f64>) -> Adapter {
    let p = kind.p();
    let hyper = if kind.has_hyper() { (1..=p).map(|i| i as f64).collect() } else { vec![] };
    Adapter { a, b, alphas: vec![1.0; p], hyper, kind, combine: Combine::Mul, class_label: 0, expand: None }
}

fn factors(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-1.5f64..-0.3, 0.3f64..1.5], n)
}

fn kinds(p: usize) -> Vec<FunctionalKind> {
    vec![
        FunctionalKind::VanillaMul,
        FunctionalKind::RShift { p },
        FunctionalKind::Pow { p, trainable: false },
        FunctionalKind::Pow { p, trainable: true },
        FunctionalKind::Cos { p, trainable: false },
        FunctionalKind::Cos { p, trainable: true },
    ]
}

fn mean_sq(m: &Tensor) -> f64 {
    m.data().iter().map(|x| x * x).sum::<f64>() / m.numel() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outer_product_has_rank_one(a in factors(7), b in factors(5)) {
        let f = adapter(FunctionalKind::VanillaMul, a, b).matrix().unwrap();
        prop_assert_eq!(numerical_rank(&f, DEFAULT_RANK_TOL).unwrap(), 1);
    }

    #[test]
    fn pow_and_rshift_rank_at_most_p(a in factors(12), b in factors(12), p in 1usize..6) {
        for kind in [FunctionalKind::RShift { p }, FunctionalKind::Pow { p, trainable: false }] {
            let f = adapter(kind, a.clone(), b.clone()).matrix().unwrap();
            prop_assert!(numerical_rank(&f, DEFAULT_RANK_TOL).unwrap() <= p, "{:?}", kind);
        }
    }

    #[test]
    fn calibrated_mul_is_identity_at_init(rows in 1usize..20, cols in 1usize..20, p in 1usize..12, seed in any::<u64>()) {
        let mut rng = rng_for(seed, Stream::Trial, 0);
        let w0 = Tensor::matrix(rows, cols, (0..rows * cols).map(|i| ((i as f64) * 0.37 + seed as f64 * 1e-3).sin()).collect()).unwrap();
        for kind in kinds(p) {
            let spec = AdapterSpec { kind, combine: Combine::Mul, calibrate: true };
            let init = init_adapter(&spec, rows, cols, 0, &mut rng).unwrap();
            prop_assert!(init.identity_at_init);
            let w = combine(&w0, &init.adapter.matrix().unwrap(), Combine::Mul).unwrap();
            prop_assert!(w.max_abs_diff(&w0).unwrap() < 1e-9, "{:?}", kind);
        }
    }

    #[test]
    fn bilinear_kinds_ignore_factor_rescaling(a in factors(6), b in factors(6), p in 1usize..6) {
        for kind in [FunctionalKind::VanillaMul, FunctionalKind::RShift { p }] {
            let f = adapter(kind, a.clone(), b.clone()).matrix().unwrap();
            for c in [2.0, 10.0] {
                let scaled = adapter(kind, a.iter().map(|x| x * c).collect(), b.iter().map(|x| x / c).collect());
                prop_assert!(scaled.matrix().unwrap().max_abs_diff(&f).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn importance_ignores_order_of_a(a in factors(9), b in factors(4), shift in 1usize..9) {
        let base = adapter(FunctionalKind::VanillaMul, a.clone(), b.clone());
        let mut rotated = a.clone();
        rotated.rotate_left(shift);
        let mut reversed = a;
        reversed.reverse();
        let i0 = importance(&base).unwrap();
        prop_assert!(i0 >= 0.0);
        for perm in [rotated, reversed] {
            let i1 = importance(&adapter(FunctionalKind::VanillaMul, perm, b.clone())).unwrap();
            // Summation order changes, so allow the last bits to move.
            prop_assert!((i1 - i0).abs() <= 1e-12 * i0.max(1.0), "{} vs {}", i1, i0);
        }
    }

    #[test]
    fn trainable_hyper_adds_p_per_layer(p in 1usize..16, dims in prop::collection::vec((1usize..80, 1usize..80), 1..20)) {
        for (t, f) in [
            (FunctionalKind::Cos { p, trainable: true }, FunctionalKind::Cos { p, trainable: false }),
            (FunctionalKind::Pow { p, trainable: true }, FunctionalKind::Pow { p, trainable: false }),
        ] {
            prop_assert_eq!(param_count(t, &dims) - param_count(f, &dims), p * dims.len());
        }
    }

    #[test]
    fn singular_values_match_nalgebra(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        use rand::Rng as _;
        let mut rng = rng_for(seed, Stream::Trial, 1);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ours = singular_values(&Tensor::matrix(rows, cols, data.clone()).unwrap()).unwrap();
        let mut theirs: Vec<f64> = nalgebra::DMatrix::from_row_slice(rows, cols, &data).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(ours.len(), theirs.len());
        for (x, y) in ours.iter().zip(&theirs) {
            prop_assert!((x - y).abs() <= 1e-10 * theirs[0].max(1.0), "{} vs {}", x, y);
        }
    }
}

#[test]
fn untouched_adapter_has_zero_importance() {
    let spec = AdapterSpec { kind: FunctionalKind::VanillaMul, combine: Combine::Mul, calibrate: true };
    let init = init_adapter(&spec, 6, 4, 0, &mut rng_for(0, Stream::Trial, 0)).unwrap();
    assert_eq!(importance(&init.adapter).unwrap(), 0.0);
}

#[test]
fn elementwise_kinds_are_not_bilinear() {
    let a: Vec<f64> = (0..6).map(|i| 0.4 + 0.2 * i as f64).collect();
    let b: Vec<f64> = (0..5).map(|i| 1.3 - 0.15 * i as f64).collect();
    for kind in [FunctionalKind::Pow { p: 3, trainable: false }, FunctionalKind::Cos { p: 3, trainable: false }] {
        let f = adapter(kind, a.clone(), b.clone()).matrix().unwrap();
        for c in [2.0, 10.0] {
            let scaled = adapter(kind, a.iter().map(|x| x * c).collect(), b.iter().map(|x| x / c).collect());
            assert!(scaled.matrix().unwrap().max_abs_diff(&f).unwrap() < 1e-12, "{kind:?}: outer product is unchanged");
        }
        // The invariance breaks once the rescaling is applied to one factor alone.
        let one_sided = adapter(kind, a.iter().map(|x| x * 2.0).collect(), b.clone());
        assert!(one_sided.matrix().unwrap().max_abs_diff(&f).unwrap() > 1e-3, "{kind:?}");
    }
    // RShift pairs A and B at different offsets, so per-factor scaling still cancels.
    let r = adapter(FunctionalKind::RShift { p: 3 }, a.clone(), b.clone()).matrix().unwrap();
    let r2 = adapter(FunctionalKind::RShift { p: 3 }, a.iter().map(|x| x * 2.0).collect(), b.clone()).matrix().unwrap();
    assert!(r2.max_abs_diff(&r.map(|x| 2.0 * x)).unwrap() < 1e-12);
}

#[test]
fn mean_square_gradients_match_differences() {
    let eps = 1e-5;
    for kind in kinds(3) {
        let a: Vec<f64> = (0..5).map(|i| 0.5 + 0.23 * i as f64).collect();
        let b: Vec<f64> = (0..4).map(|i| -1.1 + 0.31 * i as f64).collect();
        let mut ad = adapter(kind, a, b);
        ad.alphas.iter_mut().enumerate().for_each(|(i, x)| *x = 0.8 + 0.1 * i as f64);
        if kind.trainable_hyper() {
            ad.hyper = ad.hyper.iter().map(|h| h * 0.9 + 0.05).collect();
        }

        let mut tape = Tape::new();
        let vars = ad.register(&mut tape, true).unwrap();
        let f = ad.functional_on_tape(&mut tape, &vars).unwrap();
        let sq = tape.mul(f, f).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let handles = vars.trainable();

        let fields = ad.clone().trainable_mut().into_iter().map(|v| v.clone()).collect::<Vec<_>>();
        assert_eq!(handles.len(), fields.len(), "{kind:?}");
        for (fi, (var, field)) in handles.iter().zip(&fields).enumerate() {
            let analytic = grads.get(*var).expect("gradient recorded");
            for j in 0..field.len() {
                let at = |d: f64| {
                    let mut probe = ad.clone();
                    probe.trainable_mut()[fi][j] += d;
                    mean_sq(&probe.matrix().unwrap())
                };
                let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
                let g = analytic.data()[j];
                let rel = (g - numeric).abs() / g.abs().max(1.0);
                assert!(rel < 1e-4, "{kind:?} field {fi}[{j}]: {g} vs {numeric}");
            }
        }
    }
}
