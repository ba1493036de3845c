use funlora::tensor::{grad_check, Result, Tape, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

// Keeps kinks (abs, sign, pow at 0) out of the finite-difference stencil.
fn away_from_zero(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-2.0f64..-0.1, 0.1f64..2.0], n)
}

fn mat(r: usize, c: usize, d: Vec<f64>) -> Tensor {
    Tensor::matrix(r, c, d).unwrap()
}

// Random weighting so each output element gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, x: Var, seed: f64) -> Result<Var> {
    let shape = t.value(x)?.shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect())?;
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_family(a in vals(6), b in vals(6)) {
        let e = grad_check(|t, p| { let y = t.matmul(p[0], p[1])?; weighted_sum(t, y, 0.7) },
            &[mat(2, 3, a.clone()), mat(3, 2, b.clone())], EPS).unwrap();
        prop_assert!(e < TOL, "matmul {e}");
        let e = grad_check(|t, p| { let y = t.matmul_nt(p[0], p[1])?; weighted_sum(t, y, 0.3) },
            &[mat(2, 3, a), mat(2, 3, b)], EPS).unwrap();
        prop_assert!(e < TOL, "matmul_nt {e}");
    }

    #[test]
    fn binary_with_broadcast(a in vals(4), b in vals(4), s in -2.0f64..2.0) {
        for op in 0..3 {
            let f = |t: &mut Tape, p: &[Var]| {
                let y = match op { 0 => t.add(p[0], p[1])?, 1 => t.sub(p[0], p[1])?, _ => t.mul(p[0], p[1])? };
                let z = match op { 0 => t.add(p[2], y)?, 1 => t.sub(y, p[2])?, _ => t.mul(p[2], y)? };
                weighted_sum(t, z, 1.3)
            };
            let e = grad_check(f, &[Tensor::vector(a.clone()), Tensor::vector(b.clone()), Tensor::scalar(s)], EPS).unwrap();
            prop_assert!(e < TOL, "op {op}: {e}");
        }
    }

    #[test]
    fn smooth_unary(a in vals(5), c in -2.0f64..2.0) {
        for op in 0..6 {
            let f = |t: &mut Tape, p: &[Var]| {
                let y = match op {
                    0 => t.cos(p[0])?,
                    1 => t.sin(p[0])?,
                    2 => t.silu(p[0])?,
                    3 => t.scale(p[0], c)?,
                    4 => t.offset(p[0], c)?,
                    _ => t.pow_by(p[0], 3.0)?,
                };
                weighted_sum(t, y, 0.9)
            };
            let e = grad_check(f, &[Tensor::vector(a.clone())], EPS).unwrap();
            prop_assert!(e < TOL, "op {op}: {e}");
        }
    }

    #[test]
    fn kinked_unary(a in away_from_zero(5), d in 0.3f64..3.0) {
        // sign(x)·|x|^d, differentiable in both x and d away from zero
        let f = |t: &mut Tape, p: &[Var]| {
            let s = t.sign(p[0])?;
            let m = t.abs(p[0])?;
            let pw = t.pow_var(m, p[1])?;
            let y = t.mul(s, pw)?;
            weighted_sum(t, y, 0.4)
        };
        let e = grad_check(f, &[Tensor::vector(a.clone()), Tensor::scalar(d)], EPS).unwrap();
        prop_assert!(e < TOL, "surrogate {e}");
        let f = |t: &mut Tape, p: &[Var]| { let m = t.abs(p[0])?; let y = t.pow_by(m, d)?; weighted_sum(t, y, 0.2) };
        let e = grad_check(f, &[Tensor::vector(a)], EPS).unwrap();
        prop_assert!(e < TOL, "pow_by {e}");
    }

    #[test]
    fn reductions_and_layout(a in vals(12), r in vals(4)) {
        for op in 0..10 {
            let f = |t: &mut Tape, p: &[Var]| {
                let y = match op {
                    0 => t.sum(p[0])?,
                    1 => t.mean(p[0])?,
                    2 => t.sum_axis(p[0], 0)?,
                    3 => t.mean_axis(p[0], 1)?,
                    4 => t.reshape(p[0], &[4, 3])?,
                    5 => t.roll(p[0], 5)?,
                    6 => t.select(p[0], 7)?,
                    7 => t.slice_flat(p[0], 2, &[3, 3])?,
                    8 => t.add_row(p[0], p[1])?,
                    _ => { let c = t.concat(&[p[0], p[0]], 0)?; t.concat(&[c, c], 1)? }
                };
                weighted_sum(t, y, 0.6)
            };
            let e = grad_check(f, &[mat(3, 4, a.clone()), Tensor::vector(r.clone())], EPS).unwrap();
            prop_assert!(e < TOL, "op {op}: {e}");
        }
    }

    #[test]
    fn structured_ops(a in vals(4), w in vals(16), f in vals(4), logits in vals(6)) {
        let e = grad_check(|t, p| { let y = t.repeat_expand(p[0], 2, 3, 4)?; weighted_sum(t, y, 1.1) },
            &[mat(2, 2, a)], EPS).unwrap();
        prop_assert!(e < TOL, "repeat_expand {e}");
        let e = grad_check(|t, p| { let y = t.scale_blocks(p[0], p[1])?; weighted_sum(t, y, 0.5) },
            &[Tensor::new(vec![2, 2, 2, 2], w).unwrap(), mat(2, 2, f)], EPS).unwrap();
        prop_assert!(e < TOL, "scale_blocks {e}");
        let e = grad_check(|t, p| t.softmax_cross_entropy(p[0], &[2, 0]),
            &[mat(2, 3, logits)], EPS).unwrap();
        prop_assert!(e < TOL, "cross entropy {e}");
    }

    #[test]
    fn backward_is_linear(a in vals(6)) {
        // grad(L1 + L2) == grad(L1) + grad(L2) bit for bit when evaluated in the same order
        let build = |t: &mut Tape, x: Var| -> Result<(Var, Var)> {
            let c = t.cos(x)?;
            let l1 = t.sum(c)?;
            let sq = t.mul(x, x)?;
            let l2 = t.mean(sq)?;
            Ok((l1, l2))
        };
        let x0 = mat(2, 3, a);
        let grad_of = |which: usize| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let (l1, l2) = build(&mut t, x).unwrap();
            let loss = match which { 0 => l1, 1 => l2, _ => t.add(l1, l2).unwrap() };
            t.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
        let summed: Vec<f64> = g2.data().iter().zip(g1.data()).map(|(b, a)| b + a).collect();
        prop_assert_eq!(g12.data(), &summed[..]);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let run = || {
        let mut t = Tape::new();
        let w = t.param(mat(3, 3, (0..9).map(|i| (i as f64 * 0.77).sin()).collect()));
        let x = t.constant(mat(4, 3, (0..12).map(|i| (i as f64 * 1.3).cos()).collect()));
        let h = t.matmul_nt(x, w).unwrap();
        let h = t.silu(h).unwrap();
        let h = t.cos(h).unwrap();
        let loss = t.mean(h).unwrap();
        let g = t.backward(loss).unwrap();
        (t.value(loss).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.bitwise_eq(&l2));
    assert!(g1.bitwise_eq(&g2));
}
