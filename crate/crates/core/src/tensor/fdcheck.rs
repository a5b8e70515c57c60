//! Central finite differences against tape gradients. This is the
//! verification oracle every differentiable module is held to.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::scalar::Scalar;

/// Compare analytic gradients of `f` against central differences at `params`.
///
/// `f` must build a scalar loss from leaves handed to it in `params` order.
/// Returns the maximum over all parameter entries of
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
///
/// Panics if any evaluation is non-finite.
pub fn finite_difference_check<S, F>(f: &F, params: &[Array<S>], epsilon: f64) -> f64
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Var,
{
    assert!(epsilon > 0.0, "epsilon must be positive");

    let eval = |arrays: &[Array<S>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        let loss = f(&mut tape, &vars);
        let v = tape.value(loss);
        assert_eq!(v.numel(), 1, "loss must be scalar");
        let out = v.data()[0].to_f64();
        assert!(out.is_finite(), "non-finite loss during finite differences");
        out
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&mut tape, &vars);
    assert!(
        tape.value(loss).data()[0].is_finite(),
        "non-finite loss at the expansion point"
    );
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Array<S>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei].to_f64();
            work[pi].data_mut()[ei] = S::from_f64(orig + epsilon);
            let up = eval(&work);
            work[pi].data_mut()[ei] = S::from_f64(orig - epsilon);
            let down = eval(&work);
            work[pi].data_mut()[ei] = S::from_f64(orig);

            let central = (up - down) / (2.0 * epsilon);
            let a = analytic[pi][ei];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{BinaryKind, ReduceKind, UnaryKind};
    use std::sync::Arc;

    #[test]
    fn quadratic_loss_is_exact_to_fd_order() {
        let p = Array::<f64>::from_f64s(vec![3], &[1.5, -0.7, 2.0]);
        let err = finite_difference_check(
            &|t: &mut Tape<f64>, vs: &[Var]| {
                let sq = t.square(vs[0]);
                t.sum(sq, None, false)
            },
            &[p],
            1e-5,
        );
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let p = Array::<f64>::from_f64s(vec![2], &[1.0, 2.0]);
        let err = finite_difference_check(
            &|t: &mut Tape<f64>, _vs: &[Var]| t.constant(Array::scalar(4.0)),
            &[p],
            1e-5,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn bilinear_gradients_are_the_other_factor() {
        let a = Array::<f64>::from_f64s(vec![3], &[1.0, 2.0, 3.0]);
        let b = Array::<f64>::from_f64s(vec![3], &[-1.0, 0.5, 4.0]);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let prod = tape.mul(va, vb);
        let loss = tape.sum(prod, None, false);
        tape.backward(loss);
        assert_eq!(tape.grad(va).unwrap().data(), b.data());
        assert_eq!(tape.grad(vb).unwrap().data(), a.data());
    }

    fn rand_array(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Array<f64> {
        let n: usize = shape.iter().product();
        Array::from_f64s(shape, &(0..n).map(|_| rng.range(lo, hi)).collect::<Vec<_>>())
    }

    /// Every registered primitive, 100 randomized trials each, against
    /// central differences at 64-bit.
    #[test]
    fn every_primitive_matches_central_differences() {
        let unary = [
            (UnaryKind::Exp, -2.0, 2.0),
            (UnaryKind::Log, 0.2, 3.0),
            (UnaryKind::Softplus, -4.0, 4.0),
            (UnaryKind::Tanh, -2.0, 2.0),
            (UnaryKind::Square, -2.0, 2.0),
            (UnaryKind::Recip, 0.3, 3.0),
            (UnaryKind::Sqrt, 0.2, 4.0),
            // Keep clear of the kink at zero.
            (UnaryKind::Relu, 0.1, 3.0),
            (UnaryKind::Neg, -2.0, 2.0),
        ];
        let mut rng = Rng::new(2024);
        for (kind, lo, hi) in unary {
            for _ in 0..100 {
                let x = rand_array(&mut rng, vec![2, 3], lo, hi);
                let err = finite_difference_check(
                    &|t: &mut Tape<f64>, vs: &[Var]| {
                        let y = t.unary(kind, vs[0]);
                        // weighting breaks symmetry so bugs cannot cancel
                        let w = t.constant(Array::from_f64s(
                            vec![2, 3],
                            &[0.3, -1.1, 0.7, 2.0, -0.4, 1.3],
                        ));
                        let wy = t.mul(y, w);
                        t.sum(wy, None, false)
                    },
                    &[x],
                    1e-6,
                );
                assert!(err < 1e-4, "{kind:?}: err={err}");
            }
        }

        let binary = [
            (BinaryKind::Add, 0.5, 3.0),
            (BinaryKind::Sub, 0.5, 3.0),
            (BinaryKind::Mul, 0.5, 3.0),
            (BinaryKind::Div, 0.5, 3.0),
            (BinaryKind::Min, 0.5, 3.0),
        ];
        for (kind, lo, hi) in binary {
            for trial in 0..100 {
                // Alternate same-shape and broadcast operand layouts.
                let b_shape = if trial % 2 == 0 { vec![2, 3] } else { vec![3] };
                let a = rand_array(&mut rng, vec![2, 3], lo, hi);
                let mut b = rand_array(&mut rng, b_shape, lo, hi);
                if kind == BinaryKind::Min {
                    // Keep operands separated so the subgradient is stable.
                    for v in b.data_mut() {
                        *v += 3.0;
                    }
                }
                let err = finite_difference_check(
                    &|t: &mut Tape<f64>, vs: &[Var]| {
                        let y = t.binary(kind, vs[0], vs[1]);
                        let sq = t.square(y);
                        t.sum(sq, None, false)
                    },
                    &[a, b],
                    1e-6,
                );
                assert!(err < 1e-4, "{kind:?} trial {trial}: err={err}");
            }
        }

        for _ in 0..100 {
            let a = rand_array(&mut rng, vec![2, 4], -1.0, 1.0);
            let b = rand_array(&mut rng, vec![4, 3], -1.0, 1.0);
            let err = finite_difference_check(
                &|t: &mut Tape<f64>, vs: &[Var]| {
                    let y = t.matmul(vs[0], vs[1]);
                    let sq = t.square(y);
                    t.sum(sq, None, false)
                },
                &[a, b],
                1e-6,
            );
            assert!(err < 1e-4, "matmul err={err}");
        }

        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
            for trial in 0..100 {
                let a = rand_array(&mut rng, vec![3, 4], -2.0, 2.0);
                let axis = [None, Some(0), Some(1)][trial % 3];
                let err = finite_difference_check(
                    &|t: &mut Tape<f64>, vs: &[Var]| {
                        let y = t.reduce(kind, vs[0], axis, false);
                        let sq = t.square(y);
                        t.sum(sq, None, false)
                    },
                    &[a],
                    1e-7,
                );
                assert!(err < 1e-4, "{kind:?} axis={axis:?}: err={err}");
            }
        }

        for _ in 0..100 {
            let a = rand_array(&mut rng, vec![3, 5], -2.0, 2.0);
            let err = finite_difference_check(
                &|t: &mut Tape<f64>, vs: &[Var]| {
                    let y = t.log_softmax(vs[0]);
                    let w = t.constant(rand_array(&mut Rng::new(7), vec![3, 5], -1.0, 1.0));
                    let wy = t.mul(y, w);
                    t.sum(wy, None, false)
                },
                &[a],
                1e-6,
            );
            assert!(err < 1e-4, "log_softmax err={err}");
        }

        // Structural ops: slice / concat / gather / select / reshape /
        // row-gather round through FD too.
        for _ in 0..100 {
            let a = rand_array(&mut rng, vec![2, 5], -2.0, 2.0);
            let b = rand_array(&mut rng, vec![2, 2], -2.0, 2.0);
            let idx = Arc::new(vec![1usize, 3]);
            let rows = Arc::new(vec![3usize, 0, 3]);
            let mask = Arc::new(vec![true, false, false, true]);
            let err = finite_difference_check(
                &|t: &mut Tape<f64>, vs: &[Var]| {
                    let s = t.slice_last(vs[0], 1, 2);
                    let c = t.concat_last(s, vs[1]);
                    let g = t.gather_last(c, idx.clone());
                    let s2 = t.slice_last(vs[0], 3, 2);
                    let sel = t.select(mask.clone(), s2, vs[1]);
                    let flat = t.reshape(vs[0], vec![5, 2]);
                    let picked = t.gather_rows(flat, rows.clone());
                    let gs = t.square(g);
                    let ss = t.square(sel);
                    let ps = t.square(picked);
                    let l1 = t.sum(gs, None, false);
                    let l2 = t.sum(ss, None, false);
                    let l3 = t.sum(ps, None, false);
                    let l12 = t.add(l1, l2);
                    t.add(l12, l3)
                },
                &[a, b],
                1e-6,
            );
            assert!(err < 1e-4, "structural err={err}");
        }
    }
}
