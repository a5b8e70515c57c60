//! Generic associative scans.
//!
//! [`scan_sequential`] is the left-fold reference every other path is checked
//! against. [`scan_parallel`] computes the same inclusive prefix combinations
//! with a two-phase tree (an up-sweep reduction followed by an in-place
//! inclusive down-sweep), whose combine depth is logarithmic in the padded
//! length. Inputs whose length is not a power of two are padded with the
//! operator's identity when it has one, and otherwise with masked dummies via
//! the [`Mao`] lifting, which makes any operator safely right-paddable.
//!
//! The tree shape is a pure function of the input length, and combines run in
//! a fixed order, so results are reproducible run to run.

use std::sync::atomic::{AtomicUsize, Ordering};

/// A binary associative operator over `Elem`.
///
/// `combine` must be associative under the element type's equality metric
/// (exact for discrete elements, tolerance-based for floating point). It must
/// also be a pure function of its inputs: the parallel scan may reorder and
/// regroup calls freely.
pub trait AssocOp {
    type Elem: Clone;

    fn combine(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem;

    /// Two-sided identity, when one exists.
    fn identity(&self) -> Option<Self::Elem> {
        None
    }

    /// An element that is safe to right-pad a scan tree with. Defaults to the
    /// identity; operators without one may still offer a pass-through pad
    /// (see [`Mao`]). `last` is the final input element, for operators whose
    /// pad must be built from a value of the right shape.
    fn pad_element(&self, last: &Self::Elem) -> Option<Self::Elem> {
        let _ = last;
        self.identity()
    }
}

/// Inclusive sequential scan: `out[k] = elems[0] ∘ … ∘ elems[k]`.
///
/// This is the correctness oracle for [`scan_parallel`].
pub fn scan_sequential<O: AssocOp>(op: &O, elems: &[O::Elem]) -> Vec<O::Elem> {
    assert!(!elems.is_empty(), "scan over an empty sequence");
    let mut out = Vec::with_capacity(elems.len());
    out.push(elems[0].clone());
    for e in &elems[1..] {
        let prev = out.last().unwrap();
        out.push(op.combine(prev, e));
    }
    out
}

/// Inclusive parallel-structured scan; same contract as [`scan_sequential`].
///
/// Combine-tree depth is `ceil(log2 K)` for the up-sweep plus one fewer for
/// the down-sweep. On a power-of-two length `K` the tree performs exactly
/// `2K - log2(K) - 2` combines (see [`parallel_combine_count`]).
pub fn scan_parallel<O: AssocOp>(op: &O, elems: &[O::Elem]) -> Vec<O::Elem> {
    assert!(!elems.is_empty(), "scan over an empty sequence");
    let k = elems.len();
    if k == 1 {
        return vec![elems[0].clone()];
    }
    if k.is_power_of_two() {
        let mut buf = elems.to_vec();
        scan_pow2_in_place(op, &mut buf);
        return buf;
    }
    let p = k.next_power_of_two();
    match op.pad_element(&elems[k - 1]) {
        Some(pad) => {
            let mut buf = Vec::with_capacity(p);
            buf.extend_from_slice(elems);
            buf.resize(p, pad);
            scan_pow2_in_place(op, &mut buf);
            buf.truncate(k);
            buf
        }
        None => {
            // No identity: lift to the masked space, where a mask bit makes
            // any element a right-pad.
            let lifted = Mao(PassRef(op));
            let mut buf: Vec<MaskedElement<O::Elem>> = elems
                .iter()
                .map(|e| MaskedElement {
                    elem: e.clone(),
                    mask: false,
                })
                .collect();
            buf.resize(
                p,
                MaskedElement {
                    elem: elems[k - 1].clone(),
                    mask: true,
                },
            );
            scan_pow2_in_place(&lifted, &mut buf);
            buf.truncate(k);
            buf.into_iter().map(|m| m.elem).collect()
        }
    }
}

/// Borrowing adapter so the internal lift does not need `O: Clone`.
struct PassRef<'a, O>(&'a O);

impl<O: AssocOp> AssocOp for PassRef<'_, O> {
    type Elem = O::Elem;
    fn combine(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem {
        self.0.combine(a, b)
    }
    fn identity(&self) -> Option<Self::Elem> {
        self.0.identity()
    }
}

/// Work-efficient inclusive scan on a power-of-two buffer.
fn scan_pow2_in_place<O: AssocOp>(op: &O, buf: &mut [O::Elem]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let levels = n.trailing_zeros() as usize;

    // Up-sweep: buf[j] at block ends accumulates its block's combination.
    for d in 0..levels {
        let stride = 1 << (d + 1);
        let half = 1 << d;
        let mut i = 0;
        while i < n {
            let merged = op.combine(&buf[i + half - 1], &buf[i + stride - 1]);
            buf[i + stride - 1] = merged;
            i += stride;
        }
    }

    // Inclusive down-sweep: fill in the block midpoints from completed
    // prefixes to their left.
    for d in (0..levels.saturating_sub(1)).rev() {
        let stride = 1 << (d + 1);
        let half = 1 << d;
        let mut i = 0;
        while i + stride + half - 1 < n {
            let src = i + stride - 1;
            let tgt = i + stride + half - 1;
            buf[tgt] = op.combine(&buf[src], &buf[tgt]);
            i += stride;
        }
    }
}

/// Exact number of combine calls [`scan_parallel`] performs on a length-`k`
/// input once padded to `p = next_power_of_two(k)` (identity padding; masked
/// padding may skip some of these).
pub fn parallel_combine_count(k: usize) -> usize {
    if k <= 1 {
        return 0;
    }
    let p = k.next_power_of_two();
    2 * p - p.trailing_zeros() as usize - 2
}

// ── masked associative operators ────────────────────────────────────

/// An element paired with a padding bit. `mask = true` marks padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedElement<E> {
    pub elem: E,
    pub mask: bool,
}

impl<E> MaskedElement<E> {
    pub fn real(elem: E) -> Self {
        MaskedElement { elem, mask: false }
    }
    pub fn pad(elem: E) -> Self {
        MaskedElement { elem, mask: true }
    }
}

/// The masked lifting of an operator: combining with a padded right operand
/// passes the left element through untouched (and skips the underlying
/// combine entirely); otherwise the underlying operator applies and the left
/// mask is kept.
///
/// The lifted operator is associative whenever the mask sequence is
/// right-padding (once padding starts it never stops). The case
/// `m_b = 1, m_c = 0` genuinely breaks associativity — a test below keeps a
/// concrete counterexample.
pub struct Mao<O>(pub O);

impl<O: AssocOp> AssocOp for Mao<O> {
    type Elem = MaskedElement<O::Elem>;

    fn combine(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem {
        if b.mask {
            a.clone()
        } else {
            MaskedElement {
                elem: self.0.combine(&a.elem, &b.elem),
                mask: a.mask,
            }
        }
    }

    // No two-sided identity: a mask-on pad annihilates from the right but
    // not from the left. Right-padding a tree is still safe.
    fn pad_element(&self, last: &Self::Elem) -> Option<Self::Elem> {
        Some(MaskedElement {
            elem: last.elem.clone(),
            mask: true,
        })
    }
}

/// Wrapper that counts underlying combine evaluations; used by benchmarks and
/// the pass-through accounting tests.
pub struct CountingOp<'a, O> {
    pub inner: &'a O,
    pub count: AtomicUsize,
}

impl<'a, O> CountingOp<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        CountingOp {
            inner,
            count: AtomicUsize::new(0),
        }
    }
    pub fn calls(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<O: AssocOp> AssocOp for CountingOp<'_, O> {
    type Elem = O::Elem;
    fn combine(&self, a: &Self::Elem, b: &Self::Elem) -> Self::Elem {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.combine(a, b)
    }
    fn identity(&self) -> Option<Self::Elem> {
        self.inner.identity()
    }
    fn pad_element(&self, last: &Self::Elem) -> Option<Self::Elem> {
        self.inner.pad_element(last)
    }
}

/// Checks that a mask sequence is right-padding: `mask[i]` implies `mask[j]`
/// for all `j > i`.
pub fn is_right_padding(mask: &[bool]) -> bool {
    mask.windows(2).all(|w| !w[0] || w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    struct AddOp;
    impl AssocOp for AddOp {
        type Elem = f64;
        fn combine(&self, a: &f64, b: &f64) -> f64 {
            a + b
        }
        fn identity(&self) -> Option<f64> {
            Some(0.0)
        }
    }

    struct U64Add;
    impl AssocOp for U64Add {
        type Elem = u64;
        fn combine(&self, a: &u64, b: &u64) -> u64 {
            a.wrapping_add(*b)
        }
        fn identity(&self) -> Option<u64> {
            Some(0)
        }
    }

    /// 2x2 matrix product; associative, no identity declared on purpose so
    /// the identity-less padding path gets exercised.
    struct Mat2;
    impl AssocOp for Mat2 {
        type Elem = [f64; 4];
        fn combine(&self, a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
            [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ]
        }
    }

    #[test]
    fn running_sum() {
        let out = scan_sequential(&AddOp, &[1.0, 2.0, 3.0]);
        assert_eq!(out, vec![1.0, 3.0, 6.0]);
        let single = scan_sequential(&AddOp, &[5.0]);
        assert_eq!(single, vec![5.0]);
    }

    #[test]
    fn parallel_running_sum_of_ones() {
        let out = scan_parallel(&AddOp, &[1.0; 8]);
        assert_eq!(out, (1..=8).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_length_one_is_input() {
        let out = scan_parallel(&Mat2, &[[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(out, vec![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn matrix_scan_matches_left_fold() {
        let mut rng = Rng::new(1);
        let elems: Vec<[f64; 4]> = (0..8)
            .map(|_| [rng.normal(), rng.normal(), rng.normal(), rng.normal()])
            .collect();
        let scanned = scan_sequential(&Mat2, &elems);
        // brute-force fold oracle
        let mut acc = elems[0];
        for (i, e) in elems.iter().enumerate().skip(1) {
            acc = Mat2.combine(&acc, e);
            for j in 0..4 {
                assert!((scanned[i][j] - acc[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_all_lengths() {
        let mut rng = Rng::new(2);
        for k in (1..=70).chain([127, 128, 129, 255, 256, 257, 511, 512]) {
            let elems: Vec<f64> = (0..k).map(|_| rng.range(-1.0, 1.0)).collect();
            let seq = scan_sequential(&AddOp, &elems);
            let par = scan_parallel(&AddOp, &elems);
            for (s, p) in seq.iter().zip(&par) {
                assert!((s - p).abs() < 1e-10, "k={k}");
            }

            let mats: Vec<[f64; 4]> = (0..k)
                .map(|_| {
                    [
                        rng.range(-0.9, 0.9),
                        rng.range(-0.9, 0.9),
                        rng.range(-0.9, 0.9),
                        rng.range(-0.9, 0.9),
                    ]
                })
                .collect();
            let seq = scan_sequential(&Mat2, &mats);
            let par = scan_parallel(&Mat2, &mats);
            for (s, p) in seq.iter().zip(&par) {
                for j in 0..4 {
                    assert!((s[j] - p[j]).abs() < 1e-10, "k={k}");
                }
            }
        }
    }

    #[test]
    fn mao_definition_cases() {
        let op = Mao(AddOp);
        let a = MaskedElement::real(5.0);
        let b_pad = MaskedElement::pad(7.0);
        let b_real = MaskedElement::real(7.0);
        // right mask on: left passes through untouched
        assert_eq!(op.combine(&a, &b_pad), a);
        // both masks off: behaves exactly as the underlying operator
        assert_eq!(op.combine(&a, &b_real), MaskedElement::real(12.0));
    }

    #[test]
    fn mao_prefix_pass_through() {
        let op = Mao(AddOp);
        let elems = [
            MaskedElement::real(5.0),
            MaskedElement::pad(7.0),
            MaskedElement::pad(9.0),
        ];
        for scan in [scan_sequential(&op, &elems), scan_parallel(&op, &elems)] {
            let vals: Vec<f64> = scan.iter().map(|m| m.elem).collect();
            assert_eq!(vals, vec![5.0, 5.0, 5.0]);
        }
    }

    #[test]
    fn mao_scan_holds_last_unpadded_state() {
        let mut rng = Rng::new(3);
        for k in [2usize, 5, 16, 33, 257] {
            for _ in 0..8 {
                let split = 1 + rng.below(k);
                let elems: Vec<MaskedElement<f64>> = (0..k)
                    .map(|i| {
                        if i < split {
                            MaskedElement::real(rng.range(-1.0, 1.0))
                        } else {
                            MaskedElement::pad(rng.range(-99.0, 99.0))
                        }
                    })
                    .collect();
                let op = Mao(AddOp);
                let par = scan_parallel(&op, &elems);
                let seq = scan_sequential(&op, &elems);
                let held = seq[split - 1].elem;
                for t in split..k {
                    assert!((par[t].elem - held).abs() < 1e-12);
                    assert!((seq[t].elem - held).abs() < 1e-12);
                }
                for t in 0..k {
                    assert!((par[t].elem - seq[t].elem).abs() < 1e-10);
                }
            }
        }
    }

    /// The executable associativity proof: all mask triples admissible under
    /// right-padding, exact elements so equality is bitwise.
    #[test]
    fn mao_associative_for_right_padding_masks() {
        let op = Mao(U64Add);
        let mut rng = Rng::new(4);
        let cases = [
            (false, false, false),
            (false, false, true),
            (false, true, true),
            (true, true, true),
        ];
        for _ in 0..1000 {
            for &(ma, mb, mc) in &cases {
                let a = MaskedElement { elem: rng.next_u64(), mask: ma };
                let b = MaskedElement { elem: rng.next_u64(), mask: mb };
                let c = MaskedElement { elem: rng.next_u64(), mask: mc };
                let ab_c = op.combine(&op.combine(&a, &b), &c);
                let a_bc = op.combine(&a, &op.combine(&b, &c));
                assert_eq!(ab_c, a_bc, "masks ({ma},{mb},{mc})");
            }
        }
    }

    /// The excluded mask pattern really does violate associativity.
    #[test]
    fn mao_counterexample_for_non_right_padding() {
        let op = Mao(AddOp);
        let a = MaskedElement::real(1.0);
        let b = MaskedElement::pad(2.0); // m_b = 1
        let c = MaskedElement::real(3.0); // m_c = 0
        let ab_c = op.combine(&op.combine(&a, &b), &c); // (1+3, 0) = 4
        let a_bc = op.combine(&a, &op.combine(&b, &c)); // b∘c = (5,1) ⇒ a
        assert_eq!(ab_c, MaskedElement::real(4.0));
        assert_eq!(a_bc, MaskedElement::real(1.0));
        assert_ne!(ab_c, a_bc);
    }

    #[test]
    fn lifted_operator_never_adds_combines() {
        let mut rng = Rng::new(5);
        for k in [8usize, 21, 64, 100] {
            let vals: Vec<f64> = (0..k).map(|_| rng.normal()).collect();

            let plain = CountingOp::new(&AddOp);
            scan_parallel(&plain, &vals);
            let plain_calls = plain.calls();

            let split = 1 + rng.below(k);
            let masked: Vec<MaskedElement<f64>> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| MaskedElement { elem: v, mask: i >= split })
                .collect();
            let counted = CountingOp::new(&AddOp);
            let lifted = Mao(PassRef(&counted));
            scan_parallel(&lifted, &masked);
            assert!(
                counted.calls() <= plain_calls,
                "k={k}: {} > {}",
                counted.calls(),
                plain_calls
            );
        }
    }

    #[test]
    fn combine_count_matches_formula_on_pow2() {
        for k in [2usize, 4, 8, 64, 256, 1024] {
            let vals: Vec<f64> = (0..k).map(|i| i as f64).collect();
            let counted = CountingOp::new(&AddOp);
            scan_parallel(&counted, &vals);
            assert_eq!(counted.calls(), parallel_combine_count(k), "k={k}");
        }
        assert_eq!(parallel_combine_count(1), 0);
        assert_eq!(parallel_combine_count(4), 4);
        assert_eq!(parallel_combine_count(8), 11);
    }

    #[test]
    #[should_panic(expected = "empty sequence")]
    fn sequential_rejects_empty() {
        scan_sequential(&AddOp, &[]);
    }

    #[test]
    #[should_panic(expected = "empty sequence")]
    fn parallel_rejects_empty() {
        scan_parallel(&AddOp, &[]);
    }

    #[test]
    fn right_padding_predicate() {
        assert!(is_right_padding(&[false, false, true, true]));
        assert!(is_right_padding(&[false, false]));
        assert!(is_right_padding(&[true, true]));
        assert!(!is_right_padding(&[false, true, false]));
    }
}
