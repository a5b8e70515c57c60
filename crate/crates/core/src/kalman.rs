//! Diagonal linear-Gaussian Kalman filtering.
//!
//! With diagonal dynamics, identity emission and diagonal noise, every state
//! channel filters independently, and both the posterior-variance and the
//! posterior-mean recurrences become compositions of tiny per-step maps:
//!
//! - the variance step `v ↦ r·(a²v + q) / (a²v + q + r)` is a Möbius
//!   (fractional-linear) transform, represented by a 2×2 matrix whose
//!   composition law is the ordinary matrix product;
//! - once the per-step gains are known, the mean step is affine,
//!   `m ↦ α·m + β`, composed by `(α₂, β₂)∘(α₁, β₁) = (α₂α₁, α₂β₁+β₂)`.
//!
//! Both compositions are associative, so all posteriors come out of two
//! associative scans ("two-pass" filtering). [`filter_sequential`] is the
//! plain interleaved predict/update recursion the scans are verified against.

use crate::scalar::Scalar;
use crate::scan::{
    is_right_padding, scan_parallel, scan_sequential, AssocOp, Mao, MaskedElement,
};

/// Diagonal Gaussian belief over the latent state: one mean and one strictly
/// positive variance per channel.
#[derive(Clone, Debug)]
pub struct GaussianBelief<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> GaussianBelief<S> {
    /// The standard-normal initial belief used everywhere: mean 0, variance 1.
    pub fn standard(n: usize) -> Self {
        GaussianBelief {
            mean: vec![S::zero(); n],
            var: vec![S::one(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn assert_valid(&self) {
        assert_eq!(self.mean.len(), self.var.len());
        assert!(
            self.var.iter().all(|v| *v > S::zero()),
            "belief variances must be strictly positive"
        );
    }
}

/// Time-invariant diagonal dynamics: transition `a`, input gain `b`, process
/// noise `q` (all per channel).
///
/// `q` must be nonnegative; the degenerate `q = 0` is accepted so that static
/// test systems (`a = 1, b = 0, q = 0`) stay representable. Discretizing a
/// stable continuous-time system yields `|a| <= 1`; training may drift past
/// that, which callers log rather than clamp.
#[derive(Clone, Debug)]
pub struct DiagonalDynamics<S> {
    pub a: Vec<S>,
    pub b: Vec<S>,
    pub q: Vec<S>,
}

impl<S: Scalar> DiagonalDynamics<S> {
    pub fn new(a: Vec<S>, b: Vec<S>, q: Vec<S>) -> Self {
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len(), q.len());
        assert!(
            q.iter().all(|v| *v >= S::zero()),
            "process noise must be nonnegative"
        );
        DiagonalDynamics { a, b, q }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// Propagate a posterior belief through the dynamics:
/// `mean' = a⊙mean + b⊙u`, `var' = a²⊙var + q`.
pub fn predict<S: Scalar>(
    belief: &GaussianBelief<S>,
    dyn_: &DiagonalDynamics<S>,
    u: &[S],
) -> GaussianBelief<S> {
    belief.assert_valid();
    let n = belief.dim();
    assert_eq!(dyn_.dim(), n);
    assert_eq!(u.len(), n);
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for i in 0..n {
        mean.push(dyn_.a[i] * belief.mean[i] + dyn_.b[i] * u[i]);
        var.push(dyn_.a[i] * dyn_.a[i] * belief.var[i] + dyn_.q[i]);
    }
    GaussianBelief { mean, var }
}

/// Condition a prior belief on an observation `w` with noise variance `r`:
/// gain `K = var/(var+r)`, `mean' = mean + K⊙(w − mean)`,
/// `var' = (1−K)⊙var`. Returns the posterior and the gain.
pub fn update<S: Scalar>(
    prior: &GaussianBelief<S>,
    w: &[S],
    r: &[S],
) -> (GaussianBelief<S>, Vec<S>) {
    prior.assert_valid();
    let n = prior.dim();
    assert_eq!(w.len(), n);
    assert_eq!(r.len(), n);
    assert!(
        r.iter().all(|v| *v > S::zero()),
        "observation noise must be strictly positive"
    );
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    let mut gain = Vec::with_capacity(n);
    for i in 0..n {
        let k = prior.var[i] / (prior.var[i] + r[i]);
        mean.push(prior.mean[i] + k * (w[i] - prior.mean[i]));
        var.push((S::one() - k) * prior.var[i]);
        gain.push(k);
    }
    (GaussianBelief { mean, var }, gain)
}

/// Interleaved predict/update over length-`K` sequences, returning the
/// posterior belief after every step. Sequences are flat `[K, N]` row-major;
/// step `t` consumes `u[t]` in the transition and conditions on `w[t], r[t]`.
///
/// This is the exact reference the scan formulation is checked against.
pub fn filter_sequential<S: Scalar>(
    init: &GaussianBelief<S>,
    dyn_: &DiagonalDynamics<S>,
    u_seq: &[S],
    w_seq: &[S],
    r_seq: &[S],
) -> Vec<GaussianBelief<S>> {
    let n = init.dim();
    assert!(n > 0);
    assert_eq!(u_seq.len(), w_seq.len(), "sequence lengths differ");
    assert_eq!(u_seq.len(), r_seq.len(), "sequence lengths differ");
    assert!(
        !u_seq.is_empty() && u_seq.len().is_multiple_of(n),
        "sequences must hold K >= 1 steps of {n} channels"
    );
    let k = u_seq.len() / n;
    let mut out = Vec::with_capacity(k);
    let mut belief = init.clone();
    for t in 0..k {
        let s = t * n;
        let prior = predict(&belief, dyn_, &u_seq[s..s + n]);
        let (post, _) = update(&prior, &w_seq[s..s + n], &r_seq[s..s + n]);
        belief = post.clone();
        out.push(post);
    }
    out
}

// ── scan formulation ────────────────────────────────────────────────

/// Möbius representation of the per-step posterior-variance map
/// `v ↦ (m[0]·v + m[1]) / (m[2]·v + m[3])`.
///
/// For a filter step with transition `a`, process noise `q` and observation
/// noise `r` the matrix is `[[r·a², r·q], [a², q+r]]`: all entries
/// nonnegative, bottom row strictly positive, so positive variances map to
/// positive variances and compositions stay well-conditioned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovMap<S> {
    pub m: [S; 4],
}

impl<S: Scalar> CovMap<S> {
    pub fn identity() -> Self {
        CovMap {
            m: [S::one(), S::zero(), S::zero(), S::one()],
        }
    }

    pub fn filter_step(a: S, q: S, r: S) -> Self {
        let a2 = a * a;
        CovMap {
            m: [r * a2, r * q, a2, q + r],
        }
    }

    pub fn apply(&self, v: S) -> S {
        (self.m[0] * v + self.m[1]) / (self.m[2] * v + self.m[3])
    }

    /// Divide by the max-abs entry. Möbius matrices represent the same map up
    /// to scale, so this is a semantic no-op that keeps long compositions
    /// away from overflow.
    pub fn normalized(self) -> Self {
        let mut s = S::zero();
        for e in self.m {
            s = s.maximum(e.abs());
        }
        if s == S::zero() {
            return self;
        }
        CovMap {
            m: [self.m[0] / s, self.m[1] / s, self.m[2] / s, self.m[3] / s],
        }
    }
}

/// Composition of covariance maps: apply `a` first, then `b`.
pub struct CovOp<S>(std::marker::PhantomData<S>);

impl<S> Default for CovOp<S> {
    fn default() -> Self {
        CovOp(std::marker::PhantomData)
    }
}

impl<S: Scalar> AssocOp for CovOp<S> {
    type Elem = CovMap<S>;

    fn combine(&self, a: &CovMap<S>, b: &CovMap<S>) -> CovMap<S> {
        let (x, y) = (&b.m, &a.m);
        CovMap {
            m: [
                x[0] * y[0] + x[1] * y[2],
                x[0] * y[1] + x[1] * y[3],
                x[2] * y[0] + x[3] * y[2],
                x[2] * y[1] + x[3] * y[3],
            ],
        }
        .normalized()
    }

    fn identity(&self) -> Option<CovMap<S>> {
        Some(CovMap::identity())
    }
}

/// Affine posterior-mean map `m ↦ alpha·m + beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanMap<S> {
    pub alpha: S,
    pub beta: S,
}

impl<S: Scalar> MeanMap<S> {
    pub fn identity() -> Self {
        MeanMap {
            alpha: S::one(),
            beta: S::zero(),
        }
    }

    pub fn apply(&self, m: S) -> S {
        self.alpha * m + self.beta
    }
}

/// Composition of mean maps: apply `a` first, then `b`.
pub struct MeanOp<S>(std::marker::PhantomData<S>);

impl<S> Default for MeanOp<S> {
    fn default() -> Self {
        MeanOp(std::marker::PhantomData)
    }
}

impl<S: Scalar> AssocOp for MeanOp<S> {
    type Elem = MeanMap<S>;

    fn combine(&self, a: &MeanMap<S>, b: &MeanMap<S>) -> MeanMap<S> {
        MeanMap {
            alpha: b.alpha * a.alpha,
            beta: b.alpha * a.beta + b.beta,
        }
    }

    fn identity(&self) -> Option<MeanMap<S>> {
        Some(MeanMap::identity())
    }
}

/// One channel-step of the associative filter: the variance map, the mean map
/// derived from that step's gain, and the padding bit.
#[derive(Clone, Copy, Debug)]
pub struct KfScanElement<S> {
    pub cov: CovMap<S>,
    pub mean: MeanMap<S>,
    pub mask: bool,
}

/// Which scan drives the two-pass filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel,
}

fn scan_masked<O: AssocOp>(op: O, elems: &[MaskedElement<O::Elem>], mode: ScanMode) -> Vec<MaskedElement<O::Elem>> {
    let lifted = Mao(op);
    match mode {
        ScanMode::Sequential => scan_sequential(&lifted, elems),
        ScanMode::Parallel => scan_parallel(&lifted, elems),
    }
}

/// Outputs of the two-pass scan filter, flat `[K, N]` row-major.
pub struct FilterScanOut<S> {
    pub means: Vec<S>,
    pub vars: Vec<S>,
    pub gains: Vec<S>,
}

/// Two-pass construction of the per-step associative elements.
///
/// Pass 1 scans the variance maps to recover every posterior variance (and
/// from them the gains); the mean maps are then built from the gains. The
/// returned elements are indexed `[channel][step]`. Padded steps carry
/// identity maps with the mask bit set, which the masked scan passes through.
pub fn build_scan_elements<S: Scalar>(
    init: &GaussianBelief<S>,
    dyn_: &DiagonalDynamics<S>,
    u_seq: &[S],
    w_seq: &[S],
    r_seq: &[S],
    mask: &[bool],
) -> Vec<Vec<KfScanElement<S>>> {
    let n = init.dim();
    let k = mask.len();
    assert_eq!(u_seq.len(), k * n);
    assert_eq!(w_seq.len(), k * n);
    assert_eq!(r_seq.len(), k * n);
    assert!(is_right_padding(mask), "mask must be right-padding");
    assert!(k > 0 && !mask[0], "need at least one unpadded step");

    let mut out = Vec::with_capacity(n);
    for ch in 0..n {
        let (a, q) = (dyn_.a[ch], dyn_.q[ch]);
        // Pass 1: variance maps, scanned to recover gains.
        let cov_elems: Vec<MaskedElement<CovMap<S>>> = (0..k)
            .map(|t| {
                if mask[t] {
                    MaskedElement::pad(CovMap::identity())
                } else {
                    MaskedElement::real(CovMap::filter_step(a, q, r_seq[t * n + ch]))
                }
            })
            .collect();
        let cov_scan = scan_masked(CovOp::default(), &cov_elems, ScanMode::Parallel);

        let mut elems = Vec::with_capacity(k);
        let mut prev_var = init.var[ch];
        for t in 0..k {
            if mask[t] {
                elems.push(KfScanElement {
                    cov: CovMap::identity(),
                    mean: MeanMap::identity(),
                    mask: true,
                });
                continue;
            }
            let r = r_seq[t * n + ch];
            let prior_var = a * a * prev_var + q;
            let gain = prior_var / (prior_var + r);
            let one_minus = S::one() - gain;
            elems.push(KfScanElement {
                cov: CovMap::filter_step(a, q, r),
                mean: MeanMap {
                    alpha: one_minus * a,
                    beta: one_minus * dyn_.b[ch] * u_seq[t * n + ch] + gain * w_seq[t * n + ch],
                },
                mask: false,
            });
            prev_var = cov_scan[t].elem.apply(init.var[ch]);
        }
        out.push(elems);
    }
    out
}

/// Process noise feeding the scan filter: one value per channel for
/// time-invariant layers, or one per step and channel for the time-varying
/// variant (flat `[K, N]`).
#[derive(Clone, Copy)]
pub enum ProcessNoise<'a, S> {
    PerChannel(&'a [S]),
    PerStep(&'a [S]),
}

impl<S: Scalar> ProcessNoise<'_, S> {
    fn at(&self, t: usize, n: usize, ch: usize) -> S {
        match self {
            ProcessNoise::PerChannel(q) => q[ch],
            ProcessNoise::PerStep(q) => q[t * n + ch],
        }
    }
}

/// Run the full two-pass filter and return all posterior means, variances and
/// gains. `mode` selects the scan driving both passes; both modes satisfy the
/// same contract as [`filter_sequential`] up to floating-point reassociation.
pub fn filter_scan<S: Scalar>(
    init: &GaussianBelief<S>,
    dyn_: &DiagonalDynamics<S>,
    u_seq: &[S],
    w_seq: &[S],
    r_seq: &[S],
    mask: &[bool],
    mode: ScanMode,
) -> FilterScanOut<S> {
    init.assert_valid();
    assert_eq!(dyn_.dim(), init.dim());
    filter_scan_from(
        &init.mean,
        &init.var,
        &dyn_.a,
        &dyn_.b,
        ProcessNoise::PerChannel(&dyn_.q),
        u_seq,
        w_seq,
        r_seq,
        mask,
        mode,
    )
}

/// [`filter_scan`] for the standard-normal initial belief with explicit
/// per-channel or per-step process noise; the form the trainable layers use.
#[allow(clippy::too_many_arguments)]
pub fn filter_scan_with<S: Scalar>(
    a: &[S],
    b: &[S],
    q: ProcessNoise<'_, S>,
    u_seq: &[S],
    w_seq: &[S],
    r_seq: &[S],
    mask: &[bool],
    mode: ScanMode,
) -> FilterScanOut<S> {
    let n = a.len();
    let init_mean = vec![S::zero(); n];
    let init_var = vec![S::one(); n];
    filter_scan_from(&init_mean, &init_var, a, b, q, u_seq, w_seq, r_seq, mask, mode)
}

#[allow(clippy::too_many_arguments)]
fn filter_scan_from<S: Scalar>(
    init_mean: &[S],
    init_var: &[S],
    a: &[S],
    b: &[S],
    q: ProcessNoise<'_, S>,
    u_seq: &[S],
    w_seq: &[S],
    r_seq: &[S],
    mask: &[bool],
    mode: ScanMode,
) -> FilterScanOut<S> {
    let n = a.len();
    let k = mask.len();
    assert_eq!(u_seq.len(), k * n);
    assert_eq!(w_seq.len(), k * n);
    assert_eq!(r_seq.len(), k * n);
    assert!(is_right_padding(mask), "mask must be right-padding");
    assert!(k > 0 && !mask[0], "need at least one unpadded step");

    let mut means = vec![S::zero(); k * n];
    let mut vars = vec![S::zero(); k * n];
    let mut gains = vec![S::zero(); k * n];

    let mut cov_elems: Vec<MaskedElement<CovMap<S>>> = Vec::with_capacity(k);
    let mut mean_elems: Vec<MaskedElement<MeanMap<S>>> = Vec::with_capacity(k);

    for ch in 0..n {
        let (ac, bc) = (a[ch], b[ch]);

        cov_elems.clear();
        for t in 0..k {
            cov_elems.push(if mask[t] {
                MaskedElement::pad(CovMap::identity())
            } else {
                MaskedElement::real(CovMap::filter_step(ac, q.at(t, n, ch), r_seq[t * n + ch]))
            });
        }
        let cov_scan = scan_masked(CovOp::default(), &cov_elems, mode);

        mean_elems.clear();
        let mut prev_var = init_var[ch];
        for t in 0..k {
            let idx = t * n + ch;
            if mask[t] {
                vars[idx] = prev_var;
                mean_elems.push(MaskedElement::pad(MeanMap::identity()));
                continue;
            }
            let r = r_seq[idx];
            let prior_var = ac * ac * prev_var + q.at(t, n, ch);
            let gain = prior_var / (prior_var + r);
            gains[idx] = gain;
            let one_minus = S::one() - gain;
            mean_elems.push(MaskedElement::real(MeanMap {
                alpha: one_minus * ac,
                beta: one_minus * bc * u_seq[idx] + gain * w_seq[idx],
            }));
            let v = cov_scan[t].elem.apply(init_var[ch]);
            vars[idx] = v;
            prev_var = v;
        }

        let mean_scan = scan_masked(MeanOp::default(), &mean_elems, mode);
        for t in 0..k {
            means[t * n + ch] = mean_scan[t].elem.apply(init_mean[ch]);
        }
    }

    FilterScanOut { means, vars, gains }
}

/// Pure-prediction scan (no update step): `m_t = a·m_{t-1} + b·u_t` with
/// masked pass-through. Returns means flat `[K, N]`.
pub fn predict_scan<S: Scalar>(
    init_mean: &[S],
    a: &[S],
    b: &[S],
    u_seq: &[S],
    mask: &[bool],
    mode: ScanMode,
) -> Vec<S> {
    let n = init_mean.len();
    let k = mask.len();
    assert_eq!(u_seq.len(), k * n);
    assert!(is_right_padding(mask), "mask must be right-padding");
    assert!(k > 0 && !mask[0], "need at least one unpadded step");

    let mut means = vec![S::zero(); k * n];
    let mut elems: Vec<MaskedElement<MeanMap<S>>> = Vec::with_capacity(k);
    for ch in 0..n {
        elems.clear();
        for t in 0..k {
            elems.push(if mask[t] {
                MaskedElement::pad(MeanMap::identity())
            } else {
                MaskedElement::real(MeanMap {
                    alpha: a[ch],
                    beta: b[ch] * u_seq[t * n + ch],
                })
            });
        }
        let scan = scan_masked(MeanOp::default(), &elems, mode);
        for t in 0..k {
            means[t * n + ch] = scan[t].elem.apply(init_mean[ch]);
        }
    }
    means
}

// ── conjugate oracle ────────────────────────────────────────────────

/// Exact normal–normal posterior over a static latent mean after i.i.d.
/// observations with known noise variance. Precision form:
/// `1/var' = 1/prior_var + n/noise_var`.
pub fn bayes_oracle_iid(
    observations: &[f64],
    prior_mean: f64,
    prior_var: f64,
    noise_var: f64,
) -> (f64, f64) {
    assert!(noise_var > 0.0, "noise variance must be positive");
    assert!(prior_var > 0.0, "prior variance must be positive");
    if observations.is_empty() {
        return (prior_mean, prior_var);
    }
    let n = observations.len() as f64;
    let sum: f64 = observations.iter().sum();
    let precision = 1.0 / prior_var + n / noise_var;
    let post_var = 1.0 / precision;
    let post_mean = post_var * (prior_mean / prior_var + sum / noise_var);
    (post_mean, post_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn belief1(mean: f64, var: f64) -> GaussianBelief<f64> {
        GaussianBelief {
            mean: vec![mean],
            var: vec![var],
        }
    }

    fn dyn1(a: f64, b: f64, q: f64) -> DiagonalDynamics<f64> {
        DiagonalDynamics::new(vec![a], vec![b], vec![q])
    }

    #[test]
    fn predict_identity_dynamics_keeps_belief() {
        let b = belief1(0.7, 1.3);
        let out = predict(&b, &dyn1(1.0, 0.0, 0.0), &[5.0]);
        assert_eq!(out.mean, vec![0.7]);
        assert_eq!(out.var, vec![1.3]);
    }

    #[test]
    fn predict_full_forgetting_resets_to_standard() {
        let b = belief1(42.0, 9.0);
        let out = predict(&b, &dyn1(0.0, 0.0, 1.0), &[3.0]);
        assert_eq!(out.mean, vec![0.0]);
        assert_eq!(out.var, vec![1.0]);
    }

    #[test]
    fn predict_hand_case() {
        // a=0.5, mean=2, var=1, u=0, q=0.1 -> mean 1.0, var 0.35
        let out = predict(&belief1(2.0, 1.0), &dyn1(0.5, 1.0, 0.1), &[0.0]);
        assert!((out.mean[0] - 1.0).abs() < 1e-15);
        assert!((out.var[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn update_equal_confidence_halves() {
        let (_, gain) = update(&belief1(0.0, 1.0), &[1.0], &[1.0]);
        assert!((gain[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn update_hand_case() {
        // var=1, r=0.25, mean=0, w=1 -> K=0.8, mean'=0.8, var'=0.2
        let (post, gain) = update(&belief1(0.0, 1.0), &[1.0], &[0.25]);
        assert!((gain[0] - 0.8).abs() < 1e-15);
        assert!((post.mean[0] - 0.8).abs() < 1e-15);
        assert!((post.var[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn update_with_huge_noise_degenerates_to_prior() {
        let prior = belief1(0.3, 2.0);
        let (post, gain) = update(&prior, &[100.0], &[1e300]);
        assert!(gain[0] < 1e-12);
        assert!((post.mean[0] - prior.mean[0]).abs() < 1e-10);
        assert!((post.var[0] - prior.var[0]).abs() < 1e-10);
    }

    #[test]
    fn update_contracts_variance_and_bounds_gain() {
        let mut rng = Rng::new(10);
        for _ in 0..200 {
            let var = rng.range(1e-3, 10.0);
            let r = rng.range(1e-3, 10.0);
            let prior = belief1(rng.normal(), var);
            let (post, gain) = update(&prior, &[rng.normal()], &[r]);
            assert!(post.var[0] < var);
            assert!(gain[0] > 0.0 && gain[0] < 1.0);
        }
    }

    #[test]
    fn predict_inflates_variance_when_a_at_least_one() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let var = rng.range(0.1, 5.0);
            let a = rng.range(1.0, 2.0);
            let q = rng.range(1e-6, 1.0);
            let out = predict(&belief1(0.0, var), &dyn1(a, 0.0, q), &[0.0]);
            assert!(out.var[0] > var);
        }
    }

    #[test]
    fn filter_single_step_is_predict_then_update() {
        let init = belief1(0.4, 1.5);
        let d = dyn1(0.9, 0.3, 0.05);
        let (u, w, r) = (0.7, -0.2, 0.6);
        let got = filter_sequential(&init, &d, &[u], &[w], &[r]);
        let prior = predict(&init, &d, &[u]);
        let (want, _) = update(&prior, &[w], &[r]);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].mean, want.mean);
        assert_eq!(got[0].var, want.var);
    }

    #[test]
    fn static_filter_is_precision_weighted_running_mean() {
        // a=1, b=0, q=0, constant r: closed-form conjugate recursion.
        let mut rng = Rng::new(12);
        let k = 20;
        let r = 0.8;
        let obs: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let init = belief1(0.0, 1.0);
        let d = dyn1(1.0, 0.0, 0.0);
        let posts = filter_sequential(
            &init,
            &d,
            &vec![0.0; k],
            &obs,
            &vec![r; k],
        );
        let mut prev_var = 1.0;
        for t in 0..k {
            let (m, v) = bayes_oracle_iid(&obs[..=t], 0.0, 1.0, r);
            assert!((posts[t].mean[0] - m).abs() < 1e-12, "t={t}");
            assert!((posts[t].var[0] - v).abs() < 1e-12, "t={t}");
            // monotone information: variance never increases
            assert!(posts[t].var[0] <= prev_var + 1e-15);
            prev_var = posts[t].var[0];
        }
    }

    #[test]
    fn scan_reproduces_sequential_filter() {
        let mut rng = Rng::new(13);
        for trial in 0..50 {
            let n = [1, 2, 5][trial % 3];
            let k = 1 + rng.below(40);
            let init = GaussianBelief {
                mean: (0..n).map(|_| rng.normal()).collect(),
                var: (0..n).map(|_| rng.range(0.05, 3.0)).collect(),
            };
            let d = DiagonalDynamics::new(
                (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
                (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
                (0..n).map(|_| rng.range(1e-4, 2.0)).collect(),
            );
            let u: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let w: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let r: Vec<f64> = (0..k * n).map(|_| rng.range(1e-3, 5.0)).collect();
            let mask = vec![false; k];

            let seq = filter_sequential(&init, &d, &u, &w, &r);
            for mode in [ScanMode::Sequential, ScanMode::Parallel] {
                let scan = filter_scan(&init, &d, &u, &w, &r, &mask, mode);
                for t in 0..k {
                    for ch in 0..n {
                        assert!(
                            (scan.means[t * n + ch] - seq[t].mean[ch]).abs() < 1e-10,
                            "mean t={t} ch={ch} mode={mode:?}"
                        );
                        assert!(
                            (scan.vars[t * n + ch] - seq[t].var[ch]).abs() < 1e-10,
                            "var t={t} ch={ch} mode={mode:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn masked_tail_carries_last_posterior() {
        let mut rng = Rng::new(14);
        let (n, k, valid) = (3, 17, 9);
        let init = GaussianBelief::standard(n);
        let d = DiagonalDynamics::new(
            vec![0.95, 0.5, -0.7],
            vec![1.0, 0.2, 0.0],
            vec![0.1, 0.4, 1.0],
        );
        let u: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let r: Vec<f64> = (0..k * n).map(|_| rng.range(0.1, 2.0)).collect();
        let mask: Vec<bool> = (0..k).map(|t| t >= valid).collect();

        let seq_prefix = filter_sequential(
            &init,
            &d,
            &u[..valid * n],
            &w[..valid * n],
            &r[..valid * n],
        );
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let out = filter_scan(&init, &d, &u, &w, &r, &mask, mode);
            for t in valid..k {
                for ch in 0..n {
                    assert!(
                        (out.means[t * n + ch] - seq_prefix[valid - 1].mean[ch]).abs() < 1e-10
                    );
                    assert!(
                        (out.vars[t * n + ch] - seq_prefix[valid - 1].var[ch]).abs() < 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn build_scan_elements_compose_to_sequential_filter() {
        let mut rng = Rng::new(15);
        let (n, k) = (2, 13);
        let init = GaussianBelief::standard(n);
        let d = DiagonalDynamics::new(
            vec![0.9, -0.4],
            vec![0.5, 1.0],
            vec![0.2, 0.05],
        );
        let u: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let r: Vec<f64> = (0..k * n).map(|_| rng.range(0.1, 2.0)).collect();
        let mask = vec![false; k];

        let elems = build_scan_elements(&init, &d, &u, &w, &r, &mask);
        let seq = filter_sequential(&init, &d, &u, &w, &r);
        for ch in 0..n {
            let masked: Vec<_> = elems[ch]
                .iter()
                .map(|e| MaskedElement {
                    elem: e.cov,
                    mask: e.mask,
                })
                .collect();
            let cov_scan = scan_masked(CovOp::default(), &masked, ScanMode::Parallel);
            let mean_masked: Vec<_> = elems[ch]
                .iter()
                .map(|e| MaskedElement {
                    elem: e.mean,
                    mask: e.mask,
                })
                .collect();
            let mean_scan = scan_masked(MeanOp::default(), &mean_masked, ScanMode::Parallel);
            for t in 0..k {
                let v = cov_scan[t].elem.apply(init.var[ch]);
                let m = mean_scan[t].elem.apply(init.mean[ch]);
                assert!((v - seq[t].var[ch]).abs() < 1e-10);
                assert!((m - seq[t].mean[ch]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cov_map_normalization_is_semantically_invisible() {
        let mut rng = Rng::new(16);
        for _ in 0..100 {
            let m1 = CovMap::<f64>::filter_step(
                rng.range(-1.5, 1.5),
                rng.range(1e-3, 2.0),
                rng.range(1e-3, 2.0),
            );
            let m2 = CovMap::<f64>::filter_step(
                rng.range(-1.5, 1.5),
                rng.range(1e-3, 2.0),
                rng.range(1e-3, 2.0),
            );
            let composed = CovOp::default().combine(&m1, &m2); // normalized inside
            // raw composition, no normalization
            let (x, y) = (&m2.m, &m1.m);
            let raw = CovMap {
                m: [
                    x[0] * y[0] + x[1] * y[2],
                    x[0] * y[1] + x[1] * y[3],
                    x[2] * y[0] + x[3] * y[2],
                    x[2] * y[1] + x[3] * y[3],
                ],
            };
            for v in [0.01, 0.5, 1.0, 7.3] {
                assert!((composed.apply(v) - raw.apply(v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cov_map_preserves_positivity() {
        let mut rng = Rng::new(17);
        for _ in 0..500 {
            let m = CovMap::<f64>::filter_step(
                rng.range(-2.0, 2.0),
                rng.range(0.0, 3.0),
                rng.range(1e-4, 3.0),
            );
            let v = rng.range(1e-6, 10.0);
            assert!(m.apply(v) > 0.0);
        }
    }

    #[test]
    fn conjugacy_against_quadrature() {
        // Precision-addition formula checked against brute-force numerical
        // integration of prior x likelihood on a grid.
        let mut rng = Rng::new(18);
        for _ in 0..5 {
            let prior_mean = rng.range(-0.5, 0.5);
            let prior_var = rng.range(0.3, 2.0);
            let noise_var = rng.range(0.2, 1.5);
            let obs: Vec<f64> = (0..6).map(|_| rng.normal()).collect();

            let (m, v) = bayes_oracle_iid(&obs, prior_mean, prior_var, noise_var);

            // quadrature over a wide grid
            let (lo, hi, steps) = (-12.0, 12.0, 240_000);
            let h = (hi - lo) / steps as f64;
            let (mut z, mut ex, mut ex2) = (0.0, 0.0, 0.0);
            for i in 0..steps {
                let x = lo + (i as f64 + 0.5) * h;
                let mut logp = -(x - prior_mean).powi(2) / (2.0 * prior_var);
                for &o in &obs {
                    logp -= (o - x).powi(2) / (2.0 * noise_var);
                }
                let p = logp.exp();
                z += p;
                ex += p * x;
                ex2 += p * x * x;
            }
            let qm = ex / z;
            let qv = ex2 / z - qm * qm;
            assert!((m - qm).abs() < 1e-6, "mean {m} vs quadrature {qm}");
            assert!((v - qv).abs() < 1e-6, "var {v} vs quadrature {qv}");
        }
    }

    #[test]
    fn bayes_oracle_edge_cases() {
        // zero observations: prior returned
        assert_eq!(bayes_oracle_iid(&[], 0.3, 1.7, 1.0), (0.3, 1.7));
        // one observation w with prior N(0,1), noise 1 -> N(w/2, 1/2)
        let (m, v) = bayes_oracle_iid(&[0.8], 0.0, 1.0, 1.0);
        assert!((m - 0.4).abs() < 1e-15);
        assert!((v - 0.5).abs() < 1e-15);
        // n observations: posterior_var = 1/(1/prior_var + n/noise_var)
        let (_, v) = bayes_oracle_iid(&[1.0; 10], 0.0, 2.0, 0.5);
        assert!((v - 1.0 / (0.5 + 20.0)).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "strictly positive")]
    fn update_rejects_nonpositive_noise() {
        update(&belief1(0.0, 1.0), &[1.0], &[0.0]);
    }

    #[test]
    #[should_panic(expected = "lengths differ")]
    fn filter_rejects_length_mismatch() {
        let init = belief1(0.0, 1.0);
        let d = dyn1(1.0, 0.0, 0.1);
        filter_sequential(&init, &d, &[0.0, 0.0], &[0.0], &[1.0]);
    }
}
