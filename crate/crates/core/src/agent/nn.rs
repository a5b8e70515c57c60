//! Small neural-network pieces for the actor-critic heads, plus Adam.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Array, Tape, Var};

/// Dense layer with bias, fan-in-scaled uniform init.
#[derive(Clone)]
pub struct Linear<S> {
    pub w: Array<S>,
    pub b: Array<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.range(-bound, bound)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.range(-bound, bound)).collect();
        Linear {
            w: Array::from_f64s(vec![fan_in, fan_out], &w),
            b: Array::from_f64s(vec![fan_out], &b),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> LinearVars {
        LinearVars {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Var {
        let xw = tape.matmul(x, self.w);
        tape.add(xw, self.b)
    }
}

/// Multi-layer perceptron with ReLU activations between layers.
#[derive(Clone)]
pub struct Mlp<S> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// `dims` = [input, hidden..., output].
    pub fn init(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2);
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")])
            .collect()
    }

    pub fn params(&self) -> Vec<&Array<S>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}

pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// One-hot encode discrete indices into `[rows, width]`. The sentinel
/// `width` (one past the last valid index) encodes "no action" as all zeros.
pub fn onehot<S: Scalar>(indices: &[usize], width: usize) -> Array<S> {
    let mut out = Array::zeros(vec![indices.len(), width]);
    for (r, &idx) in indices.iter().enumerate() {
        if idx < width {
            out.data_mut()[r * width + idx] = S::one();
        } else {
            assert_eq!(idx, width, "index {idx} past the none sentinel {width}");
        }
    }
    out
}

/// Adam with bias correction; moments are kept at the parameter precision.
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array<S>>,
    v: Vec<Array<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one step. `grads[i] = None` leaves parameter `i` untouched this
    /// step. `clip_norm` rescales the whole group to the given global norm
    /// when exceeded.
    pub fn step(
        &mut self,
        params: &mut [&mut Array<S>],
        grads: &[Option<Array<S>>],
        clip_norm: Option<f64>,
    ) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect();
            self.v = params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect();
        }
        self.t += 1;

        let scale = match clip_norm {
            Some(max_norm) => {
                let mut sq = 0.0f64;
                for g in grads.iter().flatten() {
                    for v in g.data() {
                        let x = v.to_f64();
                        sq += x * x;
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let gscale = S::from_f64(scale);

        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * gscale;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Polyak-average `target <- (1 - tau) * target + tau * source`.
pub fn polyak_update<S: Scalar>(targets: &mut [&mut Array<S>], sources: &[&Array<S>], tau: f64) {
    assert_eq!(targets.len(), sources.len());
    let t = S::from_f64(tau);
    let keep = S::from_f64(1.0 - tau);
    for (dst, src) in targets.iter_mut().zip(sources) {
        assert_eq!(dst.shape(), src.shape());
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = keep * *d + t * *s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shapes_and_uniform_at_zero_weights() {
        let mut rng = Rng::new(1);
        let mut mlp = Mlp::<f64>::init(&[5, 8, 3], &mut rng);
        // zero all weights: logits are zero, softmax would be uniform
        for p in mlp.params_mut() {
            *p = Array::zeros(p.shape().to_vec());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array::from_f64s(vec![2, 5], &[0.3; 10]));
        let b = mlp.bind(&mut tape);
        let out = b.forward(&mut tape, x);
        assert_eq!(tape.shape(out), &[2, 3]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let ls = tape.log_softmax(out);
        for v in tape.value(ls).data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn onehot_encodes_and_sentinel_is_zero() {
        let oh = onehot::<f64>(&[0, 2, 3], 3);
        assert_eq!(oh.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Array::<f64>::from_f64s(vec![2], &[3.0, -2.0]);
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * x);
            opt.step(&mut [&mut p], &[Some(g)], None);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-3), "{:?}", p.data());
    }

    #[test]
    fn clip_rescales_to_global_norm() {
        let mut p = Array::<f64>::from_f64s(vec![1], &[0.0]);
        let g = Array::from_f64s(vec![1], &[100.0]);
        let mut opt = Adam::new(1.0);
        opt.step(&mut [&mut p], &[Some(g)], Some(1.0));
        // first adam step size is lr regardless of magnitude; clipping is
        // about the m/v statistics, which now saw a unit-norm gradient
        let m_seen = opt.m[0].data()[0];
        assert!((m_seen - 0.1).abs() < 1e-12); // (1-beta1) * clipped 1.0
    }

    #[test]
    fn polyak_traces_toward_source() {
        let mut t = Array::<f64>::from_f64s(vec![2], &[0.0, 0.0]);
        let s = Array::from_f64s(vec![2], &[1.0, -1.0]);
        polyak_update(&mut [&mut t], &[&s], 0.5);
        assert_eq!(t.data(), &[0.5, -0.5]);
        polyak_update(&mut [&mut t], &[&s], 0.5);
        assert_eq!(t.data(), &[0.75, -0.75]);
    }
}
