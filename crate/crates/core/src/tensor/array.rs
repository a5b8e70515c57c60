use crate::scalar::Scalar;
use rayon::prelude::*;

/// Element count above which elementwise loops fan out across workers. Each
/// element is produced independently, so results match the serial path
/// exactly for any worker count.
const PAR_ELEMS: usize = 1 << 16;

pub(crate) fn par_map<S: Scalar>(data: &[S], f: impl Fn(S) -> S + Sync + Send) -> Vec<S> {
    if data.len() >= PAR_ELEMS {
        data.par_iter().map(|&v| f(v)).collect()
    } else {
        data.iter().map(|&v| f(v)).collect()
    }
}

pub(crate) fn par_zip<S: Scalar>(
    a: &[S],
    b: &[S],
    f: impl Fn(S, S) -> S + Sync + Send,
) -> Vec<S> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_ELEMS {
        a.par_iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }
}

/// A shaped, contiguous, row-major block of scalars. Immutable once handed to
/// the tape; construction helpers below are the only mutation surface.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Array<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Array { shape, data }
    }

    pub fn scalar(x: S) -> Self {
        Array { shape: vec![1], data: vec![x] }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Self {
        Array::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![S::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, x: S) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![x; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the same buffer under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {shape:?} changes element count",
            self.shape
        );
        self.shape = shape;
        self
    }

    /// True if any stored value is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync + Send) -> Self {
        Array {
            shape: self.shape.clone(),
            data: par_map(&self.data, f),
        }
    }

    /// Largest absolute difference to another array of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Trailing-dimension broadcast of two shapes, or a panic describing the clash.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} are not broadcastable"
        );
        out[i] = da.max(db);
    }
    out
}

/// Row-major strides, with stride 0 marking broadcast (size-1) axes relative
/// to `out_ndim` leading alignment.
pub(crate) fn broadcast_strides(shape: &[usize], out_ndim: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_ndim];
    let offset = out_ndim - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Sum `grad` (shaped `from`) down to shape `to`, undoing broadcasting.
pub fn reduce_to_shape<S: Scalar>(grad: &Array<S>, to: &[usize]) -> Array<S> {
    let from = grad.shape();
    if from == to {
        return grad.clone();
    }
    let out_ndim = from.len();
    let to_strides = broadcast_strides(to, out_ndim);
    let mut out = Array::zeros(to.to_vec());
    let mut coords = vec![0usize; out_ndim];
    let out_data = out.data_mut();
    for &g in grad.data() {
        let mut idx = 0;
        for d in 0..out_ndim {
            idx += coords[d] * to_strides[d];
        }
        out_data[idx] += g;
        // advance coordinates
        for d in (0..out_ndim).rev() {
            coords[d] += 1;
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[1], &[5, 2]), vec![5, 2]);
    }

    #[test]
    #[should_panic(expected = "not broadcastable")]
    fn broadcast_rejects_clash() {
        broadcast_shape(&[2, 3], &[2, 4]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let g = Array::<f64>::from_f64s(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6.0, 15.0]);
        let r3 = reduce_to_shape(&g, &[1]);
        assert_eq!(r3.data(), &[21.0]);
    }
}
