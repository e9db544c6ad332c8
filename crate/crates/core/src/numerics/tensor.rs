use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NumericsError, Scalar};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) && !data.is_empty() || expected != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, NumericsError> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i} (extent {ext})");
            o = o * ext + ix;
        }
        o
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.ndim(), 2, "row() needs a matrix");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// Plain (non-recorded) matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, NumericsError> {
        let (m, k) = matrix_dims(self)?;
        let (k2, n) = matrix_dims(rhs)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul {:?} @ {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            &self.data,
            (k as isize, 1),
            &rhs.data,
            (n as isize, 1),
            &mut out.data,
            (n as isize, 1),
            T::zero(),
        );
        Ok(out)
    }

    pub fn transpose2(&self) -> Result<Self, NumericsError> {
        let (m, n) = matrix_dims(self)?;
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(NumericsError::ShapeMismatch(format!(
            "expected a matrix, got shape {s:?}"
        ))),
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, NumericsError> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumericsError::ShapeMismatch(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when read as a broadcast view of `out_shape` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// One maximal strided run of a broadcast walk: `len` consecutive output
/// elements starting at `out`, reading operand `a` from `a` with step
/// `step_a` and operand `b` likewise.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Run {
    pub out: usize,
    pub a: usize,
    pub b: usize,
    pub len: usize,
    pub step_a: usize,
    pub step_b: usize,
}

/// Walks a broadcast pair as runs along the innermost axis after merging
/// adjacent axes that are contiguous for both operands.
pub(crate) fn for_each_run(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(Run)) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    // (extent, stride a, stride b), outermost first, unit axes dropped.
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(out_shape.len());
    for d in 0..out_shape.len() {
        let e = out_shape[d];
        if e == 1 {
            continue;
        }
        match dims.last_mut() {
            Some(last) if last.1 == sa[d] * e && last.2 == sb[d] * e => {
                *last = (last.0 * e, sa[d], sb[d]);
            }
            _ => dims.push((e, sa[d], sb[d])),
        }
    }
    let Some(&(len, step_a, step_b)) = dims.last() else {
        f(Run { out: 0, a: 0, b: 0, len: 1, step_a: 0, step_b: 0 });
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut out = 0;
    loop {
        f(Run { out, a: ia, b: ib, len, step_a, step_b });
        out += len;
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += outer[d].1;
            ib += outer[d].2;
            if idx[d] < outer[d].0 {
                break;
            }
            ia -= outer[d].1 * outer[d].0;
            ib -= outer[d].2 * outer[d].0;
            idx[d] = 0;
        }
    }
}

/// Visits every output position of a broadcast pair, yielding `(out, ia, ib)` flat offsets.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    for_each_run(out_shape, sa, sb, |r| {
        for j in 0..r.len {
            f(r.out + j, r.a + j * r.step_a, r.b + j * r.step_b);
        }
    });
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
#[cfg(test)]
fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    reduce_into(grad, out.data_mut(), shape);
    out
}

/// Adds `grad` reduced to `shape` into `o`.
pub(crate) fn reduce_into<T: Scalar>(grad: &Tensor<T>, o: &mut [T], shape: &[usize]) {
    let strides = broadcast_strides(shape, grad.shape());
    let zeros = vec![0; grad.ndim()];
    let g = grad.data();
    for_each_run(grad.shape(), &strides, &zeros, |r| {
        let src = &g[r.out..r.out + r.len];
        match r.step_a {
            0 => o[r.a] += src.iter().copied().sum::<T>(),
            1 => o[r.a..r.a + r.len].iter_mut().zip(src).for_each(|(x, &y)| *x += y),
            s => src.iter().enumerate().for_each(|(j, &y)| o[r.a + j * s] += y),
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_extent() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::<f64>::from_f64(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_bias_gradient() {
        let g = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5., 7., 9.]);
        let r = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r.data(), &[6., 15.]);
    }
}
