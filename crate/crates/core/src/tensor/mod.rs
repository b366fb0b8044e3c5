//! Dense row-major tensors with a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value. Differentiable computation goes through a
//! [`Tape`], which records each primitive and replays it backwards in
//! [`Tape::backward`]. Trainable weights live in a [`ParamStore`] and enter
//! a tape through [`Tape::param`].

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{finite_difference_check, gradient_check_all, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor of up to two meaningful dimensions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim("from_rows", &[r, c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![r, c],
            data,
        })
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[T]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

fn as_matrix_dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix_dims(a);
    let (k2, n) = as_matrix_dims(b);
    if k != k2 || a.shape.len() > 2 || b.shape.len() > 2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (1, k), out);
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (1, m), b, (n, 1), out);
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = as_matrix_dims(x);
    let mut out = x.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Training-mode dropout settings threaded through a forward pass.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut rand_chacha::ChaCha8Rng,
}

impl DropoutCtx<'_> {
    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.dropout(x, T::lit(self.rate), self.rng)
    }
}

/// Applies dropout when a context is present, identity otherwise.
pub fn maybe_dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, ctx: &mut Option<DropoutCtx<'_>>) -> Var {
    match ctx {
        Some(c) => c.apply(tape, x),
        None => x,
    }
}

/// Glorot/Xavier uniform initialisation for a `fan_in × fan_out` matrix.
pub fn glorot_uniform<T: Scalar, R: rand::Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.gen_range(-limit..limit)))
        .collect();
    Tensor {
        shape: vec![fan_in, fan_out],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 5, 4);
        let b = random(&mut rng, 4, 3);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn transposed_kernels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, 3, 5);
        let b = random(&mut rng, 4, 5);
        let mut nt = vec![0.0; 12];
        matmul_nt_into(a.data(), b.data(), &mut nt, 3, 5, 4);
        let expect = triple_loop(&a, &b.transpose());
        assert!(Tensor::new(vec![3, 4], nt).unwrap().max_abs_diff(&expect) < 1e-12);

        let d = random(&mut rng, 5, 3);
        let c = random(&mut rng, 5, 2);
        let mut tn = vec![0.0; 6];
        matmul_tn_into(d.data(), c.data(), &mut tn, 3, 5, 2);
        let expect = triple_loop(&d.transpose(), &c);
        assert!(Tensor::new(vec![3, 2], tn).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&x);
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);

        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&x);
        let expect: [f64; 3] = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::row_vector(&[-3.0, -0.5]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let pos = Tensor::row_vector(&[0.1, 7.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(row in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let s = softmax_rows(&Tensor::row_vector(&row));
            let sum: f64 = s.data().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
