//! Dense row-major f64 tensors.
//!
//! The whole crate computes in 64-bit floats; `shape` is a list of positive
//! dimensions and `data` holds `product(shape)` values contiguously, last
//! dimension fastest. Values are immutable once a tensor is returned from an
//! operation, so cloning is the sharing model.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape { op: "from_vec", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// 2-D identity matrix.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape { op: "dims2", lhs: self.shape.clone(), rhs: vec![0, 0] }),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape { op: "dims4", lhs: self.shape.clone(), rhs: vec![0, 0, 0, 0] }),
        }
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let (r, c) = self.dims2().expect("row() needs a 2-D tensor");
        assert!(i < r, "row {i} out of range for {r} rows");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let c = *self.shape.last().unwrap_or(&1);
        self.data.chunks(c.max(1))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn transposed(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (M×K) · other (K×P)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, p) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(&[m, p]);
        dgemm(m, k, p, &self.data, [k as isize, 1], &other.data, [p as isize, 1], &mut out.data);
        Ok(out)
    }

    /// `self (M×K) · otherᵀ` with `other (P×K)`; avoids materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (p, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(&[m, p]);
        dgemm(m, k, p, &self.data, [k as isize, 1], &other.data, [1, k as isize], &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · other` with `self (K×M)`, `other (K×P)`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, p) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(&[m, p]);
        dgemm(m, k, p, &self.data, [1, m as isize], &other.data, [p as isize, 1], &mut out.data);
        Ok(out)
    }
}

/// Single-threaded f64 GEMM; deterministic for fixed inputs and strides.
fn dgemm(m: usize, k: usize, p: usize, a: &[f64], sa: [isize; 2], b: &[f64], sb: [isize; 2], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            sa[0],
            sa[1],
            b.as_ptr(),
            sb[0],
            sb[1],
            0.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor {
        Tensor::from_vec(&shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2([2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = a.matmul(&Tensor::identity(2)).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        let a = t2([1, 2], &[1.0, 2.0]);
        let b = t2([2, 1], &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilator() {
        let a = Tensor::zeros(&[2, 2]);
        let b = t2([2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t2([1, 2], &[1.0, 2.0]);
        let b = t2([3, 1], &[1.0, 2.0, 3.0]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2]);
                assert_eq!(rhs, vec![3, 1]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        let a = t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t2([4, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5, 1.0, 1.0, 1.0, -2.0, 0.25, 3.0]);
        let nt = a.matmul_nt(&b).unwrap();
        let explicit = a.matmul(&b.transposed().unwrap()).unwrap();
        assert_eq!(nt, explicit);

        let c = t2([2, 4], &[1.0, 0.0, -1.0, 2.0, 0.5, 3.0, 1.0, -2.0]);
        let tn = a.matmul_tn(&c).unwrap();
        let explicit = a.transposed().unwrap().matmul(&c).unwrap();
        assert_eq!(tn, explicit);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let a = t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.reshaped(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.data(), a.data());
        assert!(a.reshaped(&[4, 2]).is_err());
    }

    proptest! {
        // (AB)C and A(BC) agree within 1e-9 absolute on small random tensors.
        #[test]
        fn matmul_associative(
            m in 1usize..5, k in 1usize..5, p in 1usize..5, q in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let rand = |rng: &mut crate::rng::Rng, sh: &[usize]| {
                let n: usize = sh.iter().product();
                Tensor::from_vec(sh, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
            };
            let a = rand(&mut rng, &[m, k]);
            let b = rand(&mut rng, &[k, p]);
            let c = rand(&mut rng, &[p, q]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
