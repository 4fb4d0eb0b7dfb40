//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::ShapeData { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeData { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Swaps the third-to-last and second-to-last axes: `[.., A, B, F] -> [.., B, A, F]`.
    pub fn transpose_12(&self) -> Result<Self> {
        let r = self.rank();
        if r < 3 {
            return Err(Error::Rank { op: "transpose_12", expected: 3, shape: self.shape.clone() });
        }
        let (a, b, f) = (self.shape[r - 3], self.shape[r - 2], self.shape[r - 1]);
        let mut out = vec![S::ZERO; self.data.len()];
        swap_axes_12(&self.data, &mut out, a, b, f);
        let mut shape = self.shape.clone();
        shape.swap(r - 3, r - 2);
        Ok(Self { shape, data: out })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(xs: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = xs.first().ok_or(Error::Empty)?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Rank { op: "concat", expected: axis + 1, shape: first.shape.clone() });
        }
        for x in xs {
            let ok = x.rank() == rank
                && x.shape.iter().zip(&first.shape).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !ok {
                return Err(Error::Dimension { op: "concat", lhs: first.shape.clone(), rhs: x.shape.clone() });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inners: Vec<usize> = xs.iter().map(|x| x.shape[axis..].iter().product()).collect();
        let total: usize = inners.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (x, &inner) in xs.iter().zip(&inners) {
                data.extend_from_slice(&x.data[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = xs.iter().map(|x| x.shape[axis]).sum();
        Ok(Self { shape, data })
    }
}

pub(crate) fn swap_axes_12<S: Scalar>(src: &[S], dst: &mut [S], a: usize, b: usize, f: usize) {
    let block = a * b * f;
    for (sb, db) in src.chunks_exact(block).zip(dst.chunks_exact_mut(block)) {
        for i in 0..a {
            for j in 0..b {
                let s = (i * b + j) * f;
                let d = (j * a + i) * f;
                db[d..d + f].copy_from_slice(&sb[s..s + f]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn transpose_is_an_involution() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| i as f64);
        let t = x.transpose_12().unwrap();
        assert_eq!(t.shape(), &[2, 4, 3, 5]);
        assert_eq!(t.transpose_12().unwrap(), x);
        assert!(Tensor::<f64>::zeros([3, 4]).transpose_12().is_err());
    }

    #[test]
    fn concat_last_adds_widths() {
        let a = Tensor::<f64>::zeros([4, 3]);
        let b = Tensor::<f64>::full([4, 3], 1.0);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[4, 6]);
        assert_eq!(&c.data()[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(Tensor::concat(&[&a, &Tensor::zeros([3, 3])], 1).is_err());
    }
}
