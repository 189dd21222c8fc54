//! Dense row-major `f64` tensors and the pure kernels the model is built from.
//!
//! Everything here is value-in, value-out. Differentiation lives in
//! [`crate::autodiff`], which wraps these kernels with backward rules.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds an `[rows.len(), width]` matrix. All rows must share a width.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(Error::dim(format!("ragged rows: {} vs {}", r.len(), width)));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), width],
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {:?}", s))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: [{m},{k}] x [{k2},{n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_tn: [{k},{m}]^T x [{k2},{n}]")));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_nt: [{m},{k}] x [{n},{k2}]^T")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b.data[j * k..(j + 1) * k]);
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = x.data.clone();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c]);
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Length-preserving 1-D convolution along the sequence axis.
///
/// `x` is `[L, D]`, `kernel` is `[K, D, D_out]` with odd `K`; the sequence is
/// zero-padded by `(K-1)/2` on both ends, so tap `j` of output row `t` reads
/// input row `t + j - (K-1)/2`.
pub fn conv1d_same(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, d) = x.dims2()?;
    let (k, kd, d_out) = conv_kernel_dims(kernel)?;
    if kd != d {
        return Err(Error::dim(format!("conv1d: input width {d} but kernel expects {kd}")));
    }
    let half = (k - 1) / 2;
    let mut out = vec![0.0; l * d_out];
    for t in 0..l {
        let out_row = &mut out[t * d_out..(t + 1) * d_out];
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(half).filter(|&s| s < l) else {
                continue;
            };
            let x_row = &x.data[src * d..(src + 1) * d];
            let tap = &kernel.data[j * d * d_out..(j + 1) * d * d_out];
            for (c, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w = &tap[c * d_out..(c + 1) * d_out];
                for (o, &wv) in out_row.iter_mut().zip(w) {
                    *o += xv * wv;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![l, d_out],
        data: out,
    })
}

pub(crate) fn conv_kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match kernel.shape() {
        [k, d, d_out] => {
            if k % 2 == 0 {
                return Err(Error::config(format!("convolution width must be odd, got {k}")));
            }
            Ok((*k, *d, *d_out))
        }
        s => Err(Error::dim(format!("conv kernel must be [K, D, D_out], got {:?}", s))),
    }
}

/// Per-channel (depthwise) length-preserving convolution; `kernel` is `[K, C]`.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, c) = x.dims2()?;
    let (k, kc) = kernel.dims2()?;
    if kc != c {
        return Err(Error::dim(format!("depthwise conv: {c} channels vs kernel {kc}")));
    }
    if k % 2 == 0 {
        return Err(Error::config(format!("convolution width must be odd, got {k}")));
    }
    let half = (k - 1) / 2;
    let mut out = vec![0.0; l * c];
    for t in 0..l {
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(half).filter(|&s| s < l) else {
                continue;
            };
            for ch in 0..c {
                out[t * c + ch] += x.data[src * c + ch] * kernel.data[j * c + ch];
            }
        }
    }
    Ok(Tensor {
        shape: vec![l, c],
        data: out,
    })
}

/// Selects rows of a matrix: output row `i` is input row `index[i]`.
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= r {
            return Err(Error::dim(format!("row index {i} out of range for {r} rows")));
        }
        out.extend_from_slice(&x.data[i * c..(i + 1) * c]);
    }
    Ok(Tensor {
        shape: vec![index.len(), c],
        data: out,
    })
}

/// Mean over the row axis, returned as a `[1, cols]` row.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if r == 0 {
        return Err(Error::dim("mean over zero rows"));
    }
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&x.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    let inv = 1.0 / r as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor {
        shape: vec![1, c],
        data: out,
    })
}

/// Averages consecutive groups of `group` rows: `[G*group, C] -> [G, C]`.
pub fn group_mean_rows(x: &Tensor, group: usize) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if group == 0 || r % group != 0 {
        return Err(Error::dim(format!("{r} rows do not split into groups of {group}")));
    }
    let g = r / group;
    let mut out = vec![0.0; g * c];
    for i in 0..r {
        let dst = &mut out[(i / group) * c..(i / group + 1) * c];
        for (o, v) in dst.iter_mut().zip(&x.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    let inv = 1.0 / group as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor {
        shape: vec![g, c],
        data: out,
    })
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = match parts.first() {
        Some(p) => p.dims2()?.1,
        None => return Err(Error::dim("concat of zero tensors")),
    };
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = p.dims2()?;
        if pc != c {
            return Err(Error::dim(format!("concat_rows widths differ: {pc} vs {c}")));
        }
        rows += r;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, c],
        data,
    })
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = match parts.first() {
        Some(p) => p.dims2()?.0,
        None => return Err(Error::dim("concat of zero tensors")),
    };
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pr != r {
            return Err(Error::dim(format!("concat_cols heights differ: {pr} vs {r}")));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor {
        shape: vec![r, total],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let got = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((got.at(i, j) - s).abs() < 1e-12);
            }
        }
        let tn = matmul_tn(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&got) < 1e-12);
        let nt = matmul_nt(&a, &b.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[1], 0.0);
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(conv1d_same(&x, &k).unwrap().data(), &[3.0, 6.0, 5.0]);

        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let id = Tensor::eye(2).reshape(&[1, 2, 2]).unwrap();
        assert_eq!(conv1d_same(&x, &id).unwrap(), x);

        let z = Tensor::zeros(&[4, 2]);
        let k = Tensor::full(&[3, 2, 5], 0.3);
        assert!(conv1d_same(&z, &k).unwrap().data().iter().all(|&v| v == 0.0));

        let even = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(conv1d_same(&z, &even), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor::row_vector(&row);
            let s = softmax_rows(&x).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-9);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
            prop_assert!(shifted.max_abs_diff(&s) < 1e-9);
        }

        #[test]
        fn conv_preserves_length(l in 1usize..20, half in 0usize..4, d in 1usize..4) {
            let k = 2 * half + 1;
            let x = Tensor::full(&[l, d], 1.0);
            let kern = Tensor::full(&[k, d, 2], 0.5);
            let y = conv1d_same(&x, &kern).unwrap();
            prop_assert_eq!(y.shape(), &[l, 2]);
        }
    }
}
