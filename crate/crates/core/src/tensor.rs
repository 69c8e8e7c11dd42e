//! Dense row-major tensors and the forward kernels shared by the autograd
//! tape and the inference-only packed model.

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Most kernels treat a tensor as a matrix whose column count is the last
/// dimension and whose row count is the product of the leading dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} must have positive dimensions"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive shape")
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("positive shape")
    }

    /// Builds a matrix from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err!("ragged rows"));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| S::of(v))).collect();
        Self::new(&[r, c], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    fn as_matrix(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(dim_err!("{op}: expected a matrix, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(dim_err!("matmul: inner dimensions {k} and {k2} differ"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    S::gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), &mut out.data, false);
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.as_matrix("matmul_nt")?;
    let (n, k2) = b.as_matrix("matmul_nt")?;
    if k != k2 {
        return Err(dim_err!("matmul_nt: inner dimensions {k} and {k2} differ"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    S::gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (1, k as isize), &mut out.data, false);
    Ok(out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, m) = a.as_matrix("matmul_tn")?;
    let (k2, n) = b.as_matrix("matmul_tn")?;
    if k != k2 {
        return Err(dim_err!("matmul_tn: inner dimensions {k} and {k2} differ"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    S::gemm(m, k, n, &a.data, (1, m as isize), &b.data, (n as isize, 1), &mut out.data, false);
    Ok(out)
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = a.as_matrix("transpose")?;
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        data.extend((0..r).map(|i| a.data[i * c + j]));
    }
    Tensor::new(&[c, r], data)
}

pub fn slice2d<S: Scalar>(a: &Tensor<S>, rows: Range<usize>, cols: Range<usize>) -> Result<Tensor<S>> {
    let (r, c) = (a.rows(), a.cols());
    if rows.end > r || cols.end > c || rows.is_empty() || cols.is_empty() {
        return Err(dim_err!(
            "slice {rows:?}x{cols:?} out of range for {r}x{c}"
        ));
    }
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for i in rows.clone() {
        data.extend_from_slice(&a.data[i * c + cols.start..i * c + cols.end]);
    }
    Tensor::new(&[rows.len(), cols.len()], data)
}

pub fn concat_rows<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let c = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?.cols();
    if parts.iter().any(|p| p.cols() != c) {
        return Err(dim_err!("concat_rows: column counts differ"));
    }
    let data: Vec<S> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
    let r = data.len() / c;
    Tensor::new(&[r, c], data)
}

pub fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let r = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?.rows();
    if parts.iter().any(|p| p.rows() != r) {
        return Err(dim_err!("concat_cols: row counts differ"));
    }
    let c: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[r, c], data)
}

pub fn embedding<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    let (v, d) = table.as_matrix("embedding")?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Index(format!("embedding id {id} out of range for {v} rows")));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), d], data)
}

/// Sets every entry above the diagonal of each square `[t×t]` block to `fill`.
pub fn causal_mask_fill<S: Scalar>(a: &Tensor<S>, fill: S) -> Result<Tensor<S>> {
    let (r, c) = a.as_matrix("causal_mask_fill")?;
    if r != c {
        return Err(dim_err!("causal mask needs a square matrix, got {r}x{c}"));
    }
    let mut out = a.clone();
    for i in 0..r {
        out.row_mut(i)[i + 1..].iter_mut().for_each(|v| *v = fill);
    }
    Ok(out)
}

pub fn softmax_rows<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = if *v == S::neg_infinity() { S::zero() } else { (*v - max).exp() };
        total += *v;
    }
    let inv = total.recip();
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

/// Row-wise RMSNorm `y = a ⊙ x / sqrt(mean(x²) + eps) + b`.
///
/// Returns the output and the per-row inverse rms.
pub fn rmsnorm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    eps: S,
) -> Result<(Tensor<S>, Vec<S>)> {
    let d = x.cols();
    if gain.numel() != d || bias.is_some_and(|b| b.numel() != d) {
        return Err(dim_err!("rmsnorm: parameter width differs from {d}"));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let n = S::of(d as f64);
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|&v| v * v).sum::<S>() / n;
        let r = (ms + eps).sqrt().recip();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gain.data[j] * *v * r + bias.map_or(S::zero(), |b| b.data[j]);
        }
        inv.push(r);
    }
    Ok((out, inv))
}

fn check_targets(rows: usize, vocab: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != rows {
        return Err(dim_err!("{} targets for {rows} rows", targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index(format!("target {t} out of range for vocab {vocab}")));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[target]`; also returns the
/// softmax probabilities.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
) -> Result<(S, Tensor<S>)> {
    check_targets(logits.rows(), logits.cols(), targets)?;
    let logp = log_softmax_rows(logits);
    let mut loss = S::zero();
    for (i, &t) in targets.iter().enumerate() {
        loss -= logp.row(i)[t];
    }
    let probs = logp.map(S::exp);
    Ok((loss / S::of(targets.len() as f64), probs))
}

/// Per-row negative log-likelihoods of `targets`, accumulated in f64.
pub fn token_nll<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<Vec<f64>> {
    check_targets(logits.rows(), logits.cols(), targets)?;
    let logp = log_softmax_rows(logits);
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -logp.row(i)[t].f64())
        .collect())
}

/// Mean over rows of `-Σ_v p_v · log softmax(logits / temperature)_v`.
///
/// Returns the loss and the student probabilities at the given temperature.
pub fn soft_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    target_probs: &Tensor<S>,
    temperature: S,
) -> Result<(S, Tensor<S>)> {
    logits.same_shape(target_probs, "soft_cross_entropy")?;
    let scaled = logits.map(|v| v / temperature);
    let logp = log_softmax_rows(&scaled);
    let mut loss = S::zero();
    for i in 0..logits.rows() {
        loss -= logp
            .row(i)
            .iter()
            .zip(target_probs.row(i))
            .map(|(&lp, &p)| if p == S::zero() { S::zero() } else { p * lp })
            .sum::<S>();
    }
    Ok((loss / S::of(logits.rows() as f64), logp.map(S::exp)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn shape_must_match_elements() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let r = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matches!(matmul(&a, &m(&[&[1.0, 2.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[1.0, -1.0, 2.0], &[0.5, 0.0, 1.0]]);
        let bt = transpose(&b).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = transpose(&a).unwrap();
        let c = m(&[&[1.0, 0.0], &[2.0, 1.0]]);
        assert_eq!(matmul_tn(&c, &a).unwrap(), matmul(&transpose(&c).unwrap(), &a).unwrap());
        assert_eq!(transpose(&at).unwrap(), a);
    }

    #[test]
    fn rmsnorm_examples() {
        let one = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let (y, _) = rmsnorm(&m(&[&[2.0, 2.0]]), &one, None, 0.0).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-12);
        let (y, _) = rmsnorm(&m(&[&[3.0, 4.0]]), &one, None, 0.0).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.848_528_137, epsilon = 1e-8);
        assert_abs_diff_eq!(y.data()[1], 1.131_370_850, epsilon = 1e-8);
        let (y, _) = rmsnorm(&m(&[&[0.0, 0.0]]), &one, None, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(a.zip_map(&b, "add", |x, y| x + y).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(gelu(0.0f64), 0.0);
        let table = Tensor::<f64>::from_fn(&[4, 2], |i| i as f64);
        assert_eq!(embedding(&table, &[3]).unwrap().data(), &[6.0, 7.0]);
        assert!(matches!(embedding(&table, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(4f64.ln(), 1.38629, epsilon = 1e-5);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 1, 4]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_dominant_logit_goes_to_zero() {
        let logits = Tensor::<f64>::from_f64(&[1, 3], &[1e4, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn causal_mask_and_softmax() {
        let a = Tensor::<f64>::zeros(&[3, 3]);
        let p = softmax_rows(&causal_mask_fill(&a, f64::NEG_INFINITY).unwrap());
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(p.row(2)[1], 1.0 / 3.0, epsilon = 1e-15);
    }
}
