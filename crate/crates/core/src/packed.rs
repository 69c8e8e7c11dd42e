//! 2-bit packed ternary weights and the add-only linear kernel.
//!
//! Codes are stored four per byte, first weight in the low bits, with the
//! encoding `00 → 0`, `01 → +1`, `10 → −1` (`11` is invalid). Each output is
//! computed per input group as `α·(Σ_{T=+1} x − Σ_{T=−1} x) + γ·Σ x`, where
//! the group sums of `x` are computed once per token and shared by every
//! output row, so the only multiplications are the two per group and token.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::quantizer::{GroupSpec, TernaryGroupQuant};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub const MAGIC: &[u8; 4] = b"TPK1";
const HEADER_LEN: usize = 16;

/// Inference-time ternary weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    spec: GroupSpec,
    codes: Vec<u8>,
    alpha: Vec<f32>,
    gamma: Vec<f32>,
}

/// Scalar operation counts of one kernel invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCounts {
    pub adds: u64,
    pub muls: u64,
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.adds += o.adds;
        self.muls += o.muls;
    }
}

fn encode(c: i8) -> Result<u8> {
    match c {
        0 => Ok(0b00),
        1 => Ok(0b01),
        -1 => Ok(0b10),
        other => Err(Error::Encoding(format!("invalid ternary code {other}"))),
    }
}

#[inline]
fn decode(bits: u8) -> i8 {
    match bits & 0b11 {
        0b01 => 1,
        0b10 => -1,
        _ => 0,
    }
}

impl PackedTernaryMatrix {
    pub fn pack(
        codes: &[i8],
        rows: usize,
        cols: usize,
        alpha: &[f32],
        gamma: &[f32],
        spec: GroupSpec,
    ) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(dim_err!("{} codes for a {rows}x{cols} matrix", codes.len()));
        }
        let groups = spec.group_count(rows, cols)?;
        if alpha.len() != groups || gamma.len() != groups {
            return Err(dim_err!(
                "expected {groups} scales and shifts, got {} and {}",
                alpha.len(),
                gamma.len()
            ));
        }
        let mut packed = vec![0u8; codes.len().div_ceil(4)];
        for (i, &c) in codes.iter().enumerate() {
            packed[i / 4] |= encode(c)? << (2 * (i % 4));
        }
        Ok(Self {
            rows,
            cols,
            spec,
            codes: packed,
            alpha: alpha.to_vec(),
            gamma: gamma.to_vec(),
        })
    }

    /// Freezes the current codes, scales and shifts of a quantizer state.
    pub fn from_quant<S: Scalar>(q: &TernaryGroupQuant<S>) -> Result<Self> {
        let alpha: Vec<f32> = q.alpha.iter().map(|v| v.f64() as f32).collect();
        let gamma: Vec<f32> = q.gamma.iter().map(|v| v.f64() as f32).collect();
        Self::pack(&q.codes, q.rows, q.cols, &alpha, &gamma, q.spec)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spec(&self) -> GroupSpec {
        self.spec
    }

    pub fn code_bytes(&self) -> &[u8] {
        &self.codes
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    pub fn group_count(&self) -> usize {
        self.alpha.len()
    }

    fn group_len(&self) -> usize {
        self.cols * self.rows / self.alpha.len()
    }

    pub fn code_at(&self, i: usize) -> i8 {
        decode(self.codes[i / 4] >> (2 * (i % 4)))
    }

    pub fn unpack(&self) -> Vec<i8> {
        (0..self.rows * self.cols).map(|i| self.code_at(i)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.unpack().iter().filter(|&&c| c != 0).count()
    }

    /// Dense `D = α·T + γ`.
    pub fn dequantize(&self) -> Tensor<f32> {
        let glen = self.group_len();
        Tensor::from_fn(&[self.rows, self.cols], |i| {
            let g = i / glen;
            self.alpha[g] * f32::from(self.code_at(i)) + self.gamma[g]
        })
    }

    /// Storage cost including the two f32 parameters per group.
    pub fn bits_per_weight(&self) -> f64 {
        let bits = self.codes.len() * 8 + self.alpha.len() * 64;
        bits as f64 / (self.rows * self.cols) as f64
    }

    /// `Y[C_o×T] = D · X[C_i×T]` computed with additions plus two
    /// multiplications per group and token.
    pub fn ternary_linear(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.ternary_linear_counted(x)?.0)
    }

    pub fn ternary_linear_counted(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, OpCounts)> {
        if x.shape().len() != 2 || x.shape()[0] != self.cols {
            return Err(dim_err!(
                "packed linear expects [{}×T] input, got {:?}",
                self.cols,
                x.shape()
            ));
        }
        self.kernel(&tensor::transpose(x)?)
    }

    /// Token-major variant: `x[T×C_i] → y[T×C_o]`.
    pub fn linear_tokens(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, OpCounts)> {
        if x.cols() != self.cols {
            return Err(dim_err!(
                "packed linear expects {} input features, got {}",
                self.cols,
                x.cols()
            ));
        }
        let (y, counts) = self.kernel(x)?;
        Ok((tensor::transpose(&y)?, counts))
    }

    /// Core kernel over token-major input; returns `[C_o×T]`.
    fn kernel(&self, xt: &Tensor<f32>) -> Result<(Tensor<f32>, OpCounts)> {
        let tokens = xt.rows();
        let glen = self.group_len();
        let gpr = self.cols / glen;

        // Column-group sums, shared across output rows.
        let mut col_sums = vec![0f32; tokens * gpr];
        for t in 0..tokens {
            for (j, chunk) in xt.row(t).chunks(glen).enumerate() {
                let mut s = 0f32;
                for &v in chunk {
                    s += v;
                }
                col_sums[t * gpr + j] = s;
            }
        }
        let shared_adds = (tokens * self.cols) as u64;

        let mut out = vec![0f32; self.rows * tokens];
        let row_adds: Vec<u64> = out
            .par_chunks_mut(tokens)
            .enumerate()
            .map(|(r, y_row)| {
                let row_codes: Vec<i8> = (r * self.cols..(r + 1) * self.cols)
                    .map(|i| self.code_at(i))
                    .collect();
                let mut adds = 0u64;
                for (t, y) in y_row.iter_mut().enumerate() {
                    let x = xt.row(t);
                    let mut acc = 0f32;
                    for j in 0..gpr {
                        let g = r * gpr + j;
                        let mut signed = 0f32;
                        for (&c, &xv) in row_codes[j * glen..(j + 1) * glen]
                            .iter()
                            .zip(&x[j * glen..(j + 1) * glen])
                        {
                            match c {
                                1 => {
                                    signed += xv;
                                    adds += 1;
                                }
                                -1 => {
                                    signed -= xv;
                                    adds += 1;
                                }
                                _ => {}
                            }
                        }
                        acc += self.alpha[g] * signed;
                        acc += self.gamma[g] * col_sums[t * gpr + j];
                        adds += 2;
                    }
                    *y = acc;
                }
                adds
            })
            .collect();

        let counts = OpCounts {
            adds: shared_adds + row_adds.iter().sum::<u64>(),
            muls: 2 * (self.group_count() * tokens) as u64,
        };
        Ok((Tensor::new(&[self.rows, tokens], out)?, counts))
    }

    /// Operation counts the kernel performs for `tokens` input columns.
    pub fn op_counts(&self, tokens: usize) -> OpCounts {
        let per_token = self.nnz() + 2 * self.group_count() + self.cols;
        OpCounts {
            adds: (per_token * tokens) as u64,
            muls: (2 * self.group_count() * tokens) as u64,
        }
    }

    /// `TPK1 | u32 rows | u32 cols | u32 group_size (0 = per-channel) |
    /// f32 α[G] | f32 γ[G] | code bytes`, little-endian.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.alpha.len() + self.codes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(usize::from(self.spec) as u32).to_le_bytes());
        for v in self.alpha.iter().chain(&self.gamma) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let (m, used) = Self::read_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after packed matrix",
                bytes.len() - used
            )));
        }
        Ok(m)
    }

    /// Parses one matrix from the start of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn read_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("truncated packed header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad packed-matrix magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (rows, cols, gs) = (word(4), word(8), word(12));
        if rows == 0 || cols == 0 {
            return Err(Error::Format("packed matrix with empty dimension".into()));
        }
        let spec = GroupSpec::from(gs);
        let groups = spec
            .group_count(rows, cols)
            .map_err(|e| Error::Format(format!("bad group geometry: {e}")))?;
        let n_codes = rows * cols;
        let n_code_bytes = n_codes.div_ceil(4);
        let total = HEADER_LEN + 8 * groups + n_code_bytes;
        if bytes.len() < total {
            return Err(Error::Format(format!(
                "truncated packed matrix: need {total} bytes, have {}",
                bytes.len()
            )));
        }
        let floats = |start: usize| -> Vec<f32> {
            bytes[start..start + 4 * groups]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let alpha = floats(HEADER_LEN);
        let gamma = floats(HEADER_LEN + 4 * groups);
        let codes = bytes[HEADER_LEN + 8 * groups..total].to_vec();
        for (bi, &b) in codes.iter().enumerate() {
            for k in 0..4 {
                let bits = (b >> (2 * k)) & 0b11;
                let idx = bi * 4 + k;
                if bits == 0b11 {
                    return Err(Error::Corruption(format!("invalid code 11 at weight {idx}")));
                }
                if idx >= n_codes && bits != 0 {
                    return Err(Error::Corruption("nonzero padding code".into()));
                }
            }
        }
        Ok((
            Self {
                rows,
                cols,
                spec,
                codes,
                alpha,
                gamma,
            },
            total,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_example_byte() {
        let m = PackedTernaryMatrix::pack(&[1, 0, -1, 0], 1, 4, &[1.0], &[0.0], GroupSpec::PerChannel).unwrap();
        assert_eq!(m.code_bytes(), &[0b00_10_00_01]);
        let z = PackedTernaryMatrix::pack(&[0; 10], 2, 5, &[1.0; 2], &[0.0; 2], GroupSpec::PerChannel).unwrap();
        assert_eq!(z.code_bytes(), &[0, 0, 0]);
        assert!(matches!(
            PackedTernaryMatrix::pack(&[2, 0, 0, 0], 1, 4, &[1.0], &[0.0], GroupSpec::PerChannel),
            Err(Error::Encoding(_))
        ));
    }

    #[test]
    fn kernel_hand_examples() {
        let m = PackedTernaryMatrix::pack(&[1, 0, -1], 1, 3, &[0.5], &[0.1], GroupSpec::PerChannel).unwrap();
        let x = Tensor::from_f64(&[3, 1], &[2.0, 3.0, 4.0]).unwrap();
        let y = m.ternary_linear(&x).unwrap();
        assert!((y.item() - (-0.1)).abs() < 1e-6);
        let m = PackedTernaryMatrix::pack(&[1, 1, 1], 1, 3, &[1.0], &[0.0], GroupSpec::PerChannel).unwrap();
        let x = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.ternary_linear(&x).unwrap().item(), 6.0);
        assert!(matches!(m.ternary_linear(&Tensor::zeros(&[2, 1])), Err(Error::Dimension(_))));
    }

    #[test]
    fn per_channel_mul_counts() {
        let m = PackedTernaryMatrix::pack(&[1; 16], 4, 4, &[1.0; 4], &[0.0; 4], GroupSpec::PerChannel).unwrap();
        assert_eq!(m.op_counts(1).muls, 8);
        let one = PackedTernaryMatrix::pack(&[1, -1, 0, 1], 1, 4, &[1.0], &[0.0], GroupSpec::PerChannel).unwrap();
        assert_eq!(one.op_counts(1).muls, 2);
        let (_, c) = one.ternary_linear_counted(&Tensor::zeros(&[4, 3])).unwrap();
        assert_eq!(c, one.op_counts(3));
    }

    #[test]
    fn serialized_size_and_errors() {
        let m = PackedTernaryMatrix::pack(&[1, 0, -1, 1], 1, 4, &[0.5], &[0.25], GroupSpec::PerChannel).unwrap();
        let bytes = m.serialize();
        assert_eq!(bytes.len(), 25);
        assert_eq!(PackedTernaryMatrix::deserialize(&bytes).unwrap(), m);
        assert!(matches!(PackedTernaryMatrix::deserialize(&bytes[..24]), Err(Error::Format(_))));
        assert!(matches!(PackedTernaryMatrix::deserialize(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PackedTernaryMatrix::deserialize(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[24] = 0b11;
        assert!(matches!(PackedTernaryMatrix::deserialize(&bad), Err(Error::Corruption(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(PackedTernaryMatrix::deserialize(&long), Err(Error::Format(_))));
    }

    #[test]
    fn storage_overhead_per_channel() {
        let m = PackedTernaryMatrix::pack(&vec![0; 4096], 1, 4096, &[1.0], &[0.0], GroupSpec::PerChannel).unwrap();
        assert!(m.bits_per_weight() <= 2.02);
    }
}
