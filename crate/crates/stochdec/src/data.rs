//! Padded token batches and reserved vocabulary ids.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

/// Padded integer token matrices with lengths. Target rows always read
/// `BOS y_1 .. y_k EOS PAD*`; source rows are raw tokens plus padding.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[batch, src_len]` row-major
    pub src: Vec<usize>,
    /// `[batch, tgt_len]` row-major
    pub tgt: Vec<usize>,
    pub src_lens: Vec<usize>,
    /// counts BOS and EOS
    pub tgt_lens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(src_rows: &[Vec<usize>], tgt_rows: &[Vec<usize>]) -> Result<Self> {
        if src_rows.is_empty() || src_rows.len() != tgt_rows.len() {
            return Err(Error::invalid(format!(
                "batch needs matching nonempty rows, got {} src / {} tgt",
                src_rows.len(),
                tgt_rows.len()
            )));
        }
        for (i, row) in src_rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::invalid(format!("empty source sentence at row {}", i)));
            }
        }
        for (i, row) in tgt_rows.iter().enumerate() {
            if row.len() < 2 || row[0] != BOS || row[row.len() - 1] != EOS {
                return Err(Error::invalid(format!(
                    "target row {} must be BOS .. EOS, got {:?}",
                    i, row
                )));
            }
        }
        let batch = src_rows.len();
        let src_len = src_rows.iter().map(Vec::len).max().unwrap();
        let tgt_len = tgt_rows.iter().map(Vec::len).max().unwrap();
        let mut src = vec![PAD; batch * src_len];
        let mut tgt = vec![PAD; batch * tgt_len];
        for (b, row) in src_rows.iter().enumerate() {
            src[b * src_len..b * src_len + row.len()].copy_from_slice(row);
        }
        for (b, row) in tgt_rows.iter().enumerate() {
            tgt[b * tgt_len..b * tgt_len + row.len()].copy_from_slice(row);
        }
        Ok(TokenBatch {
            batch,
            src_len,
            tgt_len,
            src,
            tgt,
            src_lens: src_rows.iter().map(Vec::len).collect(),
            tgt_lens: tgt_rows.iter().map(Vec::len).collect(),
        })
    }

    pub fn src_ids_at(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.src[b * self.src_len + t]).collect()
    }

    pub fn tgt_ids_at(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.tgt[b * self.tgt_len + t]).collect()
    }

    /// `[batch, 1]` mask column for source position `t`.
    pub fn src_mask_col<T: Scalar>(&self, t: usize) -> Tensor<T> {
        let data = (0..self.batch)
            .map(|b| if t < self.src_lens[b] { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.batch, 1], data).unwrap()
    }

    /// `[batch, 1]` mask column for target position `t` (valid while
    /// `t < tgt_lens[b]`, i.e. BOS through EOS).
    pub fn tgt_mask_col<T: Scalar>(&self, t: usize) -> Tensor<T> {
        let data = (0..self.batch)
            .map(|b| if t < self.tgt_lens[b] { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.batch, 1], data).unwrap()
    }

    /// `[batch]` mask for the prediction at target position `i`
    /// (`1 <= i < tgt_len`): 1 when the gold token at `i` is real.
    pub fn pred_mask<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = (0..self.batch)
            .map(|b| if i < self.tgt_lens[b] { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.batch], data).unwrap()
    }

    /// Number of teacher-forcing steps (max over the batch).
    pub fn num_pred_positions(&self) -> usize {
        self.tgt_len - 1
    }

    /// Total predicted tokens in the batch (content plus EOS per row).
    pub fn total_pred_tokens(&self) -> usize {
        self.tgt_lens.iter().map(|&l| l - 1).sum()
    }
}
