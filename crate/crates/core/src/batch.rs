use candle_core::{DType, Device, Tensor};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Right-padded token batch with teacher-forcing targets.
///
/// Decoder targets are `x_1 … x_T EOS`, fed `BOS x_1 … x_T`.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, T)` token ids.
    pub ids: Tensor,
    /// `(B, T)` 1 for real tokens, 0 for padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    /// `(B, T + 1)` decoder inputs.
    pub target_in: Tensor,
    /// `(B, T + 1)` decoder targets.
    pub target_out: Tensor,
    /// `(B, T + 1)` target mask.
    pub target_mask: Tensor,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(docs: &[S], dtype: DType, device: &Device) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let lengths: Vec<usize> = docs.iter().map(|d| d.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(Error::InvalidInput("document with T = 0".into()));
        }
        let b = docs.len();
        let t = *lengths.iter().max().unwrap();
        let mut ids = vec![PAD; b * t];
        let mut mask = vec![0f32; b * t];
        let mut tin = vec![PAD; b * (t + 1)];
        let mut tout = vec![PAD; b * (t + 1)];
        let mut tmask = vec![0f32; b * (t + 1)];
        for (i, doc) in docs.iter().enumerate() {
            let doc = doc.as_ref();
            let n = doc.len();
            ids[i * t..i * t + n].copy_from_slice(doc);
            mask[i * t..i * t + n].fill(1.0);
            let row = i * (t + 1);
            tin[row] = BOS;
            tin[row + 1..row + 1 + n].copy_from_slice(doc);
            tout[row..row + n].copy_from_slice(doc);
            tout[row + n] = EOS;
            tmask[row..row + n + 1].fill(1.0);
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (b, t), device)?,
            mask: Tensor::from_vec(mask, (b, t), device)?.to_dtype(dtype)?,
            lengths,
            target_in: Tensor::from_vec(tin, (b, t + 1), device)?,
            target_out: Tensor::from_vec(tout, (b, t + 1), device)?,
            target_mask: Tensor::from_vec(tmask, (b, t + 1), device)?.to_dtype(dtype)?,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.dims()[1]
    }

    /// Number of scored target positions (tokens plus one EOS per document).
    pub fn target_tokens(&self) -> usize {
        self.lengths.iter().map(|n| n + 1).sum()
    }
}
