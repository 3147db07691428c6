//! Local token–patch alignment.
//!
//! Every text token is matched to its `K` most similar image patches. The
//! token score `φ` is the mean similarity over those patches and the local
//! image–text score is the mean `φ` over the scorable tokens.
//!
//! Top-`K` ties resolve toward the lower patch index, so the selected set is
//! independent of the sort algorithm and platform.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::SimilarityMatrix;
use crate::error::{AbeError, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub k: usize,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams { k: DEFAULT_K }
    }
}

/// The patches chosen for one token and the resulting pooled score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenAlignment {
    pub token_index: usize,
    pub patch_indices: Vec<usize>,
    pub token_score: f64,
}

/// Descending by value, then ascending by index.
fn rank_order(row: &[f64], a: usize, b: usize) -> Ordering {
    row[b].total_cmp(&row[a]).then(a.cmp(&b))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(AbeError::InvalidK { k, n });
    }
    Ok(())
}

/// Indices of the `k` largest entries of `row`, best first.
///
/// ```
/// use abe_core::alignment::topk_indices;
/// assert_eq!(topk_indices(&[0.9, 0.1, 0.5, 0.7], 2).unwrap(), vec![0, 3]);
/// assert_eq!(topk_indices(&[0.2; 4], 3).unwrap(), vec![0, 1, 2]);
/// ```
pub fn topk_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, row.len())?;
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(row, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(row, a, b));
    Ok(idx)
}

fn pooled(row: &[f64], picked: &[usize]) -> f64 {
    let sum: f64 = picked.iter().map(|&j| row[j]).sum();
    sum / picked.len() as f64
}

/// Mean of the `k` largest similarities in `row`.
pub fn token_score(row: &[f64], k: usize) -> Result<f64> {
    let picked = topk_indices(row, k)?;
    Ok(pooled(row, &picked))
}

/// Top-`k` selection and pooled score for one token row.
pub fn align_token(sim: &SimilarityMatrix, token_index: usize, k: usize) -> Result<TokenAlignment> {
    let row = sim.row(token_index);
    let patch_indices = topk_indices(row, k)?;
    let token_score = pooled(row, &patch_indices);
    Ok(TokenAlignment {
        token_index,
        patch_indices,
        token_score,
    })
}

/// Alignment records for every token, masked or not.
pub fn align_all(sim: &SimilarityMatrix, k: usize) -> Result<Vec<TokenAlignment>> {
    (0..sim.num_tokens()).map(|i| align_token(sim, i, k)).collect()
}

/// Mean token score over the tokens where `mask` is true.
pub fn aggregate_score(sim: &SimilarityMatrix, mask: &[bool], k: usize) -> Result<f64> {
    if mask.len() != sim.num_tokens() {
        return Err(AbeError::DimensionMismatch {
            expected: sim.num_tokens(),
            actual: mask.len(),
        });
    }
    check_k(k, sim.num_patches())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sum += token_score(sim.row(i), k)?;
        count += 1;
    }
    if count == 0 {
        return Err(AbeError::InvalidParam("aggregation mask selects no tokens".into()));
    }
    Ok(sum / count as f64)
}
