//! Embedding data model and cosine primitives.
//!
//! An image is a global `[CLS]` vector plus `N` patch vectors; a caption is a
//! global `[EOT]` vector plus `M` token vectors with the token metadata the
//! exporter recorded. Everything is stored and computed in `f64`, whatever
//! precision the bundle on disk used.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AbeError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AbeError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(AbeError::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty-column matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Half-open character interval `[start, end)` into a caption, counted in
/// Unicode scalar values. Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersects(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains_index(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// One image: global vector plus patch vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    id: String,
    cls: Vec<f64>,
    patches: Matrix,
    patch_grid: Option<(usize, usize)>,
}

impl ImageEmbedding {
    pub fn new(id: impl Into<String>, cls: Vec<f64>, patches: Matrix) -> Result<Self> {
        let id = id.into();
        if patches.rows() == 0 {
            return Err(AbeError::invalid(&id, "image has no patches"));
        }
        let dim = patches.cols();
        if dim == 0 {
            return Err(AbeError::invalid(&id, "embedding dimension is zero"));
        }
        if cls.len() != dim {
            return Err(AbeError::invalid(
                &id,
                format!("cls has length {}, patches have dimension {dim}", cls.len()),
            ));
        }
        check_vector(&id, "cls", &cls)?;
        for (i, row) in patches.iter_rows().enumerate() {
            check_vector(&id, &format!("patch {i}"), row)?;
        }
        Ok(ImageEmbedding {
            id,
            cls,
            patches,
            patch_grid: None,
        })
    }

    pub fn with_patch_grid(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.patches.rows() {
            return Err(AbeError::invalid(
                &self.id,
                format!(
                    "patch grid {rows}x{cols} does not match {} patches",
                    self.patches.rows()
                ),
            ));
        }
        self.patch_grid = Some((rows, cols));
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn cls(&self) -> &[f64] {
        &self.cls
    }

    pub fn patches(&self) -> &Matrix {
        &self.patches
    }

    pub fn patch_grid(&self) -> Option<(usize, usize)> {
        self.patch_grid
    }
}

/// One caption: global vector, token vectors, and per-token metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    id: String,
    caption: String,
    eot: Vec<f64>,
    tokens: Matrix,
    token_texts: Vec<String>,
    char_spans: Vec<Span>,
    content_mask: Vec<bool>,
}

/// Token metadata accompanying a [`TextEncoding`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenMeta {
    pub texts: Vec<String>,
    pub char_spans: Vec<Span>,
    pub content_mask: Vec<bool>,
}

impl TextEncoding {
    /// Validates and assembles a caption encoding.
    ///
    /// Content tokens must carry non-empty, ordered, non-overlapping character
    /// spans inside the caption; special and padding tokens carry empty spans.
    pub fn new(
        id: impl Into<String>,
        caption: impl Into<String>,
        eot: Vec<f64>,
        tokens: Matrix,
        meta: TokenMeta,
    ) -> Result<Self> {
        let id = id.into();
        let caption = caption.into();
        let m = tokens.rows();
        let dim = tokens.cols();
        if m == 0 {
            return Err(AbeError::invalid(&id, "caption has no tokens"));
        }
        if dim == 0 {
            return Err(AbeError::invalid(&id, "embedding dimension is zero"));
        }
        if eot.len() != dim {
            return Err(AbeError::invalid(
                &id,
                format!("eot has length {}, tokens have dimension {dim}", eot.len()),
            ));
        }
        for (name, len) in [
            ("token_texts", meta.texts.len()),
            ("char_spans", meta.char_spans.len()),
            ("content_mask", meta.content_mask.len()),
        ] {
            if len != m {
                return Err(AbeError::invalid(
                    &id,
                    format!("{name} has {len} entries for {m} tokens"),
                ));
            }
        }
        check_vector(&id, "eot", &eot)?;
        for (i, row) in tokens.iter_rows().enumerate() {
            check_vector(&id, &format!("token {i}"), row)?;
        }

        let caption_len = caption.chars().count();
        let mut last_end = 0;
        let mut any_content = false;
        for (i, (span, &content)) in meta.char_spans.iter().zip(&meta.content_mask).enumerate() {
            if !content {
                if !span.is_empty() {
                    return Err(AbeError::invalid(
                        &id,
                        format!("non-content token {i} has non-empty span {span}"),
                    ));
                }
                continue;
            }
            any_content = true;
            if span.is_empty() {
                return Err(AbeError::invalid(&id, format!("content token {i} has empty span")));
            }
            if span.end > caption_len {
                return Err(AbeError::invalid(
                    &id,
                    format!("token {i} span {span} exceeds caption length {caption_len}"),
                ));
            }
            if span.start < last_end {
                return Err(AbeError::invalid(
                    &id,
                    format!("token {i} span {span} overlaps or precedes the previous token"),
                ));
            }
            last_end = span.end;
        }
        if !any_content {
            return Err(AbeError::invalid(&id, "caption has no content tokens"));
        }

        Ok(TextEncoding {
            id,
            caption,
            eot,
            tokens,
            token_texts: meta.texts,
            char_spans: meta.char_spans,
            content_mask: meta.content_mask,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn caption(&self) -> &str {
        &self.caption
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn eot(&self) -> &[f64] {
        &self.eot
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn token_texts(&self) -> &[String] {
        &self.token_texts
    }

    pub fn char_spans(&self) -> &[Span] {
        &self.char_spans
    }

    pub fn content_mask(&self) -> &[bool] {
        &self.content_mask
    }

    /// Same caption and metadata with the token vectors replaced.
    ///
    /// Refined rows are not re-validated for non-zero norm; a refined token
    /// that collapses to zero surfaces as a degenerate-input error when scored.
    pub fn with_tokens(&self, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != self.tokens.rows() || tokens.cols() != self.tokens.cols() {
            return Err(AbeError::DimensionMismatch {
                expected: self.tokens.rows() * self.tokens.cols(),
                actual: tokens.rows() * tokens.cols(),
            });
        }
        Ok(TextEncoding {
            tokens,
            ..self.clone()
        })
    }
}

fn check_vector(id: &str, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AbeError::invalid(id, format!("{what} has non-finite components")));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(AbeError::invalid(id, format!("{what} is the zero vector")));
    }
    Ok(())
}

/// Token-by-patch cosine similarities, `M` rows by `N` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    pub fn from_matrix(values: Matrix) -> Self {
        SimilarityMatrix { values }
    }

    pub fn num_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn num_patches(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`.
///
/// ```
/// use abe_core::embedding::cosine;
/// let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
/// assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
/// assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
/// ```
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AbeError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    if u.is_empty() {
        return Err(AbeError::Degenerate("cosine of empty vectors".into()));
    }
    cosine_with_norms(u, norm(u), v, norm(v))
}

fn cosine_with_norms(u: &[f64], nu: f64, v: &[f64], nv: f64) -> Result<f64> {
    if nu == 0.0 || nv == 0.0 {
        return Err(AbeError::Degenerate("cosine with a zero-norm vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Cosine between every row of `rows` and every row of `cols`.
pub fn cosine_matrix(rows: &Matrix, cols: &Matrix) -> Result<Matrix> {
    if rows.cols() != cols.cols() {
        return Err(AbeError::DimensionMismatch {
            expected: rows.cols(),
            actual: cols.cols(),
        });
    }
    let col_norms: Vec<f64> = cols.iter_rows().map(norm).collect();
    let mut out = Matrix::zeros(rows.rows(), cols.rows());
    for (i, u) in rows.iter_rows().enumerate() {
        let nu = norm(u);
        let dst = out.row_mut(i);
        for (j, v) in cols.iter_rows().enumerate() {
            dst[j] = cosine_with_norms(u, nu, v, col_norms[j])?;
        }
    }
    Ok(out)
}

/// Similarity matrix between a caption's tokens and an image's patches.
///
/// Rows for masked tokens are computed too; aggregation skips them.
pub fn similarity_matrix(text: &TextEncoding, image: &ImageEmbedding) -> Result<SimilarityMatrix> {
    similarity_of_tokens(text.tokens(), image)
}

pub(crate) fn similarity_of_tokens(tokens: &Matrix, image: &ImageEmbedding) -> Result<SimilarityMatrix> {
    if tokens.cols() != image.dim() {
        return Err(AbeError::DimensionMismatch {
            expected: image.dim(),
            actual: tokens.cols(),
        });
    }
    Ok(SimilarityMatrix::from_matrix(cosine_matrix(tokens, image.patches())?))
}

/// Mean of a set of rows.
pub fn mean_of_rows(m: &Matrix, rows: std::ops::Range<usize>) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    let count = rows.len();
    for i in rows {
        for (a, x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
    if count > 0 {
        let inv = count as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
    }
    acc
}
