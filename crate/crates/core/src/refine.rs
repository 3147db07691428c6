//! Binding-vector refinement of attribute and object token embeddings.
//!
//! For each attribute–object pair `(a, k)` in a caption:
//!
//! * the `P` pool concepts nearest to the object embedding `t_k` are chosen;
//! * the positive binding vector `b⁺` averages, over those neighbours,
//!   `F(a, obj) − F(∅, obj)`, the shift an attribute induces in an object
//!   embedding;
//! * the negative binding vector `b⁻` does the same for attributes attached
//!   to other objects in the sentence (one binding vector per attribute, then
//!   averaged; zero when there are none);
//! * object tokens become `t_k + b⁺ − b⁻` and attribute tokens `t_a + t_k`.
//!
//! Multi-token words use the mean of their token vectors wherever a single
//! vector is needed. All updates are computed from the original encoding.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alignment::topk_indices;
use crate::caption::{resolve_token_spans, CaptionStructure};
use crate::embedding::{dot, mean_of_rows, norm, Matrix, TextEncoding};
use crate::error::{AbeError, Result};

pub const DEFAULT_P: usize = 5;

/// Candidate object concepts with their blank-context embeddings `F(∅, obj)`.
#[derive(Debug, Clone)]
pub struct ConceptPool {
    concepts: Vec<String>,
    embeddings: Matrix,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl ConceptPool {
    pub fn new(concepts: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if concepts.len() != embeddings.rows() {
            return Err(AbeError::DimensionMismatch {
                expected: concepts.len(),
                actual: embeddings.rows(),
            });
        }
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(AbeError::invalid(c, "duplicate concept in pool"));
            }
        }
        let mut norms = Vec::with_capacity(concepts.len());
        for (c, row) in concepts.iter().zip(embeddings.iter_rows()) {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(AbeError::invalid(c, "concept embedding has non-finite components"));
            }
            let n = norm(row);
            if n == 0.0 {
                return Err(AbeError::invalid(c, "concept embedding is the zero vector"));
            }
            norms.push(n);
        }
        Ok(ConceptPool {
            concepts,
            embeddings,
            norms,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// `F(∅, concept)`.
    pub fn base_embedding(&self, concept: &str) -> Option<&[f64]> {
        self.index.get(concept).map(|&i| self.embeddings.row(i))
    }
}

/// Key `(attribute, object)` of a phrase-table entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhraseKey {
    pub attribute: String,
    pub object: String,
}

impl PhraseKey {
    pub fn new(attribute: impl Into<String>, object: impl Into<String>) -> Self {
        PhraseKey {
            attribute: attribute.into(),
            object: object.into(),
        }
    }
}

impl fmt::Display for PhraseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.attribute, self.object)
    }
}

/// Object embeddings `F(a, obj)` taken from encodings of the phrase "a obj".
#[derive(Debug, Clone, Default)]
pub struct PhraseTable {
    dim: usize,
    entries: HashMap<PhraseKey, Vec<f64>>,
}

impl PhraseTable {
    pub fn new(dim: usize) -> Self {
        PhraseTable {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, key: PhraseKey, vec: Vec<f64>) -> Result<()> {
        if vec.len() != self.dim {
            return Err(AbeError::DimensionMismatch {
                expected: self.dim,
                actual: vec.len(),
            });
        }
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(AbeError::invalid(&key.to_string(), "phrase embedding has non-finite components"));
        }
        self.entries.insert(key, vec);
        Ok(())
    }

    pub fn get(&self, attribute: &str, object: &str) -> Option<&[f64]> {
        self.entries
            .get(&PhraseKey::new(attribute, object))
            .map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by key.
    pub fn sorted_entries(&self) -> Vec<(&PhraseKey, &[f64])> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, v)| (k, v.as_slice())).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// Scales every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        PhraseTable {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x * factor).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementParams {
    pub p: usize,
}

impl Default for RefinementParams {
    fn default() -> Self {
        RefinementParams { p: DEFAULT_P }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BindingVectors {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Indices of the `p` pool concepts most cosine-similar to `query`, best
/// first, ties in pool order.
pub fn nearest_concept_indices(query: &[f64], pool: &ConceptPool, p: usize) -> Result<Vec<usize>> {
    if query.len() != pool.dim() {
        return Err(AbeError::DimensionMismatch {
            expected: pool.dim(),
            actual: query.len(),
        });
    }
    if p == 0 || p > pool.len() {
        return Err(AbeError::InvalidParam(format!(
            "neighbour count {p} outside 1..={}",
            pool.len()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(AbeError::Degenerate("nearest-concept query is the zero vector".into()));
    }
    let sims: Vec<f64> = pool
        .embeddings
        .iter_rows()
        .zip(&pool.norms)
        .map(|(row, &n)| dot(query, row) / (qn * n))
        .collect();
    topk_indices(&sims, p)
}

/// The `p` pool concepts nearest to `query`.
pub fn nearest_concepts<'a>(query: &[f64], pool: &'a ConceptPool, p: usize) -> Result<Vec<&'a str>> {
    Ok(nearest_concept_indices(query, pool, p)?
        .into_iter()
        .map(|i| pool.concepts[i].as_str())
        .collect())
}

/// Every `(attribute, neighbour)` key absent from `table`.
fn missing_keys(attributes: &[String], neighbors: &[&str], table: &PhraseTable) -> Vec<PhraseKey> {
    attributes
        .iter()
        .flat_map(|a| neighbors.iter().map(move |o| (a, *o)))
        .filter(|(a, o)| table.get(a, o).is_none())
        .map(|(a, o)| PhraseKey::new(a.as_str(), o))
        .collect()
}

/// Mean over `attributes` of the per-attribute binding vector
/// `(1/P) Σ_i F(a, obj_i) − F(∅, obj_i)`; the zero vector when `attributes`
/// is empty.
pub fn binding_vector(
    attributes: &[String],
    neighbors: &[&str],
    table: &PhraseTable,
    pool: &ConceptPool,
) -> Result<Vec<f64>> {
    let dim = pool.dim();
    if attributes.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    if neighbors.is_empty() {
        return Err(AbeError::InvalidParam("binding vector needs at least one neighbour".into()));
    }
    if table.dim() != dim {
        return Err(AbeError::DimensionMismatch {
            expected: dim,
            actual: table.dim(),
        });
    }
    let missing = missing_keys(attributes, neighbors, table);
    if !missing.is_empty() {
        return Err(AbeError::MissingPhrases(missing));
    }

    let mut total = vec![0.0; dim];
    for attribute in attributes {
        let mut per_attr = vec![0.0; dim];
        for &obj in neighbors {
            let base = pool
                .base_embedding(obj)
                .ok_or_else(|| AbeError::UnknownId {
                    kind: "concept",
                    id: obj.to_string(),
                })?;
            let phrase = table.get(attribute, obj).expect("checked above");
            for ((acc, f), b) in per_attr.iter_mut().zip(phrase).zip(base) {
                *acc += f - b;
            }
        }
        let p = neighbors.len() as f64;
        for (t, x) in total.iter_mut().zip(&per_attr) {
            *t += x / p;
        }
    }
    let n = attributes.len() as f64;
    total.iter_mut().for_each(|t| *t /= n);
    Ok(total)
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(AbeError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// `t_k + b⁺ − b⁻`.
pub fn refine_object(t_k: &[f64], b_pos: &[f64], b_neg: &[f64]) -> Result<Vec<f64>> {
    check_len(t_k, b_pos)?;
    check_len(t_k, b_neg)?;
    Ok(t_k
        .iter()
        .zip(b_pos)
        .zip(b_neg)
        .map(|((t, p), n)| t + p - n)
        .collect())
}

/// `t_a + t_k`, with `t_k` the unrefined object embedding.
pub fn refine_attribute(t_a: &[f64], t_k: &[f64]) -> Result<Vec<f64>> {
    check_len(t_a, t_k)?;
    Ok(t_a.iter().zip(t_k).map(|(a, k)| a + k).collect())
}

/// Per-pair intermediate values of a refinement, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRefinement {
    pub attribute: String,
    pub object: String,
    pub neighbors: Vec<String>,
    pub negative_attributes: Vec<String>,
    pub object_vector: Vec<f64>,
    pub binding: BindingVectors,
}

/// Refined encoding plus the per-pair trace.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub text: TextEncoding,
    pub pairs: Vec<PairRefinement>,
}

/// Object query vector (span mean) and its neighbours, per pair.
fn object_queries<'p>(
    text: &TextEncoding,
    structure: &CaptionStructure,
    pool: &'p ConceptPool,
    params: RefinementParams,
) -> Result<Vec<(Vec<f64>, Vec<&'p str>)>> {
    let mut out = Vec::with_capacity(structure.pairs.len());
    for pair in &structure.pairs {
        let obj = pair
            .obj_token_span
            .ok_or_else(|| AbeError::Unresolved(structure.caption_id.clone()))?;
        let t_k = mean_of_rows(text.tokens(), obj.start..obj.end);
        let neighbors = nearest_concepts(&t_k, pool, params.p)?;
        out.push((t_k, neighbors));
    }
    Ok(out)
}

/// Applies binding-vector refinement for every pair of a resolved structure.
///
/// Tokens outside all attribute and object spans, the `[EOT]` vector, and the
/// metadata are returned untouched. When several pairs touch the same token,
/// their updates add up; the object vector `t_k` and the neighbour queries
/// always come from the original tokens.
pub fn refine_encoding(
    text: &TextEncoding,
    structure: &CaptionStructure,
    pool: &ConceptPool,
    table: &PhraseTable,
    params: RefinementParams,
) -> Result<Refinement> {
    if structure.pairs.is_empty() {
        return Ok(Refinement {
            text: text.clone(),
            pairs: Vec::new(),
        });
    }
    if structure.caption != text.caption() {
        return Err(AbeError::CaptionMismatch {
            id: structure.caption_id.clone(),
        });
    }
    if pool.dim() != text.dim() {
        return Err(AbeError::DimensionMismatch {
            expected: text.dim(),
            actual: pool.dim(),
        });
    }
    if !structure.is_resolved() {
        return Err(AbeError::Unresolved(structure.caption_id.clone()));
    }
    let m = text.num_tokens();
    if structure
        .pairs
        .iter()
        .flat_map(|p| [p.attr_token_span.unwrap(), p.obj_token_span.unwrap()])
        .any(|s| s.is_empty() || s.end > m)
    {
        return Err(AbeError::InvalidParam(format!(
            "token span outside the {m} tokens of `{}`",
            structure.caption_id
        )));
    }

    let queries = object_queries(text, structure, pool, params)?;

    // Collect every missing key before failing so the caller sees the full list.
    let mut missing = BTreeSet::new();
    for (i, (_, neighbors)) in queries.iter().enumerate() {
        let mut attrs = structure.negative_attributes(i);
        attrs.push(structure.positive_attribute(i));
        missing.extend(missing_keys(&attrs, neighbors, table));
    }
    if !missing.is_empty() {
        return Err(AbeError::MissingPhrases(missing.into_iter().collect()));
    }

    let mut refined = text.tokens().clone();
    let mut trace = Vec::with_capacity(structure.pairs.len());
    for (i, (pair, (t_k, neighbors))) in structure.pairs.iter().zip(&queries).enumerate() {
        let positive = binding_vector(&[structure.positive_attribute(i)], neighbors, table, pool)?;
        let negative_attributes = structure.negative_attributes(i);
        let negative = binding_vector(&negative_attributes, neighbors, table, pool)?;

        let obj = pair.obj_token_span.unwrap();
        for row in obj.start..obj.end {
            let updated = refine_object(refined.row(row), &positive, &negative)?;
            refined.row_mut(row).copy_from_slice(&updated);
        }
        let attr = pair.attr_token_span.unwrap();
        for row in attr.start..attr.end {
            let updated = refine_attribute(refined.row(row), t_k)?;
            refined.row_mut(row).copy_from_slice(&updated);
        }

        trace.push(PairRefinement {
            attribute: pair.attribute.clone(),
            object: pair.object.clone(),
            neighbors: neighbors.iter().map(|s| s.to_string()).collect(),
            negative_attributes,
            object_vector: t_k.clone(),
            binding: BindingVectors { positive, negative },
        });
    }

    Ok(Refinement {
        text: text.with_tokens(refined)?,
        pairs: trace,
    })
}

/// Phrase keys that scoring the given captions will look up.
///
/// Structures are resolved against their encodings first (the neighbour
/// query is the object's token-span mean). Blank-attribute embeddings live
/// in the pool and are not requested.
pub fn phrase_requests<'a>(
    items: impl IntoIterator<Item = (&'a CaptionStructure, &'a TextEncoding)>,
    pool: &ConceptPool,
    params: RefinementParams,
) -> Result<BTreeSet<PhraseKey>> {
    let mut keys = BTreeSet::new();
    for (structure, text) in items {
        let resolved = if structure.is_resolved() {
            structure.clone()
        } else {
            resolve_token_spans(structure, text)?.structure
        };
        let queries = object_queries(text, &resolved, pool, params)?;
        for (i, (_, neighbors)) in queries.iter().enumerate() {
            let mut attrs = vec![resolved.positive_attribute(i)];
            attrs.extend(resolved.negative_attributes(i));
            for a in &attrs {
                for n in neighbors {
                    keys.insert(PhraseKey::new(a.as_str(), *n));
                }
            }
        }
    }
    Ok(keys)
}

/// Writes request keys as JSON lines `{"attribute": .., "object": ..}`.
pub fn write_phrase_requests<'a, W: Write>(
    mut w: W,
    keys: impl IntoIterator<Item = &'a PhraseKey>,
) -> Result<usize> {
    let mut n = 0;
    for key in keys {
        serde_json::to_writer(&mut w, key)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

/// Resolves, collects, and writes phrase requests in one go.
pub fn emit_phrase_requests<'a, W: Write>(
    w: W,
    items: impl IntoIterator<Item = (&'a CaptionStructure, &'a TextEncoding)>,
    pool: &ConceptPool,
    params: RefinementParams,
) -> Result<usize> {
    let keys = phrase_requests(items, pool, params)?;
    write_phrase_requests(w, &keys)
}
