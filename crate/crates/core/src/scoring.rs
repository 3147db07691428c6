//! Fused image–text score.
//!
//! ```text
//! S_base   = local score with the original tokens
//! S_refine = local score with the refined tokens (same K, same mask)
//! Δ        = |S_refine − S_base|
//! S_local  = S_refine + Δ
//! S_global = cos(t_eot, v_cls)
//! S_final  = (1 − ω)·S_local + ω·S_global
//! ```
//!
//! No clamping or normalisation is applied; `S_local` can exceed 1.

use serde::{Deserialize, Serialize};

use crate::alignment::{aggregate_score, DEFAULT_K};
use crate::caption::CaptionStructure;
use crate::embedding::{cosine, similarity_of_tokens, ImageEmbedding, Matrix, TextEncoding};
use crate::error::{AbeError, Result};
use crate::refine::{refine_encoding, ConceptPool, PhraseTable, RefinementParams, DEFAULT_P};

pub const DEFAULT_OMEGA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub omega: f64,
    pub k: usize,
    pub p: usize,
    /// Aggregate over every token row instead of content tokens only.
    pub include_special_tokens: bool,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            omega: DEFAULT_OMEGA,
            k: DEFAULT_K,
            p: DEFAULT_P,
            include_special_tokens: false,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(AbeError::InvalidParam(format!("omega {} outside [0, 1]", self.omega)));
        }
        if self.k == 0 {
            return Err(AbeError::InvalidParam("k must be at least 1".into()));
        }
        if self.p == 0 {
            return Err(AbeError::InvalidParam("p must be at least 1".into()));
        }
        Ok(())
    }

    pub fn refinement(&self) -> RefinementParams {
        RefinementParams { p: self.p }
    }
}

/// Concept pool and phrase table used by refinement.
#[derive(Debug, Clone)]
pub struct RefinementResources {
    pub pool: ConceptPool,
    pub table: PhraseTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub image_id: String,
    pub text_id: String,
    pub s_base: f64,
    pub s_refine: f64,
    pub delta: f64,
    pub s_local: f64,
    pub s_global: f64,
    pub s_final: f64,
    pub omega: f64,
    pub k: usize,
    pub p: usize,
}

impl ScoreReport {
    /// Re-fuses the same components under a different `omega`.
    pub fn with_omega(&self, omega: f64) -> Result<Self> {
        Ok(ScoreReport {
            s_final: final_score(self.s_local, self.s_global, omega)?,
            omega,
            ..self.clone()
        })
    }
}

/// `|s_refine − s_base|`.
pub fn binding_difference(s_refine: f64, s_base: f64) -> f64 {
    (s_refine - s_base).abs()
}

/// `cos(t_eot, v_cls)` on the unrefined global vectors.
pub fn global_score(text: &TextEncoding, image: &ImageEmbedding) -> Result<f64> {
    cosine(text.eot(), image.cls())
}

/// `(1 − ω)·s_local + ω·s_global`.
///
/// ```
/// use abe_core::scoring::final_score;
/// assert!((final_score(0.8, 0.6, 0.3).unwrap() - 0.74).abs() < 1e-12);
/// assert_eq!(final_score(0.8, 0.6, 1.0).unwrap(), 0.6);
/// assert!(final_score(0.8, 0.6, 1.5).is_err());
/// ```
pub fn final_score(s_local: f64, s_global: f64, omega: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(AbeError::InvalidParam(format!("omega {omega} outside [0, 1]")));
    }
    // Endpoints are exact so the fused score collapses onto one component.
    if omega == 0.0 {
        return Ok(s_local);
    }
    if omega == 1.0 {
        return Ok(s_global);
    }
    Ok((1.0 - omega) * s_local + omega * s_global)
}

fn mask_for(text: &TextEncoding, params: &ScoreParams) -> Vec<bool> {
    if params.include_special_tokens {
        vec![true; text.num_tokens()]
    } else {
        text.content_mask().to_vec()
    }
}

/// Local token–patch score of `tokens` (rows aligned with `text`'s metadata).
pub fn local_score(
    tokens: &Matrix,
    text: &TextEncoding,
    image: &ImageEmbedding,
    params: &ScoreParams,
) -> Result<f64> {
    let sim = similarity_of_tokens(tokens, image)?;
    aggregate_score(&sim, &mask_for(text, params), params.k)
}

/// Refined local score; equal to `s_base` when the caption has no pairs.
pub fn refined_local_score(
    image: &ImageEmbedding,
    text: &TextEncoding,
    structure: &CaptionStructure,
    resources: Option<&RefinementResources>,
    params: &ScoreParams,
    s_base: f64,
) -> Result<f64> {
    if structure.pairs.is_empty() {
        return Ok(s_base);
    }
    let res = resources.ok_or_else(|| {
        AbeError::InvalidParam(format!(
            "caption `{}` has attribute-object pairs but no concept pool or phrase table is loaded",
            structure.caption_id
        ))
    })?;
    let refined = refine_encoding(text, structure, &res.pool, &res.table, params.refinement())?;
    local_score(refined.text.tokens(), text, image, params)
}

/// Full scoring of one image–caption pair.
pub fn score_pair(
    image: &ImageEmbedding,
    text: &TextEncoding,
    structure: &CaptionStructure,
    resources: Option<&RefinementResources>,
    params: &ScoreParams,
) -> Result<ScoreReport> {
    params.validate()?;
    if !structure.is_resolved() {
        return Err(AbeError::Unresolved(structure.caption_id.clone()));
    }
    let s_global = global_score(text, image)?;
    let s_base = local_score(text.tokens(), text, image, params)?;
    let s_refine = refined_local_score(image, text, structure, resources, params, s_base)?;
    let delta = binding_difference(s_refine, s_base);
    let s_local = s_refine + delta;
    let s_final = final_score(s_local, s_global, params.omega)?;
    Ok(ScoreReport {
        image_id: image.id().to_string(),
        text_id: text.id().to_string(),
        s_base,
        s_refine,
        delta,
        s_local,
        s_global,
        s_final,
        omega: params.omega,
        k: params.k,
        p: params.p,
    })
}
