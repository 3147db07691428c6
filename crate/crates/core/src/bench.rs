//! Evaluation protocols over a loaded corpus.
//!
//! * pairwise accuracy: an image with a positive and a hard-negative caption
//!   counts as correct iff the positive scores strictly higher;
//! * text-to-image Recall@K over a gallery;
//! * K × ω sweeps and the four-way component ablation.
//!
//! Work is spread over a fixed-size worker pool; results are collected in
//! input order, so outputs do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::{extract_pairs_heuristic, resolve_token_spans, CaptionStructure, Lexicon};
use crate::embedding::{ImageEmbedding, TextEncoding};
use crate::error::{AbeError, Result};
use crate::refine::PhraseKey;
use crate::scoring::{
    final_score, global_score, local_score, refined_local_score, score_pair, RefinementResources,
    ScoreParams, ScoreReport,
};

/// Which score field a benchmark ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// `S_global` only (plain CLIP matching).
    GlobalOnly,
    /// `S_base`: token–patch alignment without refinement.
    BaseLocal,
    /// `S_refine`: alignment after semantic refinement.
    Refined,
    /// `S_final`: refinement, binding difference and global fusion.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::GlobalOnly, Mode::BaseLocal, Mode::Refined, Mode::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::GlobalOnly => "global-only",
            Mode::BaseLocal => "base-local",
            Mode::Refined => "refined",
            Mode::Full => "full",
        }
    }

    /// The report field this mode ranks by.
    pub fn pick(&self, r: &ScoreReport) -> f64 {
        match self {
            Mode::GlobalOnly => r.s_global,
            Mode::BaseLocal => r.s_base,
            Mode::Refined => r.s_refine,
            Mode::Full => r.s_final,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = AbeError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AbeError::InvalidParam(format!("unknown mode `{s}`")))
    }
}

/// Where attribute–object pairs come from.
#[derive(Debug, Clone)]
pub enum PairSource {
    /// A parsed pairs file keyed by caption id; captions absent from it get no pairs.
    Parsed(BTreeMap<String, CaptionStructure>),
    /// The lexicon fallback extractor.
    Heuristic(Lexicon),
    /// No pairs at all; refinement is a no-op.
    None,
}

/// Images, captions, resolved caption structures, and refinement resources.
#[derive(Debug, Clone)]
pub struct Corpus {
    images: BTreeMap<String, ImageEmbedding>,
    texts: BTreeMap<String, TextEncoding>,
    structures: BTreeMap<String, CaptionStructure>,
    resources: Option<RefinementResources>,
    dropped_pairs: usize,
}

impl Corpus {
    pub fn new(
        images: Vec<ImageEmbedding>,
        texts: Vec<TextEncoding>,
        pairs: PairSource,
        resources: Option<RefinementResources>,
    ) -> Result<Self> {
        let mut image_map = BTreeMap::new();
        for img in images {
            let id = img.id().to_string();
            if image_map.insert(id.clone(), img).is_some() {
                return Err(AbeError::InvalidParam(format!("duplicate image id `{id}`")));
            }
        }
        let mut text_map = BTreeMap::new();
        let mut structures = BTreeMap::new();
        let mut dropped_pairs = 0;
        for text in texts {
            let id = text.id().to_string();
            let raw = match &pairs {
                PairSource::Parsed(map) => match map.get(&id) {
                    Some(s) => s.clone(),
                    None => CaptionStructure::empty(&id, text.caption()),
                },
                PairSource::Heuristic(lex) => extract_pairs_heuristic(&id, text.caption(), lex),
                PairSource::None => CaptionStructure::empty(&id, text.caption()),
            };
            let resolved = resolve_token_spans(&raw, &text)?;
            dropped_pairs += resolved.dropped;
            structures.insert(id.clone(), resolved.structure);
            if text_map.insert(id.clone(), text).is_some() {
                return Err(AbeError::InvalidParam(format!("duplicate text id `{id}`")));
            }
        }
        if let (Some(res), Some(img)) = (&resources, image_map.values().next()) {
            if res.pool.dim() != img.dim() {
                return Err(AbeError::DimensionMismatch {
                    expected: img.dim(),
                    actual: res.pool.dim(),
                });
            }
        }
        Ok(Corpus {
            images: image_map,
            texts: text_map,
            structures,
            resources,
            dropped_pairs,
        })
    }

    pub fn image(&self, id: &str) -> Result<&ImageEmbedding> {
        self.images.get(id).ok_or_else(|| AbeError::UnknownId {
            kind: "image",
            id: id.to_string(),
        })
    }

    pub fn text(&self, id: &str) -> Result<&TextEncoding> {
        self.texts.get(id).ok_or_else(|| AbeError::UnknownId {
            kind: "text",
            id: id.to_string(),
        })
    }

    pub fn structure(&self, text_id: &str) -> Result<&CaptionStructure> {
        self.structures.get(text_id).ok_or_else(|| AbeError::UnknownId {
            kind: "text",
            id: text_id.to_string(),
        })
    }

    pub fn structures(&self) -> impl Iterator<Item = (&CaptionStructure, &TextEncoding)> {
        self.texts
            .iter()
            .map(move |(id, t)| (&self.structures[id], t))
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn resources(&self) -> Option<&RefinementResources> {
        self.resources.as_ref()
    }

    /// Pairs dropped during token-span resolution (truncation etc.).
    pub fn dropped_pairs(&self) -> usize {
        self.dropped_pairs
    }

    /// Full score report for one pair.
    pub fn score(&self, image_id: &str, text_id: &str, params: &ScoreParams) -> Result<ScoreReport> {
        score_pair(
            self.image(image_id)?,
            self.text(text_id)?,
            self.structure(text_id)?,
            self.resources.as_ref(),
            params,
        )
    }

    /// The score a mode ranks by, computing only what that mode needs.
    pub fn score_mode(&self, image_id: &str, text_id: &str, params: &ScoreParams, mode: Mode) -> Result<f64> {
        params.validate()?;
        let image = self.image(image_id)?;
        let text = self.text(text_id)?;
        match mode {
            Mode::GlobalOnly => global_score(text, image),
            Mode::BaseLocal => local_score(text.tokens(), text, image, params),
            Mode::Refined => {
                let base = local_score(text.tokens(), text, image, params)?;
                refined_local_score(image, text, self.structure(text_id)?, self.resources.as_ref(), params, base)
            }
            Mode::Full => Ok(self.score(image_id, text_id, params)?.s_final),
        }
    }
}

/// Runs `f` over `0..n` on `workers` threads, keeping input order.
///
/// Missing phrase keys from every failing item are merged into one error so
/// callers can report the complete request list.
fn run_indexed<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AbeError::InvalidParam(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..n).into_par_iter().map(&f).collect());

    let mut out = Vec::with_capacity(n);
    let mut missing = BTreeSet::new();
    let mut first_other = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(AbeError::MissingPhrases(keys)) => missing.extend(keys),
            Err(e) => {
                first_other.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_other {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(AbeError::MissingPhrases(missing.into_iter().collect::<Vec<PhraseKey>>()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseCase {
    pub image_id: String,
    pub positive_text_id: String,
    pub negative_text_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text_id: String,
    pub gold_image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalSet {
    pub queries: Vec<RetrievalQuery>,
    pub gallery: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    pub image_id: String,
    pub positive_text_id: String,
    pub negative_text_id: String,
    pub positive_score: f64,
    pub negative_score: f64,
    pub margin: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub text_id: String,
    /// 1-based rank of the best-placed ground-truth image.
    pub gold_rank: usize,
    pub top_image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemRecord {
    Pairwise(PairwiseRecord),
    Retrieval(RetrievalRecord),
}

/// One metric value with its per-item evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub metric: String,
    pub mode: Mode,
    pub params: ScoreParams,
    pub value: f64,
    pub correct: usize,
    pub total: usize,
    pub records: Vec<ItemRecord>,
}

fn ratio(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn check_case(c: &PairwiseCase, corpus: &Corpus) -> Result<()> {
    corpus.image(&c.image_id)?;
    corpus.text(&c.positive_text_id)?;
    corpus.text(&c.negative_text_id)?;
    if c.positive_text_id == c.negative_text_id {
        return Err(AbeError::InvalidParam(format!(
            "case for `{}` uses `{}` as both positive and negative",
            c.image_id, c.positive_text_id
        )));
    }
    Ok(())
}

fn pairwise_from_scores(
    cases: &[PairwiseCase],
    scores: &[(f64, f64)],
    mode: Mode,
    params: ScoreParams,
) -> BenchResult {
    let records: Vec<ItemRecord> = cases
        .iter()
        .zip(scores)
        .map(|(c, &(pos, neg))| {
            ItemRecord::Pairwise(PairwiseRecord {
                image_id: c.image_id.clone(),
                positive_text_id: c.positive_text_id.clone(),
                negative_text_id: c.negative_text_id.clone(),
                positive_score: pos,
                negative_score: neg,
                margin: pos - neg,
                correct: pos > neg,
            })
        })
        .collect();
    let correct = scores.iter().filter(|(p, n)| p > n).count();
    BenchResult {
        metric: "pairwise_accuracy".into(),
        mode,
        params,
        value: ratio(correct, cases.len()),
        correct,
        total: cases.len(),
        records,
    }
}

/// Fraction of cases where the positive caption outscores the negative one.
/// Ties count as incorrect.
pub fn pairwise_accuracy(
    cases: &[PairwiseCase],
    corpus: &Corpus,
    params: &ScoreParams,
    mode: Mode,
    workers: usize,
) -> Result<BenchResult> {
    params.validate()?;
    for c in cases {
        check_case(c, corpus)?;
    }
    let scores = run_indexed(workers, cases.len(), |i| {
        let c = &cases[i];
        Ok((
            corpus.score_mode(&c.image_id, &c.positive_text_id, params, mode)?,
            corpus.score_mode(&c.image_id, &c.negative_text_id, params, mode)?,
        ))
    })?;
    Ok(pairwise_from_scores(cases, &scores, mode, *params))
}

/// Pairwise accuracy under all four modes.
pub fn ablation(
    cases: &[PairwiseCase],
    corpus: &Corpus,
    params: &ScoreParams,
    workers: usize,
) -> Result<Vec<BenchResult>> {
    params.validate()?;
    for c in cases {
        check_case(c, corpus)?;
    }
    let reports = run_indexed(workers, cases.len(), |i| {
        let c = &cases[i];
        Ok((
            corpus.score(&c.image_id, &c.positive_text_id, params)?,
            corpus.score(&c.image_id, &c.negative_text_id, params)?,
        ))
    })?;
    Ok(Mode::ALL
        .into_iter()
        .map(|mode| {
            let scores: Vec<(f64, f64)> = reports.iter().map(|(p, n)| (mode.pick(p), mode.pick(n))).collect();
            pairwise_from_scores(cases, &scores, mode, *params)
        })
        .collect())
}

/// One cell of a K × ω grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub omega: f64,
    pub result: BenchResult,
}

/// Full-mode pairwise accuracy over every `(k, omega)` combination.
///
/// Score components are computed once per `k`; each `omega` only re-fuses.
pub fn sweep(
    cases: &[PairwiseCase],
    corpus: &Corpus,
    base: &ScoreParams,
    k_values: &[usize],
    omega_values: &[f64],
    workers: usize,
) -> Result<Vec<SweepCell>> {
    if k_values.is_empty() || omega_values.is_empty() {
        return Err(AbeError::InvalidParam("sweep grids must be non-empty".into()));
    }
    for c in cases {
        check_case(c, corpus)?;
    }
    let mut cells = Vec::with_capacity(k_values.len() * omega_values.len());
    for &k in k_values {
        let params = ScoreParams { k, ..*base };
        params.validate()?;
        for &omega in omega_values {
            ScoreParams { omega, ..params }.validate()?;
        }
        let reports = run_indexed(workers, cases.len(), |i| {
            let c = &cases[i];
            Ok((
                corpus.score(&c.image_id, &c.positive_text_id, &params)?,
                corpus.score(&c.image_id, &c.negative_text_id, &params)?,
            ))
        })?;
        for &omega in omega_values {
            let scores = reports
                .iter()
                .map(|(p, n)| Ok((final_score(p.s_local, p.s_global, omega)?, final_score(n.s_local, n.s_global, omega)?)))
                .collect::<Result<Vec<_>>>()?;
            let cell_params = ScoreParams { omega, ..params };
            cells.push(SweepCell {
                k,
                omega,
                result: pairwise_from_scores(cases, &scores, Mode::Full, cell_params),
            });
        }
    }
    Ok(cells)
}

/// Text-to-image Recall@K for each `k` in `ks` (ascending).
///
/// Each query ranks the whole gallery by the mode's score, descending, ties
/// broken by image id.
pub fn retrieval_recall(
    set: &RetrievalSet,
    corpus: &Corpus,
    params: &ScoreParams,
    mode: Mode,
    ks: &[usize],
    workers: usize,
) -> Result<Vec<BenchResult>> {
    params.validate()?;
    if set.gallery.is_empty() {
        return Err(AbeError::InvalidParam("retrieval gallery is empty".into()));
    }
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AbeError::InvalidParam("recall cut-offs must be non-empty and strictly ascending".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > set.gallery.len()) {
        return Err(AbeError::InvalidK { k, n: set.gallery.len() });
    }
    let gallery_set: BTreeSet<&str> = set.gallery.iter().map(String::as_str).collect();
    if gallery_set.len() != set.gallery.len() {
        return Err(AbeError::InvalidParam("gallery lists an image twice".into()));
    }
    for id in &set.gallery {
        corpus.image(id)?;
    }
    for q in &set.queries {
        corpus.text(&q.text_id)?;
        if !q.gold_image_ids.iter().any(|g| gallery_set.contains(g.as_str())) {
            return Err(AbeError::InvalidParam(format!(
                "query `{}` has no ground-truth image in the gallery",
                q.text_id
            )));
        }
    }

    let ranked = run_indexed(workers, set.queries.len(), |qi| {
        let q = &set.queries[qi];
        let mut scored = set
            .gallery
            .iter()
            .map(|img| Ok((corpus.score_mode(img, &q.text_id, params, mode)?, img.as_str())))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let gold: BTreeSet<&str> = q.gold_image_ids.iter().map(String::as_str).collect();
        let rank = scored
            .iter()
            .position(|(_, id)| gold.contains(id))
            .expect("gold image checked to be in gallery")
            + 1;
        Ok(RetrievalRecord {
            text_id: q.text_id.clone(),
            gold_rank: rank,
            top_image_id: scored[0].1.to_string(),
        })
    })?;

    Ok(ks
        .iter()
        .map(|&k| {
            let correct = ranked.iter().filter(|r| r.gold_rank <= k).count();
            BenchResult {
                metric: format!("recall@{k}"),
                mode,
                params: *params,
                value: ratio(correct, ranked.len()),
                correct,
                total: ranked.len(),
                records: ranked.iter().cloned().map(ItemRecord::Retrieval).collect(),
            }
        })
        .collect())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AbeError::record(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Loads a JSON-lines case file.
pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<PairwiseCase>> {
    let path = path.as_ref();
    let cases: Vec<PairwiseCase> = read_jsonl(path)?;
    for (i, c) in cases.iter().enumerate() {
        if c.positive_text_id == c.negative_text_id {
            return Err(AbeError::record(path, i + 1, "positive and negative text ids are equal"));
        }
    }
    Ok(cases)
}

pub fn write_cases<W: Write>(mut w: W, cases: &[PairwiseCase]) -> Result<()> {
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads retrieval queries plus a gallery list (one image id per line).
/// Without a gallery file, `default_gallery` is used.
pub fn load_retrieval_set(
    queries: impl AsRef<Path>,
    gallery: Option<&Path>,
    default_gallery: impl IntoIterator<Item = String>,
) -> Result<RetrievalSet> {
    let queries: Vec<RetrievalQuery> = read_jsonl(queries.as_ref())?;
    let gallery = match gallery {
        Some(p) => std::fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => default_gallery.into_iter().collect(),
    };
    Ok(RetrievalSet { queries, gallery })
}

/// Summary CSV: one row per result.
pub fn write_summary_csv<W: Write>(mut w: W, results: &[BenchResult]) -> Result<()> {
    writeln!(w, "metric,mode,k,omega,p,include_special_tokens,value,correct,total")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{},{}",
            r.metric,
            r.mode,
            r.params.k,
            r.params.omega,
            r.params.p,
            r.params.include_special_tokens,
            r.value,
            r.correct,
            r.total
        )?;
    }
    Ok(())
}

/// Per-item records as JSON lines, each tagged with its metric and mode.
pub fn write_records_jsonl<W: Write>(mut w: W, results: &[BenchResult]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        metric: &'a str,
        mode: Mode,
        #[serde(flatten)]
        record: &'a ItemRecord,
    }
    for r in results {
        for record in &r.records {
            serde_json::to_writer(
                &mut w,
                &Line {
                    metric: &r.metric,
                    mode: r.mode,
                    record,
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Sweep grid as CSV.
pub fn write_sweep_csv<W: Write>(mut w: W, cells: &[SweepCell]) -> Result<()> {
    writeln!(w, "k,omega,p,mode,accuracy,correct,total")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{:.6},{},{}",
            c.k, c.omega, c.result.params.p, c.result.mode, c.result.value, c.result.correct, c.result.total
        )?;
    }
    Ok(())
}
