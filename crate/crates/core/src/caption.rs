//! Attribute–object pairs extracted from captions.
//!
//! Pairs normally come from an external dependency parse (a JSON-lines pairs
//! file); [`extract_pairs_heuristic`] is a lexicon-driven fallback for
//! templated captions. Either way pairs carry character spans, which
//! [`resolve_token_spans`] maps onto the subword tokens of an encoding.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{Span, TextEncoding};
use crate::error::{AbeError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrObjPair {
    pub attribute: String,
    pub object: String,
    pub attr_char_span: Span,
    pub obj_char_span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr_token_span: Option<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obj_token_span: Option<Span>,
}

impl AttrObjPair {
    pub fn new(attribute: impl Into<String>, object: impl Into<String>, attr: Span, obj: Span) -> Self {
        AttrObjPair {
            attribute: attribute.into(),
            object: object.into(),
            attr_char_span: attr,
            obj_char_span: obj,
            attr_token_span: None,
            obj_token_span: None,
        }
    }

    /// Lowercased attribute, as used for phrase-table keys.
    pub fn attribute_key(&self) -> String {
        self.attribute.to_lowercase()
    }

    pub fn is_resolved(&self) -> bool {
        self.attr_token_span.is_some() && self.obj_token_span.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionStructure {
    pub caption_id: String,
    pub caption: String,
    pub pairs: Vec<AttrObjPair>,
}

impl CaptionStructure {
    pub fn empty(caption_id: impl Into<String>, caption: impl Into<String>) -> Self {
        CaptionStructure {
            caption_id: caption_id.into(),
            caption: caption.into(),
            pairs: Vec::new(),
        }
    }

    pub fn is_resolved(&self) -> bool {
        self.pairs.iter().all(AttrObjPair::is_resolved)
    }

    /// Target attribute of pair `index` (lowercased).
    pub fn positive_attribute(&self, index: usize) -> String {
        self.pairs[index].attribute_key()
    }

    /// In-sentence attributes that belong to other objects, deduplicated in
    /// order of first appearance.
    ///
    /// Pairs sharing this pair's object word contribute nothing, and the
    /// pair's own attribute never appears in its negative set.
    pub fn negative_attributes(&self, index: usize) -> Vec<String> {
        let own = &self.pairs[index];
        let own_obj = own.object.to_lowercase();
        let own_attr = own.attribute_key();
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .filter(|p| p.object.to_lowercase() != own_obj)
            .map(AttrObjPair::attribute_key)
            .filter(|a| *a != own_attr)
            .filter(|a| seen.insert(a.clone()))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct PairRecord {
    attribute: String,
    object: String,
    attr_char_span: Span,
    obj_char_span: Span,
}

#[derive(Debug, Deserialize)]
struct CaptionRecord {
    caption_id: String,
    caption: String,
    pairs: Vec<PairRecord>,
}

#[derive(Debug, Serialize)]
struct CaptionRecordOut<'a> {
    caption_id: &'a str,
    caption: &'a str,
    pairs: Vec<PairRecordOut<'a>>,
}

#[derive(Debug, Serialize)]
struct PairRecordOut<'a> {
    attribute: &'a str,
    object: &'a str,
    attr_char_span: Span,
    obj_char_span: Span,
}

fn char_slice(s: &str, span: Span) -> Option<String> {
    if span.end > s.chars().count() {
        return None;
    }
    Some(s.chars().skip(span.start).take(span.len()).collect())
}

fn validate_pair(caption: &str, p: &PairRecord) -> std::result::Result<(), String> {
    if p.attribute.trim().is_empty() || p.object.trim().is_empty() {
        return Err("empty attribute or object".into());
    }
    if p.attribute.trim() == p.object.trim() {
        return Err(format!("attribute equals object (`{}`)", p.attribute));
    }
    for (word, span, what) in [
        (&p.attribute, p.attr_char_span, "attr_char_span"),
        (&p.object, p.obj_char_span, "obj_char_span"),
    ] {
        if span.is_empty() {
            return Err(format!("{what} {span} is empty"));
        }
        match char_slice(caption, span) {
            None => {
                return Err(format!(
                    "{what} {span} exceeds caption length {}",
                    caption.chars().count()
                ))
            }
            Some(text) if text != *word => {
                return Err(format!("{what} {span} covers `{text}`, expected `{word}`"))
            }
            Some(_) => {}
        }
    }
    if p.attr_char_span.intersects(&p.obj_char_span) {
        return Err("attribute and object spans overlap".into());
    }
    Ok(())
}

/// Loads a JSON-lines pairs file, validating every character span against
/// its caption. Token spans are left unresolved.
pub fn load_pairs_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, CaptionStructure>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord =
            serde_json::from_str(&line).map_err(|e| AbeError::record(path, lineno, e.to_string()))?;
        let mut pairs = Vec::with_capacity(rec.pairs.len());
        for p in &rec.pairs {
            validate_pair(&rec.caption, p).map_err(|reason| AbeError::record(path, lineno, reason))?;
            pairs.push(AttrObjPair::new(
                p.attribute.clone(),
                p.object.clone(),
                p.attr_char_span,
                p.obj_char_span,
            ));
        }
        let structure = CaptionStructure {
            caption_id: rec.caption_id.clone(),
            caption: rec.caption,
            pairs,
        };
        if out.insert(rec.caption_id.clone(), structure).is_some() {
            return Err(AbeError::record(
                path,
                lineno,
                format!("duplicate caption_id `{}`", rec.caption_id),
            ));
        }
    }
    Ok(out)
}

/// Writes structures in the pairs-file format, in iteration order.
pub fn write_pairs<'a, W: Write>(
    mut w: W,
    structures: impl IntoIterator<Item = &'a CaptionStructure>,
) -> Result<()> {
    for s in structures {
        let rec = CaptionRecordOut {
            caption_id: &s.caption_id,
            caption: &s.caption,
            pairs: s
                .pairs
                .iter()
                .map(|p| PairRecordOut {
                    attribute: &p.attribute,
                    object: &p.object,
                    attr_char_span: p.attr_char_span,
                    obj_char_span: p.obj_char_span,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Set of known attribute words.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: HashSet<String>,
}

const BUILTIN_LEXICON: &str = include_str!("../data/attributes.txt");

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "on", "in", "at", "to", "with", "by", "for", "from",
    "into", "onto", "over", "under", "near", "next", "behind", "beside", "above", "below", "is",
    "are", "was", "were", "be", "been", "has", "have", "this", "that", "these", "those", "its",
    "their", "his", "her", "some", "there", "while", "as", "it", "he", "she", "they", "who",
    "which", "sitting", "standing", "holding", "two", "three", "one",
];

impl Lexicon {
    /// Parses one word per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_lowercase)
            .collect();
        Lexicon { words }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    /// The lexicon shipped with the crate (colors, sizes, materials, states).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON)
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Lexicon {
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Word {
    text: String,
    span: Span,
    /// Only whitespace separates this word from the previous one.
    joined: bool,
}

fn split_words(caption: &str) -> Vec<Word> {
    let chars: Vec<char> = caption.chars().collect();
    let is_inner = |i: usize| {
        matches!(chars[i], '-' | '\'')
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_alphabetic()
            && chars[i + 1].is_alphabetic()
    };
    let mut words = Vec::new();
    let mut i = 0;
    let mut gap_is_space = true;
    while i < chars.len() {
        if chars[i].is_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_alphabetic() || is_inner(i)) {
                i += 1;
            }
            words.push(Word {
                text: chars[start..i].iter().collect(),
                span: Span::new(start, i),
                joined: gap_is_space,
            });
            gap_is_space = true;
        } else {
            if !chars[i].is_whitespace() {
                gap_is_space = false;
            }
            i += 1;
        }
    }
    words
}

const MAX_OBJECT_WORDS: usize = 3;

/// Lexicon-driven pair extraction.
///
/// Each lexicon word followed by a run of one to three plain words (not in
/// the lexicon, not stopwords, separated only by whitespace) yields a pair;
/// the run becomes the object. Matches are taken left to right and a word
/// consumed by one pair is never reused.
///
/// ```
/// use abe_core::caption::{extract_pairs_heuristic, Lexicon};
/// let s = extract_pairs_heuristic("c0", "a green vintage car", &Lexicon::builtin());
/// assert_eq!(s.pairs[0].attribute, "green");
/// assert_eq!(s.pairs[0].object, "vintage car");
/// ```
pub fn extract_pairs_heuristic(caption_id: &str, caption: &str, lexicon: &Lexicon) -> CaptionStructure {
    let words = split_words(caption);
    let stop: HashSet<&str> = STOPWORDS.iter().copied().collect();
    let is_noun = |w: &Word| {
        let lower = w.text.to_lowercase();
        !lexicon.contains(&lower) && !stop.contains(lower.as_str())
    };

    let mut pairs = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if !lexicon.contains(&words[i].text) {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < words.len() && end - i <= MAX_OBJECT_WORDS && words[end].joined && is_noun(&words[end]) {
            end += 1;
        }
        if end == i + 1 {
            i += 1;
            continue;
        }
        let run = &words[i + 1..end];
        let obj_span = Span::new(run[0].span.start, run[run.len() - 1].span.end);
        let object: String = caption.chars().skip(obj_span.start).take(obj_span.len()).collect();
        pairs.push(AttrObjPair::new(words[i].text.clone(), object, words[i].span, obj_span));
        i = end;
    }
    CaptionStructure {
        caption_id: caption_id.to_string(),
        caption: caption.to_string(),
        pairs,
    }
}

/// Outcome of mapping character spans onto token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub structure: CaptionStructure,
    /// Pairs removed because they fell outside the encoded window or could
    /// not be mapped onto disjoint content-token intervals.
    pub dropped: usize,
}

fn cover(span: Span, text: &TextEncoding, encoded_end: usize) -> Option<Span> {
    if span.end > encoded_end {
        return None;
    }
    let hits: Vec<usize> = text
        .char_spans()
        .iter()
        .zip(text.content_mask())
        .enumerate()
        .filter(|(_, (s, &m))| m && s.intersects(&span))
        .map(|(i, _)| i)
        .collect();
    let (&first, &last) = (hits.first()?, hits.last()?);
    let interval = Span::new(first, last + 1);
    if (first..=last).all(|i| text.content_mask()[i]) {
        Some(interval)
    } else {
        None
    }
}

/// Maps every pair's character spans to minimal covering token intervals.
///
/// Pairs that cannot be mapped (truncated captions, overlapping intervals)
/// are dropped and counted. Re-running on the output changes nothing.
pub fn resolve_token_spans(structure: &CaptionStructure, text: &TextEncoding) -> Result<Resolution> {
    if structure.caption != text.caption() {
        return Err(AbeError::CaptionMismatch {
            id: structure.caption_id.clone(),
        });
    }
    let encoded_end = text
        .char_spans()
        .iter()
        .zip(text.content_mask())
        .filter(|(_, &m)| m)
        .map(|(s, _)| s.end)
        .max()
        .unwrap_or(0);

    let mut pairs = Vec::with_capacity(structure.pairs.len());
    let mut dropped = 0;
    for p in &structure.pairs {
        let attr = cover(p.attr_char_span, text, encoded_end);
        let obj = cover(p.obj_char_span, text, encoded_end);
        match (attr, obj) {
            (Some(a), Some(o)) if !a.intersects(&o) => pairs.push(AttrObjPair {
                attr_token_span: Some(a),
                obj_token_span: Some(o),
                ..p.clone()
            }),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "caption `{}`: dropped {dropped} of {} pairs during token alignment",
            structure.caption_id,
            structure.pairs.len()
        );
    }
    Ok(Resolution {
        structure: CaptionStructure {
            pairs,
            ..structure.clone()
        },
        dropped,
    })
}
