//! Reader and writer for embedding bundles.
//!
//! A bundle is a directory holding `manifest.json` and one or more raw blob
//! files of little-endian `f32` values. The manifest declares the bundle
//! kind, the embedding dimension, and one record per item; every vector is
//! addressed as `{file, byte_offset}` and stored contiguously, row-major.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "kind": "image",
//!   "dim": 512,
//!   "dtype": "f32le",
//!   "items": [
//!     {"id": "img0", "n_patches": 196,
//!      "cls": {"file": "data.bin", "byte_offset": 0},
//!      "patches": {"file": "data.bin", "byte_offset": 2048}}
//!   ]
//! }
//! ```
//!
//! Loading checks that every byte range lies inside its blob, that declared
//! counts agree with the metadata arrays, and that no vector is zero or
//! non-finite.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{ImageEmbedding, Matrix, Span, TextEncoding, TokenMeta};
use crate::error::{AbeError, Result};
use crate::refine::{ConceptPool, PhraseKey, PhraseTable};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";
pub const MANIFEST: &str = "manifest.json";
const BLOB: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Image,
    Text,
    ConceptPool,
    PhraseTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: BundleKind,
    pub dim: usize,
    pub dtype: String,
    pub items: Vec<Value>,
    /// Free-form provenance (encoder revision, embedding space, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct ImageItem {
    id: String,
    n_patches: usize,
    cls: BlobRef,
    patches: BlobRef,
    #[serde(default)]
    patch_grid: Option<(usize, usize)>,
}

#[derive(Debug, Deserialize)]
struct TextItem {
    id: String,
    caption: String,
    #[serde(default)]
    n_tokens: Option<usize>,
    tokens: BlobRef,
    eot: BlobRef,
    token_texts: Vec<String>,
    char_spans: Vec<Span>,
    content_mask: Vec<bool>,
}

#[derive(Debug, Deserialize)]
struct ConceptItem {
    concept: String,
    vec: BlobRef,
}

#[derive(Debug, Deserialize)]
struct PhraseItem {
    attribute: Option<String>,
    object: String,
    vec: BlobRef,
}

/// An opened bundle directory with its blobs read lazily.
struct BundleReader {
    dir: PathBuf,
    manifest: Manifest,
    blobs: HashMap<String, Vec<u8>>,
}

impl BundleReader {
    fn open(dir: &Path, expected: BundleKind) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| AbeError::bundle(&path, format!("cannot read manifest: {e}")))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| AbeError::bundle(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(AbeError::bundle(
                &path,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        if manifest.kind != expected {
            return Err(AbeError::bundle(
                &path,
                format!("expected kind {expected:?}, found {:?}", manifest.kind),
            ));
        }
        if manifest.dtype != DTYPE_F32LE {
            return Err(AbeError::bundle(&path, format!("unsupported dtype `{}`", manifest.dtype)));
        }
        if manifest.dim == 0 {
            return Err(AbeError::bundle(&path, "dim must be positive"));
        }
        Ok(BundleReader {
            dir: dir.to_path_buf(),
            manifest,
            blobs: HashMap::new(),
        })
    }

    fn item<T: for<'de> Deserialize<'de>>(&self, index: usize) -> Result<T> {
        serde_json::from_value(self.manifest.items[index].clone()).map_err(|e| {
            AbeError::bundle(self.dir.join(MANIFEST), format!("item {index}: {e}"))
        })
    }

    fn blob(&mut self, name: &str) -> Result<&[u8]> {
        let rel = Path::new(name);
        if rel.is_absolute() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(AbeError::bundle(&self.dir, format!("blob path `{name}` escapes the bundle")));
        }
        if !self.blobs.contains_key(name) {
            let bytes = fs::read(self.dir.join(rel))
                .map_err(|e| AbeError::bundle(self.dir.join(rel), e.to_string()))?;
            self.blobs.insert(name.to_string(), bytes);
        }
        Ok(&self.blobs[name])
    }

    /// Reads `count` contiguous f32 values.
    fn read(&mut self, what: &str, at: &BlobRef, count: usize) -> Result<Vec<f64>> {
        let dir = self.dir.clone();
        let bytes = self.blob(&at.file)?;
        let start = usize::try_from(at.byte_offset).ok();
        let end = start.and_then(|s| count.checked_mul(4).and_then(|n| s.checked_add(n)));
        let range = match (start, end) {
            (Some(s), Some(e)) if e <= bytes.len() => s..e,
            _ => {
                return Err(AbeError::bundle(
                    dir.join(&at.file),
                    format!(
                        "{what}: {count} values at byte {} exceed blob size {}",
                        at.byte_offset,
                        bytes.len()
                    ),
                ))
            }
        };
        Ok(bytes[range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn dim(&self) -> usize {
        self.manifest.dim
    }

    fn len(&self) -> usize {
        self.manifest.items.len()
    }

    fn err(&self, reason: impl Into<String>) -> AbeError {
        AbeError::bundle(self.dir.join(MANIFEST), reason)
    }
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>, r: &BundleReader) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(r.err(format!("duplicate id `{id}`")));
        }
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| AbeError::bundle(&path, e.to_string()))
}

/// Loads every image of an image bundle, in manifest order.
pub fn load_images(dir: impl AsRef<Path>) -> Result<Vec<ImageEmbedding>> {
    let mut r = BundleReader::open(dir.as_ref(), BundleKind::Image)?;
    let d = r.dim();
    let mut out = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let item: ImageItem = r.item(i)?;
        if item.n_patches == 0 {
            return Err(r.err(format!("image `{}` declares zero patches", item.id)));
        }
        let cls = r.read(&format!("{} cls", item.id), &item.cls, d)?;
        let count = item
            .n_patches
            .checked_mul(d)
            .ok_or_else(|| r.err(format!("image `{}` patch count overflows", item.id)))?;
        let patches = r.read(&format!("{} patches", item.id), &item.patches, count)?;
        let mut img = ImageEmbedding::new(item.id, cls, Matrix::new(item.n_patches, d, patches)?)?;
        if let Some((rows, cols)) = item.patch_grid {
            img = img.with_patch_grid(rows, cols)?;
        }
        out.push(img);
    }
    check_unique(out.iter().map(|i| i.id()), &r)?;
    Ok(out)
}

/// Loads every caption of a text bundle, in manifest order.
pub fn load_texts(dir: impl AsRef<Path>) -> Result<Vec<TextEncoding>> {
    let mut r = BundleReader::open(dir.as_ref(), BundleKind::Text)?;
    let d = r.dim();
    let mut out = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let item: TextItem = r.item(i)?;
        let m = item.token_texts.len();
        if let Some(n) = item.n_tokens {
            if n != m {
                return Err(r.err(format!("text `{}` declares {n} tokens but lists {m}", item.id)));
            }
        }
        let tokens = r.read(&format!("{} tokens", item.id), &item.tokens, m * d)?;
        let eot = r.read(&format!("{} eot", item.id), &item.eot, d)?;
        out.push(TextEncoding::new(
            item.id,
            item.caption,
            eot,
            Matrix::new(m, d, tokens)?,
            TokenMeta {
                texts: item.token_texts,
                char_spans: item.char_spans,
                content_mask: item.content_mask,
            },
        )?);
    }
    check_unique(out.iter().map(|t| t.id()), &r)?;
    Ok(out)
}

pub fn load_concept_pool(dir: impl AsRef<Path>) -> Result<ConceptPool> {
    let mut r = BundleReader::open(dir.as_ref(), BundleKind::ConceptPool)?;
    let d = r.dim();
    let mut names = Vec::with_capacity(r.len());
    let mut data = Vec::with_capacity(r.len() * d);
    for i in 0..r.len() {
        let item: ConceptItem = r.item(i)?;
        data.extend(r.read(&item.concept, &item.vec, d)?);
        names.push(item.concept);
    }
    check_unique(names.iter().map(String::as_str), &r)?;
    let n = names.len();
    ConceptPool::new(names, Matrix::new(n, d, data)?)
}

/// Loads a phrase table. Entries with a `null` attribute are skipped; blank
/// embeddings come from the concept pool.
pub fn load_phrase_table(dir: impl AsRef<Path>) -> Result<PhraseTable> {
    let mut r = BundleReader::open(dir.as_ref(), BundleKind::PhraseTable)?;
    let mut table = PhraseTable::new(r.dim());
    let mut seen = HashSet::new();
    for i in 0..r.len() {
        let item: PhraseItem = r.item(i)?;
        let Some(attribute) = item.attribute else {
            continue;
        };
        let key = PhraseKey::new(attribute, item.object);
        let vec = r.read(&key.to_string(), &item.vec, r.dim())?;
        if !seen.insert(key.clone()) {
            return Err(r.err(format!("duplicate phrase entry {key}")));
        }
        table.insert(key, vec)?;
    }
    Ok(table)
}

/// Accumulates items into a single blob and writes the manifest on
/// [`finish`](BundleWriter::finish).
pub struct BundleWriter {
    dir: PathBuf,
    kind: BundleKind,
    dim: usize,
    blob: Vec<u8>,
    items: Vec<Value>,
    meta: Option<Value>,
}

impl BundleWriter {
    pub fn new(dir: impl AsRef<Path>, kind: BundleKind, dim: usize) -> Self {
        BundleWriter {
            dir: dir.as_ref().to_path_buf(),
            kind,
            dim,
            blob: Vec::new(),
            items: Vec::new(),
            meta: None,
        }
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = Some(meta);
        self
    }

    fn push(&mut self, values: &[f64]) -> BlobRef {
        let at = BlobRef {
            file: BLOB.to_string(),
            byte_offset: self.blob.len() as u64,
        };
        for &v in values {
            self.blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        at
    }

    fn check(&self, kind: BundleKind, dim: usize) -> Result<()> {
        if kind != self.kind {
            return Err(AbeError::InvalidParam(format!(
                "cannot add {kind:?} item to {:?} bundle",
                self.kind
            )));
        }
        if dim != self.dim {
            return Err(AbeError::DimensionMismatch {
                expected: self.dim,
                actual: dim,
            });
        }
        Ok(())
    }

    pub fn add_image(&mut self, img: &ImageEmbedding) -> Result<()> {
        self.check(BundleKind::Image, img.dim())?;
        let cls = self.push(img.cls());
        let patches = self.push(img.patches().as_slice());
        let mut item = serde_json::json!({
            "id": img.id(),
            "n_patches": img.num_patches(),
            "cls": cls,
            "patches": patches,
        });
        if let Some(grid) = img.patch_grid() {
            item["patch_grid"] = serde_json::json!(grid);
        }
        self.items.push(item);
        Ok(())
    }

    pub fn add_text(&mut self, text: &TextEncoding) -> Result<()> {
        self.check(BundleKind::Text, text.dim())?;
        let tokens = self.push(text.tokens().as_slice());
        let eot = self.push(text.eot());
        self.items.push(serde_json::json!({
            "id": text.id(),
            "caption": text.caption(),
            "n_tokens": text.num_tokens(),
            "tokens": tokens,
            "eot": eot,
            "token_texts": text.token_texts(),
            "char_spans": text.char_spans(),
            "content_mask": text.content_mask(),
        }));
        Ok(())
    }

    pub fn add_concept(&mut self, concept: &str, vec: &[f64]) -> Result<()> {
        self.check(BundleKind::ConceptPool, vec.len())?;
        let at = self.push(vec);
        self.items.push(serde_json::json!({"concept": concept, "vec": at}));
        Ok(())
    }

    pub fn add_phrase(&mut self, key: &PhraseKey, vec: &[f64]) -> Result<()> {
        self.check(BundleKind::PhraseTable, vec.len())?;
        let at = self.push(vec);
        self.items.push(serde_json::json!({
            "attribute": key.attribute,
            "object": key.object,
            "vec": at,
        }));
        Ok(())
    }

    /// Writes `data.bin` and `manifest.json`, each via a temporary file and
    /// a rename.
    pub fn finish(self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            dim: self.dim,
            dtype: DTYPE_F32LE.to_string(),
            items: self.items,
            meta: self.meta,
        };
        write_atomic(&self.dir.join(BLOB), &self.blob)?;
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST), &json)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_images<'a>(dir: impl AsRef<Path>, dim: usize, images: impl IntoIterator<Item = &'a ImageEmbedding>) -> Result<()> {
    let mut w = BundleWriter::new(dir, BundleKind::Image, dim);
    for img in images {
        w.add_image(img)?;
    }
    w.finish()
}

pub fn write_texts<'a>(dir: impl AsRef<Path>, dim: usize, texts: impl IntoIterator<Item = &'a TextEncoding>) -> Result<()> {
    let mut w = BundleWriter::new(dir, BundleKind::Text, dim);
    for t in texts {
        w.add_text(t)?;
    }
    w.finish()
}

pub fn write_concept_pool(dir: impl AsRef<Path>, pool: &ConceptPool) -> Result<()> {
    let mut w = BundleWriter::new(dir, BundleKind::ConceptPool, pool.dim());
    for (c, row) in pool.concepts().iter().zip(pool.embeddings().iter_rows()) {
        w.add_concept(c, row)?;
    }
    w.finish()
}

pub fn write_phrase_table(dir: impl AsRef<Path>, table: &PhraseTable) -> Result<()> {
    let mut w = BundleWriter::new(dir, BundleKind::PhraseTable, table.dim());
    for (k, v) in table.sorted_entries() {
        w.add_phrase(k, v)?;
    }
    w.finish()
}
