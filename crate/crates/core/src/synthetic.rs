//! Synthetic fixtures with known answers.
//!
//! [`toy`] is a two-dimensional image–caption pair small enough to score by
//! hand. [`planted`] builds a pairwise benchmark where every image shows two
//! coloured objects and the hard negative swaps the colours; only a scorer
//! that binds attributes to objects can separate the two captions.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bench::{write_cases, PairwiseCase, RetrievalQuery, RetrievalSet};
use crate::bundle::{write_concept_pool, write_images, write_phrase_table, write_texts};
use crate::caption::{write_pairs, AttrObjPair, CaptionStructure};
use crate::embedding::{norm, ImageEmbedding, Matrix, Span, TextEncoding, TokenMeta};
use crate::error::{AbeError, Result};
use crate::refine::{ConceptPool, PhraseKey, PhraseTable};
use crate::scoring::{RefinementResources, ScoreParams};

/// The hand-traced example: caption "red cube" against a two-patch image.
#[derive(Debug, Clone)]
pub struct Toy {
    pub image: ImageEmbedding,
    pub text: TextEncoding,
    /// Pairs with character spans only.
    pub structure: CaptionStructure,
    pub resources: RefinementResources,
    pub params: ScoreParams,
}

/// Builds the hand-traced example.
///
/// | quantity | value |
/// |---|---|
/// | tokens | `<start>`, `red` = (1, 3), `cube` = (1, 1), `<end>` |
/// | patches | (1, 0), (0, 1) |
/// | `[EOT]`, `[CLS]` | (1, 2), (2, 1) |
/// | concepts | `cube` = (1, 0), `ball` = (−1, 1) |
/// | phrases | `red cube` = (1.5, 0), `red ball` = (−1, 1.5) |
/// | parameters | K = 1, P = 1, ω = 0.3 |
pub fn toy() -> Toy {
    let image = ImageEmbedding::new(
        "toy-image",
        vec![2.0, 1.0],
        Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).expect("static matrix"),
    )
    .expect("static image");
    let caption = "red cube";
    let text = TextEncoding::new(
        "toy-text",
        caption,
        vec![1.0, 2.0],
        Matrix::from_rows(&[[0.3, -1.0], [1.0, 3.0], [1.0, 1.0], [-1.0, 0.2]]).expect("static matrix"),
        TokenMeta {
            texts: ["<start>", "red", "cube", "<end>"].map(String::from).to_vec(),
            char_spans: vec![Span::new(0, 0), Span::new(0, 3), Span::new(4, 8), Span::new(0, 0)],
            content_mask: vec![false, true, true, false],
        },
    )
    .expect("static text");
    let structure = CaptionStructure {
        caption_id: "toy-text".into(),
        caption: caption.into(),
        pairs: vec![AttrObjPair::new("red", "cube", Span::new(0, 3), Span::new(4, 8))],
    };
    let pool = ConceptPool::new(
        vec!["cube".into(), "ball".into()],
        Matrix::from_rows(&[[1.0, 0.0], [-1.0, 1.0]]).expect("static matrix"),
    )
    .expect("static pool");
    let mut table = PhraseTable::new(2);
    table.insert(PhraseKey::new("red", "cube"), vec![1.5, 0.0]).expect("static phrase");
    table.insert(PhraseKey::new("red", "ball"), vec![-1.0, 1.5]).expect("static phrase");
    Toy {
        image,
        text,
        structure,
        resources: RefinementResources { pool, table },
        params: ScoreParams {
            omega: 0.3,
            k: 1,
            p: 1,
            include_special_tokens: false,
        },
    }
}

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"];
pub const SHAPES: [&str; 8] = ["cube", "sphere", "cone", "cylinder", "torus", "pyramid", "ring", "star"];
pub const DISTRACTORS: [&str; 8] = ["chair", "table", "lamp", "bottle", "cup", "book", "clock", "shoe"];

/// Parameters of the planted-binding benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub dim: usize,
    pub cases: usize,
    pub patches_per_object: usize,
    pub background_patches: usize,
    /// Norm of the Gaussian perturbation added before normalising.
    pub noise: f64,
    /// Scale of the colour direction inside a phrase embedding.
    pub beta: f64,
    /// Swap the object colours in half of the images, breaking the link
    /// between caption and image bindings.
    pub shuffled: bool,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            dim: 64,
            cases: 100,
            patches_per_object: 5,
            background_patches: 6,
            noise: 0.1,
            beta: 0.5,
            shuffled: false,
            seed: 7,
        }
    }
}

/// A complete benchmark: embeddings, caption structures, resources, and cases.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<ImageEmbedding>,
    pub texts: Vec<TextEncoding>,
    /// Character-span pairs for every caption, in text order.
    pub structures: Vec<CaptionStructure>,
    pub resources: RefinementResources,
    pub cases: Vec<PairwiseCase>,
    pub retrieval: RetrievalSet,
    /// Per case: whether the image colours were swapped.
    pub swapped: Vec<bool>,
}

struct Gen {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Gen {
    fn gaussian(&mut self) -> Vec<f64> {
        (0..self.dim).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    fn unit(&mut self) -> Vec<f64> {
        normalized(self.gaussian())
    }

    /// `normalize(Σ parts + noise·u)` for a random unit `u`.
    fn noisy(&mut self, parts: &[&[f64]], noise: f64) -> Vec<f64> {
        let u = self.unit();
        let mut v: Vec<f64> = u.iter().map(|x| x * noise).collect();
        for p in parts {
            v.iter_mut().zip(*p).for_each(|(a, b)| *a += b);
        }
        normalized(v)
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// One caption word and its subword pieces.
fn pieces(word: &str) -> Vec<&str> {
    if word.len() > 6 {
        let mid = word.len() / 2;
        vec![&word[..mid], &word[mid..]]
    } else {
        vec![word]
    }
}

struct Vocab {
    colors: Vec<Vec<f64>>,
    shapes: Vec<Vec<f64>>,
    the: Vec<f64>,
    and: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
}

/// `the A1 O1 and the A2 O2`, where `attr_vecs[i]` is the contextual vector
/// of the i-th attribute word.
#[allow(clippy::too_many_arguments)]
fn caption_encoding(
    g: &mut Gen,
    vocab: &Vocab,
    id: &str,
    words: [(&str, &str); 2],
    shape_idx: [usize; 2],
    attr_vecs: [&[f64]; 2],
    eot: &[f64],
    noise: f64,
) -> Result<(TextEncoding, CaptionStructure)> {
    let mut caption = String::new();
    let mut rows: Vec<Vec<f64>> = vec![vocab.start.clone()];
    let mut meta = TokenMeta {
        texts: vec!["<start>".into()],
        char_spans: vec![Span::new(0, 0)],
        content_mask: vec![false],
    };
    let mut pairs = Vec::new();
    let mut push_word = |caption: &mut String, rows: &mut Vec<Vec<f64>>, word: &str, vecs: Vec<Vec<f64>>| {
        if !caption.is_empty() {
            caption.push(' ');
        }
        let start = caption.chars().count();
        let mut at = start;
        for (piece, v) in pieces(word).into_iter().zip(vecs) {
            let len = piece.chars().count();
            meta.texts.push(piece.to_string());
            meta.char_spans.push(Span::new(at, at + len));
            meta.content_mask.push(true);
            rows.push(v);
            at += len;
        }
        caption.push_str(word);
        Span::new(start, at)
    };
    for (slot, &(attr, shape)) in words.iter().enumerate() {
        if slot == 1 {
            push_word(&mut caption, &mut rows, "and", vec![vocab.and.clone()]);
        }
        push_word(&mut caption, &mut rows, "the", vec![vocab.the.clone()]);
        let a = push_word(&mut caption, &mut rows, attr, vec![attr_vecs[slot].to_vec()]);
        let s = &vocab.shapes[shape_idx[slot]];
        let n_pieces = pieces(shape).len();
        let obj_vecs = (0..n_pieces).map(|_| g.noisy(&[s], noise)).collect();
        let o = push_word(&mut caption, &mut rows, shape, obj_vecs);
        pairs.push(AttrObjPair::new(attr, shape, a, o));
    }
    rows.push(vocab.end.clone());
    meta.texts.push("<end>".into());
    meta.char_spans.push(Span::new(0, 0));
    meta.content_mask.push(false);

    let text = TextEncoding::new(id, caption.clone(), eot.to_vec(), Matrix::from_rows(&rows)?, meta)?;
    let structure = CaptionStructure {
        caption_id: id.into(),
        caption,
        pairs,
    };
    Ok((text, structure))
}

/// Generates the planted-binding benchmark.
///
/// Case `i` pairs image `img-i` with `pos-i` ("the A1 O1 and the A2 O2") and
/// `neg-i` ("the A2 O1 and the A1 O2"). The negative reuses the positive's
/// token vectors with the attribute rows exchanged and shares its `[EOT]`,
/// so global and unrefined local scores tie exactly.
pub fn planted(cfg: &PlantedConfig) -> Result<SyntheticDataset> {
    if cfg.dim < 2 || cfg.cases == 0 || cfg.patches_per_object == 0 {
        return Err(AbeError::InvalidParam(
            "planted benchmark needs dim >= 2, at least one case and one patch per object".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.beta > 0.0) {
        return Err(AbeError::InvalidParam("noise must be >= 0 and beta > 0".into()));
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        dim: cfg.dim,
    };
    let vocab = Vocab {
        colors: (0..COLORS.len()).map(|_| g.unit()).collect(),
        shapes: (0..SHAPES.len()).map(|_| g.unit()).collect(),
        the: g.unit(),
        and: g.unit(),
        start: g.unit(),
        end: g.unit(),
    };

    let mut concepts = Vec::new();
    let mut base_rows = Vec::new();
    for (name, s) in SHAPES.iter().zip(&vocab.shapes) {
        concepts.push(name.to_string());
        base_rows.push(g.noisy(&[s], cfg.noise));
    }
    for name in DISTRACTORS {
        concepts.push(name.to_string());
        base_rows.push(g.unit());
    }
    let mut table = PhraseTable::new(cfg.dim);
    for (color, cv) in COLORS.iter().zip(&vocab.colors) {
        for (concept, base) in concepts.iter().zip(&base_rows) {
            let v = base.iter().zip(cv).map(|(b, c)| b + cfg.beta * c).collect();
            table.insert(PhraseKey::new(*color, concept.as_str()), v)?;
        }
    }
    let pool = ConceptPool::new(concepts, Matrix::from_rows(&base_rows)?)?;

    let swapped_set: Vec<usize> = if cfg.shuffled {
        index::sample(&mut g.rng, cfg.cases, cfg.cases / 2).into_vec()
    } else {
        Vec::new()
    };
    let mut swapped = vec![false; cfg.cases];
    for i in swapped_set {
        swapped[i] = true;
    }

    let mut ds = SyntheticDataset {
        images: Vec::new(),
        texts: Vec::new(),
        structures: Vec::new(),
        resources: RefinementResources { pool, table },
        cases: Vec::new(),
        retrieval: RetrievalSet {
            queries: Vec::new(),
            gallery: Vec::new(),
        },
        swapped: swapped.clone(),
    };
    let width = cfg.cases.to_string().len().max(3);
    for (i, &swap) in swapped.iter().enumerate() {
        let ci = index::sample(&mut g.rng, COLORS.len(), 2).into_vec();
        let si = index::sample(&mut g.rng, SHAPES.len(), 2).into_vec();
        let (c, s) = (&vocab.colors, &vocab.shapes);

        // Image: which colour sits on which object region.
        let image_colors = if swap { [ci[1], ci[0]] } else { [ci[0], ci[1]] };
        let mut patches = Vec::new();
        for obj in 0..2 {
            for _ in 0..cfg.patches_per_object {
                patches.push(g.noisy(&[&c[image_colors[obj]], &s[si[obj]]], cfg.noise));
            }
        }
        for _ in 0..cfg.background_patches {
            patches.push(g.unit());
        }
        let cls = g.noisy(&[&c[ci[0]], &c[ci[1]], &s[si[0]], &s[si[1]]], cfg.noise);
        let image_id = format!("img-{i:0width$}");
        ds.images.push(ImageEmbedding::new(&image_id, cls, Matrix::from_rows(&patches)?)?);

        // Contextual attribute vectors carry the object they modify.
        let a0 = g.noisy(&[&c[ci[0]], &s[si[0]]], cfg.noise);
        let a1 = g.noisy(&[&c[ci[1]], &s[si[1]]], cfg.noise);
        let eot = g.noisy(&[&c[ci[0]], &c[ci[1]], &s[si[0]], &s[si[1]]], cfg.noise);

        let pos_id = format!("pos-{i:0width$}");
        let neg_id = format!("neg-{i:0width$}");
        let (pos, pos_s) = caption_encoding(
            &mut g,
            &vocab,
            &pos_id,
            [(COLORS[ci[0]], SHAPES[si[0]]), (COLORS[ci[1]], SHAPES[si[1]])],
            [si[0], si[1]],
            [&a0, &a1],
            &eot,
            cfg.noise,
        )?;
        // Same rows, attribute rows exchanged: identical token multiset.
        let a_rows: Vec<usize> = pos_s
            .pairs
            .iter()
            .map(|p| {
                pos.char_spans()
                    .iter()
                    .position(|sp| *sp == p.attr_char_span)
                    .expect("attribute is a single token")
            })
            .collect();
        let mut neg_rows: Vec<Vec<f64>> = pos.tokens().iter_rows().map(<[f64]>::to_vec).collect();
        neg_rows.swap(a_rows[0], a_rows[1]);
        let neg_caption_words = [(COLORS[ci[1]], SHAPES[si[0]]), (COLORS[ci[0]], SHAPES[si[1]])];
        let (neg_shape, neg_s) = caption_encoding(
            &mut g,
            &vocab,
            &neg_id,
            neg_caption_words,
            [si[0], si[1]],
            [&a1, &a0],
            &eot,
            cfg.noise,
        )?;
        let neg = neg_shape.with_tokens(Matrix::from_rows(&neg_rows)?)?;

        ds.cases.push(PairwiseCase {
            image_id: image_id.clone(),
            positive_text_id: pos_id.clone(),
            negative_text_id: neg_id,
        });
        ds.retrieval.queries.push(RetrievalQuery {
            text_id: pos_id,
            gold_image_ids: vec![image_id.clone()],
        });
        ds.retrieval.gallery.push(image_id);
        ds.texts.push(pos);
        ds.texts.push(neg);
        ds.structures.push(pos_s);
        ds.structures.push(neg_s);
    }
    Ok(ds)
}

/// Writes a dataset as bundles plus JSON-lines side files:
///
/// ```text
/// dir/images/  dir/texts/  dir/pool/  dir/phrases/
/// dir/pairs.jsonl  dir/cases.jsonl  dir/retrieval.jsonl  dir/gallery.txt
/// ```
pub fn write_dataset(dir: impl AsRef<Path>, ds: &SyntheticDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dim = ds.resources.pool.dim();
    write_images(dir.join("images"), dim, &ds.images)?;
    write_texts(dir.join("texts"), dim, &ds.texts)?;
    write_concept_pool(dir.join("pool"), &ds.resources.pool)?;
    write_phrase_table(dir.join("phrases"), &ds.resources.table)?;
    write_pairs(BufWriter::new(File::create(dir.join("pairs.jsonl"))?), &ds.structures)?;
    write_cases(BufWriter::new(File::create(dir.join("cases.jsonl"))?), &ds.cases)?;
    let mut retrieval = String::new();
    for q in &ds.retrieval.queries {
        retrieval.push_str(&serde_json::to_string(q)?);
        retrieval.push('\n');
    }
    fs::write(dir.join("retrieval.jsonl"), retrieval)?;
    let mut gallery = ds.retrieval.gallery.join("\n");
    gallery.push('\n');
    fs::write(dir.join("gallery.txt"), gallery)?;
    Ok(())
}
