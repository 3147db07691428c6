use std::collections::BTreeMap;

use abe_core::alignment::{aggregate_score, token_score, topk_indices};
use abe_core::bench::{pairwise_accuracy, retrieval_recall, Corpus, ItemRecord, Mode, PairSource, PairwiseCase};
use abe_core::caption::{extract_pairs_heuristic, resolve_token_spans, AttrObjPair, CaptionStructure, Lexicon};
use abe_core::embedding::{cosine, similarity_matrix, ImageEmbedding, Matrix, SimilarityMatrix, Span, TextEncoding, TokenMeta};
use abe_core::refine::{binding_vector, nearest_concepts, refine_encoding, ConceptPool, PhraseKey, PhraseTable, RefinementParams};
use abe_core::scoring::{final_score, score_pair, RefinementResources, ScoreParams};
use abe_core::synthetic::{planted, PlantedConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
            return v;
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..rows).map(|_| random_vec(rng, d)).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Caption `w0 w1 ...` with one token per word between start/end specials.
fn random_text(rng: &mut ChaCha8Rng, id: &str, words: &[String], d: usize) -> TextEncoding {
    let caption = words.join(" ");
    let mut spans = vec![Span::new(0, 0)];
    let mut at = 0;
    for w in words {
        spans.push(Span::new(at, at + w.len()));
        at += w.len() + 1;
    }
    spans.push(Span::new(0, 0));
    let mut texts = vec!["<start>".to_string()];
    texts.extend(words.iter().cloned());
    texts.push("<end>".into());
    let mut mask = vec![false];
    mask.extend(words.iter().map(|_| true));
    mask.push(false);
    TextEncoding::new(
        id,
        caption,
        random_vec(rng, d),
        random_matrix(rng, words.len() + 2, d),
        TokenMeta {
            texts,
            char_spans: spans,
            content_mask: mask,
        },
    )
    .unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, id: &str, n: usize, d: usize) -> ImageEmbedding {
    ImageEmbedding::new(id, random_vec(rng, d), random_matrix(rng, n, d)).unwrap()
}

struct Scene {
    text: TextEncoding,
    image: ImageEmbedding,
    structure: CaptionStructure,
    resources: RefinementResources,
}

const ATTRS: [&str; 4] = ["red", "blue", "big", "wooden"];
const OBJS: [&str; 4] = ["cube", "ball", "cone", "box"];

/// Caption of filler words with up to three attribute-object pairs at
/// random positions; a full phrase table over its attributes and the pool.
fn random_scene(seed: u64, d: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pairs = rng.random_range(0..=3);
    let mut words: Vec<String> = Vec::new();
    let mut pair_words = Vec::new();
    for i in 0..n_pairs {
        for _ in 0..rng.random_range(0..3) {
            words.push("and".into());
        }
        let a = ATTRS[rng.random_range(0..ATTRS.len())];
        let o = OBJS[(i + rng.random_range(0..2)) % OBJS.len()];
        pair_words.push((words.len(), a, o));
        words.push(a.into());
        words.push(o.into());
    }
    words.push("here".into());
    let text = random_text(&mut rng, "t", &words, d);
    let mut pairs = Vec::new();
    for (w, a, o) in pair_words {
        let a_span = text.char_spans()[w + 1];
        let o_span = text.char_spans()[w + 2];
        pairs.push(AttrObjPair::new(a, o, a_span, o_span));
    }
    let structure = CaptionStructure {
        caption_id: "t".into(),
        caption: text.caption().into(),
        pairs,
    };
    let structure = resolve_token_spans(&structure, &text).unwrap().structure;
    let concepts: Vec<String> = OBJS.iter().chain(["lamp", "cup"].iter()).map(|s| s.to_string()).collect();
    let pool = ConceptPool::new(concepts.clone(), random_matrix(&mut rng, concepts.len(), d)).unwrap();
    let mut table = PhraseTable::new(d);
    for a in ATTRS {
        for c in &concepts {
            table.insert(PhraseKey::new(a, c.as_str()), random_vec(&mut rng, d)).unwrap();
        }
    }
    let n = rng.random_range(5..12);
    Scene {
        image: random_image(&mut rng, "i", n, d),
        text,
        structure,
        resources: RefinementResources { pool, table },
    }
}

fn rotate(v: &[f64], p: usize, q: usize, theta: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    let (c, s) = (theta.cos(), theta.sin());
    out[p] = c * v[p] - s * v[q];
    out[q] = s * v[p] + c * v[q];
    out
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_invariant_under_rotation(seed in any::<u64>(), theta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..10);
        let (p, q) = (0, rng.random_range(1..d));
        let text = random_text(&mut rng, "t", &["a".into(), "b".into()], d);
        let image = random_image(&mut rng, "i", 4, d);
        let before = similarity_matrix(&text, &image).unwrap();
        let tokens: Vec<Vec<f64>> = text.tokens().iter_rows().map(|r| rotate(r, p, q, theta)).collect();
        let patches: Vec<Vec<f64>> = image.patches().iter_rows().map(|r| rotate(r, p, q, theta)).collect();
        let text_r = text.with_tokens(Matrix::from_rows(&tokens).unwrap()).unwrap();
        let image_r = ImageEmbedding::new("i", rotate(image.cls(), p, q, theta), Matrix::from_rows(&patches).unwrap()).unwrap();
        let after = similarity_matrix(&text_r, &image_r).unwrap();
        for (x, y) in before.values().as_slice().iter().zip(after.values().as_slice()) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn cosine_invariant_under_positive_scaling(seed in any::<u64>(), lambda in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..10);
        let (u, v) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
        let scaled: Vec<f64> = u.iter().map(|x| x * lambda).collect();
        let c = cosine(&u, &v).unwrap();
        prop_assert!((c - cosine(&scaled, &v).unwrap()).abs() <= 1e-6);
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
    }

    #[test]
    fn topk_matches_full_sort(row in row_strategy(), kf in 0.0f64..1.0) {
        let k = 1 + ((row.len() - 1) as f64 * kf) as usize;
        let got = topk_indices(&row, k).unwrap();
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        prop_assert_eq!(&got[..], &order[..k]);
        prop_assert!(topk_indices(&row, 0).is_err());
        prop_assert!(topk_indices(&row, row.len() + 1).is_err());
    }

    #[test]
    fn pooling_is_monotone_in_k(row in row_strategy()) {
        let scores: Vec<f64> = (1..=row.len()).map(|k| token_score(&row, k).unwrap()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(scores[0], max);
        for w in scores.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn patch_permutation_leaves_scores_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..12));
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| [-0.5, 0.0, 0.5, rng.random_range(-1.0..1.0)][rng.random_range(0..4)]).collect()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let k = rng.random_range(1..=n);
        let mask: Vec<bool> = (0..m).map(|i| i == 0 || rng.random_bool(0.5)).collect();
        let a = SimilarityMatrix::from_matrix(Matrix::from_rows(&rows).unwrap());
        let b = SimilarityMatrix::from_matrix(Matrix::from_rows(&permuted).unwrap());
        for i in 0..m {
            prop_assert_eq!(token_score(a.row(i), k).unwrap(), token_score(b.row(i), k).unwrap());
        }
        prop_assert_eq!(aggregate_score(&a, &mask, k).unwrap(), aggregate_score(&b, &mask, k).unwrap());
    }

    #[test]
    fn base_score_within_cosine_bounds(seed in any::<u64>()) {
        let scene = random_scene(seed, 6);
        let sim = similarity_matrix(&scene.text, &scene.image).unwrap();
        let s = aggregate_score(&sim, scene.text.content_mask(), 3.min(scene.image.num_patches())).unwrap();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&s));
    }

    #[test]
    fn nearest_concepts_match_sort_oracle(seed in any::<u64>(), p in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let pool = ConceptPool::new(names.clone(), random_matrix(&mut rng, 6, 4)).unwrap();
        let q = random_vec(&mut rng, 4);
        let mut order: Vec<usize> = (0..6).collect();
        let sims: Vec<f64> = (0..6).map(|i| cosine(&q, pool.embeddings().row(i)).unwrap()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let want: Vec<&str> = order[..p].iter().map(|&i| names[i].as_str()).collect();
        prop_assert_eq!(nearest_concepts(&q, &pool, p).unwrap(), want);
    }

    #[test]
    fn refinement_is_local(seed in any::<u64>()) {
        let s = random_scene(seed, 5);
        let r = refine_encoding(&s.text, &s.structure, &s.resources.pool, &s.resources.table, RefinementParams { p: 3 }).unwrap();
        let mut touched = vec![false; s.text.num_tokens()];
        for p in &s.structure.pairs {
            for span in [p.attr_token_span.unwrap(), p.obj_token_span.unwrap()] {
                touched[span.start..span.end].fill(true);
                prop_assert!(s.text.content_mask()[span.start..span.end].iter().all(|&m| m));
            }
        }
        for (i, &t) in touched.iter().enumerate() {
            if !t {
                prop_assert_eq!(r.text.tokens().row(i), s.text.tokens().row(i));
            }
        }
        prop_assert_eq!(r.text.eot(), s.text.eot());
        prop_assert_eq!(r.text.token_texts(), s.text.token_texts());
        prop_assert_eq!(r.text.char_spans(), s.text.char_spans());
        if s.structure.pairs.is_empty() {
            prop_assert_eq!(r.text.tokens(), s.text.tokens());
        }
    }

    #[test]
    fn binding_vector_is_linear_in_table(seed in any::<u64>(), lambda in -3.0f64..3.0) {
        prop_assume!(lambda.abs() > 1e-3);
        let s = random_scene(seed, 4);
        let pool = &s.resources.pool;
        let scaled_pool = ConceptPool::new(
            pool.concepts().to_vec(),
            Matrix::new(pool.len(), pool.dim(), pool.embeddings().as_slice().iter().map(|x| x * lambda).collect()).unwrap(),
        ).unwrap();
        let scaled_table = s.resources.table.scaled(lambda);
        let neighbors = ["cube", "lamp", "box"];
        let attrs: Vec<String> = vec!["red".into(), "big".into()];
        let b = binding_vector(&attrs, &neighbors, &s.resources.table, pool).unwrap();
        let bs = binding_vector(&attrs, &neighbors, &scaled_table, &scaled_pool).unwrap();
        for (x, y) in b.iter().zip(&bs) {
            prop_assert!((x * lambda - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        // The mean over an attribute set is the mean of the singleton vectors.
        let singles: Vec<Vec<f64>> = attrs.iter().map(|a| binding_vector(std::slice::from_ref(a), &neighbors, &s.resources.table, pool).unwrap()).collect();
        for (i, x) in b.iter().enumerate() {
            prop_assert!((x - (singles[0][i] + singles[1][i]) / 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn score_report_invariants(seed in any::<u64>(), omega in 0.0f64..=1.0) {
        let s = random_scene(seed, 5);
        let params = ScoreParams { omega, k: 3, p: 3, include_special_tokens: seed % 2 == 0 };
        let r = score_pair(&s.image, &s.text, &s.structure, Some(&s.resources), &params).unwrap();
        prop_assert!(r.delta >= 0.0);
        prop_assert_eq!(r.delta == 0.0, r.s_refine == r.s_base);
        prop_assert!((r.s_local - (r.s_refine + r.delta)).abs() <= 1e-12);
        prop_assert!((r.s_final - ((1.0 - omega) * r.s_local + omega * r.s_global)).abs() <= 1e-12);
        let again = score_pair(&s.image, &s.text, &s.structure, Some(&s.resources), &params).unwrap();
        prop_assert_eq!(&r, &again);
        let one = score_pair(&s.image, &s.text, &s.structure, Some(&s.resources), &ScoreParams { omega: 1.0, ..params }).unwrap();
        prop_assert_eq!(one.s_final, one.s_global);
        let zero = score_pair(&s.image, &s.text, &s.structure, Some(&s.resources), &ScoreParams { omega: 0.0, ..params }).unwrap();
        prop_assert_eq!(zero.s_final, zero.s_local);
    }

    #[test]
    fn final_score_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0, step in 0.0f64..1.0, omega in 0.01f64..0.99) {
        prop_assert!(final_score(a + step, b, omega).unwrap() >= final_score(a, b, omega).unwrap());
        prop_assert!(final_score(a, b + step, omega).unwrap() >= final_score(a, b, omega).unwrap());
    }

    #[test]
    fn negative_attributes_exclude_own(seed in any::<u64>()) {
        let s = random_scene(seed, 3);
        for i in 0..s.structure.pairs.len() {
            let neg = s.structure.negative_attributes(i);
            prop_assert!(!neg.contains(&s.structure.positive_attribute(i)));
            let mut dedup = neg.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), neg.len());
        }
    }

    #[test]
    fn resolution_is_idempotent(seed in any::<u64>()) {
        let s = random_scene(seed, 3);
        let again = resolve_token_spans(&s.structure, &s.text).unwrap();
        prop_assert_eq!(again.structure, s.structure);
        prop_assert_eq!(again.dropped, 0);
    }

    #[test]
    fn heuristic_recovers_templated_pairs(a1 in 0usize..4, o1 in 0usize..4, a2 in 0usize..4, o2 in 0usize..4) {
        let colors = ["red", "blue", "green", "yellow"];
        let shapes = ["cube", "sphere", "cylinder", "cone"];
        let caption = format!("the {} {} and the {} {}", colors[a1], shapes[o1], colors[a2], shapes[o2]);
        let s = extract_pairs_heuristic("c", &caption, &Lexicon::builtin());
        let got: Vec<(&str, &str)> = s.pairs.iter().map(|p| (p.attribute.as_str(), p.object.as_str())).collect();
        prop_assert_eq!(got, vec![(colors[a1], shapes[o1]), (colors[a2], shapes[o2])]);
        let chars: Vec<char> = caption.chars().collect();
        for p in &s.pairs {
            let word: String = chars[p.obj_char_span.start..p.obj_char_span.end].iter().collect();
            prop_assert_eq!(word, p.object.clone());
        }
    }
}

fn planted_corpus(cases: usize, seed: u64) -> (Corpus, Vec<PairwiseCase>, abe_core::bench::RetrievalSet) {
    let ds = planted(&PlantedConfig { cases, seed, ..Default::default() }).unwrap();
    let pairs: BTreeMap<String, CaptionStructure> = ds.structures.iter().map(|s| (s.caption_id.clone(), s.clone())).collect();
    let corpus = Corpus::new(ds.images, ds.texts, PairSource::Parsed(pairs), Some(ds.resources)).unwrap();
    (corpus, ds.cases, ds.retrieval)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let (corpus, _, set) = planted_corpus(12, seed);
        let ks: Vec<usize> = (1..=12).collect();
        for mode in Mode::ALL {
            let rs = retrieval_recall(&set, &corpus, &ScoreParams::default(), mode, &ks, 2).unwrap();
            for w in rs.windows(2) {
                prop_assert!(w[1].value >= w[0].value);
            }
            prop_assert_eq!(rs.last().unwrap().value, 1.0);
        }
    }

    #[test]
    fn accuracy_ignores_case_order(seed in any::<u64>()) {
        let (corpus, mut cases, _) = planted_corpus(10, seed);
        let params = ScoreParams::default();
        let before = pairwise_accuracy(&cases, &corpus, &params, Mode::Full, 3).unwrap();
        cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let after = pairwise_accuracy(&cases, &corpus, &params, Mode::Full, 3).unwrap();
        prop_assert_eq!(before.value, after.value);
        prop_assert_eq!(before.correct, after.correct);
        let positives = before.records.iter().filter(|r| matches!(r, ItemRecord::Pairwise(p) if p.margin > 0.0)).count();
        prop_assert_eq!(before.value, positives as f64 / before.total as f64);
    }

    #[test]
    fn global_only_ignores_local_parameters(seed in any::<u64>(), k in 1usize..=8, p in 1usize..=6, omega in 0.0f64..=1.0) {
        let (corpus, cases, _) = planted_corpus(8, seed);
        let base = pairwise_accuracy(&cases, &corpus, &ScoreParams::default(), Mode::GlobalOnly, 2).unwrap();
        let other = pairwise_accuracy(&cases, &corpus, &ScoreParams { k, p, omega, include_special_tokens: false }, Mode::GlobalOnly, 2).unwrap();
        prop_assert_eq!(base.correct, other.correct);
    }
}
