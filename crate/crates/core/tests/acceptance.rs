//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use abe_core::alignment::{aggregate_score, token_score};
use abe_core::bench::{
    ablation, pairwise_accuracy, retrieval_recall, sweep, write_records_jsonl, write_summary_csv, write_sweep_csv, Corpus,
    Mode, PairSource,
};
use abe_core::bundle::{load_concept_pool, load_images, load_phrase_table, load_texts};
use abe_core::caption::{load_pairs_file, resolve_token_spans, CaptionStructure};
use abe_core::embedding::{cosine, Matrix, SimilarityMatrix};
use abe_core::refine::{refine_encoding, PhraseKey, PhraseTable, RefinementParams};
use abe_core::scoring::{score_pair, RefinementResources, ScoreParams};
use abe_core::synthetic::{planted, toy, write_dataset, PlantedConfig, SyntheticDataset, COLORS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Oracle: full sort, sum the first K in sorted order, divide by K; then the
// plain mean of those values over unmasked rows, in row order.

fn oracle_token(row: &[f64], k: usize) -> f64 {
    let mut v = row.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let mut s = 0.0;
    for x in &v[..k] {
        s += x;
    }
    s / k as f64
}

fn oracle_aggregate(rows: &[Vec<f64>], mask: &[bool], k: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (row, &m) in rows.iter().zip(mask) {
        if m {
            s += oracle_token(row, k);
            n += 1;
        }
    }
    s / n as f64
}

const GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

/// Every vector of length `len` over `GRID`.
fn grid_vectors(len: usize) -> impl Iterator<Item = Vec<f64>> {
    let total = GRID.len().pow(len as u32);
    (0..total).map(move |mut code| {
        (0..len)
            .map(|_| {
                let v = GRID[code % GRID.len()];
                code /= GRID.len();
                v
            })
            .collect()
    })
}

fn compare(rows: &[Vec<f64>], mask: &[bool], k: usize) -> Result<(), String> {
    let sim = SimilarityMatrix::from_matrix(Matrix::from_rows(rows).map_err(|e| e.to_string())?);
    let got = aggregate_score(&sim, mask, k).map_err(|e| e.to_string())?;
    let want = oracle_aggregate(rows, mask, k);
    check(got.to_bits() == want.to_bits(), || {
        format!("rows {rows:?} mask {mask:?} k {k}: {got:e} vs oracle {want:e}")
    })
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut checked = 0usize;

    // Every row of up to 6 grid values, every K.
    for n in 1..=6 {
        for row in grid_vectors(n) {
            for k in 1..=n {
                compare(std::slice::from_ref(&row), &[true], k)?;
                checked += 1;
            }
        }
    }
    // Every matrix of up to 8 grid cells (M, N <= 6), every K, all-true mask
    // and every single-row mask.
    for m in 1..=6usize {
        for n in 1..=6usize {
            if m * n > 8 {
                continue;
            }
            for flat in grid_vectors(m * n) {
                let rows: Vec<Vec<f64>> = flat.chunks(n).map(<[f64]>::to_vec).collect();
                for k in 1..=n {
                    compare(&rows, &vec![true; m], k)?;
                    checked += 1;
                    if m > 1 {
                        for only in 0..m {
                            let mask: Vec<bool> = (0..m).map(|i| i == only).collect();
                            compare(&rows, &mask, k)?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    // 10,000 random matrices up to 12 x 20 with random masks; half use grid
    // values (many ties), half continuous values.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..10_000 {
        let m = rng.random_range(1..=12);
        let n = rng.random_range(1..=20);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if t % 2 == 0 {
                            GRID[rng.random_range(0..GRID.len())]
                        } else {
                            rng.random_range(-1.0..=1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        if !mask.iter().any(|&b| b) {
            mask[rng.random_range(0..m)] = true;
        }
        let k = rng.random_range(1..=n);
        compare(&rows, &mask, k)?;
        checked += 1;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} comparisons bit-equal in {elapsed:.2?}"))
}

fn pooling_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let scores: Vec<f64> = (1..=n).map(|k| token_score(&row, k).unwrap()).collect();
        violations += scores.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    }
    check(violations == 0, || format!("{violations} violations"))?;
    Ok("1000 rows, 0 violations".into())
}

fn corpus_of(ds: &SyntheticDataset) -> Corpus {
    let pairs: BTreeMap<String, CaptionStructure> =
        ds.structures.iter().map(|s| (s.caption_id.clone(), s.clone())).collect();
    Corpus::new(
        ds.images.clone(),
        ds.texts.clone(),
        PairSource::Parsed(pairs),
        Some(ds.resources.clone()),
    )
    .expect("synthetic corpus loads")
}

fn refinement_identities() -> Outcome {
    let ds = planted(&PlantedConfig { cases: 20, ..Default::default() }).map_err(|e| e.to_string())?;
    let corpus = corpus_of(&ds);
    let params = ScoreParams::default();

    // (a) zero-pair captions
    for case in &ds.cases {
        let text = corpus.text(&case.positive_text_id).unwrap();
        let empty = CaptionStructure::empty(text.id(), text.caption());
        let image = corpus.image(&case.image_id).unwrap();
        let r = score_pair(image, text, &empty, Some(&ds.resources), &params).map_err(|e| e.to_string())?;
        check(r.s_refine == r.s_base && r.delta == 0.0 && r.s_local == r.s_base, || {
            format!("(a) {}: {r:?}", text.id())
        })?;
    }

    // (b) no-op phrase table
    let pool = &ds.resources.pool;
    let mut noop = PhraseTable::new(pool.dim());
    for (key, _) in ds.resources.table.sorted_entries() {
        let base = pool.base_embedding(&key.object).unwrap().to_vec();
        noop.insert(PhraseKey::new(key.attribute.as_str(), key.object.as_str()), base)
            .map_err(|e| e.to_string())?;
    }
    for (structure, text) in corpus.structures() {
        let r = refine_encoding(text, structure, pool, &noop, RefinementParams { p: params.p })
            .map_err(|e| e.to_string())?;
        for (pair, trace) in structure.pairs.iter().zip(&r.pairs) {
            check(
                trace.binding.positive.iter().all(|&x| x == 0.0) && trace.binding.negative.iter().all(|&x| x == 0.0),
                || format!("(b) {}: non-zero binding vector", text.id()),
            )?;
            let obj = pair.obj_token_span.unwrap();
            for i in obj.start..obj.end {
                check(r.text.tokens().row(i) == text.tokens().row(i), || {
                    format!("(b) {}: object token {i} changed", text.id())
                })?;
            }
        }
    }

    // (c) omega = 1 and (d) omega = 0
    for case in &ds.cases {
        for text_id in [&case.positive_text_id, &case.negative_text_id] {
            let one = corpus
                .score(&case.image_id, text_id, &ScoreParams { omega: 1.0, ..params })
                .map_err(|e| e.to_string())?;
            check(one.s_final == one.s_global, || format!("(c) {text_id}: {one:?}"))?;
            let zero = corpus
                .score(&case.image_id, text_id, &ScoreParams { omega: 0.0, ..params })
                .map_err(|e| e.to_string())?;
            check(zero.s_final == zero.s_local, || format!("(d) {text_id}: {zero:?}"))?;
        }
    }
    Ok("(a) zero pairs, (b) no-op table, (c) omega=1, (d) omega=0 all exact".into())
}

fn hand_traced_fixture() -> Outcome {
    let t = toy();
    let structure = resolve_token_spans(&t.structure, &t.text).map_err(|e| e.to_string())?.structure;
    let r = score_pair(&t.image, &t.text, &structure, Some(&t.resources), &t.params).map_err(|e| e.to_string())?;

    // red = (1, 3), cube = (1, 1); patches e1, e2; K = 1.
    let s_base = (3.0 / 10f64.sqrt() + 1.0 / 2f64.sqrt()) / 2.0;
    // nearest concept to (1, 1) is cube; b+ = (1.5, 0) - (1, 0); b- = 0.
    // cube' = (1.5, 1), red' = (1, 3) + (1, 1) = (2, 4).
    let s_refine = (1.5 / 3.25f64.sqrt() + 4.0 / 20f64.sqrt()) / 2.0;
    let delta = (s_refine - s_base).abs();
    let s_local = s_refine + delta;
    let s_global = 4.0 / 5.0;
    let s_final = 0.7 * s_local + 0.3 * s_global;

    let fields = [
        ("s_base", r.s_base, s_base),
        ("s_refine", r.s_refine, s_refine),
        ("delta", r.delta, delta),
        ("s_local", r.s_local, s_local),
        ("s_global", r.s_global, s_global),
        ("s_final", r.s_final, s_final),
        ("omega", r.omega, 0.3),
    ];
    for (name, got, want) in fields {
        check((got - want).abs() <= 1e-9, || format!("{name}: {got} vs {want}"))?;
    }
    check(r.k == 1 && r.p == 1, || format!("k={} p={}", r.k, r.p))?;
    check(r.image_id == "toy-image" && r.text_id == "toy-text", || "ids".into())?;
    Ok(format!("all fields within 1e-9 (s_final = {:.6})", r.s_final))
}

fn planted_benchmark() -> Outcome {
    let start = Instant::now();
    let ds = planted(&PlantedConfig::default()).map_err(|e| e.to_string())?;
    check(ds.cases.len() == 100, || format!("{} cases", ds.cases.len()))?;

    // Attribute tokens are close (>= 0.9) to their own object's patches only.
    let per_obj = PlantedConfig::default().patches_per_object;
    for (case, image) in ds.cases.iter().zip(&ds.images) {
        let text = ds.texts.iter().find(|t| t.id() == case.positive_text_id).unwrap();
        let attrs: Vec<usize> = (0..text.num_tokens())
            .filter(|&i| COLORS.contains(&text.token_texts()[i].as_str()))
            .collect();
        for (obj, &row) in attrs.iter().enumerate() {
            for j in 0..image.num_patches() {
                let c = cosine(text.tokens().row(row), image.patches().row(j)).unwrap();
                let own = j / per_obj == obj && j < 2 * per_obj;
                check(own == (c >= 0.9), || {
                    format!("{}: attribute {obj} vs patch {j}: cos {c:.3}", text.id())
                })?;
            }
        }
    }

    let params = ScoreParams::default();
    let full = pairwise_accuracy(&ds.cases, &corpus_of(&ds), &params, Mode::Full, 4).map_err(|e| e.to_string())?;
    check(full.correct == 100, || format!("full mode {}/100", full.correct))?;

    let control_ds = planted(&PlantedConfig {
        shuffled: true,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let control = pairwise_accuracy(&control_ds.cases, &corpus_of(&control_ds), &params, Mode::Full, 4)
        .map_err(|e| e.to_string())?;
    check((0.4..=0.6).contains(&control.value), || format!("control {}", control.value))?;

    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "full {:.1}%, shuffled control {:.1}%, {elapsed:.2?}",
        full.value * 100.0,
        control.value * 100.0
    ))
}

fn harness_run(data: &Path, out: &Path, workers: usize) -> Result<(), String> {
    let e = |e: abe_core::AbeError| e.to_string();
    let resources = RefinementResources {
        pool: load_concept_pool(data.join("pool")).map_err(e)?,
        table: load_phrase_table(data.join("phrases")).map_err(e)?,
    };
    let corpus = Corpus::new(
        load_images(data.join("images")).map_err(e)?,
        load_texts(data.join("texts")).map_err(e)?,
        PairSource::Parsed(load_pairs_file(data.join("pairs.jsonl")).map_err(e)?),
        Some(resources),
    )
    .map_err(e)?;
    let cases = abe_core::bench::load_cases(data.join("cases.jsonl")).map_err(e)?;
    let set = abe_core::bench::load_retrieval_set(
        data.join("retrieval.jsonl"),
        Some(&data.join("gallery.txt")),
        Vec::new(),
    )
    .map_err(e)?;
    let params = ScoreParams::default();

    let mut results = ablation(&cases, &corpus, &params, workers).map_err(e)?;
    results.extend(retrieval_recall(&set, &corpus, &params, Mode::Full, &[1, 5, 10], workers).map_err(e)?);
    let cells = sweep(&cases, &corpus, &params, &[1, 5], &[0.0, 0.3, 1.0], workers).map_err(e)?;

    fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &results).map_err(e)?;
    fs::write(out.join("summary.csv"), &buf).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_records_jsonl(&mut buf, &results).map_err(e)?;
    fs::write(out.join("records.jsonl"), &buf).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &cells).map_err(e)?;
    fs::write(out.join("sweep.csv"), &buf).map_err(|e| e.to_string())?;
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let ds = planted(&PlantedConfig::default()).map_err(|e| e.to_string())?;
    write_dataset(&data, &ds).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("w1"), tmp.path().join("w8"));
    harness_run(&data, &a, 1)?;
    harness_run(&data, &b, 8)?;
    let mut bytes = 0;
    for name in ["summary.csv", "records.jsonl", "sweep.csv"] {
        let x = fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(name)).map_err(|e| e.to_string())?;
        check(x == y, || format!("{name} differs between 1 and 8 workers"))?;
        bytes += x.len();
    }
    Ok(format!("3 result files ({bytes} bytes) identical for 1 and 8 workers"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 6] = [
        ("oracle equivalence (top-K pooling)", oracle_equivalence),
        ("pooling monotonicity", pooling_monotonicity),
        ("refinement identities", refinement_identities),
        ("hand-traced fixture", hand_traced_fixture),
        ("synthetic planted-binding benchmark", planted_benchmark),
        ("determinism across worker counts", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
