//! `abe`: attribute-binding rescoring over pre-exported embeddings.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 configuration error,
//! 3 missing phrase-table entries (the needed requests are printed first).

mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use abe_core::alignment::align_all;
use abe_core::bench::{
    ablation, load_cases, load_retrieval_set, pairwise_accuracy, retrieval_recall, sweep, write_records_jsonl,
    write_summary_csv, write_sweep_csv, BenchResult, Corpus, Mode, PairSource, SweepCell,
};
use abe_core::bundle::{load_concept_pool, load_images, load_phrase_table, load_texts};
use abe_core::caption::{load_pairs_file, Lexicon};
use abe_core::embedding::{similarity_matrix, TextEncoding};
use abe_core::refine::{phrase_requests, refine_encoding, write_phrase_requests};
use abe_core::scoring::RefinementResources;
use abe_core::synthetic::{planted, write_dataset, PlantedConfig};
use abe_core::AbeError;
use anyhow::{Context, Result};
use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;

use crate::config::{config_error, CommonArgs, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "abe", version, about = "Attribute-binding rescoring for CLIP-style embeddings")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score one image-caption pair and print the report as JSON.
    Score {
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        text_id: String,
    },
    /// Write the phrase-embedding requests needed to score the loaded captions.
    Requests,
    /// Run an evaluation protocol.
    Bench {
        #[command(subcommand)]
        protocol: Protocol,
    },
    /// Dump per-token alignments (and optionally the similarity matrix) as CSV.
    Inspect {
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        text_id: String,
        /// Use refined token embeddings.
        #[arg(long)]
        refined: bool,
        /// Also write the full token x patch similarity matrix here.
        #[arg(long, value_name = "FILE")]
        matrix: Option<PathBuf>,
    },
    /// Generate the synthetic planted-binding benchmark into --out.
    Synth {
        #[arg(long = "num-cases", default_value_t = 100)]
        num_cases: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Swap object colours in half of the images (control set).
        #[arg(long)]
        shuffled: bool,
    },
}

#[derive(Debug, Subcommand)]
enum Protocol {
    /// Positive vs. hard-negative caption accuracy.
    Pairwise {
        #[arg(long, default_value = "full")]
        mode: Mode,
    },
    /// Text-to-image Recall@K.
    Retrieval {
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
    },
    /// Full-mode pairwise accuracy over a K x omega grid.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,8,10")]
        k_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.3")]
        omega_values: Vec<f64>,
    },
    /// Pairwise accuracy under all four score modes.
    Ablation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(AbeError::MissingPhrases(keys)) = err.downcast_ref::<AbeError>() {
                let stdout = io::stdout();
                let _ = write_phrase_requests(stdout.lock(), keys);
            }
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<AbeError>() {
        Some(AbeError::MissingPhrases(_)) => 3,
        Some(AbeError::InvalidParam(_) | AbeError::InvalidK { .. } | AbeError::UnknownId { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::resolve(&cli.common)?;
    if cli.common.dump_config {
        print!("{}", rc.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(config_error("no subcommand given (see --help)"));
    };
    match command {
        Command::Score { image_id, text_id } => cmd_score(&rc, &image_id, &text_id),
        Command::Requests => cmd_requests(&rc),
        Command::Bench { protocol } => cmd_bench(&rc, protocol),
        Command::Inspect {
            image_id,
            text_id,
            refined,
            matrix,
        } => cmd_inspect(&rc, &image_id, &text_id, refined, matrix.as_deref()),
        Command::Synth {
            num_cases,
            seed,
            dim,
            shuffled,
        } => cmd_synth(&rc, num_cases, seed, dim, shuffled),
    }
}

fn pair_source(rc: &RunConfig) -> Result<PairSource> {
    let p = &rc.paths;
    if let Some(path) = rc.optional(&p.pairs, "pairs")? {
        return Ok(PairSource::Parsed(load_pairs_file(path)?));
    }
    if let Some(path) = rc.optional(&p.lexicon, "lexicon")? {
        return Ok(PairSource::Heuristic(Lexicon::load(path)?));
    }
    if p.builtin_lexicon {
        return Ok(PairSource::Heuristic(Lexicon::builtin()));
    }
    Ok(PairSource::None)
}

fn resources(rc: &RunConfig) -> Result<Option<RefinementResources>> {
    let pool = rc.optional(&rc.paths.pool, "pool")?;
    let phrases = rc.optional(&rc.paths.phrases, "phrases")?;
    match (pool, phrases) {
        (Some(pool), Some(phrases)) => Ok(Some(RefinementResources {
            pool: load_concept_pool(pool).context("loading concept pool")?,
            table: load_phrase_table(phrases).context("loading phrase table")?,
        })),
        (None, None) => Ok(None),
        _ => Err(config_error("--pool and --phrases must be given together")),
    }
}

fn load_corpus(rc: &RunConfig) -> Result<Corpus> {
    let images = load_images(rc.require(&rc.paths.images, "images")?).context("loading images")?;
    let texts = load_texts(rc.require(&rc.paths.texts, "texts")?).context("loading texts")?;
    let corpus = Corpus::new(images, texts, pair_source(rc)?, resources(rc)?)?;
    if corpus.dropped_pairs() > 0 {
        log::warn!("{} attribute-object pairs dropped during token resolution", corpus.dropped_pairs());
    }
    Ok(corpus)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_score(rc: &RunConfig, image_id: &str, text_id: &str) -> Result<()> {
    let corpus = load_corpus(rc)?;
    let report = corpus.score(image_id, text_id, &rc.params)?;
    let line = serde_json::to_string(&report)?;
    println!("{line}");
    if let Some(out) = &rc.paths.out {
        let mut w = create(out)?;
        writeln!(w, "{line}")?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_requests(rc: &RunConfig) -> Result<()> {
    let texts = load_texts(rc.require(&rc.paths.texts, "texts")?).context("loading texts")?;
    let pool = load_concept_pool(rc.require(&rc.paths.pool, "pool")?).context("loading concept pool")?;
    let corpus = Corpus::new(Vec::new(), texts, pair_source(rc)?, None)?;
    let keys = phrase_requests(corpus.structures(), &pool, rc.params.refinement())?;
    match &rc.paths.out {
        Some(out) => {
            let mut w = create(out)?;
            let n = write_phrase_requests(&mut w, &keys)?;
            w.flush()?;
            println!("{n} phrase requests written to {}", out.display());
        }
        None => {
            let n = write_phrase_requests(io::stdout().lock(), &keys)?;
            eprintln!("{n} phrase requests");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    metric: &'a str,
    mode: Mode,
    k: usize,
    omega: f64,
    p: usize,
    value: f64,
    correct: usize,
    total: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    protocol: &'a str,
    paths: config::PathsConfig,
    params: &'a abe_core::scoring::ScoreParams,
    results: Vec<SummaryRow<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at_unix: Option<u64>,
}

fn print_table(results: &[BenchResult]) {
    println!("{:<18} {:<12} {:>4} {:>6} {:>8} {:>9}", "metric", "mode", "k", "omega", "value", "correct");
    for r in results {
        println!(
            "{:<18} {:<12} {:>4} {:>6} {:>8.3} {:>4}/{:<4}",
            r.metric, r.mode, r.params.k, r.params.omega, r.value, r.correct, r.total
        );
    }
}

fn write_bench_outputs(rc: &RunConfig, protocol: &str, results: &[BenchResult], cells: Option<&[SweepCell]>) -> Result<()> {
    let Some(dir) = &rc.paths.out else {
        return Ok(());
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut w = create(&dir.join("summary.csv"))?;
    write_summary_csv(&mut w, results)?;
    w.flush()?;

    let mut w = create(&dir.join("records.jsonl"))?;
    write_records_jsonl(&mut w, results)?;
    w.flush()?;

    if let Some(cells) = cells {
        let mut w = create(&dir.join("sweep.csv"))?;
        write_sweep_csv(&mut w, cells)?;
        w.flush()?;
    }

    let generated_at_unix = if rc.deterministic {
        None
    } else {
        Some(SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
    };
    let summary = Summary {
        protocol,
        paths: config::PathsConfig {
            out: None,
            ..rc.paths.clone()
        },
        params: &rc.params,
        results: results
            .iter()
            .map(|r| SummaryRow {
                metric: &r.metric,
                mode: r.mode,
                k: r.params.k,
                omega: r.params.omega,
                p: r.params.p,
                value: r.value,
                correct: r.correct,
                total: r.total,
            })
            .collect(),
        generated_at_unix,
    };
    let mut w = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_bench(rc: &RunConfig, protocol: Protocol) -> Result<()> {
    let corpus = load_corpus(rc)?;
    let workers = rc.workers;
    let (name, results, cells) = match protocol {
        Protocol::Pairwise { mode } => {
            let cases = load_cases(rc.require(&rc.paths.cases, "cases")?)?;
            let r = pairwise_accuracy(&cases, &corpus, &rc.params, mode, workers)?;
            ("pairwise", vec![r], None)
        }
        Protocol::Retrieval { mode, ks } => {
            let queries = rc.require(&rc.paths.retrieval, "retrieval")?;
            let gallery = rc.optional(&rc.paths.gallery, "gallery")?;
            let set = load_retrieval_set(queries, gallery, corpus.image_ids().map(String::from))?;
            let r = retrieval_recall(&set, &corpus, &rc.params, mode, &ks, workers)?;
            ("retrieval", r, None)
        }
        Protocol::Sweep { k_values, omega_values } => {
            let cases = load_cases(rc.require(&rc.paths.cases, "cases")?)?;
            let cells = sweep(&cases, &corpus, &rc.params, &k_values, &omega_values, workers)?;
            let results = cells.iter().map(|c| c.result.clone()).collect();
            ("sweep", results, Some(cells))
        }
        Protocol::Ablation => {
            let cases = load_cases(rc.require(&rc.paths.cases, "cases")?)?;
            ("ablation", ablation(&cases, &corpus, &rc.params, workers)?, None)
        }
    };
    print_table(&results);
    write_bench_outputs(rc, name, &results, cells.as_deref())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn inspected_text(corpus: &Corpus, text_id: &str, refined: bool, rc: &RunConfig) -> Result<TextEncoding> {
    let text = corpus.text(text_id)?;
    let structure = corpus.structure(text_id)?;
    if !refined || structure.pairs.is_empty() {
        return Ok(text.clone());
    }
    let res = corpus
        .resources()
        .ok_or_else(|| config_error("--refined needs --pool and --phrases"))?;
    Ok(refine_encoding(text, structure, &res.pool, &res.table, rc.params.refinement())?.text)
}

fn cmd_inspect(rc: &RunConfig, image_id: &str, text_id: &str, refined: bool, matrix: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(rc)?;
    let image = corpus.image(image_id)?;
    let text = inspected_text(&corpus, text_id, refined, rc)?;
    let sim = similarity_matrix(&text, image)?;
    let alignments = align_all(&sim, rc.params.k)?;

    let mut out: Box<dyn Write> = match &rc.paths.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(out, "token_index,token_text,phi,patch_indices")?;
    for a in &alignments {
        let patches: Vec<String> = a.patch_indices.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{},{},{},{}",
            a.token_index,
            csv_field(&text.token_texts()[a.token_index]),
            a.token_score,
            patches.join(" ")
        )?;
    }
    out.flush()?;

    if let Some(path) = matrix {
        let mut w = create(path)?;
        let header: Vec<String> = (0..sim.num_patches()).map(|j| format!("p{j}")).collect();
        writeln!(w, "token_index,token_text,{}", header.join(","))?;
        for i in 0..sim.num_tokens() {
            let row: Vec<String> = sim.row(i).iter().map(f64::to_string).collect();
            writeln!(w, "{i},{},{}", csv_field(&text.token_texts()[i]), row.join(","))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_synth(rc: &RunConfig, cases: usize, seed: u64, dim: usize, shuffled: bool) -> Result<()> {
    let dir = rc
        .paths
        .out
        .as_deref()
        .ok_or_else(|| config_error("--out is required"))?;
    let cfg = PlantedConfig {
        dim,
        cases,
        seed,
        shuffled,
        ..Default::default()
    };
    let ds = planted(&cfg)?;
    write_dataset(dir, &ds)?;
    println!(
        "wrote {} images, {} captions, {} cases to {}",
        ds.images.len(),
        ds.texts.len(),
        ds.cases.len(),
        dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("red"), "red");
        assert_eq!(csv_field(","), "\",\"");
        assert_eq!(csv_field("a\"b"), "\"a\"\"b\"");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&config_error("x")), 2);
        assert_eq!(exit_code(&AbeError::MissingPhrases(vec![]).into()), 3);
        assert_eq!(exit_code(&AbeError::InvalidParam("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("boom")), 1);
        let wrapped = anyhow::Error::from(AbeError::MissingPhrases(vec![])).context("scoring");
        assert_eq!(exit_code(&wrapped), 3);
    }
}
