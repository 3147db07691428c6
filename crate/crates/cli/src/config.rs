//! Run configuration: command-line flags over an optional TOML file over defaults.

use std::path::{Path, PathBuf};

use abe_core::scoring::ScoreParams;
use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,

    /// Image bundle directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Text bundle directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub texts: Option<PathBuf>,
    /// Parsed attribute-object pairs (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub pairs: Option<PathBuf>,
    /// Attribute lexicon for the fallback pair extractor.
    #[arg(long, global = true, value_name = "FILE")]
    pub lexicon: Option<PathBuf>,
    /// Use the built-in attribute lexicon when no pairs file is given.
    #[arg(long, global = true)]
    pub builtin_lexicon: bool,
    /// Concept-pool bundle directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub pool: Option<PathBuf>,
    /// Phrase-table bundle directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub phrases: Option<PathBuf>,
    /// Pairwise case file (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub cases: Option<PathBuf>,
    /// Retrieval query file (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub retrieval: Option<PathBuf>,
    /// Gallery image ids, one per line (default: every loaded image).
    #[arg(long, global = true, value_name = "FILE")]
    pub gallery: Option<PathBuf>,

    /// Patches pooled per token.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Weight of the global score in the fused score.
    #[arg(long, global = true)]
    pub omega: Option<f64>,
    /// Neighbour concepts per object.
    #[arg(long = "p-neighbors", global = true)]
    pub p_neighbors: Option<usize>,
    /// Aggregate over special and padding tokens too.
    #[arg(long, global = true)]
    pub include_special_tokens: bool,

    /// Worker threads for benchmarks.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Keep output files byte-identical across runs (omits timestamps).
    #[arg(long, global = true, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texts: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub builtin_lexicon: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phrases: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gallery: Option<PathBuf>,
    /// Not recorded in result summaries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub k: Option<usize>,
    pub omega: Option<f64>,
    pub p: Option<usize>,
    pub include_special_tokens: Option<bool>,
}

/// Contents of a config file; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    pub deterministic: Option<bool>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub params: ParamsConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub workers: usize,
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub params: ScoreParams,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let d = ScoreParams::default();
        let fp = &file.params;
        let params = ScoreParams {
            k: args.k.or(fp.k).unwrap_or(d.k),
            omega: args.omega.or(fp.omega).unwrap_or(d.omega),
            p: args.p_neighbors.or(fp.p).unwrap_or(d.p),
            include_special_tokens: args.include_special_tokens
                || fp.include_special_tokens.unwrap_or(d.include_special_tokens),
        };
        params.validate().map_err(|e| config_error(e.to_string()))?;

        let f = file.paths;
        let pick = |flag: &Option<PathBuf>, file: Option<PathBuf>| flag.clone().or(file);
        let paths = PathsConfig {
            images: pick(&args.images, f.images),
            texts: pick(&args.texts, f.texts),
            pairs: pick(&args.pairs, f.pairs),
            lexicon: pick(&args.lexicon, f.lexicon),
            builtin_lexicon: args.builtin_lexicon || f.builtin_lexicon,
            pool: pick(&args.pool, f.pool),
            phrases: pick(&args.phrases, f.phrases),
            cases: pick(&args.cases, f.cases),
            retrieval: pick(&args.retrieval, f.retrieval),
            gallery: pick(&args.gallery, f.gallery),
            out: pick(&args.out, f.out),
        };
        let workers = args.workers.or(file.workers).unwrap_or_else(default_workers);
        if workers == 0 {
            return Err(config_error("workers must be at least 1"));
        }
        Ok(RunConfig {
            workers,
            deterministic: args.deterministic.or(file.deterministic).unwrap_or(true),
            paths,
            params,
        })
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        let file = FileConfig {
            workers: Some(self.workers),
            deterministic: Some(self.deterministic),
            paths: self.paths.clone(),
            params: ParamsConfig {
                k: Some(self.params.k),
                omega: Some(self.params.omega),
                p: Some(self.params.p),
                include_special_tokens: Some(self.params.include_special_tokens),
            },
        };
        toml::to_string(&file).context("serialising config")
    }

    /// A path that the subcommand cannot run without.
    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
        let p = path
            .as_deref()
            .ok_or_else(|| config_error(format!("--{flag} is required")))?;
        if !p.exists() {
            return Err(config_error(format!("--{flag}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// An optional path; must exist when given.
    pub fn optional<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<Option<&'a Path>> {
        match path.as_deref() {
            Some(p) if !p.exists() => Err(config_error(format!("--{flag}: {} does not exist", p.display()))),
            other => Ok(other),
        }
    }
}
