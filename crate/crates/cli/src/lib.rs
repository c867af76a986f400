//! Commands behind the `edge-impute` binary.
//!
//! Every command returns a [`CliError`] carrying a process exit code and a
//! one-line diagnostic, so the binary itself only prints and exits.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use edge_impute::config::{ExperimentConfig, FeedMode, GridSpec};
use edge_impute::correlation::MdMode;
use edge_impute::error::ImputeError;
use edge_impute::evaluation::{check_cell, compare_models_parallel, ComparisonTable};
use edge_impute::imputation::{SigmaMode, WgmWeighting};
use edge_impute::ingestion::{
    parse_trace, synth_trace, write_trace, SynthParams, Trace, TraceSchema, RNG_ALGORITHM,
};
use edge_impute::kv::{parse_num, KvDoc};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
/// Reserved for command-line usage errors (clap's own code).
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_PARSE: i32 = 4;
pub const EXIT_SCHEMA: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_DIGEST: i32 = 7;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_KV: &str = "metrics.txt";
pub const TIMING_CSV: &str = "timing.csv";
pub const MANIFEST: &str = "manifest.txt";

pub const CODE_VERSION: &str = concat!("edge-impute ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Classify a library error; `context` usually names the offending file.
    fn wrap(context: &str, err: ImputeError) -> Self {
        let code = match &err {
            ImputeError::Config(_) => EXIT_CONFIG,
            ImputeError::Parse { .. } | ImputeError::Duplicate { .. } => EXIT_PARSE,
            ImputeError::Schema(_)
            | ImputeError::Sequencing { .. }
            | ImputeError::DimensionOutOfRange { .. } => EXIT_SCHEMA,
            ImputeError::Io(_) => EXIT_IO,
            _ => EXIT_RUNTIME,
        };
        let message = if context.is_empty() {
            err.to_string()
        } else {
            format!("{context}: {err}")
        };
        Self::new(code, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Command-line settings that replace the corresponding config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub feed: Option<FeedMode>,
    pub sigma_mode: Option<SigmaMode>,
    pub wgm_weighting: Option<WgmWeighting>,
    pub md_mode: Option<MdMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(v) = self.feed {
            cfg.feed = v;
        }
        if let Some(v) = self.sigma_mode {
            cfg.sigma_mode = v;
        }
        if let Some(v) = self.wgm_weighting {
            cfg.wgm_weighting = v;
        }
        if let Some(v) = self.md_mode {
            cfg.md_mode = v;
        }
    }
}

fn read_bytes(what: &str, path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| {
        CliError::new(
            EXIT_IO,
            format!("cannot read {what} '{}': {e}", path.display()),
        )
    })
}

fn read_text(what: &str, path: &Path) -> CliResult<String> {
    let bytes = read_bytes(what, path)?;
    String::from_utf8(bytes).map_err(|_| {
        CliError::new(
            EXIT_PARSE,
            format!("{what} '{}' is not valid UTF-8", path.display()),
        )
    })
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot write '{}': {e}", path.display())))
}

fn load_schema(path: &Path) -> CliResult<TraceSchema> {
    let text = read_text("schema file", path)?;
    TraceSchema::parse(&text).map_err(|e| CliError::wrap(&path.display().to_string(), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// A trace file held in memory together with its digest.
struct Dataset {
    path: PathBuf,
    sha256: String,
    bytes: u64,
    trace: Trace,
}

impl Dataset {
    fn load(path: &Path, schema: &TraceSchema) -> CliResult<Self> {
        let raw = read_bytes("trace file", path)?;
        let trace = parse_trace(raw.as_slice(), schema)
            .map_err(|e| CliError::wrap(&path.display().to_string(), e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&raw),
            bytes: raw.len() as u64,
            trace,
        })
    }
}

/// Everything needed to repeat a run: the inputs' identity plus the full settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub rng_algorithm: String,
    pub dataset_path: PathBuf,
    pub dataset_sha256: String,
    pub dataset_bytes: u64,
    pub schema: TraceSchema,
    /// Holds the seeds too; an `impute` run is stored as a one-cell grid.
    pub grid: GridSpec,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        doc.push("command", &self.command);
        doc.push("code_version", &self.code_version);
        doc.push("rng_algorithm", &self.rng_algorithm);
        doc.push("dataset.path", self.dataset_path.display());
        doc.push("dataset.sha256", &self.dataset_sha256);
        doc.push("dataset.bytes", self.dataset_bytes);
        doc.push("started_unix_ms", self.started_unix_ms);
        doc.push("finished_unix_ms", self.finished_unix_ms);
        doc.push("outputs", self.outputs.join(", "));
        doc.extend_prefixed("schema", &self.schema.to_kv());
        doc.extend_prefixed("grid", &self.grid.to_kv());
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> edge_impute::Result<Self> {
        let outputs = edge_impute::kv::parse_list(doc.require("outputs")?);
        Ok(Self {
            command: doc.require("command")?.to_string(),
            code_version: doc.require("code_version")?.to_string(),
            rng_algorithm: doc.require("rng_algorithm")?.to_string(),
            dataset_path: PathBuf::from(doc.require("dataset.path")?),
            dataset_sha256: doc.require("dataset.sha256")?.to_string(),
            dataset_bytes: parse_num("dataset.bytes", doc.require("dataset.bytes")?)?,
            schema: TraceSchema::from_kv(&doc.section("schema"))?,
            grid: GridSpec::from_kv(&doc.section("grid"))?,
            started_unix_ms: parse_num("started_unix_ms", doc.require("started_unix_ms")?)?,
            finished_unix_ms: parse_num("finished_unix_ms", doc.require("finished_unix_ms")?)?,
            outputs,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text("manifest", path)?;
        let ctx = path.display().to_string();
        let doc = KvDoc::parse(&text).map_err(|e| CliError::wrap(&ctx, e))?;
        Self::from_kv(&doc).map_err(|e| CliError::wrap(&ctx, e))
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub table: ComparisonTable,
    pub manifest: RunManifest,
}

fn execute(
    command: &str,
    dataset: &Dataset,
    schema: TraceSchema,
    grid: GridSpec,
    out_dir: &Path,
    jobs: usize,
) -> CliResult<RunSummary> {
    let cells = grid.expand();
    for cell in &cells {
        check_cell(&dataset.trace, cell).map_err(|e| CliError::wrap("", e))?;
    }
    fs::create_dir_all(out_dir).map_err(|e| {
        CliError::new(
            EXIT_IO,
            format!("cannot create '{}': {e}", out_dir.display()),
        )
    })?;

    let started_unix_ms = unix_ms();
    let table =
        compare_models_parallel(&dataset.trace, &cells, jobs).map_err(|e| CliError::wrap("", e))?;
    let finished_unix_ms = unix_ms();

    let outputs = [
        (METRICS_CSV, table.metrics_csv()),
        (METRICS_KV, table.to_kv().to_text()),
        (TIMING_CSV, table.timing_csv()),
    ];
    let mut files = Vec::new();
    for (name, body) in &outputs {
        let path = out_dir.join(name);
        write_file(&path, body.as_bytes())?;
        files.push(path);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        code_version: CODE_VERSION.to_string(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        dataset_path: fs::canonicalize(&dataset.path).unwrap_or_else(|_| dataset.path.clone()),
        dataset_sha256: dataset.sha256.clone(),
        dataset_bytes: dataset.bytes,
        schema,
        grid,
        started_unix_ms,
        finished_unix_ms,
        outputs: outputs.iter().map(|(name, _)| name.to_string()).collect(),
    };
    let path = out_dir.join(MANIFEST);
    write_file(&path, manifest.to_kv().to_text().as_bytes())?;
    files.push(path);

    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        files,
        table,
        manifest,
    })
}

/// One experiment cell from a config file.
pub fn cmd_impute(
    trace_path: &Path,
    schema_path: &Path,
    config_path: &Path,
    overrides: &Overrides,
    out_dir: &Path,
) -> CliResult<RunSummary> {
    let schema = load_schema(schema_path)?;
    let text = read_text("config file", config_path)?;
    let ctx = config_path.display().to_string();
    let mut cfg = ExperimentConfig::parse(&text).map_err(|e| CliError::wrap(&ctx, e))?;
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| CliError::wrap(&ctx, e))?;
    let dataset = Dataset::load(trace_path, &schema)?;
    execute("impute", &dataset, schema, GridSpec::from(&cfg), out_dir, 1)
}

/// Every cell of a grid file; rows follow the grid's expansion order.
pub fn cmd_grid(
    trace_path: &Path,
    schema_path: &Path,
    grid_path: &Path,
    overrides: &Overrides,
    out_dir: &Path,
    jobs: usize,
) -> CliResult<RunSummary> {
    let schema = load_schema(schema_path)?;
    let text = read_text("grid file", grid_path)?;
    let ctx = grid_path.display().to_string();
    let mut grid = GridSpec::parse(&text).map_err(|e| CliError::wrap(&ctx, e))?;
    overrides.apply(&mut grid.base);
    let dataset = Dataset::load(trace_path, &schema)?;
    execute("grid", &dataset, schema, grid, out_dir, jobs)
}

/// Repeat a recorded run. The trace must hash to the recorded digest.
pub fn cmd_rerun(
    manifest_path: &Path,
    trace_path: Option<&Path>,
    out_dir: &Path,
    jobs: usize,
) -> CliResult<RunSummary> {
    let manifest = RunManifest::load(manifest_path)?;
    let path = trace_path.unwrap_or(&manifest.dataset_path);
    let dataset = Dataset::load(path, &manifest.schema)?;
    if dataset.sha256 != manifest.dataset_sha256 {
        return Err(CliError::new(
            EXIT_DIGEST,
            format!(
                "'{}' has sha256 {}, manifest records {}",
                path.display(),
                dataset.sha256,
                manifest.dataset_sha256
            ),
        ));
    }
    execute(
        &manifest.command,
        &dataset,
        manifest.schema,
        manifest.grid,
        out_dir,
        jobs,
    )
}

/// Write a synthetic trace in the canonical layout; returns the number of data lines.
pub fn cmd_synth(params: &SynthParams, out: &Path, schema_out: Option<&Path>) -> CliResult<usize> {
    let trace = synth_trace(params).map_err(|e| CliError::wrap("", e))?;
    let file = fs::File::create(out)
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot write '{}': {e}", out.display())))?;
    let mut writer = BufWriter::new(file);
    write_trace(&trace, &mut writer).map_err(|e| CliError::wrap(&out.display().to_string(), e))?;
    writer
        .flush()
        .map_err(|e| CliError::new(EXIT_IO, format!("cannot write '{}': {e}", out.display())))?;
    if let Some(path) = schema_out {
        write_file(path, trace.canonical_schema().to_kv().to_text().as_bytes())?;
    }
    Ok(trace.reports.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub devices: usize,
    pub dims: usize,
    pub reports: usize,
    pub missing_cells: usize,
    /// Grid cells checked against the trace, zero without a config.
    pub cells: usize,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ok: {} devices, {} dimensions, {} reports, {} missing values",
            self.devices, self.dims, self.reports, self.missing_cells
        )?;
        if self.cells > 0 {
            let noun = if self.cells == 1 {
                "cell fits"
            } else {
                "cells fit"
            };
            write!(f, ", {} grid {noun} the trace", self.cells)?;
        }
        Ok(())
    }
}

/// Parse the inputs and check the optional config or grid against the trace without running it.
pub fn cmd_validate(
    trace_path: &Path,
    schema_path: &Path,
    config_path: Option<&Path>,
) -> CliResult<ValidationReport> {
    let schema = load_schema(schema_path)?;
    let dataset = Dataset::load(trace_path, &schema)?;
    let trace = &dataset.trace;
    let mut cells = 0;
    if let Some(path) = config_path {
        let text = read_text("config file", path)?;
        let ctx = path.display().to_string();
        let grid = GridSpec::parse(&text).map_err(|e| CliError::wrap(&ctx, e))?;
        for cell in grid.expand() {
            check_cell(trace, &cell).map_err(|e| CliError::wrap(&ctx, e))?;
            cells += 1;
        }
    }
    Ok(ValidationReport {
        devices: trace.n_devices(),
        dims: trace.dims(),
        reports: trace.reports.len(),
        missing_cells: trace.reports.iter().map(|r| r.missing_dims().count()).sum(),
        cells,
    })
}
