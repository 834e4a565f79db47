//! Measured accuracy records: ingestion, validation, aggregation and synthesis.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitting::Observation;
use crate::model::{predict, Grid, MetadataScheme, PtqConfig, ScalingLawParams, TaskKind};

/// Exact CSV header.
pub const CSV_HEADER: [&str; 8] = [
    "model_family",
    "n_params",
    "w_base",
    "c_b",
    "g",
    "benchmark",
    "task_category",
    "accuracy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCategory {
    Memorization,
    Utilization,
}

impl TaskCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Memorization => "memorization",
            TaskCategory::Utilization => "utilization",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "memorization" | "km" => Some(TaskCategory::Memorization),
            "utilization" | "ku" => Some(TaskCategory::Utilization),
            _ => None,
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One benchmark score for one quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub model_family: String,
    pub n_params: f64,
    pub w_base: u32,
    pub c_b: u32,
    pub g: u32,
    pub benchmark: String,
    pub task_category: TaskCategory,
    pub accuracy: f64,
}

impl ExperimentRecord {
    /// Returns the offending column and message on failure.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(("accuracy", format!("{} is outside [0, 1]", self.accuracy)));
        }
        PtqConfig::new(self.n_params, self.w_base, self.c_b, self.g).map_err(|e| match e {
            Error::InvalidConfig { field, reason } => {
                let column = CSV_HEADER.iter().find(|c| **c == field).copied().unwrap_or("n_params");
                (column, reason)
            }
            other => ("n_params", other.to_string()),
        })?;
        Ok(())
    }

    pub fn config(&self, scheme: MetadataScheme) -> Result<PtqConfig> {
        PtqConfig::with_scheme(self.n_params, self.w_base, self.c_b, self.g, scheme)
    }

    fn key(&self) -> RecordKey {
        RecordKey {
            config: self.config_key(),
            benchmark: self.benchmark.clone(),
        }
    }

    fn config_key(&self) -> ConfigKey {
        ConfigKey {
            n_params: OrdF64(self.n_params),
            w_base: self.w_base,
            c_b: self.c_b,
            g: self.g,
            model_family: self.model_family.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl std::hash::Hash for OrdF64 {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state)
    }
}

/// Sorts by N, W_base, C_b, G, then family.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct ConfigKey {
    n_params: OrdF64,
    w_base: u32,
    c_b: u32,
    g: u32,
    model_family: String,
}

impl fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (N={}, W_base={}, C_b={}, G={})",
            self.model_family, self.n_params.0, self.w_base, self.c_b, self.g
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RecordKey {
    config: ConfigKey,
    benchmark: String,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} on {}", self.config, self.benchmark)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    /// Seconds since the Unix epoch.
    pub ingested_at: u64,
}

impl Provenance {
    pub fn now(source: Option<PathBuf>) -> Self {
        let ingested_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self { source, ingested_at }
    }
}

/// Validated, duplicate-free collection of records.
#[derive(Debug, Clone)]
pub struct ExperimentDataset {
    records: Vec<ExperimentRecord>,
    provenance: Provenance,
}

/// Datasets compare by records only; provenance is metadata.
impl PartialEq for ExperimentDataset {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl ExperimentDataset {
    pub fn from_records(records: Vec<ExperimentRecord>, provenance: Provenance) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            rec.check().map_err(|(column, message)| Error::Row {
                row,
                line: row as u64 + 1,
                column: column.into(),
                message,
            })?;
            let key = rec.key();
            if !seen.insert(key.clone()) {
                return Err(Error::Duplicate {
                    row,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { records, provenance })
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads CSV, or JSON lines when the extension is `.jsonl` / `.ndjson`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let provenance = Provenance::now(Some(path.to_path_buf()));
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => Self::read_jsonl(file, provenance),
            _ => Self::read_csv(file, provenance),
        }
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_csv(file, Provenance::now(Some(path.to_path_buf())))
    }

    pub fn read_csv<R: Read>(reader: R, provenance: Provenance) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Header {
                expected: CSV_HEADER.join(","),
                found: header.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i + 1;
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(row_no as u64 + 1);
            let err = |column: &str, message: String| Error::Row {
                row: row_no,
                line,
                column: column.to_string(),
                message,
            };
            let field = |idx: usize| row.get(idx).unwrap_or("").trim();
            let number = |idx: usize| -> Result<f64> {
                field(idx)
                    .parse::<f64>()
                    .map_err(|_| err(CSV_HEADER[idx], format!("`{}` is not a number", field(idx))))
            };
            let integer = |idx: usize| -> Result<u32> {
                field(idx)
                    .parse::<u32>()
                    .map_err(|_| err(CSV_HEADER[idx], format!("`{}` is not a non-negative integer", field(idx))))
            };
            let task_category = TaskCategory::parse(field(6)).ok_or_else(|| {
                err("task_category", format!("`{}` is not memorization or utilization", field(6)))
            })?;
            let rec = ExperimentRecord {
                model_family: field(0).to_string(),
                n_params: number(1)?,
                w_base: integer(2)?,
                c_b: integer(3)?,
                g: integer(4)?,
                benchmark: field(5).to_string(),
                task_category,
                accuracy: number(7)?,
            };
            rec.check().map_err(|(column, message)| err(column, message))?;
            records.push(rec);
        }
        Self::from_records(records, provenance)
    }

    pub fn read_jsonl<R: Read>(reader: R, provenance: Provenance) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = line.map_err(|e| Error::Parse {
                what: "jsonl".into(),
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExperimentRecord = serde_json::from_str(&line).map_err(|e| Error::Row {
                row: records.len() + 1,
                line: line_no,
                column: "-".into(),
                message: e.to_string(),
            })?;
            rec.check().map_err(|(column, message)| Error::Row {
                row: records.len() + 1,
                line: line_no,
                column: column.into(),
                message,
            })?;
            records.push(rec);
        }
        Self::from_records(records, provenance)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.model_family.clone(),
                r.n_params.to_string(),
                r.w_base.to_string(),
                r.c_b.to_string(),
                r.g.to_string(),
                r.benchmark.clone(),
                r.task_category.to_string(),
                r.accuracy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(writer, "{line}").map_err(|e| Error::Csv(e.into()))?;
        }
        Ok(())
    }
}

/// Which benchmarks probe which capability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkMap {
    pub memorization: Vec<String>,
    pub utilization: Vec<String>,
}

impl Default for BenchmarkMap {
    fn default() -> Self {
        Self {
            memorization: vec!["LAMA-ConceptNet".into(), "LAMA-SQuAD".into()],
            utilization: vec![
                "Hellaswag".into(),
                "Winogrande".into(),
                "ARC-e".into(),
                "ARC-c".into(),
            ],
        }
    }
}

impl BenchmarkMap {
    /// Memorization benchmarks first, then utilization.
    pub fn all(&self) -> impl Iterator<Item = (&str, TaskCategory)> {
        self.memorization
            .iter()
            .map(|b| (b.as_str(), TaskCategory::Memorization))
            .chain(self.utilization.iter().map(|b| (b.as_str(), TaskCategory::Utilization)))
    }

    pub fn category(&self, benchmark: &str) -> Option<TaskCategory> {
        self.all().find(|(b, _)| *b == benchmark).map(|(_, c)| c)
    }

    pub fn for_scope(&self, scope: Scope) -> Vec<String> {
        match scope {
            Scope::General6 => self.all().map(|(b, _)| b.to_string()).collect(),
            Scope::Memorization => self.memorization.clone(),
            Scope::Utilization => self.utilization.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    General6,
    Memorization,
    Utilization,
}

impl Scope {
    pub fn task(self) -> TaskKind {
        match self {
            Scope::General6 => TaskKind::General,
            Scope::Memorization => TaskKind::Memorization,
            Scope::Utilization => TaskKind::Utilization,
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "general6" | "general" => Ok(Scope::General6),
            "memorization" | "mem" => Ok(Scope::Memorization),
            "utilization" | "util" => Ok(Scope::Utilization),
            other => Err(Error::Parse {
                what: "scope".into(),
                message: format!("unknown scope `{other}` (expected general6, memorization, utilization)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub scope: Scope,
    /// Replaces the scope's benchmark list, e.g. for a four-task average.
    pub benchmarks: Option<Vec<String>>,
    pub scheme: MetadataScheme,
}

impl Aggregation {
    pub fn new(scope: Scope) -> Self {
        Self {
            scope,
            benchmarks: None,
            scheme: MetadataScheme::default(),
        }
    }
}

/// Unweighted mean accuracy per configuration over the scope's benchmarks,
/// sorted by `(N, W_base, C_b, G)`.
pub fn aggregate(ds: &ExperimentDataset, map: &BenchmarkMap, agg: &Aggregation) -> Result<Vec<Observation>> {
    aggregate_records(ds.records().iter(), map, agg)
}

pub(crate) fn aggregate_records<'a>(
    records: impl Iterator<Item = &'a ExperimentRecord>,
    map: &BenchmarkMap,
    agg: &Aggregation,
) -> Result<Vec<Observation>> {
    let required = agg
        .benchmarks
        .clone()
        .unwrap_or_else(|| map.for_scope(agg.scope));
    if required.is_empty() {
        return Err(Error::InvalidConfig {
            field: "benchmarks",
            reason: "aggregation needs at least one benchmark".into(),
        });
    }
    let mut by_config: BTreeMap<ConfigKey, (PtqConfig, BTreeMap<&str, f64>)> = BTreeMap::new();
    for rec in records {
        if let Some(expected) = map.category(&rec.benchmark) {
            if expected != rec.task_category {
                return Err(Error::CategoryMismatch {
                    benchmark: rec.benchmark.clone(),
                    found: rec.task_category.to_string(),
                    expected: expected.to_string(),
                });
            }
        }
        let cfg = rec.config(agg.scheme)?;
        by_config
            .entry(rec.config_key())
            .or_insert_with(|| (cfg, BTreeMap::new()))
            .1
            .insert(rec.benchmark.as_str(), rec.accuracy);
    }
    let task = agg.scope.task();
    let mut out = Vec::with_capacity(by_config.len());
    for (key, (cfg, scores)) in by_config {
        let mut sum = 0.0;
        for bench in &required {
            sum += *scores.get(bench.as_str()).ok_or_else(|| Error::MissingBenchmark {
                config: key.to_string(),
                benchmark: bench.clone(),
            })?;
        }
        out.push(Observation::new(cfg, task.clone(), sum / required.len() as f64));
    }
    Ok(out)
}

/// Stable hex digest of an observation list.
pub fn observations_fingerprint(observations: &[Observation]) -> String {
    let mut h = Sha256::new();
    for o in observations {
        h.update(o.cfg.n_params().to_bits().to_le_bytes());
        for v in [o.cfg.w_base(), o.cfg.c_b(), o.cfg.g(), o.cfg.scale_bits(), o.cfg.zero_point_bits()] {
            h.update(v.to_le_bytes());
        }
        h.update(o.task.label().as_bytes());
        h.update(o.accuracy.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub grid: Grid,
    pub noise_sigma: f64,
    pub seed: u64,
    pub benchmarks: BenchmarkMap,
    pub model_family: String,
    pub scheme: MetadataScheme,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid: Grid::published(),
            noise_sigma: 0.0,
            seed: 0,
            benchmarks: BenchmarkMap::default(),
            model_family: "synthetic".into(),
            scheme: MetadataScheme::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: ExperimentDataset,
    /// Rows whose noisy accuracy fell outside [0, 1] and was clamped.
    pub clamped_rows: usize,
}

/// Every benchmark of every grid configuration gets `predict(params, cfg) + ε`,
/// `ε ~ Normal(0, σ)`, clamped to [0, 1].
pub fn generate_synthetic(params: &ScalingLawParams, config: &SyntheticConfig) -> Result<SyntheticDataset> {
    if config.grid.is_empty() {
        return Err(Error::InvalidSpace("synthetic grid has an empty axis".into()));
    }
    if !(config.noise_sigma.is_finite() && config.noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig {
            field: "noise_sigma",
            reason: format!("must be finite and >= 0, got {}", config.noise_sigma),
        });
    }
    let noise = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut clamped_rows = 0;
    for cfg in config.grid.configs(config.scheme)? {
        let mean = predict(params, &cfg).map_err(|e| e.at_config(cfg))?;
        for (bench, category) in config.benchmarks.all() {
            let raw = if config.noise_sigma > 0.0 {
                mean + noise.sample(&mut rng)
            } else {
                mean
            };
            let accuracy = raw.clamp(0.0, 1.0);
            if accuracy != raw {
                clamped_rows += 1;
            }
            records.push(ExperimentRecord {
                model_family: config.model_family.clone(),
                n_params: cfg.n_params(),
                w_base: cfg.w_base(),
                c_b: cfg.c_b(),
                g: cfg.g(),
                benchmark: bench.to_string(),
                task_category: category,
                accuracy,
            });
        }
    }
    Ok(SyntheticDataset {
        dataset: ExperimentDataset::from_records(records, Provenance::now(None))?,
        clamped_rows,
    })
}
