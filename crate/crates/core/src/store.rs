//! On-disk experiment records: `<root>/<id>/record.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algorithms::AlgorithmKind;
use crate::engine::{MetricsRow, RunConfig, RunObserver, RunStatus};

pub const SCHEMA_VERSION: u32 = 1;
const RECORD_FILE: &str = "record.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {path} is corrupt: {reason}")]
    RecordCorrupt { path: PathBuf, reason: String },
    #[error("no experiment with id `{0}`")]
    NotFound(String),
    #[error("invalid experiment id `{0}`")]
    InvalidId(String),
    #[error("record schema version {found} is newer than supported version {SCHEMA_VERSION}")]
    UnsupportedSchema { found: u32 },
    #[error("{0}")]
    Export(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub config: RunConfig,
    pub config_hash: String,
    pub status: RunStatus,
    /// Metrics at the starting point, before any round.
    #[serde(default)]
    pub initial: Option<MetricsRow>,
    pub rows: Vec<MetricsRow>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn new(id: impl Into<String>, config: RunConfig) -> Self {
        ExperimentRecord {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            created_at: Utc::now(),
            config_hash: config_hash(&config),
            group: config.group.clone(),
            comment: config.comment.clone(),
            config,
            status: RunStatus::Pending,
            initial: None,
            rows: Vec::new(),
            error: None,
        }
    }

    /// Rows with `round > since`.
    pub fn rows_since(&self, since: usize) -> &[MetricsRow] {
        let start = self.rows.partition_point(|r| r.round <= since);
        &self.rows[start..]
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.rows.windows(2).any(|w| w[0].round >= w[1].round) {
            return Err("rows are not strictly increasing in round".into());
        }
        Ok(())
    }
}

/// Key-sorted JSON of the configuration.
pub fn canonical_json(config: &RunConfig) -> String {
    // serde_json's default map is ordered, so going through Value sorts keys.
    let value = serde_json::to_value(config).expect("config serializes");
    serde_json::to_string(&value).expect("value serializes")
}

pub fn config_hash(config: &RunConfig) -> String {
    hex::encode(Sha256::digest(canonical_json(config).as_bytes()))
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ListFilter {
    pub group: Option<String>,
    pub algorithm: Option<AlgorithmKind>,
    pub status: Option<RunStatus>,
}

impl ListFilter {
    fn matches(&self, r: &ExperimentRecord) -> bool {
        self.group.as_ref().is_none_or(|g| r.group.as_ref() == Some(g))
            && self.algorithm.is_none_or(|a| r.config.algorithm == a)
            && self.status.is_none_or(|s| r.status == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub status: RunStatus,
    pub algorithm: AlgorithmKind,
    pub group: Option<String>,
    pub comment: Option<String>,
    pub rounds: usize,
    pub rounds_done: usize,
    pub config_hash: String,
}

impl From<&ExperimentRecord> for RecordSummary {
    fn from(r: &ExperimentRecord) -> Self {
        RecordSummary {
            id: r.id.clone(),
            created_at: r.created_at,
            status: r.status,
            algorithm: r.config.algorithm,
            group: r.group.clone(),
            comment: r.comment.clone(),
            rounds: r.config.rounds,
            rounds_done: r.rows.last().map_or(0, |row| row.round),
            config_hash: r.config_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XAxis {
    Rounds,
    Bits,
    OracleCalls,
    WallClock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YAxis {
    F,
    GradNorm,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

macro_rules! keyword_enum {
    ($ty:ident { $($name:literal => $variant:ident),* $(,)? }) => {
        impl $ty {
            pub fn name(&self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(format!(
                        "unknown {} `{s}` (expected one of {})",
                        stringify!($ty),
                        [$($name),*].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(XAxis { "rounds" => Rounds, "bits" => Bits, "oracle_calls" => OracleCalls, "wall_clock" => WallClock });
keyword_enum!(YAxis { "f" => F, "grad_norm" => GradNorm, "loss" => Loss });
keyword_enum!(Scale { "linear" => Linear, "log" => Log });

#[derive(Debug, Clone, Copy, PartialEq)]
enum XValue {
    Int(u64),
    Real(f64),
}

impl XValue {
    fn key(&self) -> f64 {
        match *self {
            XValue::Int(v) => v as f64,
            XValue::Real(v) => v,
        }
    }
}

impl std::fmt::Display for XValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            XValue::Int(v) => write!(f, "{v}"),
            XValue::Real(v) => write!(f, "{v}"),
        }
    }
}

fn x_of(row: &MetricsRow, axis: XAxis) -> XValue {
    match axis {
        XAxis::Rounds => XValue::Int(row.round as u64),
        XAxis::Bits => XValue::Int(row.bits_up_cum),
        XAxis::OracleCalls => XValue::Int(row.oracle_calls_cum),
        XAxis::WallClock => XValue::Real(row.wall_clock_s),
    }
}

fn y_of(row: &MetricsRow, axis: YAxis) -> f64 {
    match axis {
        YAxis::F => row.f_global,
        YAxis::GradNorm => row.grad_norm_global,
        YAxis::Loss => row.train_loss_sampled,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesExport {
    pub csv: String,
    /// Points dropped because the log scale cannot show them.
    pub dropped: usize,
}

type JoinedRow = (XValue, Vec<Option<f64>>);

/// CSV with one x column and one y column per record, outer-joined on x.
pub fn export_series(records: &[ExperimentRecord], x: XAxis, y: YAxis, scale: Scale) -> SeriesExport {
    // Repeated x values within one run are matched by occurrence.
    let mut table: BTreeMap<(OrderedKey, usize), JoinedRow> = BTreeMap::new();
    let mut dropped = 0;
    for (col, rec) in records.iter().enumerate() {
        let mut seen: BTreeMap<OrderedKey, usize> = BTreeMap::new();
        for row in &rec.rows {
            let xv = x_of(row, x);
            let k = OrderedKey(xv.key());
            let occurrence = seen.entry(k).or_insert(0);
            let entry = table
                .entry((k, *occurrence))
                .or_insert_with(|| (xv, vec![None; records.len()]));
            *occurrence += 1;
            let yv = y_of(row, y);
            if scale == Scale::Log && !(yv > 0.0 && yv.is_finite()) {
                dropped += 1;
                continue;
            }
            entry.1[col] = Some(yv);
        }
    }
    let mut csv = String::from(x.name());
    for r in records {
        csv.push(',');
        csv.push_str(&r.id);
    }
    csv.push('\n');
    for (xv, ys) in table.values() {
        csv.push_str(&xv.to_string());
        for yv in ys {
            csv.push(',');
            if let Some(v) = yv {
                csv.push_str(&v.to_string());
            }
        }
        csv.push('\n');
    }
    SeriesExport { csv, dropped }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedKey(f64);

impl Eq for OrderedKey {}

impl PartialOrd for OrderedKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// A directory of experiment records.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, id: &str) -> Result<PathBuf> {
        validate_id(id)?;
        Ok(self.root.join(id).join(RECORD_FILE))
    }

    /// A fresh id that does not exist yet.
    pub fn new_id(&self) -> String {
        loop {
            let id = format!("{}-{:08x}", Utc::now().format("%Y%m%dT%H%M%S"), rand::random::<u32>());
            if !self.root.join(&id).exists() {
                return id;
            }
        }
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, record: &ExperimentRecord) -> Result<()> {
        let path = self.record_path(&record.id)?;
        let dir = path.parent().expect("record path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let json = serde_json::to_vec_pretty(record).expect("record serializes");
        let mut tmp = tempfile::NamedTempFile::with_prefix_in(".record-", dir).map_err(io_err(dir))?;
        tmp.write_all(&json).map_err(io_err(tmp.path()))?;
        tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;
        tmp.persist(&path).map_err(|e| StoreError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<ExperimentRecord> {
        let path = self.record_path(id)?;
        if !path.exists() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        load_record(&path)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.record_path(id).map(|p| p.exists()).unwrap_or(false)
    }

    /// Summaries of every readable record, filtered and sorted by
    /// `(created_at, id)`. Unreadable records are skipped.
    pub fn list(&self, filter: &ListFilter) -> Result<Vec<RecordSummary>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io_err(&self.root))?;
            let path = entry.path().join(RECORD_FILE);
            if !path.is_file() {
                continue;
            }
            match load_record(&path) {
                Ok(r) if filter.matches(&r) => out.push(RecordSummary::from(&r)),
                Ok(_) => {}
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Loads every id first so that an unknown id produces no output at all.
    pub fn export(&self, ids: &[String], x: XAxis, y: YAxis, scale: Scale) -> Result<SeriesExport> {
        if ids.is_empty() {
            return Err(StoreError::Export("no experiment ids given".into()));
        }
        let records = ids.iter().map(|id| self.load(id)).collect::<Result<Vec<_>>>()?;
        Ok(export_series(&records, x, y, scale))
    }
}

pub fn load_record(path: &Path) -> Result<ExperimentRecord> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: String| StoreError::RecordCorrupt {
        path: path.to_path_buf(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing schema_version".into()))?;
    if version > SCHEMA_VERSION as u64 {
        return Err(StoreError::UnsupportedSchema { found: version as u32 });
    }
    let record: ExperimentRecord = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    record.check().map_err(corrupt)?;
    Ok(record)
}

/// Streams a run into its record, rewriting the file after every row.
pub struct RecordWriter {
    store: Store,
    record: ExperimentRecord,
}

impl RecordWriter {
    pub fn new(store: Store, record: ExperimentRecord) -> Result<Self> {
        store.save(&record)?;
        Ok(RecordWriter { store, record })
    }

    pub fn record(&self) -> &ExperimentRecord {
        &self.record
    }

    fn flush(&self) -> std::io::Result<()> {
        self.store.save(&self.record).map_err(|e| match e {
            StoreError::Io { source, .. } => source,
            other => std::io::Error::other(other.to_string()),
        })
    }
}

impl RunObserver for RecordWriter {
    fn on_start(&mut self, initial: &MetricsRow) -> std::io::Result<()> {
        self.record.status = RunStatus::Running;
        self.record.initial = Some(initial.clone());
        self.flush()
    }

    fn on_row(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        self.record.rows.push(row.clone());
        self.flush()
    }

    fn on_finish(&mut self, status: RunStatus, error: Option<&str>) -> std::io::Result<()> {
        self.record.status = status;
        self.record.error = error.map(str::to_string);
        self.flush()
    }
}
