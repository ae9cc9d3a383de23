//! Unified time-series table, local slice reconstruction, and the leakage
//! boundary check.
//!
//! Heterogeneous CSV inputs are normalized into one `(date, entity, target,
//! covariates)` table. A reconstruction splits that table at a cutoff into
//! public training files plus a sealed hidden-truth window, truncates
//! auxiliary files at their availability dates, and emits a workspace
//! manifest with content digests. Emission is deterministic: identical raw
//! bytes and slice spec produce byte-identical public files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task_model::{
    AccessScope, ConstraintSet, EndpointSpec, FileRole, Granularity, ManifestEntry, MetricId,
    MetricSpec, OrderingRule, OutputForm, OutputFormat, PriorKnowledge, TaskFile, TaskModelError,
    WorkspaceManifest, DEFAULT_MAGNITUDE_CAP,
};
use crate::util::sha256_hex;

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const TASK_FILE_NAME: &str = "task.txt";
pub const MANIFEST_FILE_NAME: &str = "manifest.txt";
pub const TRUTH_FILE_NAME: &str = "truth.csv";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}: unparseable timestamp `{value}`")]
    UnparseableTimestamp { row: usize, value: String },
    #[error("duplicate key: store {store_id} family {family} date {date}")]
    DuplicateKey {
        store_id: u32,
        family: String,
        date: NaiveDate,
    },
    #[error("missing required column `{0}`")]
    MissingRequiredColumn(String),
    #[error("row {row}: negative target {value}")]
    NegativeTarget { row: usize, value: f64 },
    #[error("row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },
    #[error("missing raw file `{0}`")]
    MissingRawFile(String),
    #[error("hidden window contains no rows")]
    EmptyHiddenWindow,
    #[error("slice dates outside data: {0}")]
    SpecDateOutsideData(String),
    #[error("table is empty")]
    EmptyTable,
    #[error("cannot write to `{path}`: {source}")]
    UnwritableDirectory { path: PathBuf, source: io::Error },
    #[error("invalid slice spec: {0}")]
    InvalidSpec(String),
    #[error("table invariant violated: {0}")]
    InvariantViolated(String),
    #[error(transparent)]
    Task(#[from] TaskModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One forecastable series: a store and a product family.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct EntityKey {
    pub store_id: u32,
    pub family: String,
}

impl EntityKey {
    pub fn new(store_id: u32, family: impl Into<String>) -> Self {
        EntityKey {
            store_id,
            family: family.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub date: NaiveDate,
    pub entity: EntityKey,
    pub target: f64,
    /// Covariate cells; `None` marks a missing value, never imputed.
    pub covariates: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub label: SplitLabel,
}

/// Normalized series table. `cutoff` stays unset until a slice is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedSeriesTable {
    pub rows: Vec<SeriesRow>,
    pub frequency: Granularity,
    pub timezone: String,
    pub cutoff: Option<NaiveDate>,
    pub splits: Vec<SplitRange>,
}

impl UnifiedSeriesTable {
    pub fn check(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            if !row.target.is_finite() || row.target < 0.0 {
                return Err(DataError::InvariantViolated(format!(
                    "target {} for store {} family {} on {}",
                    row.target, row.entity.store_id, row.entity.family, row.date
                )));
            }
            if !seen.insert((row.entity.clone(), row.date)) {
                return Err(DataError::DuplicateKey {
                    store_id: row.entity.store_id,
                    family: row.entity.family.clone(),
                    date: row.date,
                });
            }
        }
        if let Some(cutoff) = self.cutoff {
            for split in &self.splits {
                match split.label {
                    SplitLabel::Train if split.end > cutoff => {
                        return Err(DataError::InvariantViolated(format!(
                            "train split ends {} after cutoff {cutoff}",
                            split.end
                        )))
                    }
                    SplitLabel::Hidden if split.start <= cutoff => {
                        return Err(DataError::InvariantViolated(format!(
                            "hidden split starts {} at or before cutoff {cutoff}",
                            split.start
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Distinct entities, sorted.
    pub fn entities(&self) -> Vec<EntityKey> {
        let set: BTreeSet<&EntityKey> = self.rows.iter().map(|r| &r.entity).collect();
        set.into_iter().cloned().collect()
    }

    pub fn date_span(&self) -> Option<(NaiveDate, NaiveDate)> {
        let min = self.rows.iter().map(|r| r.date).min()?;
        let max = self.rows.iter().map(|r| r.date).max()?;
        Some((min, max))
    }

    /// (entity, date) -> target lookup.
    pub fn index(&self) -> BTreeMap<(EntityKey, NaiveDate), f64> {
        self.rows
            .iter()
            .map(|r| ((r.entity.clone(), r.date), r.target))
            .collect()
    }

    /// Per-entity series sorted by date.
    pub fn by_entity(&self) -> BTreeMap<EntityKey, Vec<(NaiveDate, f64)>> {
        let mut map: BTreeMap<EntityKey, Vec<(NaiveDate, f64)>> = BTreeMap::new();
        for row in &self.rows {
            map.entry(row.entity.clone())
                .or_default()
                .push((row.date, row.target));
        }
        for series in map.values_mut() {
            series.sort_by_key(|(d, _)| *d);
        }
        map
    }

    /// Max observed target per entity; the magnitude check's reference.
    pub fn max_target_by_entity(&self) -> BTreeMap<EntityKey, f64> {
        let mut map: BTreeMap<EntityKey, f64> = BTreeMap::new();
        for row in &self.rows {
            let e = map.entry(row.entity.clone()).or_insert(0.0);
            if row.target > *e {
                *e = row.target;
            }
        }
        map
    }
}

/// Column-role assignment for ingesting a raw CSV. Covariate columns are
/// picked up only when present in the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub date_column: String,
    pub store_column: String,
    pub family_column: String,
    pub target_column: String,
    pub covariate_columns: Vec<String>,
    pub timezone: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            date_column: "date".into(),
            store_column: "store_nbr".into(),
            family_column: "family".into(),
            target_column: "sales".into(),
            covariate_columns: vec!["onpromotion".into()],
            timezone: "America/Guayaquil".into(),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

/// Normalize a CSV payload into a unified table. Missing covariate cells are
/// recorded as missing; the cutoff stays unset until a slice is applied.
pub fn ingest_table(bytes: &[u8], schema: &SchemaMap) -> Result<UnifiedSeriesTable, DataError> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader.headers()?.clone();
    let date_idx = column_index(&headers, &schema.date_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.date_column.clone()))?;
    let store_idx = column_index(&headers, &schema.store_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.store_column.clone()))?;
    let family_idx = column_index(&headers, &schema.family_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.family_column.clone()))?;
    let target_idx = column_index(&headers, &schema.target_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.target_column.clone()))?;
    let covariate_idx: Vec<(String, usize)> = schema
        .covariate_columns
        .iter()
        .filter_map(|c| column_index(&headers, c).map(|i| (c.clone(), i)))
        .collect();

    let mut rows = Vec::new();
    let mut seen: BTreeSet<(u32, String, NaiveDate)> = BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 2; // 1-based, after the header line
        let date_raw = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d").map_err(|_| {
            DataError::UnparseableTimestamp {
                row: row_no,
                value: date_raw.to_string(),
            }
        })?;
        let store_id: u32 = record
            .get(store_idx)
            .unwrap_or("")
            .parse()
            .map_err(|_| DataError::MalformedRow {
                row: row_no,
                detail: format!("bad store id `{}`", record.get(store_idx).unwrap_or("")),
            })?;
        let family = record.get(family_idx).unwrap_or("").to_string();
        let target_raw = record.get(target_idx).unwrap_or("");
        let target: f64 = target_raw.parse().map_err(|_| DataError::MalformedRow {
            row: row_no,
            detail: format!("bad target `{target_raw}`"),
        })?;
        if !target.is_finite() {
            return Err(DataError::MalformedRow {
                row: row_no,
                detail: format!("non-finite target `{target_raw}`"),
            });
        }
        if target < 0.0 {
            return Err(DataError::NegativeTarget {
                row: row_no,
                value: target,
            });
        }
        if !seen.insert((store_id, family.clone(), date)) {
            return Err(DataError::DuplicateKey {
                store_id,
                family,
                date,
            });
        }
        let mut covariates = BTreeMap::new();
        for (name, idx) in &covariate_idx {
            let cell = record.get(*idx).unwrap_or("");
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            covariates.insert(name.clone(), value);
        }
        rows.push(SeriesRow {
            date,
            entity: EntityKey { store_id, family },
            target,
            covariates,
        });
    }
    Ok(UnifiedSeriesTable {
        rows,
        frequency: Granularity::Daily,
        timezone: schema.timezone.clone(),
        cutoff: None,
        splits: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Slice reconstruction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilySelector {
    All,
    Named(BTreeSet<String>),
}

/// What to carve out of the raw competition files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub store_ids: BTreeSet<u32>,
    pub families: FamilySelector,
    pub public_train_end: NaiveDate,
    pub hidden_start: NaiveDate,
    pub hidden_end: NaiveDate,
    pub auxiliary_truncation: BTreeMap<String, NaiveDate>,
    pub auxiliary_full_span: BTreeSet<String>,
}

impl SliceSpec {
    pub fn check(&self) -> Result<(), DataError> {
        if self.store_ids.is_empty() {
            return Err(DataError::InvalidSpec("no stores selected".into()));
        }
        let expected = self
            .public_train_end
            .checked_add_days(Days::new(1))
            .ok_or_else(|| DataError::InvalidSpec("public_train_end overflow".into()))?;
        if expected != self.hidden_start {
            return Err(DataError::InvalidSpec(format!(
                "hidden_start {} must be the day after public_train_end {}",
                self.hidden_start, self.public_train_end
            )));
        }
        if self.hidden_start > self.hidden_end {
            return Err(DataError::InvalidSpec(format!(
                "hidden_start {} after hidden_end {}",
                self.hidden_start, self.hidden_end
            )));
        }
        Ok(())
    }

    pub fn hidden_dates(&self) -> Vec<NaiveDate> {
        self.hidden_start
            .iter_days()
            .take_while(|d| *d <= self.hidden_end)
            .collect()
    }
}

/// Output of a slice build: public workspace files, the sealed truth table,
/// and the manifest describing the public files. The parsed public train
/// table rides along so callers can build validators without re-parsing.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub public_files: BTreeMap<String, Vec<u8>>,
    pub hidden_truth: UnifiedSeriesTable,
    pub manifest: WorkspaceManifest,
    pub public_train: UnifiedSeriesTable,
}

fn format_cell(value: f64) -> String {
    // Shortest round-trip decimal keeps emission deterministic and diffable.
    format!("{value}")
}

/// Rows sorted by (date, store, family) paired with their sequential ids.
/// The same rule orders the emitted test skeleton and the sealed truth file,
/// so scoring can join on ids alone.
pub fn grid_rows(table: &UnifiedSeriesTable) -> Vec<(u64, &SeriesRow)> {
    let mut refs: Vec<&SeriesRow> = table.rows.iter().collect();
    refs.sort_by(|a, b| (a.date, &a.entity).cmp(&(b.date, &b.entity)));
    refs.into_iter()
        .enumerate()
        .map(|(i, r)| (i as u64, r))
        .collect()
}

fn emit_table_csv(
    table: &UnifiedSeriesTable,
    schema: &SchemaMap,
    include_target: bool,
    covariates: &[String],
) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut header = vec!["id".to_string(), schema.date_column.clone()];
        header.push(schema.store_column.clone());
        header.push(schema.family_column.clone());
        if include_target {
            header.push(schema.target_column.clone());
        }
        header.extend(covariates.iter().cloned());
        out.extend_from_slice(header.join(",").as_bytes());
        out.push(b'\n');
        for (id, row) in grid_rows(table) {
            let mut fields = vec![
                id.to_string(),
                row.date.to_string(),
                row.entity.store_id.to_string(),
                row.entity.family.clone(),
            ];
            if include_target {
                fields.push(format_cell(row.target));
            }
            for c in covariates {
                fields.push(
                    row.covariates
                        .get(c)
                        .and_then(|v| *v)
                        .map(format_cell)
                        .unwrap_or_default(),
                );
            }
            out.extend_from_slice(fields.join(",").as_bytes());
            out.push(b'\n');
        }
    }
    out
}

fn truncate_aux_csv(
    bytes: &[u8],
    schema: &SchemaMap,
    stores: &BTreeSet<u32>,
    cut: NaiveDate,
) -> Result<Vec<u8>, DataError> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader.headers()?.clone();
    let date_idx = column_index(&headers, &schema.date_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.date_column.clone()))?;
    let store_idx = column_index(&headers, &schema.store_column);
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&headers)?;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let raw = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| {
            DataError::UnparseableTimestamp {
                row: i + 2,
                value: raw.to_string(),
            }
        })?;
        if date > cut {
            continue;
        }
        if let Some(idx) = store_idx {
            if let Ok(store) = record.get(idx).unwrap_or("").parse::<u32>() {
                if !stores.contains(&store) {
                    continue;
                }
            }
        }
        writer.write_record(&record)?;
    }
    Ok(writer
        .into_inner()
        .map_err(|e| DataError::InvalidSpec(format!("csv flush: {e}")))?)
}

/// Build the local slice: truncated public train, test skeleton with the
/// target column removed, truncated or passed-through auxiliaries, sealed
/// hidden truth, and a digest-bearing manifest.
pub fn build_reconstruction(
    raw_files: &BTreeMap<String, Vec<u8>>,
    spec: &SliceSpec,
    schema: &SchemaMap,
) -> Result<Reconstruction, DataError> {
    spec.check()?;
    let train_bytes = raw_files
        .get(TRAIN_FILE)
        .ok_or_else(|| DataError::MissingRawFile(TRAIN_FILE.into()))?;
    let full = ingest_table(train_bytes, schema)?;

    let families: BTreeSet<String> = match &spec.families {
        FamilySelector::Named(set) => set.clone(),
        FamilySelector::All => full
            .rows
            .iter()
            .filter(|r| spec.store_ids.contains(&r.entity.store_id))
            .map(|r| r.entity.family.clone())
            .collect(),
    };
    if families.is_empty() {
        return Err(DataError::InvalidSpec(
            "no families present for the selected stores".into(),
        ));
    }

    let in_slice = |row: &SeriesRow| {
        spec.store_ids.contains(&row.entity.store_id) && families.contains(&row.entity.family)
    };
    let mut public_rows = Vec::new();
    let mut hidden_rows = Vec::new();
    for row in &full.rows {
        if !in_slice(row) || row.date > spec.hidden_end {
            continue;
        }
        if row.date <= spec.public_train_end {
            public_rows.push(row.clone());
        } else {
            hidden_rows.push(row.clone());
        }
    }
    if hidden_rows.is_empty() {
        return Err(DataError::EmptyHiddenWindow);
    }

    // The hidden window must contain the full store x family x date grid.
    let hidden_dates = spec.hidden_dates();
    let have: BTreeSet<(u32, &str, NaiveDate)> = hidden_rows
        .iter()
        .map(|r| (r.entity.store_id, r.entity.family.as_str(), r.date))
        .collect();
    for store in &spec.store_ids {
        for family in &families {
            for date in &hidden_dates {
                if !have.contains(&(*store, family.as_str(), *date)) {
                    return Err(DataError::SpecDateOutsideData(format!(
                        "no raw row for store {store} family {family} on {date}"
                    )));
                }
            }
        }
    }

    let public_train = UnifiedSeriesTable {
        rows: public_rows,
        frequency: Granularity::Daily,
        timezone: schema.timezone.clone(),
        cutoff: Some(spec.public_train_end),
        splits: full.date_span().map_or_else(Vec::new, |(min, _)| {
            vec![SplitRange {
                start: min,
                end: spec.public_train_end,
                label: SplitLabel::Train,
            }]
        }),
    };
    let hidden_truth = UnifiedSeriesTable {
        rows: hidden_rows,
        frequency: Granularity::Daily,
        timezone: schema.timezone.clone(),
        cutoff: Some(spec.public_train_end),
        splits: vec![SplitRange {
            start: spec.hidden_start,
            end: spec.hidden_end,
            label: SplitLabel::Hidden,
        }],
    };
    public_train.check()?;
    hidden_truth.check()?;

    let mut public_files = BTreeMap::new();
    public_files.insert(
        TRAIN_FILE.to_string(),
        emit_table_csv(&public_train, schema, true, &schema.covariate_columns),
    );
    // Skeleton keeps covariates; only the target column is removed.
    public_files.insert(
        TEST_FILE.to_string(),
        emit_table_csv(&hidden_truth, schema, false, &schema.covariate_columns),
    );
    for (name, cut) in &spec.auxiliary_truncation {
        let bytes = raw_files
            .get(name)
            .ok_or_else(|| DataError::MissingRawFile(name.clone()))?;
        public_files.insert(
            name.clone(),
            truncate_aux_csv(bytes, schema, &spec.store_ids, *cut)?,
        );
    }
    for name in &spec.auxiliary_full_span {
        let bytes = raw_files
            .get(name)
            .ok_or_else(|| DataError::MissingRawFile(name.clone()))?;
        public_files.insert(name.clone(), bytes.clone());
    }

    let mut entries = vec![
        ManifestEntry {
            file_name: TRAIN_FILE.into(),
            role: FileRole::Train,
            availability_end: None,
            byte_length: public_files[TRAIN_FILE].len() as u64,
            content_digest: sha256_hex(&public_files[TRAIN_FILE]),
        },
        ManifestEntry {
            file_name: TEST_FILE.into(),
            role: FileRole::TestSkeleton,
            availability_end: None,
            byte_length: public_files[TEST_FILE].len() as u64,
            content_digest: sha256_hex(&public_files[TEST_FILE]),
        },
    ];
    for (name, bytes) in &public_files {
        if name == TRAIN_FILE || name == TEST_FILE {
            continue;
        }
        entries.push(ManifestEntry {
            file_name: name.clone(),
            role: FileRole::Auxiliary,
            availability_end: spec.auxiliary_truncation.get(name).copied(),
            byte_length: bytes.len() as u64,
            content_digest: sha256_hex(bytes),
        });
    }
    let manifest = WorkspaceManifest { entries };
    manifest.check()?;

    Ok(Reconstruction {
        public_files,
        hidden_truth,
        manifest,
        public_train,
    })
}

// ---------------------------------------------------------------------------
// Leakage boundary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageVerdict {
    FullyValid,
    PartiallyValid,
    Invalid,
}

/// Which hidden dates a lagged feature may legally serve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub feature_name: String,
    pub lag_steps: u32,
    pub valid_dates: BTreeSet<NaiveDate>,
    pub invalid_dates: BTreeSet<NaiveDate>,
    pub verdict: LeakageVerdict,
}

/// A hidden date `d` is valid for a lagged feature iff `d - lag_steps` does
/// not cross the cutoff. Lag 0 reads the hidden value itself and is always
/// invalid.
pub fn check_boundary(feature_name: &str, lag_steps: u32, scope: &AccessScope) -> LeakageReport {
    let mut valid = BTreeSet::new();
    let mut invalid = BTreeSet::new();
    for date in scope.horizon_dates() {
        let source = date - Days::new(u64::from(lag_steps));
        if source <= scope.history_end {
            valid.insert(date);
        } else {
            invalid.insert(date);
        }
    }
    let verdict = if invalid.is_empty() {
        LeakageVerdict::FullyValid
    } else if valid.is_empty() {
        LeakageVerdict::Invalid
    } else {
        LeakageVerdict::PartiallyValid
    };
    LeakageReport {
        feature_name: feature_name.to_string(),
        lag_steps,
        valid_dates: valid,
        invalid_dates: invalid,
        verdict,
    }
}

// ---------------------------------------------------------------------------
// Visual summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSpan {
    pub store_id: u32,
    pub family: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEntry {
    pub store_id: u32,
    pub family: String,
    pub variance: f64,
}

/// Machine-readable companion to the rendered figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryArtifact {
    pub entity_count: u64,
    pub span_start: NaiveDate,
    pub span_end: NaiveDate,
    pub missing_spans: Vec<MissingSpan>,
    pub top_variance: Vec<VarianceEntry>,
    pub figure_files: Vec<String>,
}

const SVG_PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Minimal deterministic line chart. Series are (label, points) pairs on an
/// 800x400 canvas; no external renderer involved.
pub fn render_line_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const M: f64 = 55.0;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (_, pts) in series {
        for (x, y) in pts {
            if x.is_finite() && y.is_finite() {
                xs.push(*x);
                ys.push(*y);
            }
        }
    }
    let (x_min, x_max) = match (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ) {
        (min, max) if min.is_finite() => (min, max),
        _ => (0.0, 1.0),
    };
    let (y_min, y_max) = match (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ) {
        (min, max) if min.is_finite() => (min, max),
        _ => (0.0, 1.0),
    };
    let x_span = (x_max - x_min).max(1e-9);
    let y_span = (y_max - y_min).max(1e-9);
    let px = |x: f64| M + (x - x_min) / x_span * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y_min) / y_span * (H - 2.0 * M);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        H - M
    ));
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{:.2}</text>\n",
        H - M + 14.0,
        x_min
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{:.2}</text>\n",
        W - M,
        H - M + 14.0,
        x_max
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{:.2}</text>\n",
        M - 4.0,
        H - M,
        y_min
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{:.2}</text>\n",
        M - 4.0,
        M + 4.0,
        y_max
    ));
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{label}</text>\n",
            W - M - 150.0,
            M + 16.0 * (i as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_line_figure(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_line_svg(title, series).as_bytes())
}

fn days_since(epoch: NaiveDate, date: NaiveDate) -> f64 {
    (date - epoch).num_days() as f64
}

/// Emit one aggregate figure plus a machine-readable summary of the table:
/// entity count, date span, per-entity missing spans, and the highest
/// variance entities.
pub fn visual_summary(
    table: &UnifiedSeriesTable,
    out_dir: &Path,
) -> Result<SummaryArtifact, DataError> {
    if table.rows.is_empty() {
        return Err(DataError::EmptyTable);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| DataError::UnwritableDirectory {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let (span_start, span_end) = table.date_span().expect("non-empty table");

    let by_entity = table.by_entity();
    let mut missing_spans = Vec::new();
    let mut variances = Vec::new();
    for (entity, series) in &by_entity {
        let mut prev = series[0].0;
        for (date, _) in series.iter().skip(1) {
            let expected = prev + Days::new(1);
            if *date > expected {
                missing_spans.push(MissingSpan {
                    store_id: entity.store_id,
                    family: entity.family.clone(),
                    start: expected,
                    end: *date - Days::new(1),
                });
            }
            prev = *date;
        }
        let n = series.len() as f64;
        let mean = series.iter().map(|(_, v)| v).sum::<f64>() / n;
        let variance = series.iter().map(|(_, v)| (v - mean).powi(2)).sum::<f64>() / n;
        variances.push(VarianceEntry {
            store_id: entity.store_id,
            family: entity.family.clone(),
            variance,
        });
    }
    variances.sort_by(|a, b| {
        b.variance
            .partial_cmp(&a.variance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.store_id, &a.family).cmp(&(b.store_id, &b.family)))
    });
    variances.truncate(5);

    let mut per_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for row in &table.rows {
        *per_date.entry(row.date).or_insert(0.0) += row.target;
    }
    let points: Vec<(f64, f64)> = per_date
        .iter()
        .map(|(d, v)| (days_since(span_start, *d), *v))
        .collect();
    let figure_name = "aggregate_target.svg".to_string();
    write_line_figure(
        &out_dir.join(&figure_name),
        "Total target per day",
        &[("aggregate".to_string(), points)],
    )
    .map_err(|source| DataError::UnwritableDirectory {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let artifact = SummaryArtifact {
        entity_count: by_entity.len() as u64,
        span_start,
        span_end,
        missing_spans,
        top_variance: variances,
        figure_files: vec![figure_name],
    };
    let json = serde_json::to_vec_pretty(&artifact).expect("summary serializes");
    std::fs::write(out_dir.join("summary.json"), json).map_err(|source| {
        DataError::UnwritableDirectory {
            path: out_dir.to_path_buf(),
            source,
        }
    })?;
    Ok(artifact)
}

// ---------------------------------------------------------------------------
// Skeleton parsing and task-file derivation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonRow {
    pub id: u64,
    pub date: NaiveDate,
    pub entity: EntityKey,
}

/// Read back an emitted test skeleton (id, date, store, family).
pub fn parse_skeleton(bytes: &[u8], schema: &SchemaMap) -> Result<Vec<SkeletonRow>, DataError> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader.headers()?.clone();
    let id_idx =
        column_index(&headers, "id").ok_or_else(|| DataError::MissingRequiredColumn("id".into()))?;
    let date_idx = column_index(&headers, &schema.date_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.date_column.clone()))?;
    let store_idx = column_index(&headers, &schema.store_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.store_column.clone()))?;
    let family_idx = column_index(&headers, &schema.family_column)
        .ok_or_else(|| DataError::MissingRequiredColumn(schema.family_column.clone()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 2;
        let id: u64 = record
            .get(id_idx)
            .unwrap_or("")
            .parse()
            .map_err(|_| DataError::MalformedRow {
                row: row_no,
                detail: "bad id".into(),
            })?;
        let raw = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| {
            DataError::UnparseableTimestamp {
                row: row_no,
                value: raw.to_string(),
            }
        })?;
        let store_id: u32 = record
            .get(store_idx)
            .unwrap_or("")
            .parse()
            .map_err(|_| DataError::MalformedRow {
                row: row_no,
                detail: "bad store id".into(),
            })?;
        rows.push(SkeletonRow {
            id,
            date,
            entity: EntityKey {
                store_id,
                family: record.get(family_idx).unwrap_or("").to_string(),
            },
        });
    }
    Ok(rows)
}

/// Knobs for deriving a task file from a slice.
#[derive(Debug, Clone)]
pub struct TaskFileOptions {
    pub base_path: String,
    pub max_submissions: Option<u32>,
    pub metrics: Vec<MetricId>,
    pub magnitude_cap: f64,
    pub id_column: String,
    pub value_column: String,
    pub domain_tag: String,
    pub notes: Vec<String>,
    pub seasonality_hints: Option<Vec<u32>>,
}

impl Default for TaskFileOptions {
    fn default() -> Self {
        TaskFileOptions {
            base_path: "/task/store-sales".into(),
            max_submissions: Some(100),
            metrics: vec![MetricId::Rmsle, MetricId::Mae, MetricId::Rmse],
            magnitude_cap: DEFAULT_MAGNITUDE_CAP,
            id_column: "id".into(),
            value_column: "sales".into(),
            domain_tag: "retail-unit-sales".into(),
            notes: Vec::new(),
            seasonality_hints: Some(vec![7]),
        }
    }
}

/// Derive the task file for a reconstruction: scope from the slice dates,
/// full-grid output sized entities x steps, leakage boundary at the cutoff,
/// and availability overrides for every truncated auxiliary.
pub fn derive_task_file(
    history_start: NaiveDate,
    spec: &SliceSpec,
    entity_count: u64,
    timezone: &str,
    opts: &TaskFileOptions,
) -> Result<TaskFile, TaskModelError> {
    let step_count = spec.hidden_dates().len() as u32;
    let task = TaskFile {
        scope: AccessScope {
            history_start,
            history_end: spec.public_train_end,
            horizon_start: spec.hidden_start,
            horizon_end: spec.hidden_end,
            step_count,
            granularity: Granularity::Daily,
            timezone: timezone.to_string(),
        },
        prior: PriorKnowledge {
            domain_tag: opts.domain_tag.clone(),
            notes: opts.notes.clone(),
            seasonality_hints: opts.seasonality_hints.clone(),
        },
        output: OutputForm {
            format: OutputFormat::Csv,
            required_columns: vec![opts.id_column.clone(), opts.value_column.clone()],
            id_column: opts.id_column.clone(),
            value_column: opts.value_column.clone(),
            required_row_count: entity_count * u64::from(step_count),
            ordering_rule: OrderingRule::ByIdAscending,
        },
        constraints: ConstraintSet {
            leakage_boundary: spec.public_train_end,
            max_submissions: opts.max_submissions,
            non_negative_values: true,
            feature_availability_overrides: spec.auxiliary_truncation.clone(),
            magnitude_cap: opts.magnitude_cap,
        },
        metrics: opts
            .metrics
            .iter()
            .map(|m| MetricSpec::lower_better(*m))
            .collect(),
        endpoints: EndpointSpec {
            base_path: opts.base_path.clone(),
        },
    };
    task.check()?;
    Ok(task)
}

// ---------------------------------------------------------------------------
// Workspace persistence
// ---------------------------------------------------------------------------

/// Write a reconstruction to `out_dir`: public files plus the task file and
/// manifest under `public/`, the sealed truth under `hidden/`. Returns the
/// manifest path. The directory convention is the only seal on the truth
/// file: serving and scoring read it, task clients must not.
pub fn write_reconstruction(
    recon: &Reconstruction,
    task: &TaskFile,
    schema: &SchemaMap,
    out_dir: &Path,
) -> Result<PathBuf, DataError> {
    let public = out_dir.join("public");
    let hidden = out_dir.join("hidden");
    for dir in [&public, &hidden] {
        std::fs::create_dir_all(dir).map_err(|source| DataError::UnwritableDirectory {
            path: dir.clone(),
            source,
        })?;
    }
    for (name, bytes) in &recon.public_files {
        std::fs::write(public.join(name), bytes)?;
    }
    let task_text = crate::task_model::render_task_file(task);
    std::fs::write(public.join(TASK_FILE_NAME), &task_text)?;

    let mut manifest = recon.manifest.clone();
    manifest.entries.push(ManifestEntry {
        file_name: TASK_FILE_NAME.into(),
        role: FileRole::Metadata,
        availability_end: None,
        byte_length: task_text.len() as u64,
        content_digest: sha256_hex(task_text.as_bytes()),
    });
    manifest.check()?;
    manifest.check_against(task)?;
    let manifest_path = public.join(MANIFEST_FILE_NAME);
    std::fs::write(&manifest_path, manifest.render())?;

    let truth_bytes = emit_table_csv(&recon.hidden_truth, schema, true, &[]);
    std::fs::write(hidden.join(TRUTH_FILE_NAME), truth_bytes)?;
    Ok(manifest_path)
}

/// A reconstruction read back from `write_reconstruction` output.
#[derive(Debug)]
pub struct LoadedWorkspace {
    pub task: TaskFile,
    pub manifest: WorkspaceManifest,
    pub public_files: BTreeMap<String, Vec<u8>>,
    pub hidden_truth: UnifiedSeriesTable,
    pub public_train: UnifiedSeriesTable,
}

pub fn load_workspace(out_dir: &Path, schema: &SchemaMap) -> Result<LoadedWorkspace, DataError> {
    let public = out_dir.join("public");
    let task_text = std::fs::read_to_string(public.join(TASK_FILE_NAME))?;
    let task = crate::task_model::parse_task_file(&task_text)?;
    let manifest_text = std::fs::read_to_string(public.join(MANIFEST_FILE_NAME))?;
    let manifest = WorkspaceManifest::parse(&manifest_text)?;
    let mut public_files = BTreeMap::new();
    for entry in &manifest.entries {
        let bytes = std::fs::read(public.join(&entry.file_name))?;
        public_files.insert(entry.file_name.clone(), bytes);
    }
    let truth_bytes = std::fs::read(out_dir.join("hidden").join(TRUTH_FILE_NAME))?;
    let mut hidden_truth = ingest_table(&truth_bytes, schema)?;
    hidden_truth.cutoff = Some(task.scope.history_end);
    hidden_truth.splits = vec![SplitRange {
        start: task.scope.horizon_start,
        end: task.scope.horizon_end,
        label: SplitLabel::Hidden,
    }];
    hidden_truth.check()?;
    let mut public_train = ingest_table(&public_files[TRAIN_FILE], schema)?;
    public_train.cutoff = Some(task.scope.history_end);
    public_train.check()?;
    Ok(LoadedWorkspace {
        task,
        manifest,
        public_files,
        hidden_truth,
        public_train,
    })
}

// ---------------------------------------------------------------------------
// Synthetic fixture
// ---------------------------------------------------------------------------

pub mod synthetic {
    //! Seeded Store-Sales-shaped fixture so every workflow runs without the
    //! real dataset. Per-entity Poisson rates with a weekday profile give the
    //! weekday-lag strategy something to find.

    use super::*;
    use chrono::Datelike;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    #[derive(Debug, Clone)]
    pub struct SyntheticSpec {
        pub seed: u64,
        pub stores: u32,
        pub families: u32,
        pub history_start: NaiveDate,
        pub hidden_end: NaiveDate,
    }

    pub fn family_name(idx: u32) -> String {
        format!("FAM{idx:02}")
    }

    const WEEKDAY_FACTOR: [f64; 7] = [0.9, 0.8, 0.85, 0.9, 1.0, 1.3, 1.4];

    fn entity_rng(seed: u64, store: u32, family_idx: u32) -> ChaCha8Rng {
        let mix = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(store) << 20)
            .wrapping_add(u64::from(family_idx));
        ChaCha8Rng::seed_from_u64(mix)
    }

    /// Raw competition-shaped files: train.csv, oil.csv,
    /// holidays_events.csv, transactions.csv. Deterministic in the inputs.
    pub fn store_sales_fixture(spec: &SyntheticSpec) -> BTreeMap<String, Vec<u8>> {
        assert!(spec.stores >= 1 && spec.families >= 1 && spec.families <= 99);
        let dates: Vec<NaiveDate> = spec
            .history_start
            .iter_days()
            .take_while(|d| *d <= spec.hidden_end)
            .collect();

        let mut train = String::from("id,date,store_nbr,family,sales,onpromotion\n");
        let mut id = 0u64;
        // Row order (date, store, family) mirrors the emission convention.
        let mut series: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
        for store in 1..=spec.stores {
            for fam in 0..spec.families {
                let mut rng = entity_rng(spec.seed, store, fam);
                let lambda: f64 = rng.random_range(0.5..50.0);
                let mut values = Vec::with_capacity(dates.len());
                for date in &dates {
                    let dow = date.weekday().num_days_from_monday() as usize;
                    let rate = (lambda * WEEKDAY_FACTOR[dow]).max(0.05);
                    let sample: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                    values.push(sample);
                }
                series.insert((store, fam), values);
            }
        }
        for (di, date) in dates.iter().enumerate() {
            for store in 1..=spec.stores {
                for fam in 0..spec.families {
                    let value = series[&(store, fam)][di];
                    let mut promo_rng = entity_rng(spec.seed ^ 0x50_52_4f_4d, store, fam);
                    let on_promo = u32::from(promo_rng.random_bool(0.08));
                    train.push_str(&format!(
                        "{id},{date},{store},{},{value},{on_promo}\n",
                        family_name(fam)
                    ));
                    id += 1;
                }
            }
        }

        let mut oil = String::from("date,dcoilwtico\n");
        let mut oil_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4f49_4c);
        let step = Normal::new(0.0, 0.8).expect("valid normal");
        let mut price = 47.5f64;
        for date in &dates {
            price = (price + step.sample(&mut oil_rng)).clamp(25.0, 110.0);
            if oil_rng.random_bool(0.05) {
                oil.push_str(&format!("{date},\n"));
            } else {
                oil.push_str(&format!("{date},{price:.2}\n"));
            }
        }

        let mut holidays = String::from("date,type,locale,locale_name,description,transferred\n");
        for date in &dates {
            if date.format("%d").to_string() == "15" {
                holidays.push_str(&format!(
                    "{date},Holiday,National,Synthetica,Fixture holiday,False\n"
                ));
            }
        }

        let mut transactions = String::from("date,store_nbr,transactions\n");
        for date in &dates {
            for store in 1..=spec.stores {
                let mut rng = entity_rng(spec.seed ^ 0x54_52_41_4e, store, 0);
                let shift = u64::from(
                    (*date - spec.history_start).num_days().unsigned_abs(),
                );
                let rate = 600.0 + f64::from(store) * 17.0 + (shift % 7) as f64 * 5.0;
                let n: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                transactions.push_str(&format!("{date},{store},{}\n", n as u64));
            }
        }

        let mut out = BTreeMap::new();
        out.insert(TRAIN_FILE.to_string(), train.into_bytes());
        out.insert("oil.csv".to_string(), oil.into_bytes());
        out.insert("holidays_events.csv".to_string(), holidays.into_bytes());
        out.insert("transactions.csv".to_string(), transactions.into_bytes());
        out
    }

    /// Slice spec matching the fixture: cutoff 16 days before the end.
    pub fn default_slice(spec: &SyntheticSpec) -> SliceSpec {
        let hidden_start = spec.hidden_end - Days::new(15);
        SliceSpec {
            store_ids: (1..=spec.stores).collect(),
            families: FamilySelector::All,
            public_train_end: hidden_start - Days::new(1),
            hidden_start,
            hidden_end: spec.hidden_end,
            auxiliary_truncation: BTreeMap::from([(
                "transactions.csv".to_string(),
                hidden_start - Days::new(1),
            )]),
            auxiliary_full_span: BTreeSet::from([
                "oil.csv".to_string(),
                "holidays_events.csv".to_string(),
            ]),
        }
    }
}
