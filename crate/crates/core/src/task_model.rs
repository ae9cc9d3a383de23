//! The task tuple as parseable, checkable records.
//!
//! A task file declares what may be read (the access scope), what is assumed
//! (prior knowledge), what must be produced (the output form), what must not
//! happen (constraints, chiefly the leakage boundary), and how candidates are
//! ranked (metrics). A workspace manifest lists the exposed files. A
//! validation outcome pairs the validity report with scores, and a candidate
//! is admissible only when every check passed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::validation_gate::{MetricScores, ValidityReport};

#[derive(Debug, Error)]
pub enum TaskModelError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("inconsistent dates: {0}")]
    InconsistentDates(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("invalid task file: {0}")]
    Invalid(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

/// Step granularity of the series. Only daily data is modeled; the
/// enumeration is the extension point for other frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Daily,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Daily => "daily",
        }
    }
}

impl FromStr for Granularity {
    type Err = TaskModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "daily" => Ok(Granularity::Daily),
            other => Err(TaskModelError::Invalid(format!(
                "unsupported granularity `{other}`"
            ))),
        }
    }
}

/// Temporal access scope: visible history plus the hidden target window.
/// `history_end` is the cutoff; nothing after it may inform a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessScope {
    pub history_start: NaiveDate,
    pub history_end: NaiveDate,
    pub horizon_start: NaiveDate,
    pub horizon_end: NaiveDate,
    pub step_count: u32,
    pub granularity: Granularity,
    pub timezone: String,
}

impl AccessScope {
    /// Every date in the hidden window, inclusive.
    pub fn horizon_dates(&self) -> Vec<NaiveDate> {
        self.horizon_start
            .iter_days()
            .take_while(|d| *d <= self.horizon_end)
            .collect()
    }

    pub fn check(&self) -> Result<(), TaskModelError> {
        if self.history_start > self.history_end {
            return Err(TaskModelError::InconsistentDates(format!(
                "history_start {} after history_end {}",
                self.history_start, self.history_end
            )));
        }
        if self.history_end >= self.horizon_start {
            return Err(TaskModelError::InconsistentDates(format!(
                "cutoff {} must precede horizon_start {}",
                self.history_end, self.horizon_start
            )));
        }
        if self.horizon_start > self.horizon_end {
            return Err(TaskModelError::InconsistentDates(format!(
                "horizon_start {} after horizon_end {}",
                self.horizon_start, self.horizon_end
            )));
        }
        if self.step_count == 0 {
            return Err(TaskModelError::Invalid("step_count must be >= 1".into()));
        }
        let steps = self.horizon_dates().len() as u32;
        if steps != self.step_count {
            return Err(TaskModelError::InconsistentDates(format!(
                "horizon {}..{} spans {} daily steps but step_count declares {}",
                self.horizon_start, self.horizon_end, steps, self.step_count
            )));
        }
        Ok(())
    }
}

/// Prior knowledge carried with the task. Recorded but never validated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorKnowledge {
    pub domain_tag: String,
    pub notes: Vec<String>,
    pub seasonality_hints: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingRule {
    ByIdAscending,
    ByEntityThenDate,
    Unordered,
}

impl OrderingRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrderingRule::ByIdAscending => "by_id_ascending",
            OrderingRule::ByEntityThenDate => "by_entity_then_date",
            OrderingRule::Unordered => "unordered",
        }
    }
}

impl FromStr for OrderingRule {
    type Err = TaskModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by_id_ascending" => Ok(OrderingRule::ByIdAscending),
            "by_entity_then_date" => Ok(OrderingRule::ByEntityThenDate),
            "unordered" => Ok(OrderingRule::Unordered),
            other => Err(TaskModelError::Invalid(format!(
                "unknown ordering_rule `{other}`"
            ))),
        }
    }
}

/// Required shape of a candidate submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputForm {
    pub format: OutputFormat,
    pub required_columns: Vec<String>,
    pub id_column: String,
    pub value_column: String,
    pub required_row_count: u64,
    pub ordering_rule: OrderingRule,
}

impl OutputForm {
    pub fn check(&self) -> Result<(), TaskModelError> {
        for col in [&self.id_column, &self.value_column] {
            if !self.required_columns.contains(col) {
                return Err(TaskModelError::Invalid(format!(
                    "column `{col}` is not among required_columns"
                )));
            }
        }
        Ok(())
    }
}

/// Hard constraints on candidate production. `leakage_boundary` mirrors the
/// scope cutoff; `feature_availability_overrides` shortens individual files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub leakage_boundary: NaiveDate,
    pub max_submissions: Option<u32>,
    pub non_negative_values: bool,
    pub feature_availability_overrides: BTreeMap<String, NaiveDate>,
    /// Multiplier for the impossible-magnitude check: a prediction fails when
    /// it exceeds `magnitude_cap * max(1, entity's max training target)`.
    pub magnitude_cap: f64,
}

pub const DEFAULT_MAGNITUDE_CAP: f64 = 100.0;

impl ConstraintSet {
    pub fn check(&self, scope: &AccessScope) -> Result<(), TaskModelError> {
        if self.leakage_boundary != scope.history_end {
            return Err(TaskModelError::InconsistentDates(format!(
                "leakage_boundary {} must equal the scope cutoff {}",
                self.leakage_boundary, scope.history_end
            )));
        }
        for (name, date) in &self.feature_availability_overrides {
            if *date > scope.horizon_end {
                return Err(TaskModelError::InconsistentDates(format!(
                    "override for `{name}` ({date}) is after horizon_end {}",
                    scope.horizon_end
                )));
            }
        }
        if !(self.magnitude_cap.is_finite() && self.magnitude_cap > 0.0) {
            return Err(TaskModelError::Invalid(
                "magnitude_cap must be a positive finite number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash,
)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Rmsle,
    Mae,
    Rmse,
}

impl MetricId {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricId::Rmsle => "rmsle",
            MetricId::Mae => "mae",
            MetricId::Rmse => "rmse",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = TaskModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rmsle" => Ok(MetricId::Rmsle),
            "mae" => Ok(MetricId::Mae),
            "rmse" => Ok(MetricId::Rmse),
            other => Err(TaskModelError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric_id: MetricId,
    pub direction: Direction,
}

impl MetricSpec {
    pub fn lower_better(metric_id: MetricId) -> Self {
        MetricSpec {
            metric_id,
            direction: Direction::LowerBetter,
        }
    }
}

/// Where the task's wire service is mounted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub base_path: String,
}

/// The complete task file. The first metric ranks candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub scope: AccessScope,
    pub prior: PriorKnowledge,
    pub output: OutputForm,
    pub constraints: ConstraintSet,
    pub metrics: Vec<MetricSpec>,
    pub endpoints: EndpointSpec,
}

impl TaskFile {
    pub fn check(&self) -> Result<(), TaskModelError> {
        self.scope.check()?;
        self.output.check()?;
        self.constraints.check(&self.scope)?;
        if self.metrics.is_empty() {
            return Err(TaskModelError::MissingField("metrics.metric".into()));
        }
        if self.endpoints.base_path.is_empty() {
            return Err(TaskModelError::MissingField("endpoints.base_path".into()));
        }
        Ok(())
    }

    pub fn primary_metric(&self) -> MetricId {
        self.metrics[0].metric_id
    }

    /// Declared row count must equal entities x horizon steps once the
    /// entity grid is known.
    pub fn check_row_count_against_grid(&self, entity_count: u64) -> Result<(), TaskModelError> {
        let derived = entity_count * u64::from(self.scope.step_count);
        if derived != self.output.required_row_count {
            return Err(TaskModelError::Invalid(format!(
                "declared required_row_count {} but {} entities x {} steps = {}",
                self.output.required_row_count, entity_count, self.scope.step_count, derived
            )));
        }
        Ok(())
    }
}

/// Derived view of the temporal rules: what may be observed, what must be
/// produced, and where the hidden period lies. Pure function of the task
/// file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConstraintSurface {
    pub observation_start: NaiveDate,
    pub observation_end: NaiveDate,
    pub output_mode: OutputMode,
    pub granularity: Granularity,
    pub hidden_start: NaiveDate,
    pub hidden_end: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    FullGridForecast,
}

impl TemporalConstraintSurface {
    pub fn hidden_dates(&self) -> Vec<NaiveDate> {
        self.hidden_start
            .iter_days()
            .take_while(|d| *d <= self.hidden_end)
            .collect()
    }
}

pub fn resolve_temporal_constraints(task: &TaskFile) -> TemporalConstraintSurface {
    TemporalConstraintSurface {
        observation_start: task.scope.history_start,
        observation_end: task.scope.history_end,
        output_mode: OutputMode::FullGridForecast,
        granularity: task.scope.granularity,
        hidden_start: task.scope.horizon_start,
        hidden_end: task.scope.horizon_end,
    }
}

/// True when the task collapses to a classical fixed-horizon forecast:
/// regular steps, no availability overrides, a fixed-length numeric output,
/// and exactly one predictive metric.
pub fn is_classical_degenerate(task: &TaskFile) -> bool {
    let regular = task.scope.horizon_dates().len() as u32 == task.scope.step_count;
    let no_overrides = task.constraints.feature_availability_overrides.is_empty();
    let fixed_numeric = task.output.format == OutputFormat::Csv && task.output.required_row_count > 0;
    let single_metric = task.metrics.len() == 1;
    regular && no_overrides && fixed_numeric && single_metric
}

/// The (validity, scores) pair for one candidate. Scores exist only when the
/// candidate is admissible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub validity: ValidityReport,
    pub scores: Option<MetricScores>,
    pub admissible: bool,
}

impl ValidationOutcome {
    pub fn new(validity: ValidityReport, scores: Option<MetricScores>) -> Self {
        let admissible = validity.all_passed();
        debug_assert!(
            scores.is_none() || admissible,
            "scores attached to an inadmissible outcome"
        );
        ValidationOutcome {
            validity,
            scores,
            admissible,
        }
    }

    pub fn primary_score(&self) -> Option<f64> {
        self.scores
            .as_ref()
            .and_then(|s| s.values.get(&s.primary).copied())
    }
}

/// True iff every named check in the report passed (vacuously true for an
/// empty check list, which the report flags with a warning).
pub fn admissible(outcome: &ValidationOutcome) -> bool {
    outcome.validity.all_passed()
}

// ---------------------------------------------------------------------------
// Task-file concrete syntax
// ---------------------------------------------------------------------------

#[derive(Default)]
struct RawSections {
    entries: Vec<(String, String, String)>, // (section, key, value)
}

fn split_sections(text: &str) -> Result<RawSections, TaskModelError> {
    let mut out = RawSections::default();
    let mut section = String::new();
    for (no, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        if section.is_empty() {
            return Err(TaskModelError::Invalid(format!(
                "line {}: key/value before any section header",
                no + 1
            )));
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            TaskModelError::Invalid(format!("line {}: expected `key = value`", no + 1))
        })?;
        out.entries.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
        ));
    }
    Ok(out)
}

struct SectionView<'a> {
    section: &'a str,
    entries: &'a [(String, String, String)],
}

impl<'a> SectionView<'a> {
    fn get(&self, key: &str) -> Option<&'a str> {
        self.entries
            .iter()
            .find(|(s, k, _)| s == self.section && k == key)
            .map(|(_, _, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&'a str, TaskModelError> {
        self.get(key)
            .ok_or_else(|| TaskModelError::MissingField(format!("{}.{}", self.section, key)))
    }

    fn all(&self, key: &str) -> Vec<&'a str> {
        self.entries
            .iter()
            .filter(|(s, k, _)| s == self.section && k == key)
            .map(|(_, _, v)| v.as_str())
            .collect()
    }

    fn others(&self, reserved: &[&str]) -> Vec<(&'a str, &'a str)> {
        self.entries
            .iter()
            .filter(|(s, k, _)| s == self.section && !reserved.contains(&k.as_str()))
            .map(|(_, k, v)| (k.as_str(), v.as_str()))
            .collect()
    }
}

fn parse_date(field: &str, value: &str) -> Result<NaiveDate, TaskModelError> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map_err(|_| TaskModelError::Invalid(format!("{field}: bad date `{value}`")))
}

fn parse_num<T: FromStr>(field: &str, value: &str) -> Result<T, TaskModelError> {
    value
        .parse::<T>()
        .map_err(|_| TaskModelError::Invalid(format!("{field}: bad number `{value}`")))
}

fn parse_bool(field: &str, value: &str) -> Result<bool, TaskModelError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(TaskModelError::Invalid(format!(
            "{field}: expected true/false, got `{other}`"
        ))),
    }
}

/// Parse the line-oriented task-file document. Parsing is total over the
/// grammar: the returned value satisfies every type invariant or an error is
/// raised, never a partially valid record.
pub fn parse_task_file(text: &str) -> Result<TaskFile, TaskModelError> {
    let raw = split_sections(text)?;
    let view = |s: &'static str| SectionView {
        section: s,
        entries: &raw.entries,
    };

    let scope_s = view("scope");
    let scope = AccessScope {
        history_start: parse_date("scope.history_start", scope_s.require("history_start")?)?,
        history_end: parse_date("scope.history_end", scope_s.require("history_end")?)?,
        horizon_start: parse_date("scope.horizon_start", scope_s.require("horizon_start")?)?,
        horizon_end: parse_date("scope.horizon_end", scope_s.require("horizon_end")?)?,
        step_count: parse_num("scope.step_count", scope_s.require("step_count")?)?,
        granularity: scope_s.require("granularity")?.parse()?,
        timezone: scope_s.require("timezone")?.to_string(),
    };

    let prior_s = view("prior");
    let seasonality_hints = match prior_s.get("seasonality_hint") {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|p| parse_num::<u32>("prior.seasonality_hint", p.trim()))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let prior = PriorKnowledge {
        domain_tag: prior_s.get("domain_tag").unwrap_or("").to_string(),
        notes: prior_s.all("note").iter().map(|s| s.to_string()).collect(),
        seasonality_hints,
    };

    let out_s = view("output");
    let format = match out_s.require("format")? {
        "csv" => OutputFormat::Csv,
        other => {
            return Err(TaskModelError::Invalid(format!(
                "output.format: unsupported `{other}`"
            )))
        }
    };
    let output = OutputForm {
        format,
        required_columns: out_s
            .require("required_columns")?
            .split(',')
            .map(|c| c.trim().to_string())
            .collect(),
        id_column: out_s.require("id_column")?.to_string(),
        value_column: out_s.require("value_column")?.to_string(),
        required_row_count: parse_num(
            "output.required_row_count",
            out_s.require("required_row_count")?,
        )?,
        ordering_rule: out_s.require("ordering_rule")?.parse()?,
    };

    let con_s = view("constraints");
    let reserved = [
        "leakage_boundary",
        "max_submissions",
        "non_negative_values",
        "magnitude_cap",
    ];
    let mut overrides = BTreeMap::new();
    for (name, date) in con_s.others(&reserved) {
        overrides.insert(
            name.to_string(),
            parse_date(&format!("constraints.{name}"), date)?,
        );
    }
    let constraints = ConstraintSet {
        leakage_boundary: parse_date(
            "constraints.leakage_boundary",
            con_s.require("leakage_boundary")?,
        )?,
        max_submissions: match con_s.get("max_submissions") {
            None => None,
            Some(v) => Some(parse_num("constraints.max_submissions", v)?),
        },
        non_negative_values: parse_bool(
            "constraints.non_negative_values",
            con_s.require("non_negative_values")?,
        )?,
        feature_availability_overrides: overrides,
        magnitude_cap: match con_s.get("magnitude_cap") {
            None => DEFAULT_MAGNITUDE_CAP,
            Some(v) => parse_num("constraints.magnitude_cap", v)?,
        },
    };

    let metrics_s = view("metrics");
    let metric_lines = metrics_s.all("metric");
    if metric_lines.is_empty() {
        return Err(TaskModelError::MissingField("metrics.metric".into()));
    }
    let metrics = metric_lines
        .iter()
        .map(|m| Ok(MetricSpec::lower_better(m.parse()?)))
        .collect::<Result<Vec<_>, TaskModelError>>()?;

    let end_s = view("endpoints");
    let endpoints = EndpointSpec {
        base_path: end_s.require("base_path")?.to_string(),
    };

    let task = TaskFile {
        scope,
        prior,
        output,
        constraints,
        metrics,
        endpoints,
    };
    task.check()?;
    Ok(task)
}

/// Render back to the concrete syntax. `parse_task_file(render_task_file(t))`
/// reproduces `t` field for field.
pub fn render_task_file(task: &TaskFile) -> String {
    let mut s = String::new();
    let scope = &task.scope;
    s.push_str("[scope]\n");
    s.push_str(&format!("history_start = {}\n", scope.history_start));
    s.push_str(&format!("history_end = {}\n", scope.history_end));
    s.push_str(&format!("horizon_start = {}\n", scope.horizon_start));
    s.push_str(&format!("horizon_end = {}\n", scope.horizon_end));
    s.push_str(&format!("step_count = {}\n", scope.step_count));
    s.push_str(&format!("granularity = {}\n", scope.granularity.as_str()));
    s.push_str(&format!("timezone = {}\n", scope.timezone));

    s.push_str("\n[prior]\n");
    if !task.prior.domain_tag.is_empty() {
        s.push_str(&format!("domain_tag = {}\n", task.prior.domain_tag));
    }
    for note in &task.prior.notes {
        s.push_str(&format!("note = {note}\n"));
    }
    if let Some(hints) = &task.prior.seasonality_hints {
        let list: Vec<String> = hints.iter().map(|h| h.to_string()).collect();
        s.push_str(&format!("seasonality_hint = {}\n", list.join(",")));
    }

    let out = &task.output;
    s.push_str("\n[output]\n");
    s.push_str("format = csv\n");
    s.push_str(&format!(
        "required_columns = {}\n",
        out.required_columns.join(",")
    ));
    s.push_str(&format!("id_column = {}\n", out.id_column));
    s.push_str(&format!("value_column = {}\n", out.value_column));
    s.push_str(&format!("required_row_count = {}\n", out.required_row_count));
    s.push_str(&format!("ordering_rule = {}\n", out.ordering_rule.as_str()));

    let con = &task.constraints;
    s.push_str("\n[constraints]\n");
    s.push_str(&format!("leakage_boundary = {}\n", con.leakage_boundary));
    if let Some(max) = con.max_submissions {
        s.push_str(&format!("max_submissions = {max}\n"));
    }
    s.push_str(&format!(
        "non_negative_values = {}\n",
        con.non_negative_values
    ));
    s.push_str(&format!("magnitude_cap = {}\n", con.magnitude_cap));
    for (name, date) in &con.feature_availability_overrides {
        s.push_str(&format!("{name} = {date}\n"));
    }

    s.push_str("\n[metrics]\n");
    for m in &task.metrics {
        s.push_str(&format!("metric = {}\n", m.metric_id.as_str()));
    }

    s.push_str("\n[endpoints]\n");
    s.push_str(&format!("base_path = {}\n", task.endpoints.base_path));
    s
}

// ---------------------------------------------------------------------------
// Workspace manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileRole {
    Train,
    TestSkeleton,
    Auxiliary,
    Metadata,
}

impl FileRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            FileRole::Train => "train",
            FileRole::TestSkeleton => "test_skeleton",
            FileRole::Auxiliary => "auxiliary",
            FileRole::Metadata => "metadata",
        }
    }
}

impl FromStr for FileRole {
    type Err = TaskModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(FileRole::Train),
            "test_skeleton" => Ok(FileRole::TestSkeleton),
            "auxiliary" => Ok(FileRole::Auxiliary),
            "metadata" => Ok(FileRole::Metadata),
            other => Err(TaskModelError::InvalidManifest(format!(
                "unknown file role `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file_name: String,
    pub role: FileRole,
    pub availability_end: Option<NaiveDate>,
    pub byte_length: u64,
    pub content_digest: String,
}

/// The exposed workspace: one entry per public file with its role, optional
/// availability truncation, and content digest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceManifest {
    pub entries: Vec<ManifestEntry>,
}

impl WorkspaceManifest {
    pub fn check(&self) -> Result<(), TaskModelError> {
        let mut names = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !names.insert(&e.file_name) {
                return Err(TaskModelError::InvalidManifest(format!(
                    "duplicate file name `{}`",
                    e.file_name
                )));
            }
        }
        let trains = self
            .entries
            .iter()
            .filter(|e| e.role == FileRole::Train)
            .count();
        if trains != 1 {
            return Err(TaskModelError::InvalidManifest(format!(
                "expected exactly one train entry, found {trains}"
            )));
        }
        let skeletons = self
            .entries
            .iter()
            .filter(|e| e.role == FileRole::TestSkeleton)
            .count();
        if skeletons > 1 {
            return Err(TaskModelError::InvalidManifest(format!(
                "at most one test_skeleton entry allowed, found {skeletons}"
            )));
        }
        Ok(())
    }

    /// Every availability_end in the manifest must match a constraint
    /// override in the task file.
    pub fn check_against(&self, task: &TaskFile) -> Result<(), TaskModelError> {
        for e in &self.entries {
            if let Some(end) = e.availability_end {
                match task
                    .constraints
                    .feature_availability_overrides
                    .get(&e.file_name)
                {
                    Some(d) if *d == end => {}
                    _ => {
                        return Err(TaskModelError::InvalidManifest(format!(
                            "availability_end {} for `{}` has no matching constraint override",
                            end, e.file_name
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.file_name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("[workspace]\n");
        for e in &self.entries {
            let end = e
                .availability_end
                .map(|d| d.to_string())
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "file = {},{},{},{},{}\n",
                e.file_name,
                e.role.as_str(),
                end,
                e.byte_length,
                e.content_digest
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TaskModelError> {
        let raw = split_sections(text)?;
        let mut entries = Vec::new();
        for (section, key, value) in &raw.entries {
            if section != "workspace" || key != "file" {
                return Err(TaskModelError::InvalidManifest(format!(
                    "unexpected entry [{section}] {key}"
                )));
            }
            let parts: Vec<&str> = value.split(',').map(|p| p.trim()).collect();
            if parts.len() != 5 {
                return Err(TaskModelError::InvalidManifest(format!(
                    "expected 5 comma-separated fields, got {}",
                    parts.len()
                )));
            }
            let availability_end = if parts[2] == "-" {
                None
            } else {
                Some(parse_date("manifest.availability_end", parts[2])?)
            };
            entries.push(ManifestEntry {
                file_name: parts[0].to_string(),
                role: parts[1].parse()?,
                availability_end,
                byte_length: parse_num("manifest.byte_length", parts[3])?,
                content_digest: parts[4].to_string(),
            });
        }
        let manifest = WorkspaceManifest { entries };
        manifest.check()?;
        Ok(manifest)
    }
}
