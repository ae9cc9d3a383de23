//! Submission validity checks and scoring.
//!
//! A submission is admissible only when every named check passes; scores are
//! computed only for admissible submissions, so a malformed payload can never
//! earn a number. Checks never short-circuit: the report always carries all
//! ten verdicts so a client sees every problem at once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_interface::{grid_rows, EntityKey, SkeletonRow, UnifiedSeriesTable};
use crate::task_model::{MetricId, TaskFile, ValidationOutcome};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at pair {0}")]
    NonFiniteValue(usize),
    #[error("negative value at pair {0}")]
    NegativeValue(usize),
    #[error("unreadable payload: {0}")]
    UnreadablePayload(String),
    #[error("prediction keys mismatch truth: {missing} missing, {extra} unexpected")]
    KeyMismatch { missing: usize, extra: usize },
    #[error("no overlapping keys between predictions and truth")]
    EmptyIntersection,
}

// ---------------------------------------------------------------------------
// Validity checks
// ---------------------------------------------------------------------------

/// Stable identifiers for the named checks, in report order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    HorizonBounds,
    StepCount,
    HiddenBoundary,
    RequiredColumns,
    RowCount,
    IdAlignment,
    Duplicates,
    MissingValues,
    Sign,
    Magnitude,
}

impl CheckId {
    pub const ALL: [CheckId; 10] = [
        CheckId::HorizonBounds,
        CheckId::StepCount,
        CheckId::HiddenBoundary,
        CheckId::RequiredColumns,
        CheckId::RowCount,
        CheckId::IdAlignment,
        CheckId::Duplicates,
        CheckId::MissingValues,
        CheckId::Sign,
        CheckId::Magnitude,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckId::HorizonBounds => "horizon_bounds",
            CheckId::StepCount => "step_count",
            CheckId::HiddenBoundary => "hidden_boundary",
            CheckId::RequiredColumns => "required_columns",
            CheckId::RowCount => "row_count",
            CheckId::IdAlignment => "id_alignment",
            CheckId::Duplicates => "duplicates",
            CheckId::MissingValues => "missing_values",
            CheckId::Sign => "sign",
            CheckId::Magnitude => "magnitude",
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityCheck {
    pub id: CheckId,
    pub passed: bool,
    pub detail: String,
}

impl ValidityCheck {
    fn pass(id: CheckId, detail: impl Into<String>) -> Self {
        ValidityCheck {
            id,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(id: CheckId, detail: impl Into<String>) -> Self {
        ValidityCheck {
            id,
            passed: false,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub checks: Vec<ValidityCheck>,
    /// Non-fatal notes, e.g. checks that passed vacuously for lack of context.
    pub warnings: Vec<String>,
}

impl ValidityReport {
    pub fn from_checks(checks: Vec<ValidityCheck>, mut warnings: Vec<String>) -> Self {
        if checks.is_empty() {
            warnings.push("no checks were evaluated; the report passes vacuously".into());
        }
        ValidityReport { checks, warnings }
    }

    /// Vacuously true for an empty check list; `from_checks` flags that case
    /// with a warning so it cannot pass silently.
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&ValidityCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// One line per check: `<id> <pass|fail> <detail>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&format!(
                "{} {} {}\n",
                check.id,
                if check.passed { "pass" } else { "fail" },
                check.detail
            ));
        }
        for warning in &self.warnings {
            out.push_str(&format!("warning - {warning}\n"));
        }
        out
    }
}

/// Metric values for an admissible submission; `primary` names the metric
/// that ranks leaderboards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub primary: MetricId,
    pub values: BTreeMap<MetricId, f64>,
}

impl MetricScores {
    pub fn primary_value(&self) -> f64 {
        self.values[&self.primary]
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub prediction: f64,
    pub truth: f64,
}

fn check_pairs(pairs: &[ScoredPair], reject_negative: bool) -> Result<(), GateError> {
    if pairs.is_empty() {
        return Err(GateError::EmptyInput);
    }
    for (i, pair) in pairs.iter().enumerate() {
        if !pair.prediction.is_finite() || !pair.truth.is_finite() {
            return Err(GateError::NonFiniteValue(i));
        }
        if reject_negative && (pair.prediction < 0.0 || pair.truth < 0.0) {
            return Err(GateError::NegativeValue(i));
        }
    }
    Ok(())
}

/// Root mean squared logarithmic error over `ln(x + 1)`. Demands
/// non-negative inputs; the log1p form keeps small counts stable.
pub fn score_rmsle(pairs: &[ScoredPair]) -> Result<f64, GateError> {
    check_pairs(pairs, true)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            let d = p.prediction.ln_1p() - p.truth.ln_1p();
            d * d
        })
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

pub fn score_mae(pairs: &[ScoredPair]) -> Result<f64, GateError> {
    check_pairs(pairs, false)?;
    let sum: f64 = pairs.iter().map(|p| (p.prediction - p.truth).abs()).sum();
    Ok(sum / pairs.len() as f64)
}

pub fn score_rmse(pairs: &[ScoredPair]) -> Result<f64, GateError> {
    check_pairs(pairs, false)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| (p.prediction - p.truth).powi(2))
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

pub fn score_metric(metric: MetricId, pairs: &[ScoredPair]) -> Result<f64, GateError> {
    match metric {
        MetricId::Rmsle => score_rmsle(pairs),
        MetricId::Mae => score_mae(pairs),
        MetricId::Rmse => score_rmse(pairs),
    }
}

/// Score every metric the task declares; the first one is primary.
pub fn score_all(task: &TaskFile, pairs: &[ScoredPair]) -> Result<MetricScores, GateError> {
    if task.metrics.is_empty() {
        return Err(GateError::EmptyInput);
    }
    let mut values = BTreeMap::new();
    for spec in &task.metrics {
        values.insert(spec.metric_id, score_metric(spec.metric_id, pairs)?);
    }
    Ok(MetricScores {
        primary: task.primary_metric(),
        values,
    })
}

/// Exact join of predictions onto truth by id. Any asymmetry is an error:
/// scoring a partial or padded submission would be meaningless.
pub fn join_by_id(
    predictions: &BTreeMap<u64, f64>,
    truth_by_id: &BTreeMap<u64, f64>,
) -> Result<Vec<ScoredPair>, GateError> {
    let missing = truth_by_id
        .keys()
        .filter(|k| !predictions.contains_key(k))
        .count();
    let extra = predictions
        .keys()
        .filter(|k| !truth_by_id.contains_key(k))
        .count();
    if missing == truth_by_id.len() || predictions.is_empty() {
        return Err(GateError::EmptyIntersection);
    }
    if missing > 0 || extra > 0 {
        return Err(GateError::KeyMismatch { missing, extra });
    }
    Ok(truth_by_id
        .iter()
        .map(|(id, truth)| ScoredPair {
            prediction: predictions[id],
            truth: *truth,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Submission parsing and validation
// ---------------------------------------------------------------------------

/// Raw parse of a submission CSV. Cells that fail to parse stay `None`; the
/// named checks turn them into verdicts instead of hard errors.
#[derive(Debug, Clone)]
pub struct ParsedSubmission {
    pub columns: Vec<String>,
    pub has_required_columns: bool,
    /// (id cell, value cell) per record; `None` marks unparseable or absent.
    pub rows: Vec<(Option<u64>, Option<f64>)>,
}

pub fn parse_submission(payload: &[u8], task: &TaskFile) -> Result<ParsedSubmission, GateError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(payload);
    let headers = reader
        .headers()
        .map_err(|e| GateError::UnreadablePayload(e.to_string()))?
        .clone();
    let columns: Vec<String> = headers.iter().map(str::to_string).collect();
    let id_idx = columns.iter().position(|c| c == &task.output.id_column);
    let value_idx = columns.iter().position(|c| c == &task.output.value_column);
    let has_required_columns = task
        .output
        .required_columns
        .iter()
        .all(|c| columns.iter().any(|h| h == c));
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| GateError::UnreadablePayload(e.to_string()))?;
        let id = id_idx
            .and_then(|i| record.get(i))
            .and_then(|c| c.trim().parse::<u64>().ok());
        let value = value_idx
            .and_then(|i| record.get(i))
            .and_then(|c| c.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite());
        rows.push((id, value));
    }
    Ok(ParsedSubmission {
        columns,
        has_required_columns,
        rows,
    })
}

/// Side information that lets the date-aware and magnitude checks run: which
/// date and entity each id stands for, and the training maximum per entity.
#[derive(Debug, Clone, Default)]
pub struct SubmissionContext {
    pub id_dates: BTreeMap<u64, NaiveDate>,
    pub id_entities: BTreeMap<u64, EntityKey>,
    pub entity_max_target: BTreeMap<EntityKey, f64>,
}

impl SubmissionContext {
    pub fn from_parts(skeleton: &[SkeletonRow], train: &UnifiedSeriesTable) -> Self {
        SubmissionContext {
            id_dates: skeleton.iter().map(|r| (r.id, r.date)).collect(),
            id_entities: skeleton.iter().map(|r| (r.id, r.entity.clone())).collect(),
            entity_max_target: train.max_target_by_entity(),
        }
    }
}

/// Run all ten named checks against a submission payload. Checks that need
/// context pass vacuously without it and the report says so in a warning.
pub fn validate_submission(
    payload: &[u8],
    task: &TaskFile,
    ctx: Option<&SubmissionContext>,
) -> Result<ValidityReport, GateError> {
    let parsed = parse_submission(payload, task)?;
    let mut checks = Vec::with_capacity(CheckId::ALL.len());
    let mut warnings = Vec::new();

    let ids: Vec<Option<u64>> = parsed.rows.iter().map(|(id, _)| *id).collect();
    let known_dates: Vec<NaiveDate> = ctx
        .map(|c| {
            ids.iter()
                .flatten()
                .filter_map(|id| c.id_dates.get(id).copied())
                .collect()
        })
        .unwrap_or_default();

    match ctx {
        Some(_) => {
            let out_of_horizon = known_dates
                .iter()
                .filter(|d| **d < task.scope.horizon_start || **d > task.scope.horizon_end)
                .count();
            checks.push(if out_of_horizon == 0 {
                ValidityCheck::pass(
                    CheckId::HorizonBounds,
                    format!("{} dated rows inside the horizon", known_dates.len()),
                )
            } else {
                ValidityCheck::fail(
                    CheckId::HorizonBounds,
                    format!("{out_of_horizon} rows dated outside the horizon"),
                )
            });

            let distinct: BTreeSet<NaiveDate> = known_dates.iter().copied().collect();
            let expected = task.scope.step_count as usize;
            checks.push(if distinct.len() == expected {
                ValidityCheck::pass(CheckId::StepCount, format!("{expected} distinct dates"))
            } else {
                ValidityCheck::fail(
                    CheckId::StepCount,
                    format!("expected {expected} distinct dates, got {}", distinct.len()),
                )
            });

            let boundary = task.constraints.leakage_boundary;
            let behind = known_dates.iter().filter(|d| **d <= boundary).count();
            checks.push(if behind == 0 {
                ValidityCheck::pass(
                    CheckId::HiddenBoundary,
                    format!("no rows at or before {boundary}"),
                )
            } else {
                ValidityCheck::fail(
                    CheckId::HiddenBoundary,
                    format!("{behind} rows dated at or before the boundary {boundary}"),
                )
            });
        }
        None => {
            for id in [
                CheckId::HorizonBounds,
                CheckId::StepCount,
                CheckId::HiddenBoundary,
            ] {
                checks.push(ValidityCheck::pass(id, "no date context; vacuous"));
                warnings.push(format!("{id} passed vacuously: no id-to-date context"));
            }
        }
    }

    checks.push(if parsed.has_required_columns {
        ValidityCheck::pass(
            CheckId::RequiredColumns,
            format!("columns: {}", parsed.columns.join(",")),
        )
    } else {
        let missing: Vec<&str> = task
            .output
            .required_columns
            .iter()
            .filter(|c| !parsed.columns.iter().any(|h| h == *c))
            .map(String::as_str)
            .collect();
        ValidityCheck::fail(
            CheckId::RequiredColumns,
            format!("missing columns: {}", missing.join(",")),
        )
    });

    let expected_rows = task.output.required_row_count;
    checks.push(if parsed.rows.len() as u64 == expected_rows {
        ValidityCheck::pass(CheckId::RowCount, format!("{expected_rows} rows"))
    } else {
        ValidityCheck::fail(
            CheckId::RowCount,
            format!("expected {expected_rows} rows, got {}", parsed.rows.len()),
        )
    });

    let expected_ids: BTreeSet<u64> = match ctx {
        Some(c) => c.id_dates.keys().copied().collect(),
        None => (0..expected_rows).collect(),
    };
    let unparseable = ids.iter().filter(|id| id.is_none()).count();
    let submitted: BTreeSet<u64> = ids.iter().flatten().copied().collect();
    let missing = expected_ids.difference(&submitted).count();
    let unexpected = submitted.difference(&expected_ids).count();
    checks.push(if missing == 0 && unexpected == 0 && unparseable == 0 {
        ValidityCheck::pass(
            CheckId::IdAlignment,
            format!("all {} expected ids present", expected_ids.len()),
        )
    } else {
        ValidityCheck::fail(
            CheckId::IdAlignment,
            format!("{missing} missing, {unexpected} unexpected, {unparseable} unparseable"),
        )
    });

    let duplicate_count = ids.iter().flatten().count() - submitted.len();
    checks.push(if duplicate_count == 0 {
        ValidityCheck::pass(CheckId::Duplicates, "no repeated ids")
    } else {
        ValidityCheck::fail(
            CheckId::Duplicates,
            format!("{duplicate_count} repeated ids"),
        )
    });

    let missing_values = parsed.rows.iter().filter(|(_, v)| v.is_none()).count();
    checks.push(if missing_values == 0 {
        ValidityCheck::pass(CheckId::MissingValues, "every value cell parseable")
    } else {
        ValidityCheck::fail(
            CheckId::MissingValues,
            format!("{missing_values} missing or unparseable values"),
        )
    });

    if task.constraints.non_negative_values {
        let negative = parsed
            .rows
            .iter()
            .filter_map(|(_, v)| *v)
            .filter(|v| *v < 0.0)
            .count();
        checks.push(if negative == 0 {
            ValidityCheck::pass(CheckId::Sign, "all values non-negative")
        } else {
            ValidityCheck::fail(CheckId::Sign, format!("{negative} negative values"))
        });
    } else {
        checks.push(ValidityCheck::pass(CheckId::Sign, "sign unconstrained"));
    }

    let magnitude_reference = ctx.filter(|c| !c.entity_max_target.is_empty());
    match magnitude_reference {
        Some(c) => {
            let cap = task.constraints.magnitude_cap;
            let mut violations = 0usize;
            for (id, value) in &parsed.rows {
                let (Some(id), Some(value)) = (id, value) else {
                    continue;
                };
                let reference = c
                    .id_entities
                    .get(id)
                    .and_then(|e| c.entity_max_target.get(e).copied())
                    .unwrap_or(0.0);
                // Floor of 1 keeps all-zero histories from forbidding any
                // non-zero forecast outright.
                let threshold = cap * reference.max(1.0);
                if *value > threshold {
                    violations += 1;
                }
            }
            checks.push(if violations == 0 {
                ValidityCheck::pass(
                    CheckId::Magnitude,
                    format!("all values within {cap}x the entity maximum"),
                )
            } else {
                ValidityCheck::fail(
                    CheckId::Magnitude,
                    format!("{violations} values beyond {cap}x the entity maximum"),
                )
            });
        }
        None => {
            checks.push(ValidityCheck::pass(
                CheckId::Magnitude,
                "no training reference; vacuous",
            ));
            warnings.push("magnitude passed vacuously: no training reference".into());
        }
    }

    debug_assert_eq!(checks.len(), CheckId::ALL.len());
    debug_assert!(checks.iter().map(|c| c.id).eq(CheckId::ALL));
    Ok(ValidityReport::from_checks(checks, warnings))
}

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

/// Gate plus scorer bound to one task and its sealed truth. The only path to
/// a score runs through a fully passing validity report.
#[derive(Debug, Clone)]
pub struct Evaluator {
    task: TaskFile,
    ctx: SubmissionContext,
    truth_by_id: BTreeMap<u64, f64>,
}

impl Evaluator {
    pub fn new(task: TaskFile, truth: &UnifiedSeriesTable) -> Result<Self, GateError> {
        if truth.rows.is_empty() {
            return Err(GateError::EmptyInput);
        }
        let mut ctx = SubmissionContext::default();
        let mut truth_by_id = BTreeMap::new();
        for (id, row) in grid_rows(truth) {
            ctx.id_dates.insert(id, row.date);
            ctx.id_entities.insert(id, row.entity.clone());
            truth_by_id.insert(id, row.target);
        }
        Ok(Evaluator {
            task,
            ctx,
            truth_by_id,
        })
    }

    /// Attach per-entity training maxima so the magnitude check has teeth.
    pub fn with_training_reference(mut self, train: &UnifiedSeriesTable) -> Self {
        self.ctx.entity_max_target = train.max_target_by_entity();
        self
    }

    pub fn task(&self) -> &TaskFile {
        &self.task
    }

    pub fn context(&self) -> &SubmissionContext {
        &self.ctx
    }

    pub fn evaluate(&self, payload: &[u8]) -> Result<ValidationOutcome, GateError> {
        let report = validate_submission(payload, &self.task, Some(&self.ctx))?;
        if !report.all_passed() {
            return Ok(ValidationOutcome::new(report, None));
        }
        let parsed = parse_submission(payload, &self.task)?;
        let predictions: BTreeMap<u64, f64> = parsed
            .rows
            .iter()
            .filter_map(|(id, value)| Some(((*id)?, (*value)?)))
            .collect();
        let pairs = join_by_id(&predictions, &self.truth_by_id)?;
        let scores = score_all(&self.task, &pairs)?;
        Ok(ValidationOutcome::new(report, Some(scores)))
    }
}
