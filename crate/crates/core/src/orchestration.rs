//! The governed run loop: deterministic scripted roles drive strategy
//! branches through review, rollback, and completion against a running task
//! service, leaving behind an event log, a memory directory, figures, and a
//! final report. Also home to the three baseline forecasters the scripted
//! constructor ships.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_interface::{
    check_boundary, ingest_table, parse_skeleton, write_line_figure, DataError, EntityKey,
    LeakageReport, LeakageVerdict, SchemaMap, SkeletonRow, UnifiedSeriesTable, TEST_FILE,
    TRAIN_FILE,
};
use crate::memory_store::{
    describe_drift, evaluate_completion_gate, CheckStatus, CompletionGateRecord, CompletionState,
    DecisionEntry, DecisionLedger, DeliveredFeature, FeatureLedger, Freshness, Housekeeping,
    InitialPromptAnchor, MemoryError, MemoryStore, Polarity, PriorEntry, PreStopCheck,
    ProgressLedger, RelationEdge, RoleChallenge, SuggestedAction,
};
use crate::protocol_engine::{
    absorb_memory_proposal, compaction_due, read_events, replay, resolve_authority,
    save_rebuttals, transition, Absorption, AbsorptionDecision, Acceptance, Autonomy,
    CompactionTrigger, CompactionView, CompletionSignal, ContextMode, CurrentArtifact,
    DispatchPacket, EventLog, EventType, IssueResponse, LifecycleState, MemorySyncProposal,
    ProposalKind, ProtocolError, ProtocolState, RebuttalLedger, RecheckVerdict, Reportback,
    ReviewIssue, RoleId, RuntimeEvent, SignalKind, Stage,
};
use crate::task_model::{AccessScope, Granularity, ManifestEntry, TaskFile, TaskModelError};
use crate::task_server::{LeaderboardRow, SubmissionRecord, SUBMITTER_HEADER};
use crate::util::sha256_hex;
use crate::validation_gate::{score_rmsle, GateError, ScoredPair};

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("entity `{0}` has no observations before the boundary")]
    EmptyHistory(String),
    #[error("smoothing weight {0} outside (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("missing role `{0}`")]
    MissingRole(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("task server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("server rejected the request with status {status}: {message}")]
    ServerRejected { status: u16, message: String },
    #[error("forecast missing a cell for {0}")]
    IncompleteForecast(String),
    #[error("backtest infeasible: {0}")]
    Backtest(String),
    #[error("artifact `{path}` outside the permitted scope of `{role}`")]
    ScopeViolation { role: RoleId, path: String },
    #[error("run invariant broken: {0}")]
    InvariantViolated(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Task(#[from] TaskModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Baseline forecasters
// ---------------------------------------------------------------------------

/// One prediction per (entity, hidden date) cell.
pub type ForecastGrid = BTreeMap<(EntityKey, NaiveDate), f64>;

fn entity_label(entity: &EntityKey) -> String {
    format!("{}/{}", entity.store_id, entity.family)
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite targets"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-entity median of the last 7 observed dates at or before the history
/// end, held constant across the horizon. Entities with fewer than 7
/// observations fall back to the median of what they have.
pub fn median_baseline_forecast(
    table: &UnifiedSeriesTable,
    scope: &AccessScope,
) -> Result<ForecastGrid, OrchestrationError> {
    let horizon = scope.horizon_dates();
    let mut grid = ForecastGrid::new();
    for (entity, history) in table.by_entity() {
        let observed: Vec<f64> = history
            .iter()
            .filter(|(d, _)| *d <= scope.history_end)
            .map(|(_, y)| *y)
            .collect();
        if observed.is_empty() {
            return Err(OrchestrationError::EmptyHistory(entity_label(&entity)));
        }
        let window = observed[observed.len().saturating_sub(7)..].to_vec();
        let level = median_of(window).max(0.0);
        for date in &horizon {
            grid.insert((entity.clone(), *date), level);
        }
    }
    Ok(grid)
}

/// Same-weekday value from the previous week wherever that observation sits
/// behind the boundary; every remaining cell comes from the fallback
/// forecaster. The attached report is the boundary check for lag 7.
pub fn weekday_lag_forecast<F>(
    table: &UnifiedSeriesTable,
    scope: &AccessScope,
    fallback: F,
) -> Result<(ForecastGrid, LeakageReport), OrchestrationError>
where
    F: Fn(&UnifiedSeriesTable, &AccessScope) -> Result<ForecastGrid, OrchestrationError>,
{
    let report = check_boundary("target_lag_7", 7, scope);
    let fallback_grid = fallback(table, scope)?;
    let index = table.index();
    let mut grid = ForecastGrid::new();
    for (entity, _) in table.by_entity() {
        for date in scope.horizon_dates() {
            let source = date - Days::new(7);
            let lagged = if report.valid_dates.contains(&date) {
                index.get(&(entity.clone(), source)).copied()
            } else {
                None
            };
            let value = match lagged {
                Some(y) => y,
                None => *fallback_grid.get(&(entity.clone(), date)).ok_or_else(|| {
                    OrchestrationError::IncompleteForecast(format!(
                        "{} @ {date}",
                        entity_label(&entity)
                    ))
                })?,
            };
            grid.insert((entity.clone(), date), value.max(0.0));
        }
    }
    Ok((grid, report))
}

/// Simple exponential smoothing: the level starts at the first observation
/// and the final level is held across the horizon.
pub fn ses_forecast(
    table: &UnifiedSeriesTable,
    scope: &AccessScope,
    alpha: f64,
) -> Result<ForecastGrid, OrchestrationError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(OrchestrationError::AlphaOutOfRange(alpha));
    }
    let horizon = scope.horizon_dates();
    let mut grid = ForecastGrid::new();
    for (entity, history) in table.by_entity() {
        let mut level: Option<f64> = None;
        for (date, y) in &history {
            if *date > scope.history_end {
                continue;
            }
            level = Some(match level {
                None => *y,
                Some(l) => alpha * y + (1.0 - alpha) * l,
            });
        }
        let level =
            level.ok_or_else(|| OrchestrationError::EmptyHistory(entity_label(&entity)))?;
        for date in &horizon {
            grid.insert((entity.clone(), *date), level.max(0.0));
        }
    }
    Ok(grid)
}

/// Serialize a grid as a submission payload in skeleton order.
pub fn render_submission(
    skeleton: &[SkeletonRow],
    grid: &ForecastGrid,
    task: &TaskFile,
) -> Result<Vec<u8>, OrchestrationError> {
    let mut out = String::new();
    out.push_str(&format!(
        "{},{}\n",
        task.output.id_column, task.output.value_column
    ));
    for row in skeleton {
        let value = grid.get(&(row.entity.clone(), row.date)).ok_or_else(|| {
            OrchestrationError::IncompleteForecast(format!(
                "{} @ {}",
                entity_label(&row.entity),
                row.date
            ))
        })?;
        out.push_str(&format!("{},{}\n", row.id, value.max(0.0)));
    }
    Ok(out.into_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestOutcome {
    pub rmsle: f64,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub rows: usize,
}

/// Hold out the last `horizon_len` observed dates of the training table and
/// score a forecaster against them. The forecaster only ever sees the
/// truncated table, so it cannot read the validation targets.
pub fn local_backtest<F>(
    train: &UnifiedSeriesTable,
    horizon_len: u32,
    forecaster: F,
) -> Result<BacktestOutcome, OrchestrationError>
where
    F: Fn(&UnifiedSeriesTable, &AccessScope) -> Result<ForecastGrid, OrchestrationError>,
{
    let mut dates: Vec<NaiveDate> = train
        .rows
        .iter()
        .map(|r| r.date)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if dates.len() <= horizon_len as usize {
        return Err(OrchestrationError::Backtest(format!(
            "{} observed dates cannot hold out {horizon_len}",
            dates.len()
        )));
    }
    let window: Vec<NaiveDate> = dates.split_off(dates.len() - horizon_len as usize);
    let history_end = *dates.last().expect("nonempty history");
    let truncated = UnifiedSeriesTable {
        rows: train
            .rows
            .iter()
            .filter(|r| r.date <= history_end)
            .cloned()
            .collect(),
        frequency: train.frequency,
        timezone: train.timezone.clone(),
        cutoff: Some(history_end),
        splits: Vec::new(),
    };
    let scope = AccessScope {
        history_start: dates[0],
        history_end,
        horizon_start: window[0],
        horizon_end: *window.last().expect("nonempty window"),
        step_count: horizon_len,
        granularity: Granularity::Daily,
        timezone: train.timezone.clone(),
    };
    let grid = forecaster(&truncated, &scope)?;
    let index = train.index();
    let mut pairs = Vec::new();
    for ((entity, date), prediction) in &grid {
        if let Some(actual) = index.get(&(entity.clone(), *date)) {
            pairs.push(ScoredPair {
                prediction: *prediction,
                truth: *actual,
            });
        }
    }
    if pairs.is_empty() {
        return Err(OrchestrationError::Backtest(
            "no overlapping cells between forecast and held-out window".into(),
        ));
    }
    Ok(BacktestOutcome {
        rmsle: score_rmsle(&pairs)?,
        window_start: window[0],
        window_end: *window.last().expect("nonempty window"),
        rows: pairs.len(),
    })
}

// ---------------------------------------------------------------------------
// Strategy branches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Open,
    Leading,
    Merged,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyBranch {
    pub branch_id: String,
    pub wave: u32,
    pub description: String,
    pub comparison_point: String,
    pub status: BranchStatus,
    pub leakage_verdict: Option<LeakageVerdict>,
    /// Revisions made without producing any new evidence artifact; the
    /// fixation trigger watches this counter.
    pub revisions_without_new_evidence: u32,
    pub backtest_rmsle: Option<f64>,
}

impl StrategyBranch {
    pub fn new(branch_id: &str, wave: u32, description: &str, comparison_point: &str) -> Self {
        StrategyBranch {
            branch_id: branch_id.to_string(),
            wave,
            description: description.to_string(),
            comparison_point: comparison_point.to_string(),
            status: BranchStatus::Open,
            leakage_verdict: None,
            revisions_without_new_evidence: 0,
            backtest_rmsle: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchTable {
    pub branches: Vec<StrategyBranch>,
}

impl BranchTable {
    pub fn get(&self, id: &str) -> Option<&StrategyBranch> {
        self.branches.iter().find(|b| b.branch_id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut StrategyBranch> {
        self.branches.iter_mut().find(|b| b.branch_id == id)
    }

    pub fn open_in_wave(&self, wave: u32) -> usize {
        self.branches
            .iter()
            .filter(|b| b.wave == wave && b.status != BranchStatus::Abandoned)
            .count()
    }

    pub fn active(&self) -> impl Iterator<Item = &StrategyBranch> {
        self.branches
            .iter()
            .filter(|b| b.status != BranchStatus::Abandoned)
    }

    pub fn leader(&self) -> Option<&StrategyBranch> {
        self.branches
            .iter()
            .find(|b| b.status == BranchStatus::Leading)
    }

    /// A branch whose boundary verdict is invalid may never lead.
    pub fn set_leading(&mut self, id: &str) -> Result<(), OrchestrationError> {
        let candidate = self
            .get(id)
            .ok_or_else(|| OrchestrationError::InvariantViolated(format!("no branch `{id}`")))?;
        if candidate.leakage_verdict == Some(LeakageVerdict::Invalid) {
            return Err(OrchestrationError::InvariantViolated(format!(
                "branch `{id}` has an invalid boundary verdict and cannot lead"
            )));
        }
        for branch in &mut self.branches {
            if branch.status == BranchStatus::Leading {
                branch.status = BranchStatus::Open;
            }
        }
        self.get_mut(id).expect("checked above").status = BranchStatus::Leading;
        Ok(())
    }

    /// Table-level discipline: no invalid leader, and at least two lines
    /// open in wave 0 when the task is a public benchmark.
    pub fn check(&self, public_benchmark: bool) -> Result<(), OrchestrationError> {
        if let Some(leader) = self.leader() {
            if leader.leakage_verdict == Some(LeakageVerdict::Invalid) {
                return Err(OrchestrationError::InvariantViolated(format!(
                    "leading branch `{}` has an invalid boundary verdict",
                    leader.branch_id
                )));
            }
        }
        if public_benchmark && self.open_in_wave(0) < 2 {
            return Err(OrchestrationError::InvariantViolated(
                "a public-benchmark task needs at least two branches open in wave 0".into(),
            ));
        }
        Ok(())
    }

    pub fn serialized(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("branch table serializes")
    }
}

// ---------------------------------------------------------------------------
// Rollback triggers
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RollbackKind {
    OneStrategyFixation,
    UnconsumedArtifacts,
    WeakValidation,
    TemporalAmbiguity,
    PrematureCompletion,
}

impl RollbackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RollbackKind::OneStrategyFixation => "one_strategy_fixation",
            RollbackKind::UnconsumedArtifacts => "unconsumed_artifacts",
            RollbackKind::WeakValidation => "weak_validation",
            RollbackKind::TemporalAmbiguity => "temporal_ambiguity",
            RollbackKind::PrematureCompletion => "premature_completion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackTrigger {
    pub kind: RollbackKind,
    pub evidence: String,
}

/// Revisions of one branch without new evidence before fixation fires.
pub const FIXATION_REVISION_LIMIT: u32 = 3;

/// What the trigger predicates look at, extracted from the live run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunView {
    pub revisions_without_new_evidence: BTreeMap<String, u32>,
    pub uncited_artifacts: Vec<String>,
    pub scored_without_validation: Vec<String>,
    pub unresolved_constraint_fields: Vec<String>,
    pub stop_attempted_with_open_blockers: bool,
}

/// Evaluate all five trigger predicates against the view.
pub fn detect_rollback(view: &RunView) -> Vec<RollbackTrigger> {
    let mut triggers = Vec::new();
    for (branch, count) in &view.revisions_without_new_evidence {
        if *count >= FIXATION_REVISION_LIMIT {
            triggers.push(RollbackTrigger {
                kind: RollbackKind::OneStrategyFixation,
                evidence: format!("branch `{branch}` revised {count} times with no new evidence"),
            });
            break;
        }
    }
    if !view.uncited_artifacts.is_empty() {
        triggers.push(RollbackTrigger {
            kind: RollbackKind::UnconsumedArtifacts,
            evidence: format!(
                "artifacts never referenced by any report: {}",
                view.uncited_artifacts.join(", ")
            ),
        });
    }
    if !view.scored_without_validation.is_empty() {
        triggers.push(RollbackTrigger {
            kind: RollbackKind::WeakValidation,
            evidence: format!(
                "scored candidates lacking a local check or baseline comparison: {}",
                view.scored_without_validation.join(", ")
            ),
        });
    }
    if !view.unresolved_constraint_fields.is_empty() {
        triggers.push(RollbackTrigger {
            kind: RollbackKind::TemporalAmbiguity,
            evidence: format!(
                "unresolved constraint fields: {}",
                view.unresolved_constraint_fields.join(", ")
            ),
        });
    }
    if view.stop_attempted_with_open_blockers {
        triggers.push(RollbackTrigger {
            kind: RollbackKind::PrematureCompletion,
            evidence: "stop attempted while blockers were open".into(),
        });
    }
    triggers
}

// ---------------------------------------------------------------------------
// Server client
// ---------------------------------------------------------------------------

/// Blocking client for the task service endpoints.
pub struct ServerClient {
    base: String,
    submitter: String,
}

impl ServerClient {
    pub fn new(base_url: &str, submitter: &str) -> Self {
        ServerClient {
            base: base_url.trim_end_matches('/').to_string(),
            submitter: submitter.to_string(),
        }
    }

    fn get(&self, path: &str) -> Result<(u16, String), OrchestrationError> {
        let url = format!("{}{path}", self.base);
        let mut response = ureq::get(&url)
            .config()
            .http_status_as_error(false)
            .build()
            .call()
            .map_err(|e| OrchestrationError::ServerUnreachable(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| OrchestrationError::ServerUnreachable(e.to_string()))?;
        Ok((status, body))
    }

    fn expect_ok(&self, path: &str) -> Result<String, OrchestrationError> {
        let (status, body) = self.get(path)?;
        if status != 200 {
            return Err(OrchestrationError::ServerRejected {
                status,
                message: body,
            });
        }
        Ok(body)
    }

    pub fn list_files(&self) -> Result<Vec<ManifestEntry>, OrchestrationError> {
        Ok(serde_json::from_str(&self.expect_ok("/files")?)?)
    }

    pub fn fetch_file(&self, name: &str) -> Result<Vec<u8>, OrchestrationError> {
        Ok(self.expect_ok(&format!("/files/{name}"))?.into_bytes())
    }

    pub fn submit(&self, payload: &[u8]) -> Result<SubmissionRecord, OrchestrationError> {
        let url = format!("{}/submit", self.base);
        let mut response = ureq::post(&url)
            .config()
            .http_status_as_error(false)
            .build()
            .header(SUBMITTER_HEADER, &self.submitter)
            .send(payload)
            .map_err(|e| OrchestrationError::ServerUnreachable(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| OrchestrationError::ServerUnreachable(e.to_string()))?;
        if status != 200 {
            return Err(OrchestrationError::ServerRejected {
                status,
                message: body,
            });
        }
        Ok(serde_json::from_str(&body)?)
    }

    pub fn leaderboard(&self) -> Result<Vec<LeaderboardRow>, OrchestrationError> {
        Ok(serde_json::from_str(&self.expect_ok("/leaderboard")?)?)
    }
}

// ---------------------------------------------------------------------------
// Run context and role policies
// ---------------------------------------------------------------------------

/// One candidate produced by a branch.
#[derive(Debug, Clone)]
pub struct Draft {
    pub branch_id: String,
    pub grid: ForecastGrid,
    pub leakage: LeakageReport,
    /// Whether cells past the boundary come from a declared fallback rather
    /// than the lagged feature itself.
    pub fallback_on_invalid: bool,
    pub backtest: Option<BacktestOutcome>,
}

/// Shared run state that role policies read and write. Artifact paths are
/// kept relative to the run directory.
pub struct RunContext {
    pub task: TaskFile,
    pub train: UnifiedSeriesTable,
    pub skeleton: Vec<SkeletonRow>,
    pub run_dir: PathBuf,
    pub ses_alpha: f64,
    pub branches: BranchTable,
    pub drafts: BTreeMap<String, Draft>,
    /// Citable artifacts (figures, boundary reports) and those already
    /// referenced from some report.
    pub artifacts: BTreeSet<String>,
    pub cited: BTreeSet<String>,
    pub baseline_backtest: Option<BacktestOutcome>,
    pub evidence_notes: Vec<String>,
    pub final_record: Option<SubmissionRecord>,
    pub final_payload: Option<Vec<u8>>,
    pub gate_draft: Option<CompletionGateRecord>,
    pub snapshot_fresh_for_review: bool,
    pub scratch_files: Vec<PathBuf>,
    pub tools: BTreeSet<String>,
}

impl RunContext {
    fn new(
        task: TaskFile,
        train: UnifiedSeriesTable,
        skeleton: Vec<SkeletonRow>,
        run_dir: PathBuf,
        ses_alpha: f64,
    ) -> Self {
        RunContext {
            task,
            train,
            skeleton,
            run_dir,
            ses_alpha,
            branches: BranchTable::default(),
            drafts: BTreeMap::new(),
            artifacts: BTreeSet::new(),
            cited: BTreeSet::new(),
            baseline_backtest: None,
            evidence_notes: Vec::new(),
            final_record: None,
            final_payload: None,
            gate_draft: None,
            snapshot_fresh_for_review: false,
            scratch_files: Vec::new(),
            tools: BTreeSet::new(),
        }
    }

    pub fn tool(&mut self, name: &str) {
        self.tools.insert(name.to_string());
    }

    fn active_drafts(&self) -> impl Iterator<Item = &Draft> {
        self.drafts.values().filter(|d| {
            self.branches
                .get(&d.branch_id)
                .map(|b| b.status != BranchStatus::Abandoned)
                .unwrap_or(false)
        })
    }

    /// The first draft that applies a lagged feature past the boundary
    /// without a declared fallback, if any.
    pub fn leakage_discipline_gap(&self) -> Option<String> {
        self.active_drafts()
            .find(|d| !d.leakage.invalid_dates.is_empty() && !d.fallback_on_invalid)
            .map(|d| {
                format!(
                    "candidate `{}` applies {} to {} dates past the boundary with no fallback",
                    d.branch_id,
                    d.leakage.feature_name,
                    d.leakage.invalid_dates.len()
                )
            })
    }

    pub fn uncited_artifacts(&self) -> Vec<String> {
        self.artifacts.difference(&self.cited).cloned().collect()
    }

    /// Extract the trigger view from the live run.
    pub fn view(&self) -> RunView {
        let mut revisions = BTreeMap::new();
        for branch in self.branches.active() {
            if branch.revisions_without_new_evidence > 0 {
                revisions.insert(
                    branch.branch_id.clone(),
                    branch.revisions_without_new_evidence,
                );
            }
        }
        let scored_without_validation = self
            .active_drafts()
            .filter(|d| d.backtest.is_none() || self.baseline_backtest.is_none())
            .map(|d| d.branch_id.clone())
            .collect();
        RunView {
            revisions_without_new_evidence: revisions,
            uncited_artifacts: self.uncited_artifacts(),
            scored_without_validation,
            unresolved_constraint_fields: Vec::new(),
            stop_attempted_with_open_blockers: false,
        }
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    fn write_figure(
        &mut self,
        name: &str,
        title: &str,
        series: &[(String, Vec<(f64, f64)>)],
    ) -> Result<String, OrchestrationError> {
        let path = self.run_dir.join("figures").join(name);
        write_line_figure(&path, title, series)?;
        let rel = self.relative(&path);
        self.artifacts.insert(rel.clone());
        self.tool("figure.render");
        Ok(rel)
    }

    /// Aggregate a grid to one (day-offset, total) series for plotting.
    fn grid_series(grid: &ForecastGrid) -> Vec<(f64, f64)> {
        let mut by_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
        for ((_, date), value) in grid {
            *by_date.entry(*date).or_insert(0.0) += value;
        }
        by_date
            .values()
            .enumerate()
            .map(|(i, total)| (i as f64, *total))
            .collect()
    }
}

/// What one governed turn hands back to the orchestrator.
#[derive(Debug, Default)]
pub struct RoleTurn {
    pub reportback: Option<Reportback>,
    pub artifacts: Vec<String>,
    pub issues: Vec<String>,
    pub responses: Vec<(String, IssueResponse)>,
    pub verdicts: Vec<(String, RecheckVerdict)>,
    pub signal: Option<CompletionSignal>,
    pub hit_blockage: bool,
}

/// Behavioral contract for a role: read the dispatch and the shared run
/// state, write artifacts within the permitted scope, report back.
pub trait RolePolicy {
    fn role(&self) -> RoleId;
    fn act(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError>;
}

pub struct RoleSet {
    policies: BTreeMap<RoleId, Box<dyn RolePolicy>>,
}

impl RoleSet {
    pub fn empty() -> Self {
        RoleSet {
            policies: BTreeMap::new(),
        }
    }

    /// The full scripted cast.
    pub fn standard() -> Self {
        Self::with_constructor(ConstructorMode::Standard)
    }

    pub fn with_constructor(mode: ConstructorMode) -> Self {
        let mut set = Self::empty();
        set.insert(Box::new(ScriptedOrchestrator));
        set.insert(Box::new(ScriptedInterpreter));
        set.insert(Box::new(ScriptedEvidenceCollector));
        set.insert(Box::new(ScriptedConstructor::new(mode)));
        set.insert(Box::new(ScriptedGovernor::default()));
        set.insert(Box::new(ScriptedFinalReviewer));
        set
    }

    pub fn insert(&mut self, policy: Box<dyn RolePolicy>) {
        self.policies.insert(policy.role(), policy);
    }

    pub fn remove(&mut self, role: RoleId) {
        self.policies.remove(&role);
    }

    pub fn contains(&self, role: RoleId) -> bool {
        self.policies.contains_key(&role)
    }

    fn get_mut(&mut self, role: RoleId) -> Option<&mut Box<dyn RolePolicy>> {
        self.policies.get_mut(&role)
    }
}

fn reportback(work: &str, next_step: &str, next_role: RoleId) -> Reportback {
    Reportback {
        status: Stage::Completion,
        completed_work: work.to_string(),
        remaining_gaps: Vec::new(),
        new_risks: Vec::new(),
        suggested_memory_updates: Vec::new(),
        suggested_rule_or_protocol_updates: Vec::new(),
        suggested_next_step: next_step.to_string(),
        suggested_next_role: next_role,
        follow_up_actions: Vec::new(),
        can_continue_alone: false,
        self_critique: "scripted turn; no judgment beyond the playbook".to_string(),
        why_stop_not_allowed: None,
    }
}

fn trace_proposal(role: RoleId, note: &str) -> MemorySyncProposal {
    MemorySyncProposal {
        kind: ProposalKind::TraceEventCandidate,
        content: note.to_string(),
        confidence: 0.9,
        reason: "turn summary for the task trace".to_string(),
        proposer: role,
    }
}

// ---------------------------------------------------------------------------
// Scripted policies
// ---------------------------------------------------------------------------

pub struct ScriptedOrchestrator;

impl RolePolicy for ScriptedOrchestrator {
    fn role(&self) -> RoleId {
        RoleId::Orchestrator
    }

    fn act(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        match packet.explicit_focus.as_str() {
            "housekeeping" => {
                let mut removed = Vec::new();
                for scratch in std::mem::take(&mut run.scratch_files) {
                    if scratch.exists() {
                        std::fs::remove_file(&scratch)?;
                    }
                    removed.push(run.relative(&scratch));
                }
                let mut rb = reportback(
                    &format!("workspace cleanup: removed {}", removed.join(", ")),
                    "final review",
                    RoleId::FinalReviewer,
                );
                rb.suggested_memory_updates
                    .push(trace_proposal(self.role(), "scratch files removed before review"));
                Ok(RoleTurn {
                    reportback: Some(rb),
                    ..RoleTurn::default()
                })
            }
            other => Err(OrchestrationError::InvariantViolated(format!(
                "orchestrator got unknown focus `{other}`"
            ))),
        }
    }
}

pub struct ScriptedInterpreter;

impl RolePolicy for ScriptedInterpreter {
    fn role(&self) -> RoleId {
        RoleId::Interpreter
    }

    fn act(
        &mut self,
        _packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let surface = crate::task_model::resolve_temporal_constraints(&run.task);
        run.tool("constraints.resolve");
        let decision = DecisionEntry {
            decision: "treat the task as a full-grid forecast over the declared horizon".into(),
            reason: format!(
                "constraint surface fixes the hidden window {}..{} at {} granularity",
                surface.hidden_start,
                surface.hidden_end,
                run.task.scope.granularity.as_str()
            ),
            rollback_cost: "reinterpretation of the task file only".into(),
        };
        let mut rb = reportback(
            &format!(
                "task interpreted: {} steps hidden, observation ends {}",
                run.task.scope.step_count, surface.observation_end
            ),
            "collect local evidence",
            RoleId::EvidenceCollector,
        );
        rb.suggested_memory_updates.push(MemorySyncProposal {
            kind: ProposalKind::DecisionCandidate,
            content: serde_json::to_string(&decision)?,
            confidence: 0.95,
            reason: "locks the output mode before any construction".into(),
            proposer: self.role(),
        });
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "temporal constraint surface resolved"));
        Ok(RoleTurn {
            reportback: Some(rb),
            ..RoleTurn::default()
        })
    }
}

pub struct ScriptedEvidenceCollector;

impl RolePolicy for ScriptedEvidenceCollector {
    fn role(&self) -> RoleId {
        RoleId::EvidenceCollector
    }

    fn act(
        &mut self,
        _packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        // fixed local evidence list; external search is out of scope
        run.evidence_notes = vec![
            "training table spans the full entity grid with no gaps".into(),
            "weekday profile visible in aggregate target".into(),
            "horizon length exceeds one weekly cycle, so pure lag features leak".into(),
        ];
        run.tool("evidence.collect");
        let mut rb = reportback(
            "local evidence collected from the public files",
            "open strategy branches",
            RoleId::Constructor,
        );
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "evidence notes recorded from local files"));
        Ok(RoleTurn {
            reportback: Some(rb),
            ..RoleTurn::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstructorMode {
    /// Opens the weekday-lag, smoothing, and median lines in wave 0 and
    /// fixes what review finds.
    Standard,
    /// Keeps proposing only the weekday-lag line and revises it without new
    /// evidence until rollback forces a second line.
    WeekdayOnly,
}

pub struct ScriptedConstructor {
    mode: ConstructorMode,
    contested_rounds: u32,
}

impl ScriptedConstructor {
    pub fn new(mode: ConstructorMode) -> Self {
        ScriptedConstructor {
            mode,
            contested_rounds: 0,
        }
    }

    /// The raw weekday-lag draft: previous-week value where legal, silently
    /// reaching further back where not. No declared fallback.
    fn naive_weekday_draft(run: &mut RunContext) -> Result<Draft, OrchestrationError> {
        let scope = run.task.scope.clone();
        let report = check_boundary("target_lag_7", 7, &scope);
        let index = run.train.index();
        let mut grid = ForecastGrid::new();
        for (entity, _) in run.train.by_entity() {
            for date in scope.horizon_dates() {
                let week_back = index.get(&(entity.clone(), date - Days::new(7))).copied();
                let two_back = index.get(&(entity.clone(), date - Days::new(14))).copied();
                let value = if report.valid_dates.contains(&date) {
                    week_back.or(two_back).unwrap_or(0.0)
                } else {
                    // the bug under review: no declared policy past the
                    // boundary, just whatever lag still resolves
                    two_back.unwrap_or(0.0)
                };
                grid.insert((entity.clone(), date), value.max(0.0));
            }
        }
        run.tool("forecast.weekday_lag");
        Ok(Draft {
            branch_id: "weekday_lag".into(),
            grid,
            leakage: report,
            fallback_on_invalid: false,
            backtest: None,
        })
    }

    fn fixed_weekday_grid(
        table: &UnifiedSeriesTable,
        scope: &AccessScope,
    ) -> Result<ForecastGrid, OrchestrationError> {
        Ok(weekday_lag_forecast(table, scope, median_baseline_forecast)?.0)
    }

    fn draft_figure(
        run: &mut RunContext,
        branch_id: &str,
        grid: &ForecastGrid,
    ) -> Result<String, OrchestrationError> {
        let series = vec![(
            format!("{branch_id} total"),
            RunContext::grid_series(grid),
        )];
        run.write_figure(
            &format!("forecast_{branch_id}.svg"),
            &format!("Horizon totals, {branch_id}"),
            &series,
        )
    }

    fn open_branch(
        run: &mut RunContext,
        draft: Draft,
        wave: u32,
        description: &str,
    ) -> Result<(), OrchestrationError> {
        let mut branch = StrategyBranch::new(
            &draft.branch_id,
            wave,
            description,
            "median baseline backtest",
        );
        branch.leakage_verdict = Some(draft.leakage.verdict);
        Self::draft_figure(run, &draft.branch_id, &draft.grid)?;
        run.branches.branches.push(branch);
        run.drafts.insert(draft.branch_id.clone(), draft);
        Ok(())
    }

    fn wave0(&self, run: &mut RunContext) -> Result<RoleTurn, OrchestrationError> {
        let scope = run.task.scope.clone();
        let weekday = Self::naive_weekday_draft(run)?;
        Self::open_branch(
            run,
            weekday,
            0,
            "previous-week same-weekday value per entity",
        )?;
        if self.mode == ConstructorMode::Standard {
            let ses_grid = ses_forecast(&run.train, &scope, run.ses_alpha)?;
            run.tool("forecast.ses");
            Self::open_branch(
                run,
                Draft {
                    branch_id: "ses".into(),
                    grid: ses_grid,
                    leakage: check_boundary("smoothed_level", scope.step_count, &scope),
                    fallback_on_invalid: true,
                    backtest: None,
                },
                0,
                "exponentially smoothed level held flat",
            )?;
            let median_grid = median_baseline_forecast(&run.train, &scope)?;
            run.tool("forecast.median");
            Self::open_branch(
                run,
                Draft {
                    branch_id: "median_baseline".into(),
                    grid: median_grid,
                    leakage: check_boundary("recent_week_median", scope.step_count, &scope),
                    fallback_on_invalid: true,
                    backtest: None,
                },
                0,
                "recent-week median held flat",
            )?;
        }
        // scratch the roles leave behind on purpose; housekeeping sweeps it
        let scratch = run.run_dir.join("scratch_grid.tsv");
        std::fs::write(&scratch, b"intermediate grid dump\n")?;
        run.scratch_files.push(scratch);
        let open = run.branches.open_in_wave(0);
        let mut rb = reportback(
            &format!("wave-0 candidates drafted across {open} branches"),
            "temporal review",
            RoleId::TemporalGovernor,
        );
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "wave-0 drafts and figures produced"));
        Ok(RoleTurn {
            reportback: Some(rb),
            ..RoleTurn::default()
        })
    }

    fn respond(
        issue_id: &str,
        accepted: bool,
        evidence: &str,
        fix_plan: &str,
        recheck: bool,
    ) -> IssueResponse {
        IssueResponse {
            issue_id: issue_id.to_string(),
            acceptance_status: if accepted {
                Acceptance::Accepted
            } else {
                Acceptance::Contested
            },
            current_evidence: evidence.to_string(),
            fix_plan: fix_plan.to_string(),
            missing_evidence: if accepted { String::new() } else { "none offered".into() },
            remaining_blocker: if recheck { String::new() } else { "fix not attempted".into() },
            recheck_requested: recheck,
            responded_by: RoleId::Constructor,
        }
    }

    fn fix_leakage(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let issue_id = packet
            .blocking_context
            .first()
            .and_then(|line| line.split(':').next())
            .unwrap_or("I1")
            .to_string();
        if self.mode == ConstructorMode::WeekdayOnly
            && self.contested_rounds < FIXATION_REVISION_LIMIT
        {
            // keeps tuning the same line without new information
            self.contested_rounds += 1;
            if let Some(branch) = run.branches.get_mut("weekday_lag") {
                branch.revisions_without_new_evidence += 1;
            }
            let mut rb = reportback(
                &format!(
                    "re-tuned the weekday lag (round {}) without addressing the boundary",
                    self.contested_rounds
                ),
                "another tuning round",
                RoleId::Constructor,
            );
            rb.remaining_gaps = vec!["boundary issue still open".into()];
            return Ok(RoleTurn {
                reportback: Some(rb),
                responses: vec![(
                    issue_id.clone(),
                    Self::respond(
                        &issue_id,
                        false,
                        "the lag scores well on the first week",
                        "keep the lag as is",
                        false,
                    ),
                )],
                hit_blockage: true,
                ..RoleTurn::default()
            });
        }
        let scope = run.task.scope.clone();
        let (grid, report) =
            weekday_lag_forecast(&run.train, &scope, median_baseline_forecast)?;
        run.tool("forecast.weekday_lag");
        run.tool("boundary.check");
        let boundary_fig = {
            let valid: Vec<(f64, f64)> = scope
                .horizon_dates()
                .iter()
                .enumerate()
                .map(|(i, d)| (i as f64, if report.valid_dates.contains(d) { 1.0 } else { 0.0 }))
                .collect();
            run.write_figure(
                "boundary_weekday_lag.svg",
                "Lag-7 validity across the horizon",
                &[("valid".to_string(), valid)],
            )?
        };
        if let Some(draft) = run.drafts.get_mut("weekday_lag") {
            draft.grid = grid;
            draft.fallback_on_invalid = true;
            draft.leakage = report;
        }
        if let Some(branch) = run.branches.get_mut("weekday_lag") {
            branch.description =
                "previous-week weekday value where legal, median fallback past the boundary"
                    .into();
            branch.revisions_without_new_evidence = 0;
        }
        let mut rb = reportback(
            "weekday lag rebuilt with a median fallback past the boundary",
            "recheck the boundary issue",
            RoleId::TemporalGovernor,
        );
        rb.suggested_memory_updates.push(MemorySyncProposal {
            kind: ProposalKind::NegativeCandidate,
            content: serde_json::to_string(&PriorEntry {
                polarity: Polarity::Negative,
                statement: "a raw 7-day lag leaks once the horizon passes one week".into(),
                scope_and_limits: "daily tasks whose horizon exceeds the lag length".into(),
                evidence: boundary_fig.clone(),
            })?,
            confidence: 0.9,
            reason: "boundary check shows 9 of 16 dates unservable by the raw lag".into(),
            proposer: self.role(),
        });
        Ok(RoleTurn {
            reportback: Some(rb),
            artifacts: vec![boundary_fig],
            responses: vec![(
                issue_id.clone(),
                Self::respond(
                    &issue_id,
                    true,
                    "boundary report attached; invalid dates now served by the median fallback",
                    "lag only where the source date clears the boundary",
                    true,
                ),
            )],
            hit_blockage: true,
            ..RoleTurn::default()
        })
    }

    fn cite_artifacts(
        &self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let issue_id = packet
            .blocking_context
            .first()
            .and_then(|line| line.split(':').next())
            .unwrap_or("I2")
            .to_string();
        let uncited = run.uncited_artifacts();
        run.cited.extend(uncited.iter().cloned());
        run.tool("report.cite");
        let mut rb = reportback(
            &format!("report now references {}", uncited.join(", ")),
            "recheck the citation issue",
            RoleId::TemporalGovernor,
        );
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "all produced figures cited in the report"));
        Ok(RoleTurn {
            reportback: Some(rb),
            responses: vec![(
                issue_id.clone(),
                Self::respond(
                    &issue_id,
                    true,
                    "every figure is now referenced from the run report",
                    "cite artifacts as they are produced",
                    true,
                ),
            )],
            hit_blockage: true,
            ..RoleTurn::default()
        })
    }

    fn baseline_comparison(
        &self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let issue_id = packet
            .blocking_context
            .first()
            .and_then(|line| line.split(':').next())
            .unwrap_or("I3")
            .to_string();
        let horizon = run.task.scope.step_count;
        let alpha = run.ses_alpha;
        let ids: Vec<String> = run
            .branches
            .active()
            .map(|b| b.branch_id.clone())
            .collect();
        let mut comparison: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for id in &ids {
            let outcome = match id.as_str() {
                "weekday_lag" => {
                    local_backtest(&run.train, horizon, Self::fixed_weekday_grid)?
                }
                "ses" => local_backtest(&run.train, horizon, |t, s| {
                    ses_forecast(t, s, alpha)
                })?,
                "median_baseline" => {
                    local_backtest(&run.train, horizon, median_baseline_forecast)?
                }
                other => {
                    return Err(OrchestrationError::InvariantViolated(format!(
                        "no backtest recipe for branch `{other}`"
                    )))
                }
            };
            comparison.push((
                format!("{id} rmsle {:.4}", outcome.rmsle),
                vec![(0.0, outcome.rmsle), (1.0, outcome.rmsle)],
            ));
            if id == "median_baseline" {
                run.baseline_backtest = Some(outcome.clone());
            }
            if let Some(d) = run.drafts.get_mut(id) {
                d.backtest = Some(outcome.clone());
            }
            if let Some(b) = run.branches.get_mut(id) {
                b.backtest_rmsle = Some(outcome.rmsle);
            }
        }
        if run.baseline_backtest.is_none() {
            // the median line is the comparison point even when it is not a branch
            let outcome = local_backtest(&run.train, horizon, median_baseline_forecast)?;
            run.baseline_backtest = Some(outcome);
        }
        run.tool("backtest.local");
        let fig = run.write_figure(
            "backtest_comparison.svg",
            "Held-out window, branch scores against the median baseline",
            &comparison,
        )?;
        run.cited.insert(fig.clone());
        let leader = run
            .branches
            .active()
            .filter(|b| b.leakage_verdict != Some(LeakageVerdict::Invalid))
            .min_by(|a, b| {
                a.backtest_rmsle
                    .unwrap_or(f64::INFINITY)
                    .partial_cmp(&b.backtest_rmsle.unwrap_or(f64::INFINITY))
                    .expect("finite scores")
            })
            .map(|b| b.branch_id.clone())
            .ok_or_else(|| {
                OrchestrationError::InvariantViolated("no branch eligible to lead".into())
            })?;
        run.branches.set_leading(&leader)?;
        let mut rb = reportback(
            &format!("all branches backtested against the baseline; `{leader}` leads"),
            "recheck the validation issue",
            RoleId::TemporalGovernor,
        );
        rb.suggested_memory_updates.push(MemorySyncProposal {
            kind: ProposalKind::PositiveCandidate,
            content: serde_json::to_string(&PriorEntry {
                polarity: Polarity::Positive,
                statement: "weekly structure carries most of the short-horizon signal".into(),
                scope_and_limits: "daily retail series with a stable weekday profile".into(),
                evidence: fig.clone(),
            })?,
            confidence: 0.8,
            reason: "weekday-aware branch beat the flat lines on the held-out window".into(),
            proposer: self.role(),
        });
        rb.suggested_memory_updates.push(MemorySyncProposal {
            kind: ProposalKind::RelationCandidate,
            content: serde_json::to_string(&RelationEdge {
                from: leader.clone(),
                to: "median_baseline".into(),
                label: "compared against".into(),
            })?,
            confidence: 0.9,
            reason: "comparison point recorded for the leader".into(),
            proposer: self.role(),
        });
        Ok(RoleTurn {
            reportback: Some(rb),
            artifacts: vec![fig],
            responses: vec![(
                issue_id.clone(),
                Self::respond(
                    &issue_id,
                    true,
                    "backtest table and comparison figure produced",
                    "score every branch on the held-out window before ranking",
                    true,
                ),
            )],
            hit_blockage: true,
            ..RoleTurn::default()
        })
    }

    /// Rollback landing: open the median line as a fresh wave, score it,
    /// cite its figure, and withdraw the fixated candidate.
    fn expansion_fallback(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let open_issues: Vec<String> = packet
            .blocking_context
            .iter()
            .filter_map(|line| line.split(':').next())
            .map(str::to_string)
            .collect();
        let scope = run.task.scope.clone();
        let median_grid = median_baseline_forecast(&run.train, &scope)?;
        run.tool("forecast.median");
        Self::open_branch(
            run,
            Draft {
                branch_id: "median_baseline".into(),
                grid: median_grid,
                leakage: check_boundary("recent_week_median", scope.step_count, &scope),
                fallback_on_invalid: true,
                backtest: None,
            },
            1,
            "recent-week median held flat",
        )?;
        let outcome = local_backtest(&run.train, scope.step_count, median_baseline_forecast)?;
        run.tool("backtest.local");
        run.baseline_backtest = Some(outcome.clone());
        if let Some(d) = run.drafts.get_mut("median_baseline") {
            d.backtest = Some(outcome.clone());
        }
        if let Some(b) = run.branches.get_mut("median_baseline") {
            b.backtest_rmsle = Some(outcome.rmsle);
        }
        run.branches.set_leading("median_baseline")?;
        let uncited = run.uncited_artifacts();
        run.cited.extend(uncited);
        run.tool("report.cite");
        let mut rb = reportback(
            "median baseline opened as the fallback line, scored, and promoted to leader",
            "recheck the withdrawn candidate",
            RoleId::TemporalGovernor,
        );
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "rollback landed on the median baseline"));
        let responses = open_issues
            .iter()
            .map(|issue_id| {
                (
                    issue_id.clone(),
                    Self::respond(
                        issue_id,
                        true,
                        "fixated candidate withdrawn; the median line is scored, cited, and leads",
                        "abandon the weekday lag and lead with the median baseline",
                        true,
                    ),
                )
            })
            .collect();
        Ok(RoleTurn {
            reportback: Some(rb),
            responses,
            hit_blockage: true,
            ..RoleTurn::default()
        })
    }

    fn final_submission(&self, run: &mut RunContext) -> Result<RoleTurn, OrchestrationError> {
        let leader = run
            .branches
            .leader()
            .ok_or_else(|| {
                OrchestrationError::InvariantViolated("no leading branch at submission".into())
            })?
            .branch_id
            .clone();
        let grid = run
            .drafts
            .get(&leader)
            .ok_or_else(|| {
                OrchestrationError::InvariantViolated(format!("no draft for leader `{leader}`"))
            })?
            .grid
            .clone();
        let payload = render_submission(&run.skeleton, &grid, &run.task)?;
        run.tool("submission.render");
        let path = run.run_dir.join("submissions").join("final.csv");
        std::fs::write(&path, &payload)?;
        run.final_payload = Some(payload);
        let rel = run.relative(&path);
        let mut rb = reportback(
            &format!("final submission rendered from `{leader}` at {rel}"),
            "submit to the task service",
            RoleId::Orchestrator,
        );
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "final payload rendered from the leading branch"));
        Ok(RoleTurn {
            reportback: Some(rb),
            ..RoleTurn::default()
        })
    }
}

impl RolePolicy for ScriptedConstructor {
    fn role(&self) -> RoleId {
        RoleId::Constructor
    }

    fn act(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        match packet.explicit_focus.as_str() {
            "wave0_drafts" => self.wave0(run),
            "fix_leakage" => self.fix_leakage(packet, run),
            "cite_artifacts" => self.cite_artifacts(packet, run),
            "baseline_comparison" => self.baseline_comparison(packet, run),
            "expansion_fallback" => self.expansion_fallback(packet, run),
            "final_submission" => self.final_submission(run),
            other => Err(OrchestrationError::InvariantViolated(format!(
                "constructor got unknown focus `{other}`"
            ))),
        }
    }
}

/// Appended to a blocking-context line once its issue has a response
/// awaiting recheck; only such issues may receive a verdict.
pub const RECHECK_MARKER: &str = " [recheck-requested]";

/// Stable issue-kind prefixes shared by the reviewer and the fix router.
pub const LEAKAGE_ISSUE: &str = "boundary-discipline";
pub const CITATION_ISSUE: &str = "artifact-consumption";
pub const VALIDATION_ISSUE: &str = "validation-depth";
pub const AMBIGUITY_ISSUE: &str = "constraint-ambiguity";

/// The temporal reviewer: verifies pending fixes first, then raises the
/// first gap it can still find, one issue per round.
#[derive(Default)]
pub struct ScriptedGovernor {
    raised: BTreeSet<RollbackKind>,
    raised_leakage: bool,
}

impl ScriptedGovernor {
    fn verdict(issue_id: &str, resolved: bool, reason: &str) -> RecheckVerdict {
        RecheckVerdict {
            issue_id: issue_id.to_string(),
            resolved,
            reason: reason.to_string(),
            remaining_gap: if resolved { String::new() } else { reason.to_string() },
            required_next_change: if resolved { "none".into() } else { "address the issue".into() },
            completion_signal: if resolved {
                SignalKind::Continue
            } else {
                SignalKind::RebuttalRequired
            },
            follow_up_action: if resolved { "proceed".into() } else { "fix and request recheck".into() },
            issued_by: RoleId::TemporalGovernor,
        }
    }

    /// The check an issue was raised for, re-run against the current state.
    /// Issue texts carry a stable prefix so rechecks and fix routing never
    /// depend on the free-form evidence (which may quote file names).
    fn recheck_passes(&self, text: &str, run: &RunContext) -> bool {
        if text.starts_with(LEAKAGE_ISSUE) {
            run.leakage_discipline_gap().is_none()
        } else if text.starts_with(CITATION_ISSUE) {
            run.uncited_artifacts().is_empty()
        } else if text.starts_with(VALIDATION_ISSUE) {
            run.view().scored_without_validation.is_empty()
        } else {
            false
        }
    }

    fn next_issue(&mut self, run: &RunContext) -> Option<String> {
        if !self.raised_leakage {
            if let Some(gap) = run.leakage_discipline_gap() {
                self.raised_leakage = true;
                return Some(format!("{LEAKAGE_ISSUE}: {gap}"));
            }
        }
        let view = run.view();
        for trigger in detect_rollback(&view) {
            let prefix = match trigger.kind {
                // fixation and premature stops are the orchestrator's to
                // handle; the reviewer raises the evidence-shaped gaps
                RollbackKind::OneStrategyFixation | RollbackKind::PrematureCompletion => continue,
                RollbackKind::UnconsumedArtifacts => CITATION_ISSUE,
                RollbackKind::WeakValidation => VALIDATION_ISSUE,
                RollbackKind::TemporalAmbiguity => AMBIGUITY_ISSUE,
            };
            if self.raised.contains(&trigger.kind) {
                continue;
            }
            self.raised.insert(trigger.kind);
            return Some(format!("{prefix}: {}", trigger.evidence));
        }
        None
    }
}

impl RolePolicy for ScriptedGovernor {
    fn role(&self) -> RoleId {
        RoleId::TemporalGovernor
    }

    fn act(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        if packet.explicit_focus == "final_signal" {
            let checks: BTreeMap<String, bool> = [
                ("boundary_discipline", run.leakage_discipline_gap().is_none()),
                ("artifacts_consumed", run.uncited_artifacts().is_empty()),
                (
                    "validation_strong",
                    run.view().scored_without_validation.is_empty(),
                ),
                ("submission_recorded", run.final_record.is_some()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            let rb = reportback(
                "temporal review found nothing further to block on",
                "final stop decision",
                RoleId::FinalReviewer,
            );
            return Ok(RoleTurn {
                reportback: Some(rb),
                signal: Some(CompletionSignal {
                    kind: SignalKind::AllowStop,
                    reasons: "boundary, citation, and validation checks all hold".into(),
                    scope: "temporal review".into(),
                    next_action: None,
                    completion_checks: checks,
                    remaining_action_count: 0,
                    complete_state: true,
                    issued_by: RoleId::TemporalGovernor,
                }),
                ..RoleTurn::default()
            });
        }

        let mut turn = RoleTurn::default();
        // verify pending fixes first; only issues whose last response asked
        // for a recheck are eligible for a verdict
        for line in &packet.blocking_context {
            let Some((issue_id, text)) = line.split_once(": ") else {
                continue;
            };
            if !text.ends_with(RECHECK_MARKER.trim_start()) {
                continue;
            }
            if self.recheck_passes(text, run) {
                turn.verdicts.push((
                    issue_id.to_string(),
                    Self::verdict(issue_id, true, "re-ran the check; the gap is closed"),
                ));
            }
        }
        // then look for the next gap
        turn.issues.extend(self.next_issue(run));
        let (work, next_step) = if turn.issues.is_empty() {
            (
                "review round clean: no boundary, citation, or validation gaps".to_string(),
                "proceed toward completion".to_string(),
            )
        } else {
            (
                format!("review round raised: {}", turn.issues.join("; ")),
                "constructor must respond".to_string(),
            )
        };
        let mut rb = reportback(&work, &next_step, RoleId::Constructor);
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), &work));
        turn.signal = Some(CompletionSignal {
            kind: SignalKind::Continue,
            reasons: work,
            scope: "temporal review".into(),
            next_action: Some(next_step),
            completion_checks: BTreeMap::new(),
            remaining_action_count: if turn.issues.is_empty() { 0 } else { 1 },
            complete_state: false,
            issued_by: RoleId::TemporalGovernor,
        });
        turn.reportback = Some(rb);
        Ok(turn)
    }
}

pub struct ScriptedFinalReviewer;

impl RolePolicy for ScriptedFinalReviewer {
    fn role(&self) -> RoleId {
        RoleId::FinalReviewer
    }

    fn act(
        &mut self,
        _packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let gate = run.gate_draft.clone().ok_or_else(|| {
            OrchestrationError::InvariantViolated("final review without a gate draft".into())
        })?;
        if !run.snapshot_fresh_for_review {
            return Err(OrchestrationError::InvariantViolated(
                "final review demands a fresh context snapshot".into(),
            ));
        }
        let mut checks: BTreeMap<String, bool> = BTreeMap::new();
        checks.insert(
            "submission_admissible".into(),
            run.final_record.as_ref().map(|r| r.admissible).unwrap_or(false),
        );
        checks.insert("snapshot_fresh".into(), run.snapshot_fresh_for_review);
        checks.insert(
            "remaining_actions_zero".into(),
            gate.remaining_action_count == 0,
        );
        checks.insert(
            "completion_state_complete".into(),
            gate.completion_state == CompletionState::Complete,
        );
        checks.insert("cleanup_done".into(), gate.housekeeping.cleanup_done);
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !**ok) {
            return Err(OrchestrationError::InvariantViolated(format!(
                "final review failed on `{name}`"
            )));
        }
        let mut rb = reportback(
            "final review: gate clauses verified against the live run",
            "resolve the stop decision",
            RoleId::Orchestrator,
        );
        rb.suggested_memory_updates
            .push(trace_proposal(self.role(), "final review passed on all clauses"));
        Ok(RoleTurn {
            reportback: Some(rb),
            signal: Some(CompletionSignal {
                kind: SignalKind::AllowStop,
                reasons: "every gate clause verified".into(),
                scope: "whole run".into(),
                next_action: None,
                completion_checks: checks,
                remaining_action_count: 0,
                complete_state: true,
                issued_by: RoleId::FinalReviewer,
            }),
            ..RoleTurn::default()
        })
    }
}

// ---------------------------------------------------------------------------
// The governed loop engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub submitter: String,
    pub ses_alpha: f64,
    pub max_dispatches: u32,
}

impl RunConfig {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            run_dir: run_dir.into(),
            submitter: "governed-run".into(),
            ses_alpha: 0.3,
            max_dispatches: 48,
        }
    }
}

/// Final table mirroring the run-trace summary: wall time, distinct tools,
/// files touched, review blocks, critique rounds, figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStatistics {
    pub runtime_seconds: f64,
    pub unique_tools: u32,
    pub touched_files: u32,
    pub review_blocks: u32,
    pub critique_rounds: u32,
    pub figures_produced: u32,
}

pub struct RunOutcome {
    pub final_submission: SubmissionRecord,
    pub event_log_path: PathBuf,
    pub memory_dir: PathBuf,
    pub report_path: PathBuf,
    pub trace: TraceStatistics,
    pub state: ProtocolState,
    pub branches: BranchTable,
    pub rollbacks: Vec<RollbackTrigger>,
}

struct LoopEngine<'a> {
    config: &'a RunConfig,
    log: EventLog,
    memory: MemoryStore,
    ledger: RebuttalLedger,
    gate: CompletionGateRecord,
    issue_seq: u32,
    dispatch_seq: u32,
    review_blocks: u32,
    critique_rounds: u32,
    blocker_of: BTreeMap<String, String>,
    open_blockers: BTreeSet<String>,
    rollbacks: Vec<RollbackTrigger>,
    snapshot_derived: bool,
}

fn lifecycle_path(blocked: bool) -> Result<String, ProtocolError> {
    let mut state = LifecycleState::initial();
    let mut names = vec![state.state.as_str().to_string()];
    for stage in [Stage::ContextAlignment, Stage::InputValidation, Stage::Execution] {
        state = transition(&state, stage, "scripted turn")?;
        names.push(stage.as_str().to_string());
    }
    if blocked {
        state = transition(&state, Stage::Blockage, "blocked on a review issue")?;
        names.push(Stage::Blockage.as_str().to_string());
        state = transition(&state, Stage::Execution, "resumed after the fix")?;
        names.push(Stage::Execution.as_str().to_string());
    }
    for stage in [Stage::SelfReview, Stage::ReportPreparation, Stage::Completion] {
        state = transition(&state, stage, "scripted turn")?;
        names.push(stage.as_str().to_string());
    }
    Ok(names.join(">"))
}

impl<'a> LoopEngine<'a> {
    fn new(config: &'a RunConfig) -> Result<Self, OrchestrationError> {
        std::fs::create_dir_all(config.run_dir.join("figures"))?;
        std::fs::create_dir_all(config.run_dir.join("submissions"))?;
        let log = EventLog::open(&config.run_dir.join("events.log"))?;
        let memory = MemoryStore::open(&config.run_dir.join("memory"))?;
        Ok(LoopEngine {
            config,
            log,
            memory,
            ledger: RebuttalLedger::default(),
            gate: CompletionGateRecord::initial(5),
            issue_seq: 0,
            dispatch_seq: 0,
            review_blocks: 0,
            critique_rounds: 0,
            blocker_of: BTreeMap::new(),
            open_blockers: BTreeSet::new(),
            rollbacks: Vec::new(),
            snapshot_derived: false,
        })
    }

    fn event(
        &mut self,
        event_type: EventType,
        source: RoleId,
        task_id: &str,
        summary: String,
        artifacts: Vec<String>,
    ) -> Result<(), OrchestrationError> {
        self.log
            .append(&RuntimeEvent::new(event_type, source, task_id, summary, artifacts))?;
        Ok(())
    }

    fn pass_check(&mut self, check: PreStopCheck) -> Result<(), OrchestrationError> {
        self.gate.pre_stop_checks.insert(check, CheckStatus::Passed);
        self.memory.set_gate(&self.gate)?;
        Ok(())
    }

    fn set_remaining(&mut self, remaining: u32) -> Result<(), OrchestrationError> {
        self.gate.remaining_action_count = remaining;
        self.memory.set_gate(&self.gate)?;
        Ok(())
    }

    /// Derive a fresh snapshot and log the compaction that carries it.
    fn compact(
        &mut self,
        trigger: CompactionTrigger,
        run: &RunContext,
        phase: &str,
        focus: &str,
    ) -> Result<(), OrchestrationError> {
        let blockers: Vec<String> = self.open_blockers.iter().cloned().collect();
        self.memory.derive_snapshot(
            phase,
            focus,
            &run.branches.serialized(),
            &blockers,
            &["read hidden-window targets".to_string()],
            &["superseded draft grids".to_string()],
        )?;
        self.snapshot_derived = true;
        self.event(
            EventType::ContextCompaction,
            RoleId::Orchestrator,
            "run",
            format!("trigger={trigger} phase={phase}"),
            vec!["memory/snapshot.txt".into()],
        )
    }

    /// Route one dispatch through a role policy and log both ends.
    fn dispatch(
        &mut self,
        roles: &mut RoleSet,
        run: &mut RunContext,
        role: RoleId,
        objective: &str,
        focus: &str,
        scope_prefixes: &[&str],
    ) -> Result<RoleTurn, OrchestrationError> {
        self.dispatch_seq += 1;
        if self.dispatch_seq > self.config.max_dispatches {
            return Err(OrchestrationError::BudgetExceeded(format!(
                "dispatch budget of {} spent",
                self.config.max_dispatches
            )));
        }
        let task_id = format!("d{:02}-{role}", self.dispatch_seq);
        let blocking_context: Vec<String> = self
            .ledger
            .open_issue_ids()
            .iter()
            .map(|id| {
                let thread = self.ledger.threads.get(id);
                let text = thread.map(|t| t.issue.text.clone()).unwrap_or_default();
                let recheck_pending = thread
                    .and_then(|t| t.responses.last())
                    .map(|r| r.recheck_requested)
                    .unwrap_or(false);
                let marker = if recheck_pending { RECHECK_MARKER } else { "" };
                format!("{id}: {text}{marker}")
            })
            .collect();
        let packet = DispatchPacket {
            objective: objective.to_string(),
            known_inputs: vec![TRAIN_FILE.into(), TEST_FILE.into()],
            context_mode: if self.snapshot_derived {
                ContextMode::Compacted
            } else {
                ContextMode::Full
            },
            explicit_focus: focus.to_string(),
            required_reads: vec!["task.txt".into(), "manifest.txt".into()],
            permitted_action_scope: scope_prefixes.iter().map(|s| s.to_string()).collect(),
            constraints: vec![
                "never read hidden-window targets".into(),
                "stay within the permitted action scope".into(),
            ],
            autonomy_settings: if focus == "wave0_drafts" {
                Autonomy::MayReframe
            } else {
                Autonomy::ExecuteOnly
            },
            output_requirements: "a full reportback with memory proposals".to_string(),
            blocking_context,
        };
        packet.check()?;
        self.event(
            EventType::DispatchCreation,
            RoleId::Orchestrator,
            &task_id,
            format!("role={role} focus={focus}"),
            Vec::new(),
        )?;

        let policy = roles
            .get_mut(role)
            .ok_or_else(|| OrchestrationError::MissingRole(role.as_str().to_string()))?;
        let turn = policy.act(&packet, run)?;

        for artifact in &turn.artifacts {
            if !packet
                .permitted_action_scope
                .iter()
                .any(|prefix| artifact.starts_with(prefix))
            {
                return Err(OrchestrationError::ScopeViolation {
                    role,
                    path: artifact.clone(),
                });
            }
        }

        // responses land before verdicts so a recheck in the same round sees them
        for (issue_id, response) in &turn.responses {
            self.ledger.answer_issue(issue_id, response.clone())?;
        }
        let mut cleared = Vec::new();
        for (issue_id, verdict) in &turn.verdicts {
            let resolved = verdict.resolved;
            self.ledger.recheck(issue_id, verdict.clone())?;
            self.event(
                EventType::RebuttalReview,
                role,
                &task_id,
                format!("issue={issue_id} resolved={resolved}"),
                Vec::new(),
            )?;
            if resolved {
                self.critique_rounds += 1;
                if let Some(blocker) = self.blocker_of.get(issue_id) {
                    self.open_blockers.remove(blocker);
                    cleared.push(blocker.clone());
                }
            }
        }
        let mut new_blockers = Vec::new();
        if !turn.issues.is_empty() {
            let mut issues = Vec::new();
            for text in &turn.issues {
                self.issue_seq += 1;
                let issue_id = format!("I{}", self.issue_seq);
                let blocker = format!("B{}", self.issue_seq);
                self.blocker_of.insert(issue_id.clone(), blocker.clone());
                self.open_blockers.insert(blocker.clone());
                new_blockers.push(blocker);
                issues.push(ReviewIssue {
                    id: issue_id,
                    text: text.clone(),
                    raised_by: role,
                });
            }
            let ids: Vec<String> = issues.iter().map(|i| i.id.clone()).collect();
            self.ledger.open_rebuttal(issues)?;
            self.review_blocks += 1;
            self.event(
                EventType::RebuttalOpening,
                role,
                &task_id,
                format!("issues={}", ids.join("|")),
                Vec::new(),
            )?;
        }

        if let Some(rb) = &turn.reportback {
            rb.check()?;
            let path = lifecycle_path(turn.hit_blockage)?;
            let blockers_token = if new_blockers.is_empty() {
                "none".to_string()
            } else {
                new_blockers.join("|")
            };
            let mut summary = format!(
                "status={} path={path} blockers={blockers_token}",
                rb.status
            );
            if !cleared.is_empty() {
                summary.push_str(&format!(" clears={}", cleared.join("|")));
            }
            self.event(
                EventType::ReportbackReceipt,
                role,
                &task_id,
                summary,
                turn.artifacts.clone(),
            )?;
            self.absorb_proposals(&task_id, &rb.suggested_memory_updates)?;
        }
        if let Some(signal) = &turn.signal {
            signal.check()?;
        }
        Ok(turn)
    }

    /// Digest-gated absorption of a turn's memory proposals.
    fn absorb_proposals(
        &mut self,
        task_id: &str,
        proposals: &[MemorySyncProposal],
    ) -> Result<(), OrchestrationError> {
        use crate::memory_store::RecordName;
        for proposal in proposals {
            let (record, existing) = match proposal.kind {
                ProposalKind::PositiveCandidate | ProposalKind::NegativeCandidate => {
                    let entries = self
                        .memory
                        .priors()?
                        .unwrap_or_default()
                        .entries
                        .iter()
                        .map(|e| serde_json::to_string(e))
                        .collect::<Result<BTreeSet<_>, _>>()?;
                    (RecordName::Priors, entries)
                }
                ProposalKind::DecisionCandidate => {
                    let entries = self
                        .memory
                        .decisions()?
                        .unwrap_or_default()
                        .decisions
                        .iter()
                        .map(|e| serde_json::to_string(e))
                        .collect::<Result<BTreeSet<_>, _>>()?;
                    (RecordName::Decisions, entries)
                }
                ProposalKind::RelationCandidate => {
                    let entries = self
                        .memory
                        .relations()?
                        .unwrap_or_default()
                        .edges
                        .iter()
                        .map(|e| serde_json::to_string(e))
                        .collect::<Result<BTreeSet<_>, _>>()?;
                    (RecordName::Relations, entries)
                }
                ProposalKind::ContextSnapshotCandidate => (RecordName::Snapshot, BTreeSet::new()),
                ProposalKind::TraceEventCandidate | ProposalKind::RuntimeEventCandidate => {
                    let entries = self
                        .memory
                        .trace()?
                        .unwrap_or_default()
                        .entries
                        .iter()
                        .map(|(_, note)| note.clone())
                        .collect();
                    (RecordName::Trace, entries)
                }
            };
            let digest = self
                .memory
                .record_digest(record)?
                .unwrap_or_else(|| "absent".to_string());
            let artifact = CurrentArtifact {
                digest: digest.clone(),
                existing_entries: existing,
            };
            let absorption: Absorption =
                absorb_memory_proposal(proposal, &digest, &artifact)?;
            self.event(
                EventType::ArtifactSynchronization,
                proposal.proposer,
                task_id,
                format!(
                    "proposal={} decision={}",
                    proposal.kind,
                    match absorption.decision {
                        AbsorptionDecision::Accept => "accept",
                        AbsorptionDecision::Reject => "reject",
                        AbsorptionDecision::Defer => "defer",
                    }
                ),
                Vec::new(),
            )?;
            if absorption.decision != AbsorptionDecision::Accept {
                continue;
            }
            match proposal.kind {
                ProposalKind::PositiveCandidate | ProposalKind::NegativeCandidate => {
                    self.memory
                        .add_prior(serde_json::from_str(&proposal.content)?)?;
                }
                ProposalKind::DecisionCandidate => {
                    let mut ledger = self.memory.decisions()?.unwrap_or_default();
                    ledger.decisions.push(serde_json::from_str(&proposal.content)?);
                    self.memory.set_decisions(&ledger)?;
                }
                ProposalKind::RelationCandidate => {
                    let mut map = self.memory.relations()?.unwrap_or_default();
                    map.edges.push(serde_json::from_str(&proposal.content)?);
                    self.memory.set_relations(&map)?;
                }
                ProposalKind::ContextSnapshotCandidate => {
                    // snapshots are derived centrally, never absorbed raw
                    self.memory
                        .append_trace("snapshot candidate noted; central derivation stands")?;
                }
                ProposalKind::TraceEventCandidate | ProposalKind::RuntimeEventCandidate => {
                    self.memory.append_trace(&proposal.content)?;
                }
            }
        }
        Ok(())
    }
}

fn count_files(dir: &Path) -> u32 {
    let mut count = 0;
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                count += count_files(&path);
            } else {
                count += 1;
            }
        }
    }
    count
}

fn anchor_for(task: &TaskFile) -> InitialPromptAnchor {
    InitialPromptAnchor {
        original_prompt: format!(
            "Forecast `{}` for every entity over {}..{} and submit the grid to {}",
            task.output.value_column,
            task.scope.horizon_start,
            task.scope.horizon_end,
            task.endpoints.base_path
        ),
        goals: vec![
            "produce an admissible submission".into(),
            "respect the leakage boundary".into(),
            "compare every candidate against a baseline".into(),
        ],
        metrics: task
            .metrics
            .iter()
            .map(|m| m.metric_id.as_str().to_string())
            .collect(),
        non_goals: vec!["model search beyond the scripted strategies".into()],
        clarifications: Vec::new(),
    }
}

/// Run the full governed loop against a live task service: grounding,
/// branch expansion, execution under temporal review, rollback when
/// triggered, and a gated completion. Ends only on a resolved allow-stop.
pub fn run_governed_loop(
    task: &TaskFile,
    endpoint: &str,
    roles: &mut RoleSet,
    config: &RunConfig,
) -> Result<RunOutcome, OrchestrationError> {
    let started = Instant::now();
    for required in [
        RoleId::Orchestrator,
        RoleId::Constructor,
        RoleId::TemporalGovernor,
        RoleId::FinalReviewer,
    ] {
        if !roles.contains(required) {
            return Err(OrchestrationError::MissingRole(required.as_str().to_string()));
        }
    }

    // -- grounding: discover and fetch the public files --------------------
    let client = ServerClient::new(endpoint, &config.submitter);
    let manifest_entries = client.list_files()?;
    let train_bytes = client.fetch_file(TRAIN_FILE)?;
    let test_bytes = client.fetch_file(TEST_FILE)?;
    for (name, bytes) in [(TRAIN_FILE, &train_bytes), (TEST_FILE, &test_bytes)] {
        if let Some(entry) = manifest_entries.iter().find(|e| e.file_name == name) {
            if entry.content_digest != sha256_hex(bytes) {
                return Err(OrchestrationError::InvariantViolated(format!(
                    "downloaded `{name}` does not match its manifest digest"
                )));
            }
        }
    }
    let schema = SchemaMap::default();
    let mut train = ingest_table(&train_bytes, &schema)?;
    train.cutoff = Some(task.scope.history_end);
    train.check()?;
    let skeleton = parse_skeleton(&test_bytes, &schema)?;
    let mut run = RunContext::new(
        task.clone(),
        train,
        skeleton,
        config.run_dir.clone(),
        config.ses_alpha,
    );
    run.tool("server.files");
    run.tool("server.download");
    run.tool("table.ingest");
    run.tool("skeleton.parse");

    let mut engine = LoopEngine::new(config)?;
    engine.event(
        EventType::RepositoryInitialization,
        RoleId::Orchestrator,
        "run",
        format!(
            "status=ready files={} horizon_steps={}",
            manifest_entries.len(),
            task.scope.step_count
        ),
        vec!["task.txt".into(), "manifest.txt".into()],
    )?;

    engine.memory.record_anchor(&anchor_for(task))?;
    engine.memory.set_progress(&ProgressLedger {
        current_focus: "grounding".into(),
        completed_this_round: vec!["public files fetched and verified".into()],
        suggested_next: vec![SuggestedAction {
            action: "interpret the task file".into(),
            evidence: "manifest digests match the downloads".into(),
        }],
    })?;
    engine.memory.set_decisions(&DecisionLedger {
        decisions: vec![DecisionEntry {
            decision: "work only from the files the service exposes".into(),
            reason: "anything else could cross the hidden boundary".into(),
            rollback_cost: "none; the service is the only source".into(),
        }],
        deferred: Vec::new(),
    })?;
    engine.memory.set_gate(&engine.gate)?;
    engine.event(
        EventType::CompletionGateUpdate,
        RoleId::Orchestrator,
        "run",
        "stop_permission=false run just opened".into(),
        vec!["memory/gate.txt".into()],
    )?;
    engine.compact(
        CompactionTrigger::AfterWorkspaceInitialization,
        &run,
        "grounding",
        "interpret the task",
    )?;

    if roles.contains(RoleId::Interpreter) {
        engine.dispatch(
            roles,
            &mut run,
            RoleId::Interpreter,
            "resolve the temporal constraint surface",
            "interpret",
            &["memory/"],
        )?;
        engine.pass_check(PreStopCheck::DeepReasoning)?;
    } else {
        engine.pass_check(PreStopCheck::DeepReasoning)?;
    }
    if roles.contains(RoleId::EvidenceCollector) {
        engine.dispatch(
            roles,
            &mut run,
            RoleId::EvidenceCollector,
            "collect local evidence from the public files",
            "evidence",
            &["memory/"],
        )?;
    }

    // -- expansion: wave 0 --------------------------------------------------
    engine.dispatch(
        roles,
        &mut run,
        RoleId::Constructor,
        "draft wave-0 candidates and their figures",
        "wave0_drafts",
        &["figures/", "memory/"],
    )?;
    let wave0_branches: Vec<String> = run
        .branches
        .active()
        .map(|b| b.branch_id.clone())
        .collect();
    engine.event(
        EventType::CheckpointCreation,
        RoleId::Orchestrator,
        "run",
        format!("wave=0 branches={}", wave0_branches.join("|")),
        Vec::new(),
    )?;
    if run.branches.open_in_wave(0) >= 2 {
        engine.pass_check(PreStopCheck::Brainstorm)?;
    }
    engine.set_remaining(4)?;

    // -- execution under temporal review -------------------------------------
    let mut review_loop_opened = false;
    loop {
        let turn = engine.dispatch(
            roles,
            &mut run,
            RoleId::TemporalGovernor,
            "review the open candidates for temporal discipline",
            "review",
            &["memory/"],
        )?;
        if turn.issues.is_empty() && !engine.ledger.blocked() {
            break;
        }
        if !review_loop_opened {
            review_loop_opened = true;
            let view = CompactionView {
                review_loop_just_opened: true,
                ..CompactionView::default()
            };
            for trigger in compaction_due(&view) {
                engine.compact(trigger, &run, "review", "address review issues")?;
            }
        }
        let open_ids = engine.ledger.open_issue_ids();
        let Some(issue_id) = open_ids.first() else {
            continue;
        };
        let issue_text = engine
            .ledger
            .threads
            .get(issue_id)
            .map(|t| t.issue.text.clone())
            .unwrap_or_default();
        let focus = if issue_text.starts_with(LEAKAGE_ISSUE) {
            "fix_leakage"
        } else if issue_text.starts_with(CITATION_ISSUE) {
            "cite_artifacts"
        } else {
            "baseline_comparison"
        };
        engine.dispatch(
            roles,
            &mut run,
            RoleId::Constructor,
            "address the open review issue",
            focus,
            &["figures/", "memory/"],
        )?;

        // orchestrator-level rollback watch
        let triggers = detect_rollback(&run.view());
        if let Some(fixation) = triggers
            .iter()
            .find(|t| t.kind == RollbackKind::OneStrategyFixation)
            .cloned()
        {
            engine.rollbacks.push(fixation.clone());
            let branch_id = run
                .branches
                .active()
                .find(|b| b.revisions_without_new_evidence >= FIXATION_REVISION_LIMIT)
                .map(|b| b.branch_id.clone());
            if let Some(branch_id) = branch_id {
                run.branches
                    .get_mut(&branch_id)
                    .expect("branch exists")
                    .status = BranchStatus::Abandoned;
                engine.event(
                    EventType::CheckpointCreation,
                    RoleId::Orchestrator,
                    "run",
                    format!("trigger={} branch={branch_id} action=reenter_expansion",
                        fixation.kind.as_str()),
                    Vec::new(),
                )?;
                let view = CompactionView {
                    plan_switch_pending: true,
                    ..CompactionView::default()
                };
                for trigger in compaction_due(&view) {
                    engine.compact(trigger, &run, "expansion", "open the fallback line")?;
                }
                engine.dispatch(
                    roles,
                    &mut run,
                    RoleId::Constructor,
                    "re-enter expansion with the fallback line",
                    "expansion_fallback",
                    &["figures/", "memory/"],
                )?;
                if run.branches.open_in_wave(0) + run.branches.open_in_wave(1) >= 1 {
                    engine.pass_check(PreStopCheck::Brainstorm)?;
                }
            }
        }
    }
    engine.pass_check(PreStopCheck::CriticLoop)?;
    engine.pass_check(PreStopCheck::TemporalGovernor)?;
    engine.set_remaining(3)?;

    // a leader must exist; the standard path elects one during comparison,
    // and any still-leaderless run falls back to the best backtested branch
    if run.branches.leader().is_none() {
        let best = run
            .branches
            .active()
            .filter(|b| b.leakage_verdict != Some(LeakageVerdict::Invalid))
            .min_by(|a, b| {
                a.backtest_rmsle
                    .unwrap_or(f64::INFINITY)
                    .partial_cmp(&b.backtest_rmsle.unwrap_or(f64::INFINITY))
                    .expect("finite scores")
            })
            .map(|b| b.branch_id.clone())
            .ok_or_else(|| {
                OrchestrationError::InvariantViolated("no branch eligible to lead".into())
            })?;
        run.branches.set_leading(&best)?;
    }
    // wave-0 breadth is only demanded when no fixation rollback already
    // documented the shortfall and re-entered expansion with a later wave
    let wave0_breadth_required = engine
        .rollbacks
        .iter()
        .all(|t| t.kind != RollbackKind::OneStrategyFixation);
    run.branches.check(wave0_breadth_required)?;
    let leader_id = run.branches.leader().expect("leader set").branch_id.clone();
    engine.event(
        EventType::CheckpointCreation,
        RoleId::Orchestrator,
        "run",
        format!("wave=1 leader={leader_id}"),
        Vec::new(),
    )?;

    // -- final submission -----------------------------------------------------
    engine.dispatch(
        roles,
        &mut run,
        RoleId::Constructor,
        "render the final submission from the leading branch",
        "final_submission",
        &["submissions/", "memory/"],
    )?;
    let payload = run
        .final_payload
        .clone()
        .ok_or_else(|| OrchestrationError::InvariantViolated("no final payload".into()))?;
    let record = client.submit(&payload)?;
    run.tool("server.submit");
    std::fs::write(
        config.run_dir.join("submissions").join("response.json"),
        serde_json::to_vec_pretty(&record)?,
    )?;
    if !record.admissible {
        let failed: Vec<String> = record
            .validity
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.detail.clone())
            .collect();
        return Err(OrchestrationError::InvariantViolated(format!(
            "final submission was not admissible: {}",
            failed.join("; ")
        )));
    }
    run.final_record = Some(record.clone());
    engine.gate.completion_state = CompletionState::Complete;
    engine.set_remaining(1)?;

    // -- housekeeping and memory closure ---------------------------------------
    engine.dispatch(
        roles,
        &mut run,
        RoleId::Orchestrator,
        "sweep scratch artifacts before review",
        "housekeeping",
        &["memory/"],
    )?;
    engine.memory.set_progress(&ProgressLedger {
        current_focus: "completion".into(),
        completed_this_round: vec![
            format!("final submission accepted as id {}", record.id),
            format!("leading branch `{leader_id}` validated against the baseline"),
        ],
        suggested_next: vec![SuggestedAction {
            action: "final review and stop decision".into(),
            evidence: "gate clauses all satisfied".into(),
        }],
    })?;
    engine.memory.set_features(&FeatureLedger {
        delivered: vec![
            DeliveredFeature {
                feature: "wave-0 strategy branches with figures".into(),
                evidence_artifact: "figures/".into(),
            },
            DeliveredFeature {
                feature: "boundary-disciplined weekday lag".into(),
                evidence_artifact: "figures/boundary_weekday_lag.svg".into(),
            },
            DeliveredFeature {
                feature: "final submission".into(),
                evidence_artifact: "submissions/final.csv".into(),
            },
        ],
        planned: Vec::new(),
    })?;
    let anchor = engine.memory.anchor()?.expect("anchor recorded");
    engine.gate.initial_prompt_drift = describe_drift(&anchor, &anchor.goals);
    engine.gate.role_challenges = vec![
        RoleChallenge {
            role: RoleId::TemporalGovernor.as_str().into(),
            can_continue: false,
            next_action: "none".into(),
        },
        RoleChallenge {
            role: RoleId::FinalReviewer.as_str().into(),
            can_continue: false,
            next_action: "none".into(),
        },
    ];
    engine.gate.housekeeping = Housekeeping {
        cleanup_done: true,
        removed: vec!["scratch_grid.tsv".into()],
        kept_with_reason: run
            .cited
            .iter()
            .map(|a| (a.clone(), "cited by the run report".to_string()))
            .collect(),
    };
    engine.set_remaining(0)?;
    run.gate_draft = Some(engine.gate.clone());

    // -- pre-review compaction: the reviewer must read a fresh snapshot --------
    let blockers: Vec<String> = engine.open_blockers.iter().cloned().collect();
    let stale = !engine.memory.snapshot()?.map_or(false, |s| {
        engine
            .memory
            .snapshot_is_fresh(&s, &run.branches.serialized(), &blockers)
            .unwrap_or(false)
    });
    let view = CompactionView {
        final_review_queued: true,
        snapshot_fresh_for_final_review: !stale,
        ..CompactionView::default()
    };
    for trigger in compaction_due(&view) {
        engine.compact(trigger, &run, "completion", "final review")?;
    }
    let snapshot = engine.memory.snapshot()?.expect("snapshot derived");
    run.snapshot_fresh_for_review = engine.memory.snapshot_is_fresh(
        &snapshot,
        &run.branches.serialized(),
        &blockers,
    )?;
    engine.gate.snapshot_freshness = if run.snapshot_fresh_for_review {
        Freshness::Fresh
    } else {
        Freshness::Stale
    };
    run.gate_draft = Some(engine.gate.clone());

    // -- final review and the stop decision -------------------------------------
    let mut signals: Vec<CompletionSignal> = Vec::new();
    let governor_turn = engine.dispatch(
        roles,
        &mut run,
        RoleId::TemporalGovernor,
        "confirm nothing remains to block on",
        "final_signal",
        &["memory/"],
    )?;
    signals.extend(governor_turn.signal);
    let reviewer_turn = engine.dispatch(
        roles,
        &mut run,
        RoleId::FinalReviewer,
        "verify every gate clause against the live run",
        "final_review",
        &["memory/"],
    )?;
    signals.extend(reviewer_turn.signal);
    engine.pass_check(PreStopCheck::FinalReviewer)?;

    let (permitted, reason) = evaluate_completion_gate(&engine.gate)?;
    engine.gate.stop_permission = permitted;
    engine.gate.reason = reason.clone();
    engine.memory.set_gate(&engine.gate)?;
    engine.event(
        EventType::CompletionGateUpdate,
        RoleId::Orchestrator,
        "run",
        format!("stop_permission={permitted} {reason}"),
        vec!["memory/gate.txt".into()],
    )?;
    if !permitted {
        return Err(OrchestrationError::InvariantViolated(format!(
            "completion gate refused to open: {reason}"
        )));
    }
    signals.push(CompletionSignal {
        kind: SignalKind::AllowStop,
        reasons: reason,
        scope: "whole run".into(),
        next_action: None,
        completion_checks: [("gate_open".to_string(), true)].into_iter().collect(),
        remaining_action_count: 0,
        complete_state: true,
        issued_by: RoleId::Orchestrator,
    });
    let decision = resolve_authority(&signals).clone();
    engine.event(
        EventType::StopGoSignal,
        decision.issued_by,
        "run",
        format!("decision={} by={}", decision.kind, decision.issued_by),
        Vec::new(),
    )?;

    // -- report, statistics, and replay -----------------------------------------
    save_rebuttals(&engine.ledger, &config.run_dir.join("memory").join("rebuttals"))?;
    let report_path = config.run_dir.join("report.txt");
    let report = render_report(&run, &record, engine.review_blocks, engine.critique_rounds);
    std::fs::write(&report_path, report)?;
    run.tool("report.render");

    let figures = count_files(&config.run_dir.join("figures"));
    let trace = TraceStatistics {
        runtime_seconds: started.elapsed().as_secs_f64(),
        unique_tools: run.tools.len() as u32,
        touched_files: count_files(&config.run_dir) + 1,
        review_blocks: engine.review_blocks,
        critique_rounds: engine.critique_rounds,
        figures_produced: figures,
    };
    std::fs::write(
        config.run_dir.join("trace_stats.json"),
        serde_json::to_vec_pretty(&trace)?,
    )?;
    let events = read_events(engine.log.path())?;
    let state = replay(&events);

    Ok(RunOutcome {
        final_submission: record,
        event_log_path: config.run_dir.join("events.log"),
        memory_dir: config.run_dir.join("memory"),
        report_path,
        trace,
        state,
        branches: run.branches.clone(),
        rollbacks: engine.rollbacks.clone(),
    })
}

fn render_report(
    run: &RunContext,
    record: &SubmissionRecord,
    review_blocks: u32,
    critique_rounds: u32,
) -> String {
    let mut out = String::new();
    out.push_str("# Run report\n\n");
    out.push_str(&format!(
        "Task: {} steps over {}..{}, primary metric {}\n\n",
        run.task.scope.step_count,
        run.task.scope.horizon_start,
        run.task.scope.horizon_end,
        run.task.primary_metric()
    ));
    out.push_str("## Branches\n");
    for branch in &run.branches.branches {
        out.push_str(&format!(
            "- {} (wave {}, {:?}): {}{}\n",
            branch.branch_id,
            branch.wave,
            branch.status,
            branch.description,
            branch
                .backtest_rmsle
                .map(|s| format!("; held-out rmsle {s:.4}"))
                .unwrap_or_default()
        ));
    }
    out.push_str("\n## Review\n");
    out.push_str(&format!(
        "{review_blocks} review blocks, {critique_rounds} critique rounds, all resolved\n",
    ));
    out.push_str("\n## Figures\n");
    for artifact in &run.cited {
        out.push_str(&format!("- {artifact}\n"));
    }
    out.push_str("\n## Final submission\n");
    out.push_str(&format!(
        "id {}, admissible {}, scores {}\n",
        record.id,
        record.admissible,
        record
            .scores
            .as_ref()
            .map(|s| {
                s.values
                    .iter()
                    .map(|(m, v)| format!("{m}={v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_else(|| "none".to_string())
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_interface::synthetic::{default_slice, store_sales_fixture, SyntheticSpec};
    use crate::data_interface::{
        build_reconstruction, derive_task_file, load_workspace, write_reconstruction,
        FamilySelector, SliceSpec, TaskFileOptions,
    };
    use crate::task_server::{serve, ServerConfig, TaskServer};

    fn minimal_task() -> TaskFile {
        let slice = SliceSpec {
            store_ids: BTreeSet::from([1]),
            families: FamilySelector::Named(BTreeSet::from(["DAIRY".to_string()])),
            public_train_end: "2017-07-30".parse().unwrap(),
            hidden_start: "2017-07-31".parse().unwrap(),
            hidden_end: "2017-08-15".parse().unwrap(),
            auxiliary_truncation: BTreeMap::new(),
            auxiliary_full_span: BTreeSet::new(),
        };
        derive_task_file(
            "2017-01-01".parse().unwrap(),
            &slice,
            1,
            "America/Guayaquil",
            &TaskFileOptions::default(),
        )
        .unwrap()
    }

    fn scope(history_end: &str, horizon: (&str, &str), steps: u32) -> AccessScope {
        AccessScope {
            history_start: "2017-01-01".parse().unwrap(),
            history_end: history_end.parse().unwrap(),
            horizon_start: horizon.0.parse().unwrap(),
            horizon_end: horizon.1.parse().unwrap(),
            step_count: steps,
            granularity: Granularity::Daily,
            timezone: "America/Guayaquil".into(),
        }
    }

    fn table_from(rows: &[(u32, &str, &str, f64)]) -> UnifiedSeriesTable {
        let mut csv = String::from("id,date,store_nbr,family,sales\n");
        for (i, (store, family, date, value)) in rows.iter().enumerate() {
            csv.push_str(&format!("{i},{date},{store},{family},{value}\n"));
        }
        ingest_table(csv.as_bytes(), &SchemaMap::default()).unwrap()
    }

    /// Independent median: sort a copy, read the middle directly.
    fn oracle_median(values: &[f64]) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }

    #[test]
    fn median_forecast_matches_hand_oracle() {
        // ten days of history; only the last seven should matter
        let values = [9.0, 9.0, 9.0, 0.0, 0.0, 1.0, 2.0, 2.0, 3.0, 10.0];
        let rows: Vec<(u32, &str, &str, f64)> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let date: NaiveDate = "2017-07-01".parse().unwrap();
                let date = date + Days::new(i as u64);
                (1u32, "GROCERY I", Box::leak(date.to_string().into_boxed_str()) as &str, *v)
            })
            .collect();
        let table = table_from(&rows);
        let sc = scope("2017-07-10", ("2017-07-11", "2017-07-13"), 3);
        let grid = median_baseline_forecast(&table, &sc).unwrap();
        let expected = oracle_median(&values[3..]);
        assert_eq!(expected, 2.0);
        for date in sc.horizon_dates() {
            let got = grid[&(EntityKey::new(1, "GROCERY I"), date)];
            assert_eq!(got, expected, "constant across the horizon");
        }
    }

    #[test]
    fn median_forecast_short_and_constant_histories() {
        // four observations only: median of all four
        let table = table_from(&[
            (1, "DAIRY", "2017-07-01", 4.0),
            (1, "DAIRY", "2017-07-02", 8.0),
            (1, "DAIRY", "2017-07-03", 6.0),
            (1, "DAIRY", "2017-07-04", 2.0),
            (2, "DAIRY", "2017-07-01", 5.0),
            (2, "DAIRY", "2017-07-02", 5.0),
            (2, "DAIRY", "2017-07-03", 5.0),
            (2, "DAIRY", "2017-07-04", 5.0),
        ]);
        let sc = scope("2017-07-04", ("2017-07-05", "2017-07-05"), 1);
        let grid = median_baseline_forecast(&table, &sc).unwrap();
        let date: NaiveDate = "2017-07-05".parse().unwrap();
        assert_eq!(
            grid[&(EntityKey::new(1, "DAIRY"), date)],
            oracle_median(&[4.0, 8.0, 6.0, 2.0])
        );
        assert_eq!(grid[&(EntityKey::new(2, "DAIRY"), date)], 5.0);
    }

    #[test]
    fn ses_recursion_unrolled_by_hand() {
        let table = table_from(&[
            (1, "DAIRY", "2017-07-01", 1.0),
            (1, "DAIRY", "2017-07-02", 2.0),
            (1, "DAIRY", "2017-07-03", 3.0),
        ]);
        let sc = scope("2017-07-03", ("2017-07-04", "2017-07-05"), 2);
        let grid = ses_forecast(&table, &sc, 0.5).unwrap();
        let date: NaiveDate = "2017-07-04".parse().unwrap();
        // level = 0.5*3 + 0.5*(0.5*2 + 0.5*1) = 2.25
        assert!((grid[&(EntityKey::new(1, "DAIRY"), date)] - 2.25).abs() < 1e-12);

        // alpha = 1 degenerates to the last observation
        let last = ses_forecast(&table, &sc, 1.0).unwrap();
        assert_eq!(last[&(EntityKey::new(1, "DAIRY"), date)], 3.0);

        // constant history is a fixed point for any alpha
        let constant = table_from(&[
            (1, "DAIRY", "2017-07-01", 7.0),
            (1, "DAIRY", "2017-07-02", 7.0),
        ]);
        let fixed = ses_forecast(&constant, &sc, 0.3).unwrap();
        assert_eq!(fixed[&(EntityKey::new(1, "DAIRY"), date)], 7.0);

        assert!(matches!(
            ses_forecast(&table, &sc, 0.0),
            Err(OrchestrationError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            ses_forecast(&table, &sc, 1.5),
            Err(OrchestrationError::AlphaOutOfRange(_))
        ));
    }

    #[test]
    fn weekday_lag_uses_lag_where_legal_and_fallback_elsewhere() {
        // 30 days of history, value = day-of-month, horizon of 16
        let mut rows = Vec::new();
        let start: NaiveDate = "2017-07-01".parse().unwrap();
        for i in 0..30u64 {
            let date = start + Days::new(i);
            rows.push((
                1u32,
                "DAIRY",
                Box::leak(date.to_string().into_boxed_str()) as &str,
                (i + 1) as f64,
            ));
        }
        let table = table_from(&rows);
        let sc = scope("2017-07-30", ("2017-07-31", "2017-08-15"), 16);
        let (grid, report) =
            weekday_lag_forecast(&table, &sc, median_baseline_forecast).unwrap();
        assert_eq!(report, check_boundary("target_lag_7", 7, &sc));
        assert_eq!(report.valid_dates.len(), 7);

        let entity = EntityKey::new(1, "DAIRY");
        let median_grid = median_baseline_forecast(&table, &sc).unwrap();
        for date in sc.horizon_dates() {
            let got = grid[&(entity.clone(), date)];
            if report.valid_dates.contains(&date) {
                let source = date - Days::new(7);
                let expected = (source - start).num_days() as f64 + 1.0;
                assert_eq!(got, expected, "lagged value on {date}");
            } else {
                assert_eq!(got, median_grid[&(entity.clone(), date)], "fallback on {date}");
            }
        }
    }

    #[test]
    fn weekday_lag_falls_back_per_missing_cell() {
        // entity observed only on the 24th..30th except the 24th is missing,
        // so 07-31 (lag source 07-24) must come from the fallback
        let mut rows = Vec::new();
        let start: NaiveDate = "2017-07-25".parse().unwrap();
        for i in 0..6u64 {
            let date = start + Days::new(i);
            rows.push((
                1u32,
                "DAIRY",
                Box::leak(date.to_string().into_boxed_str()) as &str,
                3.0,
            ));
        }
        let table = table_from(&rows);
        let sc = scope("2017-07-30", ("2017-07-31", "2017-08-01"), 2);
        let (grid, report) =
            weekday_lag_forecast(&table, &sc, median_baseline_forecast).unwrap();
        let entity = EntityKey::new(1, "DAIRY");
        let d31: NaiveDate = "2017-07-31".parse().unwrap();
        let d01: NaiveDate = "2017-08-01".parse().unwrap();
        assert!(report.valid_dates.contains(&d31));
        // 07-24 unobserved: per-cell fallback (median of 3.0s)
        assert_eq!(grid[&(entity.clone(), d31)], 3.0);
        // 07-25 observed: the lag serves 08-01
        assert_eq!(grid[&(entity.clone(), d01)], 3.0);
    }

    #[test]
    fn submission_rendering_respects_skeleton_order() {
        let table = table_from(&[
            (1, "DAIRY", "2017-07-01", 2.0),
            (2, "DAIRY", "2017-07-01", 4.0),
        ]);
        let sc = scope("2017-07-01", ("2017-07-02", "2017-07-02"), 1);
        let grid = median_baseline_forecast(&table, &sc).unwrap();
        let date: NaiveDate = "2017-07-02".parse().unwrap();
        let skeleton = vec![
            SkeletonRow {
                id: 0,
                date,
                entity: EntityKey::new(1, "DAIRY"),
            },
            SkeletonRow {
                id: 1,
                date,
                entity: EntityKey::new(2, "DAIRY"),
            },
        ];
        let task = derive_task_file(
            "2017-07-01".parse().unwrap(),
            &SliceSpec {
                store_ids: BTreeSet::from([1, 2]),
                families: FamilySelector::Named(BTreeSet::from(["DAIRY".to_string()])),
                public_train_end: "2017-07-01".parse().unwrap(),
                hidden_start: "2017-07-02".parse().unwrap(),
                hidden_end: "2017-07-02".parse().unwrap(),
                auxiliary_truncation: BTreeMap::new(),
                auxiliary_full_span: BTreeSet::new(),
            },
            2,
            "America/Guayaquil",
            &TaskFileOptions::default(),
        )
        .unwrap();
        task.check().unwrap();
        let payload = render_submission(&skeleton, &grid, &task).unwrap();
        let text = String::from_utf8(payload).unwrap();
        assert_eq!(text, "id,sales\n0,2\n1,4\n");

        let missing = ForecastGrid::new();
        assert!(matches!(
            render_submission(&skeleton, &missing, &task),
            Err(OrchestrationError::IncompleteForecast(_))
        ));
    }

    #[test]
    fn backtest_holds_out_the_tail_and_hides_it_from_the_forecaster() {
        let mut rows = Vec::new();
        let start: NaiveDate = "2017-07-01".parse().unwrap();
        for i in 0..20u64 {
            let date = start + Days::new(i);
            rows.push((
                1u32,
                "DAIRY",
                Box::leak(date.to_string().into_boxed_str()) as &str,
                5.0,
            ));
        }
        let table = table_from(&rows);
        let outcome = local_backtest(&table, 4, |t, s| {
            let max_seen = t.rows.iter().map(|r| r.date).max().unwrap();
            assert!(max_seen <= s.history_end, "validation rows leaked into the forecaster");
            median_baseline_forecast(t, s)
        })
        .unwrap();
        // constant series: the median nails the held-out window
        assert_eq!(outcome.rmsle, 0.0);
        assert_eq!(outcome.rows, 4);
        assert_eq!(outcome.window_end, start + Days::new(19));

        assert!(matches!(
            local_backtest(&table, 20, median_baseline_forecast),
            Err(OrchestrationError::Backtest(_))
        ));
    }

    #[test]
    fn invalid_branch_cannot_lead() {
        let mut table = BranchTable::default();
        table.branches.push(StrategyBranch::new("a", 0, "lag", "baseline"));
        table.branches.push(StrategyBranch::new("b", 0, "median", "baseline"));
        table.branches[0].leakage_verdict = Some(LeakageVerdict::Invalid);
        assert!(table.set_leading("a").is_err());
        table.set_leading("b").unwrap();
        table.check(true).unwrap();

        // direct mutation is caught by the table check
        table.branches[1].leakage_verdict = Some(LeakageVerdict::Invalid);
        assert!(table.check(true).is_err());

        let mut solo = BranchTable::default();
        solo.branches.push(StrategyBranch::new("only", 0, "lag", "baseline"));
        assert!(solo.check(true).is_err(), "one open wave-0 branch on a benchmark task");
        solo.check(false).unwrap();
    }

    #[test]
    fn rollback_predicates_fire_on_their_evidence() {
        let clean = RunView::default();
        assert!(detect_rollback(&clean).is_empty());

        let mut fixated = RunView::default();
        fixated
            .revisions_without_new_evidence
            .insert("weekday_lag".into(), FIXATION_REVISION_LIMIT);
        let triggers = detect_rollback(&fixated);
        assert_eq!(triggers.len(), 1);
        assert_eq!(triggers[0].kind, RollbackKind::OneStrategyFixation);
        assert!(triggers[0].evidence.contains("weekday_lag"));

        let mut two_revisions = fixated.clone();
        two_revisions
            .revisions_without_new_evidence
            .insert("weekday_lag".into(), FIXATION_REVISION_LIMIT - 1);
        assert!(detect_rollback(&two_revisions).is_empty());

        let uncited = RunView {
            uncited_artifacts: vec!["figures/a.svg".into()],
            ..RunView::default()
        };
        assert_eq!(
            detect_rollback(&uncited)[0].kind,
            RollbackKind::UnconsumedArtifacts
        );

        let weak = RunView {
            scored_without_validation: vec!["ses".into()],
            ..RunView::default()
        };
        assert_eq!(detect_rollback(&weak)[0].kind, RollbackKind::WeakValidation);

        let ambiguous = RunView {
            unresolved_constraint_fields: vec!["horizon_end".into()],
            ..RunView::default()
        };
        assert_eq!(
            detect_rollback(&ambiguous)[0].kind,
            RollbackKind::TemporalAmbiguity
        );

        let premature = RunView {
            stop_attempted_with_open_blockers: true,
            ..RunView::default()
        };
        assert_eq!(
            detect_rollback(&premature)[0].kind,
            RollbackKind::PrematureCompletion
        );
    }

    // -- full-loop fixtures --------------------------------------------------

    fn synthetic_workspace(dir: &Path, stores: u32, families: u32) -> PathBuf {
        let spec = SyntheticSpec {
            seed: 11,
            stores,
            families,
            history_start: "2017-01-01".parse().unwrap(),
            hidden_end: "2017-08-15".parse().unwrap(),
        };
        let raw = store_sales_fixture(&spec);
        let slice = default_slice(&spec);
        let schema = SchemaMap::default();
        let recon = build_reconstruction(&raw, &slice, &schema).unwrap();
        let task = derive_task_file(
            spec.history_start,
            &slice,
            (stores * families) as u64,
            &schema.timezone,
            &TaskFileOptions::default(),
        )
        .unwrap();
        let out = dir.join("workspace");
        write_reconstruction(&recon, &task, &schema, &out).unwrap();
        out
    }

    fn serve_workspace(out: &Path, log_name: &str) -> (TaskServer, TaskFile) {
        let ws = load_workspace(out, &SchemaMap::default()).unwrap();
        let task = ws.task.clone();
        let config =
            ServerConfig::from_workspace(&ws, out.join(log_name)).unwrap();
        (serve(config, 0).unwrap(), task)
    }

    #[test]
    fn governed_loop_reproduces_the_scripted_case_flow() {
        let dir = tempfile::tempdir().unwrap();
        let out = synthetic_workspace(dir.path(), 2, 2);
        let (server, task) = serve_workspace(&out, "submissions.jsonl");
        let mut roles = RoleSet::standard();
        let config = RunConfig::new(dir.path().join("run"));
        let outcome =
            run_governed_loop(&task, &server.base_url(), &mut roles, &config).unwrap();

        assert!(outcome.final_submission.admissible);
        assert_eq!(outcome.trace.review_blocks, 3, "three review blocks");
        assert_eq!(outcome.trace.critique_rounds, 3, "three critique rounds");
        assert!(outcome.trace.figures_produced >= 4);
        assert!(outcome.rollbacks.is_empty());

        // stop discipline: gate opens, then a resolved allow-stop ends the run
        assert!(outcome.state.violations.is_empty(), "{:?}", outcome.state.violations);
        assert!(outcome.state.stop_permission);
        assert_eq!(outcome.state.last_signal, Some(SignalKind::AllowStop));
        assert!(outcome.state.open_issues.is_empty());
        assert!(outcome.state.open_blockers.is_empty());

        // branch discipline: a leader exists and is not invalid
        let leader = outcome.branches.leader().unwrap();
        assert_ne!(leader.leakage_verdict, Some(LeakageVerdict::Invalid));

        // replay determinism: folding the log twice gives identical states
        let events = read_events(&outcome.event_log_path).unwrap();
        assert_eq!(replay(&events), outcome.state);
        let final_events: Vec<_> = events
            .iter()
            .filter(|e| {
                matches!(
                    e.event_type,
                    EventType::CompletionGateUpdate | EventType::StopGoSignal
                )
            })
            .collect();
        let last_gate = final_events
            .iter()
            .rposition(|e| e.event_type == EventType::CompletionGateUpdate)
            .unwrap();
        let last_stop = final_events
            .iter()
            .rposition(|e| e.event_type == EventType::StopGoSignal)
            .unwrap();
        assert!(last_gate < last_stop);
        assert_eq!(
            final_events[last_gate].token("stop_permission"),
            Some("true")
        );
        assert_eq!(final_events[last_stop].token("decision"), Some("allow_stop"));

        // the memory directory verifies and the gate stands open
        let memory = MemoryStore::open(&outcome.memory_dir).unwrap();
        memory.verify_journal().unwrap();
        let gate = memory.gate().unwrap().unwrap();
        let (ok, reason) = evaluate_completion_gate(&gate).unwrap();
        assert!(ok);
        assert_eq!(reason, "all gates passed");

        // the report cites every citable artifact
        let report = std::fs::read_to_string(&outcome.report_path).unwrap();
        assert!(report.contains("backtest_comparison.svg"));
        drop(server);
    }

    #[test]
    fn fixated_constructor_triggers_rollback_onto_the_median_line() {
        let dir = tempfile::tempdir().unwrap();
        let out = synthetic_workspace(dir.path(), 2, 2);
        let (server, task) = serve_workspace(&out, "submissions.jsonl");
        let mut roles = RoleSet::with_constructor(ConstructorMode::WeekdayOnly);
        let config = RunConfig::new(dir.path().join("run"));
        let outcome =
            run_governed_loop(&task, &server.base_url(), &mut roles, &config).unwrap();

        assert!(outcome.final_submission.admissible);
        assert_eq!(outcome.rollbacks.len(), 1);
        assert_eq!(outcome.rollbacks[0].kind, RollbackKind::OneStrategyFixation);
        let leader = outcome.branches.leader().unwrap();
        assert_eq!(leader.branch_id, "median_baseline");
        let weekday = outcome.branches.get("weekday_lag").unwrap();
        assert_eq!(weekday.status, BranchStatus::Abandoned);
        assert!(outcome.state.violations.is_empty(), "{:?}", outcome.state.violations);
        assert_eq!(outcome.state.last_signal, Some(SignalKind::AllowStop));
        drop(server);
    }

    #[test]
    fn submissions_do_not_depend_on_hidden_truth() {
        let dir = tempfile::tempdir().unwrap();
        let out = synthetic_workspace(dir.path(), 1, 2);

        // second copy of the workspace with every hidden target perturbed
        let out_perturbed = dir.path().join("workspace_perturbed");
        copy_dir(&out, &out_perturbed);
        let truth_path = out_perturbed.join("hidden").join("truth.csv");
        let truth = std::fs::read_to_string(&truth_path).unwrap();
        let mut lines = truth.lines();
        let header = lines.next().unwrap().to_string();
        let mut perturbed = vec![header];
        for line in lines {
            let mut fields: Vec<String> = line.split(',').map(String::from).collect();
            let last = fields.len() - 1;
            let value: f64 = fields[last].parse().unwrap();
            fields[last] = format!("{}", value + 1.5);
            perturbed.push(fields.join(","));
        }
        std::fs::write(&truth_path, perturbed.join("\n") + "\n").unwrap();

        let (server_a, task_a) = serve_workspace(&out, "submissions.jsonl");
        let (server_b, task_b) = serve_workspace(&out_perturbed, "submissions.jsonl");
        let config_a = RunConfig::new(dir.path().join("run_a"));
        let config_b = RunConfig::new(dir.path().join("run_b"));
        run_governed_loop(&task_a, &server_a.base_url(), &mut RoleSet::standard(), &config_a)
            .unwrap();
        run_governed_loop(&task_b, &server_b.base_url(), &mut RoleSet::standard(), &config_b)
            .unwrap();
        let payload_a =
            std::fs::read(config_a.run_dir.join("submissions").join("final.csv")).unwrap();
        let payload_b =
            std::fs::read(config_b.run_dir.join("submissions").join("final.csv")).unwrap();
        assert_eq!(payload_a, payload_b, "predictions read hidden truth");
        drop(server_a);
        drop(server_b);
    }

    fn copy_dir(from: &Path, to: &Path) {
        std::fs::create_dir_all(to).unwrap();
        for entry in std::fs::read_dir(from).unwrap().flatten() {
            let target = to.join(entry.file_name());
            if entry.path().is_dir() {
                copy_dir(&entry.path(), &target);
            } else {
                std::fs::copy(entry.path(), &target).unwrap();
            }
        }
    }

    #[test]
    fn perfect_information_fixture_scores_zero() {
        // constant series: the recent-week median equals the hidden truth
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("id,date,store_nbr,family,sales,onpromotion\n");
        let start: NaiveDate = "2017-06-01".parse().unwrap();
        let mut id = 0;
        for day in 0..76u64 {
            let date = start + Days::new(day);
            for family in ["BEVERAGES", "DAIRY"] {
                csv.push_str(&format!("{id},{date},1,{family},5,0\n"));
                id += 1;
            }
        }
        let mut raw = BTreeMap::new();
        raw.insert(TRAIN_FILE.to_string(), csv.into_bytes());
        let slice = SliceSpec {
            store_ids: BTreeSet::from([1]),
            families: FamilySelector::All,
            public_train_end: "2017-07-30".parse().unwrap(),
            hidden_start: "2017-07-31".parse().unwrap(),
            hidden_end: "2017-08-15".parse().unwrap(),
            auxiliary_truncation: BTreeMap::new(),
            auxiliary_full_span: BTreeSet::new(),
        };
        let schema = SchemaMap::default();
        let recon = build_reconstruction(&raw, &slice, &schema).unwrap();
        let task = derive_task_file(
            start,
            &slice,
            2,
            &schema.timezone,
            &TaskFileOptions::default(),
        )
        .unwrap();
        let out = dir.path().join("workspace");
        write_reconstruction(&recon, &task, &schema, &out).unwrap();
        let (server, task) = serve_workspace(&out, "submissions.jsonl");
        let config = RunConfig::new(dir.path().join("run"));
        let outcome =
            run_governed_loop(&task, &server.base_url(), &mut RoleSet::standard(), &config)
                .unwrap();
        assert!(outcome.final_submission.admissible);
        let score = outcome
            .final_submission
            .scores
            .as_ref()
            .unwrap()
            .primary_value();
        assert_eq!(score, 0.0, "constant truth is fully predictable");
        assert_eq!(outcome.state.last_signal, Some(SignalKind::AllowStop));
        drop(server);
    }

    #[test]
    fn missing_required_role_is_refused() {
        let mut roles = RoleSet::standard();
        roles.remove(RoleId::TemporalGovernor);
        let config = RunConfig::new("/tmp/unused-run-dir");
        let task = minimal_task();
        assert!(matches!(
            run_governed_loop(&task, "http://127.0.0.1:1", &mut roles, &config),
            Err(OrchestrationError::MissingRole(name)) if name == "temporal_governor"
        ));
    }

    #[test]
    fn dispatch_budget_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let out = synthetic_workspace(dir.path(), 1, 1);
        let (server, task) = serve_workspace(&out, "submissions.jsonl");
        let mut config = RunConfig::new(dir.path().join("run"));
        config.max_dispatches = 2;
        assert!(matches!(
            run_governed_loop(&task, &server.base_url(), &mut RoleSet::standard(), &config),
            Err(OrchestrationError::BudgetExceeded(_))
        ));
        drop(server);
    }

    #[test]
    fn unreachable_server_is_reported() {
        let config = RunConfig::new("/tmp/unused-run-dir-2");
        let task = minimal_task();
        assert!(matches!(
            run_governed_loop(&task, "http://127.0.0.1:1", &mut RoleSet::standard(), &config),
            Err(OrchestrationError::ServerUnreachable(_))
        ));
    }
}
