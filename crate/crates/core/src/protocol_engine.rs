//! Runtime protocol between the orchestrating role and its subagents:
//! dispatch packets, the role lifecycle, reportbacks, issue rebuttals with
//! rechecks, completion signals with an authority order, a replayable event
//! log, memory synchronization decisions, and context compaction triggers.
//!
//! Everything here is pure except the event log appender, which is the
//! single writer for a run's trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::now_utc_micros;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("illegal lifecycle transition {from} -> {to}")]
    IllegalTransition { from: Stage, to: Stage },
    #[error("invalid dispatch packet: {0}")]
    InvalidDispatch(String),
    #[error("invalid reportback: {0}")]
    InvalidReportback(String),
    #[error("invalid completion signal: {0}")]
    InvalidSignal(String),
    #[error("unknown issue `{0}`")]
    UnknownIssue(String),
    #[error("issue `{0}` already opened")]
    DuplicateIssue(String),
    #[error("issue `{0}` is already resolved")]
    IssueClosed(String),
    #[error("recheck before any response requested it for issue `{0}`")]
    RecheckBeforeResponse(String),
    #[error("role {issued_by} lacks authority to close issue `{issue}`")]
    InsufficientAuthority { issue: String, issued_by: RoleId },
    #[error("non-monotone timestamp at line {line}: {current} after {previous}")]
    NonMonotoneTimestamp {
        line: usize,
        previous: String,
        current: String,
    },
    #[error("corrupt event record at line {line}: {detail}")]
    CorruptRecord { line: usize, detail: String },
    #[error("stale digest: artifact is {expected}, proposal read {got}")]
    StaleDigest { expected: String, got: String },
    #[error("malformed proposal: {0}")]
    MalformedProposal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Roles and authority
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RoleId {
    Orchestrator,
    Interpreter,
    EvidenceCollector,
    Constructor,
    TemporalGovernor,
    FinalReviewer,
    OtherSubagent,
}

impl RoleId {
    /// Lower rank means more authority over completion decisions.
    pub fn authority_rank(&self) -> u8 {
        match self {
            RoleId::FinalReviewer => 0,
            RoleId::TemporalGovernor => 1,
            RoleId::Orchestrator => 2,
            _ => 3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RoleId::Orchestrator => "orchestrator",
            RoleId::Interpreter => "interpreter",
            RoleId::EvidenceCollector => "evidence_collector",
            RoleId::Constructor => "constructor",
            RoleId::TemporalGovernor => "temporal_governor",
            RoleId::FinalReviewer => "final_reviewer",
            RoleId::OtherSubagent => "other_subagent",
        }
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orchestrator" => Ok(RoleId::Orchestrator),
            "interpreter" => Ok(RoleId::Interpreter),
            "evidence_collector" => Ok(RoleId::EvidenceCollector),
            "constructor" => Ok(RoleId::Constructor),
            "temporal_governor" => Ok(RoleId::TemporalGovernor),
            "final_reviewer" => Ok(RoleId::FinalReviewer),
            "other_subagent" => Ok(RoleId::OtherSubagent),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Full,
    Compacted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Autonomy {
    MayReframe,
    ExecuteOnly,
}

/// Everything a subagent receives when it is launched. All ten fields must
/// be populated; lists may be empty but never absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchPacket {
    pub objective: String,
    pub known_inputs: Vec<String>,
    pub context_mode: ContextMode,
    pub explicit_focus: String,
    pub required_reads: Vec<String>,
    pub permitted_action_scope: BTreeSet<String>,
    pub constraints: Vec<String>,
    pub autonomy_settings: Autonomy,
    pub output_requirements: String,
    pub blocking_context: Vec<String>,
}

impl DispatchPacket {
    pub fn check(&self) -> Result<(), ProtocolError> {
        for (name, value) in [
            ("objective", &self.objective),
            ("explicit_focus", &self.explicit_focus),
            ("output_requirements", &self.output_requirements),
        ] {
            if value.trim().is_empty() {
                return Err(ProtocolError::InvalidDispatch(format!(
                    "`{name}` must not be empty"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Lifecycle
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Assignment,
    ContextAlignment,
    InputValidation,
    Execution,
    SelfReview,
    ReportPreparation,
    Completion,
    Blockage,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Assignment => "assignment",
            Stage::ContextAlignment => "context_alignment",
            Stage::InputValidation => "input_validation",
            Stage::Execution => "execution",
            Stage::SelfReview => "self_review",
            Stage::ReportPreparation => "report_preparation",
            Stage::Completion => "completion",
            Stage::Blockage => "blockage",
        }
    }

    /// The legal outgoing edges: a linear chain with a blockage side state
    /// that re-enters at execution.
    pub fn expected_next(&self) -> BTreeSet<Stage> {
        let next: &[Stage] = match self {
            Stage::Assignment => &[Stage::ContextAlignment],
            Stage::ContextAlignment => &[Stage::InputValidation, Stage::Blockage],
            Stage::InputValidation => &[Stage::Execution, Stage::Blockage],
            Stage::Execution => &[Stage::SelfReview, Stage::Blockage],
            Stage::SelfReview => &[Stage::ReportPreparation, Stage::Blockage],
            Stage::ReportPreparation => &[Stage::Completion],
            Stage::Completion => &[],
            Stage::Blockage => &[Stage::Execution],
        };
        next.iter().copied().collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "assignment" => Ok(Stage::Assignment),
            "context_alignment" => Ok(Stage::ContextAlignment),
            "input_validation" => Ok(Stage::InputValidation),
            "execution" => Ok(Stage::Execution),
            "self_review" => Ok(Stage::SelfReview),
            "report_preparation" => Ok(Stage::ReportPreparation),
            "completion" => Ok(Stage::Completion),
            "blockage" => Ok(Stage::Blockage),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleState {
    pub state: Stage,
    pub entered_at: String,
    pub transition_reason: String,
    pub expected_next: BTreeSet<Stage>,
}

impl LifecycleState {
    pub fn initial() -> Self {
        LifecycleState {
            state: Stage::Assignment,
            entered_at: now_utc_micros(),
            transition_reason: "assigned".into(),
            expected_next: Stage::Assignment.expected_next(),
        }
    }
}

/// Pure transition; the caller owns persistence of the returned state.
pub fn transition(
    current: &LifecycleState,
    to: Stage,
    reason: &str,
) -> Result<LifecycleState, ProtocolError> {
    if !current.expected_next.contains(&to) {
        return Err(ProtocolError::IllegalTransition {
            from: current.state,
            to,
        });
    }
    Ok(LifecycleState {
        state: to,
        entered_at: now_utc_micros(),
        transition_reason: reason.to_string(),
        expected_next: to.expected_next(),
    })
}

// ---------------------------------------------------------------------------
// Reportback
// ---------------------------------------------------------------------------

/// What a subagent hands back when its turn ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reportback {
    pub status: Stage,
    pub completed_work: String,
    pub remaining_gaps: Vec<String>,
    pub new_risks: Vec<String>,
    pub suggested_memory_updates: Vec<MemorySyncProposal>,
    pub suggested_rule_or_protocol_updates: Vec<String>,
    pub suggested_next_step: String,
    pub suggested_next_role: RoleId,
    pub follow_up_actions: Vec<String>,
    pub can_continue_alone: bool,
    pub self_critique: String,
    pub why_stop_not_allowed: Option<String>,
}

impl Reportback {
    pub fn check(&self) -> Result<(), ProtocolError> {
        if self.status != Stage::Completion && self.why_stop_not_allowed.is_none() {
            return Err(ProtocolError::InvalidReportback(format!(
                "status {} requires why_stop_not_allowed",
                self.status
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rebuttal protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewIssue {
    pub id: String,
    pub text: String,
    pub raised_by: RoleId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    Accepted,
    Contested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueResponse {
    pub issue_id: String,
    pub acceptance_status: Acceptance,
    pub current_evidence: String,
    pub fix_plan: String,
    pub missing_evidence: String,
    pub remaining_blocker: String,
    pub recheck_requested: bool,
    pub responded_by: RoleId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecheckVerdict {
    pub issue_id: String,
    pub resolved: bool,
    pub reason: String,
    pub remaining_gap: String,
    pub required_next_change: String,
    pub completion_signal: SignalKind,
    pub follow_up_action: String,
    pub issued_by: RoleId,
}

/// One issue with its full exchange. Responses and verdicts append only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueThread {
    pub issue: ReviewIssue,
    pub responses: Vec<IssueResponse>,
    pub verdicts: Vec<RecheckVerdict>,
}

impl IssueThread {
    /// Closed only by a resolved verdict from a role at least as
    /// authoritative as the raiser.
    pub fn resolved(&self) -> bool {
        self.verdicts.iter().any(|v| {
            v.resolved && v.issued_by.authority_rank() <= self.issue.raised_by.authority_rank()
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RebuttalLedger {
    pub threads: BTreeMap<String, IssueThread>,
}

impl RebuttalLedger {
    pub fn open_rebuttal(&mut self, issues: Vec<ReviewIssue>) -> Result<(), ProtocolError> {
        for issue in &issues {
            if self.threads.contains_key(&issue.id) {
                return Err(ProtocolError::DuplicateIssue(issue.id.clone()));
            }
        }
        for issue in issues {
            self.threads.insert(
                issue.id.clone(),
                IssueThread {
                    issue,
                    responses: Vec::new(),
                    verdicts: Vec::new(),
                },
            );
        }
        Ok(())
    }

    pub fn answer_issue(
        &mut self,
        issue_id: &str,
        response: IssueResponse,
    ) -> Result<(), ProtocolError> {
        let thread = self
            .threads
            .get_mut(issue_id)
            .ok_or_else(|| ProtocolError::UnknownIssue(issue_id.to_string()))?;
        if thread.resolved() {
            return Err(ProtocolError::IssueClosed(issue_id.to_string()));
        }
        thread.responses.push(response);
        Ok(())
    }

    pub fn recheck(
        &mut self,
        issue_id: &str,
        verdict: RecheckVerdict,
    ) -> Result<(), ProtocolError> {
        let thread = self
            .threads
            .get_mut(issue_id)
            .ok_or_else(|| ProtocolError::UnknownIssue(issue_id.to_string()))?;
        if !thread.responses.iter().any(|r| r.recheck_requested) {
            return Err(ProtocolError::RecheckBeforeResponse(issue_id.to_string()));
        }
        if verdict.resolved
            && verdict.issued_by.authority_rank() > thread.issue.raised_by.authority_rank()
        {
            return Err(ProtocolError::InsufficientAuthority {
                issue: issue_id.to_string(),
                issued_by: verdict.issued_by,
            });
        }
        thread.verdicts.push(verdict);
        Ok(())
    }

    /// A candidate stays blocked until every issue has a resolved verdict.
    pub fn blocked(&self) -> bool {
        self.threads.values().any(|t| !t.resolved())
    }

    pub fn open_issue_ids(&self) -> Vec<String> {
        self.threads
            .values()
            .filter(|t| !t.resolved())
            .map(|t| t.issue.id.clone())
            .collect()
    }
}

/// One document per issue under `dir`, named by issue id.
pub fn save_rebuttals(ledger: &RebuttalLedger, dir: &Path) -> Result<(), ProtocolError> {
    std::fs::create_dir_all(dir)?;
    for (id, thread) in &ledger.threads {
        let path = dir.join(format!("{id}.json"));
        std::fs::write(path, serde_json::to_vec_pretty(thread)?)?;
    }
    Ok(())
}

pub fn load_rebuttals(dir: &Path) -> Result<RebuttalLedger, ProtocolError> {
    let mut ledger = RebuttalLedger::default();
    if !dir.exists() {
        return Ok(ledger);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let thread: IssueThread = serde_json::from_slice(&std::fs::read(&path)?)?;
        ledger.threads.insert(thread.issue.id.clone(), thread);
    }
    Ok(ledger)
}

// ---------------------------------------------------------------------------
// Completion signals and authority
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Continue,
    RebuttalRequired,
    AllowStop,
}

impl SignalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SignalKind::Continue => "continue",
            SignalKind::RebuttalRequired => "rebuttal_required",
            SignalKind::AllowStop => "allow_stop",
        }
    }

    /// Strictness for same-rank conflicts; lower is stricter.
    fn strictness(&self) -> u8 {
        match self {
            SignalKind::RebuttalRequired => 0,
            SignalKind::Continue => 1,
            SignalKind::AllowStop => 2,
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continue" => Ok(SignalKind::Continue),
            "rebuttal_required" => Ok(SignalKind::RebuttalRequired),
            "allow_stop" => Ok(SignalKind::AllowStop),
            other => Err(format!("unknown signal kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSignal {
    pub kind: SignalKind,
    pub reasons: String,
    pub scope: String,
    pub next_action: Option<String>,
    pub completion_checks: BTreeMap<String, bool>,
    pub remaining_action_count: u32,
    pub complete_state: bool,
    pub issued_by: RoleId,
}

impl CompletionSignal {
    pub fn check(&self) -> Result<(), ProtocolError> {
        match self.kind {
            SignalKind::AllowStop => {
                if self.remaining_action_count != 0 {
                    return Err(ProtocolError::InvalidSignal(format!(
                        "allow_stop with {} remaining actions",
                        self.remaining_action_count
                    )));
                }
                if !self.complete_state {
                    return Err(ProtocolError::InvalidSignal(
                        "allow_stop without complete state".into(),
                    ));
                }
                if let Some((name, _)) = self.completion_checks.iter().find(|(_, ok)| !**ok) {
                    return Err(ProtocolError::InvalidSignal(format!(
                        "allow_stop with failing check `{name}`"
                    )));
                }
            }
            SignalKind::Continue => {
                let some_check_open = self.completion_checks.values().any(|ok| !ok);
                if self.next_action.is_none() && !some_check_open {
                    return Err(ProtocolError::InvalidSignal(
                        "continue needs a next action or an open check".into(),
                    ));
                }
            }
            SignalKind::RebuttalRequired => {}
        }
        Ok(())
    }
}

/// Decide among concurrent signals. The most authoritative rank present
/// decides; within that rank the strictest kind wins, so stopping requires
/// unanimity there. Always returns one of the inputs.
pub fn resolve_authority(signals: &[CompletionSignal]) -> &CompletionSignal {
    assert!(!signals.is_empty(), "resolve_authority needs signals");
    let deciding_rank = signals
        .iter()
        .map(|s| s.issued_by.authority_rank())
        .min()
        .expect("nonempty");
    signals
        .iter()
        .filter(|s| s.issued_by.authority_rank() == deciding_rank)
        .min_by_key(|s| s.kind.strictness())
        .expect("nonempty rank group")
}

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    DispatchCreation,
    ReportbackReceipt,
    RebuttalOpening,
    RebuttalReview,
    StopGoSignal,
    CompletionGateUpdate,
    ContextCompaction,
    ArtifactSynchronization,
    RepositoryInitialization,
    CheckpointCreation,
}

impl EventType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::DispatchCreation => "dispatch_creation",
            EventType::ReportbackReceipt => "reportback_receipt",
            EventType::RebuttalOpening => "rebuttal_opening",
            EventType::RebuttalReview => "rebuttal_review",
            EventType::StopGoSignal => "stop_go_signal",
            EventType::CompletionGateUpdate => "completion_gate_update",
            EventType::ContextCompaction => "context_compaction",
            EventType::ArtifactSynchronization => "artifact_synchronization",
            EventType::RepositoryInitialization => "repository_initialization",
            EventType::CheckpointCreation => "checkpoint_creation",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dispatch_creation" => Ok(EventType::DispatchCreation),
            "reportback_receipt" => Ok(EventType::ReportbackReceipt),
            "rebuttal_opening" => Ok(EventType::RebuttalOpening),
            "rebuttal_review" => Ok(EventType::RebuttalReview),
            "stop_go_signal" => Ok(EventType::StopGoSignal),
            "completion_gate_update" => Ok(EventType::CompletionGateUpdate),
            "context_compaction" => Ok(EventType::ContextCompaction),
            "artifact_synchronization" => Ok(EventType::ArtifactSynchronization),
            "repository_initialization" => Ok(EventType::RepositoryInitialization),
            "checkpoint_creation" => Ok(EventType::CheckpointCreation),
            other => Err(format!("unknown event type `{other}`")),
        }
    }
}

/// One immutable trace record. Summaries hold machine-readable
/// `key=value` tokens separated by spaces so replay can parse them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeEvent {
    pub event_type: EventType,
    pub source: RoleId,
    pub task_id: String,
    pub timestamp: String,
    pub summary: String,
    pub affected_artifacts: Vec<String>,
}

impl RuntimeEvent {
    pub fn new(
        event_type: EventType,
        source: RoleId,
        task_id: impl Into<String>,
        summary: impl Into<String>,
        affected_artifacts: Vec<String>,
    ) -> Self {
        RuntimeEvent {
            event_type,
            source,
            task_id: task_id.into(),
            timestamp: now_utc_micros(),
            summary: summary.into(),
            affected_artifacts,
        }
    }

    pub fn with_timestamp(mut self, timestamp: impl Into<String>) -> Self {
        self.timestamp = timestamp.into();
        self
    }

    /// Fetch a `key=value` token from the summary.
    pub fn token(&self, key: &str) -> Option<&str> {
        summary_token(&self.summary, key)
    }
}

pub fn summary_token<'a>(summary: &'a str, key: &str) -> Option<&'a str> {
    summary
        .split(' ')
        .filter_map(|t| t.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

fn sanitize_field(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

/// Bit-exact field order: type, source, task_id, timestamp, summary,
/// artifacts (comma-joined).
pub fn encode_event(event: &RuntimeEvent) -> String {
    let artifacts = event
        .affected_artifacts
        .iter()
        .map(|a| sanitize_field(a).replace(',', ";"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        event.event_type,
        event.source,
        sanitize_field(&event.task_id),
        event.timestamp,
        sanitize_field(&event.summary),
        artifacts
    )
}

pub fn decode_event(line: &str, line_no: usize) -> Result<RuntimeEvent, ProtocolError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(ProtocolError::CorruptRecord {
            line: line_no,
            detail: format!("expected 6 tab-separated fields, got {}", fields.len()),
        });
    }
    let event_type = fields[0]
        .parse::<EventType>()
        .map_err(|detail| ProtocolError::CorruptRecord {
            line: line_no,
            detail,
        })?;
    let source = fields[1]
        .parse::<RoleId>()
        .map_err(|detail| ProtocolError::CorruptRecord {
            line: line_no,
            detail,
        })?;
    let affected_artifacts = if fields[5].is_empty() {
        Vec::new()
    } else {
        fields[5].split(',').map(str::to_string).collect()
    };
    Ok(RuntimeEvent {
        event_type,
        source,
        task_id: fields[2].to_string(),
        timestamp: fields[3].to_string(),
        summary: fields[4].to_string(),
        affected_artifacts,
    })
}

/// Append-only, single-writer trace log. Every append is flushed so a crash
/// loses at most the record being written.
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_timestamp: Option<String>,
    count: usize,
}

impl EventLog {
    /// Open for appending, restoring the monotonicity watermark from any
    /// existing records.
    pub fn open(path: &Path) -> Result<Self, ProtocolError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut last_timestamp = None;
        let mut count = 0;
        if path.exists() {
            for event in read_events(path)? {
                last_timestamp = Some(event.timestamp);
                count += 1;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
            last_timestamp,
            count,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn append(&mut self, event: &RuntimeEvent) -> Result<(), ProtocolError> {
        // Fixed-width UTC format makes string order chronological order.
        if let Some(previous) = &self.last_timestamp {
            if event.timestamp < *previous {
                return Err(ProtocolError::NonMonotoneTimestamp {
                    line: self.count + 1,
                    previous: previous.clone(),
                    current: event.timestamp.clone(),
                });
            }
        }
        self.file.write_all(encode_event(event).as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        self.last_timestamp = Some(event.timestamp.clone());
        self.count += 1;
        Ok(())
    }
}

pub fn read_events(path: &Path) -> Result<Vec<RuntimeEvent>, ProtocolError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut previous: Option<String> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let event = decode_event(&line, i + 1)?;
        if let Some(prev) = &previous {
            if event.timestamp < *prev {
                return Err(ProtocolError::NonMonotoneTimestamp {
                    line: i + 1,
                    previous: prev.clone(),
                    current: event.timestamp.clone(),
                });
            }
        }
        previous = Some(event.timestamp.clone());
        events.push(event);
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// State reconstructed from a trace by a pure left fold. `violations`
/// collects protocol breaches found during the fold; a clean run replays
/// with an empty list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolState {
    pub counts: BTreeMap<EventType, u64>,
    pub open_dispatches: BTreeMap<String, u64>,
    pub open_issues: BTreeSet<String>,
    pub resolved_issues: BTreeSet<String>,
    pub open_blockers: BTreeSet<String>,
    pub last_signal: Option<SignalKind>,
    pub stop_permission: bool,
    pub compactions: u64,
    pub checkpoints: u64,
    pub sync_decisions: u64,
    pub initialized: bool,
    pub violations: Vec<String>,
}

impl ProtocolState {
    pub fn total_events(&self) -> u64 {
        self.counts.values().sum()
    }

    fn apply(mut self, event: &RuntimeEvent) -> Self {
        *self.counts.entry(event.event_type).or_insert(0) += 1;
        match event.event_type {
            EventType::RepositoryInitialization => {
                self.initialized = true;
            }
            EventType::DispatchCreation => {
                *self
                    .open_dispatches
                    .entry(event.task_id.clone())
                    .or_insert(0) += 1;
            }
            EventType::ReportbackReceipt => {
                match self.open_dispatches.get_mut(&event.task_id) {
                    Some(n) if *n > 0 => {
                        *n -= 1;
                        if *n == 0 {
                            self.open_dispatches.remove(&event.task_id);
                        }
                    }
                    _ => self.violations.push(format!(
                        "reportback for task `{}` without an open dispatch",
                        event.task_id
                    )),
                }
                let status = event.token("status");
                if status == Some("completion") {
                    let path = event.token("path").unwrap_or("");
                    let stages: Vec<&str> = path.split('>').collect();
                    if !stages.contains(&"self_review")
                        || !stages.contains(&"report_preparation")
                    {
                        self.violations.push(format!(
                            "task `{}` completed without self_review and report_preparation",
                            event.task_id
                        ));
                    }
                }
                if let Some(blockers) = event.token("blockers") {
                    if blockers != "none" {
                        for b in blockers.split('|').filter(|b| !b.is_empty()) {
                            self.open_blockers.insert(b.to_string());
                        }
                    }
                }
                if let Some(cleared) = event.token("clears") {
                    for b in cleared.split('|').filter(|b| !b.is_empty()) {
                        self.open_blockers.remove(b);
                    }
                }
            }
            EventType::RebuttalOpening => {
                if let Some(issues) = event.token("issues") {
                    for issue in issues.split('|').filter(|i| !i.is_empty()) {
                        self.open_issues.insert(issue.to_string());
                    }
                }
            }
            EventType::RebuttalReview => {
                let issue = event.token("issue").unwrap_or("");
                let known = self.open_issues.contains(issue)
                    || self.resolved_issues.contains(issue);
                if !known {
                    self.violations
                        .push(format!("verdict for unknown issue `{issue}`"));
                } else if event.token("resolved") == Some("true") {
                    self.open_issues.remove(issue);
                    self.resolved_issues.insert(issue.to_string());
                }
            }
            EventType::StopGoSignal => {
                let kind = event
                    .token("decision")
                    .and_then(|d| d.parse::<SignalKind>().ok());
                if let Some(kind) = kind {
                    if kind == SignalKind::AllowStop {
                        if !self.open_issues.is_empty() {
                            self.violations.push(format!(
                                "allow_stop with {} open issues",
                                self.open_issues.len()
                            ));
                        }
                        if !self.open_blockers.is_empty() {
                            self.violations.push(format!(
                                "allow_stop with {} open blockers",
                                self.open_blockers.len()
                            ));
                        }
                        if !self.stop_permission {
                            self.violations.push(
                                "allow_stop without completion gate permission".to_string(),
                            );
                        }
                    }
                    self.last_signal = Some(kind);
                } else {
                    self.violations
                        .push("stop_go_signal without a decision token".to_string());
                }
            }
            EventType::CompletionGateUpdate => {
                self.stop_permission = event.token("stop_permission") == Some("true");
            }
            EventType::ContextCompaction => {
                self.compactions += 1;
            }
            EventType::ArtifactSynchronization => {
                self.sync_decisions += 1;
            }
            EventType::CheckpointCreation => {
                self.checkpoints += 1;
            }
        }
        self
    }
}

/// Pure left fold; replaying the same byte log twice yields field-identical
/// states.
pub fn replay(events: &[RuntimeEvent]) -> ProtocolState {
    events
        .iter()
        .fold(ProtocolState::default(), |state, event| state.apply(event))
}

// ---------------------------------------------------------------------------
// Memory synchronization
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    PositiveCandidate,
    NegativeCandidate,
    RelationCandidate,
    DecisionCandidate,
    ContextSnapshotCandidate,
    TraceEventCandidate,
    RuntimeEventCandidate,
}

impl ProposalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProposalKind::PositiveCandidate => "positive_candidate",
            ProposalKind::NegativeCandidate => "negative_candidate",
            ProposalKind::RelationCandidate => "relation_candidate",
            ProposalKind::DecisionCandidate => "decision_candidate",
            ProposalKind::ContextSnapshotCandidate => "context_snapshot_candidate",
            ProposalKind::TraceEventCandidate => "trace_event_candidate",
            ProposalKind::RuntimeEventCandidate => "runtime_event_candidate",
        }
    }
}

impl fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A subagent's suggested memory change. Subagents never write memory; they
/// propose, and the absorption decision is made centrally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySyncProposal {
    pub kind: ProposalKind,
    pub content: String,
    pub confidence: f64,
    pub reason: String,
    pub proposer: RoleId,
}

impl MemorySyncProposal {
    pub fn check(&self) -> Result<(), ProtocolError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ProtocolError::MalformedProposal(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if self.reason.trim().is_empty() {
            return Err(ProtocolError::MalformedProposal("empty reason".into()));
        }
        if self.content.trim().is_empty() {
            return Err(ProtocolError::MalformedProposal("empty content".into()));
        }
        Ok(())
    }
}

/// Proposals below this confidence are deferred rather than absorbed.
pub const DEFER_CONFIDENCE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionDecision {
    Accept,
    Reject,
    Defer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Absorption {
    pub decision: AbsorptionDecision,
    pub reason: String,
}

/// The target artifact as the decider last read it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurrentArtifact {
    pub digest: String,
    pub existing_entries: BTreeSet<String>,
}

/// Decide a proposal without mutating anything. The caller proves it read
/// the current artifact by passing the digest it saw; mismatch means the
/// artifact moved underneath it.
pub fn absorb_memory_proposal(
    proposal: &MemorySyncProposal,
    digest_read: &str,
    artifact: &CurrentArtifact,
) -> Result<Absorption, ProtocolError> {
    proposal.check()?;
    if digest_read != artifact.digest {
        return Err(ProtocolError::StaleDigest {
            expected: artifact.digest.clone(),
            got: digest_read.to_string(),
        });
    }
    if artifact.existing_entries.contains(&proposal.content) {
        return Ok(Absorption {
            decision: AbsorptionDecision::Reject,
            reason: "already recorded".into(),
        });
    }
    if proposal.confidence < DEFER_CONFIDENCE_THRESHOLD {
        return Ok(Absorption {
            decision: AbsorptionDecision::Defer,
            reason: format!(
                "confidence {} below threshold {DEFER_CONFIDENCE_THRESHOLD}",
                proposal.confidence
            ),
        });
    }
    Ok(Absorption {
        decision: AbsorptionDecision::Accept,
        reason: format!("{} absorbed from {}", proposal.kind, proposal.proposer),
    })
}

// ---------------------------------------------------------------------------
// Compaction triggers
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum CompactionTrigger {
    AfterWorkspaceInitialization,
    AfterPlanOrStrategySwitch,
    AfterParallelReportbacksMerged,
    AfterReviewResponseLoopOpens,
    BeforeFinalReviewer,
}

impl CompactionTrigger {
    pub fn as_str(&self) -> &'static str {
        match self {
            CompactionTrigger::AfterWorkspaceInitialization => "after_workspace_initialization",
            CompactionTrigger::AfterPlanOrStrategySwitch => "after_plan_or_strategy_switch",
            CompactionTrigger::AfterParallelReportbacksMerged => {
                "after_parallel_reportbacks_merged"
            }
            CompactionTrigger::AfterReviewResponseLoopOpens => "after_review_response_loop_opens",
            CompactionTrigger::BeforeFinalReviewer => "before_final_reviewer",
        }
    }
}

impl fmt::Display for CompactionTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What just happened in the run, as compaction sees it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompactionView {
    pub workspace_just_initialized: bool,
    pub plan_switch_pending: bool,
    pub parallel_reportbacks_merged: bool,
    pub review_loop_just_opened: bool,
    pub final_review_queued: bool,
    pub snapshot_fresh_for_final_review: bool,
}

/// The subset of the five triggers currently firing.
pub fn compaction_due(view: &CompactionView) -> BTreeSet<CompactionTrigger> {
    let mut due = BTreeSet::new();
    if view.workspace_just_initialized {
        due.insert(CompactionTrigger::AfterWorkspaceInitialization);
    }
    if view.plan_switch_pending {
        due.insert(CompactionTrigger::AfterPlanOrStrategySwitch);
    }
    if view.parallel_reportbacks_merged {
        due.insert(CompactionTrigger::AfterParallelReportbacksMerged);
    }
    if view.review_loop_just_opened {
        due.insert(CompactionTrigger::AfterReviewResponseLoopOpens);
    }
    if view.final_review_queued && !view.snapshot_fresh_for_final_review {
        due.insert(CompactionTrigger::BeforeFinalReviewer);
    }
    due
}
