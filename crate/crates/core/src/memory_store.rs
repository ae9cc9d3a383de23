//! File-backed persistent memory for a run: the frozen prompt anchor,
//! progress/feature/decision ledgers, relation map, derived context
//! snapshot, completion gate record, task trace, and positive/negative
//! priors.
//!
//! Each record is one pretty-printed JSON document in the memory directory,
//! human-inspectable with any pager. Every write also appends to a journal
//! (`journal.log`) carrying the compact payload and its digest, so the
//! directory's history can be replayed and audited.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{now_utc_micros, sha256_hex};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("anchor already exists")]
    AnchorAlreadyExists,
    #[error("attempt to mutate frozen field `{0}`")]
    MutationOfFrozenField(String),
    #[error("prior rejected: scope_and_limits is empty")]
    PriorWithoutLimits,
    #[error("missing snapshot source `{0}`")]
    MissingSource(String),
    #[error("incomplete gate record: missing {0}")]
    IncompleteRecord(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("journal mismatch for `{record}`: {detail}")]
    JournalMismatch { record: String, detail: String },
    #[error("corrupt journal line {line}: {detail}")]
    CorruptJournal { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Record types
// ---------------------------------------------------------------------------

/// The immutable starting point of a run. Clarifications append; the
/// original prompt and first goal block never change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialPromptAnchor {
    pub original_prompt: String,
    pub goals: Vec<String>,
    pub metrics: Vec<String>,
    pub non_goals: Vec<String>,
    pub clarifications: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestedAction {
    pub action: String,
    pub evidence: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressLedger {
    pub current_focus: String,
    pub completed_this_round: Vec<String>,
    pub suggested_next: Vec<SuggestedAction>,
}

impl ProgressLedger {
    pub fn check(&self) -> Result<(), MemoryError> {
        for entry in &self.suggested_next {
            if entry.evidence.trim().is_empty() {
                return Err(MemoryError::InvalidRecord(format!(
                    "suggested action `{}` lacks evidence",
                    entry.action
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredFeature {
    pub feature: String,
    pub evidence_artifact: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedFeature {
    pub feature: String,
    pub preconditions: Vec<String>,
    pub blockers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLedger {
    pub delivered: Vec<DeliveredFeature>,
    pub planned: Vec<PlannedFeature>,
}

impl FeatureLedger {
    pub fn check(&self) -> Result<(), MemoryError> {
        for delivered in &self.delivered {
            if self.planned.iter().any(|p| p.feature == delivered.feature) {
                return Err(MemoryError::InvalidRecord(format!(
                    "feature `{}` is both delivered and planned",
                    delivered.feature
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionEntry {
    pub decision: String,
    pub reason: String,
    pub rollback_cost: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeferredDecision {
    pub decision: String,
    pub revisit_trigger: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLedger {
    pub decisions: Vec<DecisionEntry>,
    pub deferred: Vec<DeferredDecision>,
}

impl DecisionLedger {
    pub fn check(&self) -> Result<(), MemoryError> {
        for entry in &self.decisions {
            if entry.reason.trim().is_empty() {
                return Err(MemoryError::InvalidRecord(format!(
                    "decision `{}` lacks a reason",
                    entry.decision
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub from: String,
    pub to: String,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMap {
    pub edges: Vec<RelationEdge>,
}

/// Compacted working context derived from exactly six sources; the digest
/// map names them all so staleness is checkable per source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub current_phase: String,
    pub task_anchors: Vec<String>,
    pub active_blockers: Vec<String>,
    pub forbidden_actions: Vec<String>,
    pub decisions_in_force: Vec<usize>,
    pub verified_evidence: Vec<String>,
    pub next_dispatch_focus: String,
    pub ignorable_history: Vec<String>,
    pub derived_from_digests: BTreeMap<String, String>,
    pub refreshed_at: String,
}

/// The six snapshot source names, in digest-map order.
pub const SNAPSHOT_SOURCES: [&str; 6] = [
    "anchor",
    "blockers",
    "decisions",
    "gate",
    "plan_alignment",
    "progress",
];

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PreStopCheck {
    Brainstorm,
    DeepReasoning,
    CriticLoop,
    TemporalGovernor,
    FinalReviewer,
}

impl PreStopCheck {
    pub const ALL: [PreStopCheck; 5] = [
        PreStopCheck::Brainstorm,
        PreStopCheck::DeepReasoning,
        PreStopCheck::CriticLoop,
        PreStopCheck::TemporalGovernor,
        PreStopCheck::FinalReviewer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PreStopCheck::Brainstorm => "brainstorm",
            PreStopCheck::DeepReasoning => "deep_reasoning",
            PreStopCheck::CriticLoop => "critic_loop",
            PreStopCheck::TemporalGovernor => "temporal_governor",
            PreStopCheck::FinalReviewer => "final_reviewer",
        }
    }
}

impl fmt::Display for PreStopCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Passed,
    Pending,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freshness {
    Fresh,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionState {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleChallenge {
    pub role: String,
    pub can_continue: bool,
    pub next_action: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Housekeeping {
    pub cleanup_done: bool,
    pub removed: Vec<String>,
    pub kept_with_reason: Vec<(String, String)>,
}

/// The stop-permission ledger: five pre-stop checks plus the freshness,
/// action-count, completion-state, and housekeeping clauses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionGateRecord {
    pub pre_stop_checks: BTreeMap<PreStopCheck, CheckStatus>,
    pub initial_prompt_drift: String,
    pub snapshot_freshness: Freshness,
    pub role_challenges: Vec<RoleChallenge>,
    pub remaining_action_count: u32,
    pub completion_state: CompletionState,
    pub stop_permission: bool,
    pub reason: String,
    pub housekeeping: Housekeeping,
}

impl CompletionGateRecord {
    /// A gate that permits nothing yet: all checks pending, work remaining.
    pub fn initial(remaining_action_count: u32) -> Self {
        CompletionGateRecord {
            pre_stop_checks: PreStopCheck::ALL
                .into_iter()
                .map(|c| (c, CheckStatus::Pending))
                .collect(),
            initial_prompt_drift: String::new(),
            snapshot_freshness: Freshness::Stale,
            role_challenges: Vec::new(),
            remaining_action_count,
            completion_state: CompletionState::Incomplete,
            stop_permission: false,
            reason: "run in progress".into(),
            housekeeping: Housekeeping::default(),
        }
    }
}

/// Stop permission is the conjunction of nine clauses; the reason names the
/// first failing one, in a fixed clause order.
pub fn evaluate_completion_gate(
    record: &CompletionGateRecord,
) -> Result<(bool, String), MemoryError> {
    for check in PreStopCheck::ALL {
        let Some(status) = record.pre_stop_checks.get(&check) else {
            return Err(MemoryError::IncompleteRecord(format!(
                "pre_stop_checks.{check}"
            )));
        };
        if *status != CheckStatus::Passed {
            return Ok((false, format!("pre-stop check `{check}` not passed")));
        }
    }
    if record.snapshot_freshness != Freshness::Fresh {
        return Ok((false, "context snapshot is stale".into()));
    }
    if record.remaining_action_count != 0 {
        return Ok((
            false,
            format!(
                "{} remaining actions outstanding",
                record.remaining_action_count
            ),
        ));
    }
    if record.completion_state != CompletionState::Complete {
        return Ok((false, "completion state is incomplete".into()));
    }
    if !record.housekeeping.cleanup_done {
        return Ok((false, "workspace cleanup not done".into()));
    }
    Ok((true, "all gates passed".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A carried-over lesson. Never stored without explicit scope and limits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub polarity: Polarity,
    pub statement: String,
    pub scope_and_limits: String,
    pub evidence: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorLedger {
    pub entries: Vec<PriorEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLog {
    pub entries: Vec<(String, String)>,
}

/// Text drift summary between the anchored goals and a final goal list;
/// stored in the gate record's `initial_prompt_drift`.
pub fn describe_drift(anchor: &InitialPromptAnchor, final_goals: &[String]) -> String {
    let dropped: Vec<&str> = anchor
        .goals
        .iter()
        .filter(|g| !final_goals.contains(g))
        .map(String::as_str)
        .collect();
    let added: Vec<&str> = final_goals
        .iter()
        .filter(|g| !anchor.goals.contains(g))
        .map(String::as_str)
        .collect();
    if dropped.is_empty() && added.is_empty() {
        return "no drift from anchored goals".into();
    }
    let mut parts = Vec::new();
    if !dropped.is_empty() {
        parts.push(format!("dropped: {}", dropped.join("; ")));
    }
    if !added.is_empty() {
        parts.push(format!("added: {}", added.join("; ")));
    }
    parts.join(" | ")
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RecordName {
    Anchor,
    Progress,
    Features,
    Decisions,
    Relations,
    Snapshot,
    Gate,
    Trace,
    Priors,
}

impl RecordName {
    pub fn file_name(&self) -> &'static str {
        match self {
            RecordName::Anchor => "anchor.txt",
            RecordName::Progress => "progress.txt",
            RecordName::Features => "features.txt",
            RecordName::Decisions => "decisions.txt",
            RecordName::Relations => "relations.txt",
            RecordName::Snapshot => "snapshot.txt",
            RecordName::Gate => "gate.txt",
            RecordName::Trace => "trace.txt",
            RecordName::Priors => "priors.txt",
        }
    }

    fn key(&self) -> &'static str {
        // journal key = file name minus extension
        match self {
            RecordName::Anchor => "anchor",
            RecordName::Progress => "progress",
            RecordName::Features => "features",
            RecordName::Decisions => "decisions",
            RecordName::Relations => "relations",
            RecordName::Snapshot => "snapshot",
            RecordName::Gate => "gate",
            RecordName::Trace => "trace",
            RecordName::Priors => "priors",
        }
    }
}

/// Digest of a record as journaled: hash of the compact JSON encoding.
fn digest_value(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

/// One memory directory. Single writer; every mutation lands in the record
/// file and the journal atomically enough for a crash to lose at most the
/// write in flight.
pub struct MemoryStore {
    dir: PathBuf,
    seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry {
    pub seq: u64,
    pub record: String,
    pub digest: String,
    pub payload: serde_json::Value,
}

impl MemoryStore {
    pub fn open(dir: &Path) -> Result<Self, MemoryError> {
        std::fs::create_dir_all(dir)?;
        let journal = dir.join("journal.log");
        let seq = if journal.exists() {
            read_journal(&journal)?
                .last()
                .map(|e| e.seq + 1)
                .unwrap_or(0)
        } else {
            0
        };
        Ok(MemoryStore {
            dir: dir.to_path_buf(),
            seq,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn journal_path(&self) -> PathBuf {
        self.dir.join("journal.log")
    }

    fn record_path(&self, name: RecordName) -> PathBuf {
        self.dir.join(name.file_name())
    }

    fn write_record<T: Serialize>(
        &mut self,
        name: RecordName,
        value: &T,
    ) -> Result<String, MemoryError> {
        let json_value = serde_json::to_value(value)?;
        let digest = digest_value(&json_value);
        let line = format!(
            "{}\t{}\t{}\t{}\n",
            self.seq,
            name.key(),
            digest,
            json_value
        );
        let mut journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.journal_path())?;
        journal.write_all(line.as_bytes())?;
        journal.flush()?;
        self.seq += 1;
        std::fs::write(
            self.record_path(name),
            serde_json::to_vec_pretty(&json_value)?,
        )?;
        Ok(digest)
    }

    fn read_record<T: DeserializeOwned>(&self, name: RecordName) -> Result<Option<T>, MemoryError> {
        let path = self.record_path(name);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    /// Digest of the record as currently stored, or None when absent.
    pub fn record_digest(&self, name: RecordName) -> Result<Option<String>, MemoryError> {
        let path = self.record_path(name);
        if !path.exists() {
            return Ok(None);
        }
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Some(digest_value(&value)))
    }

    // -- anchor ------------------------------------------------------------

    pub fn record_anchor(&mut self, anchor: &InitialPromptAnchor) -> Result<(), MemoryError> {
        if self.record_path(RecordName::Anchor).exists() {
            return Err(MemoryError::AnchorAlreadyExists);
        }
        self.write_record(RecordName::Anchor, anchor)?;
        Ok(())
    }

    pub fn anchor(&self) -> Result<Option<InitialPromptAnchor>, MemoryError> {
        self.read_record(RecordName::Anchor)
    }

    pub fn append_clarification(
        &mut self,
        text: &str,
    ) -> Result<InitialPromptAnchor, MemoryError> {
        let mut anchor = self
            .anchor()?
            .ok_or_else(|| MemoryError::MissingSource("anchor".into()))?;
        anchor
            .clarifications
            .push((now_utc_micros(), text.to_string()));
        self.write_record(RecordName::Anchor, &anchor)?;
        Ok(anchor)
    }

    /// Re-store the anchor. The original prompt and the first goal block are
    /// frozen; changing either is refused.
    pub fn replace_anchor(&mut self, candidate: &InitialPromptAnchor) -> Result<(), MemoryError> {
        let current = self
            .anchor()?
            .ok_or_else(|| MemoryError::MissingSource("anchor".into()))?;
        if candidate.original_prompt != current.original_prompt {
            return Err(MemoryError::MutationOfFrozenField("original_prompt".into()));
        }
        if candidate.goals != current.goals {
            return Err(MemoryError::MutationOfFrozenField("goals".into()));
        }
        self.write_record(RecordName::Anchor, candidate)?;
        Ok(())
    }

    // -- ledgers -----------------------------------------------------------

    pub fn set_progress(&mut self, ledger: &ProgressLedger) -> Result<(), MemoryError> {
        ledger.check()?;
        self.write_record(RecordName::Progress, ledger)?;
        Ok(())
    }

    pub fn progress(&self) -> Result<Option<ProgressLedger>, MemoryError> {
        self.read_record(RecordName::Progress)
    }

    pub fn set_features(&mut self, ledger: &FeatureLedger) -> Result<(), MemoryError> {
        ledger.check()?;
        self.write_record(RecordName::Features, ledger)?;
        Ok(())
    }

    pub fn features(&self) -> Result<Option<FeatureLedger>, MemoryError> {
        self.read_record(RecordName::Features)
    }

    pub fn set_decisions(&mut self, ledger: &DecisionLedger) -> Result<(), MemoryError> {
        ledger.check()?;
        self.write_record(RecordName::Decisions, ledger)?;
        Ok(())
    }

    pub fn decisions(&self) -> Result<Option<DecisionLedger>, MemoryError> {
        self.read_record(RecordName::Decisions)
    }

    pub fn set_relations(&mut self, map: &RelationMap) -> Result<(), MemoryError> {
        self.write_record(RecordName::Relations, map)?;
        Ok(())
    }

    pub fn relations(&self) -> Result<Option<RelationMap>, MemoryError> {
        self.read_record(RecordName::Relations)
    }

    pub fn add_prior(&mut self, entry: PriorEntry) -> Result<(), MemoryError> {
        if entry.scope_and_limits.trim().is_empty() {
            return Err(MemoryError::PriorWithoutLimits);
        }
        let mut ledger: PriorLedger = self.read_record(RecordName::Priors)?.unwrap_or_default();
        ledger.entries.push(entry);
        self.write_record(RecordName::Priors, &ledger)?;
        Ok(())
    }

    pub fn priors(&self) -> Result<Option<PriorLedger>, MemoryError> {
        self.read_record(RecordName::Priors)
    }

    pub fn append_trace(&mut self, note: &str) -> Result<(), MemoryError> {
        let mut trace: TraceLog = self.read_record(RecordName::Trace)?.unwrap_or_default();
        trace.entries.push((now_utc_micros(), note.to_string()));
        self.write_record(RecordName::Trace, &trace)?;
        Ok(())
    }

    pub fn trace(&self) -> Result<Option<TraceLog>, MemoryError> {
        self.read_record(RecordName::Trace)
    }

    pub fn set_gate(&mut self, record: &CompletionGateRecord) -> Result<(), MemoryError> {
        self.write_record(RecordName::Gate, record)?;
        Ok(())
    }

    pub fn gate(&self) -> Result<Option<CompletionGateRecord>, MemoryError> {
        self.read_record(RecordName::Gate)
    }

    // -- snapshot ----------------------------------------------------------

    fn blockers_digest(blockers: &[String]) -> String {
        sha256_hex(blockers.join("\n").as_bytes())
    }

    /// Derive the compacted snapshot from the six sources: anchor, progress
    /// ledger, decision ledger, plan-alignment table, completion gate, and
    /// the active blocker set. Blockers are copied verbatim.
    pub fn derive_snapshot(
        &mut self,
        phase: &str,
        next_dispatch_focus: &str,
        plan_alignment: &[u8],
        blockers: &[String],
        forbidden_actions: &[String],
        ignorable_history: &[String],
    ) -> Result<ContextSnapshot, MemoryError> {
        let anchor = self
            .anchor()?
            .ok_or_else(|| MemoryError::MissingSource("anchor".into()))?;
        let mut digests = BTreeMap::new();
        for (name, record) in [
            ("anchor", RecordName::Anchor),
            ("progress", RecordName::Progress),
            ("decisions", RecordName::Decisions),
            ("gate", RecordName::Gate),
        ] {
            let digest = self
                .record_digest(record)?
                .ok_or_else(|| MemoryError::MissingSource(name.into()))?;
            digests.insert(name.to_string(), digest);
        }
        digests.insert(
            "plan_alignment".to_string(),
            sha256_hex(plan_alignment),
        );
        digests.insert(
            "blockers".to_string(),
            Self::blockers_digest(blockers),
        );
        debug_assert!(digests.keys().map(String::as_str).eq(SNAPSHOT_SOURCES));

        let decisions = self.decisions()?.unwrap_or_default();
        let verified_evidence = self
            .features()?
            .unwrap_or_default()
            .delivered
            .iter()
            .map(|d| d.evidence_artifact.clone())
            .collect();
        let snapshot = ContextSnapshot {
            current_phase: phase.to_string(),
            task_anchors: anchor.goals.clone(),
            active_blockers: blockers.to_vec(),
            forbidden_actions: forbidden_actions.to_vec(),
            decisions_in_force: (0..decisions.decisions.len()).collect(),
            verified_evidence,
            next_dispatch_focus: next_dispatch_focus.to_string(),
            ignorable_history: ignorable_history.to_vec(),
            derived_from_digests: digests,
            refreshed_at: now_utc_micros(),
        };
        self.write_record(RecordName::Snapshot, &snapshot)?;
        Ok(snapshot)
    }

    pub fn snapshot(&self) -> Result<Option<ContextSnapshot>, MemoryError> {
        self.read_record(RecordName::Snapshot)
    }

    /// Fresh iff every source digest still matches what the snapshot was
    /// derived from. A stale snapshot must yield to its sources.
    pub fn snapshot_is_fresh(
        &self,
        snapshot: &ContextSnapshot,
        plan_alignment: &[u8],
        blockers: &[String],
    ) -> Result<bool, MemoryError> {
        for (name, record) in [
            ("anchor", RecordName::Anchor),
            ("progress", RecordName::Progress),
            ("decisions", RecordName::Decisions),
            ("gate", RecordName::Gate),
        ] {
            let current = self.record_digest(record)?;
            if current.as_deref() != snapshot.derived_from_digests.get(name).map(String::as_str) {
                return Ok(false);
            }
        }
        if snapshot.derived_from_digests.get("plan_alignment").map(String::as_str)
            != Some(sha256_hex(plan_alignment).as_str())
        {
            return Ok(false);
        }
        if snapshot.derived_from_digests.get("blockers").map(String::as_str)
            != Some(Self::blockers_digest(blockers).as_str())
        {
            return Ok(false);
        }
        Ok(true)
    }

    // -- journal -----------------------------------------------------------

    pub fn journal(&self) -> Result<Vec<JournalEntry>, MemoryError> {
        let path = self.journal_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_journal(&path)
    }

    /// Replay the journal and confirm the last journaled payload of every
    /// record matches what the record file holds now.
    pub fn verify_journal(&self) -> Result<(), MemoryError> {
        let mut last: BTreeMap<String, JournalEntry> = BTreeMap::new();
        for entry in self.journal()? {
            if digest_value(&entry.payload) != entry.digest {
                return Err(MemoryError::JournalMismatch {
                    record: entry.record.clone(),
                    detail: format!("digest mismatch at seq {}", entry.seq),
                });
            }
            last.insert(entry.record.clone(), entry);
        }
        for (record, entry) in last {
            let path = self.dir.join(format!("{record}.txt"));
            if !path.exists() {
                return Err(MemoryError::JournalMismatch {
                    record,
                    detail: "journaled record file is missing".into(),
                });
            }
            let current: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
            if current != entry.payload {
                return Err(MemoryError::JournalMismatch {
                    record,
                    detail: "file content diverges from the journaled payload".into(),
                });
            }
        }
        Ok(())
    }
}

fn read_journal(path: &Path) -> Result<Vec<JournalEntry>, MemoryError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(4, '\t');
        let (Some(seq), Some(record), Some(digest), Some(payload)) = (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) else {
            return Err(MemoryError::CorruptJournal {
                line: i + 1,
                detail: "expected 4 tab-separated fields".into(),
            });
        };
        let seq: u64 = seq.parse().map_err(|_| MemoryError::CorruptJournal {
            line: i + 1,
            detail: format!("bad sequence number `{seq}`"),
        })?;
        let payload: serde_json::Value =
            serde_json::from_str(payload).map_err(|e| MemoryError::CorruptJournal {
                line: i + 1,
                detail: format!("bad payload: {e}"),
            })?;
        entries.push(JournalEntry {
            seq,
            record: record.to_string(),
            digest: digest.to_string(),
            payload,
        });
    }
    Ok(entries)
}
