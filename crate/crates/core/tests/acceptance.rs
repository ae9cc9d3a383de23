//! Release acceptance suite. One test per criterion; each prints an explicit
//! PASS/FAIL line with its measured runtime and enforces the runtime budget.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tsgate_core::data_interface::{
    build_reconstruction, check_boundary, derive_task_file, grid_rows, ingest_table,
    load_workspace, parse_skeleton, write_reconstruction,
    synthetic::{default_slice, family_name, store_sales_fixture, SyntheticSpec},
    FamilySelector, LoadedWorkspace, SchemaMap, SliceSpec, TaskFileOptions, TEST_FILE, TRAIN_FILE,
};
use tsgate_core::memory_store::{
    evaluate_completion_gate, CheckStatus, CompletionGateRecord, CompletionState, Freshness,
    Housekeeping, PreStopCheck,
};
use tsgate_core::orchestration::{
    median_baseline_forecast, render_submission, run_governed_loop, weekday_lag_forecast,
    ConstructorMode, ForecastGrid, OrchestrationError, RoleSet, RolePolicy, RoleTurn, RunConfig,
    RunContext, ScriptedConstructor,
};
use tsgate_core::protocol_engine::{
    read_events, replay, resolve_authority, CompletionSignal, DispatchPacket, EventType,
    ProtocolState, RoleId, RuntimeEvent, SignalKind,
};
use tsgate_core::task_model::ManifestEntry;
use tsgate_core::task_server::{
    serve, LeaderboardRow, ServerConfig, SubmissionRecord, TaskServer, SUBMITTER_HEADER,
};
use tsgate_core::validation_gate::{score_rmsle, Evaluator, ScoredPair, SubmissionContext};

// ---------------------------------------------------------------------------
// Reporting harness
// ---------------------------------------------------------------------------

fn criterion(name: &str, budget: Option<Duration>, body: impl FnOnce()) {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let elapsed = started.elapsed();
    let within = budget.is_none_or(|cap| elapsed <= cap);
    let verdict = if result.is_ok() && within { "PASS" } else { "FAIL" };
    let cap_note = budget
        .map(|cap| format!(", budget {:.0?}", cap))
        .unwrap_or_default();
    println!(
        "acceptance: {verdict} {name} ({:.3}s{cap_note})",
        elapsed.as_secs_f64()
    );
    if let Err(cause) = result {
        resume_unwind(cause);
    }
    if let Some(cap) = budget {
        assert!(within, "{name}: {elapsed:?} exceeded the {cap:?} budget");
    }
}

fn d(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn synthetic_workspace(
    dir: &Path,
    stores: u32,
    families: u32,
    max_submissions: Option<u32>,
) -> PathBuf {
    let spec = SyntheticSpec {
        seed: 77,
        stores,
        families,
        history_start: d("2017-01-01"),
        hidden_end: d("2017-08-15"),
    };
    let raw = store_sales_fixture(&spec);
    let slice = default_slice(&spec);
    let schema = SchemaMap::default();
    let recon = build_reconstruction(&raw, &slice, &schema).unwrap();
    let opts = TaskFileOptions {
        max_submissions,
        ..TaskFileOptions::default()
    };
    let task = derive_task_file(
        spec.history_start,
        &slice,
        u64::from(stores * families),
        &schema.timezone,
        &opts,
    )
    .unwrap();
    let out = dir.join("workspace");
    write_reconstruction(&recon, &task, &schema, &out).unwrap();
    out
}

fn serve_workspace(out: &Path, log_name: &str) -> (TaskServer, LoadedWorkspace) {
    let ws = load_workspace(out, &SchemaMap::default()).unwrap();
    let config = ServerConfig::from_workspace(&ws, out.join(log_name)).unwrap();
    (serve(config, 0).unwrap(), ws)
}

fn http_get(url: &str) -> (u16, String) {
    let mut response = ureq::get(url)
        .config()
        .http_status_as_error(false)
        .build()
        .call()
        .unwrap();
    (
        response.status().as_u16(),
        response.body_mut().read_to_string().unwrap(),
    )
}

fn http_post(url: &str, submitter: &str, body: &[u8]) -> (u16, String) {
    let mut response = ureq::post(url)
        .config()
        .http_status_as_error(false)
        .build()
        .header(SUBMITTER_HEADER, submitter)
        .send(body)
        .unwrap();
    (
        response.status().as_u16(),
        response.body_mut().read_to_string().unwrap(),
    )
}

// ---------------------------------------------------------------------------
// 1. Scoring correctness
// ---------------------------------------------------------------------------

fn oracle_rmsle(pairs: &[(f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for (prediction, truth) in pairs {
        let diff = (prediction + 1.0).ln() - (truth + 1.0).ln();
        acc += diff * diff;
    }
    (acc / pairs.len() as f64).sqrt()
}

fn lib_rmsle(pairs: &[(f64, f64)]) -> f64 {
    let scored: Vec<ScoredPair> = pairs
        .iter()
        .map(|(p, t)| ScoredPair {
            prediction: *p,
            truth: *t,
        })
        .collect();
    score_rmsle(&scored).unwrap()
}

#[test]
fn c1_rmsle_matches_brute_force_and_analytic_values() {
    criterion(
        "RMSLE vs independent reimplementation",
        Some(Duration::from_secs(1)),
        || {
            let mut rng = StdRng::seed_from_u64(417);
            for _ in 0..1000 {
                let n = rng.random_range(1..=64);
                let pairs: Vec<(f64, f64)> = (0..n)
                    .map(|_| {
                        (
                            rng.random_range(0.0..=1.0e4),
                            rng.random_range(0.0..=1.0e4),
                        )
                    })
                    .collect();
                let got = lib_rmsle(&pairs);
                let want = oracle_rmsle(&pairs);
                assert!(
                    (got - want).abs() <= 1e-12,
                    "random vector mismatch: {got} vs {want}"
                );
            }

            // analytic cases: exact agreement, error 0 / 1 / ln 4
            let exact: Vec<(f64, f64)> = (0..16).map(|i| (f64::from(i), f64::from(i))).collect();
            assert_eq!(lib_rmsle(&exact), 0.0);

            let unit = lib_rmsle(&[(std::f64::consts::E - 1.0, 0.0)]);
            assert!((unit - 1.0).abs() <= 1e-12, "unit case: {unit}");

            let two_fold = lib_rmsle(&[(3.0, 0.0)]);
            let ln4 = 4.0f64.ln();
            assert!((two_fold - ln4).abs() <= 1e-12, "ln4 case: {two_fold} vs {ln4}");
        },
    );
}

// ---------------------------------------------------------------------------
// 2. Reconstruction shape and conservation
// ---------------------------------------------------------------------------

#[test]
fn c2_reconstruction_yields_the_full_hidden_grid() {
    criterion(
        "reconstruction shape (5 stores x 33 families x 16 days)",
        Some(Duration::from_secs(5)),
        || {
            // the raw fixture is wider than the slice on purpose, so the
            // conservation count below actually filters something
            let spec = SyntheticSpec {
                seed: 31,
                stores: 6,
                families: 34,
                history_start: d("2017-01-01"),
                hidden_end: d("2017-08-15"),
            };
            let raw = store_sales_fixture(&spec);
            let families: BTreeSet<String> = (0..33).map(family_name).collect();
            let slice = SliceSpec {
                store_ids: (1..=5).collect(),
                families: FamilySelector::Named(families.clone()),
                public_train_end: d("2017-07-30"),
                hidden_start: d("2017-07-31"),
                hidden_end: d("2017-08-15"),
                auxiliary_truncation: BTreeMap::new(),
                auxiliary_full_span: BTreeSet::new(),
            };
            let schema = SchemaMap::default();
            let recon = build_reconstruction(&raw, &slice, &schema).unwrap();

            assert_eq!(recon.hidden_truth.entities().len(), 165);
            assert_eq!(recon.hidden_truth.rows.len(), 2640, "hidden rows");
            let skeleton = parse_skeleton(&recon.public_files[TEST_FILE], &schema).unwrap();
            assert_eq!(skeleton.len(), 2640, "test skeleton rows");
            for (i, row) in skeleton.iter().enumerate() {
                assert_eq!(row.id, i as u64, "skeleton ids are sequential");
            }

            // conservation: the slice partitions the restricted raw table
            let all = ingest_table(&raw[TRAIN_FILE], &schema).unwrap();
            let restricted = all
                .rows
                .iter()
                .filter(|r| {
                    slice.store_ids.contains(&r.entity.store_id)
                        && families.contains(&r.entity.family)
                        && r.date <= slice.hidden_end
                })
                .count();
            assert_eq!(
                recon.public_train.rows.len() + recon.hidden_truth.rows.len(),
                restricted,
                "no row lost or invented by the split"
            );
        },
    );
}

// ---------------------------------------------------------------------------
// 3. Leakage episode
// ---------------------------------------------------------------------------

#[test]
fn c3_lag_boundary_splits_the_window_and_gates_the_naive_draft() {
    criterion(
        "lag-7 boundary: 7 valid / 9 invalid, fallback rescues the draft",
        Some(Duration::from_secs(1)),
        || {
            let schema = SchemaMap::default();
            let big_slice = SliceSpec {
                store_ids: (1..=5).collect(),
                families: FamilySelector::All,
                public_train_end: d("2017-07-30"),
                hidden_start: d("2017-07-31"),
                hidden_end: d("2017-08-15"),
                auxiliary_truncation: BTreeMap::new(),
                auxiliary_full_span: BTreeSet::new(),
            };
            let task = derive_task_file(
                d("2017-01-01"),
                &big_slice,
                165,
                &schema.timezone,
                &TaskFileOptions::default(),
            )
            .unwrap();

            let report = check_boundary("target_lag_7", 7, &task.scope);
            let valid: Vec<NaiveDate> = report.valid_dates.iter().copied().collect();
            let invalid: Vec<NaiveDate> = report.invalid_dates.iter().copied().collect();
            assert_eq!(valid.len(), 7, "valid hidden dates");
            assert_eq!(invalid.len(), 9, "invalid hidden dates");
            assert_eq!(valid.first(), Some(&d("2017-07-31")));
            assert_eq!(valid.last(), Some(&d("2017-08-06")));
            assert_eq!(invalid.first(), Some(&d("2017-08-07")));
            assert_eq!(invalid.last(), Some(&d("2017-08-15")));

            // a small workspace with the same window exercises the draft path
            let dir = tempfile::tempdir().unwrap();
            let out = synthetic_workspace(dir.path(), 2, 3, None);
            let ws = load_workspace(&out, &schema).unwrap();
            let skeleton = parse_skeleton(&ws.public_files[TEST_FILE], &schema).unwrap();

            // without a fallback the lagged feature covers only the valid
            // dates, so the draft cannot produce a complete submission
            let index = ws.public_train.index();
            let mut lag_only = ForecastGrid::new();
            for row in &skeleton {
                if report.valid_dates.contains(&row.date) {
                    let source = row.date - Days::new(7);
                    if let Some(y) = index.get(&(row.entity.clone(), source)) {
                        lag_only.insert((row.entity.clone(), row.date), *y);
                    }
                }
            }
            let blocked = render_submission(&skeleton, &lag_only, &ws.task);
            assert!(
                matches!(blocked, Err(OrchestrationError::IncompleteForecast(_))),
                "lag-only draft must be blocked, got {blocked:?}"
            );

            // with the median fallback the same draft passes every check
            let (grid, attached) =
                weekday_lag_forecast(&ws.public_train, &ws.task.scope, median_baseline_forecast)
                    .unwrap();
            assert_eq!(attached, report, "attached report matches the boundary");
            let payload = render_submission(&skeleton, &grid, &ws.task).unwrap();
            let ctx = SubmissionContext::from_parts(&skeleton, &ws.public_train);
            let validity =
                tsgate_core::validation_gate::validate_submission(&payload, &ws.task, Some(&ctx))
                    .unwrap();
            assert!(validity.all_passed(), "{}", validity.render());
            assert_eq!(validity.checks.len(), 10, "all ten checks evaluated");
        },
    );
}

// ---------------------------------------------------------------------------
// 4. End-to-end governed run
// ---------------------------------------------------------------------------

/// Test-only constructor wrapper: after every scripted turn it overwrites
/// draft cells with the hidden truth, simulating a perfect forecaster while
/// leaving the governance flow untouched.
struct OracleConstructor {
    inner: ScriptedConstructor,
    truth: ForecastGrid,
}

impl RolePolicy for OracleConstructor {
    fn role(&self) -> RoleId {
        RoleId::Constructor
    }

    fn act(
        &mut self,
        packet: &DispatchPacket,
        run: &mut RunContext,
    ) -> Result<RoleTurn, OrchestrationError> {
        let turn = self.inner.act(packet, run)?;
        for draft in run.drafts.values_mut() {
            for (key, value) in draft.grid.iter_mut() {
                if let Some(truth) = self.truth.get(key) {
                    *value = *truth;
                }
            }
        }
        Ok(turn)
    }
}

#[test]
fn c4_governed_run_terminates_resolved_and_oracle_scores_zero() {
    criterion(
        "end-to-end governed run",
        Some(Duration::from_secs(60)),
        || {
            let dir = tempfile::tempdir().unwrap();
            let out = synthetic_workspace(dir.path(), 2, 3, None);
            let (server, _ws) = serve_workspace(&out, "submissions.jsonl");

            let mut roles = RoleSet::standard();
            let config = RunConfig::new(dir.path().join("run"));
            let outcome =
                run_governed_loop(&_ws.task, &server.base_url(), &mut roles, &config).unwrap();

            assert!(outcome.final_submission.admissible, "final submission");
            assert_eq!(outcome.state.last_signal, Some(SignalKind::AllowStop));
            assert!(outcome.state.stop_permission, "resolved allow_stop");
            assert!(
                outcome.state.violations.is_empty(),
                "clean trace: {:?}",
                outcome.state.violations
            );
            assert!(
                outcome.trace.review_blocks >= 1,
                "the scripted reviewer's issues must block at least once"
            );

            // the log alone reconstructs the exact final state
            let events = read_events(&outcome.event_log_path).unwrap();
            assert_eq!(replay(&events), outcome.state, "replay determinism");

            let report = std::fs::read_to_string(&outcome.report_path).unwrap();
            assert!(!report.is_empty(), "report rendered");

            // rerun with a truth-equal forecaster: the score must be exactly 0
            let (server2, ws2) = serve_workspace(&out, "submissions_oracle.jsonl");
            let mut oracle_roles = RoleSet::standard();
            oracle_roles.insert(Box::new(OracleConstructor {
                inner: ScriptedConstructor::new(ConstructorMode::Standard),
                truth: ws2.hidden_truth.index(),
            }));
            let oracle_config = RunConfig::new(dir.path().join("run_oracle"));
            let oracle_outcome = run_governed_loop(
                &ws2.task,
                &server2.base_url(),
                &mut oracle_roles,
                &oracle_config,
            )
            .unwrap();
            assert!(oracle_outcome.final_submission.admissible);
            let score = oracle_outcome
                .final_submission
                .scores
                .as_ref()
                .unwrap()
                .primary_value();
            assert_eq!(score, 0.0, "truth-equal forecaster scores exactly zero");
            drop(server);
            drop(server2);
        },
    );
}

// ---------------------------------------------------------------------------
// 5. Protocol properties
// ---------------------------------------------------------------------------

const ALL_ROLES: [RoleId; 7] = [
    RoleId::Orchestrator,
    RoleId::Interpreter,
    RoleId::EvidenceCollector,
    RoleId::Constructor,
    RoleId::TemporalGovernor,
    RoleId::FinalReviewer,
    RoleId::OtherSubagent,
];

const ALL_KINDS: [SignalKind; 3] = [
    SignalKind::Continue,
    SignalKind::RebuttalRequired,
    SignalKind::AllowStop,
];

fn signal(role: RoleId, kind: SignalKind, tag: usize) -> CompletionSignal {
    CompletionSignal {
        kind,
        reasons: format!("signal {tag}"),
        scope: "acceptance".into(),
        next_action: None,
        completion_checks: BTreeMap::new(),
        remaining_action_count: 0,
        complete_state: kind == SignalKind::AllowStop,
        issued_by: role,
    }
}

/// Exhaustive rule evaluation: scan for the first signal that minimizes
/// (authority rank, strictness).
fn oracle_resolve(signals: &[CompletionSignal]) -> usize {
    fn strictness(kind: SignalKind) -> u8 {
        match kind {
            SignalKind::RebuttalRequired => 0,
            SignalKind::Continue => 1,
            SignalKind::AllowStop => 2,
        }
    }
    let mut best = 0;
    for (i, s) in signals.iter().enumerate().skip(1) {
        let incumbent = (
            signals[best].issued_by.authority_rank(),
            strictness(signals[best].kind),
        );
        let challenger = (s.issued_by.authority_rank(), strictness(s.kind));
        if challenger < incumbent {
            best = i;
        }
    }
    best
}

fn hand_event(
    event_type: EventType,
    source: RoleId,
    task_id: &str,
    summary: &str,
    seq: usize,
) -> RuntimeEvent {
    RuntimeEvent {
        event_type,
        source,
        task_id: task_id.to_string(),
        timestamp: format!("2026-01-01T00:00:00.{seq:06}Z"),
        summary: summary.to_string(),
        affected_artifacts: Vec::new(),
    }
}

#[test]
fn c5_authority_and_trace_rules_hold_under_randomized_probing() {
    criterion(
        "protocol properties (authority + trace discipline)",
        Some(Duration::from_secs(10)),
        || {
            // every rank x kind combination, alone and in pairs
            for role in ALL_ROLES {
                for kind in ALL_KINDS {
                    let single = [signal(role, kind, 0)];
                    assert_eq!(resolve_authority(&single), &single[0]);
                    for other_role in ALL_ROLES {
                        for other_kind in ALL_KINDS {
                            let pair =
                                [signal(role, kind, 0), signal(other_role, other_kind, 1)];
                            assert_eq!(
                                resolve_authority(&pair),
                                &pair[oracle_resolve(&pair)],
                                "pair ({role}, {kind}) vs ({other_role}, {other_kind})"
                            );
                        }
                    }
                }
            }

            // ten thousand randomized multi-signal sets
            let mut rng = StdRng::seed_from_u64(90210);
            for _ in 0..10_000 {
                let n = rng.random_range(1..=8);
                let signals: Vec<CompletionSignal> = (0..n)
                    .map(|i| {
                        signal(
                            ALL_ROLES[rng.random_range(0..ALL_ROLES.len())],
                            ALL_KINDS[rng.random_range(0..ALL_KINDS.len())],
                            i,
                        )
                    })
                    .collect();
                assert_eq!(
                    resolve_authority(&signals),
                    &signals[oracle_resolve(&signals)]
                );
            }

            // a real governed trace obeys both lifecycle rules
            let dir = tempfile::tempdir().unwrap();
            let out = synthetic_workspace(dir.path(), 2, 2, None);
            let (server, ws) = serve_workspace(&out, "submissions.jsonl");
            let config = RunConfig::new(dir.path().join("run"));
            let outcome =
                run_governed_loop(&ws.task, &server.base_url(), &mut RoleSet::standard(), &config)
                    .unwrap();
            let events = read_events(&outcome.event_log_path).unwrap();
            assert!(replay(&events).violations.is_empty());

            let mut saw_completion = false;
            for event in &events {
                if event.event_type == EventType::ReportbackReceipt
                    && event.token("status") == Some("completion")
                {
                    saw_completion = true;
                    let path = event.token("path").unwrap_or("");
                    let stages: Vec<&str> = path.split('>').collect();
                    let review = stages.iter().position(|s| *s == "self_review");
                    let done = stages.iter().position(|s| *s == "completion");
                    assert!(
                        review.is_some() && done.is_some() && review < done,
                        "completion without prior self_review in `{path}`"
                    );
                }
            }
            assert!(saw_completion, "trace contains completed dispatches");

            // allow_stop never coexists with an open rebuttal issue: check
            // the state immediately before every allow_stop signal
            for (i, event) in events.iter().enumerate() {
                if event.event_type == EventType::StopGoSignal
                    && event.token("decision") == Some("allow_stop")
                {
                    let before: ProtocolState = replay(&events[..i]);
                    assert!(
                        before.open_issues.is_empty(),
                        "allow_stop issued while {:?} open",
                        before.open_issues
                    );
                }
            }
            drop(server);

            // negative controls: the replayer really rejects bad traces
            let no_review = vec![
                hand_event(
                    EventType::DispatchCreation,
                    RoleId::Orchestrator,
                    "d01-constructor",
                    "role=constructor",
                    0,
                ),
                hand_event(
                    EventType::ReportbackReceipt,
                    RoleId::Constructor,
                    "d01-constructor",
                    "status=completion path=assignment>execution blockers=none",
                    1,
                ),
            ];
            assert!(
                !replay(&no_review).violations.is_empty(),
                "completion without self_review must be flagged"
            );

            let stop_over_open_issue = vec![
                hand_event(
                    EventType::RebuttalOpening,
                    RoleId::TemporalGovernor,
                    "d02-governor",
                    "issues=I1",
                    0,
                ),
                hand_event(
                    EventType::CompletionGateUpdate,
                    RoleId::Orchestrator,
                    "gate",
                    "stop_permission=true",
                    1,
                ),
                hand_event(
                    EventType::StopGoSignal,
                    RoleId::FinalReviewer,
                    "stop",
                    "decision=allow_stop",
                    2,
                ),
            ];
            assert!(
                !replay(&stop_over_open_issue).violations.is_empty(),
                "allow_stop over an open issue must be flagged"
            );
        },
    );
}

// ---------------------------------------------------------------------------
// 6. Completion gate conjunction
// ---------------------------------------------------------------------------

fn passing_gate() -> CompletionGateRecord {
    let mut record = CompletionGateRecord::initial(0);
    for status in record.pre_stop_checks.values_mut() {
        *status = CheckStatus::Passed;
    }
    record.snapshot_freshness = Freshness::Fresh;
    record.remaining_action_count = 0;
    record.completion_state = CompletionState::Complete;
    record.housekeeping = Housekeeping {
        cleanup_done: true,
        removed: vec!["scratch_grid.tsv".into()],
        kept_with_reason: Vec::new(),
    };
    record
}

#[test]
fn c6_completion_gate_is_conjunctive_over_every_clause() {
    criterion(
        "completion gate clause flips",
        Some(Duration::from_secs(1)),
        || {
            let base = passing_gate();
            let (passed, reason) = evaluate_completion_gate(&base).unwrap();
            assert!(passed);
            assert_eq!(reason, "all gates passed");

            let mut flips: Vec<(String, CompletionGateRecord)> = Vec::new();
            for check in PreStopCheck::ALL {
                for status in [CheckStatus::Pending, CheckStatus::Failed] {
                    let mut record = passing_gate();
                    record.pre_stop_checks.insert(check, status);
                    flips.push((format!("{check} -> {status:?}"), record));
                }
            }
            let mut stale = passing_gate();
            stale.snapshot_freshness = Freshness::Stale;
            flips.push(("snapshot stale".into(), stale));

            let mut outstanding = passing_gate();
            outstanding.remaining_action_count = 1;
            flips.push(("one remaining action".into(), outstanding));

            let mut incomplete = passing_gate();
            incomplete.completion_state = CompletionState::Incomplete;
            flips.push(("completion state incomplete".into(), incomplete));

            let mut messy = passing_gate();
            messy.housekeeping.cleanup_done = false;
            flips.push(("housekeeping not done".into(), messy));

            assert_eq!(flips.len(), 14, "9 clauses, pre-stop checks twice");
            for (label, mut record) in flips {
                let (passed, reason) = evaluate_completion_gate(&record).unwrap();
                record.stop_permission = passed;
                assert!(
                    !record.stop_permission,
                    "flip `{label}` must revoke stop permission"
                );
                assert_ne!(reason, "all gates passed", "flip `{label}`");
            }
        },
    );
}

// ---------------------------------------------------------------------------
// 7. Case-study reproduction (optional: needs the real dataset)
// ---------------------------------------------------------------------------

fn real_data_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var("STORE_SALES_DATA").ok().map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/store-sales")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|dir| dir.join(TRAIN_FILE).is_file())
}

#[test]
fn c7_case_study_baseline_reproduces_when_real_data_is_present() {
    let Some(data_dir) = real_data_dir() else {
        println!(
            "acceptance: SKIP case-study reproduction (real Store Sales train.csv not found; \
             set STORE_SALES_DATA or place it under data/store-sales/)"
        );
        return;
    };
    criterion("case-study median baseline", None, || {
        let train = std::fs::read(data_dir.join(TRAIN_FILE)).unwrap();
        let mut raw = BTreeMap::new();
        raw.insert(TRAIN_FILE.to_string(), train);
        let slice = SliceSpec {
            store_ids: (1..=5).collect(),
            families: FamilySelector::All,
            public_train_end: d("2017-07-30"),
            hidden_start: d("2017-07-31"),
            hidden_end: d("2017-08-15"),
            auxiliary_truncation: BTreeMap::new(),
            auxiliary_full_span: BTreeSet::new(),
        };
        let schema = SchemaMap::default();
        let recon = build_reconstruction(&raw, &slice, &schema).unwrap();
        let entity_count = recon.hidden_truth.entities().len() as u64;
        let history_start = recon
            .public_train
            .rows
            .iter()
            .map(|r| r.date)
            .min()
            .unwrap();
        let task = derive_task_file(
            history_start,
            &slice,
            entity_count,
            &schema.timezone,
            &TaskFileOptions::default(),
        )
        .unwrap();
        let skeleton = parse_skeleton(&recon.public_files[TEST_FILE], &schema).unwrap();

        // the documented baseline decision: per-entity median of the last 7
        // observed dates, held constant across the horizon
        let grid = median_baseline_forecast(&recon.public_train, &task.scope).unwrap();
        let payload = render_submission(&skeleton, &grid, &task).unwrap();
        let evaluator = Evaluator::new(task, &recon.hidden_truth)
            .unwrap()
            .with_training_reference(&recon.public_train);
        let outcome = evaluator.evaluate(&payload).unwrap();
        assert!(outcome.admissible, "{}", outcome.validity.render());
        let rmsle = outcome.scores.as_ref().unwrap().primary_value();

        // reference score for this slice; variance from the under-specified
        // baseline decision is reported, not failed
        let reference = 0.4352;
        let tolerance = 0.05;
        if (rmsle - reference).abs() <= tolerance {
            println!("case-study median baseline rmsle {rmsle:.4} (reference {reference})");
        } else {
            println!(
                "acceptance: SENSITIVITY FINDING case-study median baseline rmsle {rmsle:.4} \
                 outside {reference} +/- {tolerance}; the median-window decision needs review"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 8. Server contract
// ---------------------------------------------------------------------------

fn perfect_payload(ws: &LoadedWorkspace) -> Vec<u8> {
    let mut out = String::from("id,sales\n");
    for (id, row) in grid_rows(&ws.hidden_truth) {
        out.push_str(&format!("{id},{}\n", row.target));
    }
    out.into_bytes()
}

fn constant_payload(rows: usize, value: f64) -> Vec<u8> {
    let mut out = String::from("id,sales\n");
    for id in 0..rows {
        out.push_str(&format!("{id},{value}\n"));
    }
    out.into_bytes()
}

#[test]
fn c8_server_contract_holds_end_to_end() {
    criterion(
        "server contract (confidentiality, restart, limits, ties)",
        Some(Duration::from_secs(10)),
        || {
            let dir = tempfile::tempdir().unwrap();
            let out = synthetic_workspace(dir.path(), 2, 3, Some(2));
            let schema = SchemaMap::default();

            // confidentiality: plant a sentinel in every hidden target and
            // scan every endpoint body for it
            let mut planted = load_workspace(&out, &schema).unwrap();
            let sentinel = 90001.5f64;
            for row in &mut planted.hidden_truth.rows {
                row.target = sentinel;
            }
            let config =
                ServerConfig::from_workspace(&planted, dir.path().join("probe.jsonl")).unwrap();
            let server = serve(config, 0).unwrap();
            let base = server.base_url();
            let (status, listing) = http_get(&format!("{base}/files"));
            assert_eq!(status, 200);
            let entries: Vec<ManifestEntry> = serde_json::from_str(&listing).unwrap();
            let mut bodies = vec![listing];
            for entry in &entries {
                let (status, body) = http_get(&format!("{base}/files/{}", entry.file_name));
                assert_eq!(status, 200, "{}", entry.file_name);
                bodies.push(body);
            }
            let probe = constant_payload(planted.hidden_truth.rows.len(), 1.0);
            bodies.push(http_post(&format!("{base}/submit"), "probe", &probe).1);
            bodies.push(http_get(&format!("{base}/submissions")).1);
            bodies.push(http_get(&format!("{base}/leaderboard")).1);
            for body in &bodies {
                assert!(
                    !body.contains("90001.5"),
                    "hidden truth value leaked into a response"
                );
            }
            drop(server);

            // submission limits, tie-breaking, restart-from-log
            let ws = load_workspace(&out, &schema).unwrap();
            let log_path = dir.path().join("submissions.jsonl");
            let perfect = perfect_payload(&ws);
            let constant = constant_payload(ws.hidden_truth.rows.len(), 1.0);

            let (history, board) = {
                let config = ServerConfig::from_workspace(&ws, log_path.clone()).unwrap();
                let server = serve(config, 0).unwrap();
                let base = server.base_url();
                let url = format!("{base}/submit");
                assert_eq!(http_post(&url, "alice", &perfect).0, 200);
                assert_eq!(http_post(&url, "bob", &constant).0, 200);
                assert_eq!(http_post(&url, "carol", &perfect).0, 200);
                assert_eq!(http_post(&url, "bob", &constant).0, 200);
                assert_eq!(
                    http_post(&url, "bob", &constant).0,
                    429,
                    "third attempt over a 2-submission cap"
                );

                let rows: Vec<LeaderboardRow> =
                    serde_json::from_str(&http_get(&format!("{base}/leaderboard")).1).unwrap();
                assert_eq!(rows.len(), 3);
                assert_eq!(rows[0].submitter, "alice", "earlier id wins the tie");
                assert_eq!(rows[1].submitter, "carol");
                assert_eq!(rows[2].submitter, "bob");
                assert_eq!((rows[0].rank, rows[1].rank, rows[2].rank), (1, 2, 3));
                assert_eq!(rows[0].score, 0.0);
                assert!(rows[2].score > 0.0);

                let history: Vec<SubmissionRecord> =
                    serde_json::from_str(&http_get(&format!("{base}/submissions")).1).unwrap();
                assert_eq!(history.len(), 4);
                (history, rows)
            };

            // restart: the log alone restores history and leaderboard
            let config = ServerConfig::from_workspace(&ws, log_path).unwrap();
            let server = serve(config, 0).unwrap();
            let base = server.base_url();
            let restored: Vec<SubmissionRecord> =
                serde_json::from_str(&http_get(&format!("{base}/submissions")).1).unwrap();
            assert_eq!(restored, history, "history survives restart");
            let restored_board: Vec<LeaderboardRow> =
                serde_json::from_str(&http_get(&format!("{base}/leaderboard")).1).unwrap();
            assert_eq!(restored_board, board, "leaderboard survives restart");

            let (status, body) = http_post(&format!("{base}/submit"), "dora", &perfect);
            assert_eq!(status, 200);
            let record: SubmissionRecord = serde_json::from_str(&body).unwrap();
            assert_eq!(record.id, 4, "ids continue after restart");
            drop(server);
        },
    );
}
