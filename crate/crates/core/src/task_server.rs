//! Local HTTP service exposing one task: file listing and download,
//! submission intake with validation and scoring, a submission history, and
//! a leaderboard.
//!
//! The hidden truth table lives only inside the evaluator; no endpoint
//! serializes it. Submissions are recorded (payload digest, validity report,
//! scores) in an append-only JSONL log that survives restarts.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Json, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::oneshot;

use crate::data_interface::LoadedWorkspace;
use crate::task_model::{ManifestEntry, MetricId, TaskFile};
use crate::util::{now_utc_micros, sha256_hex};
use crate::validation_gate::{Evaluator, GateError, MetricScores, ValidityReport};

pub const SUBMITTER_HEADER: &str = "x-submitter";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("submission log line {line} is corrupt: {source}")]
    CorruptLog {
        line: usize,
        source: serde_json::Error,
    },
    #[error("runtime: {0}")]
    Runtime(String),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One accepted submission. Carries the payload digest, never the payload,
/// and never any truth value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub id: u64,
    pub submitter: String,
    pub received_at: String,
    pub payload_digest: String,
    pub admissible: bool,
    pub validity: ValidityReport,
    pub scores: Option<MetricScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: u32,
    pub submitter: String,
    pub metric: MetricId,
    pub score: f64,
    pub submission_id: u64,
}

/// Best admissible score per submitter, ascending; ties resolved in favor of
/// the earlier submission id.
pub fn compute_leaderboard(records: &[SubmissionRecord], metric: MetricId) -> Vec<LeaderboardRow> {
    let mut best: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
    for record in records {
        let Some(scores) = record.scores.as_ref() else {
            continue;
        };
        let Some(score) = scores.values.get(&metric).copied() else {
            continue;
        };
        let entry = best
            .entry(record.submitter.as_str())
            .or_insert((score, record.id));
        if score < entry.0 || (score == entry.0 && record.id < entry.1) {
            *entry = (score, record.id);
        }
    }
    let mut rows: Vec<(&str, f64, u64)> = best
        .into_iter()
        .map(|(submitter, (score, id))| (submitter, score, id))
        .collect();
    rows.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.2.cmp(&b.2))
    });
    rows.into_iter()
        .enumerate()
        .map(|(i, (submitter, score, id))| LeaderboardRow {
            rank: i as u32 + 1,
            submitter: submitter.to_string(),
            metric,
            score,
            submission_id: id,
        })
        .collect()
}

struct SubmissionLog {
    records: Vec<SubmissionRecord>,
    file: File,
}

impl SubmissionLog {
    /// Open or create the JSONL log, replaying any existing records so ids
    /// and rate limits continue across restarts.
    fn open(path: &FsPath) -> Result<Self, ServerError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: SubmissionRecord =
                    serde_json::from_str(&line).map_err(|source| ServerError::CorruptLog {
                        line: i + 1,
                        source,
                    })?;
                records.push(record);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(SubmissionLog { records, file })
    }

    fn next_id(&self) -> u64 {
        self.records.iter().map(|r| r.id + 1).max().unwrap_or(0)
    }

    fn append(&mut self, record: SubmissionRecord) -> Result<(), ServerError> {
        let line = serde_json::to_string(&record).expect("record serializes");
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        self.records.push(record);
        Ok(())
    }
}

struct AppState {
    task: TaskFile,
    manifest: Vec<ManifestEntry>,
    files: BTreeMap<String, Vec<u8>>,
    evaluator: Evaluator,
    log: Mutex<SubmissionLog>,
}

pub struct ServerConfig {
    pub task: TaskFile,
    pub manifest: Vec<ManifestEntry>,
    pub public_files: BTreeMap<String, Vec<u8>>,
    pub evaluator: Evaluator,
    pub log_path: PathBuf,
}

impl ServerConfig {
    pub fn from_workspace(ws: &LoadedWorkspace, log_path: PathBuf) -> Result<Self, ServerError> {
        let evaluator = Evaluator::new(ws.task.clone(), &ws.hidden_truth)?
            .with_training_reference(&ws.public_train);
        Ok(ServerConfig {
            task: ws.task.clone(),
            manifest: ws.manifest.entries.clone(),
            public_files: ws.public_files.clone(),
            evaluator,
            log_path,
        })
    }
}

/// Running service handle. Dropping it shuts the server down and joins the
/// background thread.
pub struct TaskServer {
    addr: SocketAddr,
    base_path: String,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl TaskServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Full origin plus task mount, e.g. `http://127.0.0.1:4410/task/store-sales`.
    pub fn base_url(&self) -> String {
        format!("http://{}{}", self.addr, self.base_path)
    }

    pub fn shutdown(self) {}
}

impl Drop for TaskServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn error_body(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn list_files(State(state): State<Arc<AppState>>) -> Json<Vec<ManifestEntry>> {
    Json(state.manifest.clone())
}

async fn get_file(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> Response {
    match state.files.get(&name) {
        Some(bytes) => {
            let content_type = if name.ends_with(".csv") {
                "text/csv; charset=utf-8"
            } else {
                "text/plain; charset=utf-8"
            };
            (
                StatusCode::OK,
                [(header::CONTENT_TYPE, content_type)],
                bytes.clone(),
            )
                .into_response()
        }
        None => error_body(StatusCode::NOT_FOUND, format!("no such file `{name}`")),
    }
}

async fn submit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let submitter = headers
        .get(SUBMITTER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty());
    let Some(submitter) = submitter else {
        return error_body(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("missing `{SUBMITTER_HEADER}` header"),
        );
    };
    let mut log = state.log.lock().expect("log mutex");
    if let Some(max) = state.task.constraints.max_submissions {
        let used = log
            .records
            .iter()
            .filter(|r| r.submitter == submitter)
            .count();
        if used >= max as usize {
            return error_body(
                StatusCode::TOO_MANY_REQUESTS,
                format!("submission limit reached: {used} of {max} used"),
            );
        }
    }
    let outcome = match state.evaluator.evaluate(&body) {
        Ok(outcome) => outcome,
        Err(e) => return error_body(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let record = SubmissionRecord {
        id: log.next_id(),
        submitter: submitter.to_string(),
        received_at: now_utc_micros(),
        payload_digest: sha256_hex(&body),
        admissible: outcome.admissible,
        validity: outcome.validity,
        scores: outcome.scores,
    };
    if let Err(e) = log.append(record.clone()) {
        return error_body(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    (StatusCode::OK, Json(record)).into_response()
}

async fn submissions(State(state): State<Arc<AppState>>) -> Json<Vec<SubmissionRecord>> {
    Json(state.log.lock().expect("log mutex").records.clone())
}

async fn leaderboard(State(state): State<Arc<AppState>>) -> Json<Vec<LeaderboardRow>> {
    let records = state.log.lock().expect("log mutex").records.clone();
    Json(compute_leaderboard(&records, state.task.primary_metric()))
}

fn build_router(state: Arc<AppState>) -> Router {
    let base = state.task.endpoints.base_path.clone();
    let api = Router::new()
        .route("/files", get(list_files))
        .route("/files/{name}", get(get_file))
        .route("/submit", post(submit))
        .route("/submissions", get(submissions))
        .route("/leaderboard", get(leaderboard))
        .with_state(state);
    Router::new()
        .nest(&base, api)
        .fallback(|| async { error_body(StatusCode::NOT_FOUND, "unknown path") })
}

/// Bind `127.0.0.1:port` (0 picks a free port) and serve on a background
/// thread. Returns once the socket is bound, so the address is usable
/// immediately.
pub fn serve(config: ServerConfig, port: u16) -> Result<TaskServer, ServerError> {
    let log = SubmissionLog::open(&config.log_path)?;
    let base_path = config.task.endpoints.base_path.clone();
    let state = Arc::new(AppState {
        task: config.task,
        manifest: config.manifest,
        files: config.public_files,
        evaluator: config.evaluator,
        log: Mutex::new(log),
    });
    let router = build_router(state);

    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| ServerError::Runtime(e.to_string()))?;
    let handle = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)
                .expect("registering bound listener");
            axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .expect("server loop");
        });
    });
    Ok(TaskServer {
        addr,
        base_path,
        shutdown: Some(tx),
        handle: Some(handle),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_interface::synthetic::{default_slice, store_sales_fixture, SyntheticSpec};
    use crate::data_interface::{
        build_reconstruction, derive_task_file, grid_rows, load_workspace, write_reconstruction,
        SchemaMap, TaskFileOptions, UnifiedSeriesTable,
    };
    use chrono::NaiveDate;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn workspace(dir: &FsPath, max_submissions: Option<u32>) -> LoadedWorkspace {
        let spec = SyntheticSpec {
            seed: 9,
            stores: 2,
            families: 2,
            history_start: d("2017-06-01"),
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
        let task = derive_task_file(d("2017-06-01"), &slice, 4, &schema.timezone, &opts).unwrap();
        write_reconstruction(&recon, &task, &schema, dir).unwrap();
        load_workspace(dir, &schema).unwrap()
    }

    fn perfect_payload(truth: &UnifiedSeriesTable) -> Vec<u8> {
        let mut out = String::from("id,sales\n");
        for (id, row) in grid_rows(truth) {
            out.push_str(&format!("{id},{}\n", row.target));
        }
        out.into_bytes()
    }

    fn get(url: &str) -> (u16, String) {
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

    fn post(url: &str, submitter: Option<&str>, body: &[u8]) -> (u16, String) {
        let mut request = ureq::post(url)
            .config()
            .http_status_as_error(false)
            .build();
        if let Some(name) = submitter {
            request = request.header(SUBMITTER_HEADER, name);
        }
        let mut response = request.send(body).unwrap();
        (
            response.status().as_u16(),
            response.body_mut().read_to_string().unwrap(),
        )
    }

    #[test]
    fn serves_files_and_scores_submissions() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path(), Some(10));
        let truth = ws.hidden_truth.clone();
        let train_bytes = ws.public_files["train.csv"].clone();
        let config =
            ServerConfig::from_workspace(&ws, dir.path().join("submissions.jsonl")).unwrap();
        let server = serve(config, 0).unwrap();
        let base = server.base_url();

        let (status, body) = get(&format!("{base}/files"));
        assert_eq!(status, 200);
        let entries: Vec<ManifestEntry> = serde_json::from_str(&body).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.file_name.as_str()).collect();
        assert!(names.contains(&"train.csv"));
        assert!(names.contains(&"test.csv"));
        assert!(names.contains(&"task.txt"));

        let (status, body) = get(&format!("{base}/files/train.csv"));
        assert_eq!(status, 200);
        assert_eq!(body.as_bytes(), train_bytes.as_slice());

        let (status, _) = get(&format!("{base}/files/nope.csv"));
        assert_eq!(status, 404);
        let (status, _) = get(&format!("http://{}/other/files", server.addr()));
        assert_eq!(status, 404);

        let (status, body) = post(&format!("{base}/submit"), Some("alice"), &perfect_payload(&truth));
        assert_eq!(status, 200);
        let record: SubmissionRecord = serde_json::from_str(&body).unwrap();
        assert!(record.admissible);
        assert_eq!(record.scores.unwrap().primary_value(), 0.0);

        // readable but invalid payload: recorded, inadmissible, unscored
        let (status, body) = post(&format!("{base}/submit"), Some("alice"), b"id,sales\n0,1\n");
        assert_eq!(status, 200);
        let record: SubmissionRecord = serde_json::from_str(&body).unwrap();
        assert!(!record.admissible);
        assert!(record.scores.is_none());

        let (status, _) = post(&format!("{base}/submit"), None, b"id,sales\n");
        assert_eq!(status, 422);

        let (status, body) = get(&format!("{base}/submissions"));
        assert_eq!(status, 200);
        let records: Vec<SubmissionRecord> = serde_json::from_str(&body).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, 0);
        assert_eq!(records[1].id, 1);

        let (status, body) = get(&format!("{base}/leaderboard"));
        assert_eq!(status, 200);
        let rows: Vec<LeaderboardRow> = serde_json::from_str(&body).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].rank, 1);
        assert_eq!(rows[0].submitter, "alice");
        assert_eq!(rows[0].score, 0.0);
    }

    #[test]
    fn hidden_truth_never_leaves_the_server() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = workspace(dir.path(), Some(10));
        // Plant a distinctive magnitude in every hidden target, then scan
        // every endpoint body for it.
        let magic = 90001.5f64;
        for row in &mut ws.hidden_truth.rows {
            row.target = magic;
        }
        let config =
            ServerConfig::from_workspace(&ws, dir.path().join("submissions.jsonl")).unwrap();
        let server = serve(config, 0).unwrap();
        let base = server.base_url();

        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&get(&format!("{base}/files")).1).unwrap();
        let mut bodies = vec![get(&format!("{base}/files")).1];
        for entry in &entries {
            bodies.push(get(&format!("{base}/files/{}", entry.file_name)).1);
        }
        // a submission near the truth must not echo truth values back
        let skeleton_len = ws.hidden_truth.rows.len();
        let mut payload = String::from("id,sales\n");
        for id in 0..skeleton_len {
            payload.push_str(&format!("{id},1.0\n"));
        }
        bodies.push(post(&format!("{base}/submit"), Some("probe"), payload.as_bytes()).1);
        bodies.push(get(&format!("{base}/submissions")).1);
        bodies.push(get(&format!("{base}/leaderboard")).1);

        for body in bodies {
            assert!(
                !body.contains("90001.5"),
                "hidden target value leaked into a response body"
            );
        }
    }

    #[test]
    fn submission_limit_enforced_per_submitter() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path(), Some(2));
        let truth = ws.hidden_truth.clone();
        let config =
            ServerConfig::from_workspace(&ws, dir.path().join("submissions.jsonl")).unwrap();
        let server = serve(config, 0).unwrap();
        let url = format!("{}/submit", server.base_url());
        let payload = perfect_payload(&truth);
        assert_eq!(post(&url, Some("bob"), &payload).0, 200);
        assert_eq!(post(&url, Some("bob"), &payload).0, 200);
        assert_eq!(post(&url, Some("bob"), &payload).0, 429);
        // a different submitter still has quota
        assert_eq!(post(&url, Some("carol"), &payload).0, 200);
    }

    #[test]
    fn restart_restores_submission_history() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path(), Some(10));
        let truth = ws.hidden_truth.clone();
        let log_path = dir.path().join("submissions.jsonl");
        let payload = perfect_payload(&truth);

        {
            let config = ServerConfig::from_workspace(&ws, log_path.clone()).unwrap();
            let server = serve(config, 0).unwrap();
            let url = format!("{}/submit", server.base_url());
            assert_eq!(post(&url, Some("alice"), &payload).0, 200);
            assert_eq!(post(&url, Some("bob"), &payload).0, 200);
        }

        let config = ServerConfig::from_workspace(&ws, log_path).unwrap();
        let server = serve(config, 0).unwrap();
        let base = server.base_url();
        let records: Vec<SubmissionRecord> =
            serde_json::from_str(&get(&format!("{base}/submissions")).1).unwrap();
        assert_eq!(records.len(), 2);
        let (status, body) = post(&format!("{base}/submit"), Some("dora"), &payload);
        assert_eq!(status, 200);
        let record: SubmissionRecord = serde_json::from_str(&body).unwrap();
        assert_eq!(record.id, 2, "ids continue after restart");
    }

    #[test]
    fn leaderboard_ranks_best_score_with_stable_ties() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path(), Some(10));
        let truth = ws.hidden_truth.clone();
        let config =
            ServerConfig::from_workspace(&ws, dir.path().join("submissions.jsonl")).unwrap();
        let server = serve(config, 0).unwrap();
        let base = server.base_url();
        let url = format!("{base}/submit");

        let perfect = perfect_payload(&truth);
        let mut constant = String::from("id,sales\n");
        for id in 0..truth.rows.len() {
            constant.push_str(&format!("{id},1.0\n"));
        }

        assert_eq!(post(&url, Some("alice"), &perfect).0, 200); // id 0, score 0
        assert_eq!(post(&url, Some("bob"), constant.as_bytes()).0, 200); // id 1, worse
        assert_eq!(post(&url, Some("carol"), &perfect).0, 200); // id 2, ties alice

        let rows: Vec<LeaderboardRow> =
            serde_json::from_str(&get(&format!("{base}/leaderboard")).1).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].submitter, "alice"); // earlier id wins the tie
        assert_eq!(rows[1].submitter, "carol");
        assert_eq!(rows[2].submitter, "bob");
        assert!(rows[2].score > 0.0);
        assert_eq!(rows[0].rank, 1);
        assert_eq!(rows[2].rank, 3);
    }
}
