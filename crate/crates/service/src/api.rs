//! HTTP JSON surface. Bodies are canonical JSON; entity versions travel in
//! the `ETag` header and in `expected_version` fields of mutating requests.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use grader_core::calibration::SamplingStrategy;
use grader_core::canonical;
use grader_core::domain::{Assignment, Course, Question, Submission};
use grader_core::exact::{Exact, Points};
use grader_core::ids::{
    AssignmentId, GradeRecordId, ItemId, QuestionId, RunId, SessionId, StudentId, SubmissionId, WisdomId,
};
use grader_core::ingestion::UploadManifest;
use grader_core::review::{ConfidencePolicy, ReviewDecision};
use grader_core::rubric::{Rubric, Scheme};
use grader_core::store::{EntityKind, Expect, PendingWrite, Versioned};

use crate::app::{App, AppResult, TimeSavingsQuery};
use crate::error::AppError;
use crate::export;

const BODY_LIMIT: usize = 64 * 1024 * 1024;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const ACTOR_HEADER: &str = "x-actor";

#[derive(Clone)]
pub struct ApiState {
    app: Arc<App>,
    idempotency_locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

pub fn router(app: Arc<App>) -> Router {
    let state = ApiState { app, idempotency_locks: Default::default() };
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/courses", post(create_course))
        .route("/courses/{id}", get(get_course))
        .route("/assignments", post(create_assignment))
        .route("/assignments/{id}", get(get_assignment))
        .route("/assignments/{id}/policy", put(set_policy))
        .route("/assignments/{id}/questions", get(list_questions))
        .route("/assignments/{id}/submissions", get(list_submissions))
        .route("/assignments/{id}/review-queue", get(review_queue))
        .route("/assignments/{id}/feedback", post(feedback))
        .route("/questions", post(create_question))
        .route("/questions/{id}", get(get_question))
        .route("/questions/{id}/rubric", put(set_rubric))
        .route("/questions/{id}/rubric-proposal", post(propose_rubric))
        .route("/questions/{id}/grading-runs", post(start_run).get(list_runs))
        .route("/questions/{id}/grade-records", get(list_records))
        .route("/questions/{id}/calibration-sessions", post(open_calibration))
        .route("/questions/{id}/wisdoms", get(list_wisdoms))
        .route("/submissions/bulk", post(ingest))
        .route("/submissions/{id}", get(get_submission))
        .route("/submissions/{id}/match", post(resolve_match).get(get_match))
        .route("/grading-runs/{id}", get(get_run))
        .route("/grade-records/{id}", get(get_record))
        .route("/grade-records/{id}/view", get(record_view))
        .route("/grade-records/{id}/review", post(review))
        .route("/grade-records/{id}/transcription", post(verify_transcription))
        .route("/calibration-sessions/{id}", get(get_session))
        .route("/calibration-sessions/{id}/corrections", post(correction))
        .route("/calibration-sessions/{id}/propose-wisdoms", post(propose_wisdoms))
        .route("/calibration-sessions/{id}/wisdoms/{wisdom}", put(edit_wisdom))
        .route("/calibration-sessions/{id}/apply", post(apply_calibration))
        .route("/reports/time-savings", get(time_savings))
        .route("/reports/accuracy", get(accuracy))
        .route("/reports/usage", get(usage))
        .route("/export/grades.csv", get(export_csv))
        .route("/export/grades.json", get(export_json))
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .with_state(state)
}

pub async fn serve(app: Arc<App>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}

// ---- plumbing ----

fn json<T: Serialize>(status: StatusCode, value: &T) -> AppResult<Response> {
    let body = canonical::to_string(value)?;
    Ok((status, [(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn versioned<T: Serialize>(status: StatusCode, v: &Versioned<T>) -> AppResult<Response> {
    let mut response = json(status, &v.value)?;
    response.headers_mut().insert(header::ETAG, HeaderValue::from_str(&format!("\"{}\"", v.version)).expect("digits"));
    Ok(response)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> AppResult<T> {
    let source = if body.is_empty() { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(source).map_err(|e| AppError::bad(format!("invalid request body: {e}")))
}

fn actor(headers: &HeaderMap) -> String {
    headers.get(ACTOR_HEADER).and_then(|v| v.to_str().ok()).filter(|v| !v.is_empty()).unwrap_or("api").to_string()
}

fn query_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> AppResult<Option<T>> {
    q.get(key)
        .map(|v| v.parse::<T>().map_err(|_| AppError::bad(format!("query parameter {key}: cannot parse {v:?}"))))
        .transpose()
}

fn required<T>(value: Option<T>, key: &str) -> AppResult<T> {
    value.ok_or_else(|| AppError::bad(format!("query parameter {key} is required")))
}

// ---- idempotency ----

#[derive(Serialize, Deserialize)]
struct StoredResponse {
    status: u16,
    request_digest: String,
    body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    etag: Option<String>,
}

impl StoredResponse {
    fn into_response(self, replay: bool) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::OK);
        let mut response = (status, self.body).into_response();
        let headers = response.headers_mut();
        for (name, value) in [(header::CONTENT_TYPE, self.content_type), (header::ETAG, self.etag)] {
            if let Some(v) = value.and_then(|v| HeaderValue::from_str(&v).ok()) {
                headers.insert(name, v);
            }
        }
        if replay {
            headers.insert("idempotent-replay", HeaderValue::from_static("true"));
        }
        response
    }
}

/// Replays the stored response of a mutating request retried with the same
/// `Idempotency-Key`. Reusing a key for a different request is a conflict.
async fn idempotency(State(state): State<ApiState>, request: Request, next: Next) -> Response {
    let key = request.headers().get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let (Some(key), false) = (key, matches!(*request.method(), Method::GET | Method::HEAD)) else {
        return next.run(request).await;
    };
    let (parts, body) = request.into_parts();
    let bytes = match to_bytes(body, BODY_LIMIT).await {
        Ok(b) => b,
        Err(e) => return AppError::bad(format!("request body: {e}")).into_response(),
    };
    let target = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/").to_string();
    let scope = match canonical::digest(&(parts.method.as_str(), &target, &key)) {
        Ok(d) => d,
        Err(e) => return AppError::from(e).into_response(),
    };
    let request_digest = match canonical::digest(&String::from_utf8_lossy(&bytes)) {
        Ok(d) => d,
        Err(e) => return AppError::from(e).into_response(),
    };
    let slot = {
        let mut locks = state.idempotency_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(scope.clone()).or_default().clone()
    };
    let _held = slot.lock().await;

    let store = state.app.store();
    if let Some(stored) = store.get_raw(EntityKind::IdempotentResponse, &scope) {
        return match serde_json::from_value::<StoredResponse>(stored.payload) {
            Ok(s) if s.request_digest == request_digest => s.into_response(true),
            Ok(_) => {
                AppError::Conflict(format!("idempotency key {key:?} was used for a different request")).into_response()
            }
            Err(e) => AppError::from(e).into_response(),
        };
    }

    let response = next.run(Request::from_parts(parts, Body::from(bytes))).await;
    let (parts, body) = response.into_parts();
    let body = match to_bytes(body, BODY_LIMIT).await {
        Ok(b) => b,
        Err(e) => return AppError::Internal(format!("response body: {e}")).into_response(),
    };
    let header_str = |name| parts.headers.get(name).and_then(|v: &HeaderValue| v.to_str().ok()).map(str::to_string);
    let stored = StoredResponse {
        status: parts.status.as_u16(),
        request_digest,
        body: String::from_utf8_lossy(&body).into_owned(),
        content_type: header_str(header::CONTENT_TYPE),
        etag: header_str(header::ETAG),
    };
    if !parts.status.is_server_error() {
        let payload = match canonical::to_value(&stored) {
            Ok(v) => v,
            Err(e) => return AppError::from(e).into_response(),
        };
        let write =
            PendingWrite::raw(EntityKind::IdempotentResponse, scope, payload, Expect::Absent, "idempotent-response");
        if let Err(e) = store.commit(vec![write], "system") {
            tracing::warn!(%e, "could not persist idempotent response");
        }
    }
    stored.into_response(false)
}

// ---- authoring ----

async fn create_course(State(s): State<ApiState>, headers: HeaderMap, body: Bytes) -> AppResult<Response> {
    let course: Course = parse(&body)?;
    versioned(StatusCode::CREATED, &s.app.create_course(course, &actor(&headers))?)
}

async fn get_course(State(s): State<ApiState>, Path(id): Path<String>) -> AppResult<Response> {
    versioned(StatusCode::OK, &s.app.get::<Course>(&id)?)
}

async fn create_assignment(State(s): State<ApiState>, headers: HeaderMap, body: Bytes) -> AppResult<Response> {
    let assignment: Assignment = parse(&body)?;
    versioned(StatusCode::CREATED, &s.app.create_assignment(assignment, &actor(&headers))?)
}

async fn get_assignment(State(s): State<ApiState>, Path(id): Path<String>) -> AppResult<Response> {
    versioned(StatusCode::OK, &s.app.get::<Assignment>(&id)?)
}

#[derive(Deserialize)]
struct PolicyBody {
    #[serde(flatten)]
    policy: ConfidencePolicy,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn set_policy(
    State(s): State<ApiState>,
    Path(id): Path<AssignmentId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: PolicyBody = parse(&body)?;
    versioned(StatusCode::OK, &s.app.set_policy(&id, b.policy, b.expected_version, &actor(&headers))?)
}

async fn list_questions(State(s): State<ApiState>, Path(id): Path<AssignmentId>) -> AppResult<Response> {
    s.app.get::<Assignment>(id.as_str())?;
    let questions: Vec<Question> =
        s.app.store().list_by::<Question>("assignment_id", id.as_str())?.into_iter().map(|q| q.value).collect();
    json(StatusCode::OK, &questions)
}

async fn create_question(State(s): State<ApiState>, headers: HeaderMap, body: Bytes) -> AppResult<Response> {
    let question: Question = parse(&body)?;
    versioned(StatusCode::CREATED, &s.app.create_question(question, &actor(&headers))?)
}

async fn get_question(State(s): State<ApiState>, Path(id): Path<String>) -> AppResult<Response> {
    versioned(StatusCode::OK, &s.app.get::<Question>(&id)?)
}

#[derive(Deserialize)]
struct RubricBody {
    #[serde(flatten)]
    rubric: Rubric,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn set_rubric(
    State(s): State<ApiState>,
    Path(id): Path<QuestionId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: RubricBody = parse(&body)?;
    versioned(StatusCode::OK, &s.app.set_rubric(&id, b.rubric, b.expected_version, &actor(&headers))?)
}

#[derive(Deserialize)]
struct ProposalBody {
    scheme: Scheme,
    point_budget: Points,
}

async fn propose_rubric(State(s): State<ApiState>, Path(id): Path<QuestionId>, body: Bytes) -> AppResult<Response> {
    let b: ProposalBody = parse(&body)?;
    json(StatusCode::OK, &s.app.propose_rubric(&id, b.scheme, b.point_budget).await?)
}

// ---- ingestion ----

async fn ingest(State(s): State<ApiState>, headers: HeaderMap, body: Bytes) -> AppResult<Response> {
    let manifest: UploadManifest = parse(&body)?;
    json(StatusCode::CREATED, &s.app.ingest(manifest, &actor(&headers)).await?)
}

async fn list_submissions(State(s): State<ApiState>, Path(id): Path<AssignmentId>) -> AppResult<Response> {
    s.app.get::<Assignment>(id.as_str())?;
    json(StatusCode::OK, &s.app.list_submissions(&id)?)
}

async fn get_submission(State(s): State<ApiState>, Path(id): Path<String>) -> AppResult<Response> {
    versioned(StatusCode::OK, &s.app.get::<Submission>(&id)?)
}

#[derive(Deserialize)]
struct MatchBody {
    student_id: StudentId,
}

async fn resolve_match(
    State(s): State<ApiState>,
    Path(id): Path<SubmissionId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: MatchBody = parse(&body)?;
    versioned(StatusCode::OK, &s.app.resolve_match(&id, &b.student_id, &actor(&headers)).await?)
}

async fn get_match(State(s): State<ApiState>, Path(id): Path<SubmissionId>) -> AppResult<Response> {
    s.app.get::<Submission>(id.as_str())?;
    let result = s
        .app
        .match_result(&id)?
        .ok_or_else(|| AppError::NotFound(format!("no name match recorded for submission {id}")))?;
    json(StatusCode::OK, &result)
}

// ---- grading ----

#[derive(Deserialize)]
struct RunBody {
    #[serde(default)]
    wait: bool,
}

async fn start_run(
    State(s): State<ApiState>,
    Path(id): Path<QuestionId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: RunBody = parse(&body)?;
    let run = s.app.start_run(&id, b.wait, &actor(&headers)).await?;
    json(if b.wait { StatusCode::CREATED } else { StatusCode::ACCEPTED }, &run)
}

async fn list_runs(State(s): State<ApiState>, Path(id): Path<QuestionId>) -> AppResult<Response> {
    s.app.get::<Question>(id.as_str())?;
    json(StatusCode::OK, &s.app.list_runs(&id)?)
}

async fn get_run(State(s): State<ApiState>, Path(id): Path<RunId>) -> AppResult<Response> {
    json(StatusCode::OK, &s.app.get_run(&id)?)
}

async fn list_records(State(s): State<ApiState>, Path(id): Path<QuestionId>) -> AppResult<Response> {
    s.app.get::<Question>(id.as_str())?;
    json(StatusCode::OK, &s.app.list_records(&id)?)
}

async fn get_record(State(s): State<ApiState>, Path(id): Path<GradeRecordId>) -> AppResult<Response> {
    versioned(StatusCode::OK, &s.app.get_record(&id)?)
}

async fn record_view(State(s): State<ApiState>, Path(id): Path<GradeRecordId>) -> AppResult<Response> {
    json(StatusCode::OK, &s.app.review_view(&id)?)
}

// ---- review ----

async fn review_queue(
    State(s): State<ApiState>,
    Path(id): Path<AssignmentId>,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
) -> AppResult<Response> {
    let seed = required(query_param::<u64>(&q, "seed")?, "seed")?;
    json(StatusCode::OK, &s.app.review_queue(&id, seed, &actor(&headers))?)
}

#[derive(Deserialize)]
struct ReviewBody {
    #[serde(flatten)]
    decision: ReviewDecision,
    expected_version: u64,
    #[serde(default)]
    reviewer: Option<String>,
}

async fn review(
    State(s): State<ApiState>,
    Path(id): Path<GradeRecordId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: ReviewBody = parse(&body)?;
    let reviewer = b.reviewer.unwrap_or_else(|| actor(&headers));
    versioned(StatusCode::OK, &s.app.submit_review(&id, &b.decision, b.expected_version, &reviewer)?)
}

#[derive(Deserialize)]
struct TranscriptionBody {
    #[serde(default)]
    text: Option<String>,
    expected_version: u64,
}

async fn verify_transcription(
    State(s): State<ApiState>,
    Path(id): Path<GradeRecordId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: TranscriptionBody = parse(&body)?;
    versioned(
        StatusCode::OK,
        &s.app.verify_transcription(&id, b.text.as_deref(), b.expected_version, &actor(&headers))?,
    )
}

#[derive(Deserialize)]
struct FeedbackBody {
    #[serde(default)]
    style_prompt: Option<String>,
}

async fn feedback(
    State(s): State<ApiState>,
    Path(id): Path<AssignmentId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: FeedbackBody = parse(&body)?;
    json(StatusCode::OK, &s.app.dispatch_feedback(&id, b.style_prompt.as_deref(), &actor(&headers)).await?)
}

// ---- calibration ----

#[derive(Deserialize)]
struct OpenSessionBody {
    size: usize,
    #[serde(default = "default_strategy")]
    strategy: SamplingStrategy,
    seed: u64,
}

fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::Random
}

async fn open_calibration(
    State(s): State<ApiState>,
    Path(id): Path<QuestionId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: OpenSessionBody = parse(&body)?;
    versioned(StatusCode::CREATED, &s.app.open_calibration(&id, b.size, b.strategy, b.seed, &actor(&headers)).await?)
}

async fn get_session(State(s): State<ApiState>, Path(id): Path<String>) -> AppResult<Response> {
    versioned(StatusCode::OK, &s.app.get::<grader_core::calibration::CalibrationSession>(&id)?)
}

#[derive(Deserialize)]
struct CorrectionBody {
    record_id: GradeRecordId,
    selected_item_ids: BTreeSet<ItemId>,
    #[serde(default)]
    reviewer: Option<String>,
}

async fn correction(
    State(s): State<ApiState>,
    Path(id): Path<SessionId>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: CorrectionBody = parse(&body)?;
    let reviewer = b.reviewer.unwrap_or_else(|| actor(&headers));
    json(StatusCode::OK, &s.app.record_correction(&id, &b.record_id, b.selected_item_ids, &reviewer).await?)
}

async fn propose_wisdoms(
    State(s): State<ApiState>,
    Path(id): Path<SessionId>,
    headers: HeaderMap,
) -> AppResult<Response> {
    json(StatusCode::OK, &s.app.propose_wisdoms(&id, &actor(&headers)).await?)
}

#[derive(Deserialize)]
struct EditBody {
    text: String,
}

async fn edit_wisdom(
    State(s): State<ApiState>,
    Path((id, wisdom)): Path<(SessionId, WisdomId)>,
    headers: HeaderMap,
    body: Bytes,
) -> AppResult<Response> {
    let b: EditBody = parse(&body)?;
    json(StatusCode::OK, &s.app.edit_wisdom(&id, &wisdom, &b.text, &actor(&headers)).await?)
}

async fn apply_calibration(
    State(s): State<ApiState>,
    Path(id): Path<SessionId>,
    headers: HeaderMap,
) -> AppResult<Response> {
    json(StatusCode::OK, &s.app.apply_calibration(&id, &actor(&headers)).await?)
}

async fn list_wisdoms(State(s): State<ApiState>, Path(id): Path<QuestionId>) -> AppResult<Response> {
    s.app.get::<Question>(id.as_str())?;
    json(StatusCode::OK, &s.app.list_wisdoms(&id)?)
}

// ---- reports and export ----

async fn time_savings(State(s): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> AppResult<Response> {
    let query = TimeSavingsQuery {
        assignment: q.get("assignment").map(|a| AssignmentId::from(a.as_str())),
        t_avg: required(query_param::<Exact>(&q, "t_avg")?, "t_avg")?,
        students: query_param(&q, "students")?,
        questions: query_param(&q, "questions")?,
        c: query_param(&q, "c")?,
    };
    json(StatusCode::OK, &s.app.time_savings(&query)?)
}

async fn accuracy(State(s): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> AppResult<Response> {
    let assignment = q.get("assignment").map(|a| AssignmentId::from(a.as_str()));
    json(StatusCode::OK, &s.app.accuracy(assignment.as_ref())?)
}

async fn usage(State(s): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> AppResult<Response> {
    let from: Option<NaiveDate> = query_param(&q, "from")?;
    let to: Option<NaiveDate> = query_param(&q, "to")?;
    let window = match (from, to) {
        (None, None) => None,
        (from, to) => Some((from.unwrap_or(NaiveDate::MIN), to.unwrap_or(NaiveDate::MAX))),
    };
    json(StatusCode::OK, &s.app.usage(window)?)
}

fn export_of(s: &ApiState, q: &HashMap<String, String>) -> AppResult<export::GradeExport> {
    let assignment = required(q.get("assignment"), "assignment")?;
    s.app.export(&AssignmentId::from(assignment.as_str()))
}

async fn export_csv(State(s): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> AppResult<Response> {
    let csv = export::to_csv(&export_of(&s, &q)?).map_err(|e| AppError::Internal(e.to_string()))?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn export_json(State(s): State<ApiState>, Query(q): Query<HashMap<String, String>>) -> AppResult<Response> {
    let body = export::to_json(&export_of(&s, &q)?)?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], body).into_response())
}
