//! Service facade: every operation the HTTP API and CLI expose, on top of
//! the document store, the grading pipeline and the provider gateway.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use grader_core::analytics::{self, AccuracyReport, TimeSavings, TimeSavingsInput, UsageEvent, UsageReport};
use grader_core::calibration::{
    self, AgreementReport, ApplyContext, CalibrationSession, GradingWisdom, SamplingStrategy,
};
use grader_core::domain::{validate_question, Assignment, Course, MatchStatus, Question, Submission};
use grader_core::exact::{Exact, Points};
use grader_core::ids::{
    self, AssignmentId, GradeRecordId, ItemId, QuestionId, RunId, SessionId, StudentId, SubmissionId, WisdomId,
};
use grader_core::ingestion::{self, MatchConfig, MatchReservations, MatchResult, UploadManifest};
use grader_core::pipeline::{GradeRecord, GradingPipeline, GradingRun, PipelineConfig, RunProgress, RunState};
use grader_core::provider::Gateway;
use grader_core::review::{self, ConfidencePolicy, FeedbackReport, ReviewDecision, ReviewQueue, ReviewView};
use grader_core::rubric::{self, Rubric, Scheme};
use grader_core::store::{EntityKind, Expect, PendingWrite, Store, Versioned};

use crate::error::AppError;
use crate::export::{self, GradeExport};

pub type AppResult<T> = Result<T, AppError>;

/// The one violation that may be outstanding while a question is authored.
const RUBRIC_PENDING: &str = "rubric required before grading";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    #[serde(default)]
    pub courses: Vec<Course>,
    #[serde(default)]
    pub assignments: Vec<Assignment>,
    #[serde(default)]
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub submissions: Vec<Submission>,
    pub matches: Vec<MatchResult>,
    /// Submissions already present from an earlier upload of the same pages.
    pub unchanged: Vec<SubmissionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub session: CalibrationSession,
    pub record: GradeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationApplied {
    pub report: AgreementReport,
    pub wisdoms: Vec<GradingWisdom>,
    pub run: GradingRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadMeasure {
    pub responses: u64,
    pub correct_autograded: u64,
    pub review_workload: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSavingsReport {
    pub input: TimeSavingsInput,
    pub result: TimeSavings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured: Option<WorkloadMeasure>,
}

/// Explicit overrides for the time-savings calculator.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct TimeSavingsQuery {
    pub assignment: Option<AssignmentId>,
    pub t_avg: Exact,
    pub students: Option<u64>,
    pub questions: Option<u64>,
    pub c: Option<u64>,
}

pub struct App {
    store: Arc<Store>,
    gateway: Arc<Gateway>,
    pipeline: Arc<GradingPipeline>,
    match_config: MatchConfig,
    parallelism: usize,
    active: Mutex<HashSet<QuestionId>>,
    progress: Mutex<HashMap<RunId, Arc<RunProgress>>>,
    /// Serializes multi-entity read-modify-write flows.
    flow: tokio::sync::Mutex<()>,
}

/// Releases a question's active-run slot when dropped.
struct ActiveSlot {
    app: Arc<App>,
    question: QuestionId,
}

impl Drop for ActiveSlot {
    fn drop(&mut self) {
        lock(&self.app.active).remove(&self.question);
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn write<T: grader_core::store::Entity>(value: &T, expect: Expect, action: &str) -> AppResult<PendingWrite> {
    Ok(PendingWrite::of(value, expect, action)?)
}

impl App {
    pub fn new(store: Arc<Store>, gateway: Arc<Gateway>, parallelism: usize) -> AppResult<Arc<App>> {
        let pipeline = Arc::new(GradingPipeline::new(gateway.clone(), PipelineConfig { parallelism }));
        let app = Arc::new(App {
            store,
            gateway,
            pipeline,
            match_config: MatchConfig::default(),
            parallelism,
            active: Mutex::new(HashSet::new()),
            progress: Mutex::new(HashMap::new()),
            flow: tokio::sync::Mutex::new(()),
        });
        app.recover()?;
        Ok(app)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    /// Runs left `running` by a previous process can never finish.
    fn recover(&self) -> AppResult<()> {
        for run in self.store.list::<GradingRun>()? {
            if run.value.state == RunState::Running {
                let mut failed = run.value;
                failed.state = RunState::Failed;
                self.store.update(&failed, run.version, "system", "recover:interrupted")?;
            }
        }
        Ok(())
    }

    // ---- lookups ----

    fn course_of(&self, assignment: &Assignment) -> AppResult<Course> {
        Ok(self.store.require::<Course>(assignment.course_id.as_str())?.value)
    }

    fn questions_of(&self, assignment: &AssignmentId) -> AppResult<Vec<Question>> {
        let mut qs: Vec<Question> = self
            .store
            .list_by::<Question>("assignment_id", assignment.as_str())?
            .into_iter()
            .map(|v| v.value)
            .collect();
        qs.sort_by(|a, b| a.ordinal.cmp(&b.ordinal).then_with(|| a.id.cmp(&b.id)));
        Ok(qs)
    }

    fn submissions_of(&self, assignment: &AssignmentId) -> AppResult<Vec<Versioned<Submission>>> {
        Ok(self.store.list_by::<Submission>("assignment_id", assignment.as_str())?)
    }

    fn records_of(&self, question: &QuestionId) -> AppResult<Vec<Versioned<GradeRecord>>> {
        Ok(self.store.list_by::<GradeRecord>("question_id", question.as_str())?)
    }

    pub fn records_of_assignment(&self, assignment: &AssignmentId) -> AppResult<Vec<GradeRecord>> {
        let mut out = Vec::new();
        for q in self.questions_of(assignment)? {
            out.extend(self.records_of(&q.id)?.into_iter().map(|r| r.value));
        }
        Ok(out)
    }

    fn runs_of(&self, question: &QuestionId) -> AppResult<Vec<GradingRun>> {
        Ok(self.store.list_by::<GradingRun>("question_id", question.as_str())?.into_iter().map(|r| r.value).collect())
    }

    /// The completed run no later completed run builds on.
    fn latest_completed_run(&self, question: &QuestionId) -> AppResult<Option<GradingRun>> {
        let completed: Vec<GradingRun> =
            self.runs_of(question)?.into_iter().filter(|r| r.state == RunState::Completed).collect();
        let superseded: HashSet<&RunId> = completed.iter().filter_map(|r| r.previous_run_id.as_ref()).collect();
        Ok(completed.iter().find(|r| !superseded.contains(&r.id)).cloned())
    }

    fn active_wisdoms(&self, question: &QuestionId) -> AppResult<Vec<GradingWisdom>> {
        Ok(self.list_wisdoms(question)?.into_iter().filter(|w| w.active).collect())
    }

    fn ensure_idle(&self, question: &QuestionId) -> AppResult<()> {
        if lock(&self.active).contains(question) {
            return Err(AppError::Conflict(format!("a grading run is active for question {question}")));
        }
        Ok(())
    }

    fn claim(self: &Arc<Self>, question: &QuestionId) -> AppResult<ActiveSlot> {
        if !lock(&self.active).insert(question.clone()) {
            return Err(AppError::Conflict(format!("a grading run is already active for question {question}")));
        }
        Ok(ActiveSlot { app: self.clone(), question: question.clone() })
    }

    // ---- authoring ----

    pub fn create_course(&self, course: Course, actor: &str) -> AppResult<Versioned<Course>> {
        let report = course.validate();
        if !report.is_valid() {
            return Err(AppError::bad(report.violations.join("; ")));
        }
        let version = self.store.insert(&course, actor)?;
        Ok(Versioned { value: course, version })
    }

    pub fn get<T: grader_core::store::Entity>(&self, id: &str) -> AppResult<Versioned<T>> {
        Ok(self.store.require::<T>(id)?)
    }

    pub fn create_assignment(&self, assignment: Assignment, actor: &str) -> AppResult<Versioned<Assignment>> {
        self.store.require::<Course>(assignment.course_id.as_str())?;
        let report = assignment.policy.validate();
        if !report.is_valid() {
            return Err(AppError::bad(report.violations.join("; ")));
        }
        let version = self.store.insert(&assignment, actor)?;
        Ok(Versioned { value: assignment, version })
    }

    pub fn set_policy(
        &self,
        assignment: &AssignmentId,
        policy: ConfidencePolicy,
        expected: Option<u64>,
        actor: &str,
    ) -> AppResult<Versioned<Assignment>> {
        let current = self.store.require::<Assignment>(assignment.as_str())?;
        let report = policy.validate();
        if !report.is_valid() {
            return Err(AppError::bad(report.violations.join("; ")));
        }
        let mut updated = current.value;
        updated.policy = policy;
        let version = self.store.update(&updated, expected.unwrap_or(current.version), actor, "set-policy")?;
        Ok(Versioned { value: updated, version })
    }

    fn check_authored(question: &Question) -> AppResult<()> {
        let report = validate_question(question);
        let blocking: Vec<String> = report.violations.into_iter().filter(|v| v != RUBRIC_PENDING).collect();
        if !blocking.is_empty() {
            return Err(AppError::bad(blocking.join("; ")));
        }
        Ok(())
    }

    pub fn create_question(&self, question: Question, actor: &str) -> AppResult<Versioned<Question>> {
        self.store.require::<Assignment>(question.assignment_id.as_str())?;
        Self::check_authored(&question)?;
        if self
            .questions_of(&question.assignment_id)?
            .iter()
            .any(|q| q.ordinal == question.ordinal && q.id != question.id)
        {
            return Err(AppError::Conflict(format!(
                "assignment {} already has a question with ordinal {}",
                question.assignment_id, question.ordinal
            )));
        }
        let version = self.store.insert(&question, actor)?;
        Ok(Versioned { value: question, version })
    }

    /// Replace a question's rubric. Rubrics are frozen once grading has
    /// produced records, since stored scores are derived from them.
    pub fn set_rubric(
        &self,
        question_id: &QuestionId,
        rubric: Rubric,
        expected: Option<u64>,
        actor: &str,
    ) -> AppResult<Versioned<Question>> {
        let current = self.store.require::<Question>(question_id.as_str())?;
        self.ensure_idle(question_id)?;
        if &rubric.question_id != question_id {
            return Err(AppError::bad(format!("rubric is for question {}, not {question_id}", rubric.question_id)));
        }
        if !self.records_of(question_id)?.is_empty() {
            return Err(AppError::Conflict(format!("question {question_id} already has grade records")));
        }
        let mut updated = current.value;
        updated.rubric = Some(rubric);
        Self::check_authored(&updated)?;
        let version = self.store.update(&updated, expected.unwrap_or(current.version), actor, "set-rubric")?;
        Ok(Versioned { value: updated, version })
    }

    pub async fn propose_rubric(&self, question_id: &QuestionId, scheme: Scheme, budget: Points) -> AppResult<Rubric> {
        let question = self.store.require::<Question>(question_id.as_str())?.value;
        let request = rubric::build_rubric_proposal_request(&question, scheme, budget)?;
        Ok(self.gateway.propose_rubric(&request).await?)
    }

    /// Load a bundle of courses, assignments and questions. Entities that
    /// already exist with identical content are skipped.
    pub fn load_bundle(&self, bundle: Bundle, actor: &str) -> AppResult<usize> {
        fn fresh<T: grader_core::store::Entity + PartialEq>(app: &App, value: &T) -> AppResult<bool> {
            match app.store.get::<T>(&value.entity_id())? {
                Some(existing) if &existing.value == value => Ok(false),
                Some(_) => {
                    Err(AppError::Conflict(format!("{:?} {} differs from the stored one", T::KIND, value.entity_id())))
                }
                None => Ok(true),
            }
        }
        let mut created = 0;
        for c in bundle.courses {
            if fresh(self, &c)? {
                self.create_course(c, actor)?;
                created += 1;
            }
        }
        for a in bundle.assignments {
            if fresh(self, &a)? {
                self.create_assignment(a, actor)?;
                created += 1;
            }
        }
        for q in bundle.questions {
            if fresh(self, &q)? {
                self.create_question(q, actor)?;
                created += 1;
            }
        }
        Ok(created)
    }

    // ---- ingestion ----

    pub async fn ingest(&self, manifest: UploadManifest, actor: &str) -> AppResult<IngestReport> {
        let _flow = self.flow.lock().await;
        let assignment = self.store.require::<Assignment>(manifest.assignment_id.as_str())?.value;
        let course = self.course_of(&assignment)?;
        let questions = self.questions_of(&assignment.id)?;
        let mut fresh = ingestion::split_submissions(&manifest, &questions, &course.roster)?;
        let existing = self.submissions_of(&assignment.id)?;
        let existing_ids: HashSet<&SubmissionId> = existing.iter().map(|s| &s.value.id).collect();
        let unchanged: Vec<SubmissionId> =
            fresh.iter().filter(|s| existing_ids.contains(&s.id)).map(|s| s.id.clone()).collect();
        fresh.retain(|s| !existing_ids.contains(&s.id));

        let mut reservations = MatchReservations::with_bound(existing.iter().filter_map(|s| {
            let sub = &s.value;
            let student = sub.student.as_ref().filter(|_| sub.match_status.is_bound())?;
            Some((sub.assignment_id.clone(), student.id.clone(), sub.id.clone()))
        }));
        for sub in fresh.iter().filter(|s| s.match_status == MatchStatus::Individual) {
            let student = sub.student.as_ref().expect("individual uploads carry a student");
            if !reservations.reserve(&sub.assignment_id, &student.id, &sub.id) {
                return Err(AppError::Conflict(format!(
                    "student {} already has a submission for assignment {}",
                    student.id, sub.assignment_id
                )));
            }
        }
        let matches = if fresh.iter().any(|s| !s.match_status.is_bound()) {
            ingestion::match_all(
                &self.gateway,
                &mut fresh,
                &course.roster,
                &self.match_config,
                &mut reservations,
                self.parallelism,
            )
            .await?
        } else {
            Vec::new()
        };

        let mut writes = Vec::new();
        for sub in &fresh {
            writes.push(write(sub, Expect::Absent, "ingest")?);
        }
        for m in &matches {
            writes.push(PendingWrite::raw(
                EntityKind::MatchResult,
                m.submission_id.as_str(),
                grader_core::canonical::to_value(m)?,
                Expect::Any,
                "name-match",
            ));
        }
        self.store.commit(writes, actor)?;
        Ok(IngestReport { submissions: fresh, matches, unchanged })
    }

    pub fn match_result(&self, submission: &SubmissionId) -> AppResult<Option<MatchResult>> {
        self.store
            .get_raw(EntityKind::MatchResult, submission.as_str())
            .map(|r| serde_json::from_value(r.payload).map_err(AppError::from))
            .transpose()
    }

    pub fn list_submissions(&self, assignment: &AssignmentId) -> AppResult<Vec<Submission>> {
        Ok(self.submissions_of(assignment)?.into_iter().map(|s| s.value).collect())
    }

    /// Bind a submission to a roster student by hand. Grade records already
    /// produced for it pick up the student id.
    pub async fn resolve_match(
        &self,
        submission: &SubmissionId,
        student: &StudentId,
        actor: &str,
    ) -> AppResult<Versioned<Submission>> {
        let _flow = self.flow.lock().await;
        let current = self.store.require::<Submission>(submission.as_str())?;
        let assignment = self.store.require::<Assignment>(current.value.assignment_id.as_str())?.value;
        let course = self.course_of(&assignment)?;
        let others = self.submissions_of(&assignment.id)?;
        if let Some(holder) = others.iter().find(|s| {
            s.value.id != *submission
                && s.value.match_status.is_bound()
                && s.value.student.as_ref().is_some_and(|st| &st.id == student)
        }) {
            return Err(AppError::Conflict(format!(
                "student {student} is already bound to submission {}",
                holder.value.id
            )));
        }
        let bound = ingestion::resolve_match(&current.value, student, &course.roster)?;
        let mut writes = vec![write(&bound, Expect::Version(current.version), "resolve-match")?];
        for r in self.store.list_by::<GradeRecord>("submission_id", submission.as_str())? {
            {
                self.ensure_idle(&r.value.question_id)?;
                let mut rec = r.value;
                rec.student_id = Some(student.clone());
                writes.push(write(&rec, Expect::Version(r.version), "resolve-match")?);
            }
        }
        let versions = self.store.commit(writes, actor)?;
        Ok(Versioned { value: bound, version: versions[0] })
    }

    // ---- grading ----

    /// Start a grading run for a question. The first run grades every
    /// submission; later runs regrade on top of the latest completed run
    /// with the active wisdoms, leaving reviewed records untouched.
    pub async fn start_run(
        self: &Arc<Self>,
        question_id: &QuestionId,
        wait: bool,
        actor: &str,
    ) -> AppResult<GradingRun> {
        let question = self.store.require::<Question>(question_id.as_str())?.value;
        let report = validate_question(&question);
        if !report.is_valid() {
            return Err(AppError::bad(report.violations.join("; ")));
        }
        let slot = self.claim(question_id)?;
        let assignment = self.store.require::<Assignment>(question.assignment_id.as_str())?.value;
        let submissions = self.list_submissions(&assignment.id)?;
        let prior = self.latest_completed_run(question_id)?;
        let previous: Vec<GradeRecord> = self.records_of(question_id)?.into_iter().map(|r| r.value).collect();
        let wisdoms = self.active_wisdoms(question_id)?;
        let run_id =
            RunId::new(ids::derived(&["run", question_id.as_str(), &self.runs_of(question_id)?.len().to_string()]));
        let progress = Arc::new(RunProgress::new(submissions.len()));
        let pending = GradingRun {
            id: run_id.clone(),
            question_id: question_id.clone(),
            wisdom_snapshot: wisdoms.clone(),
            counters: progress.snapshot(),
            state: RunState::Running,
            previous_run_id: prior.as_ref().map(|p| p.id.clone()),
            started_at: Some(self.store.now()),
            completed_at: None,
        };
        self.store.insert(&pending, actor)?;
        lock(&self.progress).insert(run_id.clone(), progress.clone());

        let app = self.clone();
        let actor = actor.to_string();
        let handle_id = run_id.clone();
        let task = tokio::spawn(async move {
            let _slot = slot;
            let outcome = match &prior {
                Some(prior) => {
                    app.pipeline
                        .regrade_with_wisdoms(
                            run_id.clone(),
                            prior,
                            &question,
                            &submissions,
                            &previous,
                            &assignment.policy,
                            &wisdoms,
                            Some(progress.clone()),
                        )
                        .await
                }
                None => {
                    app.pipeline
                        .run_grading(
                            run_id.clone(),
                            &question,
                            &submissions,
                            &assignment.policy,
                            &wisdoms,
                            Some(progress.clone()),
                        )
                        .await
                }
            };
            let result = app.finish_run(pending, outcome, &actor);
            lock(&app.progress).remove(&run_id);
            result
        });
        if wait {
            task.await.map_err(|e| AppError::Internal(format!("grading task: {e}")))?
        } else {
            self.get_run(&handle_id)
        }
    }

    fn finish_run(
        &self,
        pending: GradingRun,
        outcome: Result<grader_core::pipeline::RunOutcome, grader_core::pipeline::PipelineError>,
        actor: &str,
    ) -> AppResult<GradingRun> {
        let current = self.store.require::<GradingRun>(pending.id.as_str())?;
        match outcome {
            Ok(outcome) => {
                let mut run = outcome.run;
                run.previous_run_id = pending.previous_run_id;
                run.started_at = pending.started_at;
                run.completed_at = Some(self.store.now());
                let mut writes = vec![write(&run, Expect::Version(current.version), "run-completed")?];
                for record in &outcome.records {
                    writes.push(write(record, Expect::Any, "graded")?);
                }
                self.store.commit(writes, actor)?;
                Ok(run)
            }
            Err(err) => {
                let mut run = pending;
                run.state = RunState::Failed;
                run.completed_at = Some(self.store.now());
                self.store.update(&run, current.version, actor, "run-failed")?;
                tracing::warn!(run = %run.id, %err, "grading run failed");
                Err(err.into())
            }
        }
    }

    /// Run with live counters while it is in flight.
    pub fn get_run(&self, run_id: &RunId) -> AppResult<GradingRun> {
        let mut run = self.store.require::<GradingRun>(run_id.as_str())?.value;
        if run.state == RunState::Running {
            if let Some(progress) = lock(&self.progress).get(run_id) {
                run.counters = progress.snapshot();
            }
        }
        Ok(run)
    }

    pub fn list_records(&self, question: &QuestionId) -> AppResult<Vec<GradeRecord>> {
        Ok(self.records_of(question)?.into_iter().map(|r| r.value).collect())
    }

    pub fn list_runs(&self, question: &QuestionId) -> AppResult<Vec<GradingRun>> {
        self.runs_of(question)
    }

    // ---- review ----

    pub fn review_queue(&self, assignment_id: &AssignmentId, seed: u64, actor: &str) -> AppResult<ReviewQueue> {
        let assignment = self.store.require::<Assignment>(assignment_id.as_str())?.value;
        let questions = self.questions_of(assignment_id)?;
        let mut any_completed = false;
        for q in &questions {
            if lock(&self.active).contains(&q.id) {
                return Err(review::ReviewError::RunNotCompleted.into());
            }
            any_completed |= self.latest_completed_run(&q.id)?.is_some();
        }
        if !any_completed {
            return Err(review::ReviewError::RunNotCompleted.into());
        }
        let records = self.records_of_assignment(assignment_id)?;
        let queue = review::build_review_queue(&records, &assignment.policy, seed);
        self.store.commit(
            vec![PendingWrite::raw(
                EntityKind::ReviewQueue,
                assignment_id.as_str(),
                grader_core::canonical::to_value(&queue)?,
                Expect::Any,
                "build-queue",
            )],
            actor,
        )?;
        Ok(queue)
    }

    fn stored_queue(&self, assignment: &AssignmentId) -> AppResult<Option<ReviewQueue>> {
        self.store
            .get_raw(EntityKind::ReviewQueue, assignment.as_str())
            .map(|r| serde_json::from_value(r.payload).map_err(AppError::from))
            .transpose()
    }

    fn record_context(&self, record_id: &GradeRecordId) -> AppResult<(Versioned<GradeRecord>, Question, Assignment)> {
        let record = self
            .store
            .get::<GradeRecord>(record_id.as_str())?
            .ok_or_else(|| AppError::from(review::ReviewError::UnknownRecord(record_id.clone())))?;
        let question = self.store.require::<Question>(record.value.question_id.as_str())?.value;
        let assignment = self.store.require::<Assignment>(question.assignment_id.as_str())?.value;
        Ok((record, question, assignment))
    }

    pub fn get_record(&self, record_id: &GradeRecordId) -> AppResult<Versioned<GradeRecord>> {
        Ok(self.record_context(record_id)?.0)
    }

    pub fn submit_review(
        &self,
        record_id: &GradeRecordId,
        decision: &ReviewDecision,
        expected_version: u64,
        reviewer: &str,
    ) -> AppResult<Versioned<GradeRecord>> {
        let (record, question, _) = self.record_context(record_id)?;
        self.ensure_idle(&question.id)?;
        if record.version != expected_version {
            return Err(AppError::Conflict(format!(
                "grade record {record_id}: expected version {expected_version}, found {}",
                record.version
            )));
        }
        let updated = review::apply_review(&record.value, &question, decision, reviewer)?;
        let action = match decision {
            ReviewDecision::Confirm => "review:confirm",
            ReviewDecision::Override { .. } => "review:override",
        };
        let version = self.store.update(&updated, expected_version, reviewer, action)?;
        Ok(Versioned { value: updated, version })
    }

    pub fn verify_transcription(
        &self,
        record_id: &GradeRecordId,
        text: Option<&str>,
        expected_version: u64,
        reviewer: &str,
    ) -> AppResult<Versioned<GradeRecord>> {
        let (record, question, _) = self.record_context(record_id)?;
        self.ensure_idle(&question.id)?;
        if record.value.transcription.is_none() {
            return Err(AppError::bad(format!("grade record {record_id} has no transcription")));
        }
        let updated = review::verify_transcription(&record.value, text);
        let version = self.store.update(&updated, expected_version, reviewer, "verify-transcription")?;
        Ok(Versioned { value: updated, version })
    }

    pub fn review_view(&self, record_id: &GradeRecordId) -> AppResult<ReviewView> {
        let (record, _, assignment) = self.record_context(record_id)?;
        let pages = self
            .store
            .get::<Submission>(record.value.submission_id.as_str())?
            .map(|s| s.value.pages)
            .unwrap_or_default();
        Ok(review::render_view(&record.value, &assignment.policy, &pages))
    }

    pub async fn dispatch_feedback(
        &self,
        assignment_id: &AssignmentId,
        style_prompt: Option<&str>,
        actor: &str,
    ) -> AppResult<FeedbackReport> {
        let _flow = self.flow.lock().await;
        let questions = self.questions_of(assignment_id)?;
        for q in &questions {
            self.ensure_idle(&q.id)?;
        }
        let by_id: HashMap<QuestionId, Question> = questions.into_iter().map(|q| (q.id.clone(), q)).collect();
        let mut stored: Vec<Versioned<GradeRecord>> = Vec::new();
        for q in by_id.keys() {
            stored.extend(self.records_of(q)?);
        }
        stored.sort_by(|a, b| a.value.id.cmp(&b.value.id));
        let versions: HashMap<GradeRecordId, u64> = stored.iter().map(|r| (r.value.id.clone(), r.version)).collect();
        let mut records: Vec<GradeRecord> = stored.into_iter().map(|r| r.value).collect();
        let queue = self.stored_queue(assignment_id)?;
        let report =
            review::dispatch_feedback(&self.gateway, &mut records, &by_id, queue.as_ref(), style_prompt).await?;
        let mut writes = Vec::new();
        for r in records.iter().filter(|r| r.feedback.is_some()) {
            writes.push(write(r, Expect::Version(versions[&r.id]), "feedback")?);
        }
        self.store.commit(writes, actor)?;
        Ok(report)
    }

    // ---- calibration ----

    pub async fn open_calibration(
        &self,
        question_id: &QuestionId,
        size: usize,
        strategy: SamplingStrategy,
        seed: u64,
        actor: &str,
    ) -> AppResult<Versioned<CalibrationSession>> {
        let _flow = self.flow.lock().await;
        let question = self.store.require::<Question>(question_id.as_str())?.value;
        self.ensure_idle(question_id)?;
        let run = self.latest_completed_run(question_id)?;
        let records = self.list_records(question_id)?;
        let existing = self.store.list_by::<CalibrationSession>("question_id", question_id.as_str())?.len();
        let id = SessionId::new(ids::derived(&["session", question_id.as_str(), &existing.to_string()]));
        let session = calibration::open_session(id, &question, run.as_ref(), &records, size, strategy, seed)?;
        let version = self.store.insert(&session, actor)?;
        Ok(Versioned { value: session, version })
    }

    pub async fn record_correction(
        &self,
        session_id: &SessionId,
        record_id: &GradeRecordId,
        selection: BTreeSet<ItemId>,
        reviewer: &str,
    ) -> AppResult<CorrectionOutcome> {
        let _flow = self.flow.lock().await;
        let current = self.store.require::<CalibrationSession>(session_id.as_str())?;
        let (record, question, _) = self.record_context(record_id)?;
        self.ensure_idle(&question.id)?;
        let mut session = current.value;
        let updated = calibration::record_correction(&mut session, &record.value, &question, selection, reviewer)?;
        self.store.commit(
            vec![
                write(&session, Expect::Version(current.version), "calibration:correction")?,
                write(&updated, Expect::Version(record.version), "review:calibration-correction")?,
            ],
            reviewer,
        )?;
        Ok(CorrectionOutcome { session, record: updated })
    }

    pub async fn propose_wisdoms(&self, session_id: &SessionId, actor: &str) -> AppResult<Vec<GradingWisdom>> {
        let _flow = self.flow.lock().await;
        let current = self.store.require::<CalibrationSession>(session_id.as_str())?;
        let question = self.store.require::<Question>(current.value.question_id.as_str())?.value;
        let mut session = current.value;
        let drafts = calibration::propose_wisdoms(&mut session, &self.gateway, &question).await?;
        self.store.update(&session, current.version, actor, "calibration:propose")?;
        Ok(drafts)
    }

    pub async fn edit_wisdom(
        &self,
        session_id: &SessionId,
        wisdom_id: &WisdomId,
        text: &str,
        actor: &str,
    ) -> AppResult<GradingWisdom> {
        let _flow = self.flow.lock().await;
        let current = self.store.require::<CalibrationSession>(session_id.as_str())?;
        let mut session = current.value;
        let edited = calibration::edit_wisdom(&mut session, wisdom_id, text)?;
        self.store.update(&session, current.version, actor, "calibration:edit-wisdom")?;
        Ok(edited)
    }

    pub async fn apply_calibration(
        self: &Arc<Self>,
        session_id: &SessionId,
        actor: &str,
    ) -> AppResult<CalibrationApplied> {
        let _flow = self.flow.lock().await;
        let current = self.store.require::<CalibrationSession>(session_id.as_str())?;
        let question_id = current.value.question_id.clone();
        let question = self.store.require::<Question>(question_id.as_str())?;
        let _slot = self.claim(&question_id)?;
        let assignment = self.store.require::<Assignment>(question.value.assignment_id.as_str())?.value;
        let prior = self
            .latest_completed_run(&question_id)?
            .ok_or_else(|| AppError::from(calibration::CalibrationError::NoCompletedRun(question_id.clone())))?;
        let submissions = self.list_submissions(&assignment.id)?;
        let records = self.list_records(&question_id)?;
        let existing = self.active_wisdoms(&question_id)?;
        let run_id =
            RunId::new(ids::derived(&["run", question_id.as_str(), &self.runs_of(&question_id)?.len().to_string()]));
        let mut session = current.value;
        let started_at = Some(self.store.now());
        let outcome = calibration::apply_and_regrade(
            &mut session,
            ApplyContext {
                pipeline: &self.pipeline,
                question: &question.value,
                prior_run: &prior,
                submissions: &submissions,
                records: &records,
                policy: &assignment.policy,
                existing_wisdoms: &existing,
                run_id,
                progress: None,
            },
        )
        .await?;
        let mut run = outcome.regrade.run;
        run.started_at = started_at;
        run.completed_at = Some(self.store.now());
        let mut writes = vec![
            write(&session, Expect::Version(current.version), "calibration:apply")?,
            write(&outcome.question, Expect::Version(question.version), "calibration:attach-wisdoms")?,
            write(&run, Expect::Absent, "run-completed")?,
        ];
        for w in &outcome.wisdoms {
            writes.push(write(w, Expect::Absent, "calibration:activate-wisdom")?);
        }
        for r in &outcome.regrade.records {
            writes.push(write(r, Expect::Any, "graded")?);
        }
        self.store.commit(writes, actor)?;
        Ok(CalibrationApplied { report: outcome.report, wisdoms: outcome.wisdoms, run })
    }

    pub fn list_wisdoms(&self, question: &QuestionId) -> AppResult<Vec<GradingWisdom>> {
        Ok(self
            .store
            .list_by::<GradingWisdom>("question_id", question.as_str())?
            .into_iter()
            .map(|w| w.value)
            .collect())
    }

    // ---- analytics ----

    pub fn workload(&self, assignment_id: &AssignmentId) -> AppResult<(u64, u64, WorkloadMeasure)> {
        let assignment = self.store.require::<Assignment>(assignment_id.as_str())?.value;
        let students = self.submissions_of(assignment_id)?.len() as u64;
        let questions = self.questions_of(assignment_id)?.len() as u64;
        let records = self.records_of_assignment(assignment_id)?;
        let c = analytics::measured_correct_autograded(&records, &assignment.policy);
        let responses = records.len() as u64;
        Ok((
            students,
            questions,
            WorkloadMeasure {
                responses,
                correct_autograded: c,
                review_workload: analytics::review_workload(responses, c),
            },
        ))
    }

    pub fn time_savings(&self, query: &TimeSavingsQuery) -> AppResult<TimeSavingsReport> {
        let (mut students, mut questions, mut c, mut measured) = (0, 0, 0, None);
        if let Some(assignment) = &query.assignment {
            let (i, j, m) = self.workload(assignment)?;
            (students, questions, c) = (i, j, m.correct_autograded);
            measured = Some(m);
        }
        let input = TimeSavingsInput {
            t_avg: query.t_avg,
            students: query.students.unwrap_or(students),
            questions: query.questions.unwrap_or(questions),
            correct_autograded: query.c.unwrap_or(c),
        };
        Ok(TimeSavingsReport { result: analytics::time_savings(&input)?, input, measured })
    }

    fn subject_index(&self) -> AppResult<HashMap<QuestionId, (String, AssignmentId)>> {
        let courses: HashMap<_, _> =
            self.store.list::<Course>()?.into_iter().map(|c| (c.value.id.clone(), c.value)).collect();
        let assignments: HashMap<_, _> =
            self.store.list::<Assignment>()?.into_iter().map(|a| (a.value.id.clone(), a.value)).collect();
        let mut out = HashMap::new();
        for q in self.store.list::<Question>()? {
            let q = q.value;
            let subject = assignments
                .get(&q.assignment_id)
                .and_then(|a| courses.get(&a.course_id))
                .and_then(|c| c.subject.clone())
                .unwrap_or_else(|| "unspecified".into());
            out.insert(q.id, (subject, q.assignment_id));
        }
        Ok(out)
    }

    pub fn accuracy(&self, assignment: Option<&AssignmentId>) -> AppResult<AccuracyReport> {
        let index = self.subject_index()?;
        let records: Vec<GradeRecord> = self.store.list::<GradeRecord>()?.into_iter().map(|r| r.value).collect();
        let tagged = records.iter().filter_map(|r| {
            let (subject, a) = index.get(&r.question_id)?;
            assignment.is_none_or(|want| want == a).then_some((subject.as_str(), r))
        });
        Ok(analytics::accuracy_report(tagged))
    }

    pub fn usage(&self, window: Option<(NaiveDate, NaiveDate)>) -> AppResult<UsageReport> {
        let index = self.subject_index()?;
        let events: Vec<UsageEvent> = self
            .store
            .list::<GradingRun>()?
            .into_iter()
            .map(|r| r.value)
            .filter(|r| r.state == RunState::Completed)
            .filter_map(|r| {
                let day = r.completed_at?.date_naive();
                let subject = index.get(&r.question_id).map(|(s, _)| s.clone())?;
                Some(UsageEvent { day, subject, graded: r.counters.done as u64 })
            })
            .collect();
        Ok(analytics::usage_counters(&events, window))
    }

    // ---- export ----

    pub fn export(&self, assignment_id: &AssignmentId) -> AppResult<GradeExport> {
        self.store.require::<Assignment>(assignment_id.as_str())?;
        let questions = self.questions_of(assignment_id)?;
        let records = self.records_of_assignment(assignment_id)?;
        Ok(export::build(assignment_id, &questions, &records))
    }
}
