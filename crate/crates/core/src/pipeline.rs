//! Grading runs: transcription, AI grading with wisdoms, scoring and
//! summaries for every submission of one question.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::calibration::GradingWisdom;
use crate::domain::{validate_question, ConfidenceTier, Question, QuestionFormat, Submission, TranscriptionConfidence};
use crate::exact::Points;
use crate::ids::{self, GradeRecordId, ItemId, QuestionId, RunId, StudentId, SubmissionId};
use crate::mc;
use crate::provider::{Gateway, ImageRegion, ProviderGradeResult, ProviderTranscription};
use crate::review::ConfidencePolicy;
use crate::rubric::{Rubric, RubricError, RubricSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeStatus {
    AiProposed,
    NeedsReview,
    Reviewed,
    ManualQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ai,
    Human,
    AiThenHuman,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Ai => "ai",
            Provenance::Human => "human",
            Provenance::AiThenHuman => "ai_then_human",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptionRecord {
    pub text: String,
    pub confidence: TranscriptionConfidence,
    #[serde(default)]
    pub verified_by_human: bool,
}

impl From<ProviderTranscription> for TranscriptionRecord {
    fn from(t: ProviderTranscription) -> Self {
        TranscriptionRecord { text: t.text, confidence: t.confidence, verified_by_human: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub id: GradeRecordId,
    pub run_id: RunId,
    pub submission_id: SubmissionId,
    pub question_id: QuestionId,
    /// Student id once matched, otherwise the submission id.
    pub respondent: String,
    #[serde(default)]
    pub student_id: Option<StudentId>,
    #[serde(default)]
    pub transcription: Option<TranscriptionRecord>,
    pub selection: RubricSelection,
    /// Selection originally proposed by the AI, kept after human overrides.
    #[serde(default)]
    pub ai_selection: Option<BTreeSet<ItemId>>,
    /// Chosen options for multiple-choice questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_response: Option<BTreeSet<String>>,
    /// Response left blank; scored by the rubric's blank rule.
    #[serde(default)]
    pub blank: bool,
    /// `None` while a manual-queue record awaits its human grade.
    pub score: Option<Points>,
    pub confidence: ConfidenceTier,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub comments: Vec<String>,
    #[serde(default)]
    pub feedback: Option<String>,
    pub status: GradeStatus,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default)]
    pub reviewed_by: Option<String>,
}

impl GradeRecord {
    /// Reviewed, or auto-accepted without review.
    pub fn is_finalized(&self) -> bool {
        matches!(self.status, GradeStatus::Reviewed | GradeStatus::AiProposed)
    }

    pub fn record_id(question_id: &QuestionId, submission_id: &SubmissionId) -> GradeRecordId {
        GradeRecordId::new(ids::derived(&["grade-record", question_id.as_str(), submission_id.as_str()]))
    }
}

/// The score a record must carry given its question and content.
pub fn expected_score(question: &Question, record: &GradeRecord) -> Result<Option<Points>, RubricError> {
    if let Some(chosen) = &record.mc_response {
        return Ok(mc::grade_question(question, chosen).ok());
    }
    if record.status == GradeStatus::ManualQueue && record.provenance == Provenance::Ai {
        return Ok(None);
    }
    match &question.rubric {
        Some(rubric) if record.blank => Ok(Some(rubric.blank_score())),
        Some(rubric) => rubric.score(&record.selection.selected_item_ids).map(Some),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub total: usize,
    pub pending: usize,
    pub done: usize,
    pub failed: usize,
}

/// Live progress of a run; snapshots are always internally consistent.
#[derive(Debug, Default)]
pub struct RunProgress {
    counters: Mutex<RunCounters>,
}

impl RunProgress {
    pub fn new(total: usize) -> Self {
        RunProgress { counters: Mutex::new(RunCounters { total, pending: total, done: 0, failed: 0 }) }
    }

    pub fn snapshot(&self) -> RunCounters {
        *self.counters.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn finish_one(&self, failed: bool) {
        let mut c = self.counters.lock().unwrap_or_else(|e| e.into_inner());
        c.pending -= 1;
        if failed {
            c.failed += 1;
        } else {
            c.done += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingRun {
    pub id: RunId,
    pub question_id: QuestionId,
    pub wisdom_snapshot: Vec<GradingWisdom>,
    #[serde(flatten)]
    pub counters: RunCounters,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_run_id: Option<RunId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: GradingRun,
    pub records: Vec<GradeRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error("a grading run is already active for question {0}")]
    RunAlreadyActive(QuestionId),
    #[error("question {0} is not ready for grading: {1}")]
    InvalidQuestion(QuestionId, String),
    #[error("run {0} has not completed")]
    PriorRunNotCompleted(RunId),
    #[error("run {0} belongs to a different question")]
    QuestionMismatch(RunId),
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    /// Responses processed concurrently within one run.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { parallelism: 8 }
    }
}

pub struct GradingPipeline {
    gateway: Arc<Gateway>,
    config: PipelineConfig,
    active: Mutex<HashSet<QuestionId>>,
}

struct ActiveGuard<'a> {
    set: &'a Mutex<HashSet<QuestionId>>,
    question: QuestionId,
}

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.question);
    }
}

/// What to do with one submission during a run.
enum Job<'a> {
    Fresh(&'a Submission),
    Regrade(&'a Submission, &'a GradeRecord),
    Keep(&'a GradeRecord),
}

impl GradingPipeline {
    pub fn new(gateway: Arc<Gateway>, config: PipelineConfig) -> Self {
        GradingPipeline { gateway, config, active: Mutex::new(HashSet::new()) }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn is_active(&self, question: &QuestionId) -> bool {
        self.active.lock().unwrap_or_else(|e| e.into_inner()).contains(question)
    }

    fn activate(&self, question: &QuestionId) -> Result<ActiveGuard<'_>, PipelineError> {
        let mut set = self.active.lock().unwrap_or_else(|e| e.into_inner());
        if !set.insert(question.clone()) {
            return Err(PipelineError::RunAlreadyActive(question.clone()));
        }
        Ok(ActiveGuard { set: &self.active, question: question.clone() })
    }

    fn check_question(question: &Question) -> Result<(), PipelineError> {
        let report = validate_question(question);
        if !report.is_valid() {
            return Err(PipelineError::InvalidQuestion(question.id.clone(), report.violations.join("; ")));
        }
        Ok(())
    }

    /// Grade every submission for `question` with a fixed wisdom snapshot.
    pub async fn run_grading(
        &self,
        run_id: RunId,
        question: &Question,
        submissions: &[Submission],
        policy: &ConfidencePolicy,
        wisdoms: &[GradingWisdom],
        progress: Option<Arc<RunProgress>>,
    ) -> Result<RunOutcome, PipelineError> {
        Self::check_question(question)?;
        let jobs: Vec<Job<'_>> = submissions.iter().map(Job::Fresh).collect();
        self.execute(run_id, None, question, jobs, policy, wisdoms, progress).await
    }

    /// Re-run a completed run with a new wisdom snapshot. Reviewed records are
    /// carried over untouched; stored transcriptions are reused.
    #[allow(clippy::too_many_arguments)]
    pub async fn regrade_with_wisdoms(
        &self,
        run_id: RunId,
        prior: &GradingRun,
        question: &Question,
        submissions: &[Submission],
        previous: &[GradeRecord],
        policy: &ConfidencePolicy,
        wisdoms: &[GradingWisdom],
        progress: Option<Arc<RunProgress>>,
    ) -> Result<RunOutcome, PipelineError> {
        if prior.state != RunState::Completed {
            return Err(PipelineError::PriorRunNotCompleted(prior.id.clone()));
        }
        if prior.question_id != question.id {
            return Err(PipelineError::QuestionMismatch(prior.id.clone()));
        }
        Self::check_question(question)?;
        let by_submission: HashMap<&SubmissionId, &GradeRecord> =
            previous.iter().map(|r| (&r.submission_id, r)).collect();
        let jobs = submissions
            .iter()
            .map(|s| match by_submission.get(&s.id) {
                Some(r) if r.status == GradeStatus::Reviewed => Job::Keep(r),
                Some(r) => Job::Regrade(s, r),
                None => Job::Fresh(s),
            })
            .collect();
        self.execute(run_id, Some(prior.id.clone()), question, jobs, policy, wisdoms, progress).await
    }

    #[allow(clippy::too_many_arguments)]
    async fn execute(
        &self,
        run_id: RunId,
        previous_run_id: Option<RunId>,
        question: &Question,
        jobs: Vec<Job<'_>>,
        policy: &ConfidencePolicy,
        wisdoms: &[GradingWisdom],
        progress: Option<Arc<RunProgress>>,
    ) -> Result<RunOutcome, PipelineError> {
        let _guard = self.activate(&question.id)?;
        let snapshot: Vec<GradingWisdom> = wisdoms.iter().filter(|w| w.active).cloned().collect();
        let progress = progress.unwrap_or_else(|| Arc::new(RunProgress::new(jobs.len())));
        // Futures are built in a plain loop: a borrowing `map` closure here
        // defeats `Send` inference for callers that spawn the run.
        let mut pending = Vec::with_capacity(jobs.len());
        for job in jobs {
            pending.push(self.run_job(job, &run_id, question, policy, &snapshot, progress.clone()));
        }
        let records: Vec<GradeRecord> = stream::iter(pending).buffered(self.config.parallelism.max(1)).collect().await;
        let counters = progress.snapshot();
        Ok(RunOutcome {
            run: GradingRun {
                id: run_id,
                question_id: question.id.clone(),
                wisdom_snapshot: snapshot,
                counters,
                state: RunState::Completed,
                previous_run_id,
                started_at: None,
                completed_at: None,
            },
            records,
        })
    }

    async fn run_job(
        &self,
        job: Job<'_>,
        run_id: &RunId,
        question: &Question,
        policy: &ConfidencePolicy,
        wisdoms: &[GradingWisdom],
        progress: Arc<RunProgress>,
    ) -> GradeRecord {
        let record = match job {
            Job::Keep(r) => r.clone(),
            Job::Fresh(s) => self.grade_one(run_id, question, s, None, policy, wisdoms).await,
            Job::Regrade(s, prev) => self.grade_one(run_id, question, s, Some(prev), policy, wisdoms).await,
        };
        progress.finish_one(record.failure.is_some());
        record
    }

    async fn grade_one(
        &self,
        run_id: &RunId,
        question: &Question,
        submission: &Submission,
        previous: Option<&GradeRecord>,
        policy: &ConfidencePolicy,
        wisdoms: &[GradingWisdom],
    ) -> GradeRecord {
        let mut record = GradeRecord {
            id: GradeRecord::record_id(&question.id, &submission.id),
            run_id: run_id.clone(),
            submission_id: submission.id.clone(),
            question_id: question.id.clone(),
            respondent: submission.respondent_key().to_string(),
            student_id: submission.student.as_ref().map(|s| s.id.clone()),
            transcription: None,
            selection: RubricSelection {
                grade_record_id: GradeRecord::record_id(&question.id, &submission.id),
                selected_item_ids: BTreeSet::new(),
            },
            ai_selection: None,
            mc_response: None,
            blank: false,
            score: None,
            confidence: ConfidenceTier::Low,
            rationale: String::new(),
            summary: String::new(),
            comments: previous.map(|p| p.comments.clone()).unwrap_or_default(),
            feedback: None,
            status: GradeStatus::ManualQueue,
            provenance: Provenance::Ai,
            failure: None,
            reviewed_by: None,
        };

        match question.format {
            QuestionFormat::Ssmc | QuestionFormat::Msmc => {
                let chosen = submission.mc_responses.get(&question.id).cloned().unwrap_or_default();
                match mc::grade_question(question, &chosen) {
                    Ok(score) => {
                        record.score = Some(score);
                        record.mc_response = Some(chosen);
                        record.confidence = ConfidenceTier::High;
                        record.status = policy.initial_status(ConfidenceTier::High, TranscriptionConfidence::High);
                    }
                    Err(e) => record.failure = Some(e.to_string()),
                }
                return record;
            }
            QuestionFormat::Drawing => {
                record.comments.push("drawing responses are graded manually".into());
                return record;
            }
            QuestionFormat::TextCode => {}
        }

        let Some(rubric) = question.rubric.as_ref() else {
            record.failure = Some("question has no rubric".into());
            return record;
        };

        let reusable = previous.and_then(|p| p.transcription.clone());
        let transcription = match reusable {
            Some(t) => t,
            None => match self.transcribe(question, submission).await {
                Ok(t) => t.into(),
                Err(failure) => {
                    record.failure = Some(failure);
                    return record;
                }
            },
        };
        record.transcription = Some(transcription.clone());

        if transcription.text.trim().is_empty() {
            record.blank = true;
            record.ai_selection = Some(BTreeSet::new());
            record.confidence = match transcription.confidence {
                TranscriptionConfidence::High => ConfidenceTier::High,
                TranscriptionConfidence::Low => ConfidenceTier::Low,
            };
            record.score = Some(rubric.blank_score());
            record.summary = "No response submitted.".into();
            record.status = policy.initial_status(record.confidence, transcription.confidence);
            return record;
        }

        let graded = self.gateway.grade(&record.respondent, &transcription.text, question, rubric, wisdoms).await;
        let result = match graded {
            Ok(r) => r,
            Err(e) => {
                record.failure = Some(e.to_string());
                return record;
            }
        };
        record.selection.selected_item_ids = result.selected_item_ids.clone();
        record.ai_selection = Some(result.selected_item_ids.clone());
        record.confidence = result.confidence;
        record.rationale = result.rationale.clone();
        record.score = match rubric.score(&result.selected_item_ids) {
            Ok(s) => Some(s),
            Err(e) => {
                record.failure = Some(e.to_string());
                record.selection.selected_item_ids.clear();
                record.ai_selection = None;
                return record;
            }
        };
        record.status = policy.initial_status(result.confidence, transcription.confidence);
        record.summary = self
            .summarize(question, &record.respondent, &result, &transcription.text, rubric)
            .await
            .unwrap_or_default();
        record
    }

    async fn transcribe(&self, question: &Question, submission: &Submission) -> Result<ProviderTranscription, String> {
        let region = submission
            .region_map
            .get(&question.id)
            .ok_or_else(|| format!("submission {} has no region for {}", submission.id, question.id))?;
        let image = submission
            .pages
            .get(region.page)
            .ok_or_else(|| format!("region page {} missing from submission {}", region.page, submission.id))?;
        let image_region = ImageRegion {
            image: image.clone(),
            rect: region.rect,
            key: format!("{}/{}", submission.respondent_key(), question.id),
        };
        self.gateway.transcribe(&image_region, Some(question)).await.map_err(|e| e.to_string())
    }

    async fn summarize(
        &self,
        question: &Question,
        respondent: &str,
        result: &ProviderGradeResult,
        transcription: &str,
        rubric: &Rubric,
    ) -> Option<String> {
        match self.gateway.summarize(&question.id, respondent, result, transcription, rubric).await {
            Ok(s) => Some(s),
            Err(err) => {
                tracing::warn!(question = %question.id, respondent, %err, "summary failed");
                None
            }
        }
    }

    /// Fill in missing summaries for every record outside the manual queue.
    pub async fn generate_summaries(&self, question: &Question, records: &mut [GradeRecord]) -> SummaryReport {
        let mut report = SummaryReport::default();
        let Some(rubric) = question.rubric.as_ref() else {
            return report;
        };
        for record in records.iter_mut() {
            if record.status == GradeStatus::ManualQueue {
                report.skipped += 1;
                continue;
            }
            if !record.summary.is_empty() {
                report.present += 1;
                continue;
            }
            let result = ProviderGradeResult {
                selected_item_ids: record.selection.selected_item_ids.clone(),
                confidence: record.confidence,
                rationale: record.rationale.clone(),
            };
            let text = record.transcription.as_ref().map(|t| t.text.clone()).unwrap_or_default();
            match self.summarize(question, &record.respondent.clone(), &result, &text, rubric).await {
                Some(s) => {
                    record.summary = s;
                    report.generated += 1;
                }
                None => report.failed.push(record.id.clone()),
            }
        }
        report
    }

    /// Ask the provider for fresh AI selections on `records` without
    /// modifying them. Used to measure agreement after calibration.
    pub async fn shadow_grade(
        &self,
        question: &Question,
        records: &[GradeRecord],
        wisdoms: &[GradingWisdom],
    ) -> Vec<(GradeRecordId, Option<BTreeSet<ItemId>>)> {
        let Some(rubric) = question.rubric.as_ref() else {
            return records.iter().map(|r| (r.id.clone(), None)).collect();
        };
        let mut pending = Vec::with_capacity(records.len());
        for record in records {
            pending.push(self.shadow_one(record, question, rubric, wisdoms));
        }
        stream::iter(pending).buffered(self.config.parallelism.max(1)).collect().await
    }

    async fn shadow_one(
        &self,
        record: &GradeRecord,
        question: &Question,
        rubric: &Rubric,
        wisdoms: &[GradingWisdom],
    ) -> (GradeRecordId, Option<BTreeSet<ItemId>>) {
        let selection = match &record.transcription {
            Some(t) if t.text.trim().is_empty() => Some(BTreeSet::new()),
            Some(t) => self
                .gateway
                .grade(&record.respondent, &t.text, question, rubric, wisdoms)
                .await
                .ok()
                .map(|r| r.selected_item_ids),
            None => None,
        };
        (record.id.clone(), selection)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub generated: usize,
    pub present: usize,
    pub skipped: usize,
    pub failed: Vec<GradeRecordId>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_record(id: &str, tier: ConfidenceTier) -> GradeRecord {
        GradeRecord {
            id: id.into(),
            run_id: "run".into(),
            submission_id: format!("sub-{id}").into(),
            question_id: "q1".into(),
            respondent: format!("s-{id}"),
            student_id: Some(format!("s-{id}").into()),
            transcription: Some(TranscriptionRecord {
                text: "x = 4".into(),
                confidence: TranscriptionConfidence::High,
                verified_by_human: false,
            }),
            selection: RubricSelection { grade_record_id: id.into(), selected_item_ids: BTreeSet::new() },
            ai_selection: Some(BTreeSet::new()),
            mc_response: None,
            blank: false,
            score: Some(Points::from_int(10)),
            confidence: tier,
            rationale: String::new(),
            summary: String::new(),
            comments: vec![],
            feedback: None,
            status: GradeStatus::AiProposed,
            provenance: Provenance::Ai,
            failure: None,
            reviewed_by: None,
        }
    }

    #[test]
    fn progress_counters_always_sum_to_total() {
        let p = RunProgress::new(3);
        p.finish_one(false);
        p.finish_one(true);
        let c = p.snapshot();
        assert_eq!(c.pending + c.done + c.failed, c.total);
        assert_eq!((c.done, c.failed), (1, 1));
    }

    #[test]
    fn record_ids_are_stable() {
        let a = GradeRecord::record_id(&"q1".into(), &"s1".into());
        assert_eq!(a, GradeRecord::record_id(&"q1".into(), &"s1".into()));
        assert_ne!(a, GradeRecord::record_id(&"q2".into(), &"s1".into()));
    }
}
