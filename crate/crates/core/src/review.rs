//! Confidence policies, review queues, review actions and feedback dispatch.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ConfidenceTier, Question, TranscriptionConfidence, ValidationReport};
use crate::exact::{Exact, Points};
use crate::ids::{GradeRecordId, ItemId, QuestionId};
use crate::pipeline::{expected_score, GradeRecord, GradeStatus, Provenance, TranscriptionRecord};
use crate::provider::Gateway;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierPolicy {
    pub show_transcription: bool,
    pub show_autograde: bool,
    pub require_review: bool,
}

impl TierPolicy {
    pub const TRUSTED: TierPolicy =
        TierPolicy { show_transcription: true, show_autograde: true, require_review: false };
    pub const REVIEWED: TierPolicy =
        TierPolicy { show_transcription: true, show_autograde: true, require_review: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePolicy {
    pub high: TierPolicy,
    pub medium: TierPolicy,
    pub low: TierPolicy,
    /// Share of auto-accepted high-tier grades drawn for spot checks.
    pub high_tier_spot_check_fraction: Exact,
}

impl Default for ConfidencePolicy {
    fn default() -> Self {
        ConfidencePolicy {
            high: TierPolicy::TRUSTED,
            medium: TierPolicy::REVIEWED,
            low: TierPolicy::REVIEWED,
            high_tier_spot_check_fraction: Exact::new(5, 100),
        }
    }
}

impl ConfidencePolicy {
    pub fn tier(&self, tier: ConfidenceTier) -> &TierPolicy {
        match tier {
            ConfidenceTier::High => &self.high,
            ConfidenceTier::Medium => &self.medium,
            ConfidenceTier::Low => &self.low,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let f = self.high_tier_spot_check_fraction;
        if f < Exact::ZERO || f > Exact::from_int(1) {
            report.push(format!("spot-check fraction {f} outside [0, 1]"));
        }
        report
    }

    /// Status a freshly graded response starts in.
    pub fn initial_status(&self, tier: ConfidenceTier, transcription: TranscriptionConfidence) -> GradeStatus {
        if self.tier(tier).require_review || transcription == TranscriptionConfidence::Low {
            GradeStatus::NeedsReview
        } else {
            GradeStatus::AiProposed
        }
    }

    /// Spot-check sample size for `high_count` candidates: `⌈fraction × n⌉`.
    pub fn spot_check_size(&self, high_count: usize) -> usize {
        let product = self.high_tier_spot_check_fraction * Exact::from_int(high_count as i64);
        let ceil = product.ratio().ceil().to_integer();
        (ceil.max(0) as usize).min(high_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueReason {
    ManualQueue,
    Unmatched,
    PolicyRequired,
    LowTranscriptionConfidence,
    SpotCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueueEntry {
    pub grade_record_id: GradeRecordId,
    pub question_id: QuestionId,
    pub confidence: ConfidenceTier,
    pub reason: QueueReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub seed: u64,
    pub entries: Vec<ReviewQueueEntry>,
}

impl ReviewQueue {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn spot_check_count(&self) -> usize {
        self.entries.iter().filter(|e| e.reason == QueueReason::SpotCheck).count()
    }

    pub fn contains(&self, id: &GradeRecordId) -> bool {
        self.entries.iter().any(|e| &e.grade_record_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReviewError {
    #[error("grading run has not completed")]
    RunNotCompleted,
    #[error("unknown grade record {0}")]
    UnknownRecord(GradeRecordId),
    #[error("record {0} has no AI grade to confirm")]
    NothingToConfirm(GradeRecordId),
    #[error("question {0} needs a rubric for rubric overrides")]
    RubricRequired(QuestionId),
    #[error("multiple-choice record {0} is scored from the answer key")]
    MultipleChoiceOverride(GradeRecordId),
    #[error("override selects unknown rubric item {0}")]
    UnknownRubricItem(ItemId),
    #[error("{0} review queue entries are unresolved")]
    GradingIncomplete(usize),
}

/// Reason a record must be reviewed regardless of sampling, if any.
pub fn mandatory_reason(record: &GradeRecord, policy: &ConfidencePolicy) -> Option<QueueReason> {
    if record.status == GradeStatus::ManualQueue {
        return Some(QueueReason::ManualQueue);
    }
    if record.student_id.is_none() {
        return Some(QueueReason::Unmatched);
    }
    if policy.tier(record.confidence).require_review {
        return Some(QueueReason::PolicyRequired);
    }
    if record.transcription.as_ref().is_some_and(|t| t.confidence == TranscriptionConfidence::Low) {
        return Some(QueueReason::LowTranscriptionConfidence);
    }
    None
}

/// Build the ordered review queue for a set of completed records.
///
/// Spot checks are drawn per question from high-tier records that are not
/// already queued, with an RNG derived from `seed` and the question id.
pub fn build_review_queue(records: &[GradeRecord], policy: &ConfidencePolicy, seed: u64) -> ReviewQueue {
    let mut entries = Vec::new();
    let mut high_candidates: BTreeMap<&QuestionId, Vec<&GradeRecord>> = BTreeMap::new();
    for record in records {
        match mandatory_reason(record, policy) {
            Some(reason) => entries.push(ReviewQueueEntry {
                grade_record_id: record.id.clone(),
                question_id: record.question_id.clone(),
                confidence: record.confidence,
                reason,
            }),
            None if record.confidence == ConfidenceTier::High => {
                high_candidates.entry(&record.question_id).or_default().push(record)
            }
            None => {}
        }
    }
    for (question_id, mut candidates) in high_candidates {
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        let k = policy.spot_check_size(candidates.len());
        if k == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ question_seed(question_id));
        let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let record = candidates[i];
            entries.push(ReviewQueueEntry {
                grade_record_id: record.id.clone(),
                question_id: record.question_id.clone(),
                confidence: record.confidence,
                reason: QueueReason::SpotCheck,
            });
        }
    }
    entries.sort_by(|a, b| a.confidence.cmp(&b.confidence).then_with(|| a.grade_record_id.cmp(&b.grade_record_id)));
    ReviewQueue { seed, entries }
}

fn question_seed(question_id: &QuestionId) -> u64 {
    // FNV-1a; stable across platforms and releases.
    question_id.as_str().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReviewDecision {
    Confirm,
    Override { selected_item_ids: BTreeSet<ItemId> },
}

/// Apply a reviewer decision to a record and return the updated record.
pub fn apply_review(
    record: &GradeRecord,
    question: &Question,
    decision: &ReviewDecision,
    reviewer: &str,
) -> Result<GradeRecord, ReviewError> {
    let mut updated = record.clone();
    match decision {
        ReviewDecision::Confirm => {
            if record.status == GradeStatus::ManualQueue && record.provenance == Provenance::Ai {
                return Err(ReviewError::NothingToConfirm(record.id.clone()));
            }
        }
        ReviewDecision::Override { selected_item_ids } => {
            if record.mc_response.is_some() {
                return Err(ReviewError::MultipleChoiceOverride(record.id.clone()));
            }
            let rubric = question.rubric.as_ref().ok_or_else(|| ReviewError::RubricRequired(question.id.clone()))?;
            if let Some(unknown) = rubric.unknown_items(selected_item_ids).into_iter().next() {
                return Err(ReviewError::UnknownRubricItem(unknown));
            }
            updated.selection.selected_item_ids = selected_item_ids.clone();
            updated.blank = false;
            updated.provenance = if record.ai_selection.is_some() || record.mc_response.is_some() {
                Provenance::AiThenHuman
            } else {
                Provenance::Human
            };
        }
    }
    updated.status = GradeStatus::Reviewed;
    updated.reviewed_by = Some(reviewer.to_string());
    updated.score = expected_score(question, &updated).map_err(|_| ReviewError::RubricRequired(question.id.clone()))?;
    Ok(updated)
}

/// Mark a transcription as checked by a human, optionally correcting its text.
pub fn verify_transcription(record: &GradeRecord, corrected_text: Option<&str>) -> GradeRecord {
    let mut updated = record.clone();
    let base = updated.transcription.take().unwrap_or(TranscriptionRecord {
        text: String::new(),
        confidence: TranscriptionConfidence::Low,
        verified_by_human: false,
    });
    updated.transcription = Some(TranscriptionRecord {
        text: corrected_text.map(str::to_string).unwrap_or(base.text),
        confidence: base.confidence,
        verified_by_human: true,
    });
    updated
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutogradeView {
    pub selected_item_ids: BTreeSet<ItemId>,
    pub score: Option<Points>,
    pub summary: String,
    pub rationale: String,
}

/// What a reviewer is allowed to see of one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewView {
    pub grade_record_id: GradeRecordId,
    pub question_id: QuestionId,
    pub respondent: String,
    pub pages: Vec<String>,
    pub confidence: ConfidenceTier,
    pub status: GradeStatus,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcription: Option<TranscriptionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autograde: Option<AutogradeView>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comments: Vec<String>,
}

pub fn render_view(record: &GradeRecord, policy: &ConfidencePolicy, pages: &[String]) -> ReviewView {
    let full = record.status == GradeStatus::ManualQueue;
    let tier = policy.tier(record.confidence);
    let show_transcription = full || tier.show_transcription;
    let show_autograde = full || tier.show_autograde;
    ReviewView {
        grade_record_id: record.id.clone(),
        question_id: record.question_id.clone(),
        respondent: record.respondent.clone(),
        pages: pages.to_vec(),
        confidence: record.confidence,
        status: record.status,
        provenance: record.provenance,
        transcription: if show_transcription { record.transcription.clone() } else { None },
        autograde: show_autograde.then(|| AutogradeView {
            selected_item_ids: record.selection.selected_item_ids.clone(),
            score: record.score,
            summary: record.summary.clone(),
            rationale: record.rationale.clone(),
        }),
        comments: record.comments.clone(),
    }
}

/// Records still blocking release: unresolved queue entries plus anything
/// waiting for review or manual grading.
pub fn unresolved(records: &[GradeRecord], queue: Option<&ReviewQueue>) -> usize {
    let by_id: HashMap<&GradeRecordId, &GradeRecord> = records.iter().map(|r| (&r.id, r)).collect();
    let mut pending: BTreeSet<&GradeRecordId> = records
        .iter()
        .filter(|r| matches!(r.status, GradeStatus::NeedsReview | GradeStatus::ManualQueue))
        .map(|r| &r.id)
        .collect();
    if let Some(queue) = queue {
        for entry in &queue.entries {
            if by_id.get(&entry.grade_record_id).is_none_or(|r| r.status != GradeStatus::Reviewed) {
                pending.insert(&entry.grade_record_id);
            }
        }
    }
    pending.len()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub generated: usize,
    pub failed: Vec<GradeRecordId>,
}

/// Generate provider feedback for every finalized record once nothing is
/// left to review.
pub async fn dispatch_feedback(
    gateway: &Gateway,
    records: &mut [GradeRecord],
    questions: &HashMap<QuestionId, Question>,
    queue: Option<&ReviewQueue>,
    style_prompt: Option<&str>,
) -> Result<FeedbackReport, ReviewError> {
    let open = unresolved(records, queue);
    if open > 0 {
        return Err(ReviewError::GradingIncomplete(open));
    }
    let mut report = FeedbackReport::default();
    for record in records.iter_mut().filter(|r| r.is_finalized()) {
        let rubric = questions.get(&record.question_id).and_then(|q| q.rubric.as_ref());
        match gateway.feedback(record, rubric, style_prompt).await {
            Ok(text) => {
                record.feedback = Some(text);
                report.generated += 1;
            }
            Err(_) => report.failed.push(record.id.clone()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::sample_record;

    fn records(tiers: &[ConfidenceTier]) -> Vec<GradeRecord> {
        tiers.iter().enumerate().map(|(i, t)| sample_record(&format!("r{}", i + 1), *t)).collect()
    }

    #[test]
    fn policy_queues_medium_and_low() {
        use ConfidenceTier::*;
        let recs = records(&[High, Medium, Low, High]);
        let policy = ConfidencePolicy { high_tier_spot_check_fraction: Exact::ZERO, ..Default::default() };
        let queue = build_review_queue(&recs, &policy, 1);
        let ids: Vec<_> = queue.entries.iter().map(|e| e.grade_record_id.as_str()).collect();
        assert_eq!(ids, vec!["r3", "r2"]);
        assert!(queue.entries.iter().all(|e| e.reason == QueueReason::PolicyRequired));
    }

    #[test]
    fn five_percent_of_hundred_high() {
        let recs = records(&[ConfidenceTier::High; 100]);
        let queue = build_review_queue(&recs, &ConfidencePolicy::default(), 42);
        assert_eq!(queue.len(), 5);
        assert_eq!(queue.spot_check_count(), 5);
        assert_eq!(queue, build_review_queue(&recs, &ConfidencePolicy::default(), 42));
    }

    #[test]
    fn fraction_one_queues_everything() {
        use ConfidenceTier::*;
        let recs = records(&[High, Medium, Low, High, High]);
        let policy = ConfidencePolicy { high_tier_spot_check_fraction: Exact::from_int(1), ..Default::default() };
        assert_eq!(build_review_queue(&recs, &policy, 9).len(), recs.len());
    }

    #[test]
    fn spot_check_ceiling() {
        let policy = ConfidencePolicy::default();
        assert_eq!(policy.spot_check_size(0), 0);
        assert_eq!(policy.spot_check_size(1), 1);
        assert_eq!(policy.spot_check_size(20), 1);
        assert_eq!(policy.spot_check_size(21), 2);
        let mut p = policy.clone();
        p.high_tier_spot_check_fraction = Exact::new(7, 100);
        assert_eq!(p.spot_check_size(100), 7);
    }

    #[test]
    fn low_transcription_is_queued_even_for_high_tier() {
        let mut rec = sample_record("r1", ConfidenceTier::High);
        rec.transcription.as_mut().unwrap().confidence = TranscriptionConfidence::Low;
        let policy = ConfidencePolicy { high_tier_spot_check_fraction: Exact::ZERO, ..Default::default() };
        let queue = build_review_queue(&[rec], &policy, 0);
        assert_eq!(queue.entries[0].reason, QueueReason::LowTranscriptionConfidence);
    }
}
