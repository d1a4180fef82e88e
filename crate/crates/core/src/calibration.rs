//! Instructor calibration: sample AI grades, record corrections, turn the
//! discrepancies into grading wisdoms and regrade with them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Question, Submission};
use crate::exact::Exact;
use crate::ids::{self, DiscrepancyId, GradeRecordId, ItemId, QuestionId, RunId, SessionId, WisdomId};
use crate::pipeline::{
    GradeRecord, GradeStatus, GradingPipeline, GradingRun, PipelineError, RunOutcome, RunProgress, RunState,
};
use crate::provider::{Gateway, ProviderError};
use crate::review::{apply_review, ConfidencePolicy, ReviewDecision, ReviewError};
use crate::rubric::RubricSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    LowConfidenceFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    WisdomsProposed,
    Applied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingWisdom {
    pub id: WisdomId,
    pub question_id: QuestionId,
    pub text: String,
    pub source_discrepancy_ids: Vec<DiscrepancyId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub item_ids: Vec<ItemId>,
    pub active: bool,
    #[serde(default)]
    pub edited_by_instructor: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub id: DiscrepancyId,
    pub record_id: GradeRecordId,
    pub ai_selection: BTreeSet<ItemId>,
    pub human_selection: BTreeSet<ItemId>,
    /// Items the instructor selected that the AI did not.
    pub added: BTreeSet<ItemId>,
    /// Items the AI selected that the instructor removed.
    pub removed: BTreeSet<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSession {
    pub id: SessionId,
    pub question_id: QuestionId,
    pub strategy: SamplingStrategy,
    pub seed: u64,
    pub sample: Vec<GradeRecordId>,
    pub corrections: BTreeMap<GradeRecordId, RubricSelection>,
    /// AI selection of each corrected record at correction time.
    pub ai_selections: BTreeMap<GradeRecordId, BTreeSet<ItemId>>,
    pub state: SessionState,
    #[serde(default)]
    pub drafts: Vec<GradingWisdom>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub corrected: usize,
    pub matching_before: usize,
    pub matching_after: usize,
    pub before: Exact,
    pub after: Exact,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CalibrationError {
    #[error("no completed grading run for question {0}")]
    NoCompletedRun(QuestionId),
    #[error("sample size must be positive")]
    InvalidSampleSize,
    #[error("no AI-graded records available to sample")]
    NoCandidates,
    #[error("record {0} is not in the calibration sample")]
    NotInSample(GradeRecordId),
    #[error("session is {0:?}; corrections are closed")]
    SessionClosed(SessionState),
    #[error("no corrections recorded")]
    NoCorrections,
    #[error("corrections agree with the AI; nothing to learn from")]
    NoDiscrepancies,
    #[error("cannot move session from {from:?} to {to:?}")]
    InvalidTransition { from: SessionState, to: SessionState },
    #[error("unknown wisdom {0}")]
    UnknownWisdom(WisdomId),
    #[error("wisdom text must not be empty")]
    EmptyWisdomText,
    #[error("question {0} has no rubric")]
    NoRubric(QuestionId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Review(#[from] ReviewError),
}

/// Draw a calibration sample from a completed run's records.
pub fn open_session(
    id: SessionId,
    question: &Question,
    run: Option<&GradingRun>,
    records: &[GradeRecord],
    sample_size: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<CalibrationSession, CalibrationError> {
    if !run.is_some_and(|r| r.state == RunState::Completed && r.question_id == question.id) {
        return Err(CalibrationError::NoCompletedRun(question.id.clone()));
    }
    if sample_size == 0 {
        return Err(CalibrationError::InvalidSampleSize);
    }
    let mut candidates: Vec<&GradeRecord> = records
        .iter()
        .filter(|r| {
            r.question_id == question.id
                && r.ai_selection.is_some()
                && matches!(r.status, GradeStatus::AiProposed | GradeStatus::NeedsReview)
        })
        .collect();
    if candidates.is_empty() {
        return Err(CalibrationError::NoCandidates);
    }
    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    let k = sample_size.min(candidates.len());
    let picked: Vec<GradeRecordId> = match strategy {
        SamplingStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, candidates.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i].id.clone()).collect()
        }
        SamplingStrategy::LowConfidenceFirst => {
            candidates.sort_by(|a, b| a.confidence.cmp(&b.confidence).then_with(|| a.id.cmp(&b.id)));
            candidates.iter().take(k).map(|r| r.id.clone()).collect()
        }
    };
    Ok(CalibrationSession {
        id,
        question_id: question.id.clone(),
        strategy,
        seed,
        sample: picked,
        corrections: BTreeMap::new(),
        ai_selections: BTreeMap::new(),
        state: SessionState::Open,
        drafts: Vec::new(),
    })
}

/// Store an instructor correction; returns the record as reviewed.
pub fn record_correction(
    session: &mut CalibrationSession,
    record: &GradeRecord,
    question: &Question,
    human_selection: BTreeSet<ItemId>,
    reviewer: &str,
) -> Result<GradeRecord, CalibrationError> {
    if session.state != SessionState::Open {
        return Err(CalibrationError::SessionClosed(session.state));
    }
    if !session.sample.contains(&record.id) {
        return Err(CalibrationError::NotInSample(record.id.clone()));
    }
    let decision = ReviewDecision::Override { selected_item_ids: human_selection.clone() };
    let updated = apply_review(record, question, &decision, reviewer)?;
    let ai = session
        .ai_selections
        .get(&record.id)
        .cloned()
        .or_else(|| record.ai_selection.clone())
        .unwrap_or_else(|| record.selection.selected_item_ids.clone());
    session.ai_selections.insert(record.id.clone(), ai);
    session.corrections.insert(
        record.id.clone(),
        RubricSelection { grade_record_id: record.id.clone(), selected_item_ids: human_selection },
    );
    Ok(updated)
}

pub fn extract_discrepancies(session: &CalibrationSession) -> Result<Vec<Discrepancy>, CalibrationError> {
    if session.corrections.is_empty() {
        return Err(CalibrationError::NoCorrections);
    }
    let mut out = Vec::new();
    for (record_id, human) in &session.corrections {
        let ai = session.ai_selections.get(record_id).cloned().unwrap_or_default();
        let human = &human.selected_item_ids;
        let added: BTreeSet<ItemId> = human.difference(&ai).cloned().collect();
        let removed: BTreeSet<ItemId> = ai.difference(human).cloned().collect();
        if added.is_empty() && removed.is_empty() {
            continue;
        }
        out.push(Discrepancy {
            id: DiscrepancyId::new(ids::derived(&["discrepancy", session.id.as_str(), record_id.as_str()])),
            record_id: record_id.clone(),
            ai_selection: ai,
            human_selection: human.clone(),
            added,
            removed,
        });
    }
    Ok(out)
}

/// Ask the provider for wisdom drafts. On failure the session stays open.
pub async fn propose_wisdoms(
    session: &mut CalibrationSession,
    gateway: &Gateway,
    question: &Question,
) -> Result<Vec<GradingWisdom>, CalibrationError> {
    if session.state != SessionState::Open {
        return Err(CalibrationError::InvalidTransition { from: session.state, to: SessionState::WisdomsProposed });
    }
    let rubric = question.rubric.as_ref().ok_or_else(|| CalibrationError::NoRubric(question.id.clone()))?;
    let discrepancies = extract_discrepancies(session)?;
    if discrepancies.is_empty() {
        return Err(CalibrationError::NoDiscrepancies);
    }
    let drafts = gateway.synthesize_wisdoms(&question.id, rubric, &discrepancies).await?;
    let wisdoms: Vec<GradingWisdom> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| GradingWisdom {
            id: WisdomId::new(ids::derived(&["wisdom", session.id.as_str(), &i.to_string()])),
            question_id: question.id.clone(),
            text: d.text,
            source_discrepancy_ids: d.source_discrepancy_ids,
            item_ids: d.item_ids,
            active: false,
            edited_by_instructor: false,
        })
        .collect();
    session.drafts = wisdoms.clone();
    session.state = SessionState::WisdomsProposed;
    Ok(wisdoms)
}

pub fn edit_wisdom(
    session: &mut CalibrationSession,
    wisdom_id: &WisdomId,
    text: &str,
) -> Result<GradingWisdom, CalibrationError> {
    if session.state != SessionState::WisdomsProposed {
        return Err(CalibrationError::SessionClosed(session.state));
    }
    if text.trim().is_empty() {
        return Err(CalibrationError::EmptyWisdomText);
    }
    let draft = session
        .drafts
        .iter_mut()
        .find(|w| &w.id == wisdom_id)
        .ok_or_else(|| CalibrationError::UnknownWisdom(wisdom_id.clone()))?;
    draft.text = text.to_string();
    draft.edited_by_instructor = true;
    Ok(draft.clone())
}

/// Agreement between AI selections and the instructor's corrections.
pub fn agreement(
    corrections: &BTreeMap<GradeRecordId, RubricSelection>,
    ai: &BTreeMap<GradeRecordId, Option<BTreeSet<ItemId>>>,
) -> (usize, Exact) {
    let matching = corrections
        .iter()
        .filter(|(id, human)| ai.get(*id).and_then(|s| s.as_ref()).is_some_and(|s| s == &human.selected_item_ids))
        .count();
    let rate = if corrections.is_empty() { Exact::ZERO } else { Exact::new(matching as i64, corrections.len() as i64) };
    (matching, rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplyOutcome {
    pub report: AgreementReport,
    /// Newly activated wisdoms.
    pub wisdoms: Vec<GradingWisdom>,
    /// Question with wisdom ids attached to the rubric items they concern.
    pub question: Question,
    pub regrade: RunOutcome,
}

pub struct ApplyContext<'a> {
    pub pipeline: &'a GradingPipeline,
    pub question: &'a Question,
    pub prior_run: &'a GradingRun,
    pub submissions: &'a [Submission],
    pub records: &'a [GradeRecord],
    pub policy: &'a ConfidencePolicy,
    /// Wisdoms already active for the question before this session.
    pub existing_wisdoms: &'a [GradingWisdom],
    pub run_id: RunId,
    pub progress: Option<Arc<RunProgress>>,
}

/// Activate the session's drafts, regrade, and report agreement before and after.
pub async fn apply_and_regrade(
    session: &mut CalibrationSession,
    ctx: ApplyContext<'_>,
) -> Result<ApplyOutcome, CalibrationError> {
    if session.state != SessionState::WisdomsProposed {
        return Err(CalibrationError::InvalidTransition { from: session.state, to: SessionState::Applied });
    }
    let activated: Vec<GradingWisdom> = session
        .drafts
        .iter()
        .cloned()
        .map(|mut w| {
            w.active = true;
            w
        })
        .collect();
    let mut all_wisdoms: Vec<GradingWisdom> = ctx.existing_wisdoms.iter().filter(|w| w.active).cloned().collect();
    all_wisdoms.extend(activated.iter().cloned());

    let mut question = ctx.question.clone();
    if let Some(rubric) = question.rubric.as_mut() {
        for item in &mut rubric.items {
            for w in activated.iter().filter(|w| w.item_ids.contains(&item.id)) {
                if !item.wisdom_notes.contains(&w.id) {
                    item.wisdom_notes.push(w.id.clone());
                }
            }
        }
    }

    let before_ai: BTreeMap<GradeRecordId, Option<BTreeSet<ItemId>>> =
        session.corrections.keys().map(|id| (id.clone(), session.ai_selections.get(id).cloned())).collect();
    let (matching_before, before) = agreement(&session.corrections, &before_ai);

    let sampled: Vec<GradeRecord> =
        ctx.records.iter().filter(|r| session.corrections.contains_key(&r.id)).cloned().collect();
    let after_ai: BTreeMap<GradeRecordId, Option<BTreeSet<ItemId>>> =
        ctx.pipeline.shadow_grade(&question, &sampled, &all_wisdoms).await.into_iter().collect();
    let (matching_after, after) = agreement(&session.corrections, &after_ai);

    let regrade = ctx
        .pipeline
        .regrade_with_wisdoms(
            ctx.run_id,
            ctx.prior_run,
            &question,
            ctx.submissions,
            ctx.records,
            ctx.policy,
            &all_wisdoms,
            ctx.progress,
        )
        .await?;

    session.drafts = activated.clone();
    session.state = SessionState::Applied;
    Ok(ApplyOutcome {
        report: AgreementReport {
            corrected: session.corrections.len(),
            matching_before,
            matching_after,
            before,
            after,
        },
        wisdoms: activated,
        question,
        regrade,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ConfidenceTier;
    use crate::pipeline::tests::sample_record;

    fn set(ids: &[&str]) -> BTreeSet<ItemId> {
        ids.iter().map(|s| ItemId::from(*s)).collect()
    }

    fn session_with(corrections: &[(&str, &[&str], &[&str])]) -> CalibrationSession {
        let mut s = CalibrationSession {
            id: "sess".into(),
            question_id: "q1".into(),
            strategy: SamplingStrategy::Random,
            seed: 0,
            sample: vec![],
            corrections: BTreeMap::new(),
            ai_selections: BTreeMap::new(),
            state: SessionState::Open,
            drafts: vec![],
        };
        for (id, ai, human) in corrections {
            s.sample.push((*id).into());
            s.ai_selections.insert((*id).into(), set(ai));
            s.corrections
                .insert((*id).into(), RubricSelection { grade_record_id: (*id).into(), selected_item_ids: set(human) });
        }
        s
    }

    #[test]
    fn set_difference_semantics() {
        let s = session_with(&[("r1", &["a"], &["b"]), ("r2", &["a"], &["a"]), ("r3", &[], &["a", "b"])]);
        let d = extract_discrepancies(&s).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].added.clone(), d[0].removed.clone()), (set(&["b"]), set(&["a"])));
        assert_eq!((d[1].added.clone(), d[1].removed.clone()), (set(&["a", "b"]), set(&[])));
    }

    #[test]
    fn no_corrections_is_an_error() {
        let s = session_with(&[]);
        assert_eq!(extract_discrepancies(&s), Err(CalibrationError::NoCorrections));
    }

    #[test]
    fn agreement_counts_exact_matches() {
        let s = session_with(&[
            ("r1", &["a"], &["a"]),
            ("r2", &["a"], &[]),
            ("r3", &[], &[]),
            ("r4", &["b"], &["b"]),
            ("r5", &["b"], &["a"]),
        ]);
        let ai = s.ai_selections.iter().map(|(k, v)| (k.clone(), Some(v.clone()))).collect();
        let (m, rate) = agreement(&s.corrections, &ai);
        assert_eq!(m, 3);
        assert_eq!(rate, Exact::new(3, 5));
    }

    fn completed_run() -> GradingRun {
        GradingRun {
            id: "run".into(),
            question_id: "q1".into(),
            wisdom_snapshot: vec![],
            counters: Default::default(),
            state: RunState::Completed,
            previous_run_id: None,
            started_at: None,
            completed_at: None,
        }
    }

    fn question() -> Question {
        serde_json::from_value(serde_json::json!({
            "id": "q1", "assignment_id": "a1", "ordinal": 1, "format": "text_code",
            "statement": "s",
            "rubric": {"question_id": "q1", "scheme": "subtractive", "base_points": "10",
                       "min_total": "0", "max_total": "10",
                       "items": [{"id": "a", "label": "A", "points": "-2"}]}
        }))
        .unwrap()
    }

    #[test]
    fn low_confidence_first_sampling() {
        use ConfidenceTier::*;
        let tiers = [High, Low, Medium, Low, High, Low];
        let records: Vec<_> = tiers.iter().enumerate().map(|(i, t)| sample_record(&format!("r{i}"), *t)).collect();
        let s = open_session(
            "s".into(),
            &question(),
            Some(&completed_run()),
            &records,
            3,
            SamplingStrategy::LowConfidenceFirst,
            0,
        )
        .unwrap();
        let ids: Vec<_> = s.sample.iter().map(|i| i.as_str()).collect();
        assert_eq!(ids, vec!["r1", "r3", "r5"]);
    }

    #[test]
    fn random_sampling_is_seeded() {
        let records: Vec<_> = (0..50).map(|i| sample_record(&format!("r{i:02}"), ConfidenceTier::High)).collect();
        let q = question();
        let run = completed_run();
        let a = open_session("s".into(), &q, Some(&run), &records, 10, SamplingStrategy::Random, 7).unwrap();
        let b = open_session("s".into(), &q, Some(&run), &records, 10, SamplingStrategy::Random, 7).unwrap();
        let c = open_session("s".into(), &q, Some(&run), &records, 10, SamplingStrategy::Random, 8).unwrap();
        assert_eq!(a.sample.len(), 10);
        assert_eq!(a.sample, b.sample);
        assert_ne!(a.sample, c.sample);
    }

    #[test]
    fn requires_completed_run() {
        let records = vec![sample_record("r1", ConfidenceTier::High)];
        assert_eq!(
            open_session("s".into(), &question(), None, &records, 1, SamplingStrategy::Random, 0),
            Err(CalibrationError::NoCompletedRun("q1".into()))
        );
    }

    #[test]
    fn corrections_mark_records_reviewed() {
        let q = question();
        let records = [sample_record("r1", ConfidenceTier::High), sample_record("r2", ConfidenceTier::High)];
        let mut s = open_session("s".into(), &q, Some(&completed_run()), &records[..1], 1, SamplingStrategy::Random, 0)
            .unwrap();
        let updated = record_correction(&mut s, &records[0], &q, set(&["a"]), "prof").unwrap();
        assert_eq!(updated.status, GradeStatus::Reviewed);
        assert_eq!(updated.provenance, crate::pipeline::Provenance::AiThenHuman);
        assert_eq!(updated.score, Some(Exact::from_int(8)));
        assert_eq!(
            record_correction(&mut s, &records[1], &q, set(&[]), "prof"),
            Err(CalibrationError::NotInSample("r2".into()))
        );
    }

    #[test]
    fn edits_only_after_proposal() {
        let mut s = session_with(&[("r1", &["a"], &[])]);
        assert!(matches!(edit_wisdom(&mut s, &"w".into(), "x"), Err(CalibrationError::SessionClosed(_))));
        s.state = SessionState::WisdomsProposed;
        s.drafts.push(GradingWisdom {
            id: "w".into(),
            question_id: "q1".into(),
            text: "old".into(),
            source_discrepancy_ids: vec!["d".into()],
            item_ids: vec![],
            active: false,
            edited_by_instructor: false,
        });
        let w = edit_wisdom(&mut s, &"w".into(), "Accept any equivalent form").unwrap();
        assert!(w.edited_by_instructor);
        assert_eq!(s.drafts[0].text, "Accept any equivalent form");
        assert_eq!(edit_wisdom(&mut s, &"w".into(), "  "), Err(CalibrationError::EmptyWisdomText));
    }
}
