use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use grader_core::domain::{
    ConfidenceTier, MatchStatus, McPolicy, PageRegion, Question, QuestionFormat, Rect, StudentRef, Submission,
    TranscriptionConfidence,
};
use grader_core::exact::Points;
use grader_core::ids::{ItemId, QuestionId, RunId};
use grader_core::pipeline::{GradeRecord, GradeStatus, GradingPipeline, PipelineConfig, Provenance};
use grader_core::provider::{
    FixtureGrade, FixtureGradeRow, FixtureTranscription, Gateway, GatewayConfig, MockFixture, MockProvider, RetryPolicy,
};
use grader_core::review::{apply_review, ConfidencePolicy, ReviewDecision};
use grader_core::rubric::{Rubric, RubricItem, Scheme};

fn rubric(qid: &QuestionId) -> Rubric {
    Rubric {
        question_id: qid.clone(),
        scheme: Scheme::Subtractive,
        items: vec![
            RubricItem::new("sign".into(), "Sign error", Points::from_int(-2)),
            RubricItem::new("units".into(), "Missing units", Points::from_int(-1)),
            RubricItem::new("method".into(), "Wrong method", Points::from_int(-6)),
        ],
        base_points: Points::from_int(8),
        min_total: Points::ZERO,
        max_total: Points::from_int(8),
    }
}

fn text_question() -> Question {
    let id: QuestionId = "q-text".into();
    Question {
        rubric: Some(rubric(&id)),
        id,
        assignment_id: "hw".into(),
        ordinal: 1,
        format: QuestionFormat::TextCode,
        statement: "Compute the work done.".into(),
        reference_solution: Some("W = F d".into()),
        answer_key: None,
        options: Vec::new(),
        points: None,
        mc_policy: McPolicy::ExactMatch,
    }
}

fn ssmc_question() -> Question {
    Question {
        id: "q-mc".into(),
        assignment_id: "hw".into(),
        ordinal: 2,
        format: QuestionFormat::Ssmc,
        statement: "Pick one.".into(),
        reference_solution: None,
        answer_key: Some(BTreeSet::from(["C".to_string()])),
        options: ["A", "B", "C"].map(String::from).to_vec(),
        points: Some(Points::from_int(3)),
        mc_policy: McPolicy::ExactMatch,
        rubric: None,
    }
}

fn submissions(n: usize) -> Vec<Submission> {
    (0..n)
        .map(|i| Submission {
            id: format!("sub-{i}").into(),
            assignment_id: "hw".into(),
            student: Some(StudentRef { id: format!("s{i}").into(), display_name: format!("Student {i}") }),
            pages: vec![format!("scan.pdf#page={}", 2 * i + 1), format!("scan.pdf#page={}", 2 * i + 2)],
            region_map: BTreeMap::from([
                ("q-text".into(), PageRegion { page: 1, rect: Rect::FULL }),
                ("q-mc".into(), PageRegion { page: 1, rect: Rect::FULL }),
            ]),
            name_region: None,
            mc_responses: BTreeMap::from([("q-mc".into(), BTreeSet::from([["A", "C"][i % 2].to_string()]))]),
            match_status: MatchStatus::AutoMatched,
        })
        .collect()
}

fn fixture(n: usize, selections: &[BTreeSet<ItemId>]) -> MockFixture {
    let mut f = MockFixture::default();
    for i in 0..n {
        f.transcriptions.insert(
            format!("s{i}/q-text"),
            FixtureTranscription { text: format!("work {i}"), confidence: TranscriptionConfidence::High },
        );
        f.grades.push(FixtureGradeRow {
            question_id: "q-text".into(),
            student_id: format!("s{i}"),
            pre: FixtureGrade {
                selected: selections[i % selections.len()].clone(),
                confidence: ConfidenceTier::High,
                rationale: String::new(),
            },
            post: None,
        });
    }
    f
}

fn pipeline(provider: Arc<MockProvider>) -> GradingPipeline {
    let gateway = Gateway::new(provider, GatewayConfig { retry: RetryPolicy::immediate(2), parallelism: 4 });
    GradingPipeline::new(Arc::new(gateway), PipelineConfig { parallelism: 4 })
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

#[tokio::test]
async fn multiple_choice_grades_without_provider_calls() {
    let provider = Arc::new(MockProvider::new(MockFixture::default()));
    let p = pipeline(provider.clone());
    let subs = submissions(4);
    let out =
        p.run_grading("run".into(), &ssmc_question(), &subs, &ConfidencePolicy::default(), &[], None).await.unwrap();
    assert_eq!(provider.call_count(), 0);
    let scores: Vec<_> = out.records.iter().map(|r| r.score).collect();
    assert_eq!(scores, [0, 3, 0, 3].map(|s| Some(Points::from_int(s))));
    assert!(out.records.iter().all(|r| r.provenance == Provenance::Ai && r.status == GradeStatus::AiProposed));
}

#[tokio::test]
async fn one_failing_response_does_not_sink_the_run() {
    let mut f = fixture(10, &[BTreeSet::from(["units".into()])]);
    f.unavailable.insert("grade:q-text/s3".into());
    let p = pipeline(Arc::new(MockProvider::new(f)));
    let out = p
        .run_grading("run".into(), &text_question(), &submissions(10), &ConfidencePolicy::default(), &[], None)
        .await
        .unwrap();
    assert_eq!(out.records.len(), 10);
    let failed: Vec<&GradeRecord> = out.records.iter().filter(|r| r.failure.is_some()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].respondent, "s3");
    assert_eq!(failed[0].status, GradeStatus::ManualQueue);
    assert_eq!(failed[0].score, None);
    assert_eq!(out.run.counters.failed, 1);
    for r in out.records.iter().filter(|r| r.failure.is_none()) {
        assert_eq!(r.score, Some(Points::from_int(7)));
    }
}

#[tokio::test]
async fn concurrent_run_on_the_same_question_is_refused() {
    let p = Arc::new(pipeline(Arc::new(MockProvider::new(fixture(40, &[BTreeSet::new()])))));
    let subs = submissions(40);
    let q = text_question();
    let policy = ConfidencePolicy::default();
    let (a, b) = tokio::join!(
        p.run_grading("a".into(), &q, &subs, &policy, &[], None),
        p.run_grading("b".into(), &q, &subs, &policy, &[], None)
    );
    assert!(a.is_ok() != b.is_ok(), "exactly one run may proceed");
    assert!(!p.is_active(&q.id));
}

fn selection_strategy() -> impl Strategy<Value = BTreeSet<ItemId>> {
    proptest::sample::subsequence(vec!["sign", "units", "method"], 0..=3)
        .prop_map(|v| v.into_iter().map(ItemId::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regrade_reproduces_and_keeps_reviews(
        n in 1usize..12,
        picks in proptest::collection::vec(selection_strategy(), 1..4),
        reviewed_mask in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let rt = runtime();
        let p = pipeline(Arc::new(MockProvider::new(fixture(n, &picks))));
        let q = text_question();
        let subs = submissions(n);
        let policy = ConfidencePolicy::default();
        let first = rt.block_on(p.run_grading("r1".into(), &q, &subs, &policy, &[], None)).unwrap();

        let again = rt
            .block_on(p.regrade_with_wisdoms("r2".into(), &first.run, &q, &subs, &first.records, &policy, &[], None))
            .unwrap();
        let strip = |rs: &[GradeRecord]| {
            rs.iter().cloned().map(|mut r| { r.run_id = RunId::from("-"); r }).collect::<Vec<_>>()
        };
        prop_assert_eq!(strip(&again.records), strip(&first.records));

        let mut reviewed = first.records.clone();
        for (i, r) in reviewed.iter_mut().enumerate() {
            if reviewed_mask[i] {
                let decision = if i % 2 == 0 {
                    ReviewDecision::Confirm
                } else {
                    ReviewDecision::Override { selected_item_ids: BTreeSet::from(["method".into()]) }
                };
                *r = apply_review(r, &q, &decision, "ta").unwrap();
            }
        }
        let third = rt
            .block_on(p.regrade_with_wisdoms("r3".into(), &again.run, &q, &subs, &reviewed, &policy, &[], None))
            .unwrap();
        for (before, after) in reviewed.iter().zip(&third.records) {
            if before.status == GradeStatus::Reviewed {
                prop_assert_eq!(before, after);
            }
        }
    }
}
