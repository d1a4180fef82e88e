use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use chrono::DateTime;

use grader_core::domain::{ConfidenceTier, Course, McPolicy, Question, QuestionFormat, StudentRef};
use grader_core::exact::Points;
use grader_core::pipeline::{GradeRecord, GradeStatus, Provenance};
use grader_core::rubric::{Rubric, RubricItem, RubricSelection, Scheme};
use grader_core::store::{Clock, EntityKind, Expect, FixedClock, PendingWrite, Store, StoreError};

fn clock() -> Arc<dyn Clock> {
    Arc::new(FixedClock(DateTime::from_timestamp(1_700_000_000, 0).unwrap()))
}

fn course(id: &str, name: &str) -> Course {
    Course {
        id: id.into(),
        name: name.into(),
        roster: vec![StudentRef { id: "s1".into(), display_name: "Ada Lovelace".into() }],
        subject: None,
    }
}

fn question() -> Question {
    Question {
        id: "q1".into(),
        assignment_id: "a1".into(),
        ordinal: 1,
        format: QuestionFormat::TextCode,
        statement: "Prove it.".into(),
        reference_solution: None,
        answer_key: None,
        options: Vec::new(),
        points: None,
        mc_policy: McPolicy::ExactMatch,
        rubric: Some(Rubric {
            question_id: "q1".into(),
            scheme: Scheme::Subtractive,
            items: vec![RubricItem::new("gap".into(), "Gap in the argument", Points::from_int(-4))],
            base_points: Points::from_int(10),
            min_total: Points::ZERO,
            max_total: Points::from_int(10),
        }),
    }
}

fn record(score: i64) -> GradeRecord {
    GradeRecord {
        id: "r1".into(),
        run_id: "run".into(),
        submission_id: "sub".into(),
        question_id: "q1".into(),
        respondent: "s1".into(),
        student_id: Some("s1".into()),
        transcription: None,
        selection: RubricSelection { grade_record_id: "r1".into(), selected_item_ids: BTreeSet::from(["gap".into()]) },
        ai_selection: None,
        mc_response: None,
        blank: false,
        score: Some(Points::from_int(score)),
        confidence: ConfidenceTier::High,
        rationale: String::new(),
        summary: String::new(),
        comments: Vec::new(),
        feedback: None,
        status: GradeStatus::AiProposed,
        provenance: Provenance::Ai,
        failure: None,
        reviewed_by: None,
    }
}

#[test]
fn torn_tail_is_dropped_on_recovery() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path(), clock(), 1000).unwrap();
        store.insert(&course("c1", "Algebra"), "t").unwrap();
        store.update(&course("c1", "Algebra II"), 1, "t", "rename").unwrap();
    }
    let mut wal = std::fs::OpenOptions::new().append(true).open(dir.path().join("wal.jsonl")).unwrap();
    wal.write_all(b"{\"seq\":3,\"record\":{\"kind\":\"cou").unwrap();
    drop(wal);

    let store = Store::open(dir.path(), clock(), 1000).unwrap();
    let got = store.require::<Course>("c1").unwrap();
    assert_eq!((got.value.name.as_str(), got.version), ("Algebra II", 2));
}

#[test]
fn audit_survives_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path(), clock(), 2).unwrap();
        store.insert(&course("c1", "v1"), "alice").unwrap();
        for v in 1..6u64 {
            store.update(&course("c1", &format!("v{}", v + 1)), v, "bob", "rename").unwrap();
        }
    }
    let store = Store::open(dir.path(), clock(), 2).unwrap();
    let audit = store.audit_for(EntityKind::Course, "c1");
    assert_eq!(audit.iter().map(|a| a.version).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert_eq!(audit[0].actor, "alice");
    assert_eq!(store.require::<Course>("c1").unwrap().version, 6);
}

#[test]
fn stored_scores_must_match_the_rubric() {
    let store = Store::in_memory(clock());
    store.insert(&question(), "t").unwrap();
    let err = store.insert(&record(10), "t").unwrap_err();
    assert!(matches!(err, StoreError::Rejected(_)), "{err:?}");
    assert_eq!(store.insert(&record(6), "t").unwrap(), 1);
}

#[test]
fn guards_see_questions_written_in_the_same_batch() {
    let store = Store::in_memory(clock());
    let writes = vec![
        PendingWrite::of(&question(), Expect::Absent, "create").unwrap(),
        PendingWrite::of(&record(6), Expect::Absent, "graded").unwrap(),
    ];
    assert_eq!(store.commit(writes, "t").unwrap(), [1, 1]);
}
