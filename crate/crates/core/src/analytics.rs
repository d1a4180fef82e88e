//! Time-savings model, high-confidence accuracy and usage counters.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{ConfidenceTier, TranscriptionConfidence};
use crate::exact::Exact;
use crate::pipeline::{GradeRecord, GradeStatus, Provenance};
use crate::review::ConfidencePolicy;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("average grading time must be positive")]
    NonPositiveTime,
    #[error("student and question counts must be positive")]
    EmptyCohort,
    #[error("correctly autograded count {c} exceeds {total} responses")]
    CountOutOfRange { c: u64, total: u64 },
    #[error("accuracy needs at least one graded response")]
    ZeroTotal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSavingsInput {
    /// Average minutes to grade one response by hand.
    pub t_avg: Exact,
    /// Number of students.
    pub students: u64,
    /// Number of questions.
    pub questions: u64,
    /// Correctly autograded responses the instructor no longer has to grade.
    pub correct_autograded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSavings {
    pub t_without: Exact,
    pub t_with: Exact,
    pub saved_pct: Exact,
}

pub fn time_savings(input: &TimeSavingsInput) -> Result<TimeSavings, AnalyticsError> {
    if !input.t_avg.is_positive() {
        return Err(AnalyticsError::NonPositiveTime);
    }
    if input.students == 0 || input.questions == 0 {
        return Err(AnalyticsError::EmptyCohort);
    }
    let responses = input.students * input.questions;
    if input.correct_autograded > responses {
        return Err(AnalyticsError::CountOutOfRange { c: input.correct_autograded, total: responses });
    }
    let total = Exact::from_int(responses as i64);
    let c = Exact::from_int(input.correct_autograded as i64);
    Ok(TimeSavings {
        t_without: input.t_avg * total,
        t_with: input.t_avg * (total - c),
        saved_pct: Exact::from_int(100) * c / total,
    })
}

/// `100 · correct / total`, rounded half-up to one decimal.
pub fn accuracy(correct: u64, total: u64) -> Result<f64, AnalyticsError> {
    if total == 0 {
        return Err(AnalyticsError::ZeroTotal);
    }
    if correct > total {
        return Err(AnalyticsError::CountOutOfRange { c: correct, total });
    }
    let tenths = (2000 * correct as u128 + total as u128) / (2 * total as u128);
    Ok(tenths as f64 / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAccuracy {
    pub correct_high_conf: u64,
    pub total_high_conf: u64,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub subjects: BTreeMap<String, SubjectAccuracy>,
    pub overall: Option<SubjectAccuracy>,
}

/// A high-confidence AI grade that a human has looked at, and whether the
/// AI's selection survived.
fn high_conf_outcome(record: &GradeRecord) -> Option<bool> {
    if record.confidence != ConfidenceTier::High || record.status != GradeStatus::Reviewed {
        return None;
    }
    let ai = record.ai_selection.as_ref()?;
    Some(ai == &record.selection.selected_item_ids)
}

/// Accuracy of reviewed high-confidence AI grades, per subject tag.
pub fn accuracy_report<'a>(records: impl IntoIterator<Item = (&'a str, &'a GradeRecord)>) -> AccuracyReport {
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (subject, record) in records {
        if let Some(correct) = high_conf_outcome(record) {
            let entry = counts.entry(subject.to_string()).or_default();
            entry.1 += 1;
            if correct {
                entry.0 += 1;
            }
        }
    }
    let to_row = |(correct, total): (u64, u64)| SubjectAccuracy {
        correct_high_conf: correct,
        total_high_conf: total,
        accuracy_pct: accuracy(correct, total).unwrap_or(0.0),
    };
    let pooled = counts.values().fold((0, 0), |acc, (c, t)| (acc.0 + c, acc.1 + t));
    AccuracyReport {
        overall: (pooled.1 > 0).then(|| to_row(pooled)),
        subjects: counts.into_iter().map(|(k, v)| (k, to_row(v))).collect(),
    }
}

/// Whether the record was graded by the AI and accepted without a forced review.
fn auto_accepted(record: &GradeRecord, policy: &ConfidencePolicy) -> bool {
    let transcription_ok = record.transcription.as_ref().is_none_or(|t| t.confidence == TranscriptionConfidence::High);
    record.status != GradeStatus::ManualQueue
        && record.student_id.is_some()
        && transcription_ok
        && !policy.tier(record.confidence).require_review
}

fn ai_content_survived(record: &GradeRecord) -> bool {
    match record.provenance {
        Provenance::Ai => true,
        Provenance::Human => false,
        Provenance::AiThenHuman => {
            record.ai_selection.as_ref().is_some_and(|ai| ai == &record.selection.selected_item_ids)
        }
    }
}

/// Measured `c`: auto-accepted records whose AI grade survived review
/// unchanged or was never reviewed.
pub fn measured_correct_autograded(records: &[GradeRecord], policy: &ConfidencePolicy) -> u64 {
    records.iter().filter(|r| auto_accepted(r, policy) && ai_content_survived(r)).count() as u64
}

/// Responses an instructor still grades or verifies by hand: `I·J − c`.
pub fn review_workload(total_responses: u64, correct_autograded: u64) -> u64 {
    total_responses.saturating_sub(correct_autograded)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub day: NaiveDate,
    pub subject: String,
    pub graded: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyPoint {
    pub day: NaiveDate,
    pub graded: u64,
    pub cumulative: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub series: Vec<DailyPoint>,
    pub per_subject: BTreeMap<String, u64>,
    pub distribution_pct: BTreeMap<String, f64>,
    pub total: u64,
}

/// Cumulative graded-question counts per day inside `[from, to]`.
pub fn usage_counters(events: &[UsageEvent], window: Option<(NaiveDate, NaiveDate)>) -> UsageReport {
    let in_window = |d: &NaiveDate| window.is_none_or(|(from, to)| *d >= from && *d <= to);
    let mut per_day: BTreeMap<NaiveDate, u64> = BTreeMap::new();
    let mut per_subject: BTreeMap<String, u64> = BTreeMap::new();
    for e in events.iter().filter(|e| in_window(&e.day)) {
        *per_day.entry(e.day).or_default() += e.graded;
        *per_subject.entry(e.subject.clone()).or_default() += e.graded;
    }
    let mut cumulative = 0;
    let series = per_day
        .into_iter()
        .map(|(day, graded)| {
            cumulative += graded;
            DailyPoint { day, graded, cumulative }
        })
        .collect();
    let total: u64 = per_subject.values().sum();
    let distribution_pct = per_subject
        .iter()
        .map(|(k, v)| (k.clone(), if total == 0 { 0.0 } else { 100.0 * *v as f64 / total as f64 }))
        .collect();
    UsageReport { series, per_subject, distribution_pct, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input(t_avg: Exact, i: u64, j: u64, c: u64) -> TimeSavingsInput {
        TimeSavingsInput { t_avg, students: i, questions: j, correct_autograded: c }
    }

    #[test]
    fn headline_instance() {
        let s = time_savings(&input(Exact::from_int(3), 200, 10, 1300)).unwrap();
        assert_eq!(s.t_without, Exact::from_int(6000));
        assert_eq!(s.t_with, Exact::from_int(2100));
        assert_eq!(s.saved_pct, Exact::from_int(65));
    }

    #[test]
    fn boundaries() {
        let none = time_savings(&input(Exact::from_int(3), 200, 10, 0)).unwrap();
        assert_eq!(none.saved_pct, Exact::ZERO);
        assert_eq!(none.t_with, none.t_without);
        let all = time_savings(&input(Exact::from_int(3), 200, 10, 2000)).unwrap();
        assert_eq!(all.saved_pct, Exact::from_int(100));
        assert_eq!(all.t_with, Exact::ZERO);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(time_savings(&input(Exact::ZERO, 1, 1, 0)), Err(AnalyticsError::NonPositiveTime));
        assert_eq!(time_savings(&input(Exact::from_int(1), 0, 1, 0)), Err(AnalyticsError::EmptyCohort));
        assert!(matches!(
            time_savings(&input(Exact::from_int(1), 2, 2, 5)),
            Err(AnalyticsError::CountOutOfRange { .. })
        ));
    }

    #[test]
    fn table_accuracy_values() {
        assert_eq!(accuracy(954, 1000).unwrap(), 95.4);
        assert_eq!(accuracy(958, 1000).unwrap(), 95.8);
        assert_eq!(accuracy(0, 0), Err(AnalyticsError::ZeroTotal));
        assert_eq!(accuracy(2, 3).unwrap(), 66.7);
    }

    #[test]
    fn usage_series() {
        let d1 = NaiveDate::from_ymd_opt(2025, 3, 1).unwrap();
        let d2 = NaiveDate::from_ymd_opt(2025, 3, 2).unwrap();
        let events = vec![
            UsageEvent { day: d1, subject: "CS".into(), graded: 30 },
            UsageEvent { day: d1, subject: "Math".into(), graded: 20 },
            UsageEvent { day: d2, subject: "CS".into(), graded: 30 },
            UsageEvent { day: d2, subject: "Math".into(), graded: 20 },
        ];
        let r = usage_counters(&events, None);
        assert_eq!(r.series.len(), 2);
        assert_eq!(r.series[1].cumulative, 100);
        assert_eq!(r.distribution_pct["CS"], 60.0);
        assert_eq!(r.distribution_pct.values().sum::<f64>(), 100.0);
        assert!(usage_counters(&[], None).series.is_empty());
        assert_eq!(usage_counters(&events, Some((d2, d2))).total, 50);
    }

    proptest! {
        #[test]
        fn identity_and_range(num in 1i64..10_000, den in 1i64..100, i in 1u64..500, j in 1u64..30, frac in 0.0f64..=1.0) {
            let total = i * j;
            let c = ((total as f64) * frac).floor() as u64;
            let t_avg = Exact::new(num, den);
            let s = time_savings(&input(t_avg, i, j, c)).unwrap();
            prop_assert_eq!(s.t_with + t_avg * Exact::from_int(c as i64), s.t_without);
            prop_assert!(s.saved_pct >= Exact::ZERO && s.saved_pct <= Exact::from_int(100));
        }
    }
}
