//! Canonical entity types shared by every module.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::exact::Points;
use crate::ids::{AssignmentId, CourseId, QuestionId, StudentId, SubmissionId};
use crate::review::ConfidencePolicy;
use crate::rubric::{validate_proposed_rubric, Rubric};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRef {
    pub id: StudentId,
    /// The name as a student would write it on the cover page.
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Course {
    pub id: CourseId,
    pub name: String,
    #[serde(default)]
    pub roster: Vec<StudentRef>,
    /// Free-form subject tag used to group analytics (for example "CS").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl Course {
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = HashSet::new();
        for student in &self.roster {
            if !seen.insert(&student.id) {
                report.push(format!("duplicate roster student id {}", student.id));
            }
            if student.display_name.trim().is_empty() {
                report.push(format!("student {} has an empty display name", student.id));
            }
        }
        report
    }

    pub fn student(&self, id: &StudentId) -> Option<&StudentRef> {
        self.roster.iter().find(|s| &s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: AssignmentId,
    pub course_id: CourseId,
    pub title: String,
    #[serde(default)]
    pub policy: ConfidencePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFormat {
    /// Single-select multiple choice.
    Ssmc,
    /// Multi-select multiple choice.
    Msmc,
    Drawing,
    TextCode,
}

impl QuestionFormat {
    pub fn is_multiple_choice(self) -> bool {
        matches!(self, QuestionFormat::Ssmc | QuestionFormat::Msmc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McPolicy {
    #[default]
    ExactMatch,
    PerOption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub assignment_id: AssignmentId,
    /// 1-based position within the assignment.
    pub ordinal: u32,
    pub format: QuestionFormat,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_key: Option<BTreeSet<String>>,
    /// Option labels of a multiple-choice question.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    /// Points for a multiple-choice question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Points>,
    #[serde(default)]
    pub mc_policy: McPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<Rubric>,
}

/// Axis-aligned rectangle in normalized page coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub const FULL: Rect = Rect { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };

    pub fn is_normalized(&self) -> bool {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        finite
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0
            && self.y + self.h <= 1.0
    }
}

/// A region on one page of a submission, by page offset within the submission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageRegion {
    pub page: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    #[default]
    Unmatched,
    NeedsReview,
    AutoMatched,
    /// Bound by an instructor after review.
    Resolved,
    /// Uploaded per student; never went through name matching.
    Individual,
}

impl MatchStatus {
    pub fn is_bound(self) -> bool {
        matches!(self, MatchStatus::AutoMatched | MatchStatus::Resolved | MatchStatus::Individual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub id: SubmissionId,
    pub assignment_id: AssignmentId,
    #[serde(default)]
    pub student: Option<StudentRef>,
    /// Ordered page image references.
    pub pages: Vec<String>,
    #[serde(default)]
    pub region_map: BTreeMap<QuestionId, PageRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_region: Option<PageRegion>,
    /// Already-extracted multiple-choice selections.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mc_responses: BTreeMap<QuestionId, BTreeSet<String>>,
    #[serde(default)]
    pub match_status: MatchStatus,
}

impl Submission {
    /// Stable key for the respondent: the student id once bound, else the submission id.
    pub fn respondent_key(&self) -> &str {
        match &self.student {
            Some(s) => s.id.as_str(),
            None => self.id.as_str(),
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.pages.is_empty() {
            report.push("submission has no pages");
        }
        for (qid, region) in &self.region_map {
            if region.page >= self.pages.len() {
                report.push(format!("region for {qid} points past the last page"));
            }
            if !region.rect.is_normalized() {
                report.push(format!("region for {qid} is outside the unit square"));
            }
        }
        report
    }
}

/// Confidence of an AI grade. Ordered `Low < Medium < High`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceTier {
    Low,
    Medium,
    High,
}

impl ConfidenceTier {
    pub const ALL: [ConfidenceTier; 3] = [ConfidenceTier::Low, ConfidenceTier::Medium, ConfidenceTier::High];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceTier::Low => "low",
            ConfidenceTier::Medium => "medium",
            ConfidenceTier::High => "high",
        }
    }
}

/// Binary confidence of a transcription.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptionConfidence {
    Low,
    High,
}

/// Invariant violations. An empty report means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, violation: impl Into<String>) {
        self.violations.push(violation.into());
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

pub fn validate_question(q: &Question) -> ValidationReport {
    let mut report = ValidationReport::default();
    if q.ordinal == 0 {
        report.push("ordinal must be 1-based");
    }
    if q.statement.trim().is_empty() {
        report.push("statement empty");
    }
    match q.format {
        QuestionFormat::Ssmc => match &q.answer_key {
            None => report.push("SSMC key missing"),
            Some(key) if key.len() != 1 => report.push("SSMC key must be exactly one option"),
            Some(_) => {}
        },
        QuestionFormat::Msmc => match &q.answer_key {
            None => report.push("MSMC key missing"),
            Some(key) if key.is_empty() => report.push("MSMC key empty"),
            Some(_) => {}
        },
        QuestionFormat::TextCode => {
            if q.rubric.is_none() {
                report.push("rubric required before grading");
            }
        }
        QuestionFormat::Drawing => {}
    }
    if q.format.is_multiple_choice() {
        if q.points.is_none_or(|p| !p.is_positive()) {
            report.push("multiple-choice points must be positive");
        }
        if let Some(key) = &q.answer_key {
            if !q.options.is_empty() {
                for label in key.iter().filter(|l| !q.options.contains(l)) {
                    report.push(format!("answer key label {label} is not an option"));
                }
            }
        }
        if q.mc_policy == McPolicy::PerOption && q.options.is_empty() {
            report.push("per-option credit needs the option list");
        }
    } else if q.answer_key.is_some() {
        report.push("answer key only applies to multiple-choice formats");
    }
    if let Some(rubric) = &q.rubric {
        if rubric.question_id != q.id {
            report.push("rubric belongs to a different question");
        }
        report.extend(validate_proposed_rubric(rubric));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ItemId;
    use crate::rubric::{RubricItem, Scheme};

    fn question(format: QuestionFormat) -> Question {
        Question {
            id: "q1".into(),
            assignment_id: "a1".into(),
            ordinal: 1,
            format,
            statement: "Solve x^2 - 16 = 0".into(),
            reference_solution: None,
            answer_key: None,
            options: vec![],
            points: None,
            mc_policy: McPolicy::ExactMatch,
            rubric: None,
        }
    }

    fn key(labels: &[&str]) -> Option<BTreeSet<String>> {
        Some(labels.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn ssmc_with_single_key_is_valid() {
        let mut q = question(QuestionFormat::Ssmc);
        q.answer_key = key(&["B"]);
        q.points = Some(Points::from_int(2));
        assert!(validate_question(&q).is_valid(), "{:?}", validate_question(&q));
    }

    #[test]
    fn msmc_with_empty_key_is_reported() {
        let mut q = question(QuestionFormat::Msmc);
        q.answer_key = key(&[]);
        q.points = Some(Points::from_int(4));
        let report = validate_question(&q);
        assert_eq!(report.violations, vec!["MSMC key empty".to_string()]);
    }

    #[test]
    fn text_code_without_rubric_is_reported() {
        let q = question(QuestionFormat::TextCode);
        assert_eq!(validate_question(&q).violations, vec!["rubric required before grading".to_string()]);
    }

    #[test]
    fn text_code_with_rubric_is_valid() {
        let mut q = question(QuestionFormat::TextCode);
        q.rubric = Some(Rubric {
            question_id: "q1".into(),
            scheme: Scheme::Subtractive,
            items: vec![RubricItem::new(ItemId::from("r1"), "sign error", Points::from_int(-2))],
            base_points: Points::from_int(10),
            min_total: Points::ZERO,
            max_total: Points::from_int(10),
        });
        assert!(validate_question(&q).is_valid());
    }

    #[test]
    fn ssmc_with_two_labels_is_reported() {
        let mut q = question(QuestionFormat::Ssmc);
        q.answer_key = key(&["A", "B"]);
        q.points = Some(Points::from_int(1));
        assert!(validate_question(&q).contains("exactly one"));
    }

    #[test]
    fn tier_order_is_total() {
        use ConfidenceTier::*;
        assert!(Low < Medium && Medium < High && Low < High);
        let mut tiers = vec![High, Low, Medium];
        tiers.sort();
        assert_eq!(tiers, vec![Low, Medium, High]);
    }

    #[test]
    fn duplicate_roster_ids_are_reported() {
        let s = StudentRef { id: "s1".into(), display_name: "Ada".into() };
        let course = Course { id: "c1".into(), name: "Intro".into(), roster: vec![s.clone(), s], subject: None };
        assert!(!course.validate().is_valid());
    }

    #[test]
    fn rect_bounds() {
        assert!(Rect::FULL.is_normalized());
        assert!(!Rect { x: 0.5, y: 0.0, w: 0.6, h: 0.1 }.is_normalized());
    }
}
