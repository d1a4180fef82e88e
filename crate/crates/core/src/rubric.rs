//! Rubrics, score computation and rubric-proposal requests.
//!
//! A rubric is either subtractive (start from `base_points`, every selected
//! item deducts) or additive (start from zero, every selected item awards).
//! The running total is clamped into `[min_total, max_total]`, lower bound
//! first.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Question, QuestionFormat, ValidationReport};
use crate::exact::Points;
use crate::ids::{GradeRecordId, ItemId, QuestionId, WisdomId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Subtractive,
    Additive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricItem {
    pub id: ItemId,
    pub label: String,
    pub points: Points,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wisdom_notes: Vec<WisdomId>,
}

impl RubricItem {
    pub fn new(id: ItemId, label: impl Into<String>, points: Points) -> Self {
        RubricItem { id, label: label.into(), points, wisdom_notes: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub question_id: QuestionId,
    pub scheme: Scheme,
    pub items: Vec<RubricItem>,
    pub base_points: Points,
    pub min_total: Points,
    pub max_total: Points,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricSelection {
    pub grade_record_id: GradeRecordId,
    pub selected_item_ids: BTreeSet<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RubricError {
    #[error("unknown rubric item {0}")]
    UnknownRubricItem(ItemId),
    #[error("rubric proposals are only supported for text/code questions, not {0:?}")]
    FormatUnsupported(QuestionFormat),
}

impl Rubric {
    pub fn item(&self, id: &ItemId) -> Option<&RubricItem> {
        self.items.iter().find(|i| &i.id == id)
    }

    pub fn contains(&self, id: &ItemId) -> bool {
        self.item(id).is_some()
    }

    /// Ids of `selected` that are not part of this rubric.
    pub fn unknown_items<'a>(&self, selected: impl IntoIterator<Item = &'a ItemId>) -> Vec<ItemId> {
        selected.into_iter().filter(|id| !self.contains(id)).cloned().collect()
    }

    pub fn labels_for(&self, selected: &BTreeSet<ItemId>) -> Vec<&str> {
        self.items.iter().filter(|i| selected.contains(&i.id)).map(|i| i.label.as_str()).collect()
    }

    /// Score of a set of selected items.
    pub fn score(&self, selected: &BTreeSet<ItemId>) -> Result<Points, RubricError> {
        let mut sum = Points::ZERO;
        for id in selected {
            let item = self.item(id).ok_or_else(|| RubricError::UnknownRubricItem(id.clone()))?;
            sum += item.points;
        }
        let raw = match self.scheme {
            Scheme::Subtractive => self.base_points + sum,
            Scheme::Additive => sum,
        };
        Ok(raw.clamp_to(self.min_total, self.max_total))
    }

    /// Score for a response with no answer at all.
    ///
    /// Subtractive rubrics floor at `min_total`; additive rubrics score the
    /// empty selection.
    pub fn blank_score(&self) -> Points {
        match self.scheme {
            Scheme::Subtractive => self.min_total,
            Scheme::Additive => Points::ZERO.clamp_to(self.min_total, self.max_total),
        }
    }
}

pub fn compute_score(rubric: &Rubric, selection: &RubricSelection) -> Result<Points, RubricError> {
    rubric.score(&selection.selected_item_ids)
}

/// Reports sign/scheme inconsistencies, inverted bounds and duplicate ids.
pub fn validate_proposed_rubric(candidate: &Rubric) -> ValidationReport {
    let mut report = ValidationReport::default();
    if candidate.min_total > candidate.max_total {
        report.push(format!("min_total {} exceeds max_total {}", candidate.min_total, candidate.max_total));
    }
    match candidate.scheme {
        Scheme::Subtractive => {
            if candidate.base_points > candidate.max_total {
                report.push("subtractive base_points exceeds max_total");
            }
        }
        Scheme::Additive => {
            if !candidate.base_points.is_zero() {
                report.push("additive base_points must be 0");
            }
        }
    }
    let mut seen = HashSet::new();
    for item in &candidate.items {
        if !seen.insert(&item.id) {
            report.push(format!("duplicate item id {}", item.id));
        }
        if item.label.trim().is_empty() {
            report.push(format!("item {} has an empty label", item.id));
        }
        match candidate.scheme {
            Scheme::Subtractive if item.points.is_positive() => {
                report.push(format!("item {} awards {} in a subtractive rubric", item.id, item.points))
            }
            Scheme::Additive if item.points.is_negative() => {
                report.push(format!("item {} deducts {} in an additive rubric", item.id, item.points))
            }
            _ => {}
        }
    }
    report
}

/// Input for asking the provider to draft a rubric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRubricRequest {
    pub question_id: QuestionId,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    pub scheme: Scheme,
    pub point_budget: Points,
}

pub fn build_rubric_proposal_request(
    q: &Question,
    scheme: Scheme,
    point_budget: Points,
) -> Result<ProviderRubricRequest, RubricError> {
    if q.format != QuestionFormat::TextCode {
        return Err(RubricError::FormatUnsupported(q.format));
    }
    Ok(ProviderRubricRequest {
        question_id: q.id.clone(),
        statement: q.statement.clone(),
        reference_solution: q.reference_solution.clone(),
        scheme,
        point_budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::McPolicy;

    fn p(n: i64) -> Points {
        Points::from_int(n)
    }

    fn rubric(scheme: Scheme, items: &[i64], base: i64, min: i64, max: i64) -> Rubric {
        Rubric {
            question_id: "q".into(),
            scheme,
            items: items
                .iter()
                .enumerate()
                .map(|(i, pts)| RubricItem::new(ItemId::new(format!("i{i}")), format!("item {i}"), p(*pts)))
                .collect(),
            base_points: p(base),
            min_total: p(min),
            max_total: p(max),
        }
    }

    fn all(r: &Rubric) -> BTreeSet<ItemId> {
        r.items.iter().map(|i| i.id.clone()).collect()
    }

    #[test]
    fn subtractive_deductions() {
        let r = rubric(Scheme::Subtractive, &[-3, -2], 10, 0, 10);
        assert_eq!(r.score(&all(&r)).unwrap(), p(5));
    }

    #[test]
    fn subtractive_min_clamp() {
        let r = rubric(Scheme::Subtractive, &[-5, -4, -3], 10, 0, 10);
        assert_eq!(r.score(&all(&r)).unwrap(), p(0));
    }

    #[test]
    fn additive_sum() {
        let r = rubric(Scheme::Additive, &[4, 3, 3], 0, 0, 10);
        assert_eq!(r.score(&all(&r)).unwrap(), p(10));
    }

    #[test]
    fn additive_max_clamp() {
        let r = rubric(Scheme::Additive, &[4, 3, 3], 0, 0, 8);
        assert_eq!(r.score(&all(&r)).unwrap(), p(8));
    }

    #[test]
    fn unknown_item_is_an_error() {
        let r = rubric(Scheme::Additive, &[4], 0, 0, 8);
        let sel = RubricSelection { grade_record_id: "g".into(), selected_item_ids: [ItemId::from("nope")].into() };
        assert_eq!(compute_score(&r, &sel), Err(RubricError::UnknownRubricItem("nope".into())));
    }

    #[test]
    fn blank_scores() {
        assert_eq!(rubric(Scheme::Subtractive, &[-3], 10, 2, 10).blank_score(), p(2));
        assert_eq!(rubric(Scheme::Additive, &[3], 0, 0, 10).blank_score(), p(0));
    }

    #[test]
    fn validation_rules() {
        let mixed = rubric(Scheme::Additive, &[4, -2], 0, 0, 10);
        assert!(validate_proposed_rubric(&mixed).contains("deducts"));
        let inverted = rubric(Scheme::Additive, &[1], 0, 5, 3);
        assert!(validate_proposed_rubric(&inverted).contains("exceeds max_total"));
        let good = rubric(Scheme::Subtractive, &[-1, -2], 10, 0, 10);
        assert!(validate_proposed_rubric(&good).is_valid());
        let mut dup = good.clone();
        dup.items[1].id = dup.items[0].id.clone();
        assert!(validate_proposed_rubric(&dup).contains("duplicate"));
        let over_base = rubric(Scheme::Subtractive, &[-1], 12, 0, 10);
        assert!(validate_proposed_rubric(&over_base).contains("base_points"));
    }

    fn text_question(reference: Option<&str>, format: QuestionFormat) -> Question {
        Question {
            id: "q7".into(),
            assignment_id: "a".into(),
            ordinal: 7,
            format,
            statement: "Prove the sum of two even numbers is even.".into(),
            reference_solution: reference.map(str::to_string),
            answer_key: None,
            options: vec![],
            points: None,
            mc_policy: McPolicy::ExactMatch,
            rubric: None,
        }
    }

    #[test]
    fn proposal_request_embeds_reference_solution() {
        let q = text_question(Some("2a + 2b = 2(a + b)"), QuestionFormat::TextCode);
        let req = build_rubric_proposal_request(&q, Scheme::Subtractive, p(10)).unwrap();
        assert_eq!(req.statement, q.statement);
        assert_eq!(req.reference_solution.as_deref(), Some("2a + 2b = 2(a + b)"));
        assert_eq!(req.point_budget, p(10));
    }

    #[test]
    fn proposal_request_without_reference() {
        let q = text_question(None, QuestionFormat::TextCode);
        let req = build_rubric_proposal_request(&q, Scheme::Additive, p(5)).unwrap();
        assert!(req.reference_solution.is_none());
        let again = build_rubric_proposal_request(&q, Scheme::Additive, p(5)).unwrap();
        assert_eq!(req, again);
    }

    #[test]
    fn proposal_request_rejects_drawing() {
        let q = text_question(None, QuestionFormat::Drawing);
        assert_eq!(
            build_rubric_proposal_request(&q, Scheme::Additive, p(5)),
            Err(RubricError::FormatUnsupported(QuestionFormat::Drawing))
        );
    }
}
