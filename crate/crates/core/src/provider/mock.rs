//! Fixture-driven deterministic provider.
//!
//! Grades are looked up by `(question_id, respondent)`. Each row carries a
//! `pre` output used when no wisdoms are injected and an optional `post`
//! output used once the grade request carries at least one wisdom.
//! Summaries, feedback and wisdom drafts are produced from fixed templates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{ConfidenceTier, TranscriptionConfidence};
use crate::exact::Points;
use crate::ids::{DiscrepancyId, ItemId, QuestionId};
use crate::rubric::{ProviderRubricRequest, Rubric, RubricItem, Scheme};

use super::payload::{FeedbackPayload, GradePayload, SummarizePayload, SynthesizePayload, TranscribePayload};
use super::{Capability, Provider, ProviderError, ProviderRequest, WisdomDraft};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureTranscription {
    pub text: String,
    pub confidence: TranscriptionConfidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureGrade {
    pub selected: BTreeSet<ItemId>,
    pub confidence: ConfidenceTier,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureGradeRow {
    pub question_id: QuestionId,
    /// Student id, or submission id for unmatched submissions.
    pub student_id: String,
    pub pre: FixtureGrade,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<FixtureGrade>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixture {
    /// Region key → transcription.
    #[serde(default)]
    pub transcriptions: BTreeMap<String, FixtureTranscription>,
    #[serde(default)]
    pub grades: Vec<FixtureGradeRow>,
    #[serde(default)]
    pub rubrics: BTreeMap<QuestionId, Rubric>,
    /// `<capability>:<key>` entries that always fail as unavailable.
    #[serde(default)]
    pub unavailable: BTreeSet<String>,
    /// `<capability>:<key>` entries that answer with unusable output.
    #[serde(default)]
    pub malformed: BTreeSet<String>,
}

impl MockFixture {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Unavailable(format!("fixture {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::MalformedOutput(format!("fixture {}: {e}", path.display())))
    }

    pub fn grade_row(&self, question_id: &QuestionId, respondent: &str) -> Option<&FixtureGradeRow> {
        self.grades.iter().find(|r| &r.question_id == question_id && r.student_id == respondent)
    }
}

pub struct MockProvider {
    fixture: MockFixture,
    grade_index: BTreeMap<(QuestionId, String), usize>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(fixture: MockFixture) -> Self {
        let grade_index = fixture
            .grades
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.question_id.clone(), r.student_id.clone()), i))
            .collect();
        MockProvider { fixture, grade_index, calls: AtomicUsize::new(0) }
    }

    pub fn fixture(&self) -> &MockFixture {
        &self.fixture
    }

    /// Number of provider calls served so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn check_failures(&self, capability: Capability, key: &str) -> Result<(), ProviderError> {
        let tag = format!("{}:{key}", capability.as_str());
        if self.fixture.unavailable.contains(&tag) {
            return Err(ProviderError::Unavailable(format!("fixture marks {tag} unavailable")));
        }
        Ok(())
    }

    fn is_malformed(&self, capability: Capability, key: &str) -> bool {
        self.fixture.malformed.contains(&format!("{}:{key}", capability.as_str()))
    }

    fn transcribe(&self, p: TranscribePayload) -> Result<Value, ProviderError> {
        let key = p.region.key;
        self.check_failures(Capability::Transcribe, &key)?;
        if self.is_malformed(Capability::Transcribe, &key) {
            return Ok(json!({"unexpected": true}));
        }
        let row = self
            .fixture
            .transcriptions
            .get(&key)
            .ok_or_else(|| ProviderError::Unavailable(format!("no stored image for region {key}")))?;
        Ok(json!({"text": row.text, "confidence": row.confidence}))
    }

    fn grade(&self, p: GradePayload) -> Result<Value, ProviderError> {
        let key = format!("{}/{}", p.question_id, p.respondent);
        self.check_failures(Capability::Grade, &key)?;
        if self.is_malformed(Capability::Grade, &key) {
            return Ok(json!({
                "selected_item_ids": ["__hallucinated__"],
                "confidence": "high",
                "rationale": "",
            }));
        }
        let idx = self
            .grade_index
            .get(&(p.question_id.clone(), p.respondent.clone()))
            .ok_or_else(|| ProviderError::Unavailable(format!("no fixture grade row for {key}")))?;
        let row = &self.fixture.grades[*idx];
        let chosen = match (&row.post, p.wisdoms.is_empty()) {
            (Some(post), false) => post,
            _ => &row.pre,
        };
        Ok(json!({
            "selected_item_ids": chosen.selected,
            "confidence": chosen.confidence,
            "rationale": chosen.rationale,
        }))
    }

    fn summarize(&self, p: SummarizePayload) -> Result<Value, ProviderError> {
        let key = format!("{}/{}", p.question_id, p.respondent);
        self.check_failures(Capability::Summarize, &key)?;
        let text = if p.selected.is_empty() {
            "No errors identified.".to_string()
        } else {
            let labels: Vec<_> = p.selected.iter().map(|i| i.label.as_str()).collect();
            format!("Rubric items applied: {}.", labels.join("; "))
        };
        Ok(json!({ "text": text }))
    }

    fn feedback(&self, p: FeedbackPayload) -> Result<Value, ProviderError> {
        let key = format!("{}/{}", p.question_id, p.respondent);
        self.check_failures(Capability::Feedback, &key)?;
        let mut text = String::new();
        if let Some(style) = &p.style_prompt {
            text.push_str(&format!("[style: {style}] "));
        }
        if p.selected.is_empty() {
            text.push_str("No rubric items were applied to your response.");
        } else {
            let parts: Vec<_> = p.selected.iter().map(|i| format!("\"{}\" ({})", i.label, i.points)).collect();
            text.push_str(&format!("Your response was graded against: {}.", parts.join(", ")));
        }
        Ok(json!({ "text": text }))
    }

    fn synthesize(&self, p: SynthesizePayload) -> Result<Value, ProviderError> {
        self.check_failures(Capability::SynthesizeWisdoms, p.question_id.as_str())?;
        // One wisdom per distinct rubric item touched by any discrepancy, in rubric order.
        let mut by_item: BTreeMap<&ItemId, (usize, usize, Vec<DiscrepancyId>)> = BTreeMap::new();
        for d in &p.discrepancies {
            for id in &d.added {
                let entry = by_item.entry(id).or_default();
                entry.0 += 1;
                entry.2.push(d.id.clone());
            }
            for id in &d.removed {
                let entry = by_item.entry(id).or_default();
                entry.1 += 1;
                entry.2.push(d.id.clone());
            }
        }
        let mut drafts = Vec::new();
        let rubric_order = p.rubric.items.iter().map(|i| (&i.id, Some(i.label.as_str())));
        let unknown = by_item.keys().filter(|id| !p.rubric.contains(id)).map(|id| (*id, None)).collect::<Vec<_>>();
        for (id, label) in rubric_order.chain(unknown) {
            let Some((added, removed, sources)) = by_item.get(id) else { continue };
            let mut sources = sources.clone();
            sources.sort();
            sources.dedup();
            let label = label.unwrap_or(id.as_str());
            let text = format!(
                "When deciding on \"{label}\": the instructor applied it to {added} and removed it from {removed} of the sampled responses; follow those corrections for similar work."
            );
            drafts.push(WisdomDraft { text, item_ids: vec![(*id).clone()], source_discrepancy_ids: sources });
        }
        Ok(json!({ "wisdoms": drafts }))
    }

    fn propose_rubric(&self, p: ProviderRubricRequest) -> Result<Value, ProviderError> {
        self.check_failures(Capability::ProposeRubric, p.question_id.as_str())?;
        if let Some(r) = self.fixture.rubrics.get(&p.question_id) {
            return serde_json::to_value(r).map_err(|e| ProviderError::MalformedOutput(e.to_string()));
        }
        let budget = p.point_budget;
        let half = budget / Points::from_int(2);
        let rubric = match p.scheme {
            Scheme::Subtractive => Rubric {
                question_id: p.question_id,
                scheme: Scheme::Subtractive,
                items: vec![
                    RubricItem::new("incorrect-final-answer".into(), "Incorrect final answer", -half),
                    RubricItem::new("missing-justification".into(), "Missing justification", -half),
                ],
                base_points: budget,
                min_total: Points::ZERO,
                max_total: budget,
            },
            Scheme::Additive => Rubric {
                question_id: p.question_id,
                scheme: Scheme::Additive,
                items: vec![
                    RubricItem::new("correct-final-answer".into(), "Correct final answer", half),
                    RubricItem::new("sound-justification".into(), "Sound justification", half),
                ],
                base_points: Points::ZERO,
                min_total: Points::ZERO,
                max_total: budget,
            },
        };
        serde_json::to_value(rubric).map_err(|e| ProviderError::MalformedOutput(e.to_string()))
    }
}

fn parse<T: serde::de::DeserializeOwned>(request: &ProviderRequest) -> Result<T, ProviderError> {
    serde_json::from_value(request.payload.clone())
        .map_err(|e| ProviderError::Precondition(format!("bad {} payload: {e}", request.capability.as_str())))
}

#[async_trait]
impl Provider for MockProvider {
    fn name(&self) -> &'static str {
        "mock"
    }

    async fn call(&self, request: &ProviderRequest) -> Result<Value, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match request.capability {
            Capability::Transcribe => self.transcribe(parse(request)?),
            Capability::Grade => self.grade(parse(request)?),
            Capability::Summarize => self.summarize(parse(request)?),
            Capability::Feedback => self.feedback(parse(request)?),
            Capability::SynthesizeWisdoms => self.synthesize(parse(request)?),
            Capability::ProposeRubric => self.propose_rubric(parse(request)?),
        }
    }
}
