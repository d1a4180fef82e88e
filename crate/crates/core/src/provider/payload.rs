//! Request payload documents, one per capability.
//!
//! These are the JSON shapes a provider receives. Output shapes are:
//! transcribe `{text, confidence}`, grade `{selected_item_ids, confidence,
//! rationale}`, summarize/feedback `{text}`, synthesize_wisdoms
//! `{wisdoms: [{text, item_ids, source_discrepancy_ids}]}`, propose_rubric
//! a rubric document.

use serde::{Deserialize, Serialize};

use crate::calibration::Discrepancy;
use crate::domain::ConfidenceTier;
use crate::exact::Points;
use crate::ids::{ItemId, QuestionId, WisdomId};
use crate::rubric::Rubric;

use super::ImageRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptionPurpose {
    Answer,
    StudentName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscribePayload {
    pub purpose: TranscriptionPurpose,
    pub region: ImageRegion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<QuestionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WisdomInstruction {
    pub id: WisdomId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradePayload {
    pub question_id: QuestionId,
    pub respondent: String,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    pub rubric: Rubric,
    pub transcription: String,
    /// Active wisdoms in injection order.
    pub wisdoms: Vec<WisdomInstruction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: ItemId,
    pub label: String,
    pub points: Points,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarizePayload {
    pub question_id: QuestionId,
    pub respondent: String,
    pub transcription: String,
    pub selected: Vec<LabeledItem>,
    pub confidence: ConfidenceTier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub question_id: QuestionId,
    pub respondent: String,
    pub transcription: String,
    pub selected: Vec<LabeledItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Points>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesizePayload {
    pub question_id: QuestionId,
    pub rubric: Rubric,
    pub discrepancies: Vec<Discrepancy>,
}

pub(crate) fn labeled(rubric: &Rubric, selected: &std::collections::BTreeSet<ItemId>) -> Vec<LabeledItem> {
    rubric
        .items
        .iter()
        .filter(|i| selected.contains(&i.id))
        .map(|i| LabeledItem { id: i.id.clone(), label: i.label.clone(), points: i.points })
        .collect()
}
