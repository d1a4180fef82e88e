//! Final-grade exports.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use grader_core::canonical;
use grader_core::domain::{ConfidenceTier, Question};
use grader_core::exact::Points;
use grader_core::ids::{AssignmentId, ItemId, QuestionId};
use grader_core::pipeline::{GradeRecord, GradeStatus, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRow {
    pub student_id: Option<String>,
    pub respondent: String,
    pub question_id: QuestionId,
    pub question_ordinal: u32,
    pub score: Option<Points>,
    pub confidence: ConfidenceTier,
    pub provenance: Provenance,
    pub reviewed_by: Option<String>,
    pub status: GradeStatus,
    pub selected_item_ids: BTreeSet<ItemId>,
    pub summary: String,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeExport {
    pub assignment_id: AssignmentId,
    pub grades: Vec<GradeRow>,
}

/// Rows ordered by respondent, then question ordinal.
pub fn build(assignment_id: &AssignmentId, questions: &[Question], records: &[GradeRecord]) -> GradeExport {
    let ordinals: HashMap<&QuestionId, u32> = questions.iter().map(|q| (&q.id, q.ordinal)).collect();
    let mut grades: Vec<GradeRow> = records
        .iter()
        .filter_map(|r| {
            Some(GradeRow {
                student_id: r.student_id.as_ref().map(|s| s.to_string()),
                respondent: r.respondent.clone(),
                question_id: r.question_id.clone(),
                question_ordinal: *ordinals.get(&r.question_id)?,
                score: r.score,
                confidence: r.confidence,
                provenance: r.provenance,
                reviewed_by: r.reviewed_by.clone(),
                status: r.status,
                selected_item_ids: r.selection.selected_item_ids.clone(),
                summary: r.summary.clone(),
                feedback: r.feedback.clone(),
            })
        })
        .collect();
    grades.sort_by(|a, b| {
        (a.student_id.as_deref().unwrap_or(&a.respondent), a.question_ordinal)
            .cmp(&(b.student_id.as_deref().unwrap_or(&b.respondent), b.question_ordinal))
    });
    GradeExport { assignment_id: assignment_id.clone(), grades }
}

pub const CSV_HEADER: [&str; 6] =
    ["student_id", "question_ordinal", "score", "confidence", "provenance", "reviewed_by"];

pub fn to_csv(export: &GradeExport) -> Result<String, csv::Error> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(CSV_HEADER)?;
    for row in &export.grades {
        out.write_record([
            row.student_id.clone().unwrap_or_default(),
            row.question_ordinal.to_string(),
            row.score.map(|s| s.to_string()).unwrap_or_default(),
            row.confidence.as_str().to_string(),
            row.provenance.as_str().to_string(),
            row.reviewed_by.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = out.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn to_json(export: &GradeExport) -> serde_json::Result<String> {
    canonical::to_string(export)
}
