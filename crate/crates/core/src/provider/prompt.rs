//! Fixed prompt templates, one per capability.
//!
//! The HTTP provider sends the rendered prompt next to the structured
//! payload so a thin model adapter can forward it verbatim.

use serde_json::Value;

use super::payload::{
    FeedbackPayload, GradePayload, SummarizePayload, SynthesizePayload, TranscribePayload, TranscriptionPurpose,
};
use super::{Capability, ProviderRequest};
use crate::rubric::{ProviderRubricRequest, Scheme};

const TRANSCRIBE_ANSWER: &str =
    "Transcribe the handwritten or typed student work in the image region exactly as written. \
Preserve mathematical notation as LaTeX and code verbatim. Do not correct mistakes. \
Reply as JSON {\"text\": string, \"confidence\": \"high\"|\"low\"} where confidence is low if any part is illegible.";

const TRANSCRIBE_NAME: &str = "Read the student's handwritten name in the image region. \
Reply as JSON {\"text\": string, \"confidence\": \"high\"|\"low\"}.";

const GRADE: &str = "You are grading one student response against an instructor rubric. \
Select every rubric item that applies, using only the item ids listed. \
Follow the grading instructions after the rubric; they come from the instructor's own corrections. \
Reply as JSON {\"selected_item_ids\": [string], \"confidence\": \"high\"|\"medium\"|\"low\", \"rationale\": string}.";

const SUMMARIZE: &str =
    "Write a concise summary of the student response for a reviewer, naming each applied rubric item. \
Reply as JSON {\"text\": string}.";

const FEEDBACK: &str =
    "Write feedback to the student that explains each mistake, referencing the rubric item it relates to. \
Reply as JSON {\"text\": string}.";

const SYNTHESIZE: &str = "The instructor corrected the AI's rubric selections on a sample of responses. \
For each pattern of correction, write one explicit grading instruction that would have produced the instructor's selection. \
Cite the discrepancy ids each instruction is derived from. \
Reply as JSON {\"wisdoms\": [{\"text\": string, \"item_ids\": [string], \"source_discrepancy_ids\": [string]}]}.";

const PROPOSE: &str =
    "Draft a grading rubric for the problem below. Every item needs a short descriptive label and a point value. \
Reply as JSON with fields scheme, items [{id, label, points}], base_points, min_total, max_total.";

pub fn render(request: &ProviderRequest) -> String {
    render_payload(request.capability, &request.payload)
        .unwrap_or_else(|| format!("{}\n\n{}", instructions(request.capability), request.payload))
}

fn instructions(capability: Capability) -> &'static str {
    match capability {
        Capability::Transcribe => TRANSCRIBE_ANSWER,
        Capability::ProposeRubric => PROPOSE,
        Capability::Grade => GRADE,
        Capability::Summarize => SUMMARIZE,
        Capability::Feedback => FEEDBACK,
        Capability::SynthesizeWisdoms => SYNTHESIZE,
    }
}

fn render_payload(capability: Capability, payload: &Value) -> Option<String> {
    let text = match capability {
        Capability::Transcribe => {
            let p: TranscribePayload = serde_json::from_value(payload.clone()).ok()?;
            match p.purpose {
                TranscriptionPurpose::StudentName => TRANSCRIBE_NAME.to_string(),
                TranscriptionPurpose::Answer => match p.statement {
                    Some(s) => format!("{TRANSCRIBE_ANSWER}\n\nQuestion context:\n{s}"),
                    None => TRANSCRIBE_ANSWER.to_string(),
                },
            }
        }
        Capability::Grade => {
            let p: GradePayload = serde_json::from_value(payload.clone()).ok()?;
            let mut out = format!("{GRADE}\n\nProblem:\n{}\n", p.statement);
            if let Some(sol) = &p.reference_solution {
                out.push_str(&format!("\nReference solution:\n{sol}\n"));
            }
            let scheme = match p.rubric.scheme {
                Scheme::Subtractive => format!("subtractive from {} points", p.rubric.base_points),
                Scheme::Additive => "additive".to_string(),
            };
            out.push_str(&format!(
                "\nRubric ({scheme}, total between {} and {}):\n",
                p.rubric.min_total, p.rubric.max_total
            ));
            for item in &p.rubric.items {
                out.push_str(&format!("- [{}] {} ({})\n", item.id, item.label, item.points));
            }
            if !p.wisdoms.is_empty() {
                out.push_str("\nGrading instructions:\n");
                for w in &p.wisdoms {
                    out.push_str(&format!("- {}\n", w.text));
                }
            }
            out.push_str(&format!("\nStudent response:\n{}\n", p.transcription));
            out
        }
        Capability::Summarize => {
            let p: SummarizePayload = serde_json::from_value(payload.clone()).ok()?;
            let labels: Vec<_> = p.selected.iter().map(|i| i.label.as_str()).collect();
            format!(
                "{SUMMARIZE}\n\nApplied rubric items: {}\n\nStudent response:\n{}\n",
                if labels.is_empty() { "none".to_string() } else { labels.join("; ") },
                p.transcription
            )
        }
        Capability::Feedback => {
            let p: FeedbackPayload = serde_json::from_value(payload.clone()).ok()?;
            let mut out = FEEDBACK.to_string();
            if let Some(style) = &p.style_prompt {
                out.push_str(&format!("\nInstructor style guidance: {style}"));
            }
            out.push_str("\n\nApplied rubric items:\n");
            for item in &p.selected {
                out.push_str(&format!("- {} ({})\n", item.label, item.points));
            }
            out.push_str(&format!("\nStudent response:\n{}\n", p.transcription));
            out
        }
        Capability::SynthesizeWisdoms => {
            let p: SynthesizePayload = serde_json::from_value(payload.clone()).ok()?;
            let mut out = format!("{SYNTHESIZE}\n\nRubric:\n");
            for item in &p.rubric.items {
                out.push_str(&format!("- [{}] {} ({})\n", item.id, item.label, item.points));
            }
            out.push_str("\nDiscrepancies:\n");
            for d in &p.discrepancies {
                let added: Vec<_> = d.added.iter().map(|i| i.as_str()).collect();
                let removed: Vec<_> = d.removed.iter().map(|i| i.as_str()).collect();
                out.push_str(&format!(
                    "- {}: instructor added [{}], removed [{}]\n",
                    d.id,
                    added.join(", "),
                    removed.join(", ")
                ));
            }
            out
        }
        Capability::ProposeRubric => {
            let p: ProviderRubricRequest = serde_json::from_value(payload.clone()).ok()?;
            let mut out = format!(
                "{PROPOSE}\n\nScheme: {:?}. Point budget: {}.\n\nProblem:\n{}\n",
                p.scheme, p.point_budget, p.statement
            );
            if let Some(sol) = &p.reference_solution {
                out.push_str(&format!("\nReference solution:\n{sol}\n"));
            }
            out
        }
    };
    Some(text)
}
