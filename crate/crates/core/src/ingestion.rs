//! Bulk scan intake: split uploads into submissions, match cover-page names
//! to the roster, and bind unmatched submissions by hand.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::domain::{MatchStatus, PageRegion, Question, StudentRef, Submission};
use crate::ids::{self, AssignmentId, QuestionId, StudentId, SubmissionId};
use crate::provider::{Gateway, ImageRegion};

/// One uploaded file. `page` is the global 0-based index of its first page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestFile {
    Image {
        image: String,
        page: usize,
    },
    /// Multi-page PDF; page `k` is referenced as `<pdf>#page=<k+1>`.
    Pdf {
        pdf: String,
        page: usize,
        pages: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadManifest {
    pub assignment_id: AssignmentId,
    /// Pages per submission.
    pub template_pages: usize,
    pub files: Vec<ManifestFile>,
    /// Question ordinal → region within the template.
    pub layout: BTreeMap<u32, PageRegion>,
    pub name_region: PageRegion,
    /// Set for a per-student upload, which skips name matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_id: Option<StudentId>,
    /// Extracted multiple-choice marks, one map (ordinal → options) per submission.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mc_responses: Vec<BTreeMap<u32, BTreeSet<String>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("{pages} pages do not divide into {template}-page submissions")]
    PageCountMismatch { pages: usize, template: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("layout references unknown question ordinal {0}")]
    UnknownOrdinal(u32),
    #[error("roster is empty")]
    EmptyRoster,
    #[error("submission {0} is already matched")]
    AlreadyMatched(SubmissionId),
    #[error("student {0} is not on the roster")]
    NotOnRoster(StudentId),
    #[error("submission {0} has no name region")]
    NoNameRegion(SubmissionId),
}

/// Page references in upload order.
pub fn expand_pages(files: &[ManifestFile]) -> Result<Vec<String>, IngestError> {
    let mut indexed: Vec<(usize, String)> = Vec::new();
    for file in files {
        match file {
            ManifestFile::Image { image, page } => indexed.push((*page, image.clone())),
            ManifestFile::Pdf { pdf, page, pages } => {
                for k in 0..*pages {
                    indexed.push((page + k, format!("{pdf}#page={}", k + 1)));
                }
            }
        }
    }
    indexed.sort_by_key(|(i, _)| *i);
    for (expected, (actual, _)) in indexed.iter().enumerate() {
        if expected != *actual {
            return Err(IngestError::InvalidManifest(format!(
                "page indices must be contiguous from 0; expected {expected}, found {actual}"
            )));
        }
    }
    Ok(indexed.into_iter().map(|(_, r)| r).collect())
}

fn check_region(what: &str, region: &PageRegion, template: usize) -> Result<(), IngestError> {
    if !region.rect.is_normalized() {
        return Err(IngestError::InvalidManifest(format!("{what} rectangle outside [0,1]²")));
    }
    if region.page >= template {
        return Err(IngestError::InvalidManifest(format!(
            "{what} page offset {} beyond the {template}-page template",
            region.page
        )));
    }
    Ok(())
}

/// Split a bulk upload into one submission per template-sized page group.
pub fn split_submissions(
    manifest: &UploadManifest,
    questions: &[Question],
    roster: &[StudentRef],
) -> Result<Vec<Submission>, IngestError> {
    let template = manifest.template_pages;
    if template == 0 {
        return Err(IngestError::InvalidManifest("template_pages must be positive".into()));
    }
    check_region("name region", &manifest.name_region, template)?;
    let by_ordinal: HashMap<u32, &QuestionId> =
        questions.iter().filter(|q| q.assignment_id == manifest.assignment_id).map(|q| (q.ordinal, &q.id)).collect();
    let mut region_map = BTreeMap::new();
    for (ordinal, region) in &manifest.layout {
        check_region(&format!("question {ordinal}"), region, template)?;
        let qid = by_ordinal.get(ordinal).ok_or(IngestError::UnknownOrdinal(*ordinal))?;
        region_map.insert((*qid).clone(), *region);
    }

    let pages = expand_pages(&manifest.files)?;
    if pages.is_empty() || pages.len() % template != 0 {
        return Err(IngestError::PageCountMismatch { pages: pages.len(), template });
    }
    let groups = pages.len() / template;

    let individual = match &manifest.student_id {
        Some(id) => {
            if groups != 1 {
                return Err(IngestError::InvalidManifest(
                    "a per-student upload must contain exactly one submission".into(),
                ));
            }
            let student = roster.iter().find(|s| &s.id == id).ok_or_else(|| IngestError::NotOnRoster(id.clone()))?;
            Some(student.clone())
        }
        None => None,
    };
    if !manifest.mc_responses.is_empty() && manifest.mc_responses.len() != groups {
        return Err(IngestError::InvalidManifest(format!(
            "{} multiple-choice rows for {groups} submissions",
            manifest.mc_responses.len()
        )));
    }

    pages
        .chunks(template)
        .enumerate()
        .map(|(i, chunk)| {
            let mut mc_responses = BTreeMap::new();
            if let Some(row) = manifest.mc_responses.get(i) {
                for (ordinal, chosen) in row {
                    let qid = by_ordinal.get(ordinal).ok_or(IngestError::UnknownOrdinal(*ordinal))?;
                    mc_responses.insert((*qid).clone(), chosen.clone());
                }
            }
            Ok(Submission {
                id: SubmissionId::new(ids::derived(&["submission", manifest.assignment_id.as_str(), &chunk[0]])),
                assignment_id: manifest.assignment_id.clone(),
                student: individual.clone(),
                pages: chunk.to_vec(),
                region_map: region_map.clone(),
                name_region: Some(manifest.name_region),
                mc_responses,
                match_status: if individual.is_some() { MatchStatus::Individual } else { MatchStatus::Unmatched },
            })
        })
        .collect()
}

/// Concatenated page references of `submissions`, in order.
pub fn concat_pages(submissions: &[Submission]) -> Vec<String> {
    submissions.iter().flat_map(|s| s.pages.iter().cloned()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// At or above: matched automatically.
    pub auto_threshold: f64,
    /// Below: left unmatched.
    pub review_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { auto_threshold: 0.8, review_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub submission_id: SubmissionId,
    pub transcribed_name: String,
    pub candidate: Option<StudentRef>,
    pub match_score: f64,
    pub status: MatchStatus,
}

fn normalize_name(name: &str) -> String {
    name.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect()
}

/// `1 − levenshtein / max_len` over case-folded names with whitespace removed.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (normalize_name(a), normalize_name(b));
    if a.is_empty() || b.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    strsim::normalized_levenshtein(&a, &b)
}

/// Pick the closest roster entry for a transcribed name.
pub fn classify_name(
    submission_id: &SubmissionId,
    transcribed: &str,
    roster: &[StudentRef],
    config: &MatchConfig,
) -> Result<MatchResult, IngestError> {
    if roster.is_empty() {
        return Err(IngestError::EmptyRoster);
    }
    let scored: Vec<(f64, &StudentRef)> =
        roster.iter().map(|s| (name_similarity(transcribed, &s.display_name), s)).collect();
    let best = scored.iter().map(|(score, _)| *score).fold(f64::NEG_INFINITY, f64::max);
    let leaders: Vec<&StudentRef> = scored.iter().filter(|(s, _)| *s == best).map(|(_, s)| *s).collect();
    let (candidate, status) = if best < config.review_threshold {
        (None, MatchStatus::Unmatched)
    } else if leaders.len() > 1 || best < config.auto_threshold {
        (Some(leaders[0].clone()), MatchStatus::NeedsReview)
    } else {
        (Some(leaders[0].clone()), MatchStatus::AutoMatched)
    };
    Ok(MatchResult {
        submission_id: submission_id.clone(),
        transcribed_name: transcribed.to_string(),
        candidate,
        match_score: best,
        status,
    })
}

/// Transcribe the name box of `sub` and classify it against the roster.
pub async fn match_student(
    gateway: &Gateway,
    sub: &Submission,
    roster: &[StudentRef],
    config: &MatchConfig,
) -> Result<MatchResult, IngestError> {
    if roster.is_empty() {
        return Err(IngestError::EmptyRoster);
    }
    let region = sub.name_region.ok_or_else(|| IngestError::NoNameRegion(sub.id.clone()))?;
    let image = sub.pages.get(region.page).ok_or_else(|| IngestError::NoNameRegion(sub.id.clone()))?;
    let image_region = ImageRegion { image: image.clone(), rect: region.rect, key: format!("{}#name", sub.pages[0]) };
    match gateway.transcribe_name(&image_region).await {
        Ok(t) => classify_name(&sub.id, &t.text, roster, config),
        Err(err) => {
            tracing::warn!(submission = %sub.id, %err, "name transcription failed");
            Ok(MatchResult {
                submission_id: sub.id.clone(),
                transcribed_name: String::new(),
                candidate: None,
                match_score: 0.0,
                status: MatchStatus::Unmatched,
            })
        }
    }
}

/// Single-writer reservation of (assignment, student) pairs.
#[derive(Debug, Default)]
pub struct MatchReservations {
    taken: HashMap<(AssignmentId, StudentId), SubmissionId>,
}

impl MatchReservations {
    pub fn with_bound(bound: impl IntoIterator<Item = (AssignmentId, StudentId, SubmissionId)>) -> Self {
        MatchReservations { taken: bound.into_iter().map(|(a, s, sub)| ((a, s), sub)).collect() }
    }

    /// Reserve the pair; false if another submission already holds it.
    pub fn reserve(&mut self, assignment: &AssignmentId, student: &StudentId, submission: &SubmissionId) -> bool {
        let key = (assignment.clone(), student.clone());
        match self.taken.get(&key) {
            Some(holder) => holder == submission,
            None => {
                self.taken.insert(key, submission.clone());
                true
            }
        }
    }
}

/// Bind an auto-matched student to the submission, or record why not.
pub fn apply_match(sub: &mut Submission, result: &mut MatchResult, reservations: &mut MatchReservations) {
    if result.status == MatchStatus::AutoMatched {
        let student = result.candidate.as_ref().expect("auto match has a candidate");
        if !reservations.reserve(&sub.assignment_id, &student.id, &sub.id) {
            result.status = MatchStatus::NeedsReview;
        }
    }
    sub.match_status = result.status;
    sub.student = (result.status == MatchStatus::AutoMatched).then(|| result.candidate.clone()).flatten();
}

/// Match every unbound submission concurrently, then apply the duplicate
/// rule in submission order so results do not depend on scheduling.
pub async fn match_all(
    gateway: &Gateway,
    submissions: &mut [Submission],
    roster: &[StudentRef],
    config: &MatchConfig,
    reservations: &mut MatchReservations,
    parallelism: usize,
) -> Result<Vec<MatchResult>, IngestError> {
    if roster.is_empty() {
        return Err(IngestError::EmptyRoster);
    }
    let pending: Vec<usize> = (0..submissions.len()).filter(|i| !submissions[*i].match_status.is_bound()).collect();
    let mut calls = Vec::with_capacity(pending.len());
    for i in &pending {
        calls.push(match_student(gateway, &submissions[*i], roster, config));
    }
    let results: Vec<Result<MatchResult, IngestError>> =
        stream::iter(calls).buffered(parallelism.max(1)).collect().await;
    let mut out = Vec::with_capacity(results.len());
    for (i, result) in pending.into_iter().zip(results) {
        let mut result = result?;
        apply_match(&mut submissions[i], &mut result, reservations);
        out.push(result);
    }
    Ok(out)
}

/// Manually bind a submission that matching could not settle.
pub fn resolve_match(sub: &Submission, student: &StudentId, roster: &[StudentRef]) -> Result<Submission, IngestError> {
    if sub.match_status.is_bound() {
        return Err(IngestError::AlreadyMatched(sub.id.clone()));
    }
    let student = roster.iter().find(|s| &s.id == student).ok_or_else(|| IngestError::NotOnRoster(student.clone()))?;
    let mut bound = sub.clone();
    bound.student = Some(student.clone());
    bound.match_status = MatchStatus::Resolved;
    Ok(bound)
}

/// Students already bound to some submission of an assignment.
pub fn bound_students(submissions: &[Submission]) -> HashSet<StudentId> {
    submissions
        .iter()
        .filter(|s| s.match_status.is_bound())
        .filter_map(|s| s.student.as_ref().map(|st| st.id.clone()))
        .collect()
}
