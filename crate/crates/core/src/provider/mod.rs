//! AI provider abstraction.
//!
//! Every model interaction (transcription, rubric proposal, grading,
//! summaries, feedback, wisdom synthesis) goes through [`Gateway`], which
//! wraps a raw [`Provider`] with retries, a parallelism bound, an
//! idempotency cache and output validation.

mod gateway;
mod http;
mod mock;
pub mod payload;
pub mod prompt;

use std::collections::BTreeSet;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical;
use crate::domain::{ConfidenceTier, Rect, TranscriptionConfidence};
use crate::ids::{DiscrepancyId, ItemId};

pub use gateway::{Gateway, GatewayConfig, PayloadLog, RetryPolicy};
pub use http::{HttpProvider, HttpProviderConfig};
pub use mock::{FixtureGrade, FixtureGradeRow, FixtureTranscription, MockFixture, MockProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Transcribe,
    ProposeRubric,
    Grade,
    Summarize,
    Feedback,
    SynthesizeWisdoms,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Transcribe => "transcribe",
            Capability::ProposeRubric => "propose_rubric",
            Capability::Grade => "grade",
            Capability::Summarize => "summarize",
            Capability::Feedback => "feedback",
            Capability::SynthesizeWisdoms => "synthesize_wisdoms",
        }
    }
}

/// A capability-specific payload plus the hash that identifies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub capability: Capability,
    pub payload: Value,
    pub idempotency_key: String,
}

impl ProviderRequest {
    pub fn new<P: Serialize>(capability: Capability, payload: &P) -> Result<Self, ProviderError> {
        let payload = canonical::to_value(payload)
            .map_err(|e| ProviderError::Precondition(format!("unserializable payload: {e}")))?;
        let idempotency_key =
            canonical::digest(&(capability, &payload)).map_err(|e| ProviderError::Precondition(e.to_string()))?;
        Ok(ProviderRequest { capability, payload, idempotency_key })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Transient failure; the gateway retries these.
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    /// The provider answered with something unusable. Not retried.
    #[error("malformed provider output: {0}")]
    MalformedOutput(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_))
    }
}

/// Raw provider backend. Implementations return the structured JSON output
/// of a capability; the gateway parses and validates it.
#[async_trait]
pub trait Provider: Send + Sync {
    fn name(&self) -> &'static str;

    async fn call(&self, request: &ProviderRequest) -> Result<Value, ProviderError>;
}

/// A region of a stored page image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRegion {
    /// Page image reference.
    pub image: String,
    pub rect: Rect,
    /// Stable lookup key, `<respondent>/<question id>` for answers and
    /// `<first page image>#name` for name boxes.
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderTranscription {
    pub text: String,
    pub confidence: TranscriptionConfidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderGradeResult {
    pub selected_item_ids: BTreeSet<ItemId>,
    pub confidence: ConfidenceTier,
    #[serde(default)]
    pub rationale: String,
}

/// Provider-side wisdom draft before ids and session bookkeeping are attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WisdomDraft {
    pub text: String,
    #[serde(default)]
    pub item_ids: Vec<ItemId>,
    pub source_discrepancy_ids: Vec<DiscrepancyId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct TextOutput {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct WisdomOutput {
    pub wisdoms: Vec<WisdomDraft>,
}
