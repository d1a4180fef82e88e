use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tokio::sync::{OnceCell, Semaphore};

use crate::calibration::{Discrepancy, GradingWisdom};
use crate::canonical;
use crate::domain::{Question, TranscriptionConfidence};
use crate::ids::QuestionId;
use crate::pipeline::GradeRecord;
use crate::rubric::{validate_proposed_rubric, ProviderRubricRequest, Rubric};

use super::payload::{
    labeled, FeedbackPayload, GradePayload, SummarizePayload, SynthesizePayload, TranscribePayload,
    TranscriptionPurpose, WisdomInstruction,
};
use super::{
    Capability, ImageRegion, Provider, ProviderError, ProviderGradeResult, ProviderRequest, ProviderTranscription,
    TextOutput, WisdomDraft, WisdomOutput,
};

/// Exponential backoff for retryable provider errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(200) }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy { attempts, base_delay: Duration::ZERO }
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatewayConfig {
    pub retry: RetryPolicy,
    /// Maximum concurrent in-flight provider calls.
    pub parallelism: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { retry: RetryPolicy::default(), parallelism: 8 }
    }
}

/// Sink for canonical-JSON request/response audit lines.
pub struct PayloadLog {
    out: std::sync::Mutex<Box<dyn Write + Send>>,
}

impl PayloadLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        PayloadLog { out: std::sync::Mutex::new(out) }
    }

    fn record(&self, request: &ProviderRequest, outcome: &Result<Value, ProviderError>) {
        let line = json!({
            "capability": request.capability,
            "idempotency_key": request.idempotency_key,
            "payload": request.payload,
            "response": outcome.as_ref().ok(),
            "error": outcome.as_ref().err().map(|e| e.to_string()),
        });
        let Ok(encoded) = canonical::to_string(&line) else { return };
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(err) = writeln!(out, "{encoded}") {
            tracing::warn!(%err, "provider payload log write failed");
        }
    }
}

/// Shared front door to the provider.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    config: GatewayConfig,
    permits: Semaphore,
    cache: std::sync::Mutex<HashMap<String, Arc<OnceCell<Value>>>>,
    log: Option<PayloadLog>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, config: GatewayConfig) -> Self {
        Gateway {
            provider,
            permits: Semaphore::new(config.parallelism.max(1)),
            config,
            cache: Default::default(),
            log: None,
        }
    }

    pub fn with_payload_log(mut self, log: PayloadLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn provider_name(&self) -> &'static str {
        self.provider.name()
    }

    pub fn config(&self) -> GatewayConfig {
        self.config
    }

    /// Execute a request, reusing the cached output of an identical earlier
    /// request. Concurrent callers with the same key share one provider call.
    pub async fn execute(&self, request: &ProviderRequest) -> Result<Value, ProviderError> {
        let cell = {
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            cache.entry(request.idempotency_key.clone()).or_default().clone()
        };
        cell.get_or_try_init(|| self.call_with_retry(request)).await.cloned()
    }

    async fn call_with_retry(&self, request: &ProviderRequest) -> Result<Value, ProviderError> {
        let attempts = self.config.retry.attempts.max(1);
        let mut last = ProviderError::Unavailable("no attempt made".into());
        for attempt in 1..=attempts {
            if attempt > 1 {
                tokio::time::sleep(self.config.retry.delay_before(attempt - 1)).await;
            }
            let outcome = {
                let _permit =
                    self.permits.acquire().await.map_err(|_| ProviderError::Unavailable("gateway closed".into()))?;
                self.provider.call(request).await
            };
            if let Some(log) = &self.log {
                log.record(request, &outcome);
            }
            match outcome {
                Ok(value) => return Ok(value),
                Err(err) if err.is_retryable() => {
                    tracing::debug!(attempt, capability = request.capability.as_str(), %err, "retrying provider call");
                    last = err;
                }
                Err(err) => return Err(err),
            }
        }
        Err(last)
    }

    async fn typed<T: DeserializeOwned>(&self, request: &ProviderRequest) -> Result<T, ProviderError> {
        let value = self.execute(request).await?;
        serde_json::from_value(value)
            .map_err(|e| ProviderError::MalformedOutput(format!("{} output: {e}", request.capability.as_str())))
    }

    pub async fn transcribe(
        &self,
        region: &ImageRegion,
        context: Option<&Question>,
    ) -> Result<ProviderTranscription, ProviderError> {
        let payload = TranscribePayload {
            purpose: TranscriptionPurpose::Answer,
            region: region.clone(),
            question_id: context.map(|q| q.id.clone()),
            statement: context.map(|q| q.statement.clone()),
        };
        self.typed(&ProviderRequest::new(Capability::Transcribe, &payload)?).await
    }

    pub async fn transcribe_name(&self, region: &ImageRegion) -> Result<ProviderTranscription, ProviderError> {
        let payload = TranscribePayload {
            purpose: TranscriptionPurpose::StudentName,
            region: region.clone(),
            question_id: None,
            statement: None,
        };
        self.typed(&ProviderRequest::new(Capability::Transcribe, &payload)?).await
    }

    pub fn grade_request(
        respondent: &str,
        transcription: &str,
        question: &Question,
        rubric: &Rubric,
        wisdoms: &[GradingWisdom],
    ) -> Result<ProviderRequest, ProviderError> {
        let payload = GradePayload {
            question_id: question.id.clone(),
            respondent: respondent.to_string(),
            statement: question.statement.clone(),
            reference_solution: question.reference_solution.clone(),
            rubric: rubric.clone(),
            transcription: transcription.to_string(),
            wisdoms: wisdoms
                .iter()
                .filter(|w| w.active)
                .map(|w| WisdomInstruction { id: w.id.clone(), text: w.text.clone() })
                .collect(),
        };
        ProviderRequest::new(Capability::Grade, &payload)
    }

    /// Grade one transcription. Item ids outside the rubric are rejected.
    pub async fn grade(
        &self,
        respondent: &str,
        transcription: &str,
        question: &Question,
        rubric: &Rubric,
        wisdoms: &[GradingWisdom],
    ) -> Result<ProviderGradeResult, ProviderError> {
        let report = validate_proposed_rubric(rubric);
        if !report.is_valid() {
            return Err(ProviderError::Precondition(format!("invalid rubric: {}", report.violations.join("; "))));
        }
        let request = Self::grade_request(respondent, transcription, question, rubric, wisdoms)?;
        let result: ProviderGradeResult = self.typed(&request).await?;
        let unknown = rubric.unknown_items(&result.selected_item_ids);
        if !unknown.is_empty() {
            let ids: Vec<_> = unknown.iter().map(|i| i.as_str()).collect();
            return Err(ProviderError::MalformedOutput(format!("selected items not in rubric: {}", ids.join(", "))));
        }
        Ok(result)
    }

    pub async fn summarize(
        &self,
        question_id: &QuestionId,
        respondent: &str,
        result: &ProviderGradeResult,
        transcription: &str,
        rubric: &Rubric,
    ) -> Result<String, ProviderError> {
        let payload = SummarizePayload {
            question_id: question_id.clone(),
            respondent: respondent.to_string(),
            transcription: transcription.to_string(),
            selected: labeled(rubric, &result.selected_item_ids),
            confidence: result.confidence,
        };
        let out: TextOutput = self.typed(&ProviderRequest::new(Capability::Summarize, &payload)?).await?;
        Ok(out.text)
    }

    /// Individual feedback for a finalized grade.
    pub async fn feedback(
        &self,
        record: &GradeRecord,
        rubric: Option<&Rubric>,
        style_prompt: Option<&str>,
    ) -> Result<String, ProviderError> {
        if !record.is_finalized() {
            return Err(ProviderError::Precondition(format!("grade record {} is not finalized", record.id)));
        }
        let selected = match rubric {
            Some(r) => labeled(r, &record.selection.selected_item_ids),
            None => Vec::new(),
        };
        let payload = FeedbackPayload {
            question_id: record.question_id.clone(),
            respondent: record.respondent.clone(),
            transcription: record.transcription.as_ref().map(|t| t.text.clone()).unwrap_or_default(),
            selected,
            score: record.score,
            style_prompt: style_prompt.map(str::to_string),
        };
        let out: TextOutput = self.typed(&ProviderRequest::new(Capability::Feedback, &payload)?).await?;
        Ok(out.text)
    }

    pub async fn synthesize_wisdoms(
        &self,
        question_id: &QuestionId,
        rubric: &Rubric,
        discrepancies: &[Discrepancy],
    ) -> Result<Vec<WisdomDraft>, ProviderError> {
        if discrepancies.is_empty() {
            return Err(ProviderError::Precondition("no discrepancies to synthesize from".into()));
        }
        let payload = SynthesizePayload {
            question_id: question_id.clone(),
            rubric: rubric.clone(),
            discrepancies: discrepancies.to_vec(),
        };
        let out: WisdomOutput = self.typed(&ProviderRequest::new(Capability::SynthesizeWisdoms, &payload)?).await?;
        let known: BTreeSet<_> = discrepancies.iter().map(|d| &d.id).collect();
        if out.wisdoms.is_empty() {
            return Err(ProviderError::MalformedOutput("no wisdoms returned".into()));
        }
        for draft in &out.wisdoms {
            if draft.text.trim().is_empty() {
                return Err(ProviderError::MalformedOutput("wisdom with empty text".into()));
            }
            if draft.source_discrepancy_ids.is_empty()
                || draft.source_discrepancy_ids.iter().any(|id| !known.contains(id))
            {
                return Err(ProviderError::MalformedOutput("wisdom must cite known discrepancies".into()));
            }
        }
        Ok(out.wisdoms)
    }

    /// Ask the provider to draft a rubric; the draft is returned unvalidated
    /// so callers can show the validation report alongside it.
    pub async fn propose_rubric(&self, request: &ProviderRubricRequest) -> Result<Rubric, ProviderError> {
        let mut rubric: Rubric = self.typed(&ProviderRequest::new(Capability::ProposeRubric, request)?).await?;
        rubric.question_id = request.question_id.clone();
        Ok(rubric)
    }
}

impl ProviderTranscription {
    pub fn is_blank(&self) -> bool {
        self.text.trim().is_empty()
    }

    pub fn is_low(&self) -> bool {
        self.confidence == TranscriptionConfidence::Low
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use async_trait::async_trait;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        failures_left: AtomicUsize,
        calls: AtomicUsize,
        retryable: bool,
    }

    #[async_trait]
    impl Provider for Flaky {
        fn name(&self) -> &'static str {
            "flaky"
        }

        async fn call(&self, _request: &ProviderRequest) -> Result<Value, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures_left.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
                return Err(if self.retryable {
                    ProviderError::Unavailable("timeout".into())
                } else {
                    ProviderError::MalformedOutput("junk".into())
                });
            }
            Ok(json!({"text": "ok"}))
        }
    }

    fn gateway(failures: usize, retryable: bool) -> (Gateway, Arc<Flaky>) {
        let p = Arc::new(Flaky { failures_left: AtomicUsize::new(failures), calls: AtomicUsize::new(0), retryable });
        let gw = Gateway::new(p.clone(), GatewayConfig { retry: RetryPolicy::immediate(3), parallelism: 2 });
        (gw, p)
    }

    fn req(n: u32) -> ProviderRequest {
        ProviderRequest::new(Capability::Summarize, &json!({"n": n})).unwrap()
    }

    #[tokio::test]
    async fn retries_transient_failures() {
        let (gw, p) = gateway(2, true);
        assert_eq!(gw.execute(&req(1)).await.unwrap(), json!({"text": "ok"}));
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn gives_up_after_three_attempts() {
        let (gw, p) = gateway(5, true);
        assert!(matches!(gw.execute(&req(1)).await, Err(ProviderError::Unavailable(_))));
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn malformed_output_is_not_retried() {
        let (gw, p) = gateway(1, false);
        assert!(matches!(gw.execute(&req(1)).await, Err(ProviderError::MalformedOutput(_))));
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn identical_requests_hit_the_cache() {
        let (gw, p) = gateway(0, true);
        gw.execute(&req(7)).await.unwrap();
        gw.execute(&req(7)).await.unwrap();
        gw.execute(&req(8)).await.unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
    }

    #[tokio::test]
    async fn concurrent_duplicates_share_one_call() {
        let (gw, p) = gateway(0, true);
        let gw = Arc::new(gw);
        let tasks: Vec<_> = (0..16)
            .map(|_| {
                let gw = gw.clone();
                tokio::spawn(async move { gw.execute(&req(3)).await })
            })
            .collect();
        for t in tasks {
            t.await.unwrap().unwrap();
        }
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles() {
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(100) };
        assert_eq!(policy.delay_before(1), Duration::from_millis(100));
        assert_eq!(policy.delay_before(2), Duration::from_millis(200));
    }
}
