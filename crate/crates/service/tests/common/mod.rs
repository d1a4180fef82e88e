//! Shared harness: an in-process server on a loopback port and a synthetic
//! cohort generator producing entities, an upload manifest and the mock
//! fixture rows that go with them.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::DateTime;
use serde_json::{json, Value};

use grader_core::domain::{
    Assignment, ConfidenceTier, Course, McPolicy, PageRegion, Question, QuestionFormat, Rect, StudentRef,
    TranscriptionConfidence,
};
use grader_core::exact::Points;
use grader_core::ids::{self, ItemId, QuestionId, StudentId};
use grader_core::ingestion::{ManifestFile, UploadManifest};
use grader_core::provider::{
    FixtureGrade, FixtureGradeRow, FixtureTranscription, Gateway, GatewayConfig, MockFixture, MockProvider, Provider,
    RetryPolicy,
};
use grader_core::review::ConfidencePolicy;
use grader_core::rubric::{Rubric, RubricItem, Scheme};
use grader_core::store::{FixedClock, Store};
use grader_service::api;
use grader_service::App;

pub fn clock() -> Arc<FixedClock> {
    Arc::new(FixedClock(DateTime::from_timestamp(1_760_000_000, 0).unwrap()))
}

pub fn memory_store() -> Store {
    Store::in_memory(clock())
}

pub fn file_store(dir: &Path) -> Store {
    Store::open(dir, clock(), 64).unwrap()
}

/// Cloneable HTTP client bound to one server.
#[derive(Clone)]
pub struct Api {
    pub base: String,
    pub client: reqwest::Client,
}

pub struct Server {
    pub api: Api,
    pub app: Arc<App>,
    task: tokio::task::JoinHandle<()>,
}

impl std::ops::Deref for Server {
    type Target = Api;

    fn deref(&self) -> &Api {
        &self.api
    }
}

#[derive(Debug, Clone)]
pub struct Resp {
    pub status: u16,
    pub etag: Option<u64>,
    pub replay: bool,
    pub text: String,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", self.text))
    }

    pub fn ok(self) -> Self {
        assert!((200..300).contains(&self.status), "HTTP {}: {}", self.status, self.text);
        self
    }
}

pub fn gateway(provider: Arc<dyn Provider>) -> Gateway {
    Gateway::new(provider, GatewayConfig { retry: RetryPolicy::immediate(3), parallelism: 8 })
}

impl Server {
    pub async fn start(store: Store, fixture: MockFixture) -> Server {
        Server::with_provider(store, Arc::new(MockProvider::new(fixture))).await
    }

    pub async fn with_provider(store: Store, provider: Arc<dyn Provider>) -> Server {
        let app = App::new(Arc::new(store), Arc::new(gateway(provider)), 8).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let served = app.clone();
        let task = tokio::spawn(async move {
            api::serve(served, listener).await.unwrap();
        });
        Server { api: Api { base, client: reqwest::Client::new() }, app, task }
    }

    pub async fn stop(self) {
        self.task.abort();
        let _ = self.task.await;
    }
}

impl Api {
    async fn send(&self, req: reqwest::RequestBuilder) -> Resp {
        let res = req.send().await.unwrap();
        let status = res.status().as_u16();
        let etag =
            res.headers().get("etag").and_then(|v| v.to_str().ok()).and_then(|v| v.trim_matches('"').parse().ok());
        let replay = res.headers().contains_key("idempotent-replay");
        Resp { status, etag, replay, text: res.text().await.unwrap() }
    }

    pub async fn get(&self, path: &str) -> Resp {
        self.send(self.client.get(format!("{}{path}", self.base))).await
    }

    pub async fn post(&self, path: &str, body: &Value) -> Resp {
        self.send(self.client.post(format!("{}{path}", self.base)).json(body)).await
    }

    pub async fn post_with_key(&self, path: &str, body: &Value, key: &str) -> Resp {
        self.send(self.client.post(format!("{}{path}", self.base)).header("Idempotency-Key", key).json(body)).await
    }

    pub async fn put(&self, path: &str, body: &Value) -> Resp {
        self.send(self.client.put(format!("{}{path}", self.base)).json(body)).await
    }

    /// Run `requests` with up to `width` in flight; results keep input order.
    pub async fn parallel<F, Fut>(&self, count: usize, width: usize, make: F) -> Vec<Resp>
    where
        F: Fn(Api, usize) -> Fut,
        Fut: std::future::Future<Output = Resp> + Send + 'static,
    {
        let permits = Arc::new(tokio::sync::Semaphore::new(width));
        let mut handles = Vec::with_capacity(count);
        for i in 0..count {
            let permit = permits.clone().acquire_owned().await.unwrap();
            let fut = make(self.clone(), i);
            handles.push(tokio::spawn(async move {
                let r = fut.await;
                drop(permit);
                r
            }));
        }
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.push(h.await.unwrap());
        }
        out
    }
}

const FIRST: [&str; 20] = [
    "Ada", "Bruno", "Chiara", "Dmitri", "Esther", "Farid", "Greta", "Hiroshi", "Ines", "Jonas", "Kemal", "Lucia",
    "Mateo", "Nadia", "Oskar", "Priya", "Quentin", "Rosa", "Stefan", "Tomoko",
];
const LAST: [&str; 20] = [
    "Abara",
    "Becker",
    "Castillo",
    "Dubois",
    "Eriksen",
    "Fontaine",
    "Gallo",
    "Haddad",
    "Ivanova",
    "Jensen",
    "Kowalski",
    "Lindqvist",
    "Moreau",
    "Novak",
    "Okafor",
    "Petrov",
    "Quispe",
    "Romano",
    "Sato",
    "Tanaka",
];

pub fn display_name(i: usize) -> String {
    let base = format!("{} {}", FIRST[i % 20], LAST[(i / 20) % 20]);
    if i < 400 {
        base
    } else {
        format!("{base} {}", i / 400)
    }
}

/// Rubric used for text questions: subtractive on odd ordinals, additive on even.
pub fn text_rubric(qid: &QuestionId, ordinal: u32) -> Rubric {
    let p = Points::from_int;
    if ordinal % 2 == 1 {
        Rubric {
            question_id: qid.clone(),
            scheme: Scheme::Subtractive,
            items: vec![
                RubricItem::new("missing-base-case".into(), "Missing base case", p(-2)),
                RubricItem::new("off-by-one".into(), "Off-by-one loop bound", p(-3)),
                RubricItem::new("wrong-complexity".into(), "Exceeds required complexity", p(-5)),
            ],
            base_points: p(10),
            min_total: p(0),
            max_total: p(10),
        }
    } else {
        Rubric {
            question_id: qid.clone(),
            scheme: Scheme::Additive,
            items: vec![
                RubricItem::new("states-invariant".into(), "States the loop invariant", p(3)),
                RubricItem::new("proves-termination".into(), "Proves termination", p(3)),
                RubricItem::new("correct-result".into(), "Correct final result", p(4)),
            ],
            base_points: p(0),
            min_total: p(0),
            max_total: p(10),
        }
    }
}

pub fn item_ids(rubric: &Rubric) -> Vec<ItemId> {
    rubric.items.iter().map(|i| i.id.clone()).collect()
}

pub fn set(ids: &[&ItemId]) -> BTreeSet<ItemId> {
    ids.iter().map(|i| (*i).clone()).collect()
}

/// A course with one assignment, its questions, a bulk manifest with one
/// PDF page per question plus a cover page per student, and mock rows.
pub struct Cohort {
    pub prefix: String,
    pub course: Course,
    pub assignment: Assignment,
    pub questions: Vec<Question>,
    pub manifest: UploadManifest,
    /// Name the mock "reads" from each cover page.
    pub cover_names: Vec<String>,
    pub answers: BTreeMap<(usize, usize), FixtureTranscription>,
    pub grades: BTreeMap<(usize, usize), (FixtureGrade, Option<FixtureGrade>)>,
    pub extra_unavailable: BTreeSet<String>,
}

impl Cohort {
    pub fn new(prefix: &str, subject: &str, students: usize, formats: &[QuestionFormat]) -> Cohort {
        let course = Course {
            id: format!("{prefix}-course").into(),
            name: format!("{subject} {prefix}"),
            roster: (0..students)
                .map(|i| StudentRef { id: format!("{prefix}-s{i:03}").into(), display_name: display_name(i) })
                .collect(),
            subject: Some(subject.into()),
        };
        let assignment = Assignment {
            id: format!("{prefix}-hw").into(),
            course_id: course.id.clone(),
            title: format!("{prefix} problem set"),
            policy: ConfidencePolicy::default(),
        };
        let questions: Vec<Question> = formats
            .iter()
            .enumerate()
            .map(|(k, format)| {
                let ordinal = k as u32 + 1;
                let id: QuestionId = format!("{prefix}-q{ordinal}").into();
                let mut q = Question {
                    id: id.clone(),
                    assignment_id: assignment.id.clone(),
                    ordinal,
                    format: *format,
                    statement: format!("Question {ordinal}"),
                    reference_solution: None,
                    answer_key: None,
                    options: Vec::new(),
                    points: None,
                    mc_policy: McPolicy::ExactMatch,
                    rubric: None,
                };
                match format {
                    QuestionFormat::Ssmc => {
                        q.options = ["A", "B", "C", "D"].map(String::from).to_vec();
                        q.answer_key = Some(BTreeSet::from(["B".to_string()]));
                        q.points = Some(Points::from_int(2));
                    }
                    QuestionFormat::Msmc => {
                        q.options = ["A", "B", "C", "D", "E"].map(String::from).to_vec();
                        q.answer_key = Some(BTreeSet::from(["A".to_string(), "C".to_string()]));
                        q.points = Some(Points::from_int(4));
                        q.mc_policy = McPolicy::PerOption;
                    }
                    QuestionFormat::TextCode => {
                        q.reference_solution = Some("reference".into());
                        q.rubric = Some(text_rubric(&id, ordinal));
                    }
                    QuestionFormat::Drawing => {}
                }
                q
            })
            .collect();
        let template = formats.len() + 1;
        let layout =
            (1..=formats.len() as u32).map(|o| (o, PageRegion { page: o as usize, rect: Rect::FULL })).collect();
        let mc_responses = (0..students)
            .map(|_| {
                questions
                    .iter()
                    .filter(|q| q.format.is_multiple_choice())
                    .map(|q| (q.ordinal, q.answer_key.clone().unwrap()))
                    .collect()
            })
            .collect();
        let manifest = UploadManifest {
            assignment_id: assignment.id.clone(),
            template_pages: template,
            files: vec![ManifestFile::Pdf { pdf: format!("{prefix}/batch.pdf"), page: 0, pages: students * template }],
            layout,
            name_region: PageRegion { page: 0, rect: Rect { x: 0.0, y: 0.0, w: 1.0, h: 0.2 } },
            student_id: None,
            mc_responses,
        };
        let mut cohort = Cohort {
            prefix: prefix.into(),
            cover_names: (0..students).map(display_name).collect(),
            course,
            assignment,
            questions,
            manifest,
            answers: BTreeMap::new(),
            grades: BTreeMap::new(),
            extra_unavailable: BTreeSet::new(),
        };
        for s in 0..students {
            for (k, q) in cohort.questions.iter().enumerate() {
                if q.format == QuestionFormat::TextCode {
                    cohort.answers.insert(
                        (s, k),
                        FixtureTranscription {
                            text: format!("answer of student {s} to {}", q.id),
                            confidence: TranscriptionConfidence::High,
                        },
                    );
                    cohort.grades.insert(
                        (s, k),
                        (
                            FixtureGrade {
                                selected: BTreeSet::new(),
                                confidence: ConfidenceTier::High,
                                rationale: "clean".into(),
                            },
                            None,
                        ),
                    );
                }
            }
        }
        cohort
    }

    pub fn students(&self) -> usize {
        self.course.roster.len()
    }

    pub fn student_id(&self, s: usize) -> StudentId {
        self.course.roster[s].id.clone()
    }

    pub fn template(&self) -> usize {
        self.manifest.template_pages
    }

    pub fn page(&self, s: usize, k: usize) -> String {
        format!("{}/batch.pdf#page={}", self.prefix, s * self.template() + k + 1)
    }

    pub fn submission_id(&self, s: usize) -> String {
        ids::derived(&["submission", self.assignment.id.as_str(), &self.page(s, 0)])
    }

    /// The respondent key the pipeline will use, given the cover name.
    pub fn respondent(&self, s: usize) -> String {
        if self.cover_names[s] == display_name(s) {
            self.student_id(s).to_string()
        } else {
            self.submission_id(s)
        }
    }

    pub fn set_mc(&mut self, s: usize, ordinal: u32, chosen: &[&str]) {
        self.manifest.mc_responses[s].insert(ordinal, chosen.iter().map(|c| c.to_string()).collect());
    }

    pub fn text_questions(&self) -> Vec<usize> {
        (0..self.questions.len()).filter(|k| self.questions[*k].format == QuestionFormat::TextCode).collect()
    }

    /// Fixture rows for this cohort.
    pub fn fixture(&self) -> MockFixture {
        let mut f = MockFixture::default();
        self.merge_into(&mut f);
        f
    }

    pub fn merge_into(&self, f: &mut MockFixture) {
        for s in 0..self.students() {
            f.transcriptions.insert(
                format!("{}#name", self.page(s, 0)),
                FixtureTranscription { text: self.cover_names[s].clone(), confidence: TranscriptionConfidence::High },
            );
            let respondent = self.respondent(s);
            for (k, q) in self.questions.iter().enumerate() {
                if let Some(t) = self.answers.get(&(s, k)) {
                    f.transcriptions.insert(format!("{respondent}/{}", q.id), t.clone());
                }
                if let Some((pre, post)) = self.grades.get(&(s, k)) {
                    f.grades.push(FixtureGradeRow {
                        question_id: q.id.clone(),
                        student_id: respondent.clone(),
                        pre: pre.clone(),
                        post: post.clone(),
                    });
                }
            }
        }
        f.unavailable.extend(self.extra_unavailable.iter().cloned());
    }

    /// Create the course, assignment and questions, then ingest the manifest.
    pub async fn load(&self, server: &Api) -> Value {
        server.post("/courses", &serde_json::to_value(&self.course).unwrap()).await.ok();
        server.post("/assignments", &serde_json::to_value(&self.assignment).unwrap()).await.ok();
        for q in &self.questions {
            server.post("/questions", &serde_json::to_value(q).unwrap()).await.ok();
        }
        server.post("/submissions/bulk", &serde_json::to_value(&self.manifest).unwrap()).await.ok().json()
    }

    pub async fn grade_all(&self, server: &Api) -> Vec<Value> {
        let mut runs = Vec::new();
        for q in &self.questions {
            let run =
                server.post(&format!("/questions/{}/grading-runs", q.id), &json!({"wait": true})).await.ok().json();
            runs.push(run);
        }
        runs
    }
}

/// Drop `run_id` fields so records from different runs can be compared.
pub fn without_run_ids(mut v: Value) -> Value {
    if let Some(items) = v.as_array_mut() {
        for item in items {
            if let Some(obj) = item.as_object_mut() {
                obj.remove("run_id");
            }
        }
    }
    v
}
