//! Embedded versioned document store.
//!
//! Every entity is stored as canonical JSON under `(kind, id)` with a
//! version that grows by exactly one per write. Writes name the version they
//! expect; stale writes are rejected. Persistence is a write-ahead log
//! replayed over the latest snapshot, plus an append-only audit log of who
//! changed what and when. Write guards validate payloads before commit.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::{CalibrationSession, GradingWisdom};
use crate::canonical;
use crate::domain::{Assignment, Course, Question, Submission};
use crate::pipeline::{expected_score, GradeRecord, GradingRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Course,
    Assignment,
    Question,
    Submission,
    MatchResult,
    GradeRecord,
    GradingRun,
    CalibrationSession,
    GradingWisdom,
    ReviewQueue,
    IdempotentResponse,
}

pub trait Entity: Serialize + DeserializeOwned {
    const KIND: EntityKind;
    fn entity_id(&self) -> String;
}

macro_rules! entity {
    ($ty:ty, $kind:ident) => {
        impl Entity for $ty {
            const KIND: EntityKind = EntityKind::$kind;
            fn entity_id(&self) -> String {
                self.id.to_string()
            }
        }
    };
}

entity!(Course, Course);
entity!(Assignment, Assignment);
entity!(Question, Question);
entity!(Submission, Submission);
entity!(GradeRecord, GradeRecord);
entity!(GradingRun, GradingRun);
entity!(CalibrationSession, CalibrationSession);
entity!(GradingWisdom, GradingWisdom);

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant.
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditStamp {
    pub actor: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub kind: EntityKind,
    pub id: String,
    pub version: u64,
    pub payload: Value,
    pub audit: AuditStamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub kind: EntityKind,
    pub id: String,
    pub version: u64,
    pub action: String,
    pub actor: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WalEntry {
    seq: u64,
    record: StoreRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    records: Vec<StoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("{kind:?} {id} not found")]
    NotFound { kind: EntityKind, id: String },
    #[error("{kind:?} {id} already exists")]
    AlreadyExists { kind: EntityKind, id: String },
    #[error("{kind:?} {id}: expected version {expected}, found {actual}")]
    VersionConflict { kind: EntityKind, id: String, expected: u64, actual: u64 },
    #[error("write rejected: {0}")]
    Rejected(String),
    #[error("storage I/O: {0}")]
    Io(String),
    #[error("corrupt store data: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

/// Expected version of a write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    /// The entity must not exist yet.
    Absent,
    /// The entity must currently be at this version.
    Version(u64),
    /// Whatever is current (internal writes that already hold the decision).
    Any,
}

#[derive(Debug, Clone)]
pub struct PendingWrite {
    pub kind: EntityKind,
    pub id: String,
    pub payload: Value,
    pub expect: Expect,
    pub action: String,
}

impl PendingWrite {
    pub fn of<T: Entity>(value: &T, expect: Expect, action: impl Into<String>) -> Result<Self, StoreError> {
        Ok(PendingWrite {
            kind: T::KIND,
            id: value.entity_id(),
            payload: canonical::to_value(value).map_err(|e| StoreError::Corrupt(e.to_string()))?,
            expect,
            action: action.into(),
        })
    }

    pub fn raw(
        kind: EntityKind,
        id: impl Into<String>,
        payload: Value,
        expect: Expect,
        action: impl Into<String>,
    ) -> Self {
        PendingWrite { kind, id: id.into(), payload, expect, action: action.into() }
    }
}

/// Read access offered to write guards: the batch being committed overlaid
/// on committed state.
pub trait StoreView {
    fn lookup(&self, kind: EntityKind, id: &str) -> Option<&Value>;
}

pub trait WriteGuard: Send + Sync {
    fn check(&self, write: &PendingWrite, view: &dyn StoreView) -> Result<(), String>;
}

/// Rejects grade records whose score differs from the rubric recomputation.
pub struct ScoreGuard;

impl WriteGuard for ScoreGuard {
    fn check(&self, write: &PendingWrite, view: &dyn StoreView) -> Result<(), String> {
        if write.kind != EntityKind::GradeRecord {
            return Ok(());
        }
        let record: GradeRecord =
            serde_json::from_value(write.payload.clone()).map_err(|e| format!("grade record: {e}"))?;
        let question: Question = view
            .lookup(EntityKind::Question, record.question_id.as_str())
            .ok_or_else(|| format!("grade record {} names unknown question {}", record.id, record.question_id))
            .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| e.to_string()))?;
        let expected = expected_score(&question, &record).map_err(|e| e.to_string())?;
        if expected != record.score {
            return Err(format!(
                "grade record {} carries score {:?} but the rubric gives {:?}",
                record.id, record.score, expected
            ));
        }
        Ok(())
    }
}

trait Backend: Send {
    fn append(&mut self, entries: &[WalEntry], audit: &[AuditEntry]) -> Result<(), StoreError>;
    fn snapshot(&mut self, snapshot: &Snapshot) -> Result<(), StoreError>;
}

struct MemoryBackend;

impl Backend for MemoryBackend {
    fn append(&mut self, _: &[WalEntry], _: &[AuditEntry]) -> Result<(), StoreError> {
        Ok(())
    }

    fn snapshot(&mut self, _: &Snapshot) -> Result<(), StoreError> {
        Ok(())
    }
}

struct FileBackend {
    dir: PathBuf,
    wal: File,
    audit: File,
}

impl FileBackend {
    const WAL: &'static str = "wal.jsonl";
    const AUDIT: &'static str = "audit.jsonl";
    const SNAPSHOT: &'static str = "snapshot.json";

    fn open_append(path: &Path) -> Result<File, StoreError> {
        Ok(OpenOptions::new().create(true).append(true).open(path)?)
    }

    fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(v) => out.push(v),
                // A torn final line from a crash mid-append is dropped.
                Err(e) if e.is_eof() => break,
                Err(e) => return Err(StoreError::Corrupt(format!("{}:{}: {e}", path.display(), n + 1))),
            }
        }
        Ok(out)
    }
}

impl Backend for FileBackend {
    fn append(&mut self, entries: &[WalEntry], audit: &[AuditEntry]) -> Result<(), StoreError> {
        let mut buf = String::new();
        for e in entries {
            buf.push_str(&canonical::to_string(e).map_err(|e| StoreError::Corrupt(e.to_string()))?);
            buf.push('\n');
        }
        self.wal.write_all(buf.as_bytes())?;
        self.wal.flush()?;
        let mut buf = String::new();
        for a in audit {
            buf.push_str(&canonical::to_string(a).map_err(|e| StoreError::Corrupt(e.to_string()))?);
            buf.push('\n');
        }
        self.audit.write_all(buf.as_bytes())?;
        self.audit.flush()?;
        Ok(())
    }

    fn snapshot(&mut self, snapshot: &Snapshot) -> Result<(), StoreError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        fs::write(&tmp, canonical::to_string(snapshot).map_err(|e| StoreError::Corrupt(e.to_string()))?)?;
        fs::rename(&tmp, self.dir.join(Self::SNAPSHOT))?;
        self.wal = File::create(self.dir.join(Self::WAL))?;
        Ok(())
    }
}

#[derive(Default)]
struct Inner {
    records: BTreeMap<(EntityKind, String), StoreRecord>,
    audit: Vec<AuditEntry>,
    seq: u64,
    writes_since_snapshot: usize,
}

struct Overlay<'a> {
    committed: &'a BTreeMap<(EntityKind, String), StoreRecord>,
    pending: &'a BTreeMap<(EntityKind, String), Value>,
}

impl StoreView for Overlay<'_> {
    fn lookup(&self, kind: EntityKind, id: &str) -> Option<&Value> {
        let key = (kind, id.to_string());
        self.pending.get(&key).or_else(|| self.committed.get(&key).map(|r| &r.payload))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Versioned<T> {
    pub value: T,
    pub version: u64,
}

pub struct Store {
    inner: RwLock<Inner>,
    backend: Mutex<Box<dyn Backend>>,
    guards: Vec<Box<dyn WriteGuard>>,
    clock: Arc<dyn Clock>,
    snapshot_every: usize,
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Store {
            inner: RwLock::new(Inner::default()),
            backend: Mutex::new(Box::new(MemoryBackend)),
            guards: vec![Box::new(ScoreGuard)],
            clock,
            snapshot_every: usize::MAX,
        }
    }

    /// Open (or create) a store directory and recover its state.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, snapshot_every: usize) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)?;
        let snapshot_path = dir.join(FileBackend::SNAPSHOT);
        let mut inner = Inner::default();
        if snapshot_path.exists() {
            let text = fs::read_to_string(&snapshot_path)?;
            let snap: Snapshot = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            inner.seq = snap.seq;
            for r in snap.records {
                inner.records.insert((r.kind, r.id.clone()), r);
            }
        }
        for entry in FileBackend::read_lines::<WalEntry>(&dir.join(FileBackend::WAL))? {
            if entry.seq <= inner.seq {
                continue;
            }
            inner.seq = entry.seq;
            inner.writes_since_snapshot += 1;
            let r = entry.record;
            inner.records.insert((r.kind, r.id.clone()), r);
        }
        inner.audit = FileBackend::read_lines(&dir.join(FileBackend::AUDIT))?;
        let backend = FileBackend {
            dir: dir.to_path_buf(),
            wal: FileBackend::open_append(&dir.join(FileBackend::WAL))?,
            audit: FileBackend::open_append(&dir.join(FileBackend::AUDIT))?,
        };
        Ok(Store {
            inner: RwLock::new(inner),
            backend: Mutex::new(Box::new(backend)),
            guards: vec![Box::new(ScoreGuard)],
            clock,
            snapshot_every: snapshot_every.max(1),
        })
    }

    pub fn with_guard(mut self, guard: Box<dyn WriteGuard>) -> Self {
        self.guards.push(guard);
        self
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn get_raw(&self, kind: EntityKind, id: &str) -> Option<StoreRecord> {
        self.read().records.get(&(kind, id.to_string())).cloned()
    }

    pub fn get<T: Entity>(&self, id: &str) -> Result<Option<Versioned<T>>, StoreError> {
        self.get_raw(T::KIND, id)
            .map(|r| {
                serde_json::from_value(r.payload)
                    .map(|value| Versioned { value, version: r.version })
                    .map_err(|e| StoreError::Corrupt(format!("{:?} {id}: {e}", T::KIND)))
            })
            .transpose()
    }

    pub fn require<T: Entity>(&self, id: &str) -> Result<Versioned<T>, StoreError> {
        self.get(id)?.ok_or_else(|| StoreError::NotFound { kind: T::KIND, id: id.to_string() })
    }

    /// All entities of a kind, ordered by id.
    pub fn list<T: Entity>(&self) -> Result<Vec<Versioned<T>>, StoreError> {
        self.list_matching(|_| true)
    }

    /// Entities of a kind whose top-level `field` equals `value`, ordered by id.
    pub fn list_by<T: Entity>(&self, field: &str, value: &str) -> Result<Vec<Versioned<T>>, StoreError> {
        self.list_matching(|payload| payload.get(field).and_then(Value::as_str) == Some(value))
    }

    fn list_matching<T: Entity>(&self, keep: impl Fn(&Value) -> bool) -> Result<Vec<Versioned<T>>, StoreError> {
        let inner = self.read();
        inner
            .records
            .range((T::KIND, String::new())..)
            .take_while(|((k, _), _)| *k == T::KIND)
            .filter(|(_, r)| keep(&r.payload))
            .map(|(_, r)| {
                serde_json::from_value(r.payload.clone())
                    .map(|value| Versioned { value, version: r.version })
                    .map_err(|e| StoreError::Corrupt(format!("{:?} {}: {e}", T::KIND, r.id)))
            })
            .collect()
    }

    pub fn insert<T: Entity>(&self, value: &T, actor: &str) -> Result<u64, StoreError> {
        self.commit(vec![PendingWrite::of(value, Expect::Absent, "create")?], actor).map(|v| v[0])
    }

    pub fn update<T: Entity>(&self, value: &T, expected: u64, actor: &str, action: &str) -> Result<u64, StoreError> {
        self.commit(vec![PendingWrite::of(value, Expect::Version(expected), action)?], actor).map(|v| v[0])
    }

    pub fn put<T: Entity>(&self, value: &T, actor: &str, action: &str) -> Result<u64, StoreError> {
        self.commit(vec![PendingWrite::of(value, Expect::Any, action)?], actor).map(|v| v[0])
    }

    /// Apply a batch atomically; returns the new version of each write.
    pub fn commit(&self, writes: Vec<PendingWrite>, actor: &str) -> Result<Vec<u64>, StoreError> {
        if writes.is_empty() {
            return Ok(Vec::new());
        }
        let at = self.clock.now();
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());

        let mut pending: BTreeMap<(EntityKind, String), Value> = BTreeMap::new();
        let mut versions: BTreeMap<(EntityKind, String), u64> = BTreeMap::new();
        let mut new_versions = Vec::with_capacity(writes.len());
        for w in &writes {
            let key = (w.kind, w.id.clone());
            let current =
                versions.get(&key).copied().or_else(|| inner.records.get(&key).map(|r| r.version)).unwrap_or(0);
            match w.expect {
                Expect::Absent if current != 0 => {
                    return Err(StoreError::AlreadyExists { kind: w.kind, id: w.id.clone() })
                }
                Expect::Version(expected) if expected != current => {
                    return Err(if current == 0 {
                        StoreError::NotFound { kind: w.kind, id: w.id.clone() }
                    } else {
                        StoreError::VersionConflict { kind: w.kind, id: w.id.clone(), expected, actual: current }
                    })
                }
                _ => {}
            }
            versions.insert(key.clone(), current + 1);
            pending.insert(key, w.payload.clone());
            new_versions.push(current + 1);
        }
        {
            let view = Overlay { committed: &inner.records, pending: &pending };
            for w in &writes {
                for guard in &self.guards {
                    guard.check(w, &view).map_err(StoreError::Rejected)?;
                }
            }
        }

        let mut wal = Vec::with_capacity(writes.len());
        let mut audit = Vec::with_capacity(writes.len());
        let mut seq = inner.seq;
        for (w, version) in writes.into_iter().zip(&new_versions) {
            seq += 1;
            let stamp = AuditStamp { actor: actor.to_string(), at };
            audit.push(AuditEntry {
                seq,
                kind: w.kind,
                id: w.id.clone(),
                version: *version,
                action: w.action,
                actor: actor.to_string(),
                at,
            });
            wal.push(WalEntry {
                seq,
                record: StoreRecord { kind: w.kind, id: w.id, version: *version, payload: w.payload, audit: stamp },
            });
        }
        let mut backend = self.backend.lock().unwrap_or_else(|e| e.into_inner());
        backend.append(&wal, &audit)?;
        inner.seq = seq;
        inner.writes_since_snapshot += wal.len();
        for entry in wal {
            let r = entry.record;
            inner.records.insert((r.kind, r.id.clone()), r);
        }
        inner.audit.extend(audit);
        if inner.writes_since_snapshot >= self.snapshot_every {
            let snap = Snapshot { seq: inner.seq, records: inner.records.values().cloned().collect() };
            backend.snapshot(&snap)?;
            inner.writes_since_snapshot = 0;
        }
        Ok(new_versions)
    }

    /// Audit entries for one entity, oldest first.
    pub fn audit_for(&self, kind: EntityKind, id: &str) -> Vec<AuditEntry> {
        self.read().audit.iter().filter(|a| a.kind == kind && a.id == id).cloned().collect()
    }

    pub fn audit_len(&self) -> usize {
        self.read().audit.len()
    }

    /// Force a snapshot now.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let snap = Snapshot { seq: inner.seq, records: inner.records.values().cloned().collect() };
        self.backend.lock().unwrap_or_else(|e| e.into_inner()).snapshot(&snap)?;
        inner.writes_since_snapshot = 0;
        Ok(())
    }
}
