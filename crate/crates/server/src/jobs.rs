//! In-process registry for long-running operations polled by clients.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ErrorBody;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub kind: String,
    pub state: JobState,
    pub processed: usize,
    pub total: usize,
    pub result: Option<Value>,
    pub error: Option<ErrorBody>,
}

#[derive(Default)]
pub struct JobRegistry {
    next: AtomicU64,
    jobs: Mutex<BTreeMap<u64, JobStatus>>,
    latest: Mutex<BTreeMap<String, u64>>,
}

/// Handle given to the worker; updates land in the registry.
#[derive(Clone)]
pub struct JobHandle {
    registry: Arc<JobRegistry>,
    pub id: u64,
}

impl JobRegistry {
    pub fn start(self: &Arc<Self>, kind: &str, total: usize) -> JobHandle {
        let id = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        let status = JobStatus {
            job_id: id,
            kind: kind.to_string(),
            state: JobState::Running,
            processed: 0,
            total,
            result: None,
            error: None,
        };
        self.jobs.lock().insert(id, status);
        self.latest.lock().insert(kind.to_string(), id);
        JobHandle { registry: Arc::clone(self), id }
    }

    pub fn get(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().get(&id).cloned()
    }

    /// Most recently started job of `kind`.
    pub fn latest(&self, kind: &str) -> Option<JobStatus> {
        let id = *self.latest.lock().get(kind)?;
        self.get(id)
    }
}

impl JobHandle {
    fn update(&self, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.registry.jobs.lock().get_mut(&self.id) {
            f(job);
        }
    }

    pub fn progress(&self, processed: usize, total: usize) {
        self.update(|j| {
            j.processed = processed;
            j.total = total;
        });
    }

    pub fn finish(&self, result: Value) {
        self.update(|j| {
            j.state = JobState::Done;
            j.processed = j.total;
            j.result = Some(result);
        });
    }

    pub fn fail(&self, error: ErrorBody) {
        self.update(|j| {
            j.state = JobState::Failed;
            j.error = Some(error);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle() {
        let reg = Arc::new(JobRegistry::default());
        let a = reg.start("train", 4);
        let b = reg.start("train", 2);
        assert_ne!(a.id, b.id);
        assert_eq!(reg.latest("train").unwrap().job_id, b.id);
        a.progress(2, 4);
        assert_eq!(reg.get(a.id).unwrap().processed, 2);
        a.finish(serde_json::json!({"ok": true}));
        let done = reg.get(a.id).unwrap();
        assert_eq!((done.state, done.processed), (JobState::Done, 4));
        b.fail(ErrorBody { code: "X".into(), message: "m".into(), detail: Value::Null });
        assert_eq!(reg.get(b.id).unwrap().state, JobState::Failed);
        assert!(reg.latest("detect").is_none());
    }
}
