//! Bounded in-memory store of simulation jobs. When full, the oldest
//! finished job is evicted; if every slot holds an unfinished job the
//! submission is refused.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use tokio::sync::Semaphore;

use nestcrt::harness::{run_grid, Scenario};

use crate::api::{JobState, JobStatus};
use crate::error::ApiError;

#[derive(Debug)]
pub struct JobStore {
    inner: Mutex<Inner>,
    capacity: usize,
    workers: Arc<Semaphore>,
    threads_per_job: usize,
}

#[derive(Debug, Default)]
struct Inner {
    next_id: u64,
    jobs: HashMap<String, JobStatus>,
    /// Submission order, oldest first.
    order: VecDeque<String>,
}

fn finished(state: JobState) -> bool {
    matches!(state, JobState::Done | JobState::Failed)
}

impl JobStore {
    pub fn new(capacity: usize, workers: usize, threads_per_job: usize) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            capacity: capacity.max(1),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            threads_per_job,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn get(&self, id: &str) -> Option<JobStatus> {
        self.lock().jobs.get(id).cloned()
    }

    fn set(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.lock().jobs.get_mut(id) {
            f(job);
        }
    }

    fn insert(&self) -> Result<JobStatus, ApiError> {
        let mut inner = self.lock();
        if inner.jobs.len() >= self.capacity {
            let pos = inner
                .order
                .iter()
                .position(|id| inner.jobs.get(id).is_some_and(|j| finished(j.state)))
                .ok_or(ApiError::Busy)?;
            let old = inner.order.remove(pos).expect("position is in range");
            inner.jobs.remove(&old);
        }
        inner.next_id += 1;
        let status = JobStatus {
            id: format!("job-{:08x}", inner.next_id),
            state: JobState::Queued,
            report: None,
            error: None,
        };
        inner.order.push_back(status.id.clone());
        inner.jobs.insert(status.id.clone(), status.clone());
        Ok(status)
    }

    /// Queues a grid run and returns its initial status.
    pub fn submit(self: &Arc<Self>, scenarios: Vec<Scenario>, master_seed: u64) -> Result<JobStatus, ApiError> {
        let status = self.insert()?;
        let store = Arc::clone(self);
        let id = status.id.clone();
        tokio::spawn(async move {
            let Ok(_permit) = store.workers.clone().acquire_owned().await else {
                return;
            };
            store.set(&id, |j| j.state = JobState::Running);
            let threads = store.threads_per_job;
            let outcome = tokio::task::spawn_blocking(move || run_grid(&scenarios, master_seed, threads)).await;
            store.set(&id, |j| match outcome {
                Ok(Ok(report)) => {
                    j.state = JobState::Done;
                    j.report = Some(report);
                }
                Ok(Err(e)) => {
                    j.state = JobState::Failed;
                    j.error = Some(e.to_string());
                }
                Err(e) => {
                    j.state = JobState::Failed;
                    j.error = Some(format!("worker stopped: {e}"));
                }
            });
        });
        Ok(status)
    }
}
