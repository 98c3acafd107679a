//! Worker pool for evolutionary search: the calling thread acts as worker 0 and trains jobs
//! like every other worker, while `workers - 1` scoped threads pull from the same queue.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Instant;

use nas_core::evo::{run_job, Dispatcher, Evaluator, JobMessage, ResultMessage};

#[derive(Clone, Copy, Debug)]
pub struct ThreadDispatcher {
    pub workers: usize,
}

impl ThreadDispatcher {
    pub fn new(workers: usize) -> Self {
        Self { workers: workers.max(1) }
    }
}

fn work(worker: usize, queue: &Mutex<VecDeque<JobMessage>>, evaluator: &dyn Evaluator, tx: &mpsc::Sender<ResultMessage>) {
    loop {
        let Some(job) = queue.lock().unwrap().pop_front() else { return };
        let start = Instant::now();
        let mut r = run_job(&job, evaluator, worker, 0.0);
        r.wall_time = start.elapsed().as_secs_f64();
        // the receiver outlives every worker inside the scope
        let _ = tx.send(r);
    }
}

impl Dispatcher for ThreadDispatcher {
    fn dispatch(&mut self, jobs: &[JobMessage], evaluator: &dyn Evaluator) -> Vec<ResultMessage> {
        let queue = Mutex::new(jobs.iter().cloned().collect::<VecDeque<_>>());
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|s| {
            for w in 1..self.workers.min(jobs.len().max(1)) {
                let (queue, tx) = (&queue, tx.clone());
                s.spawn(move || work(w, queue, evaluator, &tx));
            }
            work(0, &queue, evaluator, &tx);
        });
        drop(tx);
        rx.into_iter().collect()
    }
}
