use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};

type Job<T> = Box<dyn FnOnce() -> T + Send>;

/// Fixed-size worker pool running fetch jobs. Results come back tagged
/// with the sequence number assigned at submission; completion order is
/// unspecified.
pub struct FetchPool<T: Send + 'static> {
    jobs: Option<Sender<(u64, Job<T>)>>,
    done: Receiver<(u64, T)>,
    workers: Vec<JoinHandle<()>>,
    next_seq: u64,
    in_flight: usize,
}

impl<T: Send + 'static> FetchPool<T> {
    pub fn new(workers: usize) -> Self {
        let (jtx, jrx) = unbounded::<(u64, Job<T>)>();
        let (dtx, drx) = unbounded();
        let workers = (0..workers.max(1))
            .map(|_| {
                let jrx = jrx.clone();
                let dtx = dtx.clone();
                std::thread::spawn(move || {
                    for (seq, job) in jrx {
                        if dtx.send((seq, job())).is_err() {
                            break;
                        }
                    }
                })
            })
            .collect();
        Self {
            jobs: Some(jtx),
            done: drx,
            workers,
            next_seq: 0,
            in_flight: 0,
        }
    }

    pub fn submit(&mut self, job: impl FnOnce() -> T + Send + 'static) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.in_flight += 1;
        self.jobs
            .as_ref()
            .expect("pool is running")
            .send((seq, Box::new(job)))
            .expect("workers alive");
        seq
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    /// Completed results available right now.
    pub fn drain_ready(&mut self) -> Vec<(u64, T)> {
        let out: Vec<_> = self.done.try_iter().collect();
        self.in_flight -= out.len();
        out
    }

    /// Block until every submitted job has completed.
    pub fn wait_all(&mut self) -> Vec<(u64, T)> {
        let mut out = Vec::with_capacity(self.in_flight);
        while self.in_flight > 0 {
            let r = self.done.recv().expect("workers alive");
            self.in_flight -= 1;
            out.push(r);
        }
        out
    }
}

impl<T: Send + 'static> Drop for FetchPool<T> {
    fn drop(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
