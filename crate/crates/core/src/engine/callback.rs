//! Dedicated thread running user completion callbacks, so worker loops
//! never execute user code.

use std::thread::{JoinHandle, ThreadId};

use crossbeam_channel::{unbounded, Sender};

use crate::error::TransferError;
use crate::types::OnDone;
use crate::vclock::{self, Nanos};

pub(crate) type Job = Box<dyn FnOnce() + Send>;

pub(crate) struct CallbackThread {
    tx: Sender<Option<(Job, Nanos)>>,
    handle: Option<JoinHandle<()>>,
    id: ThreadId,
}

impl CallbackThread {
    pub fn spawn(name: &str) -> Self {
        let (tx, rx) = unbounded::<Option<(Job, Nanos)>>();
        let handle = std::thread::Builder::new()
            .name(format!("{name}-cb"))
            .spawn(move || {
                while let Ok(Some((job, at))) = rx.recv() {
                    vclock::set(at);
                    job();
                }
            })
            .expect("spawn callback thread");
        let id = handle.thread().id();
        Self { tx, handle: Some(handle), id }
    }

    pub fn sender(&self) -> CallbackSender {
        CallbackSender(self.tx.clone())
    }

    /// Lets queued jobs finish, then stops the thread. A no-op join when
    /// called from the callback thread itself.
    pub fn stop(&mut self) {
        let _ = self.tx.send(None);
        if let Some(h) = self.handle.take() {
            if std::thread::current().id() != self.id {
                let _ = h.join();
            }
        }
    }
}

#[derive(Clone)]
pub(crate) struct CallbackSender(Sender<Option<(Job, Nanos)>>);

impl CallbackSender {
    pub fn run(&self, at: Nanos, job: Job) {
        // After shutdown the receiver is gone; dropping the job is all we can do.
        let _ = self.0.send(Some((job, at)));
    }

    /// Reports an operation's outcome. Flags are set inline since they run
    /// no user code; callbacks go to the callback thread.
    pub fn fire(&self, on_done: OnDone, result: Result<(), TransferError>, at: Nanos) {
        match on_done {
            OnDone::Callback(cb) => self.run(at, Box::new(move || cb(result))),
            OnDone::Flag(f) => f.complete(result, at),
            OnDone::Ignore => {}
        }
    }
}
