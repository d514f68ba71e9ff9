//! Shared progress words polled by a dedicated thread.
//!
//! The "device" side bumps a [`WatchWord`]; the poller notices the change and
//! runs the registered callback with the last observed and the new value.
//! Values are expected to grow; the callback only runs when the word moved
//! past the last value it reported, so intermediate values may be skipped.
//!
//! After a change the poller spins (yielding) for 1 ms, then backs off with
//! sleeps starting at 5 µs. Stores through [`WatchWord`] also ring the
//! poller's bell so a sleeping poller wakes without waiting out its backoff.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::transport::{Bell, Doorbell};
use crate::vclock::{self, Nanos};

const SPIN: Duration = Duration::from_millis(1);
const MIN_SLEEP: Duration = Duration::from_micros(5);
const MAX_SLEEP: Duration = Duration::from_millis(2);

pub struct WatchWord {
    value: AtomicU64,
    vt: AtomicU64,
    bell: Doorbell,
}

impl WatchWord {
    pub fn load(&self) -> u64 {
        self.value.load(Ordering::Acquire)
    }

    pub fn store(&self, v: u64) {
        self.vt.fetch_max(vclock::now(), Ordering::Relaxed);
        self.value.store(v, Ordering::Release);
        self.bell.ring();
    }

    pub fn fetch_add(&self, d: u64) -> u64 {
        self.vt.fetch_max(vclock::now(), Ordering::Relaxed);
        let old = self.value.fetch_add(d, Ordering::AcqRel);
        self.bell.ring();
        old
    }
}

type WatchFn = Box<dyn FnMut(u64, u64) + Send>;

struct Entry {
    word: Weak<WatchWord>,
    last: u64,
    cb: WatchFn,
}

pub(crate) struct Watchers {
    name: String,
    bell: Doorbell,
    entries: Arc<Mutex<Vec<Entry>>>,
    stop: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Watchers {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), bell: Bell::new(), entries: Arc::default(), stop: Arc::default(), thread: Mutex::new(None) }
    }

    pub fn alloc(&self, cb: impl FnMut(u64, u64) + Send + 'static) -> Arc<WatchWord> {
        let word = Arc::new(WatchWord { value: AtomicU64::new(0), vt: AtomicU64::new(0), bell: self.bell.clone() });
        self.entries.lock().unwrap().push(Entry { word: Arc::downgrade(&word), last: 0, cb: Box::new(cb) });
        let mut t = self.thread.lock().unwrap();
        if t.is_none() && !self.stop.load(Ordering::Acquire) {
            let (entries, stop, bell) = (self.entries.clone(), self.stop.clone(), self.bell.clone());
            *t = Some(
                std::thread::Builder::new()
                    .name(format!("{}-watch", self.name))
                    .spawn(move || poll_loop(entries, stop, bell))
                    .expect("spawn watcher thread"),
            );
        }
        self.bell.ring();
        word
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        self.bell.ring();
        if let Some(h) = self.thread.lock().unwrap().take() {
            if std::thread::current().id() != h.thread().id() {
                let _ = h.join();
            }
        }
    }
}

fn poll_loop(entries: Arc<Mutex<Vec<Entry>>>, stop: Arc<AtomicBool>, bell: Doorbell) {
    let mut last_change = Instant::now();
    let mut sleep = MIN_SLEEP;
    while !stop.load(Ordering::Acquire) {
        // Callbacks may allocate new watchers, so run them without the lock.
        let mut list = std::mem::take(&mut *entries.lock().unwrap());
        let mut changed = false;
        list.retain_mut(|e| {
            let Some(word) = e.word.upgrade() else { return false };
            let v = word.load();
            if v > e.last {
                vclock::set(word.vt.load(Ordering::Relaxed) as Nanos);
                (e.cb)(e.last, v);
                e.last = v;
                changed = true;
            }
            true
        });
        {
            let mut g = entries.lock().unwrap();
            list.append(&mut g);
            *g = list;
        }
        if changed {
            last_change = Instant::now();
            sleep = MIN_SLEEP;
        } else if last_change.elapsed() < SPIN {
            std::thread::yield_now();
        } else {
            bell.wait(sleep);
            sleep = (sleep * 2).min(MAX_SLEEP);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slow_writes_are_each_observed() {
        let w = Watchers::new("t");
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let word = w.alloc(move |a, b| s.lock().unwrap().push((a, b)));
        for v in 1..=3 {
            word.store(v);
            let t0 = Instant::now();
            while seen.lock().unwrap().len() < v as usize && t0.elapsed() < Duration::from_secs(5) {
                std::thread::sleep(Duration::from_millis(1));
            }
        }
        w.stop();
        assert_eq!(*seen.lock().unwrap(), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn tight_loop_sequence_is_strictly_increasing() {
        let w = Watchers::new("t");
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let word = w.alloc(move |a, b| s.lock().unwrap().push((a, b)));
        for v in 1..=1000 {
            word.store(v);
        }
        let t0 = Instant::now();
        while seen.lock().unwrap().last().map(|x| x.1) != Some(1000) && t0.elapsed() < Duration::from_secs(5) {
            std::thread::sleep(Duration::from_millis(1));
        }
        w.stop();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.last().unwrap().1, 1000);
        for pair in seen.windows(2) {
            assert_eq!(pair[0].1, pair[1].0);
            assert!(pair[1].1 > pair[1].0);
        }
    }

    #[test]
    fn no_writes_no_callbacks() {
        let w = Watchers::new("t");
        let hits = Arc::new(AtomicU64::new(0));
        let h = hits.clone();
        let _word = w.alloc(move |_, _| {
            h.fetch_add(1, Ordering::Relaxed);
        });
        std::thread::sleep(Duration::from_millis(20));
        w.stop();
        assert_eq!(hits.load(Ordering::Relaxed), 0);
    }
}
