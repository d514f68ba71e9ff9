//! Per-thread model clock.
//!
//! The simulated fabric does not sleep: every work request is stamped with the
//! submitting thread's model time, the fabric computes departure and arrival
//! times from its link model, and completions carry those times back. Threads
//! fold the times they observe into their own clock, so causality (and
//! therefore latency) is tracked without wall-clock noise.
//!
//! Values are nanoseconds of model time. Real transports stamp completions with
//! [`wall_nanos`] instead.

use std::cell::Cell;
use std::sync::OnceLock;
use std::time::Instant;

pub type Nanos = u64;

thread_local! {
    static NOW: Cell<Nanos> = const { Cell::new(0) };
}

pub fn now() -> Nanos {
    NOW.with(|c| c.get())
}

/// Moves the clock forward to `t` if `t` is later.
pub fn observe(t: Nanos) {
    NOW.with(|c| {
        if t > c.get() {
            c.set(t)
        }
    });
}

pub fn set(t: Nanos) {
    NOW.with(|c| c.set(t));
}

pub fn advance(dt: Nanos) {
    NOW.with(|c| c.set(c.get() + dt));
}

/// Nanoseconds since the first call in this process.
pub fn wall_nanos() -> Nanos {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as Nanos
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observe_is_monotone_and_thread_local() {
        set(10);
        observe(5);
        assert_eq!(now(), 10);
        observe(20);
        advance(3);
        assert_eq!(now(), 23);
        std::thread::spawn(|| assert_eq!(now(), 0)).join().unwrap();
    }
}
