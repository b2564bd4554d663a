//! Deterministic virtual-time execution.
//!
//! Everything in the laboratory runs on an [`EventLoop`]: a priority queue of
//! actions keyed by `(due_us, seq)`. The clock only moves when the loop hands
//! out the next due action, so a scenario replayed with the same seed produces
//! the same trace bit for bit. [`wallclock`] maps the same scheduling surface
//! onto real time for the standalone daemons.

mod event_loop;
mod rng;
pub mod wallclock;

pub use event_loop::{EventHandle, EventLoop, LoopLimitExceeded, DEFAULT_EVENT_CAP};
pub use rng::{seed_from_env, RngStream, SEED_ENV};

/// Microseconds of virtual time.
pub type Micros = u64;

pub const MICROS_PER_MS: Micros = 1_000;
pub const MICROS_PER_SEC: Micros = 1_000_000;

/// Serialization time of `len` bytes at `rate_bps`, rounded up to the next microsecond.
pub fn serialization_us(len: usize, rate_bps: u64) -> Micros {
    let bits = len as u128 * 8 * MICROS_PER_SEC as u128;
    let rate = rate_bps.max(1) as u128;
    bits.div_ceil(rate) as Micros
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_rounds_up() {
        assert_eq!(serialization_us(1200, 9_600_000), 1_000);
        assert_eq!(serialization_us(1, 8_000_000), 1);
        assert_eq!(serialization_us(1, 3), 2_666_667);
        assert_eq!(serialization_us(0, 10), 0);
    }
}
