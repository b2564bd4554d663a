//! Real-time adapter for the scheduling surface.
//!
//! [`WallClock`] hands out microseconds since its creation and
//! [`WallClockLoop`] dispatches actions when their real due time arrives. The
//! standalone daemons use these together with UDP and TCP sockets; acceptance
//! runs never touch this module.

use std::time::{Duration, Instant};

use super::{EventHandle, EventLoop, LoopLimitExceeded, Micros};

#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }

    pub fn now_us(&self) -> Micros {
        self.origin.elapsed().as_micros() as Micros
    }

    /// Time remaining until `deadline_us`, or zero if already passed.
    pub fn until(&self, deadline_us: Micros) -> Duration {
        Duration::from_micros(deadline_us.saturating_sub(self.now_us()))
    }
}

/// Event loop whose clock follows real time.
pub struct WallClockLoop<A> {
    clock: WallClock,
    events: EventLoop<A>,
}

impl<A> Default for WallClockLoop<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> WallClockLoop<A> {
    pub fn new() -> Self {
        Self {
            clock: WallClock::new(),
            events: EventLoop::new(),
        }
    }

    pub fn now(&self) -> Micros {
        self.clock.now_us()
    }

    pub fn schedule(&mut self, delay_us: Micros, action: A) -> EventHandle {
        self.events.schedule_at(self.clock.now_us() + delay_us, action)
    }

    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.events.cancel(handle)
    }

    /// Sleep until the next action is due and dispatch it.
    pub fn step<F>(&mut self, f: F) -> Result<bool, LoopLimitExceeded>
    where
        F: FnOnce(&mut Self, A),
    {
        let Some(due) = self.events.peek_due() else {
            return Ok(false);
        };
        std::thread::sleep(self.clock.until(due));
        let (_, action) = self.events.pop()?.expect("peeked");
        f(self, action);
        Ok(true)
    }

    pub fn run_until_idle<F>(&mut self, mut f: F) -> Result<Micros, LoopLimitExceeded>
    where
        F: FnMut(&mut Self, A),
    {
        while self.step(&mut f)? {}
        Ok(self.now())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatches_after_real_delay() {
        let mut wl = WallClockLoop::new();
        wl.schedule(2_000, 1u8);
        let start = Instant::now();
        let mut got = vec![];
        wl.run_until_idle(|_, a| got.push(a)).unwrap();
        assert_eq!(got, vec![1]);
        assert!(start.elapsed() >= Duration::from_micros(2_000));
    }
}
