use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use super::Micros;

/// Default cap on dispatched events before the loop declares a runaway.
pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("event loop dispatched more than {cap} events")]
pub struct LoopLimitExceeded {
    pub cap: u64,
}

/// Cancellation token returned by [`EventLoop::schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

struct Entry<A> {
    due: Micros,
    seq: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}
impl<A> Eq for Entry<A> {}
impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<A> Ord for Entry<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

/// Single-threaded discrete-event scheduler.
///
/// Actions are dispatched in `(due_us, seq)` order, where `seq` is the
/// insertion counter; equal-time actions therefore fire in the order they were
/// scheduled.
pub struct EventLoop<A> {
    now: Micros,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<A>>>,
    live: HashSet<u64>,
    dispatched: u64,
    cap: u64,
    trace: u64,
}

impl<A> Default for EventLoop<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> EventLoop<A> {
    pub fn new() -> Self {
        Self::with_cap(DEFAULT_EVENT_CAP)
    }

    pub fn with_cap(cap: u64) -> Self {
        Self {
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            live: HashSet::new(),
            dispatched: 0,
            cap,
            trace: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    /// Schedule `action` to fire `delay_us` after the current time.
    pub fn schedule(&mut self, delay_us: Micros, action: A) -> EventHandle {
        self.schedule_at(self.now + delay_us, action)
    }

    /// Schedule at an absolute time; times in the past are clamped to now.
    pub fn schedule_at(&mut self, due_us: Micros, action: A) -> EventHandle {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.queue.push(Reverse(Entry {
            due: due_us.max(self.now),
            seq,
            action,
        }));
        EventHandle(seq)
    }

    /// Cancel a pending action. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    pub fn is_idle(&mut self) -> bool {
        self.peek_due().is_none()
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Due time of the next live action.
    pub fn peek_due(&mut self) -> Option<Micros> {
        while let Some(Reverse(top)) = self.queue.peek() {
            if !self.live.contains(&top.seq) {
                self.queue.pop();
                continue;
            }
            return Some(top.due);
        }
        None
    }

    /// Pop the next action, advancing the clock to its due time.
    pub fn pop(&mut self) -> Result<Option<(Micros, A)>, LoopLimitExceeded> {
        if self.peek_due().is_none() {
            return Ok(None);
        }
        if self.dispatched >= self.cap {
            return Err(LoopLimitExceeded { cap: self.cap });
        }
        let Reverse(entry) = self.queue.pop().expect("peeked");
        self.live.remove(&entry.seq);
        debug_assert!(entry.due >= self.now);
        self.now = entry.due;
        self.dispatched += 1;
        self.trace = (self.trace ^ entry.due).wrapping_mul(0x0100_0000_01b3);
        self.trace = (self.trace ^ entry.seq).wrapping_mul(0x0100_0000_01b3);
        Ok(Some((entry.due, entry.action)))
    }

    /// Move the clock forward without dispatching. Refuses to skip live events.
    pub fn advance_to(&mut self, t: Micros) {
        if let Some(due) = self.peek_due() {
            assert!(due >= t, "advance_to would skip a pending event");
        }
        self.now = self.now.max(t);
    }

    /// Dispatch until the queue is empty and return the final clock value.
    pub fn run_until_idle<F>(&mut self, mut f: F) -> Result<Micros, LoopLimitExceeded>
    where
        F: FnMut(&mut Self, A),
    {
        while let Some((_, action)) = self.pop()? {
            f(self, action);
        }
        Ok(self.now)
    }

    /// Dispatch every action due at or before `deadline`.
    pub fn run_until<F>(&mut self, deadline: Micros, mut f: F) -> Result<Micros, LoopLimitExceeded>
    where
        F: FnMut(&mut Self, A),
    {
        while matches!(self.peek_due(), Some(due) if due <= deadline) {
            let (_, action) = self.pop()?.expect("peeked");
            f(self, action);
        }
        self.advance_to(deadline.max(self.now));
        Ok(self.now)
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Rolling FNV-1a digest over every dispatched `(due, seq)` pair.
    pub fn trace_digest(&self) -> u64 {
        self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fires_at_scheduled_time() {
        let mut el = EventLoop::new();
        el.schedule(500_000, "A");
        let mut seen = vec![];
        let end = el.run_until_idle(|el, a| seen.push((el.now(), a))).unwrap();
        assert_eq!(seen, vec![(500_000, "A")]);
        assert_eq!(end, 500_000);
    }

    #[test]
    fn equal_times_dispatch_in_insertion_order() {
        let mut el = EventLoop::new();
        for i in 0..5 {
            el.schedule(10, i);
        }
        let mut seen = vec![];
        el.run_until_idle(|_, a| seen.push(a)).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn cancelled_action_never_fires() {
        let mut el = EventLoop::new();
        let h = el.schedule(100, 1);
        el.schedule(200, 2);
        assert!(el.cancel(h));
        assert!(!el.cancel(h));
        let mut seen = vec![];
        el.run_until_idle(|_, a| seen.push(a)).unwrap();
        assert_eq!(seen, vec![2]);
    }

    #[test]
    fn empty_queue_returns_zero() {
        let mut el: EventLoop<()> = EventLoop::new();
        assert_eq!(el.run_until_idle(|_, _| {}).unwrap(), 0);
    }

    #[test]
    fn chained_schedule() {
        let mut el = EventLoop::new();
        el.schedule(250_000, true);
        let end = el
            .run_until_idle(|el, again| {
                if again {
                    el.schedule(250_000, false);
                }
            })
            .unwrap();
        assert_eq!(end, 500_000);
    }

    #[test]
    fn cap_stops_runaway() {
        let mut el = EventLoop::with_cap(1_000);
        el.schedule(1, ());
        let err = el.run_until_idle(|el, _| {
            el.schedule(1, ());
        });
        assert_eq!(err, Err(LoopLimitExceeded { cap: 1_000 }));
    }

    #[test]
    fn run_until_leaves_later_events() {
        let mut el = EventLoop::new();
        el.schedule(10, 1);
        el.schedule(30, 2);
        let mut seen = vec![];
        assert_eq!(el.run_until(20, |_, a| seen.push(a)).unwrap(), 20);
        assert_eq!(seen, vec![1]);
        assert_eq!(el.peek_due(), Some(30));
    }

    #[test]
    fn past_times_clamp_to_now() {
        let mut el = EventLoop::new();
        el.schedule(100, 0);
        el.pop().unwrap();
        el.schedule_at(50, 1);
        assert_eq!(el.pop().unwrap(), Some((100, 1)));
    }
}
