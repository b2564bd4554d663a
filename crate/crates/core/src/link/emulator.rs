use std::collections::VecDeque;

use thiserror::Error;

use super::profile::{Direction, LinkProfile};
use super::tap::TapRecord;
use crate::runtime::{serialization_us, Micros, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    QueueOverflow,
    ChannelLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Delivered { at: Micros },
    Dropped(DropReason),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("datagram of {len} bytes exceeds mtu {mtu}")]
    MtuExceeded { len: usize, mtu: usize },
}

/// Per-direction counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub queue_drops: u64,
    pub channel_drops: u64,
    pub bytes_sent: u64,
}

#[derive(Debug)]
struct Lane {
    busy_until: Micros,
    /// Serialization finish times of datagrams still in the system.
    in_system: VecDeque<Micros>,
    last_delivery: Micros,
    rng: RngStream,
    stats: LinkStats,
}

impl Lane {
    fn new(rng: RngStream) -> Self {
        Self {
            busy_until: 0,
            in_system: VecDeque::new(),
            last_delivery: 0,
            rng,
            stats: LinkStats::default(),
        }
    }
}

/// Bidirectional datagram channel with a FIFO serialization queue per direction.
#[derive(Debug)]
pub struct LinkEmulator {
    profile: LinkProfile,
    lanes: [Lane; 2],
    tap: Option<Vec<TapRecord>>,
}

impl LinkEmulator {
    pub fn new(profile: LinkProfile) -> Self {
        let root = RngStream::new(profile.seed);
        Self {
            lanes: [Lane::new(root.fork(0)), Lane::new(root.fork(1))],
            profile,
            tap: Some(Vec::new()),
        }
    }

    /// A lossless link without capture, used for LAN and terrestrial hops.
    pub fn wire(one_way_ms: f64, rate_bps: u64) -> Self {
        let profile = LinkProfile {
            forward_delay: super::DelayModel::Constant { one_way_ms },
            return_delay: super::DelayModel::Constant { one_way_ms },
            forward_rate_bps: rate_bps,
            return_rate_bps: rate_bps,
            loss_model: super::LossModel::lossless(),
            mtu_bytes: 65_535,
            queue_capacity: 1 << 20,
            return_slot_bytes: 0,
            ..LinkProfile::geo()
        };
        let mut link = Self::new(profile);
        link.tap = None;
        link
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    pub fn stats(&self, dir: Direction) -> LinkStats {
        self.lanes[dir.index()].stats
    }

    /// Datagrams waiting behind the one in service at `now`.
    pub fn queued(&self, dir: Direction, now: Micros) -> usize {
        let busy = self.lanes[dir.index()]
            .in_system
            .iter()
            .filter(|&&f| f > now)
            .count();
        busy.saturating_sub(1)
    }

    pub fn transmit(
        &mut self,
        dir: Direction,
        payload: &[u8],
        now: Micros,
    ) -> Result<DeliveryOutcome, LinkError> {
        if payload.len() > self.profile.mtu_bytes {
            return Err(LinkError::MtuExceeded {
                len: payload.len(),
                mtu: self.profile.mtu_bytes,
            });
        }
        let capacity = self.profile.queue_capacity;
        let wire_len = self.profile.wire_len(dir, payload.len());
        let rate = self.profile.rate_bps(dir);
        let lane = &mut self.lanes[dir.index()];
        while lane.in_system.front().is_some_and(|&f| f <= now) {
            lane.in_system.pop_front();
        }
        lane.stats.sent += 1;

        let outcome = if lane.in_system.len().saturating_sub(1) >= capacity {
            lane.stats.queue_drops += 1;
            DeliveryOutcome::Dropped(DropReason::QueueOverflow)
        } else {
            let start = lane.busy_until.max(now);
            let finish = start + serialization_us(wire_len, rate);
            lane.busy_until = finish;
            lane.in_system.push_back(finish);
            lane.stats.bytes_sent += wire_len as u64;

            let p = self.profile.loss_probability(dir, now);
            if lane.rng.next_f64() < p {
                lane.stats.channel_drops += 1;
                DeliveryOutcome::Dropped(DropReason::ChannelLoss)
            } else {
                let mut at = finish + self.profile.delay(dir).one_way_us(now);
                let held = match &self.profile.reorder {
                    Some(r) if lane.rng.next_f64() < r.probability => {
                        at += (r.extra_delay_ms * 1_000.0).round() as Micros;
                        true
                    }
                    _ => false,
                };
                if !held {
                    at = at.max(lane.last_delivery);
                    lane.last_delivery = at;
                }
                lane.stats.delivered += 1;
                DeliveryOutcome::Delivered { at }
            }
        };

        if let Some(tap) = &mut self.tap {
            tap.push(TapRecord {
                direction: dir,
                send_time_us: now,
                deliver_time_us: match outcome {
                    DeliveryOutcome::Delivered { at } => Some(at),
                    DeliveryOutcome::Dropped(_) => None,
                },
                payload: payload.to_vec(),
            });
        }
        Ok(outcome)
    }

    /// All captured records in send order.
    pub fn tap_dump(&self) -> &[TapRecord] {
        self.tap.as_deref().unwrap_or(&[])
    }

    pub fn take_tap(&mut self) -> Vec<TapRecord> {
        self.tap.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{DelayModel, LossModel};

    fn profile() -> LinkProfile {
        LinkProfile {
            forward_rate_bps: 9_600_000,
            loss_model: LossModel::lossless(),
            ..LinkProfile::geo()
        }
    }

    #[test]
    fn idle_delivery_is_serialization_plus_delay() {
        let mut l = LinkEmulator::new(profile());
        let out = l.transmit(Direction::Forward, &[0u8; 1200], 0).unwrap();
        assert_eq!(out, DeliveryOutcome::Delivered { at: 1_000 + 250_000 });
    }

    #[test]
    fn queue_capacity_one_drops_third() {
        let mut l = LinkEmulator::new(LinkProfile {
            queue_capacity: 1,
            ..profile()
        });
        let d = Direction::Forward;
        assert!(matches!(l.transmit(d, &[0; 1200], 0), Ok(DeliveryOutcome::Delivered { .. })));
        assert!(matches!(l.transmit(d, &[0; 1200], 0), Ok(DeliveryOutcome::Delivered { at: 252_000 })));
        assert_eq!(
            l.transmit(d, &[0; 1200], 0).unwrap(),
            DeliveryOutcome::Dropped(DropReason::QueueOverflow)
        );
        // once the first finishes serializing there is room again
        assert!(matches!(l.transmit(d, &[0; 1200], 1_000), Ok(DeliveryOutcome::Delivered { at: 253_000 })));
        assert_eq!(l.tap_dump().len(), 4);
        assert_eq!(l.tap_dump()[2].deliver_time_us, None);
    }

    #[test]
    fn mtu_enforced() {
        let mut l = LinkEmulator::new(profile());
        assert_eq!(
            l.transmit(Direction::Return, &[0; 1501], 0),
            Err(LinkError::MtuExceeded { len: 1501, mtu: 1500 })
        );
    }

    #[test]
    fn clear_sky_has_no_losses() {
        let mut l = LinkEmulator::new(LinkProfile {
            seed: 42,
            ..LinkProfile::geo()
        });
        let mut lost = 0;
        for i in 0..10_000u64 {
            if let DeliveryOutcome::Dropped(DropReason::ChannelLoss) =
                l.transmit(Direction::Forward, &[1; 100], i * 1_000).unwrap()
            {
                lost += 1;
            }
        }
        assert_eq!(lost, 0);
    }

    #[test]
    fn channel_loss_still_occupies_the_link() {
        let mut l = LinkEmulator::new(LinkProfile {
            forward_rate_bps: 9_600_000,
            loss_model: LossModel {
                floor: 1.0,
                cap: 1.0,
                ..LossModel::default()
            },
            ..LinkProfile::geo()
        });
        let d = Direction::Forward;
        assert_eq!(
            l.transmit(d, &[0; 1200], 0).unwrap(),
            DeliveryOutcome::Dropped(DropReason::ChannelLoss)
        );
        assert_eq!(l.queued(d, 0), 0);
        assert_eq!(l.stats(d).channel_drops, 1);
        assert_eq!(l.lanes[0].busy_until, 1_000);
    }

    #[test]
    fn time_varying_delay_keeps_fifo() {
        let mut l = LinkEmulator::new(LinkProfile {
            forward_delay: DelayModel::Trace {
                points: vec![(0.0, 100.0), (1.0, 0.0), (2.0, 0.0)],
            },
            loss_model: LossModel::lossless(),
            ..LinkProfile::geo()
        });
        let a = l.transmit(Direction::Forward, &[0; 10], 0).unwrap();
        let b = l.transmit(Direction::Forward, &[0; 10], 900_000).unwrap();
        match (a, b) {
            (DeliveryOutcome::Delivered { at: x }, DeliveryOutcome::Delivered { at: y }) => assert!(y >= x),
            _ => panic!(),
        }
    }

    #[test]
    fn return_slots_round_up_occupancy() {
        let mut l = LinkEmulator::new(LinkProfile {
            return_slot_bytes: 100,
            return_rate_bps: 8_000_000,
            loss_model: LossModel::lossless(),
            ..LinkProfile::geo()
        });
        let out = l.transmit(Direction::Return, &[0; 101], 0).unwrap();
        assert_eq!(out, DeliveryOutcome::Delivered { at: 200 + 250_000 });
    }
}
