//! Emulated satellite channel: per-direction delay, rate, bounded FIFO queue,
//! SNR-driven loss and an over-the-air capture tap.

mod emulator;
mod profile;
mod tap;

pub use emulator::{DeliveryOutcome, DropReason, LinkEmulator, LinkError, LinkStats};
pub use profile::{
    DelayModel, Direction, LinkProfile, LossModel, ProfileError, ReorderKnob,
    DEFAULT_QUEUE_CAPACITY, DEFAULT_RETURN_SLOT_BYTES,
};
pub use tap::{contains, read_tap_log, tap_contains, write_tap_log, TapRecord};
