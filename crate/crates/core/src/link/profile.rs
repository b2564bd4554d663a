use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{Micros, MICROS_PER_SEC};

/// Direction across the satellite hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Gateway towards terminal.
    Forward,
    /// Terminal towards gateway.
    Return,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Return => 1,
        }
    }

    pub fn wire_code(self) -> u8 {
        self.index() as u8
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Direction::Forward),
            1 => Some(Direction::Return),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("link rates must be positive")]
    ZeroRate,
    #[error("mtu {0} is below 576")]
    MtuTooSmall(usize),
    #[error("attenuation must be non-negative")]
    NegativeAttenuation,
    #[error("queue capacity must be at least 1")]
    ZeroQueue,
    #[error("invalid delay model: {0}")]
    Delay(String),
    #[error("invalid loss model: {0}")]
    Loss(String),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
}

/// One-way propagation delay as a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Constant { one_way_ms: f64 },
    /// Piecewise-linear `(t_s, one_way_ms)` points, repeating with the period of the last point.
    Trace { points: Vec<(f64, f64)> },
    /// `min + (max - min) * (1 - cos(2πt/period)) / 2`
    SinusoidLeo { min_ms: f64, max_ms: f64, period_s: f64 },
}

impl DelayModel {
    pub fn geo() -> Self {
        DelayModel::Constant { one_way_ms: 250.0 }
    }

    pub fn leo() -> Self {
        DelayModel::SinusoidLeo {
            min_ms: 25.0,
            max_ms: 140.0,
            period_s: 600.0,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Delay(m.to_string()));
        match self {
            DelayModel::Constant { one_way_ms } => {
                if !(one_way_ms.is_finite() && *one_way_ms >= 0.0) {
                    return bad("constant delay must be a non-negative number");
                }
            }
            DelayModel::Trace { points } => {
                if points.is_empty() {
                    return bad("trace needs at least one point");
                }
                if points[0].0 != 0.0 {
                    return bad("trace must start at t=0");
                }
                if points.iter().any(|(t, d)| !t.is_finite() || !d.is_finite() || *d < 0.0) {
                    return bad("trace delays must be non-negative numbers");
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return bad("trace times must be strictly increasing");
                }
            }
            DelayModel::SinusoidLeo {
                min_ms,
                max_ms,
                period_s,
            } => {
                if !(*min_ms >= 0.0 && max_ms >= min_ms && *period_s > 0.0) {
                    return bad("sinusoid needs 0 <= min <= max and period > 0");
                }
            }
        }
        Ok(())
    }

    /// One-way delay in milliseconds at virtual time `t_us`.
    pub fn one_way_ms(&self, t_us: Micros) -> f64 {
        let t_s = t_us as f64 / MICROS_PER_SEC as f64;
        match self {
            DelayModel::Constant { one_way_ms } => *one_way_ms,
            DelayModel::Trace { points } => {
                let period = points[points.len() - 1].0;
                if points.len() == 1 || period <= 0.0 {
                    return points[0].1;
                }
                let t = t_s % period;
                let i = points.partition_point(|(pt, _)| *pt <= t);
                let (t0, d0) = points[i - 1];
                match points.get(i) {
                    Some(&(t1, d1)) => d0 + (d1 - d0) * (t - t0) / (t1 - t0),
                    None => d0,
                }
            }
            DelayModel::SinusoidLeo {
                min_ms,
                max_ms,
                period_s,
            } => {
                let phase = 2.0 * std::f64::consts::PI * t_s / period_s;
                min_ms + (max_ms - min_ms) * (1.0 - phase.cos()) / 2.0
            }
        }
    }

    pub fn one_way_us(&self, t_us: Micros) -> Micros {
        (self.one_way_ms(t_us) * 1_000.0).round() as Micros
    }
}

/// Logistic map from SNR to per-datagram loss probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossModel {
    pub snr_mid_db: f64,
    pub steepness_k: f64,
    pub floor: f64,
    pub cap: f64,
}

impl Default for LossModel {
    fn default() -> Self {
        Self {
            snr_mid_db: 10.5,
            steepness_k: 1.5,
            floor: 0.0,
            cap: 0.95,
        }
    }
}

impl LossModel {
    /// Never drops anything.
    pub fn lossless() -> Self {
        Self {
            floor: 0.0,
            cap: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(0.0 <= self.floor && self.floor <= self.cap && self.cap <= 1.0) {
            return Err(ProfileError::Loss("need 0 <= floor <= cap <= 1".into()));
        }
        if !(self.steepness_k > 0.0) {
            return Err(ProfileError::Loss("steepness must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_probability(&self, snr_db: f64) -> f64 {
        let p = 1.0 / (1.0 + (self.steepness_k * (snr_db - self.snr_mid_db)).exp());
        p.clamp(self.floor, self.cap)
    }
}

/// Optional reordering: a datagram is held back by `extra_delay_ms` with the given probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderKnob {
    pub probability: f64,
    pub extra_delay_ms: f64,
}

/// Full description of the emulated satellite channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkProfile {
    pub forward_delay: DelayModel,
    pub return_delay: DelayModel,
    pub forward_rate_bps: u64,
    pub return_rate_bps: u64,
    pub clear_sky_snr_db: f64,
    pub attenuation_forward_db: f64,
    pub attenuation_return_db: f64,
    pub loss_model: LossModel,
    /// Extra SNR-independent loss probability, combined with the curve.
    pub injected_loss: f64,
    pub mtu_bytes: usize,
    pub queue_capacity: usize,
    /// Return-link transmissions occupy whole slots of this many bytes (0 = byte granular).
    pub return_slot_bytes: usize,
    pub reorder: Option<ReorderKnob>,
    pub seed: u64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        Self::geo()
    }
}

impl LinkProfile {
    pub fn geo() -> Self {
        Self {
            forward_delay: DelayModel::geo(),
            return_delay: DelayModel::geo(),
            forward_rate_bps: 10_000_000,
            return_rate_bps: 2_000_000,
            clear_sky_snr_db: 20.0,
            attenuation_forward_db: 0.0,
            attenuation_return_db: 0.0,
            loss_model: LossModel::default(),
            injected_loss: 0.0,
            mtu_bytes: 1500,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            return_slot_bytes: DEFAULT_RETURN_SLOT_BYTES,
            reorder: None,
            seed: 1,
        }
    }

    pub fn leo() -> Self {
        Self {
            forward_delay: DelayModel::leo(),
            return_delay: DelayModel::leo(),
            ..Self::geo()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.forward_rate_bps == 0 || self.return_rate_bps == 0 {
            return Err(ProfileError::ZeroRate);
        }
        if self.mtu_bytes < 576 {
            return Err(ProfileError::MtuTooSmall(self.mtu_bytes));
        }
        if self.attenuation_forward_db < 0.0 || self.attenuation_return_db < 0.0 {
            return Err(ProfileError::NegativeAttenuation);
        }
        if self.queue_capacity == 0 {
            return Err(ProfileError::ZeroQueue);
        }
        if !(0.0..=1.0).contains(&self.injected_loss) {
            return Err(ProfileError::Probability(self.injected_loss));
        }
        if let Some(r) = &self.reorder {
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(ProfileError::Probability(r.probability));
            }
        }
        self.forward_delay.validate()?;
        self.return_delay.validate()?;
        self.loss_model.validate()
    }

    pub fn delay(&self, dir: Direction) -> &DelayModel {
        match dir {
            Direction::Forward => &self.forward_delay,
            Direction::Return => &self.return_delay,
        }
    }

    pub fn rate_bps(&self, dir: Direction) -> u64 {
        match dir {
            Direction::Forward => self.forward_rate_bps,
            Direction::Return => self.return_rate_bps,
        }
    }

    pub fn attenuation_db(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Forward => self.attenuation_forward_db,
            Direction::Return => self.attenuation_return_db,
        }
    }

    /// Clear-sky SNR minus the direction's attenuation, never below 0 dB.
    pub fn effective_snr(&self, dir: Direction, _t_us: Micros) -> f64 {
        (self.clear_sky_snr_db - self.attenuation_db(dir)).max(0.0)
    }

    pub fn loss_probability(&self, dir: Direction, t_us: Micros) -> f64 {
        let p = self.loss_model.loss_probability(self.effective_snr(dir, t_us));
        1.0 - (1.0 - p) * (1.0 - self.injected_loss)
    }

    /// Sets both attenuations so that the effective SNR equals `snr_db`.
    pub fn set_snr(&mut self, snr_db: f64) {
        let atten = (self.clear_sky_snr_db - snr_db).max(0.0);
        self.attenuation_forward_db = atten;
        self.attenuation_return_db = atten;
    }

    /// Bytes the link actually occupies for a datagram of `len` bytes.
    pub fn wire_len(&self, dir: Direction, len: usize) -> usize {
        match (dir, self.return_slot_bytes) {
            (Direction::Return, slot) if slot > 0 => len.div_ceil(slot) * slot,
            _ => len,
        }
    }
}

pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;
pub const DEFAULT_RETURN_SLOT_BYTES: usize = 0;
