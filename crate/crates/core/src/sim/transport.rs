//! Rate-capped transport streams with a fixed recovery lag.
//!
//! A stream carries `min(demand, bottleneck)` while it is usable (connected
//! and forwarded) and nothing otherwise. When it becomes usable again after
//! a disruption during which traffic was dropped by the access gate, it
//! stays silent for `recovery_lag` seconds first.

use serde::Serialize;

use crate::ids::FlowId;

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum StreamState {
    /// Not started, or ended.
    Idle,
    Flowing,
    Disrupted {
        /// Traffic was dropped by the access gate at some point.
        gated: bool,
    },
    Recovering {
        until: f64,
    },
}

/// What the network currently offers a stream.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Offer {
    pub connected: bool,
    pub forwarded: bool,
    /// Mbps along the current path.
    pub bottleneck: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransportStream {
    pub id: FlowId,
    pub demand: f64,
    pub recovery_lag: f64,
    state: StreamState,
    active: bool,
    has_flowed: bool,
    offer_rate: f64,
    usable: bool,
    updated: f64,
    /// Megabits delivered so far.
    volume: f64,
    /// Integral of the path bottleneck over usable time.
    capacity_volume: f64,
    /// Seconds spent active.
    active_time: f64,
    last_sample_volume: f64,
}

impl TransportStream {
    pub fn new(id: FlowId, demand: f64, recovery_lag: f64) -> Self {
        TransportStream {
            id,
            demand,
            recovery_lag,
            state: StreamState::Idle,
            active: false,
            has_flowed: false,
            offer_rate: 0.0,
            usable: false,
            updated: 0.0,
            volume: 0.0,
            capacity_volume: 0.0,
            active_time: 0.0,
            last_sample_volume: 0.0,
        }
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn capacity_volume(&self) -> f64 {
        self.capacity_volume
    }

    pub fn active_time(&self) -> f64 {
        self.active_time
    }

    /// Instantaneous rate in Mbps.
    pub fn rate_at(&self, t: f64) -> f64 {
        match self.state {
            StreamState::Flowing => self.offer_rate,
            StreamState::Recovering { until } if t >= until => self.offer_rate,
            _ => 0.0,
        }
    }

    /// Integrates delivered volume up to `t`.
    pub fn advance(&mut self, t: f64) {
        if t <= self.updated {
            return;
        }
        let from = self.updated;
        if self.active {
            self.active_time += t - from;
        }
        if self.usable {
            self.capacity_volume += self.offer_rate * (t - from);
        }
        match self.state {
            StreamState::Flowing => self.volume += self.offer_rate * (t - from),
            StreamState::Recovering { until } if t >= until => {
                self.volume += self.offer_rate * (t - until.max(from));
                self.state = StreamState::Flowing;
                self.has_flowed = true;
            }
            _ => {}
        }
        self.updated = t;
    }

    pub fn set_active(&mut self, t: f64, active: bool) {
        self.advance(t);
        self.active = active;
        if !active {
            self.state = StreamState::Idle;
            self.usable = false;
        }
    }

    /// Applies the current network offer at time `t`.
    pub fn update(&mut self, t: f64, offer: Offer) {
        self.advance(t);
        if !self.active {
            return;
        }
        let usable = offer.connected && offer.forwarded;
        self.usable = usable;
        self.offer_rate = if usable { self.demand.min(offer.bottleneck) } else { 0.0 };
        self.state = match (self.state, usable) {
            (StreamState::Idle, true) if !self.has_flowed => {
                self.has_flowed = true;
                StreamState::Flowing
            }
            (StreamState::Idle, true) => StreamState::Flowing,
            (StreamState::Idle, false) => StreamState::Disrupted {
                gated: self.has_flowed && !offer.forwarded,
            },
            (StreamState::Flowing, false) | (StreamState::Recovering { .. }, false) => StreamState::Disrupted {
                gated: offer.connected && !offer.forwarded,
            },
            (StreamState::Disrupted { gated }, false) => StreamState::Disrupted {
                gated: gated || (offer.connected && !offer.forwarded),
            },
            (StreamState::Disrupted { gated }, true) => {
                if gated && self.has_flowed {
                    StreamState::Recovering {
                        until: t + self.recovery_lag,
                    }
                } else {
                    self.has_flowed = true;
                    StreamState::Flowing
                }
            }
            (s @ (StreamState::Flowing | StreamState::Recovering { .. }), true) => s,
        };
    }

    /// Mean rate over the interval since the previous sample, rounded to
    /// 1e-6 Mbps.
    pub fn sample(&mut self, t: f64, period: f64) -> f64 {
        self.advance(t);
        let delta = self.volume - self.last_sample_volume;
        self.last_sample_volume = self.volume;
        round6(delta / period)
    }
}

pub fn round6(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}
