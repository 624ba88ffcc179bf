//! Event-level source and channel simulation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::channel::{apply_deadtime_to_yield, ChannelDetectorModel, DeadtimeFactors};
use crate::finitekey::{Basis, Intensity, ProtocolParams};

/// One calibration pulse in this many when feedback is enabled.
pub const CALIBRATION_PERIOD: u64 = 256;

/// 32-byte seed for the stream `label` of a numeric seed.
pub fn derive_seed(label: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseRecord {
    pub index: u64,
    pub bit: u8,
    pub basis: Basis,
    pub intensity: Intensity,
    /// Reserved for polarization feedback; never part of the key.
    pub calibration: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub index: u64,
    pub basis_measured: Basis,
    pub bit_measured: u8,
    /// 1..=4 for Z0, Z1, X0, X1.
    pub detector_id: u8,
}

/// Probability as a threshold on a 32-bit uniform draw.
fn threshold(p: f64) -> u64 {
    (p.clamp(0.0, 1.0) * 4_294_967_296.0).round() as u64
}

/// Alice's pulse stream: i.i.d. basis, intensity and bit per pulse.
#[derive(Debug, Clone)]
pub struct AliceSource {
    rng: ChaCha8Rng,
    next: u64,
    end: u64,
    z_below: u64,
    mu1_below: u64,
    calibration_period: Option<u64>,
}

impl AliceSource {
    pub fn new(params: &ProtocolParams, n_pulses: u64, seed: u64, calibration_period: Option<u64>) -> AliceSource {
        AliceSource {
            rng: ChaCha8Rng::from_seed(derive_seed("alice-source", seed)),
            next: 0,
            end: n_pulses,
            z_below: threshold(params.p_z),
            mu1_below: threshold(params.p_mu1),
            calibration_period: calibration_period.filter(|&p| p > 0),
        }
    }

    pub fn remaining(&self) -> u64 {
        self.end - self.next
    }

    /// Up to `max` further pulses.
    pub fn next_batch(&mut self, max: usize) -> Vec<PulseRecord> {
        let n = (max as u64).min(self.remaining()) as usize;
        (0..n).filter_map(|_| self.next()).collect()
    }
}

impl Iterator for AliceSource {
    type Item = PulseRecord;

    fn next(&mut self) -> Option<PulseRecord> {
        if self.next >= self.end {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let r = self.rng.next_u64();
        let basis = if (r >> 32) < self.z_below { Basis::Z } else { Basis::X };
        let intensity = if (r & 0xffff_ffff) >> 1 < self.mu1_below >> 1 {
            Intensity::Signal
        } else {
            Intensity::Decoy
        };
        Some(PulseRecord {
            index,
            bit: (r & 1) as u8,
            basis,
            intensity,
            calibration: self.calibration_period.is_some_and(|p| index % p == p - 1),
        })
    }
}

/// `n_pulses` pulses from a fresh source without calibration slots.
pub fn alice_generate(params: &ProtocolParams, n_pulses: u64, seed: u64) -> AliceSource {
    AliceSource::new(params, n_pulses, seed, None)
}

fn poisson_cdf(lambda: f64) -> Vec<f64> {
    let mut term = (-lambda).exp();
    let mut acc = term;
    let mut cdf = vec![acc];
    let mut n = 0.0;
    while 1.0 - acc > 1e-16 && cdf.len() < 64 {
        n += 1.0;
        term *= lambda / n;
        acc += term;
        cdf.push(acc);
    }
    cdf
}

/// Channel and Bob's receiver. Physical noise (photon arrivals, dark counts,
/// misalignment, dead time) draws from the channel seed; Bob's passive basis
/// split and squashing coins draw from Bob's seed.
#[derive(Debug, Clone)]
pub struct ChannelSim {
    ch: ChaCha8Rng,
    bob: ChaCha8Rng,
    /// Arrival-count CDF at Bob for each intensity.
    arrivals: [Vec<f64>; 2],
    q_z: f64,
    e_mis: f64,
    p_dark_any: f64,
    dark_in: u64,
    p_ap: f64,
    afterpulse: Option<Basis>,
    dt: DeadtimeFactors,
}

impl ChannelSim {
    pub fn new(model: &ChannelDetectorModel, params: &ProtocolParams, seed_channel: u64, seed_bob: u64) -> ChannelSim {
        let eta = model.eta_sys();
        let mut sim = ChannelSim {
            ch: ChaCha8Rng::from_seed(derive_seed("channel", seed_channel)),
            bob: ChaCha8Rng::from_seed(derive_seed("bob-receiver", seed_bob)),
            arrivals: [poisson_cdf(params.mu1 * eta), poisson_cdf(params.mu2 * eta)],
            q_z: params.q_z,
            e_mis: model.e_mis,
            p_dark_any: 1.0 - (1.0 - model.p_dc).powi(4),
            dark_in: 0,
            p_ap: model.p_ap,
            afterpulse: None,
            dt: apply_deadtime_to_yield(model, params),
        };
        sim.dark_in = sim.next_dark_gap();
        sim
    }

    /// Pulses until the next dark click on any of the four detectors.
    fn next_dark_gap(&mut self) -> u64 {
        if self.p_dark_any <= 0.0 {
            return u64::MAX;
        }
        let u: f64 = 1.0 - self.ch.random::<f64>();
        (u.ln() / (1.0 - self.p_dark_any).ln()).floor().min(u64::MAX as f64) as u64
    }

    fn arrivals(&mut self, k: Intensity) -> usize {
        let u: f64 = self.ch.random();
        let cdf = &self.arrivals[k.index()];
        if u < cdf[0] {
            return 0;
        }
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }

    /// Click mask (bit `2*basis + bit`) for one pulse.
    fn clicks(&mut self, p: &PulseRecord) -> u8 {
        let mut mask = 0u8;
        for _ in 0..self.arrivals(p.intensity) {
            let b = if self.bob.random::<f64>() < self.q_z { Basis::Z } else { Basis::X };
            let bit = if b == p.basis {
                p.bit ^ u8::from(self.ch.random::<f64>() < self.e_mis)
            } else {
                self.ch.random::<u8>() & 1
            };
            mask |= 1 << (2 * b.index() as u8 + bit);
        }
        if self.dark_in == 0 {
            mask |= 1 << self.ch.random_range(0..4u8);
            self.dark_in = self.next_dark_gap();
        } else {
            self.dark_in -= 1;
        }
        if let Some(b) = self.afterpulse.take() {
            mask |= 1 << (2 * b.index() as u8 + (self.ch.random::<u8>() & 1));
        }
        mask
    }

    /// Detection for one pulse, if any.
    pub fn detect_one(&mut self, p: &PulseRecord) -> Option<DetectionRecord> {
        if p.calibration {
            return None;
        }
        let mask = self.clicks(p);
        if mask == 0 {
            return None;
        }
        let (z, x) = (mask & 0b0011 != 0, mask & 0b1100 != 0);
        let basis = match (z, x) {
            (true, true) => {
                if self.bob.random::<bool>() {
                    Basis::Z
                } else {
                    Basis::X
                }
            }
            (true, false) => Basis::Z,
            _ => Basis::X,
        };
        let bit = match (mask >> (2 * basis.index())) & 0b11 {
            0b01 => 0,
            0b10 => 1,
            _ => self.bob.random::<u8>() & 1,
        };
        if self.ch.random::<f64>() >= self.dt.get(basis) {
            return None;
        }
        if self.p_ap > 0.0 && self.ch.random::<f64>() < self.p_ap {
            self.afterpulse = Some(basis);
        }
        Some(DetectionRecord {
            index: p.index,
            basis_measured: basis,
            bit_measured: bit,
            detector_id: 1 + 2 * basis.index() as u8 + bit,
        })
    }

    pub fn detect(&mut self, pulses: &[PulseRecord]) -> Vec<DetectionRecord> {
        pulses.iter().filter_map(|p| self.detect_one(p)).collect()
    }
}

/// Detections for a whole pulse sequence, with channel and receiver
/// randomness both derived from `seed`.
pub fn channel_detect(
    pulses: &[PulseRecord],
    model: &ChannelDetectorModel,
    params: &ProtocolParams,
    seed: u64,
) -> Vec<DetectionRecord> {
    ChannelSim::new(model, params, seed, seed).detect(pulses)
}
