//! Source, fibre and detector model.
//!
//! Yields and error rates follow the standard decoy-state simulation model:
//! for Bob's basis `B` and intensity `mu_k`
//!
//! ```text
//! D   = 1 - (1 - 2 p_dc) exp(-mu_k eta_sys q_B)
//! Q   = D (1 + p_ap)
//! Q E = p_dc + e_mis (1 - 2 p_dc) (1 - exp(-mu_k eta_sys q_B)) + p_ap D / 2
//! ```
//!
//! Detector saturation is a non-paralyzable dead time applied as a
//! rate-dependent efficiency.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::finitekey::{Basis, CellTally, ExpectedTallies, Intensity, ObservedTallies, ProtocolParams};

mod ns {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(secs: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(secs * 1e9)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(f64::deserialize(d)? * 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDetectorModel {
    pub alpha_db_per_km: f64,
    pub fibre_km: f64,
    /// Lumped insertion loss on top of the fibre attenuation.
    #[serde(default)]
    pub extra_loss_db: f64,
    /// Bob's apparatus efficiency including the detectors.
    pub eta_bob: f64,
    /// Dark-count probability per pulse per detector.
    pub p_dc: f64,
    pub e_mis: f64,
    #[serde(default)]
    pub p_ap: f64,
    #[serde(rename = "tau_dead_ns", with = "ns")]
    pub tau_dead_s: f64,
    /// Low-flux detector efficiency, used by the saturation curve.
    pub eta0: f64,
}

impl Default for ChannelDetectorModel {
    fn default() -> Self {
        ChannelDetectorModel {
            alpha_db_per_km: 0.19,
            fibre_km: 0.0,
            extra_loss_db: 0.0,
            eta_bob: 0.5608,
            p_dc: 1e-8,
            e_mis: 0.004,
            p_ap: 0.0,
            tau_dead_s: 0.7e-9,
            eta0: 0.78,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("invalid channel model: {0}")]
pub struct ModelError(pub String);

impl ChannelDetectorModel {
    /// Model with the whole channel loss lumped into `extra_loss_db`.
    pub fn with_loss_db(mut self, loss_db: f64) -> Self {
        self.fibre_km = 0.0;
        self.extra_loss_db = loss_db;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let probs = [
            ("eta_bob", self.eta_bob),
            ("p_dc", self.p_dc),
            ("e_mis", self.e_mis),
            ("p_ap", self.p_ap),
            ("eta0", self.eta0),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(self.tau_dead_s >= 0.0) {
            return Err(ModelError(format!("tau_dead must be >= 0, got {}", self.tau_dead_s)));
        }
        if !(self.alpha_db_per_km >= 0.0) {
            return Err(ModelError(format!("alpha must be >= 0, got {}", self.alpha_db_per_km)));
        }
        if !(self.fibre_km >= 0.0) {
            return Err(ModelError(format!("fibre length must be >= 0, got {}", self.fibre_km)));
        }
        if !(self.loss_db() >= 0.0) || !self.loss_db().is_finite() {
            return Err(ModelError(format!("total loss must be a finite value >= 0 dB, got {}", self.loss_db())));
        }
        Ok(())
    }

    /// Total channel loss in dB.
    pub fn loss_db(&self) -> f64 {
        self.alpha_db_per_km * self.fibre_km + self.extra_loss_db
    }

    /// `eta_sys = eta_ch * eta_bob`.
    pub fn eta_sys(&self) -> f64 {
        channel_transmittance(self) * self.eta_bob
    }
}

pub fn channel_transmittance(model: &ChannelDetectorModel) -> f64 {
    10f64.powf(-model.loss_db() / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YieldError {
    /// Click probability of the basis-`B` detector pair.
    pub d: f64,
    /// Detection probability including afterpulses.
    pub q: f64,
    /// Bit error rate of those detections.
    pub e: f64,
}

impl YieldError {
    /// `Q * E`, the error probability per pulse.
    pub fn qe(&self) -> f64 {
        self.q * self.e
    }
}

/// Yield and error rate for mean photon number `mu` reaching Bob's basis-`B`
/// detectors with basis probability `q_b`.
pub fn yield_error_for(model: &ChannelDetectorModel, mu: f64, q_b: f64) -> YieldError {
    let arrival = (-mu * model.eta_sys() * q_b).exp();
    let d = 1.0 - (1.0 - 2.0 * model.p_dc) * arrival;
    let q = d * (1.0 + model.p_ap);
    let qe = model.p_dc + model.e_mis * (1.0 - 2.0 * model.p_dc) * (1.0 - arrival) + 0.5 * model.p_ap * d;
    let e = if q > 0.0 { qe / q } else { 0.0 };
    YieldError { d, q, e }
}

pub fn expected_yield_error(
    model: &ChannelDetectorModel,
    params: &ProtocolParams,
    basis: Basis,
    intensity: Intensity,
) -> YieldError {
    yield_error_for(model, params.mu(intensity), params.q_basis(basis))
}

/// Non-paralyzable saturated count rate for `incident_rate` photons/s.
pub fn deadtime_effective_rate(incident_rate: f64, model: &ChannelDetectorModel) -> f64 {
    let r = incident_rate.max(0.0) * model.eta0;
    r / (1.0 + r * model.tau_dead_s)
}

/// Detection efficiency at `incident_rate`, i.e. saturated rate / incident rate.
pub fn deadtime_efficiency(incident_rate: f64, model: &ChannelDetectorModel) -> f64 {
    if incident_rate <= 0.0 {
        return model.eta0;
    }
    deadtime_effective_rate(incident_rate, model) / incident_rate
}

/// Per-basis multiplicative detection efficiency from dead time at the
/// protocol clock rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeadtimeFactors {
    pub z: f64,
    pub x: f64,
}

impl DeadtimeFactors {
    pub fn get(&self, b: Basis) -> f64 {
        match b {
            Basis::Z => self.z,
            Basis::X => self.x,
        }
    }
}

/// Uncorrected click rate of basis-`b` detectors, in counts per second.
pub fn basis_click_rate(model: &ChannelDetectorModel, params: &ProtocolParams, b: Basis) -> f64 {
    let per_pulse: f64 = Intensity::ALL
        .iter()
        .map(|&k| params.p_mu(k) * expected_yield_error(model, params, b, k).q)
        .sum();
    params.clock_hz * per_pulse
}

/// Scaling `1/(1 + R_det tau)` for each basis, `R_det` being that basis'
/// uncorrected detection rate.
pub fn apply_deadtime_to_yield(model: &ChannelDetectorModel, params: &ProtocolParams) -> DeadtimeFactors {
    let factor = |b| 1.0 / (1.0 + basis_click_rate(model, params, b) * model.tau_dead_s);
    DeadtimeFactors {
        z: factor(Basis::Z),
        x: factor(Basis::X),
    }
}

/// Dead-time corrected yields for every (basis, intensity) cell, indexed
/// `[basis][intensity]`.
pub fn corrected_yields(model: &ChannelDetectorModel, params: &ProtocolParams) -> [[YieldError; 2]; 2] {
    let dt = apply_deadtime_to_yield(model, params);
    let cell = |b: Basis, k: Intensity| {
        let y = expected_yield_error(model, params, b, k);
        let f = dt.get(b);
        YieldError {
            d: y.d * f,
            q: y.q * f,
            e: y.e,
        }
    };
    [
        [cell(Basis::Z, Intensity::Signal), cell(Basis::Z, Intensity::Decoy)],
        [cell(Basis::X, Intensity::Signal), cell(Basis::X, Intensity::Decoy)],
    ]
}

/// Expected sifted Z detections per emitted pulse.
pub fn sifted_z_per_pulse(model: &ChannelDetectorModel, params: &ProtocolParams) -> f64 {
    let y = corrected_yields(model, params);
    params.p_z
        * Intensity::ALL
            .iter()
            .map(|&k| params.p_mu(k) * y[0][k.index()].q)
            .sum::<f64>()
}

/// Expected tallies over `pulses` emitted pulses.
pub fn expected_tallies_for_pulses(model: &ChannelDetectorModel, params: &ProtocolParams, pulses: f64) -> ExpectedTallies {
    let y = corrected_yields(model, params);
    let mut t = ExpectedTallies {
        duration_s: pulses / params.clock_hz,
        ..Default::default()
    };
    for b in Basis::ALL {
        for k in Intensity::ALL {
            let sent = pulses * params.p_basis(b) * params.p_mu(k);
            let yc = y[b.index()][k.index()];
            t.detected[b.index()][k.index()] = sent * yc.q;
            t.errors[b.index()][k.index()] = sent * yc.qe();
        }
    }
    t
}

/// Expected tallies for the accumulation time needed to reach
/// `params.n_z_target` sifted Z bits. `None` when no Z bits arrive at all.
pub fn expected_tallies(model: &ChannelDetectorModel, params: &ProtocolParams) -> Option<ExpectedTallies> {
    let per_pulse = sifted_z_per_pulse(model, params);
    if !(per_pulse > 0.0) {
        return None;
    }
    Some(expected_tallies_for_pulses(
        model,
        params,
        params.n_z_target as f64 / per_pulse,
    ))
}

/// Share of the model Z-basis error rate caused by dark counts.
pub fn dark_count_error_share(model: &ChannelDetectorModel, params: &ProtocolParams) -> f64 {
    let y = corrected_yields(model, params);
    let dt = apply_deadtime_to_yield(model, params);
    let (mut dark, mut total) = (0.0, 0.0);
    for k in Intensity::ALL {
        dark += params.p_mu(k) * model.p_dc * dt.z;
        total += params.p_mu(k) * y[0][k.index()].q;
    }
    if total > 0.0 {
        dark / total
    } else {
        0.0
    }
}

/// Photon-number resolved counts that a real run cannot observe.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhotonTruth {
    pub z_vacuum: u64,
    pub z_single: u64,
    /// Phase errors among the single-photon Z events.
    pub z_single_phase_errors: u64,
    pub x_single: u64,
    pub x_single_errors: u64,
}

impl PhotonTruth {
    pub fn z_single_phase_error_rate(&self) -> f64 {
        if self.z_single == 0 {
            0.0
        } else {
            self.z_single_phase_errors as f64 / self.z_single as f64
        }
    }
}

fn binomial<R: rand::Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p checked in (0,1)").sample(rng)
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial<R: rand::Rng>(rng: &mut R, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(probs.len());
    let mut left = n;
    let mut mass = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if i + 1 == probs.len() {
            out.push(left);
            break;
        }
        let c = if mass > 0.0 { binomial(rng, left, (p / mass).min(1.0)) } else { 0 };
        out.push(c);
        left -= c;
        mass -= p;
    }
    out
}

fn poisson_weights(mu: f64, tail: f64) -> Vec<f64> {
    let mut w = vec![(-mu).exp()];
    let mut acc = w[0];
    let mut n = 0u32;
    while 1.0 - acc > tail && n < 60 {
        n += 1;
        let next = w[n as usize - 1] * mu / f64::from(n);
        w.push(next);
        acc += next;
    }
    let last = w.len() - 1;
    w[last] += (1.0 - acc).max(0.0);
    w
}

/// Samples tallies for `duration_s` seconds of operation. Deterministic given
/// `seed`.
pub fn sample_tallies(model: &ChannelDetectorModel, params: &ProtocolParams, duration_s: f64, seed: u64) -> ObservedTallies {
    sample_tallies_with_truth(model, params, duration_s, seed).0
}

/// As [`sample_tallies`], also returning the photon-number decomposition.
pub fn sample_tallies_with_truth(
    model: &ChannelDetectorModel,
    params: &ProtocolParams,
    duration_s: f64,
    seed: u64,
) -> (ObservedTallies, PhotonTruth) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pulses = (params.clock_hz * duration_s).round() as u64;
    let dt = apply_deadtime_to_yield(model, params);
    let eta = model.eta_sys();

    let cells: Vec<(Basis, Intensity)> = Basis::ALL
        .iter()
        .flat_map(|&b| Intensity::ALL.iter().map(move |&k| (b, k)))
        .collect();
    let probs: Vec<f64> = cells.iter().map(|&(b, k)| params.p_basis(b) * params.p_mu(k)).collect();
    let sent = multinomial(&mut rng, pulses, &probs);

    let mut tallies = ObservedTallies {
        duration_s,
        ..Default::default()
    };
    let mut truth = PhotonTruth::default();

    for (&(b, k), &n_sent) in cells.iter().zip(&sent) {
        let q_b = params.q_basis(b);
        let f = dt.get(b);
        let weights = poisson_weights(params.mu(k), 1e-15);
        let by_photon = multinomial(&mut rng, n_sent, &weights);
        let mut cell = CellTally {
            sent: n_sent,
            ..Default::default()
        };
        for (n_photons, &count) in by_photon.iter().enumerate() {
            let survive = (1.0 - eta * q_b).powi(n_photons as i32);
            let d = 1.0 - (1.0 - 2.0 * model.p_dc) * survive;
            let y = d * (1.0 + model.p_ap);
            let ye = model.p_dc + model.e_mis * (1.0 - 2.0 * model.p_dc) * (1.0 - survive) + 0.5 * model.p_ap * d;
            let e = if y > 0.0 { ye / y } else { 0.0 };
            let det = binomial(&mut rng, count, (y * f).min(1.0));
            let err = binomial(&mut rng, det, e);
            cell.detected += det;
            cell.errors += err;
            match (b, n_photons) {
                (Basis::Z, 0) => truth.z_vacuum += det,
                (Basis::Z, 1) => {
                    truth.z_single += det;
                    truth.z_single_phase_errors += binomial(&mut rng, det, e);
                }
                (Basis::X, 1) => {
                    truth.x_single += det;
                    truth.x_single_errors += err;
                }
                _ => {}
            }
        }
        *tallies.cell_mut(b, k) = cell;
    }
    (tallies, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn transmittance_reference_points() {
        let m = ChannelDetectorModel::default();
        assert_eq!(channel_transmittance(&m), 1.0);
        let ten = ChannelDetectorModel {
            fibre_km: 10.0,
            ..m
        };
        // mpmath: 10^-0.19
        assert_relative_eq!(channel_transmittance(&ten), 0.645_654_229_034_655_5, max_relative = 1e-14);
        let long = m.with_loss_db(55.1);
        assert_relative_eq!(channel_transmittance(&long), 3.090_295_432_513_59e-6, max_relative = 1e-12);
    }

    #[test]
    fn vacuum_pulse_yields_dark_counts_only() {
        let m = ChannelDetectorModel::default();
        let y = yield_error_for(&m, 0.0, 0.9);
        assert_relative_eq!(y.d, 2.0 * m.p_dc, max_relative = 1e-8);
        assert_relative_eq!(y.e, 0.5, max_relative = 1e-8);
    }

    #[test]
    fn noiseless_error_is_misalignment() {
        let m = ChannelDetectorModel {
            p_dc: 0.0,
            p_ap: 0.0,
            ..Default::default()
        }
        .with_loss_db(10.0);
        assert_relative_eq!(yield_error_for(&m, 1e-4, 0.9).e, m.e_mis, max_relative = 1e-12);
    }

    #[test]
    fn deadtime_anchor() {
        let m = ChannelDetectorModel::default();
        assert_eq!(deadtime_effective_rate(0.0, &m), 0.0);
        // mpmath: r = 552e6 * 0.78, R = r / (1 + r * 0.7 ns)
        let r = deadtime_effective_rate(552e6, &m);
        assert_relative_eq!(r, 330_845_740.560_876_35, max_relative = 1e-12);
        assert_relative_eq!(deadtime_efficiency(552e6, &m), 0.599_358_225_653_761_5, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn deadtime_below_asymptote_monotone_concave(r in 0.0f64..1e12, dr in 1.0f64..1e9) {
            let m = ChannelDetectorModel::default();
            let f = |x| deadtime_effective_rate(x, &m);
            prop_assert!(f(r) < 1.0 / m.tau_dead_s);
            prop_assert!(f(r + dr) > f(r));
            prop_assert!(f(r + dr) - f(r) >= f(r + 2.0 * dr) - f(r + dr) - 1e-6);
        }

        #[test]
        fn error_probability_below_yield(mu in 0.0f64..2.0, loss in 0.0f64..70.0, q in 0.0f64..1.0,
                                         p_ap in 0.0f64..0.1, e_mis in 0.0f64..0.5) {
            let m = ChannelDetectorModel { p_ap, e_mis, ..Default::default() }.with_loss_db(loss);
            let y = yield_error_for(&m, mu, q);
            prop_assert!(y.qe() <= y.q + 1e-15);
        }

        #[test]
        fn error_rate_non_increasing_in_mu(mu in 0.001f64..1.5, dmu in 0.0f64..0.5, loss in 0.0f64..60.0) {
            let m = ChannelDetectorModel::default().with_loss_db(loss);
            let a = yield_error_for(&m, mu, 0.9).e;
            let b = yield_error_for(&m, mu + dmu, 0.9).e;
            prop_assert!(b <= a + 1e-15);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = ChannelDetectorModel::default().with_loss_db(9.5);
        let p = ProtocolParams::default();
        let a = sample_tallies(&m, &p, 0.01, 7);
        let b = sample_tallies(&m, &p, 0.01, 7);
        let c = sample_tallies(&m, &p, 0.01, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_detection_matches_expectation() {
        let m = ChannelDetectorModel::default().with_loss_db(9.5);
        let p = ProtocolParams::default();
        let t = sample_tallies(&m, &p, 0.02, 11);
        let y = corrected_yields(&m, &p);
        for b in Basis::ALL {
            for k in Intensity::ALL {
                let c = t.cell(b, k);
                let q = y[b.index()][k.index()].q;
                let mean = c.sent as f64 * q;
                let sd = (c.sent as f64 * q * (1.0 - q)).sqrt();
                assert!(
                    (c.detected as f64 - mean).abs() < 5.0 * sd,
                    "{b:?}/{k:?}: {} vs {mean} +- {sd}",
                    c.detected
                );
            }
        }
    }

    #[test]
    fn full_z_bias_leaves_x_empty() {
        let m = ChannelDetectorModel::default().with_loss_db(2.2);
        let p = ProtocolParams {
            p_z: 1.0,
            q_z: 1.0,
            ..Default::default()
        };
        let t = sample_tallies(&m, &p, 1e-4, 3);
        for k in Intensity::ALL {
            assert_eq!(t.cell(Basis::X, k).sent, 0);
            assert_eq!(t.cell(Basis::X, k).detected, 0);
        }
        assert!(t.n_z() > 0);
    }

    #[test]
    fn expected_tallies_hit_block_target() {
        let m = ChannelDetectorModel::default().with_loss_db(2.2);
        let p = ProtocolParams::default();
        let t = expected_tallies(&m, &p).unwrap();
        let n_z: f64 = t.detected[0].iter().sum();
        assert_relative_eq!(n_z, 1e8, max_relative = 1e-12);
    }

    #[test]
    fn config_keys_carry_units() {
        let m = ChannelDetectorModel::default();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"tau_dead_ns\":0.7"), "{s}");
        let back: ChannelDetectorModel = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(back.tau_dead_s, 0.7e-9, max_relative = 1e-12);
    }
}
