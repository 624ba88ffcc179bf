//! Polarization drift and feedback simulator.
//!
//! States live on the Poincaré sphere: H/V along `s1` (Z basis), D/A along
//! `s2` (X basis). The fibre is a rotation that drifts as a random walk; the
//! EPC is three retarders with axes at 0°, 45°, 0°, i.e. rotations about
//! `s1`, `s2`, `s1`. The SPGD loop minimizes a weighted sum of the Z and X
//! error rates measured on calibration pulses.

use std::io::Write;

use nalgebra::{Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::corrected_yields;
use crate::finitekey::{Basis, Intensity};
use crate::preset::ExperimentPreset;

/// Default residual error per basis from finite transmitter extinction.
pub const E_FLOOR: f64 = 0.002;

/// Calibration count gain of strong pulses (12.9 dB).
pub fn strong_pulse_factor(gain_db: f64) -> f64 {
    10f64.powf(gain_db / 10.0)
}

#[derive(Debug, Error)]
pub enum PolarError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown drift preset {0:?}")]
    UnknownDrift(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Unit Stokes vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesState(Vector3<f64>);

impl StokesState {
    pub const H: StokesState = StokesState(Vector3::new(1.0, 0.0, 0.0));
    pub const V: StokesState = StokesState(Vector3::new(-1.0, 0.0, 0.0));
    pub const D: StokesState = StokesState(Vector3::new(0.0, 1.0, 0.0));
    pub const A: StokesState = StokesState(Vector3::new(0.0, -1.0, 0.0));

    pub fn new(v: Vector3<f64>) -> Option<StokesState> {
        let n = v.norm();
        (n > 0.0).then(|| StokesState(v / n))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn rotate(&self, r: &Rotation3<f64>) -> StokesState {
        StokesState(r * self.0)
    }

    /// Probability of the orthogonal outcome when measuring in `reference`'s
    /// basis.
    pub fn error_against(&self, reference: &StokesState) -> f64 {
        ((1.0 - self.0.dot(&reference.0)) / 2.0).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpcModel {
    /// Retardance per volt.
    pub rad_per_volt: f64,
    pub v_max: f64,
}

impl Default for EpcModel {
    fn default() -> Self {
        EpcModel {
            rad_per_volt: 0.05,
            v_max: 150.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpcVoltages {
    pub v: [f64; 3],
}

impl EpcVoltages {
    pub fn mid(epc: &EpcModel) -> EpcVoltages {
        EpcVoltages { v: [epc.v_max / 2.0; 3] }
    }

    pub fn clamped(mut self, epc: &EpcModel) -> EpcVoltages {
        for x in &mut self.v {
            *x = x.clamp(0.0, epc.v_max);
        }
        self
    }
}

/// Rotation applied by the EPC: first squeezer (0°), then 45°, then 0°.
pub fn epc_rotation(v: &EpcVoltages, epc: &EpcModel) -> Rotation3<f64> {
    let s1 = Vector3::x_axis();
    let s2 = Vector3::y_axis();
    let c = epc.rad_per_volt;
    Rotation3::from_axis_angle(&s1, c * v.v[2])
        * Rotation3::from_axis_angle(&s2, c * v.v[1])
        * Rotation3::from_axis_angle(&s1, c * v.v[0])
}

pub fn epc_apply(v: &EpcVoltages, epc: &EpcModel, state: &StokesState) -> StokesState {
    state.rotate(&epc_rotation(v, epc))
}

/// Composes `rot` with a rotation of angle `N(0, rate*dt)` about a uniformly
/// random axis.
pub fn fibre_drift_step<R: Rng>(rot: &Rotation3<f64>, rate: f64, dt: f64, rng: &mut R) -> Rotation3<f64> {
    let sigma = rate * dt;
    if !(sigma > 0.0) {
        return *rot;
    }
    let angle = Normal::new(0.0, sigma).expect("sigma > 0").sample(rng);
    let axis: [f64; 3] = UnitSphere.sample(rng);
    Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle) * rot
}

/// Haar-random rotation.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    // a normalized Gaussian 4-vector is a uniform unit quaternion
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    let q = Quaternion::new(g(), g(), g(), g());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberNoise {
    pub e_floor: f64,
    /// Matched-basis calibration counts per accumulation window; `None`
    /// measures without shot noise.
    pub counts_z: Option<u64>,
    pub counts_x: Option<u64>,
}

impl QberNoise {
    pub fn noiseless(e_floor: f64) -> QberNoise {
        QberNoise {
            e_floor,
            counts_z: None,
            counts_x: None,
        }
    }
}

/// Error rates without shot noise for channel `channel` followed by the EPC.
pub fn true_qber(channel: &Rotation3<f64>, v: &EpcVoltages, epc: &EpcModel, e_floor: f64) -> (f64, f64) {
    let total = epc_rotation(v, epc) * channel;
    // the antipodal state of each basis gives the same error
    let e = |s: StokesState| e_floor + (1.0 - 2.0 * e_floor) * s.rotate(&total).error_against(&s);
    (e(StokesState::H), e(StokesState::D))
}

fn sample_rate<R: Rng>(p: f64, counts: Option<u64>, rng: &mut R) -> f64 {
    match counts {
        None => p,
        Some(0) => 0.5,
        Some(n) => Binomial::new(n, p.clamp(0.0, 1.0)).expect("p in [0,1]").sample(rng) as f64 / n as f64,
    }
}

/// Measured `(E_Z, E_X)` from one accumulation window of calibration pulses.
pub fn measure_qber<R: Rng>(
    channel: &Rotation3<f64>,
    v: &EpcVoltages,
    epc: &EpcModel,
    noise: &QberNoise,
    rng: &mut R,
) -> (f64, f64) {
    let (ez, ex) = true_qber(channel, v, epc, noise.e_floor);
    (sample_rate(ez, noise.counts_z, rng), sample_rate(ex, noise.counts_x, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpgdConfig {
    pub gain: f64,
    /// Perturbation amplitude in volts.
    pub delta: f64,
    pub max_steps: usize,
    pub w_z: f64,
    pub w_x: f64,
    /// Fraction of pulses used for calibration.
    pub calibration_ratio: f64,
    /// Accumulation time of one objective evaluation.
    pub accumulation_s: f64,
}

impl Default for SpgdConfig {
    fn default() -> Self {
        SpgdConfig {
            gain: 90.0,
            delta: 1.5,
            max_steps: 500,
            w_z: 0.5,
            w_x: 0.5,
            calibration_ratio: 1.0 / 256.0,
            accumulation_s: 0.5,
        }
    }
}

impl SpgdConfig {
    pub fn validate(&self) -> Result<(), PolarError> {
        if !(self.gain > 0.0 && self.delta > 0.0) {
            return Err(PolarError::Config("gain and delta must be positive".into()));
        }
        if !(self.calibration_ratio > 0.0 && self.calibration_ratio <= 1.0) {
            return Err(PolarError::Config("calibration ratio must lie in (0,1]".into()));
        }
        if !(self.accumulation_s > 0.0) {
            return Err(PolarError::Config("accumulation time must be positive".into()));
        }
        Ok(())
    }

    pub fn objective(&self, ez: f64, ex: f64) -> f64 {
        self.w_z * ez + self.w_x * ex
    }
}

/// One SPGD iteration: `v' = v - gain (J(v+d) - J(v-d)) d` with
/// `d in {-delta, +delta}^3`, clamped to the voltage box.
pub fn spgd_step<R: Rng, F: FnMut(&EpcVoltages) -> f64>(
    v: &EpcVoltages,
    mut objective: F,
    cfg: &SpgdConfig,
    epc: &EpcModel,
    rng: &mut R,
) -> EpcVoltages {
    let d: [f64; 3] = std::array::from_fn(|_| if rng.random::<bool>() { cfg.delta } else { -cfg.delta });
    let plus = EpcVoltages {
        v: std::array::from_fn(|i| v.v[i] + d[i]),
    }
    .clamped(epc);
    let minus = EpcVoltages {
        v: std::array::from_fn(|i| v.v[i] - d[i]),
    }
    .clamped(epc);
    let dj = objective(&plus) - objective(&minus);
    EpcVoltages {
        v: std::array::from_fn(|i| v.v[i] - cfg.gain * dj * d[i]),
    }
    .clamped(epc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    /// Random-walk rate in rad/s.
    pub rate: f64,
    /// Mean spike onsets per second.
    pub spike_rate: f64,
    pub spike_duration_s: f64,
    /// Drift rate multiplier during a spike.
    pub spike_factor: f64,
}

impl DriftModel {
    pub const NONE: DriftModel = DriftModel {
        rate: 0.0,
        spike_rate: 0.0,
        spike_duration_s: 0.0,
        spike_factor: 1.0,
    };

    /// "lab-slow": 0.01 rad/min. "spike": the same with temperature bursts
    /// about every 20 minutes.
    pub fn preset(name: &str) -> Result<DriftModel, PolarError> {
        let slow = 0.01 / 60.0;
        match name {
            "none" => Ok(DriftModel::NONE),
            "lab-slow" => Ok(DriftModel { rate: slow, ..DriftModel::NONE }),
            "spike" => Ok(DriftModel {
                rate: slow,
                spike_rate: 1.0 / 1200.0,
                spike_duration_s: 30.0,
                spike_factor: 200.0,
            }),
            _ => Err(PolarError::UnknownDrift(name.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialAlignment {
    /// Channel cancelled by the EPC's starting voltages.
    Aligned,
    /// Haar-random residual rotation.
    Random,
    /// Residual rotation by this angle about a random axis.
    Angle(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub drift: DriftModel,
    pub epc: EpcModel,
    pub spgd: SpgdConfig,
    pub e_floor: f64,
    /// Weak-pulse matched-basis calibration counts per window; `None` for a
    /// noiseless objective.
    pub weak_counts_z: Option<f64>,
    pub weak_counts_x: Option<f64>,
    pub strong_pulses: bool,
    pub strong_gain_db: f64,
    pub initial: InitialAlignment,
    /// Combined QBER `(E_Z + E_X)/2` that counts as converged.
    pub threshold: f64,
    pub seed: u64,
}

impl Scenario {
    /// Calibration counts from a preset: calibration pulses at the signal
    /// intensity, same basis choices as the key pulses.
    pub fn from_preset(p: &ExperimentPreset, drift: DriftModel) -> Scenario {
        let spgd = SpgdConfig {
            calibration_ratio: 1.0 / p.runtime.calibration_period as f64,
            accumulation_s: p.runtime.feedback_accumulation_s,
            ..Default::default()
        };
        let y = corrected_yields(&p.model, &p.params);
        let pulses = p.params.clock_hz * spgd.calibration_ratio * spgd.accumulation_s;
        let counts = |b: Basis| pulses * p.params.p_basis(b) * y[b.index()][Intensity::Signal.index()].q;
        Scenario {
            drift,
            epc: EpcModel::default(),
            spgd,
            e_floor: E_FLOOR,
            weak_counts_z: Some(counts(Basis::Z)),
            weak_counts_x: Some(counts(Basis::X)),
            strong_pulses: p.runtime.strong_pulse_gain_db > 0.0,
            strong_gain_db: if p.runtime.strong_pulse_gain_db > 0.0 {
                p.runtime.strong_pulse_gain_db
            } else {
                12.9
            },
            initial: InitialAlignment::Random,
            threshold: 0.01,
            seed: 0,
        }
    }

    pub fn noise(&self) -> QberNoise {
        let scale = if self.strong_pulses {
            strong_pulse_factor(self.strong_gain_db)
        } else {
            1.0
        };
        let n = |c: Option<f64>| c.map(|c| (c * scale).round() as u64);
        QberNoise {
            e_floor: self.e_floor,
            counts_z: n(self.weak_counts_z),
            counts_x: n(self.weak_counts_x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t_s: f64,
    /// Measured rates, averaged over the step's two windows.
    pub e_z: f64,
    pub e_x: f64,
    /// Noiseless rates at the updated voltages.
    pub e_z_true: f64,
    pub e_x_true: f64,
    pub v: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub points: Vec<TracePoint>,
    /// First step after which the noiseless combined QBER is below the
    /// threshold.
    pub steps_to_threshold: Option<usize>,
}

impl Trace {
    /// CSV with columns `t_s,e_z,e_x,v1,v2,v3`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PolarError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "e_z", "e_x", "v1", "v2", "v3"])?;
        for p in &self.points {
            w.serialize((p.t_s, p.e_z, p.e_x, p.v[0], p.v[1], p.v[2]))?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Mean measured `(E_Z, E_X)` over the points from `from` on.
    pub fn mean_qber(&self, from: usize) -> (f64, f64) {
        let tail = &self.points[from.min(self.points.len())..];
        let n = tail.len().max(1) as f64;
        (
            tail.iter().map(|p| p.e_z).sum::<f64>() / n,
            tail.iter().map(|p| p.e_x).sum::<f64>() / n,
        )
    }
}

struct Drifter {
    model: DriftModel,
    spike_left: f64,
}

impl Drifter {
    fn advance<R: Rng>(&mut self, rot: &Rotation3<f64>, dt: f64, rng: &mut R) -> Rotation3<f64> {
        if self.spike_left <= 0.0 && self.model.spike_rate > 0.0 && rng.random::<f64>() < self.model.spike_rate * dt {
            self.spike_left = self.model.spike_duration_s;
        }
        let rate = if self.spike_left > 0.0 {
            self.spike_left -= dt;
            self.model.rate * self.model.spike_factor
        } else {
            self.model.rate
        };
        fibre_drift_step(rot, rate, dt, rng)
    }
}

/// Runs drift and SPGD for `spgd.max_steps` steps. Each step spends two
/// accumulation windows, one per perturbation sign.
pub fn run_compensation(sc: &Scenario) -> Result<Trace, PolarError> {
    sc.spgd.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut v = EpcVoltages::mid(&sc.epc);
    let error = match sc.initial {
        InitialAlignment::Aligned => Rotation3::identity(),
        InitialAlignment::Random => random_rotation(&mut rng),
        InitialAlignment::Angle(a) => {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), a)
        }
    };
    // misalignment is measured from the controller's starting point
    let mut channel = epc_rotation(&v, &sc.epc).inverse() * error;
    let noise = sc.noise();
    let dt = sc.spgd.accumulation_s;
    let mut drift = Drifter {
        model: sc.drift,
        spike_left: 0.0,
    };
    let mut points = Vec::with_capacity(sc.spgd.max_steps);
    let mut reached = None;
    let mut t = 0.0;

    for step in 0..sc.spgd.max_steps {
        let mut seen = Vec::with_capacity(2);
        let mut meas_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let next = spgd_step(
            &v,
            |vv| {
                channel = drift.advance(&channel, dt, &mut meas_rng);
                let (ez, ex) = measure_qber(&channel, vv, &sc.epc, &noise, &mut meas_rng);
                seen.push((ez, ex));
                sc.spgd.objective(ez, ex)
            },
            &sc.spgd,
            &sc.epc,
            &mut rng,
        );
        v = next;
        t += 2.0 * dt;
        let (ez_t, ex_t) = true_qber(&channel, &v, &sc.epc, sc.e_floor);
        if reached.is_none() && (ez_t + ex_t) / 2.0 < sc.threshold {
            reached = Some(step + 1);
        }
        points.push(TracePoint {
            t_s: t,
            e_z: (seen[0].0 + seen[1].0) / 2.0,
            e_x: (seen[0].1 + seen[1].1) / 2.0,
            e_z_true: ez_t,
            e_x_true: ex_t,
            v: v.v,
        });
    }
    Ok(Trace {
        points,
        steps_to_threshold: reached,
    })
}

/// Steps to threshold for `trials` runs of `sc` with seeds `sc.seed..`,
/// run in parallel. `None` where a run never converged.
pub fn monte_carlo(sc: &Scenario, trials: u64) -> Result<Vec<Option<usize>>, PolarError> {
    sc.spgd.validate()?;
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let run = Scenario {
                seed: sc.seed.wrapping_add(i),
                ..sc.clone()
            };
            run_compensation(&run).map(|t| t.steps_to_threshold)
        })
        .collect()
}

/// Median step count, ranking non-converged runs last. `None` when the
/// median run did not converge.
pub fn median_steps(steps: &[Option<usize>]) -> Option<usize> {
    let mut s: Vec<usize> = steps.iter().map(|x| x.unwrap_or(usize::MAX)).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_unstable();
    Some(s[s.len() / 2]).filter(|&m| m != usize::MAX)
}
