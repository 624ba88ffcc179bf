//! Protocol-parameter optimization.
//!
//! The objective is the analytic secret-key rate on expected (noise-free)
//! tallies for a fixed block size. The search runs Nelder-Mead in a unit cube
//! that maps onto the admissible box
//!
//! ```text
//! p_Z  in (0.5, 0.99)      mu2 in (0.001, 0.5)
//! mu1  in (mu2 + 0.01, 1)  P_mu1 in (0.05, 0.95)
//! ```
//!
//! so the `mu1 > mu2` ordering holds everywhere inside the cube.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelDetectorModel};
use crate::finitekey::{self, ProtocolParams, SecurityParams};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("no positive key anywhere in the search box at {loss_db:.2} dB")]
    NoPositiveKey { loss_db: f64 },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Default reconciliation efficiency assumed by rate simulations.
pub const DEFAULT_SIM_F: f64 = 1.16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub f_ec: f64,
    pub clock_hz: f64,
    pub max_iter: usize,
    /// Relative spread of simplex values at which a run stops.
    pub f_tol: f64,
    /// Simplex diameter (unit-cube coordinates) at which a run stops.
    pub x_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            f_ec: DEFAULT_SIM_F,
            clock_hz: 2.5e9,
            max_iter: 4000,
            f_tol: 1e-12,
            x_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_params: ProtocolParams,
    /// Bits per second.
    pub skr: f64,
    pub evaluations: usize,
    pub converged: bool,
}

const P_Z_RANGE: (f64, f64) = (0.5, 0.99);
const MU2_RANGE: (f64, f64) = (0.001, 0.5);
const MU1_GAP: f64 = 0.01;
const MU1_MAX: f64 = 1.0;
const P_MU1_RANGE: (f64, f64) = (0.05, 0.95);

fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo + (hi - lo) * u
}

/// Maps a point of the open unit cube to protocol parameters.
fn params_from_unit(u: &[f64; 4], template: &ProtocolParams) -> Option<ProtocolParams> {
    if u.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return None;
    }
    let p_z = lerp(P_Z_RANGE, u[0]);
    let mu2 = lerp(MU2_RANGE, u[2]);
    let mu1 = lerp((mu2 + MU1_GAP, MU1_MAX), u[1]);
    Some(ProtocolParams {
        p_z,
        q_z: p_z,
        mu1,
        mu2,
        p_mu1: lerp(P_MU1_RANGE, u[3]),
        ..*template
    })
}

#[cfg(test)]
fn unit_from_params(p: &ProtocolParams) -> [f64; 4] {
    let inv = |(lo, hi): (f64, f64), v: f64| (v - lo) / (hi - lo);
    [
        inv(P_Z_RANGE, p.p_z),
        inv((p.mu2 + MU1_GAP, MU1_MAX), p.mu1),
        inv(MU2_RANGE, p.mu2),
        inv(P_MU1_RANGE, p.p_mu1),
    ]
}

/// Signed key rate: the unclamped secret length over the accumulation time.
/// Negative values keep the search informative where no key is produced;
/// `None` flags infeasible statistics.
pub fn signed_rate(model: &ChannelDetectorModel, params: &ProtocolParams, f_ec: f64) -> Option<f64> {
    let tallies = channel::expected_tallies(model, params)?;
    let bounds = finitekey::estimate_decoy_bounds(&tallies, params).ok()?;
    let r = finitekey::secret_key_length(&tallies, &bounds, f_ec, params);
    Some(r.terms.total() / tallies.duration_s)
}

/// Clamped analytic SKR in bits per second; 0 where no key is produced.
pub fn analytic_skr(model: &ChannelDetectorModel, params: &ProtocolParams, f_ec: f64) -> f64 {
    let Some(tallies) = channel::expected_tallies(model, params) else {
        return 0.0;
    };
    match finitekey::estimate_decoy_bounds(&tallies, params) {
        Ok(b) => finitekey::secret_key_length(&tallies, &b, f_ec, params).skr,
        Err(_) => 0.0,
    }
}

const INFEASIBLE: f64 = 1e300;

struct NelderMead<F: FnMut(&[f64; 4]) -> f64> {
    objective: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64; 4]) -> f64> NelderMead<F> {
    fn eval(&mut self, x: &[f64; 4]) -> f64 {
        self.evaluations += 1;
        (self.objective)(x)
    }

    /// Minimizes from `start`; returns (best point, best value, converged).
    fn run(&mut self, start: [f64; 4], step: f64, cfg: &OptimizerConfig) -> ([f64; 4], f64, bool) {
        const N: usize = 4;
        let mut simplex: Vec<[f64; 4]> = Vec::with_capacity(N + 1);
        simplex.push(start);
        for i in 0..N {
            let mut p = start;
            // step inward so the initial simplex stays in the cube
            p[i] += if p[i] + step < 1.0 { step } else { -step };
            simplex.push(p);
        }
        let mut values: Vec<f64> = simplex.iter().map(|p| self.eval(p)).collect();

        for _ in 0..cfg.max_iter {
            let mut order: Vec<usize> = (0..=N).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i]).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let (best, worst) = (values[0], values[N]);
            let spread = (worst - best).abs();
            let diameter = simplex[1..]
                .iter()
                .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if worst < INFEASIBLE && spread <= cfg.f_tol * best.abs().max(1e-300) && diameter <= cfg.x_tol {
                return (simplex[0], values[0], true);
            }
            if diameter <= cfg.x_tol * 1e-3 {
                return (simplex[0], values[0], worst < INFEASIBLE);
            }

            let mut centroid = [0.0; N];
            for p in &simplex[..N] {
                for d in 0..N {
                    centroid[d] += p[d] / N as f64;
                }
            }
            let along = |t: f64| {
                let mut x = [0.0; N];
                for d in 0..N {
                    x[d] = centroid[d] + t * (simplex[N][d] - centroid[d]);
                }
                x
            };

            let xr = along(-1.0);
            let fr = self.eval(&xr);
            if fr < values[0] {
                let xe = along(-2.0);
                let fe = self.eval(&xe);
                if fe < fr {
                    simplex[N] = xe;
                    values[N] = fe;
                } else {
                    simplex[N] = xr;
                    values[N] = fr;
                }
                continue;
            }
            if fr < values[N - 1] {
                simplex[N] = xr;
                values[N] = fr;
                continue;
            }
            let (xc, fc) = if fr < values[N] {
                let x = along(-0.5);
                let f = self.eval(&x);
                (x, f)
            } else {
                let x = along(0.5);
                let f = self.eval(&x);
                (x, f)
            };
            if fc < values[N].min(fr) {
                simplex[N] = xc;
                values[N] = fc;
                continue;
            }
            // shrink toward the best vertex
            for i in 1..=N {
                for d in 0..N {
                    simplex[i][d] = simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]);
                }
                values[i] = self.eval(&simplex[i]);
            }
        }
        (simplex[0], values[0], false)
    }
}

/// Deterministic start set: the cube center plus seven corners of a
/// half-fraction design inset to 0.2/0.8.
fn start_points() -> Vec<[f64; 4]> {
    let mut pts = vec![[0.5; 4]];
    for bits in 0..7u8 {
        let (a, b, c) = (bits & 1, (bits >> 1) & 1, (bits >> 2) & 1);
        let d = a ^ b ^ c;
        let lvl = |bit: u8| if bit == 1 { 0.8 } else { 0.2 };
        pts.push([lvl(a), lvl(b), lvl(c), lvl(d)]);
    }
    pts
}

pub fn optimize_params(
    model: &ChannelDetectorModel,
    n_z_target: u64,
    security: SecurityParams,
) -> Result<OptimizationResult, OptimizeError> {
    optimize_params_with(model, n_z_target, security, &OptimizerConfig::default())
}

pub fn optimize_params_with(
    model: &ChannelDetectorModel,
    n_z_target: u64,
    security: SecurityParams,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult, OptimizeError> {
    let template = ProtocolParams {
        clock_hz: cfg.clock_hz,
        security,
        n_z_target,
        ..Default::default()
    };
    let mut nm = NelderMead {
        objective: |u: &[f64; 4]| match params_from_unit(u, &template) {
            Some(p) => signed_rate(model, &p, cfg.f_ec).map_or(INFEASIBLE, |r| -r),
            None => INFEASIBLE,
        },
        evaluations: 0,
    };

    let mut best: Option<([f64; 4], f64, bool)> = None;
    for start in start_points() {
        let mut run = nm.run(start, 0.1, cfg);
        // restart from the result until it stops moving
        for _ in 0..10 {
            let again = nm.run(run.0, 0.02, cfg);
            let improved = again.1 < run.1 - cfg.f_tol * run.1.abs();
            run = (again.0, again.1.min(run.1), again.2);
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }

    let (u, value, converged) = best.expect("start set is non-empty");
    let skr = -value;
    if !(skr > 0.0) {
        return Err(OptimizeError::NoPositiveKey {
            loss_db: model.loss_db(),
        });
    }
    let best_params = params_from_unit(&u, &template).expect("best point lies in the cube");
    Ok(OptimizationResult {
        best_params,
        skr: analytic_skr(model, &best_params, cfg.f_ec),
        evaluations: nm.evaluations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub loss_db: f64,
    pub skr_bps: f64,
    /// `None` where no positive key exists.
    pub params: Option<ProtocolParams>,
}

/// Optimizes every loss in `losses_db` independently, in parallel.
pub fn rate_distance_curve(
    template: &ChannelDetectorModel,
    losses_db: &[f64],
    n_z_target: u64,
    security: SecurityParams,
    cfg: &OptimizerConfig,
) -> Vec<CurvePoint> {
    losses_db
        .par_iter()
        .map(|&loss_db| {
            let model = template.with_loss_db(loss_db);
            match optimize_params_with(&model, n_z_target, security, cfg) {
                Ok(r) => CurvePoint {
                    loss_db,
                    skr_bps: r.skr,
                    params: Some(r.best_params),
                },
                Err(_) => CurvePoint {
                    loss_db,
                    skr_bps: 0.0,
                    params: None,
                },
            }
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow {
    loss_db: f64,
    skr_bps: f64,
    p_z: Option<f64>,
    mu1: Option<f64>,
    mu2: Option<f64>,
    p_mu1: Option<f64>,
}

/// CSV with columns `loss_db, skr_bps, p_z, mu1, mu2, p_mu1`. The header is
/// written even for an empty curve.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<(), OptimizeError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["loss_db", "skr_bps", "p_z", "mu1", "mu2", "p_mu1"])?;
    for p in points {
        w.serialize(CsvRow {
            loss_db: p.loss_db,
            skr_bps: p.skr_bps,
            p_z: p.params.map(|q| q.p_z),
            mu1: p.params.map(|q| q.mu1),
            mu2: p.params.map(|q| q.mu2),
            p_mu1: p.params.map(|q| q.p_mu1),
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
