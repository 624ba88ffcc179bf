//! Finite-key secret-key-length evaluation for the 1-decoy BB84 protocol.
//!
//! Everything in here is a pure function of its inputs. Tallies may be exact
//! integer counts ([`ObservedTallies`]) or expected values
//! ([`ExpectedTallies`]); both are read through the [`Tallies`] trait so the
//! optimizer and the measured-data path share one bound estimator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of Hoeffding/sampling corrections sharing the `eps_sec` budget.
pub const EPS_SEC_SPLIT: f64 = 19.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiniteKeyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),
}

pub type Result<T> = std::result::Result<T, FiniteKeyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

/// Signal (`mu1`) or decoy (`mu2`) intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intensity {
    Signal,
    Decoy,
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Signal, Intensity::Decoy];

    pub fn index(self) -> usize {
        match self {
            Intensity::Signal => 0,
            Intensity::Decoy => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub eps_sec: f64,
    pub eps_cor: f64,
}

impl SecurityParams {
    pub fn new(eps_sec: f64, eps_cor: f64) -> Result<Self> {
        let s = SecurityParams { eps_sec, eps_cor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.eps_sec) || !open_unit(self.eps_cor) {
            return Err(FiniteKeyError::InvalidParams(format!(
                "epsilons must lie in (0,1), got eps_sec={} eps_cor={}",
                self.eps_sec, self.eps_cor
            )));
        }
        Ok(())
    }

    /// Composable-security cost `6 log2(19/eps_sec) + log2(2/eps_cor)`.
    pub fn epsilon_cost(&self) -> f64 {
        6.0 * (EPS_SEC_SPLIT / self.eps_sec).log2() + (2.0 / self.eps_cor).log2()
    }
}

impl Default for SecurityParams {
    fn default() -> Self {
        SecurityParams {
            eps_sec: 1e-10,
            eps_cor: 1e-15,
        }
    }
}

/// Transmitter and receiver protocol choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Alice's probability of preparing in Z.
    pub p_z: f64,
    /// Bob's passive probability of measuring in Z.
    pub q_z: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Probability of sending `mu1`; `mu2` is sent with `1 - p_mu1`.
    pub p_mu1: f64,
    pub clock_hz: f64,
    #[serde(default)]
    pub security: SecurityParams,
    pub n_z_target: u64,
}

impl ProtocolParams {
    pub const MIN_BLOCK: u64 = 100_000;

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FiniteKeyError::InvalidParams(msg));
        if !(self.p_z > 0.5 && self.p_z < 1.0) {
            return bad(format!("p_z must lie in (0.5,1), got {}", self.p_z));
        }
        if !(0.0..=1.0).contains(&self.q_z) {
            return bad(format!("q_z must lie in [0,1], got {}", self.q_z));
        }
        if !(self.mu1 > self.mu2 && self.mu2 > 0.0) {
            return bad(format!(
                "need mu1 > mu2 > 0, got mu1={} mu2={}",
                self.mu1, self.mu2
            ));
        }
        if !(self.p_mu1 > 0.0 && self.p_mu1 < 1.0) {
            return bad(format!("p_mu1 must lie in (0,1), got {}", self.p_mu1));
        }
        if !(self.clock_hz > 0.0) {
            return bad(format!("clock_hz must be positive, got {}", self.clock_hz));
        }
        if self.n_z_target < Self::MIN_BLOCK {
            return bad(format!(
                "n_z_target must be >= {}, got {}",
                Self::MIN_BLOCK,
                self.n_z_target
            ));
        }
        self.security.validate()
    }

    pub fn p_mu2(&self) -> f64 {
        1.0 - self.p_mu1
    }

    pub fn mu(&self, k: Intensity) -> f64 {
        match k {
            Intensity::Signal => self.mu1,
            Intensity::Decoy => self.mu2,
        }
    }

    pub fn p_mu(&self, k: Intensity) -> f64 {
        match k {
            Intensity::Signal => self.p_mu1,
            Intensity::Decoy => self.p_mu2(),
        }
    }

    /// Alice's probability of preparing in `b`.
    pub fn p_basis(&self, b: Basis) -> f64 {
        match b {
            Basis::Z => self.p_z,
            Basis::X => 1.0 - self.p_z,
        }
    }

    /// Bob's probability of measuring in `b`.
    pub fn q_basis(&self, b: Basis) -> f64 {
        match b {
            Basis::Z => self.q_z,
            Basis::X => 1.0 - self.q_z,
        }
    }
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            p_z: 0.9,
            q_z: 0.9,
            mu1: 0.6,
            mu2: 0.15,
            p_mu1: 0.8,
            clock_hz: 2.5e9,
            security: SecurityParams::default(),
            n_z_target: 100_000_000,
        }
    }
}

/// Counts for one (basis, intensity) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTally {
    pub sent: u64,
    pub detected: u64,
    pub errors: u64,
}

/// Read access to per-basis, per-intensity tallies.
pub trait Tallies {
    fn detected(&self, b: Basis, k: Intensity) -> f64;
    fn errors(&self, b: Basis, k: Intensity) -> f64;
    fn duration_s(&self) -> f64;

    fn basis_detected(&self, b: Basis) -> f64 {
        Intensity::ALL.iter().map(|&k| self.detected(b, k)).sum()
    }

    fn basis_errors(&self, b: Basis) -> f64 {
        Intensity::ALL.iter().map(|&k| self.errors(b, k)).sum()
    }

    /// Bit error rate in `b` over both intensities.
    fn error_rate(&self, b: Basis) -> f64 {
        let n = self.basis_detected(b);
        if n > 0.0 {
            self.basis_errors(b) / n
        } else {
            0.0
        }
    }
}

/// Exact integer tallies as collected by a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservedTallies {
    /// Indexed `[intensity]`, signal first.
    pub z: [CellTally; 2],
    pub x: [CellTally; 2],
    pub duration_s: f64,
}

impl ObservedTallies {
    pub fn cell(&self, b: Basis, k: Intensity) -> &CellTally {
        match b {
            Basis::Z => &self.z[k.index()],
            Basis::X => &self.x[k.index()],
        }
    }

    pub fn cell_mut(&mut self, b: Basis, k: Intensity) -> &mut CellTally {
        match b {
            Basis::Z => &mut self.z[k.index()],
            Basis::X => &mut self.x[k.index()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in Basis::ALL {
            for k in Intensity::ALL {
                let c = self.cell(b, k);
                if c.errors > c.detected || c.detected > c.sent {
                    return Err(FiniteKeyError::Domain(format!(
                        "tally {b:?}/{k:?} violates errors <= detected <= sent: {c:?}"
                    )));
                }
            }
        }
        if !(self.duration_s >= 0.0) {
            return Err(FiniteKeyError::Domain(format!(
                "duration must be non-negative, got {}",
                self.duration_s
            )));
        }
        Ok(())
    }

    pub fn n_z(&self) -> u64 {
        self.z.iter().map(|c| c.detected).sum()
    }

    pub fn m_z(&self) -> u64 {
        self.z.iter().map(|c| c.errors).sum()
    }

    /// Element-wise sum, durations added.
    pub fn merge(&mut self, other: &ObservedTallies) {
        for b in Basis::ALL {
            for k in Intensity::ALL {
                let o = *other.cell(b, k);
                let c = self.cell_mut(b, k);
                c.sent += o.sent;
                c.detected += o.detected;
                c.errors += o.errors;
            }
        }
        self.duration_s += other.duration_s;
    }
}

impl Tallies for ObservedTallies {
    fn detected(&self, b: Basis, k: Intensity) -> f64 {
        self.cell(b, k).detected as f64
    }

    fn errors(&self, b: Basis, k: Intensity) -> f64 {
        self.cell(b, k).errors as f64
    }

    fn duration_s(&self) -> f64 {
        self.duration_s
    }
}

/// Noise-free expected tallies, used by the optimizer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExpectedTallies {
    /// `[basis][intensity]`
    pub detected: [[f64; 2]; 2],
    pub errors: [[f64; 2]; 2],
    pub duration_s: f64,
}

impl Tallies for ExpectedTallies {
    fn detected(&self, b: Basis, k: Intensity) -> f64 {
        self.detected[b.index()][k.index()]
    }

    fn errors(&self, b: Basis, k: Intensity) -> f64 {
        self.errors[b.index()][k.index()]
    }

    fn duration_s(&self) -> f64 {
        self.duration_s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundFlags {
    /// `s_z0_l` came out negative and was clamped to 0.
    pub s_z0_clamped: bool,
    /// `phi_z_u` exceeded 0.5 and was clamped.
    pub phi_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyBounds {
    pub s_z0_l: f64,
    pub s_z1_l: f64,
    pub s_x1_l: f64,
    pub v_x1_u: f64,
    pub phi_z_u: f64,
    pub tau0: f64,
    pub tau1: f64,
    /// Upper bound on Z vacuum events, an intermediate of `s_z1_l`.
    pub s_z0_u: f64,
    pub flags: BoundFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyTerms {
    pub vacuum: f64,
    pub single_photon: f64,
    pub error_correction: f64,
    pub epsilon_cost: f64,
}

impl KeyTerms {
    pub fn total(&self) -> f64 {
        self.vacuum + self.single_photon - self.error_correction - self.epsilon_cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateResult {
    pub secret_len: u64,
    /// Bits per second.
    pub skr: f64,
    pub terms: KeyTerms,
}

pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FiniteKeyError::Domain(format!(
            "binary entropy needs p in [0,1], got {p}"
        )));
    }
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Hoeffding deviation `sqrt(n/2 * ln(1/eps))` for `n` trials.
pub fn hoeffding_delta(n: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0 && eps < 1.0);
    if n <= 0.0 {
        return 0.0;
    }
    (n / 2.0 * (1.0 / eps).ln()).sqrt()
}

/// Probability that a pulse holds `n` photons, averaged over both intensities.
pub fn poisson_tau(n: u32, params: &ProtocolParams) -> f64 {
    let fact: f64 = (1..=n).map(f64::from).product();
    Intensity::ALL
        .iter()
        .map(|&k| {
            let mu = params.mu(k);
            params.p_mu(k) * (-mu).exp() * mu.powi(n as i32) / fact
        })
        .sum()
}

/// Random-sampling correction between the X-basis single-photon error rate
/// and the Z-basis phase-error rate.
fn sampling_gamma(eps: f64, rate: f64, s_z1: f64, s_x1: f64) -> f64 {
    if rate <= 0.0 || rate >= 1.0 {
        return 0.0;
    }
    let (c, d, b) = (s_z1, s_x1, rate);
    let arg = (c + d) / (c * d * (1.0 - b) * b) / (eps * eps);
    if arg <= 1.0 {
        return 0.0;
    }
    ((c + d) * (1.0 - b) * b / (c * d * std::f64::consts::LN_2) * arg.log2()).sqrt()
}

struct CorrectedCounts {
    n_minus: [f64; 2],
    n_plus: [f64; 2],
    m_minus: [f64; 2],
    m_plus: [f64; 2],
    delta_n: f64,
}

fn corrected_counts<T: Tallies>(t: &T, b: Basis, params: &ProtocolParams, eps: f64) -> CorrectedCounts {
    let delta_n = hoeffding_delta(t.basis_detected(b), eps);
    let delta_m = hoeffding_delta(t.basis_errors(b), eps);
    let mut c = CorrectedCounts {
        n_minus: [0.0; 2],
        n_plus: [0.0; 2],
        m_minus: [0.0; 2],
        m_plus: [0.0; 2],
        delta_n,
    };
    for k in Intensity::ALL {
        let w = params.mu(k).exp() / params.p_mu(k);
        let i = k.index();
        let n = t.detected(b, k);
        let m = t.errors(b, k);
        // lower corrections are left unclamped, as in the reference bounds
        c.n_minus[i] = w * (n - delta_n);
        c.n_plus[i] = w * (n + delta_n);
        c.m_minus[i] = w * (m - delta_m);
        c.m_plus[i] = w * (m + delta_m);
    }
    c
}

struct BasisBounds {
    s0_l: f64,
    s0_u: f64,
    s1_l: f64,
}

fn basis_bounds(c: &CorrectedCounts, params: &ProtocolParams, tau0: f64, tau1: f64) -> BasisBounds {
    let (mu1, mu2) = (params.mu1, params.mu2);
    let (s, d) = (Intensity::Signal.index(), Intensity::Decoy.index());
    let s0_l = tau0 / (mu1 - mu2) * (mu1 * c.n_minus[d] - mu2 * c.n_plus[s]);
    let s0_u = 2.0 * (tau0 * c.m_plus[d] + c.delta_n);
    let s1_l = tau1 * mu1 / (mu2 * (mu1 - mu2))
        * (c.n_minus[d]
            - (mu2 * mu2) / (mu1 * mu1) * c.n_plus[s]
            - (mu1 * mu1 - mu2 * mu2) / (mu1 * mu1) * s0_u / tau0);
    BasisBounds { s0_l, s0_u, s1_l }
}

/// 1-decoy lower bounds on vacuum and single-photon Z events and the upper
/// bound on the single-photon phase-error rate.
pub fn estimate_decoy_bounds<T: Tallies>(tallies: &T, params: &ProtocolParams) -> Result<DecoyBounds> {
    if !(params.mu1 > params.mu2 && params.mu2 > 0.0) {
        return Err(FiniteKeyError::InvalidParams(format!(
            "need mu1 > mu2 > 0, got mu1={} mu2={}",
            params.mu1, params.mu2
        )));
    }
    if !(params.p_mu1 > 0.0 && params.p_mu1 < 1.0) {
        return Err(FiniteKeyError::InvalidParams(format!(
            "p_mu1 must lie in (0,1), got {}",
            params.p_mu1
        )));
    }
    for b in Basis::ALL {
        if tallies.basis_detected(b) <= 0.0 {
            return Err(FiniteKeyError::InsufficientStatistics(format!(
                "no detections in basis {b:?}"
            )));
        }
    }

    let eps = params.security.eps_sec / EPS_SEC_SPLIT;
    let tau0 = poisson_tau(0, params);
    let tau1 = poisson_tau(1, params);

    let cz = corrected_counts(tallies, Basis::Z, params, eps);
    let cx = corrected_counts(tallies, Basis::X, params, eps);
    let z = basis_bounds(&cz, params, tau0, tau1);
    let x = basis_bounds(&cx, params, tau0, tau1);

    if z.s1_l <= 0.0 {
        return Err(FiniteKeyError::InsufficientStatistics(format!(
            "single-photon Z lower bound is non-positive ({:.3})",
            z.s1_l
        )));
    }
    if x.s1_l <= 0.0 {
        return Err(FiniteKeyError::InsufficientStatistics(format!(
            "single-photon X lower bound is non-positive ({:.3})",
            x.s1_l
        )));
    }

    let (s, d) = (Intensity::Signal.index(), Intensity::Decoy.index());
    let v_x1_u = (tau1 / (params.mu1 - params.mu2) * (cx.m_plus[s] - cx.m_minus[d])).max(0.0);
    let rate = v_x1_u / x.s1_l;
    let mut flags = BoundFlags::default();
    let phi_raw = rate + sampling_gamma(eps, rate.min(0.5), z.s1_l, x.s1_l);
    let phi_z_u = if phi_raw > 0.5 {
        flags.phi_clamped = true;
        0.5
    } else {
        phi_raw
    };
    let s_z0_l = if z.s0_l < 0.0 {
        flags.s_z0_clamped = true;
        0.0
    } else {
        z.s0_l
    };

    Ok(DecoyBounds {
        s_z0_l,
        s_z1_l: z.s1_l,
        s_x1_l: x.s1_l,
        v_x1_u,
        phi_z_u,
        tau0,
        tau1,
        s_z0_u: z.s0_u,
        flags,
    })
}

/// Evaluates the secret-key length and rate for one block.
///
/// The error-correction cost is `f * n_Z * h(E_Z)` with `n_Z` and `E_Z` taken
/// from the Z tallies of both intensities.
pub fn secret_key_length<T: Tallies>(
    tallies: &T,
    bounds: &DecoyBounds,
    f: f64,
    params: &ProtocolParams,
) -> KeyRateResult {
    let n_z = tallies.basis_detected(Basis::Z);
    let e_z = tallies.error_rate(Basis::Z).clamp(0.0, 1.0);
    key_length_from_terms(
        bounds.s_z0_l,
        bounds.s_z1_l,
        bounds.phi_z_u,
        f,
        n_z,
        e_z,
        &params.security,
        tallies.duration_s(),
    )
}

/// Secret-key length from its scalar ingredients:
/// `s0 + s1 (1 - h(phi)) - f n_Z h(E_Z) - epsilon cost`, floored at 0.
#[allow(clippy::too_many_arguments)]
pub fn key_length_from_terms(
    s_z0_l: f64,
    s_z1_l: f64,
    phi_z_u: f64,
    f: f64,
    n_z: f64,
    e_z: f64,
    security: &SecurityParams,
    duration_s: f64,
) -> KeyRateResult {
    key_length_with_leak(s_z0_l, s_z1_l, phi_z_u, f * n_z * entropy_unchecked(e_z), security, duration_s)
}

/// As [`key_length_from_terms`] with a measured error-correction leak in bits
/// in place of `f n_Z h(E_Z)`.
pub fn key_length_with_leak(
    s_z0_l: f64,
    s_z1_l: f64,
    phi_z_u: f64,
    leak_ec: f64,
    security: &SecurityParams,
    duration_s: f64,
) -> KeyRateResult {
    let terms = KeyTerms {
        vacuum: s_z0_l,
        single_photon: s_z1_l * (1.0 - entropy_unchecked(phi_z_u.clamp(0.0, 0.5))),
        error_correction: leak_ec,
        epsilon_cost: security.epsilon_cost(),
    };
    let total = terms.total();
    let secret_len = if total > 0.0 { total.floor() as u64 } else { 0 };
    let skr = if duration_s > 0.0 {
        secret_len as f64 / duration_s
    } else {
        0.0
    };
    KeyRateResult {
        secret_len,
        skr,
        terms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tally(n: [[u64; 2]; 2], m: [[u64; 2]; 2], t: f64) -> ObservedTallies {
        let cell = |b: usize, k: usize| CellTally {
            sent: 1u64 << 40,
            detected: n[b][k],
            errors: m[b][k],
        };
        ObservedTallies {
            z: [cell(0, 0), cell(0, 1)],
            x: [cell(1, 0), cell(1, 1)],
            duration_s: t,
        }
    }

    #[test]
    fn entropy_reference_points() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // mpmath, 50 digits
        assert_relative_eq!(
            binary_entropy(0.0061).unwrap(),
            0.053_651_091_419_838_34,
            max_relative = 1e-14
        );
    }

    #[test]
    fn entropy_rejects_out_of_range() {
        assert!(matches!(binary_entropy(-0.1), Err(FiniteKeyError::Domain(_))));
        assert!(matches!(binary_entropy(1.0001), Err(FiniteKeyError::Domain(_))));
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn entropy_symmetric_and_concave_on_grid() {
        let n = 2000;
        for i in 1..n {
            let p = i as f64 / n as f64;
            let h = binary_entropy(p).unwrap();
            assert!((h - binary_entropy(1.0 - p).unwrap()).abs() < 1e-12);
            if i > 1 && i < n - 1 {
                let step = 1.0 / n as f64;
                let mid = 0.5 * (binary_entropy(p - step).unwrap() + binary_entropy(p + step).unwrap());
                assert!(h >= mid - 1e-12, "concavity fails at {p}");
            }
        }
    }

    #[test]
    fn hoeffding_reference_points() {
        assert_eq!(hoeffding_delta(0.0, 0.3), 0.0);
        // mpmath: sqrt(1e8/2 * ln(19/1e-10))
        assert_relative_eq!(
            hoeffding_delta(1e8, 1e-10 / 19.0),
            36_034.906_624_762_4,
            max_relative = 1e-12
        );
    }

    proptest! {
        #[test]
        fn hoeffding_monotone_in_n(n in 0.0f64..1e12, extra in 1.0f64..1e6, eps in 1e-15f64..0.5) {
            prop_assert!(hoeffding_delta(n + extra, eps) > hoeffding_delta(n, eps));
        }

        #[test]
        fn tau_probabilities_sum_below_one(mu2 in 0.001f64..0.5, gap in 0.01f64..0.5, p in 0.05f64..0.95) {
            let params = ProtocolParams { mu1: mu2 + gap, mu2, p_mu1: p, ..Default::default() };
            let t0 = poisson_tau(0, &params);
            let t1 = poisson_tau(1, &params);
            prop_assert!(t0 > 0.0 && t0 < 1.0);
            prop_assert!(t1 > 0.0 && t1 < 1.0);
            prop_assert!(t0 + t1 <= 1.0);
        }
    }

    #[test]
    fn tau_reference_points() {
        let vac = ProtocolParams {
            mu1: 0.0,
            mu2: 0.0,
            p_mu1: 0.5,
            ..Default::default()
        };
        assert_eq!(poisson_tau(0, &vac), 1.0);
        let p = ProtocolParams {
            mu1: 0.5,
            mu2: 0.25,
            p_mu1: 0.7,
            ..Default::default()
        };
        // mpmath: 0.7 e^-0.5 + 0.3 e^-0.25
        assert_relative_eq!(poisson_tau(0, &p), 0.658_211_696_720_264_9, max_relative = 1e-14);
        assert_relative_eq!(poisson_tau(1, &p), 0.270_695_789_629_777_1, max_relative = 1e-14);
    }

    #[test]
    fn zero_detections_are_insufficient() {
        let t = tally([[0; 2]; 2], [[0; 2]; 2], 1.0);
        let err = estimate_decoy_bounds(&t, &ProtocolParams::default()).unwrap_err();
        assert!(matches!(err, FiniteKeyError::InsufficientStatistics(_)));
    }

    #[test]
    fn tiny_block_is_insufficient() {
        let t = tally([[30, 4], [3, 1]], [[1, 0], [0, 0]], 1.0);
        assert!(matches!(
            estimate_decoy_bounds(&t, &ProtocolParams::default()),
            Err(FiniteKeyError::InsufficientStatistics(_))
        ));
    }

    #[test]
    fn inverted_intensities_rejected() {
        let t = tally([[1000, 100], [100, 10]], [[1, 1], [1, 1]], 1.0);
        let params = ProtocolParams {
            mu1: 0.1,
            mu2: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            estimate_decoy_bounds(&t, &params),
            Err(FiniteKeyError::InvalidParams(_))
        ));
    }

    #[test]
    fn key_length_reference_example() {
        // mpmath evaluation of each term: 41,147,110.1857
        let r = key_length_from_terms(
            1000.0,
            5e7,
            0.01,
            1.06,
            1e8,
            0.005,
            &SecurityParams::default(),
            1.0,
        );
        assert_eq!(r.secret_len, 41_147_110);
        assert_eq!(r.skr, 41_147_110.0);
        assert_relative_eq!(r.terms.epsilon_cost, 275.632_172_197_213_7, max_relative = 1e-12);
    }

    #[test]
    fn half_error_rate_gives_no_key() {
        let r = key_length_from_terms(1e6, 5e7, 0.01, 1.0, 1e8, 0.5, &SecurityParams::default(), 1.0);
        assert_eq!(r.secret_len, 0);
        assert_eq!(r.skr, 0.0);
    }

    proptest! {
        #[test]
        fn key_length_non_increasing_in_errors(
            e1 in 0.0f64..0.5, de in 0.0f64..0.1,
            phi1 in 0.0f64..0.5, dphi in 0.0f64..0.1,
        ) {
            let s = SecurityParams::default();
            let base = key_length_from_terms(2e4, 5e7, phi1, 1.1, 1e8, e1, &s, 1.0).secret_len;
            let worse_e = key_length_from_terms(2e4, 5e7, phi1, 1.1, 1e8, (e1 + de).min(0.5), &s, 1.0).secret_len;
            let worse_phi = key_length_from_terms(2e4, 5e7, (phi1 + dphi).min(0.5), 1.1, 1e8, e1, &s, 1.0).secret_len;
            prop_assert!(worse_e <= base);
            prop_assert!(worse_phi <= base);
        }
    }

    #[test]
    fn params_validation() {
        assert!(ProtocolParams::default().validate().is_ok());
        let bad = [
            ProtocolParams { p_z: 0.5, ..Default::default() },
            ProtocolParams { mu2: 0.7, ..Default::default() },
            ProtocolParams { p_mu1: 1.0, ..Default::default() },
            ProtocolParams { n_z_target: 99_999, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
        assert!(SecurityParams::new(0.0, 1e-15).is_err());
        assert!(SecurityParams::new(1e-10, 1.0).is_err());
    }

    #[test]
    fn observed_tally_validation() {
        let mut t = tally([[10, 10], [10, 10]], [[1, 1], [1, 1]], 1.0);
        assert!(t.validate().is_ok());
        t.z[0].errors = 11;
        assert!(t.validate().is_err());
    }
}
