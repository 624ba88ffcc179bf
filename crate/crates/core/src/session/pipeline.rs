//! End-to-end session: handshake, sifting, Cascade, tally exchange,
//! finite-key length and privacy amplification.

use std::io::{Read, Write};
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::keybuf::{pack_bits, KeyBuffer, KeyRole, LeakLedger};
use super::sift::{sift_alice, sift_bob, SiftState};
use super::sim::{derive_seed, AliceSource, ChannelSim, CALIBRATION_PERIOD};
use super::wire::{Link, LinkStats, Message, TcpLink};
use super::SessionError;
use crate::cascade::{reconcile_stream_alice, reconcile_stream_bob, CascadeConfig, ReconcileReport};
use crate::channel::{corrected_yields, ChannelDetectorModel};
use crate::expect_msg;
use crate::finitekey::{
    binary_entropy, estimate_decoy_bounds, key_length_with_leak, Basis, DecoyBounds, Intensity, KeyTerms,
    ObservedTallies, ProtocolParams, Tallies,
};
use crate::pa::{exchange_seed_alice, exchange_seed_bob, pa_compress_key, PaConfig};

pub const ABORT_PROTOCOL: u8 = 3;
pub const ABORT_CONFIG: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alice,
    Bob,
}

/// Seeds of the three random sources. Alice's source seed also drives Bob's
/// stand-in for the optical pulses he receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSeeds {
    pub alice: u64,
    pub channel: u64,
    pub bob: u64,
}

impl Default for SessionSeeds {
    fn default() -> Self {
        SessionSeeds {
            alice: 1,
            channel: 2,
            bob: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub model: ChannelDetectorModel,
    pub params: ProtocolParams,
    pub n_pulses: u64,
    /// Pulses per sifting round trip.
    pub batch_pulses: u64,
    /// One pulse in this many is reserved for polarization feedback.
    pub calibration_period: Option<u64>,
    pub cascade: CascadeConfig,
    pub pa_block_count: usize,
    pub allow_large_pa: bool,
    pub seeds: SessionSeeds,
}

impl SessionConfig {
    pub fn new(model: ChannelDetectorModel, params: ProtocolParams, n_pulses: u64) -> SessionConfig {
        SessionConfig {
            model,
            params,
            n_pulses,
            batch_pulses: 1 << 20,
            calibration_period: Some(CALIBRATION_PERIOD),
            cascade: CascadeConfig::default(),
            pa_block_count: 2,
            allow_large_pa: false,
            seeds: SessionSeeds::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::Config(m));
        if self.n_pulses == 0 {
            return bad("n_pulses must be positive".into());
        }
        if self.batch_pulses == 0 {
            return bad("batch_pulses must be positive".into());
        }
        if self.pa_block_count == 0 {
            return bad("pa_block_count must be positive".into());
        }
        self.model.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        self.params.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        self.cascade.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of everything both parties must agree on (seeds excluded).
    pub fn digest(&self) -> [u8; 32] {
        let public = SessionConfig {
            seeds: SessionSeeds {
                alice: 0,
                channel: 0,
                bob: 0,
            },
            ..self.clone()
        };
        let json = serde_json::to_vec(&public).expect("config serializes");
        Sha256::digest(&json).into()
    }

    /// Model E_Z for the configured channel, signal and decoy combined.
    pub fn model_qber_z(&self) -> f64 {
        let y = corrected_yields(&self.model, &self.params);
        let (mut qe, mut q) = (0.0, 0.0);
        for k in Intensity::ALL {
            let c = y[Basis::Z.index()][k.index()];
            qe += self.params.p_mu(k) * c.qe();
            q += self.params.p_mu(k) * c.q;
        }
        if q > 0.0 {
            qe / q
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub role: Role,
    pub pulses: u64,
    pub detections: u64,
    pub sifted_bits: u64,
    pub reconciled_bits: u64,
    pub tallies: ObservedTallies,
    pub qber_z: f64,
    pub qber_x: f64,
    pub model_qber_z: f64,
    /// Binomial standard deviation of `qber_z` around the model value.
    pub qber_sigma: f64,
    /// Only Bob, who drives reconciliation, has per-frame statistics.
    pub reconcile: Option<ReconcileReport>,
    /// Reconciliation leak over `n_Z h(E_Z)`.
    pub f_effective: f64,
    pub leak: LeakLedger,
    pub link: LinkStats,
    pub bounds: Option<DecoyBounds>,
    pub bounds_error: Option<String>,
    pub key_terms: Option<KeyTerms>,
    pub secret_len: u64,
    pub secret_fraction: f64,
    pub pa_exponent: Option<u32>,
    /// SHA-256 of the packed secret key, hex.
    pub key_sha256: String,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub key: KeyBuffer,
    pub report: SessionReport,
    /// First 16 bytes of SHA-256 over the privacy-amplification seed, stored
    /// in key file headers.
    pub seed_digest: [u8; 16],
}

fn handshake<R: Read, W: Write>(link: &mut Link<R, W>, cfg: &SessionConfig) -> Result<(), SessionError> {
    let mine = cfg.digest();
    link.send(&Message::ConfigDigest(mine))?;
    let theirs = expect_msg!(link, Message::ConfigDigest(d) => d, "config digest");
    if theirs != mine {
        let reason = "session configuration digests differ";
        link.abort(ABORT_CONFIG, reason);
        return Err(SessionError::ConfigMismatch(reason.into()));
    }
    Ok(())
}

struct KeyLength {
    bounds: Option<DecoyBounds>,
    bounds_error: Option<String>,
    terms: Option<KeyTerms>,
    out_len: usize,
    pa: PaConfig,
}

fn key_length(
    tallies: &ObservedTallies,
    leak_ec: u64,
    in_len: usize,
    cfg: &SessionConfig,
) -> Result<KeyLength, SessionError> {
    let pa = PaConfig::for_input_len(in_len, cfg.pa_block_count, cfg.allow_large_pa)
        .map_err(|e| SessionError::Config(e.to_string()))?;
    let (bounds, bounds_error) = match estimate_decoy_bounds(tallies, &cfg.params) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let r = bounds.map(|b| {
        key_length_with_leak(
            b.s_z0_l,
            b.s_z1_l,
            b.phi_z_u,
            leak_ec as f64,
            &cfg.params.security,
            tallies.duration_s,
        )
    });
    let secret = r.map_or(0, |r| r.secret_len) as usize;
    Ok(KeyLength {
        bounds,
        bounds_error,
        terms: r.map(|r| r.terms),
        out_len: secret.min(pa.max_output(in_len)),
        pa,
    })
}

fn seed_digest(seed: &[u8; 32]) -> [u8; 16] {
    Sha256::digest(seed)[..16].try_into().expect("16 bytes")
}

#[allow(clippy::too_many_arguments)]
fn report(
    role: Role,
    cfg: &SessionConfig,
    st: &SiftState,
    sifted_bits: usize,
    reconciled_bits: usize,
    tallies: ObservedTallies,
    reconcile: Option<ReconcileReport>,
    len: &KeyLength,
    key: &KeyBuffer,
    link: LinkStats,
) -> SessionReport {
    let n_z = tallies.n_z();
    let qber_z = tallies.error_rate(Basis::Z);
    let model = cfg.model_qber_z();
    let ec_bits = key.leak().reconciliation() as f64;
    let h = binary_entropy(qber_z.clamp(0.0, 1.0)).unwrap_or(0.0) * n_z as f64;
    SessionReport {
        role,
        pulses: cfg.n_pulses,
        detections: st.detections,
        sifted_bits: sifted_bits as u64,
        reconciled_bits: reconciled_bits as u64,
        qber_z,
        qber_x: tallies.error_rate(Basis::X),
        model_qber_z: model,
        qber_sigma: if n_z > 0 {
            (model * (1.0 - model) / n_z as f64).sqrt()
        } else {
            0.0
        },
        tallies,
        reconcile,
        f_effective: if h > 0.0 { ec_bits / h } else { 0.0 },
        leak: *key.leak(),
        link,
        bounds: len.bounds,
        bounds_error: len.bounds_error.clone(),
        key_terms: len.terms,
        secret_len: key.len() as u64,
        secret_fraction: if sifted_bits > 0 {
            key.len() as f64 / sifted_bits as f64
        } else {
            0.0
        },
        pa_exponent: (len.out_len > 0).then_some(len.pa.prime_exponent),
        key_sha256: hex::encode(Sha256::digest(pack_bits(key.bits()))),
    }
}

fn abort_on_error<R: Read, W: Write, T>(
    link: &mut Link<R, W>,
    r: Result<T, SessionError>,
) -> Result<T, SessionError> {
    if let Err(e) = &r {
        match e {
            SessionError::LinkClosed
            | SessionError::Aborted { .. }
            | SessionError::ConfigMismatch(_)
            | SessionError::IndexOutOfRange { .. } => {}
            SessionError::Config(m) => link.abort(ABORT_CONFIG, m),
            e => link.abort(ABORT_PROTOCOL, &e.to_string()),
        }
    }
    r
}

fn same_counts(a: &ObservedTallies, b: &ObservedTallies, with_errors: bool) -> bool {
    Basis::ALL.iter().all(|&bs| {
        Intensity::ALL.iter().all(|&k| {
            let (x, y) = (a.cell(bs, k), b.cell(bs, k));
            x.detected == y.detected && (!with_errors || x.errors == y.errors)
        })
    })
}

/// Alice's session over `link`.
pub fn run_alice<R: Read, W: Write>(link: &mut Link<R, W>, cfg: &SessionConfig) -> Result<SessionOutcome, SessionError> {
    let r = alice_inner(link, cfg);
    abort_on_error(link, r)
}

fn alice_inner<R: Read, W: Write>(link: &mut Link<R, W>, cfg: &SessionConfig) -> Result<SessionOutcome, SessionError> {
    cfg.validate()?;
    handshake(link, cfg)?;
    let mut src = AliceSource::new(&cfg.params, cfg.n_pulses, cfg.seeds.alice, cfg.calibration_period);
    let mut st = SiftState::default();
    while src.remaining() > 0 {
        let batch = src.next_batch(cfg.batch_pulses as usize);
        sift_alice(link, &batch, &mut st)?;
    }
    let sifted_bits = st.key.len();
    let key = reconcile_stream_alice(link, std::mem::take(&mut st.key), &cfg.cascade)?;

    let mut tallies = expect_msg!(link, Message::Tallies(t) => t, "tallies");
    if !same_counts(&tallies, &st.tallies, false) {
        return Err(SessionError::Protocol("peer detection counts differ from sifting".into()));
    }
    for b in Basis::ALL {
        for k in Intensity::ALL {
            tallies.cell_mut(b, k).sent = st.tallies.cell(b, k).sent;
        }
    }
    tallies.duration_s = cfg.n_pulses as f64 / cfg.params.clock_hz;
    link.send(&Message::Tallies(tallies.clone()))?;

    let len = key_length(&tallies, key.leak().reconciliation(), key.len(), cfg)?;
    let reconciled_bits = key.len();
    let (key, digest) = if len.out_len > 0 {
        let seed = exchange_seed_alice(link, len.out_len as u64, reconciled_bits as u64)?;
        (pa_compress_key(key, len.out_len, &seed, &len.pa)?, seed_digest(&seed))
    } else {
        let mut k = key;
        k.promote(KeyRole::Secret, Vec::new())?;
        (k, [0; 16])
    };
    link.flush()?;
    let report = report(Role::Alice, cfg, &st, sifted_bits, reconciled_bits, tallies, None, &len, &key, link.stats());
    Ok(SessionOutcome {
        key,
        report,
        seed_digest: digest,
    })
}

/// Bob's session over `link`. He simulates the optical channel from all
/// three seeds and drives reconciliation.
pub fn run_bob<R: Read, W: Write>(link: &mut Link<R, W>, cfg: &SessionConfig) -> Result<SessionOutcome, SessionError> {
    let r = bob_inner(link, cfg);
    abort_on_error(link, r)
}

fn bob_inner<R: Read, W: Write>(link: &mut Link<R, W>, cfg: &SessionConfig) -> Result<SessionOutcome, SessionError> {
    cfg.validate()?;
    handshake(link, cfg)?;
    let mut src = AliceSource::new(&cfg.params, cfg.n_pulses, cfg.seeds.alice, cfg.calibration_period);
    let mut sim = ChannelSim::new(&cfg.model, &cfg.params, cfg.seeds.channel, cfg.seeds.bob);
    let mut st = SiftState::default();
    while src.remaining() > 0 {
        let batch = src.next_batch(cfg.batch_pulses as usize);
        let det = sim.detect(&batch);
        sift_bob(link, batch[0].index, &det, &mut st)?;
    }
    let sifted = std::mem::take(&mut st.key);
    let sifted_bits = sifted.len();
    let before = sifted.bits().to_vec();
    let rec = reconcile_stream_bob(link, sifted, st.x_error_rate(), &cfg.cascade)?;

    let mut tallies = st.tallies.clone();
    for ((&b, &a), &k) in before.iter().zip(&rec.alice_bits).zip(&st.labels) {
        if a != b {
            tallies.z[k as usize].errors += 1;
        }
    }
    tallies.duration_s = cfg.n_pulses as f64 / cfg.params.clock_hz;
    link.send(&Message::Tallies(tallies.clone()))?;
    let full = expect_msg!(link, Message::Tallies(t) => t, "tallies");
    if !same_counts(&full, &tallies, true) {
        return Err(SessionError::Protocol("peer altered the tallies".into()));
    }
    let tallies = full;

    let key = rec.key;
    let len = key_length(&tallies, key.leak().reconciliation(), key.len(), cfg)?;
    let reconciled_bits = key.len();
    let (key, digest) = if len.out_len > 0 {
        let seed = derive_seed("pa-seed", cfg.seeds.bob);
        exchange_seed_bob(link, seed, len.out_len as u64, reconciled_bits as u64)?;
        (pa_compress_key(key, len.out_len, &seed, &len.pa)?, seed_digest(&seed))
    } else {
        let mut k = key;
        k.promote(KeyRole::Secret, Vec::new())?;
        (k, [0; 16])
    };
    link.flush()?;
    let report = report(
        Role::Bob,
        cfg,
        &st,
        sifted_bits,
        reconciled_bits,
        tallies,
        Some(rec.report),
        &len,
        &key,
        link.stats(),
    );
    Ok(SessionOutcome {
        key,
        report,
        seed_digest: digest,
    })
}

/// Runs both parties in one process over a localhost TCP link.
pub fn run_loopback(cfg: &SessionConfig) -> Result<(SessionOutcome, SessionOutcome), SessionError> {
    let (mut la, mut lb) = TcpLink::loopback_pair()?;
    thread::scope(|s| {
        let alice = s.spawn(move || run_alice(&mut la, cfg));
        let bob = run_bob(&mut lb, cfg);
        let alice = alice.join().expect("alice thread");
        Ok((alice?, bob?))
    })
}
