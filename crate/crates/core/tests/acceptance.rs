//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (outside the test harness's capture) before asserting.

use std::io::Write;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use qkdf::cascade::{reconcile_local, CascadeConfig, FrameOutcome};
use qkdf::channel::{
    dark_count_error_share, deadtime_efficiency, expected_tallies, sample_tallies_with_truth, sifted_z_per_pulse,
    ChannelDetectorModel,
};
use qkdf::finitekey::{estimate_decoy_bounds, secret_key_length, Basis, SecurityParams, Tallies};
use qkdf::optimizer::{optimize_params_with, OptimizerConfig};
use qkdf::pa::{exchange_seed_alice, exchange_seed_bob, pa_compress, PaConfig};
use qkdf::polar::{median_steps, monte_carlo, DriftModel, Scenario};
use qkdf::preset::builtin;
use qkdf::session::wire::TcpLink;
use qkdf::session::{run_loopback, SessionConfig};

fn verdict(index: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance [{index}/9] {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // write to the raw handle so the line shows even for passing tests
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got / want - 1.0).abs() <= rel
}

#[test]
fn rate_curve_reproduction() {
    let t = Instant::now();
    let cfg = OptimizerConfig::default();
    let mut pass = true;
    let mut detail = Vec::new();
    for (loss, measured) in [(2.2, 115.8e6), (9.5, 22.2e6), (19.6, 2.6e6)] {
        let model = ChannelDetectorModel::default().with_loss_db(loss);
        let skr = optimize_params_with(&model, 100_000_000, SecurityParams::default(), &cfg)
            .map(|r| r.skr)
            .unwrap_or(0.0);
        let ok = within(skr, measured, 0.25);
        pass &= ok;
        detail.push(format!("{loss} dB: {:.2} Mb/s ({:+.1}%)", skr / 1e6, (skr / measured - 1.0) * 100.0));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    let detail = format!("{}; {secs:.1} s", detail.join(", "));
    verdict(1, "rate curve", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn secret_fraction_at_10km() {
    let p = builtin("10km").unwrap();
    let t = expected_tallies(&p.model, &p.params).unwrap();
    let e_z = t.error_rate(Basis::Z);
    let b = estimate_decoy_bounds(&t, &p.params).unwrap();
    let k = secret_key_length(&t, &b, 1.053, &p.params);
    let per_1e8 = k.secret_len as f64 * 1e8 / t.basis_detected(Basis::Z);
    let pass = within(per_1e8, 37_516_126.0, 0.15) && (e_z - 0.0061).abs() < 0.0002;
    let detail = format!(
        "E_Z {:.3}%, {per_1e8:.0} bits per 1e8 sifted ({:+.1}%)",
        e_z * 100.0,
        (per_1e8 / 37_516_126.0 - 1.0) * 100.0
    );
    verdict(2, "secret fraction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn long_distance_feasibility() {
    let p = builtin("328km").unwrap();
    let t = expected_tallies(&p.model, &p.params).unwrap();
    let b = estimate_decoy_bounds(&t, &p.params).unwrap();
    let k = secret_key_length(&t, &b, p.runtime.f_ec, &p.params);
    let share = dark_count_error_share(&p.model, &p.params);
    let pass = (50.0..=2000.0).contains(&k.skr) && (share - 0.014).abs() <= 0.005;
    let detail = format!(
        "{:.1} dB, t = {:.0} s, SKR {:.0} b/s, E_Z {:.2}%, dark-count share {:.2} pp",
        p.model.loss_db(),
        t.duration_s(),
        k.skr,
        t.error_rate(Basis::Z) * 100.0,
        share * 100.0
    );
    verdict(3, "long-distance feasibility", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn deadtime_anchor() {
    let model = ChannelDetectorModel {
        eta0: 0.78,
        tau_dead_s: 0.7e-9,
        ..Default::default()
    };
    let eff = deadtime_efficiency(552e6, &model);
    let pass = (eff - 0.62).abs() <= 0.03;
    let detail = format!("{:.2}% at 552 Mphot/s", eff * 100.0);
    verdict(4, "dead-time anchor", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn decoy_bound_soundness() {
    const TRIALS: u64 = 10_000;
    let mut pass = true;
    let mut detail = Vec::new();
    for name in ["10km", "50km", "101km"] {
        let mut p = builtin(name).unwrap();
        p.params.n_z_target = 10_000_000;
        let duration = p.params.n_z_target as f64 / (sifted_z_per_pulse(&p.model, &p.params) * p.params.clock_hz);
        let (violations, infeasible) = (0..TRIALS)
            .into_par_iter()
            .map(|seed| {
                let (t, truth) = sample_tallies_with_truth(&p.model, &p.params, duration, seed);
                match estimate_decoy_bounds(&t, &p.params) {
                    Ok(b) => {
                        let bad = b.s_z0_l > truth.z_vacuum as f64
                            || b.s_z1_l > truth.z_single as f64
                            || b.phi_z_u < truth.z_single_phase_error_rate();
                        (u64::from(bad), 0)
                    }
                    Err(_) => (0, 1),
                }
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let ok = violations as f64 <= 1e-3 * TRIALS as f64;
        pass &= ok;
        detail.push(format!("{name}: {violations} violations, {infeasible} infeasible"));
    }
    let detail = format!("{TRIALS} trials each; {}", detail.join(", "));
    verdict(5, "decoy-bound soundness", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn cascade_on_iid_errors() {
    const FRAMES: usize = 200;
    const FRAME_BITS: usize = 65_536;
    let q = 0.0061;
    let mut rng = ChaCha20Rng::seed_from_u64(61);
    let n = FRAMES * FRAME_BITS;
    let alice: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    let bob: Vec<u8> = alice.iter().map(|&b| b ^ u8::from(rng.random_bool(q))).collect();
    let cfg = CascadeConfig {
        frame_bits: FRAME_BITS,
        ..Default::default()
    };
    let (out, outcomes) = reconcile_local(&alice, &bob, Some(q), &cfg).unwrap();

    // the output holds only the frames that passed verification
    let passed: Vec<u8> = outcomes
        .iter()
        .filter(|o| o.crc_ok)
        .flat_map(|o| {
            let s = o.frame_id as usize * FRAME_BITS;
            alice[s..s + o.bits].iter().copied()
        })
        .collect();
    let mismatched_frames = out
        .chunks(FRAME_BITS)
        .zip(passed.chunks(FRAME_BITS))
        .filter(|(a, b)| a != b)
        .count()
        + usize::from(out.len() != passed.len());
    let per_frame: Vec<f64> = outcomes.iter().filter_map(FrameOutcome::efficiency).collect();
    let mean_f = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let failures = outcomes.iter().filter(|o| !o.crc_ok).count();
    let fer = failures as f64 / FRAMES as f64;
    let pass = mismatched_frames == 0 && mean_f <= 1.10 && fer <= 0.005;
    let detail = format!("{mismatched_frames} post-CRC mismatches, mean f {mean_f:.4}, FER {:.2}%", fer * 100.0);
    verdict(6, "cascade", pass, &detail);
    assert!(pass, "{detail}");
}

/// NIST SP 800-22 frequency (monobit) test p-value.
fn monobit_p(bits: &[u8]) -> f64 {
    let s: i64 = bits.iter().map(|&b| if b == 1 { 1 } else { -1 }).sum();
    erfc(s.unsigned_abs() as f64 / (bits.len() as f64).sqrt() / 2f64.sqrt())
}

/// NIST SP 800-22 runs test p-value (0 when the frequency prerequisite fails).
fn runs_p(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    let pi = bits.iter().map(|&b| f64::from(b)).sum::<f64>() / n;
    if (pi - 0.5).abs() >= 2.0 / n.sqrt() {
        return 0.0;
    }
    let runs = 1 + bits.windows(2).filter(|w| w[0] != w[1]).count();
    let num = (runs as f64 - 2.0 * n * pi * (1.0 - pi)).abs();
    erfc(num / (2.0 * (2.0 * n).sqrt() * pi * (1.0 - pi)))
}

#[test]
fn privacy_amplification() {
    // both parties, seed agreed over the link
    const TRIALS: usize = 1000;
    let (mut la, mut lb) = TcpLink::loopback_pair().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let jobs: Vec<(Vec<u8>, usize)> = (0..TRIALS)
        .map(|_| {
            let n = rng.random_range(64..4000);
            let input: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            let out_len = rng.random_range(0..=n / 2);
            (input, out_len)
        })
        .collect();
    let seeds: Vec<[u8; 32]> = (0..TRIALS).map(|_| rng.random()).collect();
    let alice_jobs = jobs.clone();
    let alice = thread::spawn(move || {
        alice_jobs
            .iter()
            .map(|(input, out_len)| {
                let seed = exchange_seed_alice(&mut la, *out_len as u64, input.len() as u64).unwrap();
                let cfg = PaConfig::for_input_len(input.len(), 2, false).unwrap();
                pa_compress(input, *out_len, &seed, &cfg).unwrap()
            })
            .collect::<Vec<_>>()
    });
    let bob: Vec<Vec<u8>> = jobs
        .iter()
        .zip(&seeds)
        .map(|((input, out_len), seed)| {
            exchange_seed_bob(&mut lb, *seed, *out_len as u64, input.len() as u64).unwrap();
            let cfg = PaConfig::for_input_len(input.len(), 2, false).unwrap();
            pa_compress(input, *out_len, seed, &cfg).unwrap()
        })
        .collect();
    let alice = alice.join().unwrap();
    let disagreements = alice.iter().zip(&bob).filter(|(a, b)| a != b).count();

    // collision rate of the e = 13 family over sampled keys, worst input pair
    let cfg = PaConfig {
        prime_exponent: 13,
        ..Default::default()
    };
    let m = 6;
    let keys = 20_000u64;
    let mut pr = ChaCha20Rng::seed_from_u64(13);
    let mut pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..40)
        .map(|_| {
            let x: Vec<u8> = (0..26).map(|_| pr.random_range(0..2u8)).collect();
            let mut y = x.clone();
            let flips = pr.random_range(1..=26);
            for _ in 0..flips {
                let i = pr.random_range(0..26);
                y[i] ^= 1;
            }
            if y == x {
                y[0] ^= 1;
            }
            (x, y)
        })
        .collect();
    // structured pairs: single-bit and block-aligned differences
    let zero = vec![0u8; 26];
    for i in [0, 12, 13, 25] {
        let mut y = zero.clone();
        y[i] = 1;
        pairs.push((zero.clone(), y));
    }
    let worst = pairs
        .par_iter()
        .enumerate()
        .map(|(pi, (x, y))| {
            let mut kr = ChaCha20Rng::seed_from_u64(1000 + pi as u64);
            let hits = (0..keys)
                .filter(|_| {
                    let seed: [u8; 32] = kr.random();
                    pa_compress(x, m, &seed, &cfg).unwrap() == pa_compress(y, m, &seed, &cfg).unwrap()
                })
                .count();
            hits as f64 / keys as f64
        })
        .reduce(|| 0.0, f64::max);
    let bound = 2f64.powi(-(m as i32));

    // biased input, quarter compression
    let n = 1 << 20;
    let mut br = ChaCha20Rng::seed_from_u64(99);
    let input: Vec<u8> = (0..n).map(|_| u8::from(br.random_bool(0.3))).collect();
    let pcfg = PaConfig::for_input_len(n, 2, false).unwrap();
    let out = pa_compress(&input, n / 4, &br.random(), &pcfg).unwrap();
    let (p_mono, p_runs) = (monobit_p(&out), runs_p(&out));

    let pass = disagreements == 0 && worst <= 2.0 * bound && p_mono >= 0.01 && p_runs >= 0.01;
    let detail = format!(
        "{disagreements}/{TRIALS} party disagreements, worst collision rate {worst:.5} vs 2^-{m} = {bound:.5}, \
         monobit p {p_mono:.3}, runs p {p_runs:.3}"
    );
    verdict(7, "privacy amplification", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn loopback_session_at_10km() {
    let t = Instant::now();
    let p = builtin("10km").unwrap();
    let mut cfg = SessionConfig::new(p.model, p.params, 100_000_000);
    cfg.calibration_period = Some(p.runtime.calibration_period);
    let (a, b) = run_loopback(&cfg).unwrap();
    let same = a.key.bits() == b.key.bits() && !a.key.is_empty();
    let ledger_ok = [&a, &b]
        .iter()
        .all(|o| o.key.leak().total() == o.report.link.disclosed_bits && o.report.leak.total() == o.key.leak().total());
    let r = &b.report;
    let z = (r.qber_z - r.model_qber_z).abs() / r.qber_sigma;
    let secs = t.elapsed().as_secs_f64();
    let pass = same && ledger_ok && z < 5.0 && secs < 900.0;
    let detail = format!(
        "keys identical: {same} ({} bits), ledger == link counter: {ledger_ok} ({} bits), \
         QBER {:.4}% vs model {:.4}% ({z:.2} sigma), {secs:.0} s",
        b.key.len(),
        r.link.disclosed_bits,
        r.qber_z * 100.0,
        r.model_qber_z * 100.0
    );
    verdict(8, "loopback session", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn polarization_feedback() {
    let t = Instant::now();
    let sc = Scenario::from_preset(&builtin("10km").unwrap(), DriftModel::NONE);
    let steps = monte_carlo(&sc, 100).unwrap();
    let converged = steps.iter().filter(|s| s.is_some_and(|n| n <= 500)).count();

    let far = Scenario::from_preset(&builtin("328km").unwrap(), DriftModel::NONE);
    let weak = monte_carlo(&Scenario { strong_pulses: false, ..far.clone() }, 100).unwrap();
    let strong = monte_carlo(&Scenario { strong_pulses: true, ..far }, 100).unwrap();
    let rank = |m: Option<usize>| m.unwrap_or(usize::MAX);
    let (mw, ms) = (median_steps(&weak), median_steps(&strong));
    let secs = t.elapsed().as_secs_f64();
    let pass = converged >= 95 && rank(ms) < rank(mw) && secs < 300.0;
    let detail = format!(
        "{converged}/100 converged within 500 steps; 328 km median steps strong {ms:?} vs weak {mw:?}; {secs:.1} s"
    );
    verdict(9, "polarization feedback", pass, &detail);
    assert!(pass, "{detail}");
}
