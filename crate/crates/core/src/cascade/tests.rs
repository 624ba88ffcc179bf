use super::*;
use crate::session::keybuf::{KeyBuffer, KeyRole};
use crate::session::wire::TcpLink;
use rand::{Rng, SeedableRng};

fn noisy_pair(n: usize, q: f64, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<u8> = (0..n).map(|_| rng.random::<u8>() & 1).collect();
    let b = a.iter().map(|&x| x ^ u8::from(rng.random::<f64>() < q)).collect();
    (a, b)
}

fn top_level_parities(cfg: &CascadeConfig, n: usize, q: f64) -> u64 {
    cfg.block_lengths(n, q)
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let nb = n.div_ceil(k) as u64;
            if i > 0 && nb > 1 {
                nb - 1
            } else {
                nb
            }
        })
        .sum()
}

#[test]
fn identical_frames_cost_only_top_level_parities() {
    let cfg = CascadeConfig::default();
    let (a, _) = noisy_pair(4096, 0.0, 1);
    let (out, o) = reconcile_frame(&a, &a, 0.01, &cfg).unwrap();
    assert_eq!(out, a);
    assert_eq!(o.errors, 0);
    assert!(o.crc_ok);
    assert_eq!(o.disclosed_parities, top_level_parities(&cfg, 4096, 0.01));
}

#[test]
fn every_single_error_position_is_corrected() {
    let cfg = CascadeConfig::default();
    let n = 1024;
    let q = 0.01;
    let k1 = cfg.block_lengths(n, q)[0];
    let bound = top_level_parities(&cfg, n, q) + (k1 as f64).log2().ceil() as u64;
    let (a, _) = noisy_pair(n, 0.0, 2);
    for pos in 0..n {
        let mut b = a.clone();
        b[pos] ^= 1;
        let (out, o) = reconcile_frame(&a, &b, q, &cfg).unwrap();
        assert_eq!(out, a, "position {pos}");
        assert_eq!(o.errors, 1);
        assert!(o.disclosed_parities <= bound, "position {pos}: {} > {bound}", o.disclosed_parities);
    }
}

#[test]
fn classic_schedule_doubles() {
    let cfg = CascadeConfig {
        schedule: BlockSchedule::Classic,
        passes: 4,
        ..Default::default()
    };
    assert_eq!(cfg.block_lengths(65_536, 0.0061), vec![120, 240, 480, 960]);
    assert!(cfg.block_lengths(100, 0.5)[0] >= 2);
}

#[test]
fn tuned_schedule_is_power_of_two_then_half_frame() {
    let cfg = CascadeConfig::default();
    let k = cfg.block_lengths(65_536, 0.0061);
    assert_eq!(k.len(), 16);
    assert_eq!(&k[..3], &[256, 1024, 32_768]);
}

#[test]
fn config_validation() {
    let bad = [
        CascadeConfig {
            passes: 1,
            ..Default::default()
        },
        CascadeConfig {
            frame_bits: 1,
            ..Default::default()
        },
        CascadeConfig {
            parallel_units: 0,
            ..Default::default()
        },
        CascadeConfig {
            schedule: BlockSchedule::Fixed(vec![0]),
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

#[test]
fn empty_key_reconciles_to_empty() {
    let (out, oc) = reconcile_local(&[], &[], Some(0.01), &CascadeConfig::default()).unwrap();
    assert!(out.is_empty() && oc.is_empty());
    assert!(matches!(
        reconcile_local(&[0], &[], None, &CascadeConfig::default()),
        Err(CascadeError::LengthMismatch(1, 0))
    ));
}

#[test]
fn deterministic_and_concatenates_per_frame_results() {
    let cfg = CascadeConfig {
        frame_bits: 8192,
        parallel_units: 3,
        ..Default::default()
    };
    let (a, b) = noisy_pair(8192 * 7 + 1000, 0.02, 3);
    let (out1, oc1) = reconcile_local(&a, &b, Some(0.02), &cfg).unwrap();
    let (out2, oc2) = reconcile_local(&a, &b, Some(0.02), &cfg).unwrap();
    assert_eq!(out1, out2);
    assert_eq!(oc1, oc2);
    assert_eq!(oc1.len(), 8);
    let mut off = 0;
    for o in &oc1 {
        assert!(o.crc_ok);
        assert_eq!(&out1[off..off + o.bits], &a[off..off + o.bits]);
        off += o.bits;
    }
}

#[test]
fn bootstrap_sample_sizes_blocks() {
    let cfg = CascadeConfig {
        frame_bits: 16_384,
        ..Default::default()
    };
    let (a, b) = noisy_pair(16_384 * 3, 0.01, 4);
    let (out, oc) = reconcile_local(&a, &b, None, &cfg).unwrap();
    assert_eq!(out, a);
    let sample = (16_384f64 * 0.01).round() as u64;
    // first frame pays for its sample on top of the parities
    assert!(oc[0].disclosed_parities > sample);
    assert_eq!(bootstrap_sample(16_384, 0.01, cfg.rng_seed).len() as u64, sample);
}

#[test]
fn aggregate_f_tracks_per_frame_mean() {
    let cfg = CascadeConfig::default();
    let (a, b) = noisy_pair(65_536 * 20, 0.01, 5);
    let (_, oc) = reconcile_local(&a, &b, Some(0.01), &cfg).unwrap();
    let r = ReconcileReport::from_outcomes(&oc, 0);
    assert!((r.f_efficiency / r.mean_frame_f - 1.0).abs() < 0.02);
    assert!(r.f_efficiency >= 1.0);
}

#[test]
fn efficiency_regression_across_qber() {
    let cfg = CascadeConfig::default();
    for (q, limit) in [(0.003, 1.15), (0.006, 1.10), (0.01, 1.08), (0.02, 1.07), (0.03, 1.06)] {
        let (a, b) = noisy_pair(65_536 * 200, q, 6);
        let (_, oc) = reconcile_local(&a, &b, Some(q), &cfg).unwrap();
        let r = ReconcileReport::from_outcomes(&oc, 0);
        assert!(r.mean_frame_f <= limit, "q={q}: mean f {} > {limit}", r.mean_frame_f);
    }
}

#[test]
fn link_transcript_matches_local_run_and_ledger() {
    let cfg = CascadeConfig {
        frame_bits: 4096,
        parallel_units: 4,
        ..Default::default()
    };
    let (a, b) = noisy_pair(4096 * 9 + 77, 0.03, 7);
    let (mut la, mut lb) = TcpLink::loopback_pair().unwrap();
    let ka = KeyBuffer::new(KeyRole::Sifted, a.clone());
    let kb = KeyBuffer::new(KeyRole::Sifted, b.clone());
    let c2 = cfg.clone();
    let alice = std::thread::spawn(move || {
        let k = reconcile_stream_alice(&mut la, ka, &c2).unwrap();
        (k, la.stats())
    });
    let BobReconciled {
        key: kb,
        report,
        outcomes,
        alice_bits,
    } = reconcile_stream_bob(&mut lb, kb, None, &cfg).unwrap();
    assert_eq!(alice_bits, a);
    let (ka, stats_a) = alice.join().unwrap();
    assert_eq!(ka.bits(), kb.bits());
    assert_eq!(ka.role(), KeyRole::Reconciled);
    assert_eq!(kb.leak_bits(), lb.stats().disclosed_bits);
    assert_eq!(ka.leak_bits(), stats_a.disclosed_bits);
    assert_eq!(report.leak_bits(), kb.leak_bits());
    let (_, local) = reconcile_local(&a, &b, None, &cfg).unwrap();
    assert_eq!(outcomes, local);
}

#[test]
fn failed_frames_are_revealed_and_dropped() {
    // one pass with huge blocks cannot fix an even number of errors
    let cfg = CascadeConfig {
        frame_bits: 1024,
        passes: 2,
        schedule: BlockSchedule::Fixed(vec![1024, 1024]),
        parallel_units: 2,
        ..Default::default()
    };
    let (a, mut b) = noisy_pair(2048, 0.0, 8);
    b[3] ^= 1;
    b[900] ^= 1;
    let (mut la, mut lb) = TcpLink::loopback_pair().unwrap();
    let ka = KeyBuffer::new(KeyRole::Sifted, a.clone());
    let c2 = cfg.clone();
    let alice = std::thread::spawn(move || reconcile_stream_alice(&mut la, ka, &c2).unwrap());
    let BobReconciled {
        key: kb,
        report,
        outcomes,
        alice_bits,
    } = reconcile_stream_bob(&mut lb, KeyBuffer::new(KeyRole::Sifted, b), Some(0.01), &cfg).unwrap();
    assert_eq!(alice_bits, a);
    let ka = alice.join().unwrap();
    assert_eq!(report.crc_failures, 1);
    assert!(!outcomes[0].crc_ok && outcomes[1].crc_ok);
    assert_eq!(outcomes[0].errors, 2);
    assert_eq!(kb.bits(), &a[1024..]);
    assert_eq!(ka.bits(), kb.bits());
    assert_eq!(report.verification_bits, 128 + 1024);
    assert_eq!(kb.leak_bits(), lb.stats().disclosed_bits);
    assert!(!kb.crc_ok());
}
