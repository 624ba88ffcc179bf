use std::fs;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;

use qkdf::finitekey::{estimate_decoy_bounds, secret_key_length, ObservedTallies};
use qkdf::preset::builtin;

fn qkdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdf")).args(args).output().expect("run qkdf")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Preset with a short, lossy-enough link that a few million pulses give a key.
fn small_preset(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "[model]\nfibre_km = 0.0\nextra_loss_db = 4.0\ne_mis = 0.01\n\n[params]\np_z = 0.6\nq_z = 0.6\np_mu1 = 0.5\n",
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn empty_sweep_gives_header_only() {
    let o = qkdf(&["rate", "--sweep", "5:0:1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "loss_db,skr_bps,p_z,mu1,mu2,p_mu1\n");
}

#[test]
fn rate_presets_near_measured_points_and_deterministic() {
    for (preset, measured) in [("10km", 115.8e6), ("50km", 22.2e6), ("101km", 2.6e6)] {
        let o = qkdf(&["rate", "--preset", preset]);
        assert!(o.status.success());
        let text = stdout(&o);
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        let skr: f64 = row[1].parse().unwrap();
        assert!((skr / measured - 1.0).abs() <= 0.25, "{preset}: {skr}");
        assert_eq!(stdout(&qkdf(&["rate", "--preset", preset])), text);
    }
}

#[test]
fn sampled_tallies_round_trip_through_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.json");
    let o = qkdf(&["sample", "--seed", "4", "--out", t.to_str().unwrap()]);
    assert!(o.status.success());
    let tallies: ObservedTallies = serde_json::from_str(&fs::read_to_string(&t).unwrap()).unwrap();

    let o = qkdf(&["bounds", t.to_str().unwrap(), "--f", "1.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["infeasible"], false);

    let p = builtin("10km").unwrap();
    let b = estimate_decoy_bounds(&tallies, &p.params).unwrap();
    let k = secret_key_length(&tallies, &b, 1.1, &p.params);
    assert_eq!(v["bounds"]["s_z1_l"].as_f64().unwrap(), b.s_z1_l);
    assert_eq!(v["bounds"]["phi_z_u"].as_f64().unwrap(), b.phi_z_u);
    assert_eq!(v["key"]["secret_len"].as_u64().unwrap(), k.secret_len);
}

#[test]
fn infeasible_tallies_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.json");
    fs::write(&t, serde_json::to_string(&ObservedTallies { duration_s: 1.0, ..Default::default() }).unwrap()).unwrap();
    let o = qkdf(&["bounds", t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["infeasible"], true);
    assert!(v["bounds"].is_null());
}

#[test]
fn config_errors_exit_4() {
    assert_eq!(qkdf(&["rate", "--preset", "nowhere"]).status.code(), Some(4));
    assert_eq!(qkdf(&["rate", "--sweep", "1:2"]).status.code(), Some(4));
    assert_eq!(qkdf(&["sample", "--duration-s", "-1"]).status.code(), Some(4));
    assert_eq!(qkdf(&["session", "alice"]).status.code(), Some(4));
    assert_eq!(qkdf(&["rate", "--loss-db", "-3"]).status.code(), Some(4));
    assert_eq!(qkdf(&["rate", "--bogus"]).status.code(), Some(4));
    assert_eq!(qkdf(&["--version"]).status.code(), Some(0));
}

#[test]
fn polar_trace_columns_and_determinism() {
    let args = ["polar", "--steps", "30", "--seed", "3", "--drift", "lab-slow"];
    let o = qkdf(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_s,e_z,e_x,v1,v2,v3"));
    assert_eq!(lines.count(), 30);
    assert_eq!(stdout(&qkdf(&args)), text);
}

#[test]
fn polar_trials_summary() {
    let o = qkdf(&["polar", "--trials", "10", "--strong"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["trials"], 10);
    assert_eq!(v["strong_pulses"], true);
    assert_eq!(v["steps"].as_array().unwrap().len(), 10);
}

#[test]
fn loopback_session_writes_identical_keys() {
    let dir = tempfile::tempdir().unwrap();
    let preset = small_preset(dir.path());
    let out = dir.path().join("run");
    let o = qkdf(&[
        "session",
        "loopback",
        "--preset",
        &preset,
        "--pulses",
        "8000000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read(out.join("alice.key")).unwrap();
    let b = fs::read(out.join("bob.key")).unwrap();
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["secret_len"].as_u64().unwrap() > 0);
    assert_eq!(report["leak"]["x_bits"].as_u64().unwrap()
        + report["leak"]["parity_bits"].as_u64().unwrap()
        + report["leak"]["verification_bits"].as_u64().unwrap(),
        report["link"]["disclosed_bits"].as_u64().unwrap());
}

#[test]
fn short_session_has_no_key() {
    let o = qkdf(&["session", "loopback", "--pulses", "100000"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn two_process_session_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let preset = small_preset(dir.path());
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let out = dir.path().to_str().unwrap().to_owned();
    let args = |role: &'static str, flag: &'static str| {
        vec![
            "session".to_owned(),
            role.into(),
            flag.into(),
            addr.clone(),
            "--preset".into(),
            preset.clone(),
            "--pulses".into(),
            "8000000".into(),
            "--out".into(),
            out.clone(),
        ]
    };
    let alice_args = args("alice", "--listen");
    let alice = thread::spawn(move || Command::new(env!("CARGO_BIN_EXE_qkdf")).args(alice_args).output().unwrap());
    let mut bob = None;
    for _ in 0..50 {
        thread::sleep(std::time::Duration::from_millis(100));
        let o = Command::new(env!("CARGO_BIN_EXE_qkdf")).args(args("bob", "--connect")).output().unwrap();
        if o.status.code() == Some(1) && String::from_utf8_lossy(&o.stderr).contains("refused") {
            continue;
        }
        bob = Some(o);
        break;
    }
    let bob = bob.expect("alice never listened");
    let alice = alice.join().unwrap();
    assert!(alice.status.success() && bob.status.success());
    assert_eq!(
        fs::read(dir.path().join("alice.key")).unwrap(),
        fs::read(dir.path().join("bob.key")).unwrap()
    );
}

#[test]
fn peer_with_another_wire_version_aborts_3() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let peer = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut head = [0u8; 10];
        s.read_exact(&mut head).unwrap();
        let mut frame = b"QKDP".to_vec();
        frame.extend([2u8, 0x04]);
        frame.extend(32u32.to_le_bytes());
        frame.extend([0u8; 32]);
        s.write_all(&frame).unwrap();
        let mut rest = Vec::new();
        s.read_to_end(&mut rest).ok();
    });
    let o = qkdf(&["session", "bob", "--connect", &addr, "--pulses", "1000"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
    peer.join().unwrap();
}

/// Full 10^8-bit block through the whole pipeline, including the full-size
/// PA field. Several minutes and close to 1 GB of memory.
#[test]
#[ignore]
fn full_block_secret_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdf(&[
        "session",
        "loopback",
        "--pulses",
        "903000000",
        "--allow-large-pa",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let fraction = r["secret_fraction"].as_f64().unwrap();
    assert!((fraction / 0.375 - 1.0).abs() <= 0.15, "{fraction}");
}
