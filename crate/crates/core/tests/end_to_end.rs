mod common;

use std::collections::BTreeSet;

use renewal::bench::experiments::{profile_program, run_plain};
use renewal::bench::{gen_crunch, select_hot, CrunchParams};
use renewal::server::{Policy, PolicyConfig, ServerConfig, ViolationKind};

#[test]
fn missing_flush_ack_is_one_timeout() {
    let (violations, flushes, virtual_ms) = common::flush_run(24, 1500, 200, true, 3);
    assert!(virtual_ms > 1500 + 200 + 500 && virtual_ms < 3000, "run length {virtual_ms}");
    assert_eq!(flushes, 1);
    assert_eq!(violations.len(), 1, "{violations:?}");
    assert_eq!(violations[0].kind, ViolationKind::FlushTimeout);
    assert!(violations[0].t >= 1700 && violations[0].t <= 2200, "{}", violations[0].t);
}

#[test]
fn acknowledged_flushes_raise_no_violation() {
    let (violations, flushes, _) = common::flush_run(8, 20, 200, false, 4);
    assert!(flushes >= 20);
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn tampered_block_fails_attestation() {
    for seed in 1..=6 {
        let (mismatch, len, m) = common::ra_trial(seed, Some(seed as usize * 7));
        assert!(mismatch, "seed {seed}");
        assert_eq!(m as usize, len);
        assert!(!common::ra_trial(seed, None).0, "seed {seed} untampered");
    }
}

#[test]
fn random_live_spreads_over_versions() {
    assert!(common::dispersal(50, 1000, 9) >= 49);
}

#[test]
fn tcp_run_survives_a_server_restart() {
    let dir = tempfile::tempdir().unwrap();
    let img = gen_crunch(CrunchParams { rounds: 16, ..CrunchParams::default() }).unwrap();
    let mobile: BTreeSet<u32> = select_hot(&profile_program(&img, b"").unwrap(), 0.5).unwrap();
    let stat = common::prepare_catalog(&img, &mobile, 4, 5, &dir.path().join("catalog"));
    let (expected, _, _) = run_plain(&img, b"xy", 1).unwrap();
    let policy = PolicyConfig::new(Policy::TimedRefresh { interval_ms: 40, scope: renewal::server::Scope::All });
    for (i, kill) in [60u64, 120].into_iter().enumerate() {
        let cfg = ServerConfig {
            state_dir: Some(dir.path().join(format!("state{i}"))),
            tick_ms: 5,
            ..ServerConfig::new(dir.path().join("catalog"), policy.clone())
        };
        let t = common::kill_restart_trial(&stat, &expected, &cfg, b"xy", 11 + i as u64, kill);
        assert!(t.error.is_none(), "{t:?}");
        assert!(t.output_matches, "{t:?}");
        assert!(t.retried_requests <= 1, "{t:?}");
        assert!(t.reconnects >= 1, "server was not killed mid-run: {t:?}");
    }
}
