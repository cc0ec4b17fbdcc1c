//! Acceptance checks 1-11. Prints one PASS/FAIL line per check and exits
//! non-zero if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 3 6`.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use renewal::bench::experiments::{
    hot_block_transfers, profile_program, refresh_sweep, run_plain, versions_sweep, wbc_renewal_bench,
    ExperimentConfig, WbcBenchConfig,
};
use renewal::bench::programs::wbcapp_template;
use renewal::bench::report::{refresh_trends, render_table, versions_trends, wbc_trends, TrendCheck};
use renewal::bench::{gen_crunch, gen_random, gen_wbcapp, select_hot, CrunchParams, RandomParams, WbcAppParams};
use renewal::engines::wbc::random_key;
use renewal::engines::{wbc_generate, wbc_reference_encrypt, SemanticTransform};
use renewal::extractor::compute_owned_sections;
use renewal::server::{Policy, PolicyConfig, Scope, ServerConfig, ViolationKind};
use renewal::vm::Prng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn trends(checks: &[TrendCheck]) -> (bool, String) {
    let failed: Vec<String> =
        checks.iter().filter(|c| !c.holds).map(|c| format!("{} ({})", c.check, c.detail)).collect();
    (
        failed.is_empty(),
        if failed.is_empty() { format!("{} trend checks hold", checks.len()) } else { failed.join("; ") },
    )
}

fn transparency() -> Outcome {
    let mut corpus = vec![
        ("crunch".to_string(), gen_crunch(CrunchParams::small(7)).expect("crunch"), 100),
        ("wbcapp".to_string(), gen_wbcapp(WbcAppParams::small(7)).expect("wbcapp"), 100),
    ];
    let params = RandomParams { entry_iterations: 10, ..RandomParams::default() };
    corpus.extend((0..50).map(|s| (format!("random{s}"), gen_random(1000 + s, params), 16)));
    let (mut trials, mut flushed, mut failures) = (0, 0, Vec::new());
    for (name, img, n) in &corpus {
        for t in 0..*n {
            trials += 1;
            match common::transparency_trial(img, (trials as u64) << 16 | t) {
                Ok(f) => flushed += (f > 0) as usize,
                Err(e) => failures.push(format!("{name}#{t}: {e}")),
            }
        }
    }
    let detail = format!("{} mismatches in {trials} trials ({flushed} with at least one flush)", failures.len());
    match failures.first() {
        None => outcome(trials == 1000, detail),
        Some(first) => outcome(false, format!("{detail}; first: {first}")),
    }
}

fn ownership() -> Outcome {
    let params = RandomParams { max_functions: 50, max_sections: 40, ..RandomParams::default() };
    let mut prng = Prng::new(0x0A11);
    let (mut agree, mut owned) = (0, 0);
    for seed in 0..200 {
        let img = gen_random(5000 + seed, params);
        let p = 0.1 + 0.8 * prng.below(1000) as f64 / 1000.0;
        let mobile = common::random_mobile(&img, &mut prng, p);
        let got = compute_owned_sections(&img, &mobile);
        owned += got.values().map(Vec::len).sum::<usize>();
        agree += (got == common::ownership_oracle(&img, &mobile)) as usize;
    }
    outcome(agree == 200, format!("{agree}/200 images agree ({owned} owned sections in total)"))
}

fn wbc_exhaustive() -> Outcome {
    let mut prng = Prng::new(0x3BC);
    let mut checked = 0u64;
    let mut bad = 0u64;
    for _ in 0..10 {
        let key = random_key(&mut prng);
        for encodings in [false, true] {
            let tables = wbc_generate(&key, prng.next_u64(), encodings);
            for pt in 0..=u16::MAX {
                checked += 1;
                bad += (tables.evaluate(pt) != wbc_reference_encrypt(&key, pt)) as u64;
            }
        }
    }
    outcome(bad == 0, format!("10 keys x 2 encodings x 65536 plaintexts: {checked} checked, {bad} differ"))
}

fn versions_trend() -> Outcome {
    let img = gen_crunch(CrunchParams::default()).expect("crunch");
    let rows = match versions_sweep(&img, SemanticTransform::ParamReorder, &[2, 5, 10, 20, 50, 100], 20, 1) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let means: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}", r.variants, r.mean_mobile_functions)).collect();
    let (pass, detail) = trends(&versions_trends(&rows));
    outcome(pass, format!("mean mobile functions {}; {detail}", means.join(" ")))
}

fn refresh_overhead() -> Outcome {
    let cfg = ExperimentConfig { refresh_ms: vec![Some(1000), None], ..ExperimentConfig::default() };
    let rows = match refresh_sweep(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    if let Ok(t) = render_table(&rows) {
        print!("{t}");
    }
    let (pass, detail) = trends(&refresh_trends(&rows));
    outcome(pass, detail)
}

fn transfer_counts() -> Outcome {
    let t = 30_000u64;
    let mut parts = Vec::new();
    let mut pass = true;
    for r in [1000u64, 2000, 3000, 5000] {
        let (lo, hi) = (t / r, t.div_ceil(r) + 1);
        match hot_block_transfers(t as u32, r, r) {
            Ok(n) => {
                pass &= (lo..=hi).contains(&n);
                parts.push(format!("r={}s: {n} in [{lo},{hi}]", r / 1000));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("r={}s: {e}", r / 1000));
            }
        }
    }
    outcome(pass, parts.join(", "))
}

fn flush_protocol() -> Outcome {
    let (interval, deadline) = (1500u64, 200u64);
    let (violations, flushes, virtual_ms) = common::flush_run(24, interval, deadline, true, 3);
    let timeouts: Vec<u64> = violations.iter().filter(|v| v.kind == ViolationKind::FlushTimeout).map(|v| v.t).collect();
    let single = flushes == 1
        && violations.len() == 1
        && timeouts.len() == 1
        && timeouts[0] >= interval + deadline
        && timeouts[0] <= interval + deadline + 500
        && virtual_ms > interval + deadline + 500;
    let (normal, normal_flushes, _) = common::flush_run(12, 15, deadline, false, 4);
    let pass = single && normal.is_empty() && normal_flushes >= 100;
    outcome(
        pass,
        format!(
            "suppressed: {} violation(s), flush_timeout at {:?} ms for a flush at {interval} ms with deadline {deadline} ms; \
             normal: {} violations over {normal_flushes} flushes",
            violations.len(),
            timeouts,
            normal.len()
        ),
    )
}

fn ra_detection() -> Outcome {
    let mut prng = Prng::new(0x8A);
    let mut detected = 0;
    let mut whole = true;
    for t in 0..64 {
        let (mismatch, len, m) = common::ra_trial(100 + t, Some(prng.next_u64() as usize));
        detected += mismatch as usize;
        whole &= m as usize == len;
    }
    let clean = (0..100).filter(|t| !common::ra_trial(300 + t, None).0).count();
    outcome(
        detected == 64 && clean == 100 && whole,
        format!("tampered: {detected}/64 ra_mismatch; untampered: {clean}/100 match; m = region length: {whole}"),
    )
}

fn stateless_restart() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let img = gen_crunch(CrunchParams { rounds: 40, ..CrunchParams::default() }).expect("crunch");
    let mobile: BTreeSet<u32> = select_hot(&profile_program(&img, b"").expect("profile"), 0.5).expect("hot");
    let catalog = dir.path().join("catalog");
    let image = common::prepare_catalog(&img, &mobile, 20, 9, &catalog);
    let policy = PolicyConfig::new(Policy::TimedRefresh { interval_ms: 50, scope: Scope::All });
    let mut prng = Prng::new(0x9);
    let (mut ok, mut restarted, mut max_retries, mut errors) = (0, 0, 0, Vec::new());
    for run in 0..20 {
        let input: Vec<u8> = (0..prng.index(8)).map(|_| b'a' + prng.below(26) as u8).collect();
        let (expected, _, _) = run_plain(&img, &input, 1).expect("plain");
        let cfg = ServerConfig {
            state_dir: Some(dir.path().join(format!("state{run}"))),
            tick_ms: 5,
            seed: run,
            ..ServerConfig::new(&catalog, policy.clone())
        };
        let kill_after = 50 + prng.below(200);
        let t = common::kill_restart_trial(&image, &expected, &cfg, &input, 100 + run, kill_after);
        max_retries = max_retries.max(t.retried_requests);
        restarted += (t.reconnects > 0) as usize;
        if t.error.is_none() && t.output_matches && t.retried_requests <= 1 {
            ok += 1;
        } else {
            errors.push(format!("run {run}: {t:?}"));
        }
    }
    let detail = format!(
        "{ok}/20 runs correct, {restarted}/20 reconnected after the restart, max retried requests {max_retries}{}",
        errors.first().map_or(String::new(), |e| format!("; {e}"))
    );
    outcome(ok == 20 && restarted == 20, detail)
}

fn dispersal() -> Outcome {
    let distinct = common::dispersal(600, 10_000, 10);
    outcome(distinct >= 590, format!("{distinct} distinct versions of 600 in 10000 draws"))
}

fn wbc_bench() -> Outcome {
    let rows = match wbc_renewal_bench(&WbcBenchConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    if let Ok(t) = render_table(&rows) {
        print!("{t}");
    }
    let template = wbcapp_template();
    // Fixed fields, section count, one header per table, evaluator code.
    let header = (31 + 2 + 8 * template.table_sids.len() + 8 * template.evaluator_code().len()) as u64;
    let exact = rows.iter().filter(|r| r.refresh_ms != "none").all(|r| r.bytes_per_transfer == 655_360 + header);
    let (pass, detail) = trends(&wbc_trends(&rows));
    let overheads: Vec<String> = rows
        .iter()
        .filter(|r| r.refresh_ms != "none")
        .map(|r| format!("{}:{:.1}%", r.refresh_ms, r.overhead_wall_pct))
        .collect();
    outcome(
        pass && exact,
        format!("wall overhead {}; payload 655360 + {header} exact: {exact}; {detail}", overheads.join(" ")),
    )
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let checks: [(&str, Duration, Check); 11] = [
        ("end-to-end transparency", Duration::from_secs(300), transparency),
        ("ownership oracle", Duration::from_secs(60), ownership),
        ("WBC exhaustive equivalence", Duration::from_secs(60), wbc_exhaustive),
        ("mobile functions vs variants", Duration::from_secs(600), versions_trend),
        ("refresh overhead trends", Duration::from_secs(1200), refresh_overhead),
        ("transfer-count arithmetic", Duration::from_secs(300), transfer_counts),
        ("flush protocol", Duration::from_secs(120), flush_protocol),
        ("RA detection", Duration::from_secs(120), ra_detection),
        ("stateless delivery across restarts", Duration::from_secs(300), stateless_restart),
        ("version dispersal", Duration::from_secs(60), dispersal),
        ("WBC renewal bench", Duration::from_secs(600), wbc_bench),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, budget, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let o = check();
        let took = started.elapsed();
        let pass = o.pass && took <= *budget;
        failed += !pass as usize;
        println!(
            "criterion {n:>2} {}: {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
