use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};

use renewal::vm::{NullHost, ProgramImage, Vm};

const BIN: &str = env!("CARGO_BIN_EXE_renew");

fn renew(args: &[&str]) -> std::process::Output {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(out.status.success(), "renew {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn protect_serve_and_run_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (image, stat, catalog) = (d.join("crunch.rvmi"), d.join("static.rvmi"), d.join("catalog"));

    renew(&[
        "bench",
        "gen",
        "--program",
        "crunch",
        "--rounds",
        "4",
        "--image",
        p(&image),
        "--out",
        p(&d.join("profile.csv")),
    ]);
    let profile = std::fs::read_to_string(d.join("profile.csv")).unwrap();
    assert!(profile.starts_with("fid,name,"), "{profile}");
    renew(&[
        "bench",
        "protect",
        "--image",
        p(&image),
        "--catalog",
        p(&catalog),
        "--static-image",
        p(&stat),
        "--fraction",
        "0.5",
        "--versions",
        "5",
        "--out",
        p(&d.join("blocks.csv")),
    ]);
    assert!(catalog.join("catalog.tsv").exists());
    assert!(catalog.join("manifest.json").exists());

    let port = TcpListener::bind(("127.0.0.1", 0)).unwrap().local_addr().unwrap().port();
    let config = d.join("server.json");
    let json = serde_json::json!({
        "catalog": catalog,
        "port": port,
        "policy": {"kind": "timed_refresh", "interval_ms": 20, "scope": "all"},
    });
    std::fs::write(&config, json.to_string()).unwrap();
    let mut child = Command::new(BIN).args(["server", "--config", p(&config)]).stdout(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    assert!(line.starts_with("listening on"), "{line}");

    std::fs::write(d.join("input.txt"), b"abc").unwrap();
    let out = renew(&[
        "client",
        "run",
        "--image",
        p(&stat),
        "--server",
        &format!("127.0.0.1:{port}"),
        "--seed",
        "9",
        "--input",
        p(&d.join("input.txt")),
        "--stats",
        p(&d.join("stats.csv")),
    ]);
    let original = ProgramImage::from_rvmi(&std::fs::read(&image).unwrap()).unwrap();
    let expected = Vm::load_image(&original, 1).unwrap().run(b"abc", &mut NullHost).unwrap().output;
    assert_eq!(out.stdout, expected);
    let stats = std::fs::read_to_string(d.join("stats.csv")).unwrap();
    assert!(stats.starts_with("wall_ms,vm_instructions,blocks_transferred,bytes_transferred,wait_ms,flushes_handled\n"));
}

#[test]
fn sweep_and_report_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let versions = dir.path().join("versions.csv");
    renew(&["bench", "sweep-versions", "--n", "2,5", "--seeds", "2", "--out", p(&versions)]);
    let csv = std::fs::read_to_string(&versions).unwrap();
    assert!(csv.starts_with("variants,seeds,mean_mobile_functions"), "{csv}");
    let out = renew(&["bench", "report", "--versions", p(&versions)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[ok]"), "{text}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(BIN).args(["bench", "gen", "--program", "nope", "--image", "/dev/null"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown program"));
}
