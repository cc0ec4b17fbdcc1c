// Serve a catalog over TCP with a timed refresh policy and run the
// protected program against it.

use std::collections::BTreeSet;
use std::error::Error;
use std::net::TcpListener;

use renewal::bench::experiments::{profile_program, run_plain};
use renewal::bench::{gen_crunch, protect, select_hot, CrunchParams, ProtectOptions};
use renewal::blockdb::BlockCatalog;
use renewal::client::{run_protected, Binder, ClientConfig, TcpTransport};
use renewal::server::{serve, Manager, Policy, PolicyConfig, Scope, ServerConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = std::env::temp_dir().join(format!("renewal-tcp-{}", std::process::id()));
    let img = gen_crunch(CrunchParams { rounds: 12, ..CrunchParams::default() })?;
    let hot: BTreeSet<u32> = select_hot(&profile_program(&img, b"")?, 0.5)?;
    let static_image = {
        let mut catalog = BlockCatalog::open(&dir)?;
        let p = protect(&img, &hot, &ProtectOptions::with_versions(6, 1), &mut catalog)?;
        catalog.save_manifest(&p.manifest)?;
        p.image
    };

    let config =
        ServerConfig::new(&dir, PolicyConfig::new(Policy::TimedRefresh { interval_ms: 25, scope: Scope::All }));
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let server = serve(Manager::open(&config)?, listener, 5)?;

    let cfg = ClientConfig::with_seed(3);
    let mut binder = Binder::connect(TcpTransport::connect(addr, cfg.request_timeout_ms)?, cfg)?;
    let report = run_protected(&static_image, &mut binder, b"", 2)?;
    server.shutdown();

    let (expected, _, _) = run_plain(&img, b"", 2)?;
    assert_eq!(report.output, expected);
    let s = &report.stats;
    println!(
        "{} blocks ({} bytes) fetched over {addr}, {} flushes handled, output identical to the unprotected run",
        s.blocks_transferred, s.bytes_transferred, s.flushes_handled
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
