use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use renewal::bench::experiments::{
    profile_program, refresh_sweep, versions_sweep, wbc_renewal_bench, ExperimentConfig, WbcBenchConfig,
};
use renewal::bench::report::{
    read_csv, refresh_trends, render_table, versions_trends, wbc_trends, write_csv, TrendCheck,
};
use renewal::bench::{gen_crunch, gen_random, gen_spin, gen_wbcapp, protect, select_hot, BenchError, ProtectOptions};
use renewal::bench::{CrunchParams, RandomParams, WbcAppParams};
use renewal::blockdb::BlockCatalog;
use renewal::client::{run_protected, Binder, ClientConfig, TcpTransport};
use renewal::engines::{DiversificationKnobs, HashVariant, Recipe, SemanticTransform};
use renewal::server::{serve, Manager, ServerConfig};
use renewal::vm::ProgramImage;

#[derive(Parser)]
#[command(name = "renew", about = "Renewable code and data: server, client and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a block catalog over TCP.
    Server {
        #[arg(long)]
        config: PathBuf,
    },
    /// Client runtime.
    #[command(subcommand)]
    Client(ClientCommand),
    /// Program generation, protection and experiments.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum ClientCommand {
    /// Run a protected image against a server; program output goes to stdout.
    Run {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Input file; `-` reads stdin.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate a program image; --out receives its instruction profile.
    Gen(GenArgs),
    /// Make functions mobile and store renewed versions in a catalog; --out
    /// receives one row per block.
    Protect(ProtectArgs),
    /// Overhead across mobility fractions and refresh intervals.
    SweepRefresh(SweepRefreshArgs),
    /// Mobile functions needed by semantic variants.
    SweepVersions(SweepVersionsArgs),
    /// Renewable white-box tables under time-limited lifetimes.
    WbcBench(WbcBenchArgs),
    /// Print result tables and check their trends; --out receives the checks.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// crunch, wbcapp, spin or random.
    #[arg(long)]
    program: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    rounds: Option<u32>,
    /// Spin duration in virtual ms.
    #[arg(long, default_value_t = 30_000)]
    duration_ms: u32,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProtectArgs {
    #[arg(long)]
    image: PathBuf,
    /// Catalog directory; created if missing.
    #[arg(long)]
    catalog: PathBuf,
    /// Where to write the static image.
    #[arg(long)]
    static_image: PathBuf,
    /// Comma-separated function ids to make mobile.
    #[arg(long, value_delimiter = ',', conflicts_with = "fraction")]
    mobile: Vec<u32>,
    /// Pick hot functions covering this share of executed instructions.
    #[arg(long)]
    fraction: Option<f64>,
    /// syntactic, isr, guard, wbc or procedural.
    #[arg(long, default_value = "syntactic")]
    engine: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    versions: usize,
    #[arg(long, default_value_t = 1)]
    level: u32,
    #[arg(long)]
    no_data_mobility: bool,
    #[arg(long)]
    ttl_ms: Option<u64>,
    /// Engine knobs as key=value.
    #[arg(long = "knob")]
    knobs: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepRefreshArgs {
    #[arg(long, default_value = "crunch")]
    program: String,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1.0")]
    fractions: Vec<f64>,
    /// Comma-separated intervals in ms; `inf` never refreshes.
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,3000,5000,inf")]
    refresh: Vec<String>,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
    #[arg(long, default_value_t = 600)]
    versions: usize,
    #[arg(long, default_value_t = 0)]
    level: u32,
    #[arg(long, default_value_t = 100)]
    rounds: u32,
    #[arg(long, default_value_t = 8)]
    latency_ms: u64,
    #[arg(long, default_value_t = 1000)]
    bytes_per_ms: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepVersionsArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,20,50,100")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// param_reorder or field_reorder.
    #[arg(long, default_value = "param_reorder")]
    transform: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WbcBenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,3000,5000")]
    refresh: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
    #[arg(long, default_value_t = 1300)]
    rounds: u32,
    #[arg(long, default_value_t = 6)]
    versions: usize,
    #[arg(long, default_value_t = 4)]
    latency_ms: u64,
    #[arg(long, default_value_t = 5_000)]
    bytes_per_ms: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    refresh: Option<PathBuf>,
    #[arg(long)]
    versions: Option<PathBuf>,
    #[arg(long)]
    wbc: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProfileRow {
    fid: u32,
    name: String,
    calls: u64,
    instructions: u64,
    share: f64,
}

#[derive(Serialize)]
struct BlockRow {
    block_id: u32,
    engine: String,
    versions: usize,
    code_bytes: usize,
    owned_sections: String,
    payload_bytes: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn config_err(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}

fn load_image(path: &PathBuf) -> Result<ProgramImage, BenchError> {
    ProgramImage::from_rvmi(&fs::read(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<ExitCode, BenchError> {
    match cli.command {
        Command::Server { config } => run_server(config),
        Command::Client(ClientCommand::Run { image, server, seed, input, stats, timeout_ms }) => {
            let img = load_image(&image)?;
            let input = match input {
                None => Vec::new(),
                Some(p) if p.as_os_str() == "-" => {
                    let mut buf = Vec::new();
                    io::stdin().read_to_end(&mut buf)?;
                    buf
                }
                Some(p) => fs::read(p)?,
            };
            let cfg = ClientConfig {
                server: server.clone(),
                request_timeout_ms: timeout_ms,
                ..ClientConfig::with_seed(seed)
            };
            let transport =
                TcpTransport::connect(server.as_str(), timeout_ms).map_err(|e| config_err(e.to_string()))?;
            let mut binder = Binder::connect(transport, cfg)?;
            let report = run_protected(&img, &mut binder, &input, seed)?;
            io::stdout().write_all(&report.output)?;
            if let Some(path) = stats {
                report.write_stats_csv(fs::File::create(path)?)?;
            }
            Ok(ExitCode::from(report.exit_code.min(255) as u8))
        }
        Command::Bench(cmd) => {
            bench(cmd)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_server(config: PathBuf) -> Result<ExitCode, BenchError> {
    let cfg = ServerConfig::load(&config).map_err(config_err)?;
    let manager = Manager::open(&cfg).map_err(|e| config_err(e.to_string()))?;
    let listener = TcpListener::bind(("127.0.0.1", cfg.port))?;
    let handle = serve(manager, listener, cfg.tick_ms)?;
    println!("listening on {}", handle.addr());
    loop {
        thread::sleep(Duration::from_secs(3600));
    }
}

fn parse_knobs(raw: &[String]) -> Result<BTreeMap<String, String>, BenchError> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| config_err(format!("knob '{kv}' is not key=value")))
        })
        .collect()
}

fn knob<T: std::str::FromStr>(knobs: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, BenchError> {
    knobs.get(key).map(|v| v.parse().map_err(|_| config_err(format!("bad value for knob {key}: {v}")))).transpose()
}

fn bench(cmd: BenchCommand) -> Result<(), BenchError> {
    match cmd {
        BenchCommand::Gen(a) => {
            let img = match a.program.as_str() {
                "crunch" => gen_crunch(CrunchParams {
                    seed: a.seed,
                    rounds: a.rounds.unwrap_or(CrunchParams::default().rounds),
                    ..Default::default()
                })?,
                "wbcapp" => gen_wbcapp(WbcAppParams {
                    seed: a.seed,
                    rounds: a.rounds.unwrap_or(WbcAppParams::default().rounds),
                    ..Default::default()
                })?,
                "spin" => gen_spin(a.duration_ms, 200),
                "random" => gen_random(a.seed, RandomParams::default()),
                other => return Err(BenchError::UnknownProgram(other.into())),
            };
            fs::write(&a.image, img.to_rvmi())?;
            let profile = profile_program(&img, b"")?;
            let rows: Vec<ProfileRow> = profile
                .functions
                .iter()
                .map(|(fid, p)| ProfileRow {
                    fid: *fid,
                    name: img.function(*fid).map_or_else(String::new, |f| f.name.clone()),
                    calls: p.call_count,
                    instructions: p.instruction_count,
                    share: p.instruction_count as f64 / profile.total_instructions.max(1) as f64,
                })
                .collect();
            emit(&rows, a.out)
        }
        BenchCommand::Protect(a) => protect_cmd(a),
        BenchCommand::SweepRefresh(a) => {
            let refresh = a
                .refresh
                .iter()
                .map(|r| {
                    if r == "inf" {
                        Ok(None)
                    } else {
                        r.parse().map(Some).map_err(|_| config_err(format!("bad refresh {r}")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut cfg = ExperimentConfig {
                program: a.program,
                fractions: a.fractions,
                refresh_ms: refresh,
                repetitions: a.repetitions,
                versions: a.versions,
                level: a.level,
                seed: a.seed,
                ..Default::default()
            };
            cfg.crunch.rounds = a.rounds;
            cfg.link.latency_ms = a.latency_ms;
            cfg.link.bytes_per_ms = a.bytes_per_ms;
            let rows = refresh_sweep(&cfg)?;
            print!("{}", render_table(&rows)?);
            write_csv(&a.out, &rows)
        }
        BenchCommand::SweepVersions(a) => {
            let transform: SemanticTransform = a.transform.parse().map_err(config_err)?;
            let img = gen_crunch(CrunchParams::default())?;
            let rows = versions_sweep(&img, transform, &a.n, a.seeds, a.seed)?;
            print!("{}", render_table(&rows)?);
            write_csv(&a.out, &rows)
        }
        BenchCommand::WbcBench(a) => {
            let mut cfg = WbcBenchConfig {
                refresh_ms: a.refresh,
                repetitions: a.repetitions,
                versions: a.versions,
                seed: a.seed,
                ..Default::default()
            };
            cfg.params.rounds = a.rounds;
            cfg.link.latency_ms = a.latency_ms;
            cfg.link.bytes_per_ms = a.bytes_per_ms;
            let rows = wbc_renewal_bench(&cfg)?;
            print!("{}", render_table(&rows)?);
            write_csv(&a.out, &rows)
        }
        BenchCommand::Report(a) => {
            let mut checks: Vec<TrendCheck> = Vec::new();
            if let Some(p) = a.refresh {
                let rows = read_csv(p)?;
                println!("{}", render_table(&rows)?);
                checks.extend(refresh_trends(&rows));
            }
            if let Some(p) = a.versions {
                let rows = read_csv(p)?;
                println!("{}", render_table(&rows)?);
                checks.extend(versions_trends(&rows));
            }
            if let Some(p) = a.wbc {
                let rows = read_csv(p)?;
                println!("{}", render_table(&rows)?);
                checks.extend(wbc_trends(&rows));
            }
            for c in &checks {
                println!("[{}] {}: {} ({})", if c.holds { "ok" } else { "FAIL" }, c.table, c.check, c.detail);
            }
            match a.out {
                Some(p) => write_csv(p, &checks),
                None => Ok(()),
            }
        }
    }
}

fn emit<T: Serialize>(rows: &[T], out: Option<PathBuf>) -> Result<(), BenchError> {
    match out {
        Some(p) => write_csv(p, rows),
        None => renewal::bench::report::write_rows(io::stdout(), rows),
    }
}

fn protect_cmd(a: ProtectArgs) -> Result<(), BenchError> {
    let img = load_image(&a.image)?;
    let knobs = parse_knobs(&a.knobs)?;
    let mobile: BTreeSet<u32> = match a.fraction {
        Some(f) => select_hot(&profile_program(&img, b"")?, f)?,
        None if a.mobile.is_empty() => return Err(config_err("give --mobile or --fraction")),
        None => a.mobile.iter().copied().collect(),
    };
    let mut opts = ProtectOptions {
        versions: a.versions,
        levels: vec![knob(&knobs, "level")?.unwrap_or(a.level)],
        seed: a.seed,
        data_mobility: !a.no_data_mobility,
        ttl_ms: a.ttl_ms,
        ..Default::default()
    };
    let recipe = match a.engine.as_str() {
        "syntactic" => {
            let rates = ["opaque_pred_rate", "subst_rate", "junk_rate", "shuffle"];
            if rates.iter().any(|k| knobs.contains_key(*k)) {
                let d = DiversificationKnobs::at_level(opts.levels[0], 0);
                opts.knobs = Some(DiversificationKnobs {
                    opaque_pred_rate: knob(&knobs, "opaque_pred_rate")?.unwrap_or(d.opaque_pred_rate),
                    subst_rate: knob(&knobs, "subst_rate")?.unwrap_or(d.subst_rate),
                    junk_rate: knob(&knobs, "junk_rate")?.unwrap_or(d.junk_rate),
                    shuffle: knob(&knobs, "shuffle")?.unwrap_or(d.shuffle),
                    seed: 0,
                });
            }
            None
        }
        "isr" => Some(Recipe::Isr),
        "guard" => {
            let variant: HashVariant = knob::<String>(&knobs, "variant")?
                .map_or(Ok(HashVariant::FnvWalk), |v| v.parse().map_err(|_| config_err(format!("bad variant {v}"))))?;
            Some(Recipe::Guard { variant })
        }
        "wbc" => {
            let params = WbcAppParams { seed: knob(&knobs, "app_seed")?.unwrap_or(7), ..Default::default() };
            Some(Recipe::Wbc {
                template: renewal::bench::programs::wbcapp_template(),
                key: params.key(),
                encodings: knob(&knobs, "encodings")?.unwrap_or(true),
            })
        }
        "procedural" => {
            let sid = knob(&knobs, "section")?.ok_or_else(|| config_err("procedural needs --knob section=<sid>"))?;
            opts.procedural_sections.push(sid);
            None
        }
        other => return Err(config_err(format!("unknown engine '{other}'"))),
    };
    if let Some(r) = recipe {
        for f in &mobile {
            opts.recipes.insert(*f, r.clone());
        }
    }
    let mut catalog = BlockCatalog::open(&a.catalog)?;
    let p = protect(&img, &mobile, &opts, &mut catalog)?;
    catalog.save_manifest(&p.manifest)?;
    fs::write(&a.static_image, p.image.to_rvmi())?;
    for w in &p.warnings {
        eprintln!("warning: {w:?}");
    }
    let rows: Vec<BlockRow> = p
        .blocks
        .iter()
        .map(|b| BlockRow {
            block_id: b.block_id,
            engine: p.manifest.entries.get(&b.block_id).map_or("-", |e| e.recipe.hint().as_str()).to_string(),
            versions: catalog.versions(b.block_id).len(),
            code_bytes: b.code.len(),
            owned_sections: b.owned_sections.iter().map(|(s, _)| s.to_string()).collect::<Vec<_>>().join(" "),
            payload_bytes: b.packed_len(),
        })
        .collect();
    emit(&rows, a.out)
}
