//! `spot` — static PE instrumentation and coverage-guided fuzzing.
//!
//! Exit codes: 0 success, 1 input error, 2 usage error, 3 runtime/backend
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spot_core::cfg::{self, EntryPoints};
use spot_core::fuzz::backend::{Backend, SandboxBackend, SpawnBackend};
use spot_core::fuzz::{fuzz_loop, Budget, CampaignConfig};
use spot_core::pe::PeImage;
use spot_core::rewrite::{instrument, InstrumentMode};
use spot_core::select::{self, FilterSpec, ThreadMode};

#[derive(Parser)]
#[command(name = "spot", version, about = "Static PE instrumentation and fuzzing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Recover basic blocks and jump tables, write the block-list JSON.
    Analyze(AnalyzeArgs),
    /// Rewrite a PE with coverage instrumentation.
    Instrument(InstrumentArgs),
    /// Run a coverage-guided campaign against an instrumented target.
    Fuzz(FuzzArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Target PE file.
    target: PathBuf,
    /// Extra function symbols, lines of "hex_rva name".
    #[arg(long)]
    symbols: Option<PathBuf>,
    /// Output block-list path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Jump,
    Inline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThreadsArg {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    All,
    Memory,
}

#[derive(Args)]
struct InstrumentArgs {
    /// Target PE file.
    target: PathBuf,
    /// Instrumented output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "jump")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "single")]
    threads: ThreadsArg,
    #[arg(long, value_enum, default_value = "all")]
    select: SelectArg,
    /// Keep only blocks inside this rva range (hex "lo-hi", repeatable).
    #[arg(long)]
    include: Vec<String>,
    /// Drop blocks inside this rva range (hex "lo-hi", repeatable).
    #[arg(long)]
    exclude: Vec<String>,
    /// Keep only blocks whose function name matches (regex, repeatable).
    #[arg(long = "match")]
    match_names: Vec<String>,
    /// Drop blocks whose function name matches (regex, repeatable).
    #[arg(long = "skip")]
    skip_names: Vec<String>,
    /// Also record linear per-block coverage.
    #[arg(long)]
    linear: bool,
    /// log2 of the edge-bitmap size (10..=20).
    #[arg(long, default_value_t = 16)]
    map_size: u32,
    /// Reuse a block list produced by `analyze` instead of re-analyzing.
    #[arg(long)]
    blocks: Option<PathBuf>,
    /// Extra function symbols, lines of "hex_rva name".
    #[arg(long)]
    symbols: Option<PathBuf>,
    /// Rewrite-report path (default: <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Spawn,
    Agent,
    Sandbox,
}

#[derive(Args)]
struct FuzzArgs {
    /// Instrumented target (PE for sandbox, program path for spawn).
    target: PathBuf,
    #[arg(long, value_enum)]
    backend: BackendArg,
    /// Seed-input directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Campaign output directory.
    #[arg(long)]
    out: PathBuf,
    /// Budget in executions (mutually exclusive with --secs).
    #[arg(long)]
    execs: Option<u64>,
    /// Budget in wall-clock seconds.
    #[arg(long)]
    secs: Option<u64>,
    /// Campaign rng seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sandbox fuel per exec.
    #[arg(long, default_value_t = 5000)]
    fuel: u64,
    /// Per-exec timeout in milliseconds (spawn and agent backends).
    #[arg(long, default_value_t = 1000)]
    timeout_ms: u64,
    /// Spawn backend: target arguments, "@@" expands to the input path.
    #[arg(long)]
    target_args: Vec<String>,
    /// Agent backend: unix socket to connect to.
    #[arg(long)]
    agent_socket: Option<PathBuf>,
    /// Spawn/agent backends: log2 of the shared coverage map.
    #[arg(long, default_value_t = 16)]
    map_size: u32,
}

enum CliError {
    /// Unreadable/unparsable inputs or unwritable outputs.
    Input(String),
    /// Flag combinations that can never work.
    Usage(String),
    /// The campaign backend died.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Instrument(a) => cmd_instrument(a),
        Cmd::Fuzz(a) => cmd_fuzz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn parse_image(path: &Path) -> Result<PeImage, CliError> {
    let bytes = read_input(path)?;
    PeImage::parse(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_symbols(path: &Option<PathBuf>) -> Result<EntryPoints, CliError> {
    let mut ep = EntryPoints::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        ep.add_symbol_lines(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    }
    Ok(ep)
}

/// Write via a temp file + rename so failures never leave partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp~");
    let fail = |e: std::io::Error| CliError::Input(format!("{}: {e}", path.display()));
    std::fs::write(&tmp, bytes).map_err(fail)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        fail(e)
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let img = parse_image(&args.target)?;
    let extra = load_symbols(&args.symbols)?;
    let list = cfg::analyze_image(&img, &extra)
        .map_err(|e| CliError::Input(format!("analysis failed: {e}")))?;
    write_atomic(&args.out, &cfg::block_list_to_json(&list))?;
    println!(
        "{}: {} blocks, {} jump tables -> {}",
        args.target.display(),
        list.blocks.len(),
        list.jump_tables.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_range(s: &str) -> Result<(u64, u64), CliError> {
    let err = || CliError::Usage(format!("bad range '{s}', expected hex lo-hi"));
    let (lo, hi) = s.split_once('-').ok_or_else(err)?;
    let parse = |v: &str| u64::from_str_radix(v.trim_start_matches("0x"), 16);
    let (lo, hi) = (parse(lo).map_err(|_| err())?, parse(hi).map_err(|_| err())?);
    if lo >= hi {
        return Err(CliError::Usage(format!("empty range '{s}'")));
    }
    Ok((lo, hi))
}

fn cmd_instrument(args: InstrumentArgs) -> Result<(), CliError> {
    if !(10..=20).contains(&args.map_size) {
        return Err(CliError::Usage(format!("--map-size {} outside 10..=20", args.map_size)));
    }
    let img = parse_image(&args.target)?;
    let extra = load_symbols(&args.symbols)?;

    let list = match &args.blocks {
        Some(path) => {
            let bytes = read_input(path)?;
            let list = cfg::block_list_from_json(&bytes)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            if list.arch_is64 != img.arch.is64() {
                return Err(CliError::Input("block list architecture mismatch".into()));
            }
            list
        }
        None => cfg::analyze_image(&img, &extra)
            .map_err(|e| CliError::Input(format!("analysis failed: {e}")))?,
    };

    let spec = FilterSpec {
        include_ranges: args.include.iter().map(|s| parse_range(s)).collect::<Result<_, _>>()?,
        exclude_ranges: args.exclude.iter().map(|s| parse_range(s)).collect::<Result<_, _>>()?,
        include_name_patterns: args.match_names.clone(),
        exclude_name_patterns: args.skip_names.clone(),
        memory_sensitive: matches!(args.select, SelectArg::Memory),
    };
    let mut list = select::apply_filters(&list, &spec)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if spec.memory_sensitive {
        let text = img
            .text_section()
            .ok_or_else(|| CliError::Input("no executable section".into()))?;
        let mode = if img.arch.is64() {
            spot_core::decode::Mode::Bits64
        } else {
            spot_core::decode::Mode::Bits32
        };
        let code_len = text.virtual_size.min(text.raw_size) as usize;
        let (insns, _) =
            spot_core::decode::sweep(&text.data[..code_len], text.virtual_address as u64, mode);
        let imports = img.imports();
        list = select::memory_sensitive_select(&list, &insns, &imports, select::MEMORY_ROUTINES);
    }

    let plan = select::build_plan(
        &list,
        match args.mode {
            ModeArg::Jump => InstrumentMode::Jump,
            ModeArg::Inline => InstrumentMode::Inline,
        },
        match args.threads {
            ThreadsArg::Single => ThreadMode::Single,
            ThreadsArg::Multi => ThreadMode::Multi,
        },
        args.linear,
        args.map_size,
    );
    let points = plan.points.len();
    let (out_img, report) =
        instrument(&img, &plan).map_err(|e| CliError::Input(format!("rewrite failed: {e}")))?;
    write_atomic(&args.out, &out_img.serialize())?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", args.out.display())));
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report).unwrap())?;
    println!(
        "{}: {} points planned, {} instrumented, {} skipped -> {}",
        args.target.display(),
        points,
        report.instrumented,
        report.skipped_too_small,
        args.out.display()
    );
    Ok(())
}

fn cmd_fuzz(args: FuzzArgs) -> Result<(), CliError> {
    let budget = match (args.execs, args.secs) {
        (Some(n), None) => Budget::Execs(n),
        (None, Some(s)) => Budget::Wall(Duration::from_secs(s)),
        _ => return Err(CliError::Usage("exactly one of --execs / --secs required".into())),
    };
    let mut seeds = Vec::new();
    let dir = std::fs::read_dir(&args.input)
        .map_err(|e| CliError::Usage(format!("seed dir {}: {e}", args.input.display())))?;
    let mut names: Vec<PathBuf> = dir
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    for p in names {
        seeds.push(read_input(&p)?);
    }
    if seeds.is_empty() {
        return Err(CliError::Usage(format!("no seeds in {}", args.input.display())));
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.out.display())))?;
    let cfg = CampaignConfig {
        rng_seed: args.seed,
        budget,
        out_dir: Some(args.out.clone()),
        ..Default::default()
    };

    let report = match args.backend {
        BackendArg::Sandbox => {
            let img = parse_image(&args.target)?;
            let mut be = SandboxBackend::new(&img, args.fuel)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            fuzz_loop(&seeds, &mut be, &cfg)
        }
        BackendArg::Spawn => {
            let mut be = SpawnBackend::new(
                args.target.display().to_string(),
                args.target_args.clone(),
                &args.out,
                args.map_size,
                Duration::from_millis(args.timeout_ms),
            );
            fuzz_loop(&seeds, &mut be, &cfg)
        }
        BackendArg::Agent => {
            #[cfg(unix)]
            {
                let socket = args.agent_socket.as_ref().ok_or_else(|| {
                    CliError::Usage("--backend agent requires --agent-socket".into())
                })?;
                let stream = std::os::unix::net::UnixStream::connect(socket)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", socket.display())))?;
                let mut be = spot_core::fuzz::backend::AgentBackend::connect(
                    stream,
                    Duration::from_millis(args.timeout_ms),
                    args.map_size,
                    Some(args.out.join("coverage.shm")),
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
                let report = fuzz_loop(&seeds, &mut be, &cfg);
                be.shutdown();
                report
            }
            #[cfg(not(unix))]
            {
                return Err(CliError::Runtime("agent backend needs unix sockets".into()));
            }
        }
    };

    println!(
        "execs {}  paths {}  unique crashes {}  buckets {}",
        report.execs,
        report.queue.len(),
        report.crashes.len(),
        report.coarse_buckets.len()
    );
    if let Some(err) = report.backend_error {
        return Err(CliError::Runtime(err));
    }
    Ok(())
}
