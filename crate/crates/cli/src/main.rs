//! Command-line front end.
//!
//! Every long flag can also be set from a `key = value` file passed with
//! `--config`; flags and environment variables take precedence over it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use bunforge::clustering::ClusterState;
use bunforge::eval::{score_partition, write_eval_row, EVAL_CSV_HEADER};
use bunforge::graph::{Mode, Resolution};
use bunforge::ingest::{generate_synthetic, PatternMix, RpcConfig, WeekMapping};
use bunforge::market::{
    daily_vol, rolling_sweep, write_close_csv, write_yearly_stats_csv, yearly_stats, CandleClient, MarketError,
    PriceSeries,
};
use bunforge::metrics::GiniScope;
use bunforge::pipeline::{self, FigureKind, PipelineConfig, PipelineError, PlotError, SourceSpec, Stage, WeekRange};
use chrono::NaiveDate;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "bunforge", version, about = "Reconstruct and measure the user network of a UTXO chain")]
struct Cli {
    /// Root of the artifact store.
    #[arg(long, global = true, default_value = "data")]
    data_dir: PathBuf,
    /// Weeks to snapshot, e.g. `0..52`.
    #[arg(long, global = true, value_parser = clap::value_parser!(WeekRange))]
    weeks: Option<WeekRange>,
    /// `cumulative` or `weekly` snapshots.
    #[arg(long, global = true, default_value = "cumulative", value_parser = clap::value_parser!(Mode))]
    mode: Mode,
    /// File of `key = value` lines using the long flag names as keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fetch transactions into per-week raw files.
    Ingest(PipelineArgs),
    /// Ingest, then cluster addresses into users.
    Cluster(PipelineArgs),
    /// Everything up to the weekly user graphs.
    Graph(PipelineArgs),
    /// Everything up to the per-week metric files.
    Metrics(PipelineArgs),
    /// The whole pipeline, including the combined CSVs.
    Run(PipelineArgs),
    /// Daily volatility and the before/after event sweep from minute candles.
    Market(MarketArgs),
    /// Render a pipeline or market CSV as SVG.
    Plot(PlotArgs),
    /// Score the clustering heuristics against synthetic ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ResolutionArg {
    Final,
    AsOfWeek,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// JSON-lines transaction file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate a synthetic stream with this seed.
    #[arg(long)]
    synthetic_seed: Option<u64>,
    /// Length of the synthetic stream.
    #[arg(long, default_value_t = 100_000)]
    n_tx: u64,
    /// Input/output pattern shares, e.g. `1-1=0.25,1-2=0.51,1-3=0.12,other=0.12`.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long, env = "BUNFORGE_RPC_URL")]
    rpc_url: Option<String>,
    /// `user:password`.
    #[arg(long, env = "BUNFORGE_RPC_AUTH", hide_env_values = true)]
    rpc_auth: Option<String>,
    /// Last block height to fetch over RPC.
    #[arg(long)]
    to_height: Option<u64>,
    #[arg(long, default_value_t = 30)]
    rpc_timeout_secs: u64,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum, default_value = "final")]
    resolution: ResolutionArg,
    /// Height of the first block of week 0.
    #[arg(long, default_value_t = 0)]
    genesis_height: u64,
    #[arg(long, default_value_t = 1008)]
    blocks_per_week: u64,
    /// Leave users without edges out of the snapshots.
    #[arg(long, action = ArgAction::SetTrue)]
    drop_isolated: bool,
    /// Compute Gini coefficients over active nodes only.
    #[arg(long, action = ArgAction::SetTrue)]
    filtered: bool,
    /// Number of top users listed per centrality.
    #[arg(long, default_value_t = 10)]
    top_c: usize,
    /// Threads for graph and metric jobs; defaults to the core count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct MarketArgs {
    /// Minute candle CSV: `timestamp_ms,open,high,low,close,volume`.
    #[arg(long, conflicts_with = "fetch_from")]
    candles: Option<PathBuf>,
    /// Download candles starting on this date instead of reading a file.
    #[arg(long, requires = "fetch_to")]
    fetch_from: Option<NaiveDate>,
    /// Last day to download, inclusive.
    #[arg(long)]
    fetch_to: Option<NaiveDate>,
    #[arg(long, default_value = "https://api.binance.com")]
    exchange_url: String,
    #[arg(long, default_value = "BTC-USDT")]
    pair: String,
    /// Days on each side of a candidate event.
    #[arg(long, default_value_t = 7)]
    window: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Share of a day's minutes that must be present.
    #[arg(long, default_value_t = 0.9)]
    min_coverage: f64,
    /// Directory for the volatility, sweep and yearly CSVs.
    #[arg(long, default_value = "market")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, value_parser = clap::value_parser!(FigureKind))]
    kind: FigureKind,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Stream seeds to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100_000)]
    n_tx: u64,
    #[arg(long)]
    mix: Option<String>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn validation(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_VALIDATION, error: error.into() }
    }

    fn stage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_STAGE, error: error.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Failure::validation(e)
        } else {
            Failure::stage(e)
        }
    }
}

impl From<MarketError> for Failure {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::Http(_) | MarketError::Io(_) => Failure::stage(e),
            _ => Failure::validation(e),
        }
    }
}

impl From<PlotError> for Failure {
    fn from(e: PlotError) -> Self {
        match e {
            PlotError::SchemaMismatch(_) => Failure::validation(e),
            _ => Failure::stage(e),
        }
    }
}

/// Finds `--config` in the raw arguments before clap sees them.
fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn parse_config_file(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split_once('#').map_or(line, |(l, _)| l).trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(v);
        out.insert(k.trim().replace('_', "-"), v.to_string());
    }
    Ok(out)
}

/// Turns config entries into argument defaults, so anything given on the
/// command line or in the environment still wins.
fn apply_config(mut cmd: clap::Command, entries: &BTreeMap<String, String>) -> anyhow::Result<clap::Command> {
    let id_of = |c: &clap::Command, key: &str| {
        c.get_arguments().find(|a| a.get_long() == Some(key)).map(|a| a.get_id().to_string())
    };
    let sub_names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        let value: &'static str = Box::leak(value.clone().into_boxed_str());
        let mut known = false;
        if let Some(id) = id_of(&cmd, key) {
            cmd = cmd.mut_arg(id, |a| a.default_value(value));
            known = true;
        }
        for name in &sub_names {
            let sub = cmd.find_subcommand(name).expect("listed subcommand");
            if let Some(id) = id_of(sub, key) {
                cmd = cmd.mut_subcommand(name, |s| s.mut_arg(id, |a| a.default_value(value)));
                known = true;
            }
        }
        if !known {
            return Err(anyhow!("unknown config key {key:?}"));
        }
    }
    Ok(cmd)
}

fn parse_cli() -> Result<Cli, Failure> {
    let args: Vec<String> = std::env::args().collect();
    let mut cmd = Cli::command();
    if let Some(path) = config_path(&args) {
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::validation)?;
        let entries = parse_config_file(&text)
            .with_context(|| format!("in config {}", path.display()))
            .map_err(Failure::validation)?;
        cmd = apply_config(cmd, &entries).map_err(Failure::validation)?;
    }
    let matches = cmd.try_get_matches_from(&args).unwrap_or_else(|e| e.exit());
    Cli::from_arg_matches(&matches).map_err(|e| e.exit())
}

fn parse_mix(mix: Option<&str>) -> Result<PatternMix, Failure> {
    match mix {
        Some(m) => m.parse().map_err(Failure::validation),
        None => Ok(PatternMix::default()),
    }
}

fn source_spec(s: &SourceArgs, weeks: WeekMapping) -> Result<SourceSpec, Failure> {
    let chosen = [s.input.is_some(), s.synthetic_seed.is_some(), s.rpc_url.is_some()];
    match chosen.iter().filter(|&&c| c).count() {
        0 => return Err(Failure::validation(anyhow!("give one of --input, --synthetic-seed or --rpc-url"))),
        1 => {}
        _ => return Err(Failure::validation(anyhow!("--input, --synthetic-seed and --rpc-url are exclusive"))),
    }
    if let Some(path) = &s.input {
        return Ok(SourceSpec::File(path.clone()));
    }
    if let Some(seed) = s.synthetic_seed {
        return Ok(SourceSpec::Synthetic { seed, n_tx: s.n_tx, mix: parse_mix(s.mix.as_deref())? });
    }
    let mut config = RpcConfig::new(s.rpc_url.clone().expect("checked above"));
    config.auth = s.rpc_auth.clone();
    config.timeout = Duration::from_secs(s.rpc_timeout_secs);
    config.weeks = weeks;
    Ok(SourceSpec::Rpc { config, to_height: s.to_height })
}

fn run_pipeline(cli: &Cli, args: &PipelineArgs, until: Stage) -> Result<(), Failure> {
    let weeks = cli.weeks.ok_or_else(|| Failure::validation(anyhow!("--weeks is required")))?;
    let mapping = WeekMapping::new(args.genesis_height, args.blocks_per_week);
    let mut config = PipelineConfig::new(&cli.data_dir, source_spec(&args.source, mapping)?, weeks);
    config.mode = cli.mode;
    config.resolution = match args.resolution {
        ResolutionArg::Final => Resolution::Final,
        ResolutionArg::AsOfWeek => Resolution::AsOfWeek,
    };
    config.week_mapping = mapping;
    config.drop_isolated = args.drop_isolated;
    config.metrics.top_c = args.top_c;
    if args.filtered {
        config.metrics.gini_scope = GiniScope::Filtered;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    config.until = until;
    let report = pipeline::run(&config)?;
    let mut counts: BTreeMap<Stage, usize> = BTreeMap::new();
    for r in &report.executed {
        *counts.entry(r.stage).or_default() += 1;
    }
    if counts.is_empty() {
        println!("everything up to date in {}", cli.data_dir.display());
    } else {
        let parts: Vec<String> = counts.iter().map(|(s, n)| format!("{s} {n}")).collect();
        println!("executed {} in {}", parts.join(", "), cli.data_dir.display());
    }
    Ok(())
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::stage(anyhow::Error::new(e).context(format!("writing {}", path.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).map_err(io_failure(path))?);
    f(&mut w).and_then(|_| w.flush()).map_err(io_failure(path))
}

fn market(args: &MarketArgs) -> Result<(), Failure> {
    fs::create_dir_all(&args.out_dir).map_err(io_failure(&args.out_dir))?;
    let series = match (&args.candles, args.fetch_from, args.fetch_to) {
        (Some(path), _, _) => {
            let file = File::open(path)
                .with_context(|| format!("opening {}", path.display()))
                .map_err(Failure::validation)?;
            PriceSeries::from_candle_csv(BufReader::new(file), &args.pair)?
        }
        (None, Some(from), Some(to)) => {
            let ms = |d: NaiveDate| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp_millis();
            let client = CandleClient::new(&args.exchange_url, Duration::from_secs(30));
            // The previous day's last close anchors the first return.
            let start = ms(from) - 60_000;
            let end = ms(to) + 86_400_000 - 1;
            let series = client.fetch_minutes(&args.pair, start, end)?;
            let path = args.out_dir.join("candles.csv");
            write_file(&path, |w| write_close_csv(w, &series))?;
            series
        }
        _ => return Err(Failure::validation(anyhow!("give --candles or --fetch-from with --fetch-to"))),
    };
    let vols = daily_vol(&series, args.min_coverage)?;
    let flagged = vols.days.iter().filter(|d| d.flagged).count();
    write_file(&args.out_dir.join("vol1.csv"), |w| vols.write_csv(w))?;
    write_file(&args.out_dir.join("yearly.csv"), |w| write_yearly_stats_csv(w, &yearly_stats(&vols)))?;
    let sweep = rolling_sweep(&vols, args.window, args.alpha)?;
    write_file(&args.out_dir.join("sweep.csv"), |w| sweep.write_csv(w))?;
    let hits = sweep.rows.iter().filter(|r| r.h).count();
    println!(
        "{} days ({flagged} flagged), {} candidate events, {hits} significant at {}; output in {}",
        vols.days.len(),
        sweep.rows.len(),
        args.alpha,
        args.out_dir.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let mix = parse_mix(args.mix.as_deref())?;
    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_failure(p))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let write_err = |e: std::io::Error| Failure::stage(anyhow::Error::new(e).context("writing evaluation"));
    writeln!(out, "{EVAL_CSV_HEADER}").map_err(write_err)?;
    for &seed in &args.seeds {
        let mut src = generate_synthetic(seed, args.n_tx, mix.clone());
        let mut state = ClusterState::new();
        for r in src.by_ref() {
            state.apply_transaction(&r.map_err(Failure::stage)?);
        }
        let predicted: HashMap<String, u64> = state
            .snapshot_partition()
            .into_iter()
            .flat_map(|(u, members)| members.into_iter().map(move |a| (a, u.0 as u64)))
            .collect();
        let score = score_partition(&predicted, &src.truth()).map_err(Failure::stage)?;
        write_eval_row(&mut out, seed, &score).map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Ingest(a) => run_pipeline(cli, a, Stage::Ingest),
        Command::Cluster(a) => run_pipeline(cli, a, Stage::Cluster),
        Command::Graph(a) => run_pipeline(cli, a, Stage::Graph),
        Command::Metrics(a) => run_pipeline(cli, a, Stage::Metrics),
        Command::Run(a) => run_pipeline(cli, a, Stage::Aggregate),
        Command::Market(a) => market(a),
        Command::Plot(a) => Ok(pipeline::plot_file(&a.input, a.kind, &a.output)?),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = parse_cli().and_then(|cli| dispatch(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            log::debug!("exit code {}", f.code);
            ExitCode::from(f.code)
        }
    }
}
