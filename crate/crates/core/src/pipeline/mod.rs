//! Orchestration: ingest → cluster → graph → metrics, one week at a time,
//! over a flat-file store with checksummed, resumable artifacts.
//!
//! Layout under the data directory:
//!
//! ```text
//! raw/week-W.jsonl
//! clusters/week-W/{addresses.txt,merge_log.csv}
//! graphs/week-W/{edges.csv,degrees.csv}
//! metrics/week-W/{metrics.csv,components.csv,topc.csv}
//! metrics/{metrics.csv,components.csv,topc.csv}
//! manifest.json
//! ```
//!
//! Cluster checkpoints hold only what a week added: the addresses first seen
//! in it and its merges. Replaying weeks `0..=W` restores the state after W.

mod plot;
mod store;

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{read_merge_log_csv, write_merge_log_csv, ClusterState, UserId};
use crate::components::{component_stats, ComponentStats};
use crate::graph::{Mode, Resolution, UserGraphSnapshot, WeekLinks};
use crate::ingest::{
    read_jsonl, Cursor, FileSource, IngestError, PatternMix, RecordSource, RpcConfig, RpcSource, SyntheticConfig,
    SyntheticSource, TxRecord, WeekMapping,
};
use crate::metrics::{metric_row, MetricRow, MetricsConfig, TopEntry};

pub use plot::{plot, plot_file, FigureKind, PlotError};
pub use store::{sha256_hex, ArtifactEntry, RunManifest, MANIFEST_FILE};
use store::{digest_parts, Artifact, Store};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("{stage} stage failed for week {week}: {message}")]
    Stage { stage: Stage, week: u64, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    fn stage(stage: Stage, week: u64, err: impl fmt::Display) -> Self {
        PipelineError::Stage { stage, week, message: err.to_string() }
    }

    /// True for errors caused by the request rather than by a failing stage.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Cluster,
    Graph,
    Metrics,
    Aggregate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Graph => "graph",
            Stage::Metrics => "metrics",
            Stage::Aggregate => "aggregate",
        })
    }
}

/// Inclusive week range `start..=end`, written `A..B` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekRange {
    pub start: u64,
    pub end: u64,
}

impl WeekRange {
    pub fn new(start: u64, end: u64) -> Self {
        WeekRange { start, end }
    }

    pub fn contains(&self, week: u64) -> bool {
        (self.start..=self.end).contains(&week)
    }
}

impl fmt::Display for WeekRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for WeekRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<u64>().map_err(|_| format!("bad week number {x:?} in {s:?}"));
        let (a, b) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
            None => {
                let w = parse(s)?;
                (w, w)
            }
        };
        if a > b {
            return Err(format!("week range {s:?} is empty"));
        }
        Ok(WeekRange::new(a, b))
    }
}

#[derive(Debug, Clone)]
pub enum SourceSpec {
    File(PathBuf),
    Synthetic { seed: u64, n_tx: u64, mix: PatternMix },
    /// Blocks from the mapping's genesis onward; `to_height` caps the fetch.
    Rpc { config: RpcConfig, to_height: Option<u64> },
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub source: SourceSpec,
    /// Weeks that get graphs and metrics. Ingestion and clustering always
    /// cover every week from 0 to the end of the range.
    pub weeks: WeekRange,
    pub mode: Mode,
    pub resolution: Resolution,
    pub week_mapping: WeekMapping,
    pub metrics: MetricsConfig,
    /// Leave zero-degree users out of snapshots.
    pub drop_isolated: bool,
    /// Last stage to run.
    pub until: Stage,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(data_dir: impl Into<PathBuf>, source: SourceSpec, weeks: WeekRange) -> Self {
        PipelineConfig {
            data_dir: data_dir.into(),
            source,
            weeks,
            mode: Mode::default(),
            resolution: Resolution::default(),
            week_mapping: WeekMapping::default(),
            metrics: MetricsConfig::default(),
            drop_isolated: false,
            until: Stage::Aggregate,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.weeks.start > self.weeks.end {
            return bad(format!("week range {} is empty", self.weeks));
        }
        if self.week_mapping.blocks_per_week == 0 {
            return bad("blocks per week must be positive".into());
        }
        if self.workers == 0 {
            return bad("at least one worker is required".into());
        }
        let pr = &self.metrics.pagerank;
        if !(pr.damping > 0.0 && pr.damping < 1.0) {
            return bad(format!("damping must lie in (0, 1), got {}", pr.damping));
        }
        if pr.tol.is_nan() || pr.tol <= 0.0 || pr.max_iter == 0 {
            return bad("PageRank needs a positive tolerance and iteration cap".into());
        }
        let start = self.metrics.hits.initial;
        if self.metrics.hits.iterations == 0 || start.is_nan() || start <= 0.0 {
            return bad("HITS needs at least one iteration and a positive start value".into());
        }
        match &self.source {
            SourceSpec::File(p) if !p.is_file() => bad(format!("input file {} does not exist", p.display())),
            SourceSpec::Rpc { config, .. } if config.url.is_empty() => bad("RPC URL is empty".into()),
            _ => Ok(()),
        }
    }

    /// Identifies the record stream; every raw artifact derives from it.
    fn source_descriptor(&self) -> Result<String, PipelineError> {
        let m = &self.week_mapping;
        let body = match &self.source {
            SourceSpec::File(p) => {
                let bytes = fs::read(p).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
                format!("file sha256={}", sha256_hex(&bytes))
            }
            SourceSpec::Synthetic { seed, n_tx, mix } => {
                let mix: Vec<String> = mix.iter().map(|(p, v)| format!("{p}={v}")).collect();
                format!("synthetic seed={seed} n_tx={n_tx} mix={}", mix.join(","))
            }
            SourceSpec::Rpc { config, to_height } => {
                let cap = to_height.map_or("none".to_string(), |h| h.to_string());
                format!("rpc url={} cap={cap}", config.url)
            }
        };
        Ok(format!("{body} genesis={} blocks_per_week={}", m.genesis_height, m.blocks_per_week))
    }

    fn graph_descriptor(&self) -> String {
        format!("mode={:?} resolution={:?} drop_isolated={}", self.mode, self.resolution, self.drop_isolated)
    }

    fn metrics_descriptor(&self) -> String {
        format!("{:?}", self.metrics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StageRun {
    pub stage: Stage,
    pub week: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub manifest: RunManifest,
    /// Stages that did work, ordered by stage then week.
    pub executed: Vec<StageRun>,
}

fn raw_artifact(w: u64) -> Artifact {
    Artifact::file(format!("raw/week-{w}"), format!("raw/week-{w}.jsonl"))
}

fn cluster_artifact(w: u64) -> Artifact {
    Artifact::dir(format!("clusters/week-{w}"), format!("clusters/week-{w}"), &["addresses.txt", "merge_log.csv"])
}

fn graph_artifact(w: u64) -> Artifact {
    Artifact::dir(format!("graphs/week-{w}"), format!("graphs/week-{w}"), &["edges.csv", "degrees.csv"])
}

fn metrics_artifact(w: u64) -> Artifact {
    Artifact::dir(
        format!("metrics/week-{w}"),
        format!("metrics/week-{w}"),
        &["metrics.csv", "components.csv", "topc.csv"],
    )
}

fn summary_artifact() -> Artifact {
    Artifact::files(
        "metrics/summary",
        vec!["metrics/metrics.csv".into(), "metrics/components.csv".into(), "metrics/topc.csv".into()],
    )
}

/// Input digests of each stage, chained so that any upstream change
/// invalidates everything derived from it.
struct Inputs<'a> {
    config: &'a PipelineConfig,
    source: String,
}

impl Inputs<'_> {
    fn raw(&self, w: u64) -> String {
        digest_parts([TOOL_VERSION, "raw", &self.source, &w.to_string()])
    }

    fn cluster(&self, raw_sha: &str, prev_state: &str) -> String {
        digest_parts([TOOL_VERSION, "cluster", raw_sha, prev_state])
    }

    fn graph(&self, w: u64, state: &str, raw_shas: &[String]) -> String {
        let covered = match self.config.mode {
            Mode::Cumulative => &raw_shas[..=w as usize],
            Mode::Weekly => &raw_shas[w as usize..=w as usize],
        };
        let mut parts = vec![TOOL_VERSION.to_string(), "graph".into(), self.config.graph_descriptor(), state.into()];
        parts.extend(covered.iter().cloned());
        digest_parts(parts)
    }

    fn metrics(&self, graph_sha: &str) -> String {
        digest_parts([TOOL_VERSION, "metrics", graph_sha, &self.config.metrics_descriptor()])
    }

    fn summary(&self, metric_shas: &[String]) -> String {
        digest_parts([TOOL_VERSION, "summary"].into_iter().map(String::from).chain(metric_shas.iter().cloned()))
    }
}

/// Digest of the cluster state after a week, given the state before it.
fn chain_state(prev: &str, cluster_sha: &str) -> String {
    digest_parts([prev, cluster_sha])
}

fn config_hash(config: &PipelineConfig, source: &str) -> String {
    let m = &config.week_mapping;
    digest_parts([
        format!("source={source}"),
        format!("weeks={}", config.weeks),
        format!("genesis={} blocks_per_week={}", m.genesis_height, m.blocks_per_week),
        config.graph_descriptor(),
        config.metrics_descriptor(),
    ])
}

/// An exhausted stream positioned at `cursor`.
struct Exhausted(Cursor);

impl Iterator for Exhausted {
    type Item = Result<TxRecord, IngestError>;
    fn next(&mut self) -> Option<Self::Item> {
        None
    }
}

impl RecordSource for Exhausted {
    fn cursor(&self) -> Cursor {
        self.0
    }
}

fn open_source(config: &PipelineConfig, cursor: Option<Cursor>) -> Result<Box<dyn RecordSource>, IngestError> {
    let mapping = config.week_mapping;
    Ok(match &config.source {
        SourceSpec::File(path) => match cursor {
            Some(c) => Box::new(FileSource::open_at(path, mapping, c)?),
            None => Box::new(FileSource::open(path, mapping)?),
        },
        SourceSpec::Synthetic { seed, n_tx, mix } => {
            let mut sc = SyntheticConfig::new(*seed, *n_tx, mix.clone());
            sc.weeks = mapping;
            match cursor {
                Some(c) => Box::new(SyntheticSource::resume(sc, c)?),
                None => Box::new(SyntheticSource::new(sc)),
            }
        }
        SourceSpec::Rpc { config: rpc, to_height } => {
            let mut rpc = rpc.clone();
            rpc.weeks = mapping;
            let last_week_end = mapping.genesis_height + (config.weeks.end + 1) * mapping.blocks_per_week - 1;
            let to = to_height.map_or(last_week_end, |h| h.min(last_week_end));
            let start = cursor.unwrap_or(Cursor::Rpc { height: mapping.genesis_height, skip: 0 });
            match start {
                Cursor::Rpc { height, .. } if height > to => Box::new(Exhausted(start)),
                _ => Box::new(RpcSource::open_at(&rpc, start, to)?),
            }
        }
    })
}

/// Runs every stage up to `config.until` for the configured weeks, skipping
/// artifacts that are already current.
pub fn run(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let mut store = Store::open(&config.data_dir)?;
    let inputs = Inputs { config, source: config.source_descriptor()? };
    let mut executed = Vec::new();

    let raw_shas = ingest_stage(config, &inputs, &mut store, &mut executed)?;
    if config.until >= Stage::Cluster && !downstream_current(config, &inputs, &store, &raw_shas)? {
        let store = Mutex::new(store);
        build_stages(config, &inputs, &store, &raw_shas, &mut executed)?;
        store_finish(config, &inputs, store.into_inner().expect("store lock"), executed)
    } else {
        store_finish(config, &inputs, store, executed)
    }
}

fn store_finish(
    config: &PipelineConfig,
    inputs: &Inputs,
    mut store: Store,
    mut executed: Vec<StageRun>,
) -> Result<RunReport, PipelineError> {
    let m = store.manifest_mut();
    m.tool_version = TOOL_VERSION.to_string();
    m.config_hash = config_hash(config, &inputs.source);
    m.source = inputs.source.clone();
    m.weeks = Some(config.weeks);
    let path = store.root().join(MANIFEST_FILE);
    store.save().map_err(|source| PipelineError::Io { path, source })?;
    executed.sort();
    log::info!("{} stages executed, weeks {}", executed.len(), config.weeks);
    Ok(RunReport { manifest: store.manifest().clone(), executed })
}

/// Writes every missing raw week and returns the checksum of each week
/// `0..=end`.
fn ingest_stage(
    config: &PipelineConfig,
    inputs: &Inputs,
    store: &mut Store,
    executed: &mut Vec<StageRun>,
) -> Result<Vec<String>, PipelineError> {
    let end = config.weeks.end;
    let mut shas: Vec<Option<String>> = Vec::with_capacity(end as usize + 1);
    for w in 0..=end {
        shas.push(store.current(&raw_artifact(w), &inputs.raw(w))?);
    }
    let Some(first) = shas.iter().position(Option::is_none).map(|i| i as u64) else {
        return Ok(shas.into_iter().map(Option::unwrap).collect());
    };
    let last_missing = shas.iter().rposition(Option::is_none).expect("one is missing") as u64;

    let resume = if first == 0 { None } else { store.entry(&format!("raw/week-{}", first - 1)).and_then(|e| e.resume) };
    let mut src = open_source(config, resume).map_err(|e| PipelineError::stage(Stage::Ingest, first, e))?;

    let missing: Vec<bool> = shas.iter().map(Option::is_none).collect();
    let mut week = first;
    let mut buf: Vec<u8> = Vec::new();
    let mut commit_through = |upto: u64, week: &mut u64, buf: &mut Vec<u8>, at: Cursor| -> Result<(), PipelineError> {
        while *week <= upto.min(end) {
            if shas[*week as usize].is_none() {
                let sha = store
                    .commit(&raw_artifact(*week), &[std::mem::take(buf)], inputs.raw(*week), Some(at))
                    .map_err(|e| PipelineError::stage(Stage::Ingest, *week, e))?;
                shas[*week as usize] = Some(sha);
                executed.push(StageRun { stage: Stage::Ingest, week: *week });
            }
            buf.clear();
            *week += 1;
        }
        Ok(())
    };

    loop {
        let at = src.cursor();
        let Some(rec) = src.next() else {
            commit_through(end, &mut week, &mut buf, at)?;
            break;
        };
        let rec = rec.map_err(|e| PipelineError::stage(Stage::Ingest, week, e))?;
        if rec.week < week {
            // Only possible when reading from the start of the stream.
            continue;
        }
        if rec.week > week {
            commit_through(rec.week - 1, &mut week, &mut buf, at)?;
            if week > last_missing {
                break;
            }
        }
        if missing[week as usize] {
            buf.extend_from_slice(rec.to_json_line().as_bytes());
            buf.push(b'\n');
        }
    }
    Ok(shas.into_iter().map(|s| s.expect("every week committed")).collect())
}

/// True when every artifact after ingestion is current, judged by the
/// recorded checksums alone.
fn downstream_current(
    config: &PipelineConfig,
    inputs: &Inputs,
    store: &Store,
    raw_shas: &[String],
) -> Result<bool, PipelineError> {
    let mut state = String::new();
    let mut metric_shas = Vec::new();
    for w in 0..=config.weeks.end {
        let Some(c) = store.current(&cluster_artifact(w), &inputs.cluster(&raw_shas[w as usize], &state))? else {
            return Ok(false);
        };
        state = chain_state(&state, &c);
        if w < config.weeks.start || config.until < Stage::Graph {
            continue;
        }
        let Some(g) = store.current(&graph_artifact(w), &inputs.graph(w, &state, raw_shas))? else {
            return Ok(false);
        };
        if config.until >= Stage::Metrics {
            let Some(m) = store.current(&metrics_artifact(w), &inputs.metrics(&g))? else {
                return Ok(false);
            };
            metric_shas.push(m);
        }
    }
    if config.until >= Stage::Metrics {
        return Ok(store.current(&summary_artifact(), &inputs.summary(&metric_shas))?.is_some());
    }
    Ok(true)
}

/// Resolved users and edges of one week's links.
type Resolved = (Vec<UserId>, Vec<(UserId, UserId)>);

enum Users {
    /// Links of the covered weeks, resolved by one canonical map.
    Final { links: Vec<Arc<WeekLinks>>, canonical: Arc<Vec<u32>> },
    /// Each covered week already resolved by its own end-of-week state.
    AsOfWeek(Vec<Arc<Resolved>>),
}

struct Job {
    week: u64,
    graph_inputs: String,
    users: Users,
}

impl Job {
    fn snapshot(&self, drop_isolated: bool) -> UserGraphSnapshot {
        let g = match &self.users {
            Users::Final { links, canonical } => {
                UserGraphSnapshot::from_links(self.week, links.iter().map(|l| l.as_ref()), canonical)
            }
            Users::AsOfWeek(resolved) => {
                let mut nodes = Vec::new();
                let mut edges = Vec::new();
                for r in resolved {
                    nodes.extend_from_slice(&r.0);
                    edges.extend_from_slice(&r.1);
                }
                UserGraphSnapshot::from_user_edges(self.week, nodes, edges)
            }
        };
        if drop_isolated {
            g.without_isolated()
        } else {
            g
        }
    }
}

fn read_lines(path: &Path) -> io::Result<Vec<String>> {
    BufReader::new(fs::File::open(path)?).lines().collect()
}

/// Aggregate checksum (when metrics ran) and the stages a job executed.
type JobResult = Result<(Option<String>, Vec<StageRun>), PipelineError>;

/// Clusters weeks sequentially on this thread while worker threads build
/// snapshots and metrics for the weeks already clustered.
fn build_stages(
    config: &PipelineConfig,
    inputs: &Inputs,
    store: &Mutex<Store>,
    raw_shas: &[String],
    executed: &mut Vec<StageRun>,
) -> Result<(), PipelineError> {
    let root = config.data_dir.clone();
    let run_graphs = config.until >= Stage::Graph;
    let (job_tx, job_rx) = mpsc::sync_channel::<Job>(config.workers);
    let job_rx = Mutex::new(job_rx);
    let results: Mutex<Vec<(u64, JobResult)>> = Mutex::new(Vec::new());

    let cluster_result = std::thread::scope(|scope| {
        for _ in 0..config.workers {
            scope.spawn(|| loop {
                let job = match job_rx.lock().expect("job queue").recv() {
                    Ok(job) => job,
                    Err(_) => break,
                };
                let week = job.week;
                let out = run_job(config, inputs, store, job);
                results.lock().expect("results").push((week, out));
            });
        }

        let mut state = ClusterState::new();
        let mut state_digest = String::new();
        let mut links: Vec<Arc<WeekLinks>> = Vec::new();
        let mut resolved: Vec<Arc<Resolved>> = Vec::new();
        let mut cluster_runs = Vec::new();
        let outcome = (|| -> Result<(), PipelineError> {
            for w in 0..=config.weeks.end {
                let fail = |e: &dyn fmt::Display| PipelineError::stage(Stage::Cluster, w, e);
                let records = read_jsonl(root.join(format!("raw/week-{w}.jsonl")), config.week_mapping)
                    .map_err(|e| fail(&e))?;
                let art = cluster_artifact(w);
                let cluster_inputs = inputs.cluster(&raw_shas[w as usize], &state_digest);
                let current = store.lock().expect("store").current(&art, &cluster_inputs)?;
                let sha = match current {
                    Some(sha) => {
                        replay_week(&root, w, &mut state).map_err(|e| fail(&e))?;
                        sha
                    }
                    None => {
                        let (n_addr, n_merge) = (state.n_addresses(), state.merge_log().len());
                        for tx in &records {
                            state.apply_transaction(tx);
                        }
                        let mut addresses = Vec::new();
                        for a in state.addresses_from(n_addr) {
                            addresses.extend_from_slice(a.as_bytes());
                            addresses.push(b'\n');
                        }
                        let mut merges = Vec::new();
                        write_merge_log_csv(&mut merges, &state.merge_log()[n_merge..]).map_err(|e| fail(&e))?;
                        let sha = store
                            .lock()
                            .expect("store")
                            .commit(&art, &[addresses, merges], cluster_inputs, None)
                            .map_err(|e| fail(&e))?;
                        cluster_runs.push(StageRun { stage: Stage::Cluster, week: w });
                        sha
                    }
                };
                state_digest = chain_state(&state_digest, &sha);
                if !run_graphs {
                    continue;
                }

                let mut week_links = WeekLinks::new(w);
                for tx in &records {
                    week_links.push(tx, &state).map_err(|e| PipelineError::stage(Stage::Graph, w, e))?;
                }
                if config.resolution == Resolution::AsOfWeek {
                    resolved.push(Arc::new(week_links.resolve(&state.canonical_map())));
                } else {
                    links.push(Arc::new(week_links));
                }
                if w < config.weeks.start {
                    continue;
                }
                let graph_inputs = inputs.graph(w, &state_digest, raw_shas);
                let covered = match config.mode {
                    Mode::Cumulative => 0..=w as usize,
                    Mode::Weekly => w as usize..=w as usize,
                };
                let users = match config.resolution {
                    Resolution::AsOfWeek => Users::AsOfWeek(resolved[covered].to_vec()),
                    Resolution::Final => {
                        let graph_current = store.lock().expect("store").current(&graph_artifact(w), &graph_inputs)?;
                        let canonical =
                            if graph_current.is_some() { Arc::new(Vec::new()) } else { Arc::new(state.canonical_map()) };
                        Users::Final { links: links[covered].to_vec(), canonical }
                    }
                };
                if job_tx.send(Job { week: w, graph_inputs, users }).is_err() {
                    break;
                }
            }
            Ok(())
        })();
        drop(job_tx);
        outcome.map(|_| cluster_runs)
    });

    let cluster_runs = cluster_result?;
    executed.extend(cluster_runs);
    let mut results = results.into_inner().expect("results");
    results.sort_by_key(|(w, _)| *w);
    let mut metric_shas = Vec::new();
    for (_, r) in results {
        let (sha, runs) = r?;
        executed.extend(runs);
        metric_shas.extend(sha);
    }
    if config.until >= Stage::Metrics {
        let mut store = store.lock().expect("store");
        aggregate(config, inputs, &mut store, &metric_shas, executed)?;
    }
    Ok(())
}

/// Restores one week of cluster state from its checkpoint.
fn replay_week(root: &Path, w: u64, state: &mut ClusterState) -> Result<(), String> {
    let dir = root.join(format!("clusters/week-{w}"));
    let addresses = read_lines(&dir.join("addresses.txt")).map_err(|e| e.to_string())?;
    let merges = read_merge_log_csv(BufReader::new(fs::File::open(dir.join("merge_log.csv")).map_err(|e| e.to_string())?))
        .map_err(|e| e.to_string())?;
    for a in addresses {
        state.register(a);
    }
    let n = state.n_addresses() as u32;
    for m in &merges {
        if m.survivor.0 >= n || m.absorbed.0 >= n {
            return Err(format!("merge {}→{} names an unknown address", m.absorbed, m.survivor));
        }
        state.apply_merge(m);
    }
    Ok(())
}

/// Builds (or reloads) one week's snapshot and computes its metrics.
fn run_job(
    config: &PipelineConfig,
    inputs: &Inputs,
    store: &Mutex<Store>,
    job: Job,
) -> Result<(Option<String>, Vec<StageRun>), PipelineError> {
    let w = job.week;
    let root = &config.data_dir;
    let mut runs = Vec::new();
    let g_art = graph_artifact(w);
    let current = store.lock().expect("store").current(&g_art, &job.graph_inputs)?;
    let (graph_sha, snapshot) = match current {
        Some(sha) => (sha, None),
        None => {
            let g = job.snapshot(config.drop_isolated);
            let (mut edges, mut degrees) = (Vec::new(), Vec::new());
            g.write_edges_csv(&mut edges).and_then(|_| g.write_degrees_csv(&mut degrees))
                .map_err(|e| PipelineError::stage(Stage::Graph, w, e))?;
            let sha = store
                .lock()
                .expect("store")
                .commit(&g_art, &[edges, degrees], job.graph_inputs.clone(), None)
                .map_err(|e| PipelineError::stage(Stage::Graph, w, e))?;
            runs.push(StageRun { stage: Stage::Graph, week: w });
            (sha, Some(g))
        }
    };
    if config.until < Stage::Metrics {
        return Ok((None, runs));
    }
    let m_art = metrics_artifact(w);
    let m_inputs = inputs.metrics(&graph_sha);
    if let Some(sha) = store.lock().expect("store").current(&m_art, &m_inputs)? {
        return Ok((Some(sha), runs));
    }
    let fail = |e: &dyn fmt::Display| PipelineError::stage(Stage::Metrics, w, e);
    let g = match snapshot {
        Some(g) => g,
        None => {
            let dir = root.join(format!("graphs/week-{w}"));
            let open = |name: &str| fs::File::open(dir.join(name)).map(BufReader::new);
            UserGraphSnapshot::read_csv(open("edges.csv").map_err(|e| fail(&e))?, open("degrees.csv").map_err(|e| fail(&e))?)
                .map_err(|e| fail(&e))?
        }
    };
    let files = metric_files(&g, &config.metrics).map_err(|e| fail(&e))?;
    let sha = store.lock().expect("store").commit(&m_art, &files, m_inputs, None).map_err(|e| fail(&e))?;
    runs.push(StageRun { stage: Stage::Metrics, week: w });
    Ok((Some(sha), runs))
}

/// The three per-week metric CSVs, each with its header.
pub fn metric_files(g: &UserGraphSnapshot, config: &MetricsConfig) -> Result<[Vec<u8>; 3], String> {
    let (row, top) = metric_row(g, config).map_err(|e| e.to_string())?;
    let mut metrics = Vec::new();
    let mut components = Vec::new();
    let mut topc = Vec::new();
    let io = |e: io::Error| e.to_string();
    writeln!(metrics, "{}", MetricRow::CSV_HEADER).map_err(io)?;
    row.write_csv_row(&mut metrics).map_err(io)?;
    writeln!(components, "{}", ComponentStats::CSV_HEADER).map_err(io)?;
    if let Ok(stats) = component_stats(g) {
        stats.write_csv_row(&mut components).map_err(io)?;
    }
    writeln!(topc, "{}", TopEntry::CSV_HEADER).map_err(io)?;
    for t in &top {
        t.write_csv_row(&mut topc).map_err(io)?;
    }
    Ok([metrics, components, topc])
}

/// Concatenates the weekly metric files of the range into `metrics/`.
fn aggregate(
    config: &PipelineConfig,
    inputs: &Inputs,
    store: &mut Store,
    metric_shas: &[String],
    executed: &mut Vec<StageRun>,
) -> Result<(), PipelineError> {
    let art = summary_artifact();
    let summary_inputs = inputs.summary(metric_shas);
    if store.current(&art, &summary_inputs)?.is_some() {
        return Ok(());
    }
    let end = config.weeks.end;
    let fail = |e: io::Error| PipelineError::stage(Stage::Aggregate, end, e);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (i, name) in ["metrics.csv", "components.csv", "topc.csv"].iter().enumerate() {
        for w in config.weeks.start..=end {
            let lines = read_lines(&store.root().join(format!("metrics/week-{w}/{name}"))).map_err(fail)?;
            let skip = if w == config.weeks.start { 0 } else { 1 };
            for line in lines.iter().skip(skip) {
                out[i].extend_from_slice(line.as_bytes());
                out[i].push(b'\n');
            }
        }
    }
    store.commit(&art, &out, summary_inputs, None).map_err(fail)?;
    executed.push(StageRun { stage: Stage::Aggregate, week: end });
    Ok(())
}
