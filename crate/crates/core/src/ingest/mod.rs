//! Transaction record ingestion.
//!
//! Three producers feed the rest of the toolkit with height-ordered
//! [`TxRecord`]s: JSONL files, a seeded synthetic generator with a known
//! address-to-entity ground truth, and a Bitcoin Core JSON-RPC endpoint.
//! Every producer exposes a [`Cursor`]; reopening at a cursor replays the
//! identical suffix of the stream.

mod record;
pub mod rpc;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use record::{parse_record, Amount, RecordFault, TxIo, TxRecord, WeekMapping};
pub use rpc::{fetch_blocks, FetchStats, RpcConfig, RpcSource};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticSource};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: negative value in {field}")]
    NegativeValue { line: usize, field: String },
    #[error("line {line}: transaction has no outputs")]
    EmptyOutputs { line: usize },
    #[error("line {line}: {message}")]
    WeekMismatch { line: usize, message: String },
    #[error("line {line}: invalid {field}: {message}")]
    Invalid { line: usize, field: String, message: String },
    #[error("line {line}: height {height} is lower than the preceding record's {previous}")]
    OutOfOrder { line: usize, height: u64, previous: u64 },
    #[error("invalid pattern mix: {0}")]
    InvalidMix(String),
    #[error("invalid block range {from}..={to}")]
    InvalidRange { from: u64, to: u64 },
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("unknown block height {0}")]
    UnknownHeight(u64),
    #[error("rpc error: {0}")]
    Rpc(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// The (#inputs, #outputs) shape of a transaction, binned the way weekly
/// pattern histograms report it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pattern {
    OneOne,
    OneTwo,
    OneThree,
    Other,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::OneOne, Pattern::OneTwo, Pattern::OneThree, Pattern::Other];

    pub fn of(n_inputs: usize, n_outputs: usize) -> Pattern {
        match (n_inputs, n_outputs) {
            (1, 1) => Pattern::OneOne,
            (1, 2) => Pattern::OneTwo,
            (1, 3) => Pattern::OneThree,
            _ => Pattern::Other,
        }
    }

    pub fn of_tx(tx: &TxRecord) -> Pattern {
        Pattern::of(tx.inputs.len(), tx.outputs.len())
    }

    pub fn label(self) -> &'static str {
        match self {
            Pattern::OneOne => "1-1",
            Pattern::OneTwo => "1-2",
            Pattern::OneThree => "1-3",
            Pattern::Other => "other",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Pattern {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.label() == s.trim())
            .ok_or_else(|| IngestError::InvalidMix(format!("unknown pattern {s:?}")))
    }
}

/// Target probabilities for each [`Pattern`]; must sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMix(BTreeMap<Pattern, f64>);

impl PatternMix {
    pub fn new(entries: impl IntoIterator<Item = (Pattern, f64)>) -> Result<Self, IngestError> {
        let mut map = BTreeMap::new();
        for (pattern, p) in entries {
            if !p.is_finite() || p < 0.0 {
                return Err(IngestError::InvalidMix(format!("{pattern} has probability {p}")));
            }
            *map.entry(pattern).or_insert(0.0) += p;
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(IngestError::InvalidMix(format!("probabilities sum to {total}, not 1")));
        }
        Ok(PatternMix(map))
    }

    pub fn probability(&self, pattern: Pattern) -> f64 {
        self.0.get(&pattern).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Pattern, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}

impl Default for PatternMix {
    /// Roughly the weekly shape of mainnet activity: 1-2 dominates.
    fn default() -> Self {
        PatternMix::new([
            (Pattern::OneOne, 0.25),
            (Pattern::OneTwo, 0.51),
            (Pattern::OneThree, 0.12),
            (Pattern::Other, 0.12),
        ])
        .expect("default mix is valid")
    }
}

impl FromStr for PatternMix {
    type Err = IngestError;

    /// Parses `1-1=0.25,1-2=0.51,1-3=0.12,other=0.12`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let entries = s
            .split(',')
            .filter(|part| !part.trim().is_empty())
            .map(|part| {
                let (k, v) = part
                    .split_once(['=', ':'])
                    .ok_or_else(|| IngestError::InvalidMix(format!("expected pattern=probability, got {part:?}")))?;
                let p = v
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| IngestError::InvalidMix(format!("bad probability {v:?}")))?;
                Ok((k.parse()?, p))
            })
            .collect::<Result<Vec<_>, IngestError>>()?;
        PatternMix::new(entries)
    }
}

/// Resumable position within a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cursor {
    /// Byte offset of the next unread line, and how many lines precede it.
    File { offset: u64, line: usize },
    /// Number of records already emitted by the generator.
    Synthetic { emitted: u64 },
    /// Block height to (re)fetch and how many of its records were already delivered.
    Rpc { height: u64, skip: usize },
}

/// A producer of height-ordered records.
pub trait RecordSource: Iterator<Item = Result<TxRecord, IngestError>> {
    fn cursor(&self) -> Cursor;
}

/// Reads a JSONL transaction file.
pub struct FileSource {
    path: PathBuf,
    reader: BufReader<File>,
    weeks: WeekMapping,
    offset: u64,
    line: usize,
    last_height: Option<u64>,
    buf: String,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>, weeks: WeekMapping) -> Result<Self, IngestError> {
        Self::open_at(path, weeks, Cursor::File { offset: 0, line: 0 })
    }

    pub fn open_at(path: impl AsRef<Path>, weeks: WeekMapping, cursor: Cursor) -> Result<Self, IngestError> {
        let path = path.as_ref().to_path_buf();
        let Cursor::File { offset, line } = cursor else {
            return Err(IngestError::Invalid {
                line: 0,
                field: "cursor".into(),
                message: format!("{cursor:?} is not a file cursor"),
            });
        };
        let io_err = |source| IngestError::Io { path: path.clone(), source };
        let mut file = File::open(&path).map_err(io_err)?;
        file.seek(SeekFrom::Start(offset)).map_err(io_err)?;
        Ok(FileSource {
            reader: BufReader::new(file),
            path,
            weeks,
            offset,
            line,
            last_height: None,
            buf: String::new(),
        })
    }
}

impl Iterator for FileSource {
    type Item = Result<TxRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            let n = match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(n) => n,
                Err(source) => return Some(Err(IngestError::Io { path: self.path.clone(), source })),
            };
            self.offset += n as u64;
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let record = match parse_record(text, self.line, &self.weeks) {
                Ok(r) => r,
                Err(e) => return Some(Err(e)),
            };
            if let Some(previous) = self.last_height {
                if record.height < previous {
                    return Some(Err(IngestError::OutOfOrder { line: self.line, height: record.height, previous }));
                }
            }
            self.last_height = Some(record.height);
            return Some(Ok(record));
        }
    }
}

impl RecordSource for FileSource {
    fn cursor(&self) -> Cursor {
        Cursor::File { offset: self.offset, line: self.line }
    }
}

/// Reads every record of a JSONL file, failing on the first bad line.
pub fn read_jsonl(path: impl AsRef<Path>, weeks: WeekMapping) -> Result<Vec<TxRecord>, IngestError> {
    FileSource::open(path, weeks)?.collect()
}
