//! Bitcoin Core JSON-RPC block source.
//!
//! Blocks are fetched with `getblockhash(height)` and `getblock(hash, 2)`.
//! Inputs only carry a previous-output reference at that verbosity, so input
//! addresses come from a bounded LRU of recently seen outputs, falling back
//! to `getrawtransaction(txid, true)` (which needs `-txindex` on the node).
//! Transactions whose inputs cannot be resolved are skipped and counted.

use std::collections::VecDeque;
use std::num::NonZeroUsize;
use std::time::Duration;

use base64::Engine;
use lru::LruCache;
use serde_json::{json, Value};

use super::{Amount, Cursor, IngestError, RecordSource, TxIo, TxRecord, WeekMapping};

#[derive(Debug, Clone)]
pub struct RpcConfig {
    pub url: String,
    /// `user:password`, sent as HTTP basic auth.
    pub auth: Option<String>,
    pub timeout: Duration,
    pub prevout_cache: usize,
    pub weeks: WeekMapping,
}

impl RpcConfig {
    pub fn new(url: impl Into<String>) -> Self {
        RpcConfig {
            url: url.into(),
            auth: None,
            timeout: Duration::from_secs(30),
            prevout_cache: 1 << 20,
            weeks: WeekMapping::default(),
        }
    }
}

/// Counters for transactions that could not be turned into records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FetchStats {
    pub blocks: u64,
    pub records: u64,
    pub unresolved_prevout: u64,
    pub no_address: u64,
}

struct RpcClient {
    agent: ureq::Agent,
    url: String,
    auth_header: Option<String>,
}

impl RpcClient {
    fn new(config: &RpcConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let auth_header = config
            .auth
            .as_ref()
            .map(|a| format!("Basic {}", base64::engine::general_purpose::STANDARD.encode(a)));
        RpcClient { agent, url: config.url.clone(), auth_header }
    }

    fn call(&self, method: &str, params: Value) -> Result<Value, RpcFailure> {
        let body = json!({"jsonrpc": "1.0", "id": "bunforge", "method": method, "params": params});
        let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(h) = &self.auth_header {
            req = req.set("Authorization", h);
        }
        // Bitcoin Core reports RPC errors with HTTP 500 and a JSON body.
        let response = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => return Err(RpcFailure::Transport(t.to_string())),
        };
        let reply: Value = response.into_json().map_err(|e| RpcFailure::Transport(e.to_string()))?;
        match reply.get("error") {
            Some(err) if !err.is_null() => Err(RpcFailure::Remote {
                code: err.get("code").and_then(Value::as_i64).unwrap_or(0),
                message: err.get("message").and_then(Value::as_str).unwrap_or("").to_string(),
            }),
            _ => Ok(reply.get("result").cloned().unwrap_or(Value::Null)),
        }
    }
}

enum RpcFailure {
    Transport(String),
    Remote { code: i64, message: String },
}

impl RpcFailure {
    fn into_ingest(self, height: u64) -> IngestError {
        match self {
            RpcFailure::Transport(m) => IngestError::Unreachable(m),
            // RPC_INVALID_PARAMETER: "Block height out of range"
            RpcFailure::Remote { code: -8, .. } => IngestError::UnknownHeight(height),
            RpcFailure::Remote { code, message } => IngestError::Rpc(format!("{code}: {message}")),
        }
    }
}

type OutPoint = (String, u32);

#[derive(Clone)]
struct PrevOut {
    address: Option<String>,
    value: Amount,
}

pub struct RpcSource {
    client: RpcClient,
    weeks: WeekMapping,
    next_height: u64,
    to_height: u64,
    buffer: VecDeque<TxRecord>,
    /// Height and position of the block currently being drained.
    draining: Option<(u64, usize)>,
    prevouts: LruCache<OutPoint, PrevOut>,
    stats: FetchStats,
}

/// Opens a block stream over `[from_height, to_height]`, probing the
/// endpoint before returning.
pub fn fetch_blocks(config: &RpcConfig, from_height: u64, to_height: u64) -> Result<RpcSource, IngestError> {
    RpcSource::open_at(config, Cursor::Rpc { height: from_height, skip: 0 }, to_height)
}

impl RpcSource {
    /// Resumes at a cursor previously returned by [`RecordSource::cursor`].
    pub fn open_at(config: &RpcConfig, cursor: Cursor, to_height: u64) -> Result<Self, IngestError> {
        let Cursor::Rpc { height, skip } = cursor else {
            return Err(IngestError::Invalid {
                line: 0,
                field: "cursor".into(),
                message: format!("{cursor:?} is not an rpc cursor"),
            });
        };
        if height > to_height {
            return Err(IngestError::InvalidRange { from: height, to: to_height });
        }
        let capacity = NonZeroUsize::new(config.prevout_cache.max(1)).expect("non-zero");
        let mut src = RpcSource {
            client: RpcClient::new(config),
            weeks: config.weeks,
            next_height: height,
            to_height,
            buffer: VecDeque::new(),
            draining: None,
            prevouts: LruCache::new(capacity),
            stats: FetchStats::default(),
        };
        src.load_next_block()?;
        for _ in 0..skip {
            src.pop_record();
        }
        Ok(src)
    }

    pub fn stats(&self) -> FetchStats {
        self.stats
    }

    fn pop_record(&mut self) -> Option<TxRecord> {
        let record = self.buffer.pop_front()?;
        if let Some((_, pos)) = self.draining.as_mut() {
            *pos += 1;
        }
        Some(record)
    }

    fn load_next_block(&mut self) -> Result<(), IngestError> {
        let height = self.next_height;
        let hash = self.client.call("getblockhash", json!([height])).map_err(|e| e.into_ingest(height))?;
        let block = self.client.call("getblock", json!([hash, 2])).map_err(|e| e.into_ingest(height))?;
        let week = self.weeks.week_of(height).ok_or_else(|| IngestError::Invalid {
            line: 0,
            field: "height".into(),
            message: format!("block {height} precedes genesis height {}", self.weeks.genesis_height),
        })?;
        let txs = block
            .get("tx")
            .and_then(Value::as_array)
            .ok_or_else(|| IngestError::Rpc(format!("block {height} has no tx array")))?;

        // Register every output first so that spends within the same block resolve.
        for tx in txs {
            self.remember_outputs(tx);
        }
        for tx in txs {
            match self.convert(tx, height, week)? {
                Converted::Record(r) => {
                    self.stats.records += 1;
                    self.buffer.push_back(r);
                }
                Converted::Unresolved => self.stats.unresolved_prevout += 1,
                Converted::NoAddress => self.stats.no_address += 1,
            }
        }
        self.stats.blocks += 1;
        self.draining = Some((height, 0));
        self.next_height += 1;
        Ok(())
    }

    fn remember_outputs(&mut self, tx: &Value) {
        let Some(txid) = tx.get("txid").and_then(Value::as_str) else { return };
        for (n, out) in vout_entries(tx) {
            self.prevouts.put((txid.to_string(), n), out);
        }
    }

    fn resolve(&mut self, txid: &str, vout: u32) -> Result<Option<PrevOut>, IngestError> {
        let key = (txid.to_string(), vout);
        if let Some(p) = self.prevouts.get(&key) {
            return Ok(Some(p.clone()));
        }
        match self.client.call("getrawtransaction", json!([txid, true])) {
            Ok(tx) => {
                let found = vout_entries(&tx).find(|(n, _)| *n == vout).map(|(_, p)| p);
                if let Some(p) = &found {
                    self.prevouts.put(key, p.clone());
                }
                Ok(found)
            }
            Err(RpcFailure::Transport(m)) => Err(IngestError::Unreachable(m)),
            Err(RpcFailure::Remote { .. }) => Ok(None),
        }
    }

    fn convert(&mut self, tx: &Value, height: u64, week: u64) -> Result<Converted, IngestError> {
        let txid = tx
            .get("txid")
            .and_then(Value::as_str)
            .ok_or_else(|| IngestError::Rpc(format!("transaction without txid in block {height}")))?
            .to_string();
        let vin = tx.get("vin").and_then(Value::as_array).map(Vec::as_slice).unwrap_or(&[]);
        let coinbase = vin.iter().any(|i| i.get("coinbase").is_some());
        let mut inputs = Vec::with_capacity(vin.len());
        if !coinbase {
            for input in vin {
                let prev_txid = input.get("txid").and_then(Value::as_str);
                let prev_n = input.get("vout").and_then(Value::as_u64);
                let (Some(prev_txid), Some(prev_n)) = (prev_txid, prev_n) else {
                    return Ok(Converted::Unresolved);
                };
                match self.resolve(prev_txid, prev_n as u32)? {
                    Some(PrevOut { address: Some(address), value }) => inputs.push(TxIo { address, value }),
                    Some(PrevOut { address: None, .. }) => {}
                    None => return Ok(Converted::Unresolved),
                }
            }
            if inputs.is_empty() {
                return Ok(Converted::NoAddress);
            }
        }
        let outputs: Vec<TxIo> = vout_entries(tx)
            .filter_map(|(_, p)| p.address.map(|address| TxIo { address, value: p.value }))
            .collect();
        if outputs.is_empty() {
            return Ok(Converted::NoAddress);
        }
        Ok(Converted::Record(TxRecord { txid, height, week, inputs, outputs }))
    }
}

enum Converted {
    Record(TxRecord),
    Unresolved,
    NoAddress,
}

fn vout_entries(tx: &Value) -> impl Iterator<Item = (u32, PrevOut)> + '_ {
    tx.get("vout").and_then(Value::as_array).into_iter().flatten().enumerate().map(|(i, out)| {
        let n = out.get("n").and_then(Value::as_u64).unwrap_or(i as u64) as u32;
        let value = out.get("value").and_then(Value::as_f64).and_then(Amount::from_btc).unwrap_or(Amount::ZERO);
        let spk = out.get("scriptPubKey");
        let address = spk
            .and_then(|s| s.get("address"))
            .and_then(Value::as_str)
            .or_else(|| {
                // pre-v22 nodes report a single-element `addresses` array
                spk.and_then(|s| s.get("addresses")).and_then(Value::as_array).and_then(|a| a.first()).and_then(Value::as_str)
            })
            .map(str::to_string);
        (n, PrevOut { address, value })
    })
}

impl Iterator for RpcSource {
    type Item = Result<TxRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.pop_record() {
                return Some(Ok(r));
            }
            if self.next_height > self.to_height {
                self.draining = None;
                return None;
            }
            if let Err(e) = self.load_next_block() {
                return Some(Err(e));
            }
        }
    }
}

impl RecordSource for RpcSource {
    fn cursor(&self) -> Cursor {
        match self.draining {
            Some((height, pos)) if !self.buffer.is_empty() => Cursor::Rpc { height, skip: pos },
            _ => Cursor::Rpc { height: self.next_height, skip: 0 },
        }
    }
}
