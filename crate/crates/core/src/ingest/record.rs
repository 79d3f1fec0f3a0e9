use std::fmt;

use serde::Deserialize;

use super::IngestError;

const SATS_PER_BTC: u64 = 100_000_000;
/// 21M BTC, the protocol supply cap.
const MAX_SATS: u64 = 21_000_000 * SATS_PER_BTC;

/// A non-negative BTC amount held in satoshis so that equality (and the
/// change tie-break that depends on it) is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Amount(u64);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub fn from_sat(sat: u64) -> Self {
        Amount(sat)
    }

    pub fn to_sat(self) -> u64 {
        self.0
    }

    /// Converts a decimal BTC value with at most 8 fractional digits.
    /// Returns `None` for negative, non-finite, over-precise or out-of-range values.
    pub fn from_btc(btc: f64) -> Option<Self> {
        if !btc.is_finite() || btc < 0.0 {
            return None;
        }
        let scaled = btc * SATS_PER_BTC as f64;
        let rounded = scaled.round();
        // Inputs are decimal strings parsed to the nearest f64, so a valid
        // 8-digit value lands within float noise of an integer.
        if (scaled - rounded).abs() > 1e-6 * scaled.max(1.0) || rounded > MAX_SATS as f64 {
            return None;
        }
        Some(Amount(rounded as u64))
    }

    pub fn to_btc(self) -> f64 {
        self.0 as f64 / SATS_PER_BTC as f64
    }
}

impl fmt::Display for Amount {
    /// Shortest exact decimal form: `5`, `2.5`, `0.00000001`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / SATS_PER_BTC;
        let frac = self.0 % SATS_PER_BTC;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let digits = format!("{frac:08}");
            write!(f, "{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

/// One side of a transaction: an address and the value it sends or receives.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxIo {
    pub address: String,
    pub value: Amount,
}

impl TxIo {
    pub fn new(address: impl Into<String>, value: Amount) -> Self {
        TxIo { address: address.into(), value }
    }
}

/// A validated transaction. Empty `inputs` means coinbase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxRecord {
    pub txid: String,
    pub height: u64,
    pub week: u64,
    pub inputs: Vec<TxIo>,
    pub outputs: Vec<TxIo>,
}

impl TxRecord {
    pub fn is_coinbase(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Serializes to the canonical JSONL form (no trailing newline).
    pub fn to_json_line(&self) -> String {
        let mut out = String::with_capacity(64 + 24 * (self.inputs.len() + self.outputs.len()));
        out.push_str("{\"txid\":");
        push_json_str(&mut out, &self.txid);
        out.push_str(&format!(",\"height\":{},\"week\":{},\"inputs\":", self.height, self.week));
        push_io_array(&mut out, &self.inputs);
        out.push_str(",\"outputs\":");
        push_io_array(&mut out, &self.outputs);
        out.push('}');
        out
    }

    /// Checks the record invariants against a week mapping.
    pub fn validate(&self, weeks: &WeekMapping) -> Result<(), RecordFault> {
        if self.txid.is_empty() {
            return Err(RecordFault::new("txid", "empty transaction id"));
        }
        if self.outputs.is_empty() {
            return Err(RecordFault::new("outputs", "transaction has no outputs"));
        }
        for (side, list) in [("inputs", &self.inputs), ("outputs", &self.outputs)] {
            if let Some(i) = list.iter().position(|io| io.address.is_empty()) {
                return Err(RecordFault::new(format!("{side}[{i}]"), "empty address"));
            }
        }
        match weeks.week_of(self.height) {
            Some(w) if w == self.week => Ok(()),
            Some(w) => Err(RecordFault::new(
                "week",
                format!("week {} does not match height {} (expected {w})", self.week, self.height),
            )),
            None => Err(RecordFault::new(
                "height",
                format!("height {} is below genesis height {}", self.height, weeks.genesis_height),
            )),
        }
    }
}

fn push_json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

fn push_io_array(out: &mut String, ios: &[TxIo]) {
    out.push('[');
    for (i, io) in ios.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        push_json_str(out, &io.address);
        out.push(',');
        out.push_str(&io.value.to_string());
        out.push(']');
    }
    out.push(']');
}

/// A validation failure, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordFault {
    pub field: String,
    pub message: String,
}

impl RecordFault {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        RecordFault { field: field.into(), message: message.into() }
    }
}

/// Block height to snapshot week:
/// `week = (height - genesis_height) / blocks_per_week`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeekMapping {
    pub genesis_height: u64,
    pub blocks_per_week: u64,
}

impl Default for WeekMapping {
    fn default() -> Self {
        WeekMapping { genesis_height: 0, blocks_per_week: 1008 }
    }
}

impl WeekMapping {
    pub fn new(genesis_height: u64, blocks_per_week: u64) -> Self {
        assert!(blocks_per_week > 0, "blocks_per_week must be positive");
        WeekMapping { genesis_height, blocks_per_week }
    }

    pub fn week_of(&self, height: u64) -> Option<u64> {
        height.checked_sub(self.genesis_height).map(|h| h / self.blocks_per_week)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    txid: String,
    height: u64,
    week: u64,
    inputs: Vec<(String, f64)>,
    outputs: Vec<(String, f64)>,
}

fn convert_side(side: &str, raw: Vec<(String, f64)>) -> Result<Vec<TxIo>, RecordFault> {
    raw.into_iter()
        .enumerate()
        .map(|(i, (address, value))| {
            if value < 0.0 {
                return Err(RecordFault::new(format!("{side}[{i}].value"), format!("negative value {value}")));
            }
            let value = Amount::from_btc(value).ok_or_else(|| {
                RecordFault::new(format!("{side}[{i}].value"), format!("value {value} is not a valid BTC amount"))
            })?;
            Ok(TxIo { address, value })
        })
        .collect()
}

/// Parses and validates one JSONL record. `line_no` is 1-based and only
/// used for error reporting.
pub fn parse_record(line: &str, line_no: usize, weeks: &WeekMapping) -> Result<TxRecord, IngestError> {
    let raw: RawRecord = serde_json::from_str(line)
        .map_err(|e| IngestError::Malformed { line: line_no, message: e.to_string() })?;
    let fault = |f: RecordFault| match f.field.as_str() {
        "outputs" => IngestError::EmptyOutputs { line: line_no },
        "week" | "height" => IngestError::WeekMismatch { line: line_no, message: f.message },
        field if field.ends_with(".value") && f.message.starts_with("negative") => {
            IngestError::NegativeValue { line: line_no, field: f.field }
        }
        _ => IngestError::Invalid { line: line_no, field: f.field, message: f.message },
    };
    let record = TxRecord {
        txid: raw.txid,
        height: raw.height,
        week: raw.week,
        inputs: convert_side("inputs", raw.inputs).map_err(fault)?,
        outputs: convert_side("outputs", raw.outputs).map_err(fault)?,
    };
    record.validate(weeks).map_err(fault)?;
    Ok(record)
}
