//! Daily volatility from one-minute closes, and a blind before/after
//! Wilcoxon signed-rank sweep over every candidate event day.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::time::Duration;

use chrono::{DateTime, Datelike, NaiveDate};
use serde_json::Value;
use statrs::function::erf::erfc;
use thiserror::Error;

pub const MINUTES_PER_DAY: usize = 1440;
const MS_PER_DAY: i64 = 86_400_000;
/// Above this many non-zero differences the normal approximation is used.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("candle line {line}: {message}")]
    BadCandle { line: usize, message: String },
    #[error("need at least 2 returns, got {0}")]
    InsufficientSamples(usize),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired samples are empty")]
    EmptySample,
    #[error("series spans {days} days, the sweep needs at least {needed}")]
    SpanTooShort { days: usize, needed: usize },
    #[error("candle endpoint: {0}")]
    Http(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricePoint {
    /// Open time of the minute, milliseconds since the Unix epoch (UTC).
    pub ts_ms: i64,
    pub close: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub pair: String,
    pub points: Vec<PricePoint>,
}

impl PriceSeries {
    /// Reads candle CSV `timestamp_ms,open,high,low,close,volume`. A header
    /// line is skipped if present.
    pub fn from_candle_csv<R: BufRead>(r: R, pair: &str) -> Result<Self, MarketError> {
        let mut points: Vec<PricePoint> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if line.trim().is_empty() || (i == 0 && fields[0].parse::<i64>().is_err()) {
                continue;
            }
            let bad = |message: String| MarketError::BadCandle { line: line_no, message };
            if fields.len() < 6 {
                return Err(bad(format!("expected 6 fields, got {}", fields.len())));
            }
            let ts_ms = fields[0].parse::<i64>().map_err(|e| bad(format!("timestamp: {e}")))?;
            let close = fields[4].parse::<f64>().map_err(|e| bad(format!("close: {e}")))?;
            if !(close.is_finite() && close > 0.0) {
                return Err(bad(format!("close must be positive, got {close}")));
            }
            if let Some(prev) = points.last() {
                if ts_ms <= prev.ts_ms {
                    return Err(bad(format!("timestamp {ts_ms} does not increase")));
                }
            }
            points.push(PricePoint { ts_ms, close });
        }
        Ok(PriceSeries { pair: pair.to_string(), points })
    }
}

/// One day's volatility estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vol1 {
    pub value: f64,
    pub n_returns: usize,
    /// False when the day had fewer returns than the coverage threshold;
    /// the value is then scaled by `sqrt(n_returns)` instead of `sqrt(1440)`.
    pub sufficient: bool,
}

/// Sample standard deviation (n−1) of consecutive log returns, scaled by
/// `sqrt(1440)`. `closes` should start with the previous day's last close so
/// that a complete day yields 1440 returns.
pub fn vol1(closes: &[f64], min_coverage: f64) -> Result<Vol1, MarketError> {
    let n = closes.len().saturating_sub(1);
    if n < 2 {
        return Err(MarketError::InsufficientSamples(n));
    }
    let returns: Vec<f64> = closes.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sufficient = n as f64 >= min_coverage * MINUTES_PER_DAY as f64;
    let scale = if sufficient { MINUTES_PER_DAY } else { n };
    Ok(Vol1 { value: var.sqrt() * (scale as f64).sqrt(), n_returns: n, sufficient })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolDay {
    pub date: NaiveDate,
    pub vol1: f64,
    pub n_samples: usize,
    /// Coverage below threshold; excluded from sweeps.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VolSeries {
    pub days: Vec<VolDay>,
}

impl VolSeries {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "date,vol1,n_samples,flagged")?;
        for d in &self.days {
            writeln!(w, "{},{},{},{}", d.date, d.vol1, d.n_samples, u8::from(d.flagged))?;
        }
        Ok(())
    }
}

fn date_of(day_index: i64) -> NaiveDate {
    DateTime::from_timestamp(day_index * 86_400, 0).expect("in range").date_naive()
}

/// Groups minute closes into UTC days and computes VOL₁ for each. A day is
/// anchored on the previous calendar day's last close when that day exists.
pub fn daily_vol(series: &PriceSeries, min_coverage: f64) -> Result<VolSeries, MarketError> {
    let mut by_day: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for p in &series.points {
        by_day.entry(p.ts_ms.div_euclid(MS_PER_DAY)).or_default().push(p.close);
    }
    let mut days = Vec::with_capacity(by_day.len());
    let mut prev: Option<(i64, f64)> = None;
    for (&day, closes) in &by_day {
        let mut anchored = Vec::with_capacity(closes.len() + 1);
        if let Some((d, last)) = prev {
            if d == day - 1 {
                anchored.push(last);
            }
        }
        anchored.extend_from_slice(closes);
        prev = Some((day, *closes.last().expect("non-empty day")));
        match vol1(&anchored, min_coverage) {
            Ok(v) => days.push(VolDay { date: date_of(day), vol1: v.value, n_samples: v.n_returns, flagged: !v.sufficient }),
            Err(MarketError::InsufficientSamples(n)) => {
                days.push(VolDay { date: date_of(day), vol1: 0.0, n_samples: n, flagged: true })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(VolSeries { days })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Null hypothesis of zero median difference rejected at `alpha`.
    pub h: bool,
    /// Pairs left after dropping zero differences.
    pub n_pairs: usize,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub method: TestMethod,
    /// Every difference was zero; the test is undefined and reported as p = 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, with tie-group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Exact two-sided p-value: the null distribution of W+ is enumerated with
/// a subset-sum count over doubled (hence integral) ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = (2.0 * w_plus).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie and continuity correction.
fn normal_p(n: usize, ties: &[usize], w_plus: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

fn signed_ranks(x_b: &[f64], x_a: &[f64]) -> Result<(Vec<f64>, Vec<usize>, f64), MarketError> {
    if x_b.len() != x_a.len() {
        return Err(MarketError::LengthMismatch(x_b.len(), x_a.len()));
    }
    if x_b.is_empty() {
        return Err(MarketError::EmptySample);
    }
    let diffs: Vec<f64> = x_b.iter().zip(x_a).map(|(b, a)| b - a).filter(|d| *d != 0.0).collect();
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&magnitudes);
    let w_plus = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    Ok((ranks, ties, w_plus))
}

/// Two-sided Wilcoxon signed-rank test on `x_b - x_a`. Zero differences
/// are dropped; up to [`EXACT_LIMIT`] remaining pairs use the exact null
/// distribution, larger samples the normal approximation.
pub fn wilcoxon_signed_rank(x_b: &[f64], x_a: &[f64], alpha: f64) -> Result<WilcoxonResult, MarketError> {
    let (ranks, ties, w_plus) = signed_ranks(x_b, x_a)?;
    let n = ranks.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            h: false,
            n_pairs: 0,
            w_plus: 0.0,
            method: TestMethod::Exact,
            degenerate: true,
        });
    }
    let (p_value, method) = if n <= EXACT_LIMIT {
        (exact_p(&ranks, w_plus), TestMethod::Exact)
    } else {
        (normal_p(n, &ties, w_plus), TestMethod::Normal)
    };
    Ok(WilcoxonResult { p_value, h: p_value < alpha, n_pairs: n, w_plus, method, degenerate: false })
}

/// The normal-approximation p-value regardless of sample size.
pub fn wilcoxon_normal_p(x_b: &[f64], x_a: &[f64]) -> Result<f64, MarketError> {
    let (ranks, ties, w_plus) = signed_ranks(x_b, x_a)?;
    Ok(if ranks.is_empty() { 1.0 } else { normal_p(ranks.len(), &ties, w_plus) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub date: NaiveDate,
    pub p_value: f64,
    pub h: bool,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "event_date,p_value,h,n_pairs")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.date, r.p_value, u8::from(r.h), r.n_pairs)?;
        }
        Ok(())
    }
}

/// Tests every admissible event day `D`: the `window` days before it,
/// nearest first, are paired with the `window` days after it, nearest first.
/// `D` itself belongs to neither side; pairs touching a flagged day are left
/// out.
pub fn rolling_sweep(vols: &VolSeries, window: usize, alpha: f64) -> Result<SweepResult, MarketError> {
    let days = &vols.days;
    let needed = 2 * window + 1;
    if window == 0 || days.len() < needed {
        return Err(MarketError::SpanTooShort { days: days.len(), needed });
    }
    let mut rows = Vec::with_capacity(days.len() - 2 * window);
    for d in window..days.len() - window {
        let (mut x_b, mut x_a) = (Vec::with_capacity(window), Vec::with_capacity(window));
        for k in 1..=window {
            let (before, after) = (&days[d - k], &days[d + k]);
            if !before.flagged && !after.flagged {
                x_b.push(before.vol1);
                x_a.push(after.vol1);
            }
        }
        let row = if x_b.is_empty() {
            SweepRow { date: days[d].date, p_value: 1.0, h: false, n_pairs: 0 }
        } else {
            let t = wilcoxon_signed_rank(&x_b, &x_a, alpha)?;
            SweepRow { date: days[d].date, p_value: t.p_value, h: t.h, n_pairs: t.n_pairs }
        };
        rows.push(row);
    }
    Ok(SweepResult { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YearStats {
    pub year: i32,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single day.
    pub std: f64,
    pub min: f64,
    pub n_days: usize,
    pub degenerate: bool,
}

pub fn yearly_stats(vols: &VolSeries) -> Vec<YearStats> {
    let mut by_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for d in &vols.days {
        by_year.entry(d.date.year()).or_default().push(d.vol1);
    }
    by_year
        .into_iter()
        .map(|(year, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            YearStats {
                year,
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean,
                std,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                n_days: n,
                degenerate: n < 2,
            }
        })
        .collect()
}

pub fn write_yearly_stats_csv<W: Write>(mut w: W, stats: &[YearStats]) -> io::Result<()> {
    writeln!(w, "year,max,mean,std,min")?;
    for s in stats {
        writeln!(w, "{},{},{},{},{}", s.year, s.max, s.mean, s.std, s.min)?;
    }
    Ok(())
}

/// Minimal client for an exchange klines REST endpoint
/// (`/api/v3/klines?symbol=..&interval=1m`).
pub struct CandleClient {
    agent: ureq::Agent,
    base_url: String,
}

impl CandleClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        CandleClient { agent: ureq::AgentBuilder::new().timeout(timeout).build(), base_url: base_url.into() }
    }

    /// Fetches one-minute candles with open time in `[start_ms, end_ms)`.
    pub fn fetch_minutes(&self, pair: &str, start_ms: i64, end_ms: i64) -> Result<PriceSeries, MarketError> {
        let symbol: String = pair.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        let url = format!("{}/api/v3/klines", self.base_url.trim_end_matches('/'));
        let mut points = Vec::new();
        let mut from = start_ms;
        while from < end_ms {
            let rows: Value = self
                .agent
                .get(&url)
                .query("symbol", &symbol)
                .query("interval", "1m")
                .query("startTime", &from.to_string())
                .query("endTime", &(end_ms - 1).to_string())
                .query("limit", "1000")
                .call()
                .map_err(|e| MarketError::Http(e.to_string()))?
                .into_json()
                .map_err(|e| MarketError::Http(e.to_string()))?;
            let rows = rows.as_array().ok_or_else(|| MarketError::Http("expected a JSON array".into()))?;
            if rows.is_empty() {
                break;
            }
            for row in rows {
                let ts_ms = row.get(0).and_then(Value::as_i64);
                let close = row.get(4).and_then(|v| v.as_str().and_then(|s| s.parse().ok()).or_else(|| v.as_f64()));
                let (Some(ts_ms), Some(close)) = (ts_ms, close) else {
                    return Err(MarketError::Http(format!("malformed kline {row}")));
                };
                if ts_ms >= from && ts_ms < end_ms {
                    points.push(PricePoint { ts_ms, close });
                }
            }
            let last = points.last().map(|p| p.ts_ms).unwrap_or(end_ms);
            if last < from {
                break;
            }
            from = last + 60_000;
        }
        Ok(PriceSeries { pair: pair.to_string(), points })
    }
}

/// Writes candle CSV with the close repeated in the OHL columns, which is all
/// the volatility index uses.
pub fn write_close_csv<W: Write>(mut w: W, series: &PriceSeries) -> io::Result<()> {
    writeln!(w, "timestamp_ms,open,high,low,close,volume")?;
    for p in &series.points {
        writeln!(w, "{},{c},{c},{c},{c},0", p.ts_ms, c = p.close)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_day_has_zero_vol() {
        let v = vol1(&[100.0; 1441], 0.9).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.n_returns, 1440);
        assert!(v.sufficient);
    }

    #[test]
    fn alternating_day_matches_closed_form() {
        let sigma: f64 = 0.001;
        let closes: Vec<f64> = (0..1441).map(|i| if i % 2 == 0 { 100.0 } else { 100.0 * sigma.exp() }).collect();
        let expected = sigma * (1440.0f64 * 1440.0 / 1439.0).sqrt();
        assert!((vol1(&closes, 0.9).unwrap().value - expected).abs() < 1e-9);
        assert!((expected - 0.03796).abs() < 1e-5);
    }

    #[test]
    fn sparse_day_is_flagged_and_rescaled() {
        let closes: Vec<f64> = (0..101).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect();
        let v = vol1(&closes, 0.9).unwrap();
        assert!(!v.sufficient);
        let std = 2f64.ln() * (100.0f64 / 99.0).sqrt();
        assert!((v.value - std * 10.0).abs() < 1e-12);
        assert!(matches!(vol1(&[1.0, 2.0], 0.9), Err(MarketError::InsufficientSamples(1))));
    }

    #[test]
    fn wilcoxon_basics() {
        let x = [1.0, 2.0, 3.0];
        let r = wilcoxon_signed_rank(&x, &x, 0.05).unwrap();
        assert!(r.degenerate && r.p_value == 1.0 && !r.h);

        let r = wilcoxon_signed_rank(&[2.0, 4.0, 6.0, 8.0, 10.0], &[1.0, 2.0, 3.0, 4.0, 5.0], 0.05).unwrap();
        assert_eq!(r.p_value, 0.0625);
        assert!(!r.h);
        assert_eq!(r.n_pairs, 5);

        assert!(matches!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0], 0.05), Err(MarketError::LengthMismatch(1, 2))));
        assert!(matches!(wilcoxon_signed_rank(&[], &[], 0.05), Err(MarketError::EmptySample)));
    }

    #[test]
    fn average_ranks_handle_ties() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![1, 1, 2]);
    }

    fn series(values: &[f64]) -> VolSeries {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        VolSeries {
            days: values
                .iter()
                .enumerate()
                .map(|(i, &v)| VolDay {
                    date: start + chrono::Days::new(i as u64),
                    vol1: v,
                    n_samples: 1440,
                    flagged: false,
                })
                .collect(),
        }
    }

    #[test]
    fn sweep_shape() {
        let s = rolling_sweep(&series(&[0.02; 30]), 7, 0.05).unwrap();
        assert_eq!(s.rows.len(), 30 - 14);
        assert!(s.rows.iter().all(|r| r.p_value == 1.0 && !r.h));
        assert!(matches!(rolling_sweep(&series(&[0.02; 14]), 7, 0.05), Err(MarketError::SpanTooShort { .. })));
    }

    #[test]
    fn yearly_stats_small() {
        let s = yearly_stats(&series(&[0.01, 0.03]));
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].max, s[0].min), (0.03, 0.01));
        assert!((s[0].mean - 0.02).abs() < 1e-15);
        let single = yearly_stats(&series(&[0.05]));
        assert!(single[0].degenerate);
        assert_eq!(single[0].std, 0.0);
    }

    #[test]
    fn candle_csv_parsing() {
        let text = "timestamp_ms,open,high,low,close,volume\n0,1,1,1,10,5\n60000,1,1,1,11,5\n";
        let s = PriceSeries::from_candle_csv(text.as_bytes(), "BTC-USDT").unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[1].close, 11.0);
        let bad = "0,1,1,1,10,5\n0,1,1,1,11,5\n";
        assert!(matches!(PriceSeries::from_candle_csv(bad.as_bytes(), "x"), Err(MarketError::BadCandle { line: 2, .. })));
        let neg = "0,1,1,1,-10,5\n";
        assert!(PriceSeries::from_candle_csv(neg.as_bytes(), "x").is_err());
    }

    #[test]
    fn daily_grouping_anchors_on_previous_day() {
        let points: Vec<PricePoint> =
            (0..2 * 1440).map(|m| PricePoint { ts_ms: m as i64 * 60_000, close: 100.0 + (m % 3) as f64 }).collect();
        let v = daily_vol(&PriceSeries { pair: "x".into(), points }, 0.9).unwrap();
        assert_eq!(v.days.len(), 2);
        assert_eq!(v.days[0].n_samples, 1439);
        assert_eq!(v.days[1].n_samples, 1440);
        assert_eq!(v.days[0].date, NaiveDate::from_ymd_opt(1970, 1, 1).unwrap());
    }
}
