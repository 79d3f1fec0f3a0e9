//! Directed, unweighted user graphs.
//!
//! Every transaction adds an edge from its sender (the user owning its
//! inputs) to the user of each output. Edges are a set: repeated transfers
//! collapse, and transfers that stay within one user (change included) are
//! dropped as self-loops.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::clustering::{ClusterState, UserId};
use crate::ingest::{Pattern, TxRecord};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("address {0:?} is not known to the cluster state")]
    UnknownAddress(String),
    #[error("{what} line {line}: {message}")]
    BadCsv { what: &'static str, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which transactions a snapshot for week `W` covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// All weeks `<= W`.
    #[default]
    Cumulative,
    /// Week `W` only.
    Weekly,
}

impl Mode {
    pub fn covers(self, snapshot_week: u64, tx_week: u64) -> bool {
        match self {
            Mode::Cumulative => tx_week <= snapshot_week,
            Mode::Weekly => tx_week == snapshot_week,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cumulative" => Ok(Mode::Cumulative),
            "weekly" => Ok(Mode::Weekly),
            other => Err(format!("unknown mode {other:?} (expected cumulative|weekly)")),
        }
    }
}

/// How addresses map to users when a snapshot spans several weeks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resolution {
    /// Every transaction is resolved against the state at the snapshot week.
    #[default]
    Final,
    /// Each week's transactions are resolved against the state at the end of
    /// their own week; later merges do not rewrite earlier edges.
    AsOfWeek,
}

/// Address-level links of one week, before resolution to users.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WeekLinks {
    pub week: u64,
    /// Every address index that appears in the week's transactions.
    pub touched: Vec<u32>,
    /// `(first input, output)` address pairs.
    pub links: Vec<(u32, u32)>,
}

impl WeekLinks {
    pub fn new(week: u64) -> Self {
        WeekLinks { week, ..Default::default() }
    }

    /// Adds one transaction. All its addresses must be registered in `state`.
    pub fn push(&mut self, tx: &TxRecord, state: &ClusterState) -> Result<(), GraphError> {
        let lookup = |a: &str| state.index_of(a).ok_or_else(|| GraphError::UnknownAddress(a.to_string()));
        let first_input = self.touched.len();
        for io in &tx.inputs {
            self.touched.push(lookup(&io.address)?);
        }
        let sender = (!tx.inputs.is_empty()).then(|| self.touched[first_input]);
        for io in &tx.outputs {
            let o = lookup(&io.address)?;
            self.touched.push(o);
            if let Some(s) = sender {
                self.links.push((s, o));
            }
        }
        Ok(())
    }

    /// Resolves to user ids with a canonical map from [`ClusterState::canonical_map`].
    pub fn resolve(&self, canonical: &[u32]) -> (Vec<UserId>, Vec<(UserId, UserId)>) {
        let nodes = self.touched.iter().map(|&a| UserId(canonical[a as usize])).collect();
        let edges = self
            .links
            .iter()
            .map(|&(s, o)| (UserId(canonical[s as usize]), UserId(canonical[o as usize])))
            .collect();
        (nodes, edges)
    }
}

/// Groups a record stream into per-week links.
pub fn week_links(txs: &[TxRecord], state: &ClusterState) -> Result<Vec<WeekLinks>, GraphError> {
    let mut out: Vec<WeekLinks> = Vec::new();
    for tx in txs {
        if out.last().map(|w| w.week) != Some(tx.week) {
            out.push(WeekLinks::new(tx.week));
        }
        out.last_mut().expect("just pushed").push(tx, state)?;
    }
    Ok(out)
}

/// An immutable directed graph over users with CSR adjacency in both
/// directions. Nodes are stored sorted by id; node positions are dense `u32`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserGraphSnapshot {
    week: u64,
    nodes: Vec<UserId>,
    out_offsets: Vec<usize>,
    out_targets: Vec<u32>,
    in_offsets: Vec<usize>,
    in_sources: Vec<u32>,
}

impl UserGraphSnapshot {
    /// Builds a snapshot from user-level nodes and edges. Duplicates are
    /// merged, self-loops dropped and edge endpoints added to the node set.
    pub fn from_user_edges(week: u64, mut nodes: Vec<UserId>, edges: Vec<(UserId, UserId)>) -> Self {
        nodes.extend(edges.iter().flat_map(|&(s, t)| [s, t]));
        nodes.sort_unstable();
        nodes.dedup();
        let pos = |u: UserId| nodes.binary_search(&u).expect("endpoint registered above") as u32;
        let mut dense: Vec<(u32, u32)> =
            edges.into_iter().filter(|(s, t)| s != t).map(|(s, t)| (pos(s), pos(t))).collect();
        dense.sort_unstable();
        dense.dedup();
        Self::from_dense(week, nodes, &dense)
    }

    /// `edges` must be sorted, deduplicated, loop-free and in range.
    fn from_dense(week: u64, nodes: Vec<UserId>, edges: &[(u32, u32)]) -> Self {
        let n = nodes.len();
        let mut out_offsets = vec![0usize; n + 1];
        let mut in_offsets = vec![0usize; n + 1];
        for &(s, t) in edges {
            out_offsets[s as usize + 1] += 1;
            in_offsets[t as usize + 1] += 1;
        }
        for i in 0..n {
            out_offsets[i + 1] += out_offsets[i];
            in_offsets[i + 1] += in_offsets[i];
        }
        let out_targets = edges.iter().map(|&(_, t)| t).collect();
        let mut in_sources = vec![0u32; edges.len()];
        let mut fill = in_offsets.clone();
        // Edges are sorted by source, so each in-list comes out sorted too.
        for &(s, t) in edges {
            in_sources[fill[t as usize]] = s;
            fill[t as usize] += 1;
        }
        UserGraphSnapshot { week, nodes, out_offsets, out_targets, in_offsets, in_sources }
    }

    pub fn empty(week: u64) -> Self {
        Self::from_dense(week, Vec::new(), &[])
    }

    pub fn from_links<'a>(
        week: u64,
        links: impl IntoIterator<Item = &'a WeekLinks>,
        canonical: &[u32],
    ) -> Self {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for wl in links {
            let (n, e) = wl.resolve(canonical);
            nodes.extend(n);
            edges.extend(e);
        }
        Self::from_user_edges(week, nodes, edges)
    }

    pub fn week(&self) -> u64 {
        self.week
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.out_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[UserId] {
        &self.nodes
    }

    pub fn node(&self, i: u32) -> UserId {
        self.nodes[i as usize]
    }

    pub fn position(&self, user: UserId) -> Option<u32> {
        self.nodes.binary_search(&user).ok().map(|i| i as u32)
    }

    pub fn out_neighbors(&self, i: u32) -> &[u32] {
        &self.out_targets[self.out_offsets[i as usize]..self.out_offsets[i as usize + 1]]
    }

    pub fn in_neighbors(&self, i: u32) -> &[u32] {
        &self.in_sources[self.in_offsets[i as usize]..self.in_offsets[i as usize + 1]]
    }

    pub fn out_degree(&self, i: u32) -> u32 {
        (self.out_offsets[i as usize + 1] - self.out_offsets[i as usize]) as u32
    }

    pub fn in_degree(&self, i: u32) -> u32 {
        (self.in_offsets[i as usize + 1] - self.in_offsets[i as usize]) as u32
    }

    /// Edges as dense position pairs, sorted by source then target.
    pub fn dense_edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n_nodes() as u32).flat_map(move |s| self.out_neighbors(s).iter().map(move |&t| (s, t)))
    }

    pub fn edges(&self) -> impl Iterator<Item = (UserId, UserId)> + '_ {
        self.dense_edges().map(|(s, t)| (self.node(s), self.node(t)))
    }

    /// Same graph without nodes of total degree 0.
    pub fn without_isolated(&self) -> Self {
        let keep: Vec<UserId> = (0..self.n_nodes() as u32)
            .filter(|&i| self.in_degree(i) + self.out_degree(i) > 0)
            .map(|i| self.node(i))
            .collect();
        Self::from_user_edges(self.week, keep, self.edges().collect())
    }

    /// Same graph with every edge reversed.
    pub fn reversed(&self) -> Self {
        let edges = self.edges().map(|(s, t)| (t, s)).collect();
        Self::from_user_edges(self.week, self.nodes.clone(), edges)
    }

    /// CSV `week,src_user,dst_user`.
    pub fn write_edges_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "week,src_user,dst_user")?;
        for (s, t) in self.edges() {
            writeln!(w, "{},{s},{t}", self.week)?;
        }
        Ok(())
    }

    /// CSV `week,user,in_deg,out_deg`, one row per node including isolated ones.
    pub fn write_degrees_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "week,user,in_deg,out_deg")?;
        for i in 0..self.n_nodes() as u32 {
            writeln!(w, "{},{},{},{}", self.week, self.node(i), self.in_degree(i), self.out_degree(i))?;
        }
        Ok(())
    }

    /// Rebuilds a snapshot from its edge and degree exports.
    pub fn read_csv<E: BufRead, D: BufRead>(edges: E, degrees: D) -> Result<Self, GraphError> {
        let edge_rows = read_u64_rows(edges, "edges", 3)?;
        let degree_rows = read_u64_rows(degrees, "degrees", 4)?;
        let week = edge_rows.first().or(degree_rows.first()).map(|r| r[0]).unwrap_or(0);
        let nodes = degree_rows.iter().map(|r| UserId(r[1] as u32)).collect();
        let edges = edge_rows.iter().map(|r| (UserId(r[1] as u32), UserId(r[2] as u32))).collect();
        let g = Self::from_user_edges(week, nodes, edges);
        if g.n_nodes() != degree_rows.len() {
            return Err(GraphError::BadCsv {
                what: "degrees",
                line: 0,
                message: "edge endpoints missing from the degree table".into(),
            });
        }
        Ok(g)
    }
}

fn read_u64_rows<R: BufRead>(r: R, what: &'static str, width: usize) -> Result<Vec<Vec<u64>>, GraphError> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let row: Vec<u64> = line
            .split(',')
            .map(|f| f.trim().parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GraphError::BadCsv { what, line: i + 1, message: e.to_string() })?;
        if row.len() != width {
            return Err(GraphError::BadCsv { what, line: i + 1, message: format!("expected {width} fields") });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Builds the snapshot for `week` from a record stream and the cluster
/// state after that week. Users are resolved against `state`.
pub fn build_snapshot(
    txs: &[TxRecord],
    state: &ClusterState,
    week: u64,
    mode: Mode,
) -> Result<UserGraphSnapshot, GraphError> {
    let mut links = WeekLinks::new(week);
    for tx in txs.iter().filter(|t| mode.covers(week, t.week)) {
        links.push(tx, state)?;
    }
    Ok(UserGraphSnapshot::from_links(week, [&links], &state.canonical_map()))
}

/// Number of nodes with `in_deg + out_deg > k`.
pub fn degree_filter_count(g: &UserGraphSnapshot, k: u32) -> usize {
    (0..g.n_nodes() as u32).filter(|&i| g.in_degree(i) + g.out_degree(i) > k).count()
}

/// Transaction counts per (#inputs, #outputs) shape. Coinbase counts as other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PatternHistogram {
    counts: [u64; 4],
}

impl PatternHistogram {
    pub fn add(&mut self, tx: &TxRecord) {
        self.counts[Pattern::of_tx(tx) as usize] += 1;
    }

    pub fn count(&self, p: Pattern) -> u64 {
        self.counts[p as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn share(&self, p: Pattern) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.count(p) as f64 / t as f64,
        }
    }
}

pub fn pattern_histogram(txs: &[TxRecord]) -> PatternHistogram {
    let mut h = PatternHistogram::default();
    for tx in txs {
        h.add(tx);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Amount, TxIo};

    fn tx(id: &str, inputs: &[(&str, f64)], outputs: &[(&str, f64)]) -> TxRecord {
        let io = |&(a, v): &(&str, f64)| TxIo::new(a, Amount::from_btc(v).unwrap());
        TxRecord {
            txid: id.into(),
            height: 0,
            week: 0,
            inputs: inputs.iter().map(io).collect(),
            outputs: outputs.iter().map(io).collect(),
        }
    }

    fn worked_example() -> Vec<TxRecord> {
        vec![
            tx("T1", &[("A", 5.0)], &[("B", 4.0), ("C", 1.0)]),
            tx("T2", &[("B", 3.0)], &[("D", 2.5), ("E", 0.5)]),
            tx("T3", &[("C", 1.0), ("D", 2.5)], &[("F", 2.4), ("G", 1.1)]),
        ]
    }

    fn clustered(txs: &[TxRecord]) -> ClusterState {
        let mut s = ClusterState::new();
        txs.iter().for_each(|t| {
            s.apply_transaction(t);
        });
        s
    }

    #[test]
    fn worked_snapshot() {
        let txs = worked_example();
        let s = clustered(&txs);
        let g = build_snapshot(&txs, &s, 0, Mode::Cumulative).unwrap();
        let (u1, u2, u4) = (s.find_user("A").unwrap(), s.find_user("B").unwrap(), s.find_user("F").unwrap());
        assert_eq!(g.nodes(), &[u1, u2, u4]);
        let mut edges: Vec<_> = g.edges().collect();
        edges.sort();
        assert_eq!(edges, vec![(u1, u2), (u1, u4), (u2, u1)]);
        assert_eq!(degree_filter_count(&g, 2), 1);
        assert_eq!(degree_filter_count(&g, 0), 3);
    }

    #[test]
    fn empty_and_coinbase_only() {
        let s = ClusterState::new();
        assert!(build_snapshot(&[], &s, 0, Mode::Cumulative).unwrap().is_empty());
        let cb = vec![tx("CB", &[], &[("X", 50.0)])];
        let s = clustered(&cb);
        let g = build_snapshot(&cb, &s, 0, Mode::Cumulative).unwrap();
        assert_eq!((g.n_nodes(), g.n_edges()), (1, 0));
        assert_eq!(degree_filter_count(&UserGraphSnapshot::empty(0), 2), 0);
    }

    #[test]
    fn unknown_address_is_an_error() {
        let txs = worked_example();
        let s = clustered(&txs[..1]);
        assert!(matches!(build_snapshot(&txs, &s, 0, Mode::Cumulative), Err(GraphError::UnknownAddress(_))));
    }

    #[test]
    fn weekly_mode_filters() {
        let mut txs = worked_example();
        txs[2].week = 1;
        let s = clustered(&txs);
        let g = build_snapshot(&txs, &s, 1, Mode::Weekly).unwrap();
        // Only T3: U1 -> U4, with G as change.
        assert_eq!(g.n_nodes(), 2);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(build_snapshot(&txs, &s, 1, Mode::Cumulative).unwrap().n_edges(), 3);
    }

    #[test]
    fn histogram() {
        let h = pattern_histogram(&worked_example());
        assert_eq!(h.count(Pattern::OneTwo), 2);
        assert_eq!(h.count(Pattern::Other), 1);
        assert_eq!(h.total(), 3);
        assert_eq!(pattern_histogram(&[]).total(), 0);
    }

    #[test]
    fn csv_round_trip_keeps_isolated_nodes() {
        let g = UserGraphSnapshot::from_user_edges(
            4,
            vec![UserId(9)],
            vec![(UserId(1), UserId(2)), (UserId(2), UserId(1)), (UserId(1), UserId(1))],
        );
        assert_eq!(g.n_edges(), 2);
        let (mut e, mut d) = (Vec::new(), Vec::new());
        g.write_edges_csv(&mut e).unwrap();
        g.write_degrees_csv(&mut d).unwrap();
        assert_eq!(UserGraphSnapshot::read_csv(e.as_slice(), d.as_slice()).unwrap(), g);
        assert_eq!(g.without_isolated().n_nodes(), 2);
    }
}
