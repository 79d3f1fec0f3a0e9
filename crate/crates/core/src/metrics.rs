//! Degree assortativity, PageRank, HITS and Gini inequality on user graphs.
//!
//! All routines are sequential with a fixed summation order, so results are
//! bitwise reproducible for a given snapshot.

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::clustering::UserId;
use crate::graph::{degree_filter_count, UserGraphSnapshot};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric is undefined on an empty graph")]
    EmptyGraph,
    #[error("assortativity needs at least 2 edges, graph has {0}")]
    TooFewEdges(usize),
    #[error("gini is undefined on an empty sample")]
    EmptySample,
    #[error("gini is undefined when every value is zero")]
    ZeroMean,
    #[error("gini needs finite non-negative values, got {0}")]
    InvalidValue(f64),
    #[error("damping factor {0} is outside (0, 1)")]
    InvalidDamping(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeKind {
    In,
    Out,
}

fn degree(g: &UserGraphSnapshot, kind: DegreeKind, i: u32) -> u32 {
    match kind {
        DegreeKind::In => g.in_degree(i),
        DegreeKind::Out => g.out_degree(i),
    }
}

/// Pearson correlation over directed edges `(u, v)` between the `src`
/// degree of `u` and the `dst` degree of `v`, using raw degrees. `None` when
/// either side has zero variance.
pub fn assortativity(
    g: &UserGraphSnapshot,
    src: DegreeKind,
    dst: DegreeKind,
) -> Result<Option<f64>, MetricsError> {
    let m = g.n_edges();
    if m < 2 {
        return Err(MetricsError::TooFewEdges(m));
    }
    let pairs = || g.dense_edges().map(|(s, t)| (degree(g, src, s), degree(g, dst, t)));

    let (mut xmin, mut xmax, mut ymin, mut ymax) = (u32::MAX, 0, u32::MAX, 0);
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (x, y) in pairs() {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
        sx += x as f64;
        sy += y as f64;
    }
    // Degrees are integers, so constancy is decided exactly.
    if xmin == xmax || ymin == ymax {
        return Ok(None);
    }
    let (mx, my) = (sx / m as f64, sy / m as f64);
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in pairs() {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AssortativityQuad {
    pub r_out_out: Option<f64>,
    pub r_out_in: Option<f64>,
    pub r_in_out: Option<f64>,
    pub r_in_in: Option<f64>,
}

/// All four directed coefficients; every entry is `None` below two edges.
pub fn assortativity_quad(g: &UserGraphSnapshot) -> AssortativityQuad {
    use DegreeKind::{In, Out};
    let r = |s, d| assortativity(g, s, d).ok().flatten();
    AssortativityQuad { r_out_out: r(Out, Out), r_out_in: r(Out, In), r_in_out: r(In, Out), r_in_in: r(In, In) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralityKind {
    PageRank,
    HitsAuthority,
    HitsHub,
}

impl fmt::Display for CentralityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CentralityKind::PageRank => "pagerank",
            CentralityKind::HitsAuthority => "hits_authority",
            CentralityKind::HitsHub => "hits_hub",
        })
    }
}

/// Scores aligned with the snapshot's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralityVector {
    pub week: u64,
    pub kind: CentralityKind,
    pub users: Vec<UserId>,
    pub values: Vec<f64>,
}

impl CentralityVector {
    fn new(g: &UserGraphSnapshot, kind: CentralityKind, values: Vec<f64>) -> Self {
        CentralityVector { week: g.week(), kind, users: g.nodes().to_vec(), values }
    }

    pub fn get(&self, user: UserId) -> Option<f64> {
        self.users.binary_search(&user).ok().map(|i| self.values[i])
    }

    /// The `c` highest scores, ties broken by smaller user id.
    pub fn top(&self, c: usize) -> Vec<(UserId, f64)> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(self.users[a].cmp(&self.users[b])));
        order.into_iter().take(c).map(|i| (self.users[i], self.values[i])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankConfig {
    pub damping: f64,
    /// Stop once the L1 change between iterations drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        PageRankConfig { damping: 0.85, tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRankOutcome {
    pub scores: CentralityVector,
    pub iterations: usize,
    pub termination: Termination,
}

pub fn pagerank(g: &UserGraphSnapshot, config: &PageRankConfig) -> Result<PageRankOutcome, MetricsError> {
    pagerank_observed(g, config, |_, _| {})
}

/// Power iteration on
/// `PR(i) = (1-d)/N + d * (sum over in-neighbours j of PR(j)/L(j) + D/N)`
/// where `D` is the total score held by dangling nodes, spread uniformly so
/// that the vector stays a probability distribution. `observe` sees the
/// vector after every iteration.
pub fn pagerank_observed(
    g: &UserGraphSnapshot,
    config: &PageRankConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<PageRankOutcome, MetricsError> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(MetricsError::EmptyGraph);
    }
    let d = config.damping;
    if !(d > 0.0 && d < 1.0) {
        return Err(MetricsError::InvalidDamping(d));
    }
    let nf = n as f64;
    let inv_out: Vec<f64> = (0..n as u32)
        .map(|i| match g.out_degree(i) {
            0 => 0.0,
            k => 1.0 / k as f64,
        })
        .collect();
    let dangling: Vec<u32> = (0..n as u32).filter(|&i| g.out_degree(i) == 0).collect();

    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < config.max_iter {
        let dangling_mass: f64 = dangling.iter().map(|&i| rank[i as usize]).sum();
        let base = (1.0 - d) / nf + d * dangling_mass / nf;
        for (i, slot) in next.iter_mut().enumerate() {
            let inflow: f64 = g.in_neighbors(i as u32).iter().map(|&j| rank[j as usize] * inv_out[j as usize]).sum();
            *slot = base + d * inflow;
        }
        let delta: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        iterations += 1;
        observe(iterations, &rank);
        if delta < config.tol {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(PageRankOutcome { scores: CentralityVector::new(g, CentralityKind::PageRank, rank), iterations, termination })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitsConfig {
    pub iterations: usize,
    /// Early exit once both vectors move less than this (L1); off by default.
    pub tol: Option<f64>,
    /// Value every entry of the starting authority and hub vectors takes.
    pub initial: f64,
}

impl Default for HitsConfig {
    fn default() -> Self {
        HitsConfig { iterations: 20, tol: None, initial: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitsOutcome {
    pub authorities: CentralityVector,
    pub hubs: CentralityVector,
    pub iterations: usize,
    /// Set when an update produced an all-zero vector (no edges); both
    /// vectors are then uniform.
    pub degenerate: bool,
}

fn normalize_l2(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Kleinberg's iteration: each round sets every authority score to the sum
/// of its in-neighbours' hub scores, normalizes, then sets every hub score to
/// the sum of its out-neighbours' new authority scores and normalizes.
pub fn hits(g: &UserGraphSnapshot, config: &HitsConfig) -> Result<HitsOutcome, MetricsError> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(MetricsError::EmptyGraph);
    }
    let mut auth = vec![config.initial; n];
    let mut hub = vec![config.initial; n];
    let mut new_auth = vec![0.0; n];
    let mut new_hub = vec![0.0; n];
    let mut iterations = 0;
    let mut degenerate = false;
    while iterations < config.iterations {
        for (p, slot) in new_auth.iter_mut().enumerate() {
            *slot = g.in_neighbors(p as u32).iter().map(|&q| hub[q as usize]).sum();
        }
        if !normalize_l2(&mut new_auth) {
            degenerate = true;
            break;
        }
        for (p, slot) in new_hub.iter_mut().enumerate() {
            *slot = g.out_neighbors(p as u32).iter().map(|&q| new_auth[q as usize]).sum();
        }
        if !normalize_l2(&mut new_hub) {
            degenerate = true;
            break;
        }
        let moved: f64 = auth.iter().zip(&new_auth).chain(hub.iter().zip(&new_hub)).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut auth, &mut new_auth);
        std::mem::swap(&mut hub, &mut new_hub);
        iterations += 1;
        if config.tol.is_some_and(|t| moved < t) {
            break;
        }
    }
    if degenerate || iterations == 0 {
        let u = 1.0 / (n as f64).sqrt();
        auth = vec![u; n];
        hub = vec![u; n];
    }
    Ok(HitsOutcome {
        authorities: CentralityVector::new(g, CentralityKind::HitsAuthority, auth),
        hubs: CentralityVector::new(g, CentralityKind::HitsHub, hub),
        iterations,
        degenerate,
    })
}

/// Gini coefficient `sum_i sum_j |x_i - x_j| / (2 n^2 mean)`, evaluated
/// through the sorted identity `sum_i (2i - n - 1) x_(i) / (n sum x)`.
pub fn gini(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(MetricsError::InvalidValue(bad));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted.iter().enumerate().map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x).sum();
    Ok(weighted / (n * total))
}

/// Which nodes the PageRank Gini is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GiniScope {
    #[default]
    All,
    /// Only nodes whose total degree exceeds the filter threshold.
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub pagerank: PageRankConfig,
    pub hits: HitsConfig,
    pub top_c: usize,
    /// Nodes with total degree above this count as filtered (active) nodes.
    pub filter_degree: u32,
    pub gini_scope: GiniScope,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            pagerank: PageRankConfig::default(),
            hits: HitsConfig::default(),
            top_c: 10,
            filter_degree: 2,
            gini_scope: GiniScope::All,
        }
    }
}

/// One week of the metric suite. `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricRow {
    pub week: u64,
    pub assortativity: AssortativityQuad,
    pub pr_gini: Option<f64>,
    pub hits_auth_gini: Option<f64>,
    pub hits_hub_gini: Option<f64>,
    pub filtered_nodes: usize,
    pub total_nodes: usize,
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "NA".to_string(),
    }
}

impl MetricRow {
    pub const CSV_HEADER: &'static str =
        "week,r_out_out,r_out_in,r_in_out,r_in_in,pr_gini,hits_auth_gini,hits_hub_gini,filtered_nodes,total_nodes";

    pub fn empty(week: u64) -> Self {
        MetricRow { week, ..Default::default() }
    }

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> io::Result<()> {
        let a = &self.assortativity;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            self.week,
            opt(a.r_out_out),
            opt(a.r_out_in),
            opt(a.r_in_out),
            opt(a.r_in_in),
            opt(self.pr_gini),
            opt(self.hits_auth_gini),
            opt(self.hits_hub_gini),
            self.filtered_nodes,
            self.total_nodes
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopEntry {
    pub week: u64,
    pub kind: CentralityKind,
    pub rank: usize,
    pub user: UserId,
    pub score: f64,
}

impl TopEntry {
    pub const CSV_HEADER: &'static str = "week,kind,rank,user_id,score";

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{},{},{},{},{}", self.week, self.kind, self.rank, self.user, self.score)
    }
}

/// Runs the full suite on one snapshot. An empty snapshot yields a row of
/// undefined values and no top entries.
pub fn metric_row(g: &UserGraphSnapshot, config: &MetricsConfig) -> Result<(MetricRow, Vec<TopEntry>), MetricsError> {
    if g.is_empty() {
        return Ok((MetricRow::empty(g.week()), Vec::new()));
    }
    let pr = pagerank(g, &config.pagerank)?;
    let h = hits(g, &config.hits)?;
    let pr_values: Vec<f64> = match config.gini_scope {
        GiniScope::All => pr.scores.values.clone(),
        GiniScope::Filtered => (0..g.n_nodes() as u32)
            .filter(|&i| g.in_degree(i) + g.out_degree(i) > config.filter_degree)
            .map(|i| pr.scores.values[i as usize])
            .collect(),
    };
    let row = MetricRow {
        week: g.week(),
        assortativity: assortativity_quad(g),
        pr_gini: gini(&pr_values).ok(),
        hits_auth_gini: gini(&h.authorities.values).ok(),
        hits_hub_gini: gini(&h.hubs.values).ok(),
        filtered_nodes: degree_filter_count(g, config.filter_degree),
        total_nodes: g.n_nodes(),
    };
    let mut top = Vec::new();
    for v in [&pr.scores, &h.authorities, &h.hubs] {
        for (rank, (user, score)) in v.top(config.top_c).into_iter().enumerate() {
            top.push(TopEntry { week: g.week(), kind: v.kind, rank: rank + 1, user, score });
        }
    }
    Ok((row, top))
}
