//! Fixtures and independent reference implementations shared by the
//! integration tests. Every oracle here is deliberately naive.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use bunforge::clustering::UserId;
use bunforge::graph::UserGraphSnapshot;
use bunforge::ingest::{parse_record, TxRecord, WeekMapping};
use rand::Rng;

pub const WORKED_JSONL: &str = concat!(
    r#"{"txid":"T1","height":0,"week":0,"inputs":[["A",5]],"outputs":[["B",4],["C",1]]}"#,
    "\n",
    r#"{"txid":"T2","height":0,"week":0,"inputs":[["B",3]],"outputs":[["D",2.5],["E",0.5]]}"#,
    "\n",
    r#"{"txid":"T3","height":0,"week":0,"inputs":[["C",1],["D",2.5]],"outputs":[["F",2.4],["G",1.1]]}"#,
    "\n",
);

pub fn worked_example() -> Vec<TxRecord> {
    WORKED_JSONL
        .lines()
        .enumerate()
        .map(|(i, l)| parse_record(l, i + 1, &WeekMapping::default()).unwrap())
        .collect()
}

pub fn random_edges(rng: &mut impl Rng, n: u32, p: f64) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.gen_bool(p) {
                edges.push((s, t));
            }
        }
    }
    edges
}

pub fn snapshot(n: u32, edges: &[(u32, u32)]) -> UserGraphSnapshot {
    UserGraphSnapshot::from_user_edges(
        0,
        (0..n).map(UserId).collect(),
        edges.iter().map(|&(s, t)| (UserId(s), UserId(t))).collect(),
    )
}

/// Reflexive-transitive closure by Floyd–Warshall.
pub fn reachability(n: usize, edges: &[(u32, u32)]) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(s, t) in edges {
        r[s as usize][t as usize] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if r[i][k] {
                for j in 0..n {
                    if r[k][j] {
                        r[i][j] = true;
                    }
                }
            }
        }
    }
    r
}

/// Groups nodes by an equivalence relation given as a predicate.
fn classes(n: usize, same: impl Fn(usize, usize) -> bool) -> BTreeSet<Vec<u32>> {
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let class: Vec<u32> = (0..n).filter(|&j| same(i, j)).map(|j| j as u32).collect();
        for &j in &class {
            seen[j as usize] = true;
        }
        out.insert(class);
    }
    out
}

pub fn scc_oracle(n: usize, edges: &[(u32, u32)]) -> BTreeSet<Vec<u32>> {
    let r = reachability(n, edges);
    classes(n, |i, j| r[i][j] && r[j][i])
}

pub fn wcc_oracle(n: usize, edges: &[(u32, u32)]) -> BTreeSet<Vec<u32>> {
    let undirected: Vec<(u32, u32)> = edges.iter().flat_map(|&(s, t)| [(s, t), (t, s)]).collect();
    let r = reachability(n, &undirected);
    classes(n, |i, j| r[i][j])
}

pub fn as_set(groups: Vec<Vec<UserId>>) -> BTreeSet<Vec<u32>> {
    groups.into_iter().map(|g| g.into_iter().map(|u| u.0).collect()).collect()
}

/// Dense column-stochastic transition matrix with uniform dangling columns.
fn transition(n: usize, edges: &[(u32, u32)]) -> Vec<Vec<f64>> {
    let mut out_deg = vec![0usize; n];
    for &(s, _) in edges {
        out_deg[s as usize] += 1;
    }
    let mut m = vec![vec![0.0; n]; n];
    for &(s, t) in edges {
        m[t as usize][s as usize] += 1.0 / out_deg[s as usize] as f64;
    }
    for (j, &deg) in out_deg.iter().enumerate() {
        if deg == 0 {
            for row in m.iter_mut() {
                row[j] = 1.0 / n as f64;
            }
        }
    }
    m
}

/// Dense power iteration `x ← d M x + (1-d)/n`, stopping on L1 change
/// below `tol`. Returns the final vector and every intermediate one.
pub fn pagerank_dense(n: usize, edges: &[(u32, u32)], d: f64, tol: f64, max_iter: usize) -> Vec<Vec<f64>> {
    let m = transition(n, edges);
    let mut x = vec![1.0 / n as f64; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let next: Vec<f64> =
            (0..n).map(|i| (1.0 - d) / n as f64 + d * (0..n).map(|j| m[i][j] * x[j]).sum::<f64>()).collect();
        let delta: f64 = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        history.push(x.clone());
        if delta < tol {
            break;
        }
    }
    history
}

/// Exact stationary vector by Gaussian elimination on `(I - dM) x = (1-d)/n`.
pub fn pagerank_solve(n: usize, edges: &[(u32, u32)], d: f64) -> Vec<f64> {
    let m = transition(n, edges);
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - d * m[i][j]).collect();
            row.push((1.0 - d) / n as f64);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// Dense HITS: `a ← Aᵀh`, normalize, `h ← A a`, normalize, `k` times.
pub fn hits_dense(n: usize, edges: &[(u32, u32)], k: usize, initial: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adj = vec![vec![0.0; n]; n];
    for &(s, t) in edges {
        adj[s as usize][t as usize] = 1.0;
    }
    let norm = |v: &mut Vec<f64>| {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s == 0.0 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= s);
        true
    };
    let mut a = vec![initial; n];
    let mut h = vec![initial; n];
    for _ in 0..k {
        a = (0..n).map(|p| (0..n).map(|q| adj[q][p] * h[q]).sum()).collect();
        if !norm(&mut a) {
            let u = 1.0 / (n as f64).sqrt();
            return (vec![u; n], vec![u; n]);
        }
        h = (0..n).map(|p| (0..n).map(|q| adj[p][q] * a[q]).sum()).collect();
        if !norm(&mut h) {
            let u = 1.0 / (n as f64).sqrt();
            return (vec![u; n], vec![u; n]);
        }
    }
    (a, h)
}

/// Mean absolute difference over all ordered pairs, over twice the mean.
pub fn gini_double_sum(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mut s = 0.0;
    for a in x {
        for b in x {
            s += (a - b).abs();
        }
    }
    s / (2.0 * n * n * mean)
}

/// Textbook Pearson correlation of explicit pairs; `None` on zero variance.
pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let vx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let vy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Degree-pair list of a deduplicated edge set, `(src degree, dst degree)`.
pub fn degree_pairs(n: usize, edges: &[(u32, u32)], src_out: bool, dst_out: bool) -> Vec<(f64, f64)> {
    let set: BTreeSet<(u32, u32)> = edges.iter().copied().filter(|(s, t)| s != t).collect();
    let mut indeg = vec![0u32; n];
    let mut outdeg = vec![0u32; n];
    for &(s, t) in &set {
        outdeg[s as usize] += 1;
        indeg[t as usize] += 1;
    }
    let deg = |v: u32, out: bool| if out { outdeg[v as usize] } else { indeg[v as usize] } as f64;
    set.iter().map(|&(s, t)| (deg(s, src_out), deg(t, dst_out))).collect()
}

/// Two-sided signed-rank p-value by enumerating every sign vector.
pub fn wilcoxon_enumerate(x_b: &[f64], x_a: &[f64]) -> f64 {
    let d: Vec<f64> = x_b.iter().zip(x_a).map(|(b, a)| b - a).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

/// Pairwise precision and recall by enumerating every address pair.
pub fn pair_scores(pred: &HashMap<String, u64>, truth: &HashMap<String, u64>) -> (f64, f64) {
    let keys: Vec<&String> = pred.keys().collect();
    let (mut both, mut p, mut t) = (0u64, 0u64, 0u64);
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let sp = pred[keys[i]] == pred[keys[j]];
            let st = truth[keys[i]] == truth[keys[j]];
            p += sp as u64;
            t += st as u64;
            both += (sp && st) as u64;
        }
    }
    let precision = if p == 0 { 1.0 } else { both as f64 / p as f64 };
    let recall = if t == 0 { 1.0 } else { both as f64 / t as f64 };
    (precision, recall)
}

/// Brute-force closure of the clustering constraints: inputs of a
/// transaction are linked together, and the change output to its first input.
pub fn constraint_closure(txs: &[TxRecord]) -> BTreeSet<BTreeSet<String>> {
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut add = |a: &str, order: &mut Vec<String>| -> usize {
        *index.entry(a.to_string()).or_insert_with(|| {
            order.push(a.to_string());
            order.len() - 1
        })
    };
    let mut links: Vec<(usize, usize)> = Vec::new();
    for tx in txs {
        let ins: Vec<usize> = tx.inputs.iter().map(|i| add(&i.address, &mut order)).collect();
        let outs: Vec<usize> = tx.outputs.iter().map(|o| add(&o.address, &mut order)).collect();
        for w in ins.windows(2) {
            links.push((w[0], w[1]));
        }
        if !ins.is_empty() && outs.len() >= 2 {
            let min = tx.outputs.iter().map(|o| o.value).min().unwrap();
            let change = tx.outputs.iter().position(|o| o.value == min).unwrap();
            links.push((ins[0], outs[change]));
        }
    }
    // Label propagation until nothing changes.
    let n = order.len();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &(a, b) in &links {
            let m = label[a].min(label[b]);
            if label[a] != m || label[b] != m {
                label[a] = m;
                label[b] = m;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: HashMap<usize, BTreeSet<String>> = HashMap::new();
    for (i, a) in order.iter().enumerate() {
        groups.entry(label[i]).or_default().insert(a.clone());
    }
    groups.into_values().collect()
}

/// A minimal HTTP/1.1 server on a loopback port. `handler` receives the
/// request line, headers and body, and returns a status and JSON body.
pub struct Stub {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<String>>>,
}

pub fn serve<F>(handler: F) -> Stub
where
    F: Fn(&str, &str, &str) -> (u16, String) + Send + Sync + 'static,
{
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = requests.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let mut headers = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                headers.push_str(&line);
            }
            let mut body = vec![0u8; length];
            let _ = reader.read_exact(&mut body);
            let body = String::from_utf8_lossy(&body).into_owned();
            log.lock().unwrap().push(format!("{}{}{}", request_line, headers, body));
            let (status, reply) = handler(request_line.trim(), &headers, &body);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    Stub { url, requests }
}
