//! Weakly and strongly connected components.
//!
//! Both traversals keep their work stacks on the heap, so graph depth never
//! touches the call stack.

use std::io::{self, Write};

use thiserror::Error;

use crate::clustering::UserId;
use crate::graph::UserGraphSnapshot;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComponentError {
    #[error("component statistics are undefined on an empty graph")]
    EmptyGraph,
}

const UNVISITED: u32 = u32::MAX;

/// Component label per node position, and the number of components.
/// Labels follow discovery order.
pub fn wcc_labels(g: &UserGraphSnapshot) -> (Vec<u32>, usize) {
    let n = g.n_nodes();
    let mut label = vec![UNVISITED; n];
    let mut queue: Vec<u32> = Vec::new();
    let mut count = 0u32;
    for root in 0..n as u32 {
        if label[root as usize] != UNVISITED {
            continue;
        }
        label[root as usize] = count;
        queue.push(root);
        while let Some(v) = queue.pop() {
            for &w in g.out_neighbors(v).iter().chain(g.in_neighbors(v)) {
                if label[w as usize] == UNVISITED {
                    label[w as usize] = count;
                    queue.push(w);
                }
            }
        }
        count += 1;
    }
    (label, count as usize)
}

/// Tarjan's algorithm with an explicit call stack. Labels are assigned in
/// the order components complete, which is a reverse topological order of
/// the condensation.
pub fn scc_labels(g: &UserGraphSnapshot) -> (Vec<u32>, usize) {
    let n = g.n_nodes();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0u32; n];
    let mut label = vec![UNVISITED; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<u32> = Vec::new();
    let mut frames: Vec<(u32, usize)> = Vec::new();
    let mut next_index = 0u32;
    let mut count = 0u32;

    for root in 0..n as u32 {
        if index[root as usize] != UNVISITED {
            continue;
        }
        index[root as usize] = next_index;
        low[root as usize] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root as usize] = true;
        frames.push((root, 0));

        while let Some(frame) = frames.last_mut() {
            let v = frame.0;
            let neighbors = g.out_neighbors(v);
            if frame.1 < neighbors.len() {
                let w = neighbors[frame.1];
                frame.1 += 1;
                if index[w as usize] == UNVISITED {
                    index[w as usize] = next_index;
                    low[w as usize] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w as usize] = true;
                    frames.push((w, 0));
                } else if on_stack[w as usize] {
                    low[v as usize] = low[v as usize].min(index[w as usize]);
                }
                continue;
            }
            frames.pop();
            if let Some(&(parent, _)) = frames.last() {
                low[parent as usize] = low[parent as usize].min(low[v as usize]);
            }
            if low[v as usize] == index[v as usize] {
                loop {
                    let w = stack.pop().expect("v is still on the stack");
                    on_stack[w as usize] = false;
                    label[w as usize] = count;
                    if w == v {
                        break;
                    }
                }
                count += 1;
            }
        }
    }
    (label, count as usize)
}

/// Component sizes, largest first.
fn sizes_desc(labels: &[u32], count: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; count];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

fn grouped(g: &UserGraphSnapshot, labels: &[u32], count: usize) -> Vec<Vec<UserId>> {
    let mut groups = vec![Vec::new(); count];
    // Positions ascend with user id, so every group comes out sorted.
    for (i, &l) in labels.iter().enumerate() {
        groups[l as usize].push(g.node(i as u32));
    }
    groups.sort_by(|a: &Vec<UserId>, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    groups
}

/// Weakly connected components, largest first, ties by smallest member.
pub fn wcc(g: &UserGraphSnapshot) -> Vec<Vec<UserId>> {
    let (labels, count) = wcc_labels(g);
    grouped(g, &labels, count)
}

/// Strongly connected components, largest first, ties by smallest member.
pub fn scc(g: &UserGraphSnapshot) -> Vec<Vec<UserId>> {
    let (labels, count) = scc_labels(g);
    grouped(g, &labels, count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentStats {
    pub week: u64,
    pub n_wcc: usize,
    pub n_scc: usize,
    pub lwcc_size: usize,
    pub lscc_size: usize,
    pub second_wcc_size: usize,
    pub second_scc_size: usize,
    pub n_nodes: usize,
}

impl ComponentStats {
    pub fn lwcc_relative(&self) -> f64 {
        self.lwcc_size as f64 / self.n_nodes as f64
    }

    pub fn lscc_relative(&self) -> f64 {
        self.lscc_size as f64 / self.n_nodes as f64
    }

    /// Largest over second-largest WCC; `None` when there is no second.
    pub fn wcc_ratio(&self) -> Option<f64> {
        (self.second_wcc_size > 0).then(|| self.lwcc_size as f64 / self.second_wcc_size as f64)
    }

    pub fn scc_ratio(&self) -> Option<f64> {
        (self.second_scc_size > 0).then(|| self.lscc_size as f64 / self.second_scc_size as f64)
    }

    /// Components other than the largest one.
    pub fn wcc_outside_largest(&self) -> usize {
        self.n_wcc - 1
    }

    pub fn scc_outside_largest(&self) -> usize {
        self.n_scc - 1
    }

    pub const CSV_HEADER: &'static str = "week,n_wcc,n_scc,lwcc,lscc,wcc2,scc2,n_nodes";

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.week,
            self.n_wcc,
            self.n_scc,
            self.lwcc_size,
            self.lscc_size,
            self.second_wcc_size,
            self.second_scc_size,
            self.n_nodes
        )
    }
}

pub fn component_stats(g: &UserGraphSnapshot) -> Result<ComponentStats, ComponentError> {
    if g.is_empty() {
        return Err(ComponentError::EmptyGraph);
    }
    let (wl, wn) = wcc_labels(g);
    let (sl, sn) = scc_labels(g);
    let ws = sizes_desc(&wl, wn);
    let ss = sizes_desc(&sl, sn);
    Ok(ComponentStats {
        week: g.week(),
        n_wcc: wn,
        n_scc: sn,
        lwcc_size: ws[0],
        lscc_size: ss[0],
        second_wcc_size: ws.get(1).copied().unwrap_or(0),
        second_scc_size: ss.get(1).copied().unwrap_or(0),
        n_nodes: g.n_nodes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: u32, edges: &[(u32, u32)]) -> UserGraphSnapshot {
        UserGraphSnapshot::from_user_edges(
            0,
            (0..n).map(UserId).collect(),
            edges.iter().map(|&(s, t)| (UserId(s), UserId(t))).collect(),
        )
    }

    fn ids(groups: Vec<Vec<UserId>>) -> Vec<Vec<u32>> {
        groups.into_iter().map(|g| g.into_iter().map(|u| u.0).collect()).collect()
    }

    #[test]
    fn worked_graph() {
        // U1=0, U2=1, U4=5 as assigned by first-seen order.
        let g = UserGraphSnapshot::from_user_edges(
            0,
            vec![],
            vec![(UserId(0), UserId(1)), (UserId(1), UserId(0)), (UserId(0), UserId(5))],
        );
        assert_eq!(ids(wcc(&g)), vec![vec![0, 1, 5]]);
        assert_eq!(ids(scc(&g)), vec![vec![0, 1], vec![5]]);
        let s = component_stats(&g).unwrap();
        assert_eq!((s.n_wcc, s.lwcc_size, s.second_wcc_size), (1, 3, 0));
        assert_eq!((s.n_scc, s.lscc_size, s.second_scc_size), (2, 2, 1));
        assert_eq!(s.wcc_ratio(), None);
        assert_eq!(s.scc_ratio(), Some(2.0));
    }

    #[test]
    fn small_cases() {
        assert_eq!(wcc(&graph(5, &[])).len(), 5);
        let two_cycles = graph(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
        assert_eq!(ids(wcc(&two_cycles)), vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert_eq!(ids(scc(&graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]))), vec![vec![0, 1, 2, 3]]);
        let s = component_stats(&graph(4, &[(0, 1), (2, 3)])).unwrap();
        assert_eq!((s.n_wcc, s.lwcc_size, s.second_wcc_size), (2, 2, 2));
        assert_eq!(s.wcc_ratio(), Some(1.0));
        assert!((0.0..=1.0).contains(&s.lwcc_relative()));
    }

    #[test]
    fn empty_graph_has_no_stats() {
        assert_eq!(component_stats(&UserGraphSnapshot::empty(0)), Err(ComponentError::EmptyGraph));
    }

    #[test]
    fn long_path_does_not_overflow_the_stack() {
        let n = 1_000_000u32;
        let edges: Vec<(u32, u32)> = (0..n - 1).map(|i| (i, i + 1)).chain([(n - 1, 0)]).collect();
        let g = graph(n, &edges);
        assert_eq!(scc_labels(&g).1, 1);
        assert_eq!(wcc_labels(&g).1, 1);
    }
}
