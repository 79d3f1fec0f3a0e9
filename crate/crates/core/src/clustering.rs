//! Address clustering.
//!
//! Addresses are grouped into users with two rules:
//!
//! * multi-input: every input address of a transaction belongs to one user;
//! * change: when a transaction has at least one input and two or more
//!   outputs, the output with the strictly smallest value (earliest index on
//!   ties) is change and belongs to the sender.
//!
//! Clusters are merged whenever a rule links addresses already in different
//! clusters, so a provisional user can disappear into an older one. A user's
//! id is the smallest first-seen sequence number among its addresses, which
//! is stable across merges in the sense that it always names the oldest
//! member.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::ingest::TxRecord;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("unknown address {0:?}")]
    UnknownAddress(String),
    #[error("merge log line {line}: {message}")]
    BadMergeLog { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Canonical user id: the first-seen sequence number of the cluster's
/// oldest address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One cluster merge: `absorbed` ceased to exist and its addresses now
/// resolve to `survivor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEvent {
    pub week: u64,
    pub survivor: UserId,
    pub absorbed: UserId,
}

/// Index of the change output under the change rule, if any.
pub fn change_output(tx: &TxRecord) -> Option<usize> {
    if tx.inputs.is_empty() || tx.outputs.len() < 2 {
        return None;
    }
    // min_by_key keeps the first minimum, which is the tie-break we want.
    tx.outputs.iter().enumerate().min_by_key(|(_, o)| o.value).map(|(i, _)| i)
}

/// Incremental union-find over addresses.
///
/// Address indices are dense and assigned in first-seen order, so an index
/// doubles as the address's first-seen sequence number.
#[derive(Debug, Clone, Default)]
pub struct ClusterState {
    addr_index: HashMap<String, u32>,
    addresses: Vec<String>,
    parent: Vec<u32>,
    rank: Vec<u8>,
    /// Smallest member index; meaningful at roots only.
    min_member: Vec<u32>,
    merge_log: Vec<MergeEvent>,
}

impl ClusterState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a state from its address registration order and merge log.
    pub fn replay<I, S>(addresses: I, merges: &[MergeEvent]) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut state = ClusterState::new();
        for a in addresses {
            state.register(a.into());
        }
        for m in merges {
            state.apply_merge(m);
        }
        state
    }

    /// Applies a logged merge. Both ids must refer to registered addresses.
    pub fn apply_merge(&mut self, m: &MergeEvent) {
        self.union(m.survivor.0, m.absorbed.0, m.week);
    }

    pub fn n_addresses(&self) -> usize {
        self.addresses.len()
    }

    pub fn address(&self, index: u32) -> &str {
        &self.addresses[index as usize]
    }

    /// Addresses in registration order, starting at `from`.
    pub fn addresses_from(&self, from: usize) -> &[String] {
        &self.addresses[from..]
    }

    pub fn index_of(&self, address: &str) -> Option<u32> {
        self.addr_index.get(address).copied()
    }

    pub fn merge_log(&self) -> &[MergeEvent] {
        &self.merge_log
    }

    /// Number of live users (clusters).
    pub fn n_users(&self) -> usize {
        (0..self.parent.len()).filter(|&i| self.parent[i] == i as u32).count()
    }

    /// Registers an address if unseen; returns its index either way.
    pub fn register(&mut self, address: String) -> u32 {
        if let Some(&i) = self.addr_index.get(&address) {
            return i;
        }
        let i = self.addresses.len() as u32;
        self.addr_index.insert(address.clone(), i);
        self.addresses.push(address);
        self.parent.push(i);
        self.rank.push(0);
        self.min_member.push(i);
        i
    }

    fn register_ref(&mut self, address: &str) -> u32 {
        match self.addr_index.get(address) {
            Some(&i) => i,
            None => self.register(address.to_string()),
        }
    }

    /// Root lookup with path halving.
    fn find_mut(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grandparent = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grandparent;
            x = grandparent;
        }
        x
    }

    /// Root lookup without mutation, safe for concurrent readers.
    fn find(&self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            x = self.parent[x as usize];
        }
        x
    }

    /// Union by rank. Returns true if two clusters were merged.
    fn union(&mut self, a: u32, b: u32, week: u64) -> bool {
        let (ra, rb) = (self.find_mut(a), self.find_mut(b));
        if ra == rb {
            return false;
        }
        let (ida, idb) = (self.min_member[ra as usize], self.min_member[rb as usize]);
        let (root, child) = match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Less => (rb, ra),
            std::cmp::Ordering::Greater => (ra, rb),
            std::cmp::Ordering::Equal => {
                self.rank[ra as usize] += 1;
                (ra, rb)
            }
        };
        self.parent[child as usize] = root;
        self.min_member[root as usize] = ida.min(idb);
        self.merge_log.push(MergeEvent { week, survivor: UserId(ida.min(idb)), absorbed: UserId(ida.max(idb)) });
        true
    }

    /// Absorbs one transaction: registers its addresses and applies the
    /// multi-input and change rules. Returns the change output index, if one
    /// was inferred.
    pub fn apply_transaction(&mut self, tx: &TxRecord) -> Option<usize> {
        let inputs: Vec<u32> = tx.inputs.iter().map(|io| self.register_ref(&io.address)).collect();
        let outputs: Vec<u32> = tx.outputs.iter().map(|io| self.register_ref(&io.address)).collect();
        let (&first, rest) = inputs.split_first()?;
        for &other in rest {
            self.union(first, other, tx.week);
        }
        let change = change_output(tx);
        if let Some(c) = change {
            self.union(first, outputs[c], tx.week);
        }
        change
    }

    pub fn find_user(&self, address: &str) -> Result<UserId, ClusterError> {
        self.index_of(address)
            .map(|i| self.user_of_index(i))
            .ok_or_else(|| ClusterError::UnknownAddress(address.to_string()))
    }

    pub fn user_of_index(&self, index: u32) -> UserId {
        UserId(self.min_member[self.find(index) as usize])
    }

    /// `map[i]` is the user id of address index `i`.
    pub fn canonical_map(&self) -> Vec<u32> {
        let n = self.parent.len();
        let mut root = vec![u32::MAX; n];
        for i in 0..n {
            if root[i] != u32::MAX {
                continue;
            }
            let r = self.find(i as u32);
            // Fill the whole path so later lookups stop early.
            let mut x = i as u32;
            while root[x as usize] == u32::MAX && x != r {
                root[x as usize] = r;
                x = self.parent[x as usize];
            }
            root[r as usize] = r;
        }
        root.into_iter().map(|r| self.min_member[r as usize]).collect()
    }

    /// Users ordered by id, each with its addresses in lexicographic order.
    pub fn snapshot_partition(&self) -> BTreeMap<UserId, Vec<String>> {
        let mut out: BTreeMap<UserId, Vec<String>> = BTreeMap::new();
        for (i, user) in self.canonical_map().into_iter().enumerate() {
            out.entry(UserId(user)).or_default().push(self.addresses[i].clone());
        }
        for addrs in out.values_mut() {
            addrs.sort_unstable();
        }
        out
    }

    /// CSV `user_id,address`, in [`snapshot_partition`](Self::snapshot_partition) order.
    pub fn write_partition_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "user_id,address")?;
        for (user, addrs) in self.snapshot_partition() {
            for a in addrs {
                writeln!(w, "{user},{a}")?;
            }
        }
        Ok(())
    }
}

/// CSV `week,survivor,absorbed`.
pub fn write_merge_log_csv<W: Write>(mut w: W, merges: &[MergeEvent]) -> io::Result<()> {
    writeln!(w, "week,survivor,absorbed")?;
    for m in merges {
        writeln!(w, "{},{},{}", m.week, m.survivor, m.absorbed)?;
    }
    Ok(())
}

pub fn read_merge_log_csv<R: BufRead>(r: R) -> Result<Vec<MergeEvent>, ClusterError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |message: &str| ClusterError::BadMergeLog { line: i + 1, message: message.to_string() };
        let fields: Vec<&str> = line.split(',').collect();
        let [week, survivor, absorbed] = fields.as_slice() else {
            return Err(bad("expected 3 fields"));
        };
        let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| bad("non-integer field"));
        out.push(MergeEvent {
            week: parse(week)?,
            survivor: UserId(parse(survivor)? as u32),
            absorbed: UserId(parse(absorbed)? as u32),
        });
    }
    Ok(out)
}
