//! Seeded synthetic transaction streams with a known address-to-entity map.
//!
//! Entities are the ground-truth owners of addresses. Each transaction picks
//! a sender entity (preferentially an already active one, which yields the
//! heavy-tailed hub structure seen on mainnet), spends from some of its
//! addresses, pays one or more recipient entities and usually returns change
//! to a sender address. The change output is the smallest output most of the
//! time, so the change heuristic is right often but not always.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Amount, Cursor, IngestError, Pattern, PatternMix, RecordSource, TxIo, TxRecord, WeekMapping};

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_tx: u64,
    pub mix: PatternMix,
    pub txs_per_block: u64,
    pub weeks: WeekMapping,
    /// Probability that a transaction with ≥ 2 outputs carries a change output.
    pub change_prob: f64,
    /// Probability that the change output is strictly the smallest one.
    pub change_smallest_prob: f64,
    /// Probability of paying to an address the recipient already owns.
    pub address_reuse_prob: f64,
    /// Probability that a sender or recipient is a brand-new entity.
    pub new_entity_prob: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_tx: u64, mix: PatternMix) -> Self {
        SyntheticConfig {
            seed,
            n_tx,
            mix,
            txs_per_block: 50,
            weeks: WeekMapping::default(),
            change_prob: 0.9,
            change_smallest_prob: 0.85,
            address_reuse_prob: 0.3,
            new_entity_prob: 0.1,
        }
    }
}

/// Builds a synthetic stream; `mix` must be a valid distribution.
pub fn generate_synthetic(seed: u64, n_tx: u64, mix: PatternMix) -> SyntheticSource {
    SyntheticSource::new(SyntheticConfig::new(seed, n_tx, mix))
}

#[derive(Default)]
struct Entity {
    addresses: Vec<u32>,
}

pub struct SyntheticSource {
    config: SyntheticConfig,
    rng: ChaCha8Rng,
    emitted: u64,
    entities: Vec<Entity>,
    /// One entry per involvement; sampling from it is preferential attachment.
    activity: Vec<u32>,
    /// `owner[a]` is the entity owning address `a`.
    owner: Vec<u32>,
    pattern_counts: [u64; 4],
    weighted: Vec<(Pattern, f64)>,
}

impl SyntheticSource {
    pub fn new(config: SyntheticConfig) -> Self {
        let weighted = config.mix.iter().filter(|(_, p)| *p > 0.0).collect();
        SyntheticSource {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            emitted: 0,
            entities: Vec::new(),
            activity: Vec::new(),
            owner: Vec::new(),
            pattern_counts: [0; 4],
            weighted,
        }
    }

    /// Reopens the stream so that the next record is the one at `cursor`.
    pub fn resume(config: SyntheticConfig, cursor: Cursor) -> Result<Self, IngestError> {
        let Cursor::Synthetic { emitted } = cursor else {
            return Err(IngestError::Invalid {
                line: 0,
                field: "cursor".into(),
                message: format!("{cursor:?} is not a synthetic cursor"),
            });
        };
        let mut src = SyntheticSource::new(config);
        while src.emitted < emitted.min(src.config.n_tx) {
            src.generate();
        }
        Ok(src)
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn address_name(index: u32) -> String {
        format!("a{index}")
    }

    /// Ground truth for every address emitted so far: address → entity id.
    pub fn truth(&self) -> HashMap<String, u64> {
        self.owner
            .iter()
            .enumerate()
            .map(|(a, &e)| (Self::address_name(a as u32), e as u64))
            .collect()
    }

    fn new_entity(&mut self) -> u32 {
        self.entities.push(Entity::default());
        (self.entities.len() - 1) as u32
    }

    fn pick_entity(&mut self, exclude: Option<u32>) -> u32 {
        let fresh = self.activity.is_empty() || self.rng.gen_bool(self.config.new_entity_prob);
        let id = if fresh {
            self.new_entity()
        } else if self.rng.gen_bool(0.7) {
            self.activity[self.rng.gen_range(0..self.activity.len())]
        } else {
            self.rng.gen_range(0..self.entities.len() as u32)
        };
        let id = if Some(id) == exclude { self.new_entity() } else { id };
        self.activity.push(id);
        id
    }

    fn new_address(&mut self, entity: u32) -> u32 {
        let a = self.owner.len() as u32;
        self.owner.push(entity);
        self.entities[entity as usize].addresses.push(a);
        a
    }

    fn receiving_address(&mut self, entity: u32, reuse_prob: f64) -> u32 {
        let owned = &self.entities[entity as usize].addresses;
        if !owned.is_empty() && self.rng.gen_bool(reuse_prob) {
            owned[self.rng.gen_range(0..owned.len())]
        } else {
            self.new_address(entity)
        }
    }

    /// Quota sampling: a pattern is eligible while its count is below
    /// `p * (i + 1) + 1`, which keeps every empirical share within
    /// `4 / n` of its target for any seed.
    fn next_pattern(&mut self) -> Pattern {
        let i = self.emitted as f64;
        let eligible: Vec<(Pattern, f64)> = self
            .weighted
            .iter()
            .copied()
            .filter(|(pat, p)| (self.pattern_counts[*pat as usize] as f64) < p * (i + 1.0) + 1.0)
            .collect();
        let total: f64 = eligible.iter().map(|(_, p)| p).sum();
        let mut u = self.rng.gen::<f64>() * total;
        let mut chosen = eligible[eligible.len() - 1].0;
        for (pat, p) in &eligible {
            if u < *p {
                chosen = *pat;
                break;
            }
            u -= p;
        }
        self.pattern_counts[chosen as usize] += 1;
        chosen
    }

    fn shape(&mut self, pattern: Pattern) -> (usize, usize) {
        match pattern {
            Pattern::OneOne => (1, 1),
            Pattern::OneTwo => (1, 2),
            Pattern::OneThree => (1, 3),
            Pattern::Other => {
                if self.rng.gen_bool(0.5) {
                    (self.rng.gen_range(2..=5), self.rng.gen_range(1..=3))
                } else {
                    (1, self.rng.gen_range(4..=8))
                }
            }
        }
    }

    fn generate(&mut self) -> TxRecord {
        let pattern = self.next_pattern();
        let (n_in, n_out) = self.shape(pattern);
        let sender = self.pick_entity(None);

        // Inputs: distinct addresses of the sender, minting new ones as needed.
        let mut owned = self.entities[sender as usize].addresses.clone();
        owned.shuffle(&mut self.rng);
        let mut inputs: Vec<u32> = owned.into_iter().take(n_in).collect();
        while inputs.len() < n_in {
            inputs.push(self.new_address(sender));
        }

        let with_change = n_out >= 2 && self.rng.gen_bool(self.config.change_prob);
        let n_pay = if with_change { n_out - 1 } else { n_out };
        let mut outputs: Vec<(u32, u64)> = Vec::with_capacity(n_out);
        for _ in 0..n_pay {
            let recipient = self.pick_entity(Some(sender));
            let addr = self.receiving_address(recipient, self.config.address_reuse_prob);
            outputs.push((addr, self.rng.gen_range(100_000..1_000_000_000)));
        }
        if with_change {
            let min_pay = outputs.iter().map(|o| o.1).min().expect("at least one payment");
            let value = if self.rng.gen_bool(self.config.change_smallest_prob) {
                self.rng.gen_range(1..min_pay)
            } else {
                min_pay + self.rng.gen_range(1..100_000_000)
            };
            let addr = self.receiving_address(sender, 0.2);
            outputs.push((addr, value));
        }
        outputs.shuffle(&mut self.rng);

        let total: u64 = outputs.iter().map(|o| o.1).sum();
        let share = total / n_in as u64;
        let inputs = inputs
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let v = if k == 0 { total - share * (n_in as u64 - 1) } else { share };
                TxIo::new(Self::address_name(a), Amount::from_sat(v))
            })
            .collect();
        let outputs = outputs
            .into_iter()
            .map(|(a, v)| TxIo::new(Self::address_name(a), Amount::from_sat(v)))
            .collect();

        let index = self.emitted;
        self.emitted += 1;
        let height = self.config.weeks.genesis_height + index / self.config.txs_per_block.max(1);
        TxRecord {
            txid: format!("s{}-{index}", self.config.seed),
            height,
            week: self.config.weeks.week_of(height).expect("height at or above genesis"),
            inputs,
            outputs,
        }
    }
}

impl Iterator for SyntheticSource {
    type Item = Result<TxRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.emitted < self.config.n_tx).then(|| Ok(self.generate()))
    }
}

impl RecordSource for SyntheticSource {
    fn cursor(&self) -> Cursor {
        Cursor::Synthetic { emitted: self.emitted }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn collect(src: SyntheticSource) -> Vec<TxRecord> {
        src.map(Result::unwrap).collect()
    }

    #[test]
    fn empty_stream() {
        assert!(collect(generate_synthetic(7, 0, PatternMix::default())).is_empty());
    }

    #[test]
    fn degenerate_mix_gives_single_shape() {
        let mix = PatternMix::new([(Pattern::OneTwo, 1.0)]).unwrap();
        let txs = collect(generate_synthetic(7, 10_000, mix));
        assert_eq!(txs.len(), 10_000);
        assert!(txs.iter().all(|t| t.inputs.len() == 1 && t.outputs.len() == 2));
    }

    #[test]
    fn pattern_shares_track_the_mix() {
        let mix = PatternMix::default();
        let txs = collect(generate_synthetic(7, 10_000, mix.clone()));
        for pat in Pattern::ALL {
            let share = txs.iter().filter(|t| Pattern::of_tx(t) == pat).count() as f64 / txs.len() as f64;
            assert!((share - mix.probability(pat)).abs() <= 0.01, "{pat}: {share}");
        }
    }

    #[test]
    fn deterministic_and_resumable() {
        let cfg = SyntheticConfig::new(11, 500, PatternMix::default());
        let all = collect(SyntheticSource::new(cfg.clone()));
        assert_eq!(all, collect(SyntheticSource::new(cfg.clone())));
        let mut src = SyntheticSource::new(cfg.clone());
        let head: Vec<_> = src.by_ref().take(123).map(Result::unwrap).collect();
        let tail = collect(SyntheticSource::resume(cfg, src.cursor()).unwrap());
        assert_eq!([head, tail].concat(), all);
    }

    #[test]
    fn truth_covers_every_emitted_address_once() {
        let mut src = generate_synthetic(3, 2_000, PatternMix::default());
        let txs: Vec<_> = src.by_ref().map(Result::unwrap).collect();
        let truth = src.truth();
        let seen: HashSet<&str> =
            txs.iter().flat_map(|t| t.inputs.iter().chain(&t.outputs)).map(|io| io.address.as_str()).collect();
        assert_eq!(seen.len(), truth.len());
        assert!(seen.iter().all(|a| truth.contains_key(*a)));
    }

    #[test]
    fn records_validate_and_heights_ascend() {
        let txs = collect(generate_synthetic(5, 3_000, PatternMix::default()));
        let weeks = WeekMapping::default();
        assert!(txs.iter().all(|t| t.validate(&weeks).is_ok()));
        assert!(txs.windows(2).all(|w| w[0].height <= w[1].height));
        assert!(txs.iter().all(|t| !t.is_coinbase()));
    }
}
