//! Partition of the training split into labeled, agreed, disagreed and
//! unlabeled pools.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Split};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("n_labeled must be at least 2, got {0}")]
    TooFewLabeled(usize),
    #[error("n_labeled = {requested} exceeds the {available} gold-labeled training samples")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("labeled subset would contain a single class ({positives} positive, {negatives} negative available)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("sample `{0}` is not in the training pools")]
    UnknownSample(String),
    #[error("sample `{id}` is {from:?}; labeled samples cannot move")]
    LabeledImmutable { id: String, from: LabelState },
    #[error("illegal transition for `{id}`: {from:?} -> {to:?}")]
    IllegalTransition {
        id: String,
        from: LabelState,
        to: LabelState,
    },
    #[error("pool snapshot is inconsistent: {0}")]
    Inconsistent(String),
}

/// Where a training sample currently sits.
///
/// `Discarded` holds samples consumed by a reverted round: they are out of
/// the unlabeled pool and out of training for the rest of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelState {
    LabeledPositive,
    LabeledNegative,
    AgreedUnknownPositive,
    AgreedUnknownNegative,
    DisagreedUnknown,
    Unlabeled,
    Discarded,
}

impl LabelState {
    pub const ALL: [LabelState; 7] = [
        LabelState::LabeledPositive,
        LabelState::LabeledNegative,
        LabelState::AgreedUnknownPositive,
        LabelState::AgreedUnknownNegative,
        LabelState::DisagreedUnknown,
        LabelState::Unlabeled,
        LabelState::Discarded,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn is_labeled(self) -> bool {
        matches!(self, LabelState::LabeledPositive | LabelState::LabeledNegative)
    }

    pub fn is_unknown(self) -> bool {
        matches!(
            self,
            LabelState::AgreedUnknownPositive | LabelState::AgreedUnknownNegative | LabelState::DisagreedUnknown
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub round: u32,
    pub id: String,
    pub from: LabelState,
    pub to: LabelState,
}

/// Pool sizes, one field per state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub labeled_positive: usize,
    pub labeled_negative: usize,
    pub agreed_unknown_positive: usize,
    pub agreed_unknown_negative: usize,
    pub disagreed_unknown: usize,
    pub unlabeled: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    sets: [BTreeSet<String>; 7],
    lookup: HashMap<String, LabelState>,
    round_number: u32,
    log: Vec<Transition>,
}

/// On-disk form of [`PoolState`]; the lookup table is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub round_number: u32,
    pub labeled_positive: BTreeSet<String>,
    pub labeled_negative: BTreeSet<String>,
    pub agreed_unknown_positive: BTreeSet<String>,
    pub agreed_unknown_negative: BTreeSet<String>,
    pub disagreed_unknown: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
    pub discarded: BTreeSet<String>,
    pub transitions: Vec<Transition>,
}

impl PoolState {
    fn empty() -> Self {
        PoolState {
            sets: Default::default(),
            lookup: HashMap::new(),
            round_number: 0,
            log: Vec::new(),
        }
    }

    fn insert(&mut self, id: String, state: LabelState) {
        self.lookup.insert(id.clone(), state);
        self.sets[state.slot()].insert(id);
    }

    pub fn ids(&self, state: LabelState) -> &BTreeSet<String> {
        &self.sets[state.slot()]
    }

    pub fn count(&self, state: LabelState) -> usize {
        self.sets[state.slot()].len()
    }

    pub fn state_of(&self, id: &str) -> Option<LabelState> {
        self.lookup.get(id).copied()
    }

    pub fn round_number(&self) -> u32 {
        self.round_number
    }

    pub fn set_round_number(&mut self, round: u32) {
        self.round_number = round;
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.log
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.count(LabelState::LabeledPositive) + self.count(LabelState::LabeledNegative)
    }

    pub fn counts(&self) -> PoolCounts {
        use LabelState::*;
        PoolCounts {
            labeled_positive: self.count(LabeledPositive),
            labeled_negative: self.count(LabeledNegative),
            agreed_unknown_positive: self.count(AgreedUnknownPositive),
            agreed_unknown_negative: self.count(AgreedUnknownNegative),
            disagreed_unknown: self.count(DisagreedUnknown),
            unlabeled: self.count(Unlabeled),
            discarded: self.count(Discarded),
        }
    }

    /// Moves one sample between pools.
    ///
    /// Legal edges: `Unlabeled` to an agreed/disagreed pool (pseudo-labeling),
    /// and an agreed/disagreed pool to `Discarded` (round revert).
    pub fn transition(&mut self, id: &str, to: LabelState) -> Result<(), PoolError> {
        let from = self
            .state_of(id)
            .ok_or_else(|| PoolError::UnknownSample(id.to_string()))?;
        if from.is_labeled() {
            return Err(PoolError::LabeledImmutable {
                id: id.to_string(),
                from,
            });
        }
        let legal = match from {
            LabelState::Unlabeled => to.is_unknown(),
            s if s.is_unknown() => to == LabelState::Discarded,
            _ => false,
        };
        if !legal {
            return Err(PoolError::IllegalTransition {
                id: id.to_string(),
                from,
                to,
            });
        }
        let owned = self.sets[from.slot()].take(id).expect("lookup and sets agree");
        self.lookup.insert(owned.clone(), to);
        self.sets[to.slot()].insert(owned);
        self.log.push(Transition {
            round: self.round_number,
            id: id.to_string(),
            from,
            to,
        });
        Ok(())
    }

    /// Checks that the pools are pairwise disjoint and cover exactly `train_ids`.
    pub fn check_partition<'a>(&self, train_ids: impl IntoIterator<Item = &'a str>) -> Result<(), PoolError> {
        let total: usize = self.sets.iter().map(BTreeSet::len).sum();
        if total != self.lookup.len() {
            return Err(PoolError::Inconsistent(format!(
                "pools hold {total} entries but {} distinct ids",
                self.lookup.len()
            )));
        }
        for state in LabelState::ALL {
            for id in self.ids(state) {
                if self.lookup.get(id) != Some(&state) {
                    return Err(PoolError::Inconsistent(format!("`{id}` appears outside {state:?}")));
                }
            }
        }
        let mut expected = 0;
        for id in train_ids {
            expected += 1;
            if !self.lookup.contains_key(id) {
                return Err(PoolError::Inconsistent(format!("training sample `{id}` missing from pools")));
            }
        }
        if expected != self.lookup.len() {
            return Err(PoolError::Inconsistent(format!(
                "pools cover {} ids, training split has {expected}",
                self.lookup.len()
            )));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        use LabelState::*;
        PoolSnapshot {
            round_number: self.round_number,
            labeled_positive: self.ids(LabeledPositive).clone(),
            labeled_negative: self.ids(LabeledNegative).clone(),
            agreed_unknown_positive: self.ids(AgreedUnknownPositive).clone(),
            agreed_unknown_negative: self.ids(AgreedUnknownNegative).clone(),
            disagreed_unknown: self.ids(DisagreedUnknown).clone(),
            unlabeled: self.ids(Unlabeled).clone(),
            discarded: self.ids(Discarded).clone(),
            transitions: self.log.clone(),
        }
    }

    pub fn from_snapshot(snap: PoolSnapshot) -> Result<Self, PoolError> {
        use LabelState::*;
        let mut pool = PoolState::empty();
        pool.round_number = snap.round_number;
        pool.log = snap.transitions;
        let groups = [
            (LabeledPositive, snap.labeled_positive),
            (LabeledNegative, snap.labeled_negative),
            (AgreedUnknownPositive, snap.agreed_unknown_positive),
            (AgreedUnknownNegative, snap.agreed_unknown_negative),
            (DisagreedUnknown, snap.disagreed_unknown),
            (Unlabeled, snap.unlabeled),
            (Discarded, snap.discarded),
        ];
        for (state, ids) in groups {
            for id in ids {
                if let Some(prev) = pool.state_of(&id) {
                    return Err(PoolError::Inconsistent(format!("`{id}` is in both {prev:?} and {state:?}")));
                }
                pool.insert(id, state);
            }
        }
        Ok(pool)
    }
}

/// Draws the labeled subset from the training split and puts every other
/// training sample into `Unlabeled`.
///
/// Selection is stratified: each class gets half of `n_labeled` (the positive
/// class takes the odd one), and a class that runs short is topped up from the
/// other. Only training samples carrying a gold label are eligible.
pub fn init_pools(dataset: &Dataset, n_labeled: usize, seed: u64) -> Result<PoolState, PoolError> {
    if n_labeled < 2 {
        return Err(PoolError::TooFewLabeled(n_labeled));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for s in dataset.samples().iter().filter(|s| s.split == Split::Train) {
        match s.gold_label {
            Some(Label::Positive) => positives.push(s.id.as_str()),
            Some(Label::Negative) => negatives.push(s.id.as_str()),
            None => {}
        }
    }
    let available = positives.len() + negatives.len();
    if n_labeled > available {
        return Err(PoolError::NotEnoughSamples {
            requested: n_labeled,
            available,
        });
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(PoolError::SingleClass {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut n_pos = n_labeled.div_ceil(2).min(positives.len());
    let n_neg = (n_labeled - n_pos).min(negatives.len());
    n_pos = n_labeled - n_neg;

    let mut pool = PoolState::empty();
    for id in &positives[..n_pos] {
        pool.insert(id.to_string(), LabelState::LabeledPositive);
    }
    for id in &negatives[..n_neg] {
        pool.insert(id.to_string(), LabelState::LabeledNegative);
    }
    for s in dataset.samples().iter().filter(|s| s.split == Split::Train) {
        if pool.state_of(&s.id).is_none() {
            pool.insert(s.id.clone(), LabelState::Unlabeled);
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use proptest::prelude::*;

    fn toy(n_train: usize) -> Dataset {
        let samples = (0..n_train)
            .map(|i| Sample {
                id: format!("t{i:03}"),
                text: String::new(),
                gold_label: Some(Label::from_bool(i % 2 == 0)),
                split: Split::Train,
                embedding: None,
                image_ref: None,
            })
            .collect();
        Dataset::from_samples(samples, None).unwrap()
    }

    fn train_ids(ds: &Dataset) -> Vec<&str> {
        ds.split_ids(Split::Train)
    }

    #[test]
    fn stratified_labeled_subset() {
        let ds = toy(8000);
        let pool = init_pools(&ds, 100, 7).unwrap();
        let c = pool.counts();
        assert_eq!(c.labeled_positive, 50);
        assert_eq!(c.labeled_negative, 50);
        assert_eq!(c.unlabeled, 7900);
        assert_eq!(c.agreed_unknown_positive + c.agreed_unknown_negative + c.disagreed_unknown, 0);
        pool.check_partition(train_ids(&ds)).unwrap();
    }

    #[test]
    fn full_labeling_empties_unlabeled() {
        let ds = toy(10);
        let pool = init_pools(&ds, 10, 1).unwrap();
        assert_eq!(pool.count(LabelState::Unlabeled), 0);
        assert_eq!(pool.labeled_count(), 10);
    }

    #[test]
    fn same_seed_same_pools() {
        let ds = toy(200);
        assert_eq!(init_pools(&ds, 20, 3).unwrap(), init_pools(&ds, 20, 3).unwrap());
        assert_ne!(
            init_pools(&ds, 20, 3).unwrap().ids(LabelState::LabeledPositive),
            init_pools(&ds, 20, 4).unwrap().ids(LabelState::LabeledPositive)
        );
    }

    #[test]
    fn init_errors() {
        let ds = toy(10);
        assert_eq!(
            init_pools(&ds, 11, 0),
            Err(PoolError::NotEnoughSamples {
                requested: 11,
                available: 10
            })
        );
        assert_eq!(init_pools(&ds, 1, 0), Err(PoolError::TooFewLabeled(1)));
        let single: Vec<_> = ds
            .samples()
            .iter()
            .cloned()
            .map(|mut s| {
                s.gold_label = Some(Label::Positive);
                s
            })
            .collect();
        let ds = Dataset::from_samples(single, None).unwrap();
        assert!(matches!(init_pools(&ds, 4, 0), Err(PoolError::SingleClass { .. })));
    }

    #[test]
    fn short_class_is_topped_up() {
        let mut samples: Vec<_> = toy(20).samples().to_vec();
        for s in samples.iter_mut().skip(4) {
            s.gold_label = Some(Label::Negative);
        }
        // two positives left: t000, t002
        let ds = Dataset::from_samples(samples, None).unwrap();
        let pool = init_pools(&ds, 10, 5).unwrap();
        assert_eq!(pool.count(LabelState::LabeledPositive), 2);
        assert_eq!(pool.count(LabelState::LabeledNegative), 8);
    }

    #[test]
    fn transition_rules() {
        let ds = toy(10);
        let mut pool = init_pools(&ds, 2, 0).unwrap();
        let labeled = pool.ids(LabelState::LabeledPositive).iter().next().unwrap().clone();
        let free = pool.ids(LabelState::Unlabeled).iter().next().unwrap().clone();

        pool.transition(&free, LabelState::AgreedUnknownPositive).unwrap();
        assert_eq!(pool.state_of(&free), Some(LabelState::AgreedUnknownPositive));
        assert!(matches!(
            pool.transition(&labeled, LabelState::DisagreedUnknown),
            Err(PoolError::LabeledImmutable { .. })
        ));
        assert!(matches!(
            pool.transition(&free, LabelState::DisagreedUnknown),
            Err(PoolError::IllegalTransition { .. })
        ));
        pool.transition(&free, LabelState::Discarded).unwrap();
        assert!(matches!(
            pool.transition("nope", LabelState::Discarded),
            Err(PoolError::UnknownSample(_))
        ));
        assert_eq!(pool.transitions().len(), 2);
    }

    #[test]
    fn union_preserved_after_three_transitions() {
        let ds = toy(10);
        let mut pool = init_pools(&ds, 4, 11).unwrap();
        let free: Vec<String> = pool.ids(LabelState::Unlabeled).iter().take(3).cloned().collect();
        pool.transition(&free[0], LabelState::AgreedUnknownPositive).unwrap();
        pool.transition(&free[1], LabelState::AgreedUnknownNegative).unwrap();
        pool.transition(&free[2], LabelState::DisagreedUnknown).unwrap();

        let mut union: Vec<&str> = LabelState::ALL
            .iter()
            .flat_map(|s| pool.ids(*s).iter().map(String::as_str))
            .collect();
        union.sort();
        let mut expected = train_ids(&ds);
        expected.sort();
        assert_eq!(union, expected);
    }

    #[test]
    fn snapshot_round_trip() {
        let ds = toy(30);
        let mut pool = init_pools(&ds, 6, 2).unwrap();
        let id = pool.ids(LabelState::Unlabeled).iter().next().unwrap().clone();
        pool.set_round_number(3);
        pool.transition(&id, LabelState::DisagreedUnknown).unwrap();
        let back = PoolState::from_snapshot(pool.snapshot()).unwrap();
        assert_eq!(back, pool);
        assert_eq!(back.round_number(), 3);
    }

    proptest! {
        #[test]
        fn random_legal_sequences_keep_partition(
            seed in 0u64..1000,
            moves in proptest::collection::vec((0usize..40, 0usize..4), 0..60),
        ) {
            let ds = toy(40);
            let mut pool = init_pools(&ds, 6, seed).unwrap();
            let ids = train_ids(&ds);
            let targets = [
                LabelState::AgreedUnknownPositive,
                LabelState::AgreedUnknownNegative,
                LabelState::DisagreedUnknown,
                LabelState::Discarded,
            ];
            let labeled_before = pool.labeled_count();
            for (i, t) in moves {
                // illegal moves must fail without touching state
                let before = pool.clone();
                if pool.transition(ids[i], targets[t]).is_err() {
                    prop_assert_eq!(&pool, &before);
                }
                pool.check_partition(ids.iter().copied()).unwrap();
            }
            prop_assert_eq!(pool.labeled_count(), labeled_before);
        }
    }
}
