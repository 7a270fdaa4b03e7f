use proptest::prelude::*;
use psap::safety::{gate, GateInput, SafetyLimits};
use psap::twf::ForecastBundle;
use psap::types::Validator;
use psap::{AccountId, AllocationMap, BlockHeight, FixedPoint, LoadVector, MigrationAction, Move, ShardId, ShardState};

const K: u16 = 4;

#[derive(Clone, Debug)]
struct World {
    accounts: usize,
    utils: Vec<f64>,
    /// (account, stake, byzantine); validators sit on the account's home shard.
    validators: Vec<(u64, i64, bool)>,
    moves: Vec<(u64, u16)>,
    epoch_moves: usize,
    threshold: f64,
}

fn world() -> impl Strategy<Value = World> {
    (
        400usize..6000,
        prop::collection::vec(0.0f64..0.9, K as usize),
        prop::collection::vec((0u64..400, 1i64..40, prop::bool::weighted(0.25)), 0..24),
        prop::collection::vec((0u64..400, 1u16..K), 0..60),
        0usize..1200,
        prop_oneof![Just(0.0), Just(0.82), 0.0f64..1.0],
    )
        .prop_map(|(accounts, utils, validators, moves, epoch_moves, threshold)| World {
            accounts,
            utils,
            validators,
            moves,
            epoch_moves,
            threshold,
        })
}

struct Fixture {
    shards: Vec<ShardState>,
    alloc: AllocationMap,
    forecast: ForecastBundle,
    load: Vec<FixedPoint>,
    limits: SafetyLimits,
    epoch_moves: usize,
}

impl Fixture {
    fn new(w: &World) -> Self {
        let alloc = AllocationMap::from_fn(w.accounts, K, |a| ShardId((a.0 % K as u64) as u16));
        let mut shards: Vec<ShardState> = (0..K).map(|s| ShardState::new(ShardId(s), 1000, 1_000_000, 8)).collect();
        let mut seen = std::collections::BTreeSet::new();
        for &(a, stake, byzantine) in &w.validators {
            if !seen.insert(a) {
                continue;
            }
            shards[alloc.shard_of(AccountId(a)).index()].validators.push(Validator {
                id: a as u32,
                account: AccountId(a),
                stake: FixedPoint::from_int(stake),
                byzantine,
                active_from: BlockHeight(0),
            });
        }
        let loads: Vec<f64> = w.utils.iter().map(|u| u * 1000.0).collect();
        let forecast = ForecastBundle::persistence(&LoadVector::from_f64(&loads), 4);
        let load = (0..w.accounts).map(|a| FixedPoint::from_int(1 + (a % 7) as i64)).collect();
        let limits = SafetyLimits { score_threshold: w.threshold, ..SafetyLimits::default() };
        Self { shards, alloc, forecast, load, limits, epoch_moves: w.epoch_moves }
    }

    fn input(&self) -> GateInput<'_> {
        GateInput {
            height: BlockHeight(1000),
            shards: &self.shards,
            forecast: &self.forecast,
            alloc: &self.alloc,
            account_load: &self.load,
            epoch_moves: self.epoch_moves,
            block_gas: 1_000_000,
        }
    }

    fn action(&self, raw: &[(u64, u16)]) -> MigrationAction {
        let mut seen = std::collections::BTreeSet::new();
        let moves = raw
            .iter()
            .filter(|(a, _)| seen.insert(*a))
            .map(|&(a, step)| {
                let from = self.alloc.shard_of(AccountId(a));
                Move { account: AccountId(a), from, to: ShardId((from.0 + step) % K) }
            })
            .collect();
        MigrationAction::new(moves).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn regating_an_accepted_set_changes_nothing(w in world()) {
        let f = Fixture::new(&w);
        let v = gate(&f.action(&w.moves), f.input(), &f.limits);
        let again = gate(&MigrationAction::new(v.accepted.clone()).unwrap(), f.input(), &f.limits);
        prop_assert_eq!(&again.accepted, &v.accepted);
        prop_assert!(again.pruned.is_empty());
    }

    #[test]
    fn subsets_of_an_accepted_set_pass_whole(w in world(), mask in prop::collection::vec(any::<bool>(), 60)) {
        let f = Fixture::new(&w);
        let v = gate(&f.action(&w.moves), f.input(), &f.limits);
        let subset: Vec<Move> = v.accepted.iter().zip(&mask).filter(|(_, k)| **k).map(|(m, _)| *m).collect();
        let s = gate(&MigrationAction::new(subset.clone()).unwrap(), f.input(), &f.limits);
        prop_assert_eq!(&s.accepted, &subset);
        prop_assert!(s.score >= v.score);
    }

    #[test]
    fn accepted_sets_respect_every_hard_bound(w in world()) {
        let f = Fixture::new(&w);
        let v = gate(&f.action(&w.moves), f.input(), &f.limits);
        let p = &v.projection;
        prop_assert!(p.migration_gas <= f.limits.gas_limit(1_000_000));
        prop_assert!(v.accepted.len() <= f.limits.move_limit(w.accounts));
        prop_assert!(w.epoch_moves + v.accepted.len() <= f.limits.epoch_limit(w.accounts).max(w.epoch_moves));
        for m in &v.accepted {
            prop_assert!(p.utilization[m.to.index()].to_f64() <= f.limits.util_cap + 1e-4);
        }
        if !v.accepted.is_empty() {
            prop_assert!(v.score.to_f64() >= w.threshold - 1e-4);
        }
    }
}
