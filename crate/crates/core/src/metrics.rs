//! Balance and cross-shard metrics shared by the engine, allocator and reports.
//!
//! Two imbalance measures coexist: [`imbalance`] is the max-minus-min spread
//! of utilizations, [`imbalance_index`] the mean absolute relative deviation
//! of raw loads. Reports always say which one they carry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::types::{AllocationMap, LoadVector, Transaction};

/// `x / capacity`, rounded to nearest even.
pub fn utilization(executed: u64, capacity: u64) -> Result<FixedPoint> {
    if capacity == 0 {
        return Err(Error::ZeroCapacity);
    }
    FixedPoint::from_ratio(executed as i64, capacity as i64).ok_or(Error::ZeroCapacity)
}

/// Spread between the most and least utilized shard.
pub fn imbalance(utils: &LoadVector) -> Result<FixedPoint> {
    let max = utils.0.iter().max().ok_or(Error::EmptyShardSet)?;
    let min = utils.0.iter().min().ok_or(Error::EmptyShardSet)?;
    Ok(*max - *min)
}

/// `(1/K) Σ |L_k - mean| / mean`.
pub fn imbalance_index(loads: &LoadVector) -> Result<FixedPoint> {
    if loads.is_empty() {
        return Err(Error::EmptyShardSet);
    }
    let k = loads.len() as i64;
    let total = loads.sum();
    if total <= FixedPoint::ZERO {
        return Err(Error::ZeroMeanLoad);
    }
    // Σ |L_k - total/K| / (total/K) / K = Σ |K·L_k - total| / (K·total)
    let kf = FixedPoint::from_int(k);
    let dev: FixedPoint = loads.0.iter().map(|l| (kf * *l - total).abs()).sum();
    Ok(dev / (kf * total))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossShardRatio {
    /// Fraction of transactions that cross shards.
    pub count: FixedPoint,
    /// Fraction of gas spent by cross-shard transactions.
    pub gas: FixedPoint,
}

pub fn cross_shard_ratio<'a>(
    block: impl IntoIterator<Item = &'a Transaction>,
    alloc: &AllocationMap,
) -> CrossShardRatio {
    let (mut n, mut n_cross, mut gas, mut gas_cross) = (0i64, 0i64, 0u128, 0u128);
    for tx in block {
        n += 1;
        gas += tx.gas as u128;
        if tx.is_cross_shard(alloc) {
            n_cross += 1;
            gas_cross += tx.gas as u128;
        }
    }
    if n == 0 {
        return CrossShardRatio::default();
    }
    let gas_ratio = if gas == 0 {
        FixedPoint::ZERO
    } else {
        ratio_u128(gas_cross, gas)
    };
    CrossShardRatio {
        count: FixedPoint::from_ratio(n_cross, n).unwrap_or_default(),
        gas: gas_ratio,
    }
}

fn ratio_u128(num: u128, den: u128) -> FixedPoint {
    // num <= den, so the scaled numerator fits comfortably in u128 for any
    // realistic block gas total.
    let scaled = num << crate::fixed::FRAC_BITS;
    let q = scaled / den;
    let r = scaled % den;
    let q = if 2 * r > den || (2 * r == den && q & 1 == 1) { q + 1 } else { q };
    FixedPoint::from_raw(q as i64)
}
