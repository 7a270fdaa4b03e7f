use crate::allocator::baseline_static;
use crate::fixed::{math, FixedPoint};
use crate::types::{AccountId, LoadVector, ShardId};

use super::TraceSpec;

/// The diverted-to accounts of a hotspot attack: the lowest-numbered
/// `hot_accounts` accounts that hash into the target shard.
pub fn hot_accounts(spec: &TraceSpec) -> Vec<AccountId> {
    let target = ShardId(spec.attack.target_shard);
    (0..spec.num_accounts)
        .map(AccountId)
        .filter(|a| baseline_static(*a, spec.num_shards) == target)
        .take(spec.attack.hot_accounts)
        .collect()
}

/// Zero-sum redistribution pattern: `+scale` on the shard with the highest
/// previous allocation weight, `-scale` on the lowest. Ties resolve to the
/// lowest shard index; uniform weights give the zero pattern.
pub fn adversary_pattern(prev_weights: &[FixedPoint], scale: FixedPoint) -> Vec<FixedPoint> {
    let mut p = vec![FixedPoint::ZERO; prev_weights.len()];
    if prev_weights.is_empty() {
        return p;
    }
    let mut hi = 0;
    let mut lo = 0;
    for (i, w) in prev_weights.iter().enumerate() {
        if *w > prev_weights[hi] {
            hi = i;
        }
        if *w < prev_weights[lo] {
            lo = i;
        }
    }
    if hi != lo {
        p[hi] = scale;
        p[lo] = -scale;
    }
    p
}

/// `L_t = L_0 + α sin(2π t / period) P(w_{t-1})`, with `P` scaled by the mean
/// baseline load so that `α` is a relative amplitude.
pub fn adaptive_adversary_step(
    base: &LoadVector,
    t: u64,
    prev_weights: &[FixedPoint],
    amplitude: f64,
    period: u64,
) -> LoadVector {
    if base.is_empty() {
        return base.clone();
    }
    let phase = std::f64::consts::TAU * (t % period) as f64 / period as f64;
    let (s, _) = math::portable_sin_cos(phase);
    let coeff = FixedPoint::from_f64(amplitude * s);
    let mean = base.sum() / FixedPoint::from_int(base.len() as i64);
    let pattern = adversary_pattern(prev_weights, mean);
    LoadVector(base.0.iter().zip(&pattern).map(|(l, p)| *l + coeff * *p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[f64]) -> Vec<FixedPoint> {
        v.iter().map(|x| FixedPoint::from_f64(*x)).collect()
    }

    #[test]
    fn zero_phase_is_identity() {
        let base = LoadVector::from_f64(&[100.0, 200.0, 300.0]);
        let prev = w(&[0.1, 0.5, 0.2]);
        assert_eq!(adaptive_adversary_step(&base, 0, &prev, 0.35, 100), base);
        assert_eq!(adaptive_adversary_step(&base, 50, &prev, 0.35, 100), base);
        for t in 0..300 {
            assert_eq!(adaptive_adversary_step(&base, t, &prev, 0.0, 100), base);
        }
    }

    #[test]
    fn peak_perturbation() {
        let base = LoadVector::from_f64(&[400.0; 4]);
        let prev = w(&[0.0, 3.0, -1.0, 0.0]);
        let out = adaptive_adversary_step(&base, 25, &prev, 0.35, 100);
        // hand evaluation at sin = 1: +0.35·400 on shard 1, -0.35·400 on shard 2
        let coeff = FixedPoint::from_f64(0.35);
        let want_hi = FixedPoint::from_int(400) + coeff * FixedPoint::from_int(400);
        assert_eq!(out.0[1], want_hi);
        assert!((out.0[1].to_f64() - 540.0).abs() < 0.01);
        assert!((out.0[2].to_f64() - 260.0).abs() < 0.01);
        assert_eq!(out.0.iter().max(), Some(&want_hi));
    }

    #[test]
    fn pattern_is_zero_sum() {
        let base = LoadVector::from_f64(&[120.0, 80.0, 95.0, 143.0, 60.0]);
        let prev = w(&[0.3, 0.9, 0.1, 0.4, 0.2]);
        for t in 0..200 {
            let out = adaptive_adversary_step(&base, t, &prev, 0.35, 100);
            assert_eq!(out.sum(), base.sum(), "t = {t}");
        }
    }

    #[test]
    fn hot_accounts_live_in_target() {
        let spec = TraceSpec::default();
        let hot = hot_accounts(&spec);
        assert_eq!(hot.len(), 64);
        assert!(hot.iter().all(|a| baseline_static(*a, 8) == ShardId(3)));
    }
}
