//! Temporal workload forecasting: a single-layer LSTM over streaming-normalized
//! per-shard load features, trained in `f64` and served in fixed point with
//! Monte Carlo dropout and an upper-confidence hedge.

mod eval;
mod forecast;
mod model;
mod quant;
pub mod shadow;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::{math, FixedPoint};
use crate::types::LoadVector;
use crate::workload::hour_of;

pub use eval::{evaluate, HorizonAccuracy};
pub use forecast::{forecast, forecast_chained, ForecastBundle, ForecastSettings, MAX_HORIZON, UCB_Z};
pub use model::TwfModel;
pub use quant::{CellState, LstmParams};
pub use train::{train, LoadSeries, TrainConfig, TrainReport};

/// Gas is fed to the model in millions of gas units.
pub const GAS_SCALE: f64 = 1e6;

/// One block's model input before normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub loads: LoadVector,
    /// Total gas executed across shards, in Mgas.
    pub gas: FixedPoint,
    pub hour_sin: FixedPoint,
    pub hour_cos: FixedPoint,
}

impl FeatureVector {
    pub fn new(loads: &[u32], gas: u64, height: u64, blocks_per_hour: u32) -> Self {
        let (hour_sin, hour_cos) = hour_encoding(height, blocks_per_hour);
        Self {
            loads: LoadVector::from_counts(loads),
            gas: FixedPoint::from_f64(gas as f64 / GAS_SCALE),
            hour_sin,
            hour_cos,
        }
    }

    pub fn num_shards(&self) -> usize {
        self.loads.len()
    }

    /// `[x_1..x_K, g, hour_sin, hour_cos]`.
    pub fn to_vec(&self) -> Vec<FixedPoint> {
        let mut v = self.loads.0.clone();
        v.extend([self.gas, self.hour_sin, self.hour_cos]);
        v
    }
}

pub fn hour_encoding(height: u64, blocks_per_hour: u32) -> (FixedPoint, FixedPoint) {
    let angle = std::f64::consts::TAU * hour_of(height, blocks_per_hour) / 24.0;
    let (s, c) = math::portable_sin_cos(angle);
    (FixedPoint::from_f64(s), FixedPoint::from_f64(c))
}

/// Exponential moving mean and variance of the load and gas features.
///
/// Hour features are already on the unit circle and pass through unchanged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub mean: Vec<FixedPoint>,
    pub var: Vec<FixedPoint>,
    pub decay: FixedPoint,
}

/// Variance floor: one ulp, the smallest positive Q47.16 value.
pub const VAR_FLOOR: FixedPoint = FixedPoint::ULP;
pub const DEFAULT_DECAY: f64 = 0.99;

impl NormalizerState {
    /// State whose mean equals `first` and variance sits at the floor.
    pub fn from_first(first: &FeatureVector, decay: f64) -> Self {
        let mut mean = first.loads.0.clone();
        mean.push(first.gas);
        let var = vec![VAR_FLOOR; mean.len()];
        Self { mean, var, decay: FixedPoint::from_f64(decay) }
    }

    /// State initialized from sample statistics (e.g. a training split).
    pub fn from_stats(mean: &[f64], var: &[f64], decay: f64) -> Self {
        Self {
            mean: mean.iter().map(|m| FixedPoint::from_f64(*m)).collect(),
            var: var.iter().map(|v| FixedPoint::from_f64(*v).max(VAR_FLOOR)).collect(),
            decay: FixedPoint::from_f64(decay),
        }
    }

    /// Number of normalized channels (K loads plus gas).
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `sqrt(var + eps)` per channel.
    pub fn scale(&self) -> Vec<FixedPoint> {
        self.var.iter().map(|v| (*v + VAR_FLOOR).sqrt()).collect()
    }

    /// Normalizes `f` with the current state, then folds `f` into the state.
    pub fn observe(&mut self, f: &FeatureVector) -> Vec<FixedPoint> {
        let raw = f.to_vec();
        let ch = self.channels();
        assert_eq!(raw.len(), ch + 2, "feature width does not match normalizer");
        let mut out = Vec::with_capacity(raw.len());
        let alpha = FixedPoint::ONE - self.decay;
        for i in 0..ch {
            let diff = raw[i] - self.mean[i];
            out.push(diff / (self.var[i] + VAR_FLOOR).sqrt());
            self.mean[i] += alpha * diff;
            let v = self.decay * (self.var[i] + alpha * (diff * diff));
            self.var[i] = v.max(VAR_FLOOR);
        }
        out.push(f.hour_sin);
        out.push(f.hour_cos);
        out
    }

    /// Pure form of [`observe`](Self::observe).
    pub fn normalize(&self, f: &FeatureVector) -> (Vec<FixedPoint>, NormalizerState) {
        let mut next = self.clone();
        let out = next.observe(f);
        (out, next)
    }

    /// Maps a value in normalized units of channel `i` back to raw units.
    pub fn denormalize(&self, i: usize, y: FixedPoint) -> FixedPoint {
        self.mean[i] + y * (self.var[i] + VAR_FLOOR).sqrt()
    }

    /// Normalizes a raw value of channel `i` without updating the state.
    pub fn apply(&self, i: usize, x: FixedPoint) -> FixedPoint {
        (x - self.mean[i]) / (self.var[i] + VAR_FLOOR).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub rmse: f64,
    /// Entries skipped by MAPE because the actual value was zero.
    pub mape_skipped: usize,
}

/// MAE, MAPE (percent) and RMSE over matching entries.
pub fn accuracy(predictions: &[f64], actuals: &[f64]) -> Result<Accuracy> {
    if predictions.len() != actuals.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} actuals",
            predictions.len(),
            actuals.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::MapeUndefined);
    }
    let n = actuals.len() as f64;
    let (mut abs, mut sq, mut pct, mut used) = (0.0, 0.0, 0.0, 0usize);
    for (p, a) in predictions.iter().zip(actuals) {
        let e = p - a;
        abs += e.abs();
        sq += e * e;
        if *a != 0.0 {
            pct += (e / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::MapeUndefined);
    }
    Ok(Accuracy {
        mae: abs / n,
        mape: 100.0 * pct / used as f64,
        rmse: (sq / n).sqrt(),
        mape_skipped: actuals.len() - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(loads: &[u32], gas: u64, h: u64) -> FeatureVector {
        FeatureVector::new(loads, gas, h, 10)
    }

    #[test]
    fn hour_encoding_on_unit_circle() {
        for h in 0..480 {
            let (s, c) = hour_encoding(h, 10);
            let r = s * s + c * c;
            assert!((r - FixedPoint::ONE).abs().raw() <= 2, "{h}: {r:?}");
        }
        assert_eq!(fv(&[1, 2], 0, 0).to_vec().len(), 5);
    }

    #[test]
    fn first_observation_normalizes_to_zero() {
        let f = fv(&[500, 300], 2_000_000, 3);
        let mut st = NormalizerState::from_first(&f, DEFAULT_DECAY);
        let out = st.observe(&f);
        assert_eq!(&out[..3], &[FixedPoint::ZERO; 3]);
        assert_eq!(out[3], f.hour_sin);
    }

    #[test]
    fn constant_stream_converges_to_zero() {
        let mut st = NormalizerState::from_stats(&[0.0, 0.0], &[1.0, 1.0], DEFAULT_DECAY);
        let f = fv(&[40], 1_000_000, 0);
        let mut last = Vec::new();
        for _ in 0..3000 {
            last = st.observe(&f);
        }
        // the mean stalls once alpha * diff rounds to zero: within 0.5 / alpha ulps
        let stall = 0.5 / (1.0 - DEFAULT_DECAY) * FixedPoint::ULP.to_f64();
        assert!((st.mean[0].to_f64() - 40.0).abs() <= stall + FixedPoint::ULP.to_f64());
        assert!(last[0].abs().to_f64() < 0.05, "{:?}", last[0]);
        assert!(st.var.iter().all(|v| *v >= VAR_FLOOR));
    }

    #[test]
    fn ramp_matches_scalar_recomputation() {
        let d = DEFAULT_DECAY;
        let mut st = NormalizerState::from_stats(&[0.0, 0.0], &[4.0, 1.0], d);
        let (mut m, mut v) = (0.0f64, 4.0f64);
        let eps = VAR_FLOOR.to_f64();
        for t in 0..200u32 {
            let x = t as f64;
            let got = st.observe(&fv(&[t], 0, 0))[0].to_f64();
            let want = (x - m) / (v + eps).sqrt();
            assert!((got - want).abs() < 2e-3 * want.abs().max(1.0), "t={t}: {got} vs {want}");
            let diff = x - m;
            m += (1.0 - d) * diff;
            v = (d * (v + (1.0 - d) * diff * diff)).max(eps);
        }
    }

    #[test]
    fn accuracy_examples() {
        let a = accuracy(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((a.mae, a.mape, a.rmse), (0.0, 0.0, 0.0));
        let a = accuracy(&[110.0], &[100.0]).unwrap();
        assert!((a.mae - 10.0).abs() < 1e-12 && (a.mape - 10.0).abs() < 1e-9 && (a.rmse - 10.0).abs() < 1e-12);
        assert!(matches!(accuracy(&[1.0], &[0.0]), Err(Error::MapeUndefined)));
        let a = accuracy(&[1.0, 5.0], &[0.0, 4.0]).unwrap();
        assert_eq!(a.mape_skipped, 1);
        assert!((a.mape - 25.0).abs() < 1e-9);
    }

    #[test]
    fn accuracy_random_fixture() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..50).map(|_| rng.random_range(1.0..100.0)).collect();
        let a: Vec<f64> = (0..50).map(|_| rng.random_range(1.0..100.0)).collect();
        let got = accuracy(&p, &a).unwrap();
        let mut mae = 0.0;
        let mut mape = 0.0;
        let mut mse = 0.0;
        for i in 0..50 {
            mae += (p[i] - a[i]).abs() / 50.0;
            mape += 2.0 * ((p[i] - a[i]) / a[i]).abs();
            mse += (p[i] - a[i]).powi(2) / 50.0;
        }
        assert!((got.mae - mae).abs() < 1e-9);
        assert!((got.mape - mape).abs() < 1e-9);
        assert!((got.rmse - mse.sqrt()).abs() < 1e-9);
    }
}
