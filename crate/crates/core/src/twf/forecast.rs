//! Autoregressive multi-step rollout with Monte Carlo dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TwfModel;
use super::quant::CellState;
use super::{hour_encoding, FeatureVector, NormalizerState};
use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::types::LoadVector;

pub const MAX_HORIZON: usize = 32;

/// z-score of the two-sided 95% interval used for the hedge.
pub const UCB_Z: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastSettings {
    pub horizon: usize,
    pub samples: usize,
    pub dropout: bool,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self { horizon: 8, samples: 10, dropout: true }
    }
}

impl ForecastSettings {
    /// One dropout-free rollout.
    pub fn point(horizon: usize) -> Self {
        Self { horizon, samples: 1, dropout: false }
    }
}

/// `H x K` predictions, per-entry variances and the hedged upper bound.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub mean: Vec<LoadVector>,
    pub variance: Vec<LoadVector>,
    pub hedged: Vec<LoadVector>,
}

impl ForecastBundle {
    /// Builds the bundle from means and variances; `hedged = mean + 1.96 sigma`.
    pub fn from_moments(mean: Vec<LoadVector>, variance: Vec<LoadVector>) -> Self {
        let z = FixedPoint::from_f64(UCB_Z);
        let hedged = mean
            .iter()
            .zip(&variance)
            .map(|(m, v)| LoadVector(m.0.iter().zip(&v.0).map(|(a, b)| *a + z * b.sqrt()).collect()))
            .collect();
        Self { mean, variance, hedged }
    }

    /// A zero-variance forecast that repeats `loads` for `horizon` steps.
    pub fn persistence(loads: &LoadVector, horizon: usize) -> Self {
        let zero = LoadVector(vec![FixedPoint::ZERO; loads.len()]);
        Self::from_moments(vec![loads.clone(); horizon], vec![zero; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    pub fn num_shards(&self) -> usize {
        self.mean.first().map_or(0, |m| m.len())
    }

    fn column_mean(rows: &[LoadVector]) -> LoadVector {
        let k = rows.first().map_or(0, |r| r.len());
        let h = FixedPoint::from_int(rows.len().max(1) as i64);
        LoadVector((0..k).map(|s| rows.iter().map(|r| r.0[s]).sum::<FixedPoint>() / h).collect())
    }

    /// Per-shard hedged load averaged over the horizon.
    pub fn hedged_mean(&self) -> LoadVector {
        Self::column_mean(&self.hedged)
    }

    /// Per-shard point forecast averaged over the horizon.
    pub fn point_mean(&self) -> LoadVector {
        Self::column_mean(&self.mean)
    }

    /// Per-shard standard deviation averaged over the horizon.
    pub fn sigma_mean(&self) -> LoadVector {
        let sig: Vec<LoadVector> =
            self.variance.iter().map(|v| LoadVector(v.0.iter().map(|x| x.sqrt()).collect())).collect();
        Self::column_mean(&sig)
    }

    /// Confidence in `(0, 1]`: mean of `x̂ / x̃` over all entries (1 when variance is zero).
    pub fn confidence(&self) -> FixedPoint {
        let mut acc = FixedPoint::ZERO;
        let mut n = 0i64;
        for (m, h) in self.mean.iter().zip(&self.hedged) {
            for (a, b) in m.0.iter().zip(&h.0) {
                acc += if *b > FixedPoint::ZERO { *a / *b } else { FixedPoint::ONE };
                n += 1;
            }
        }
        if n == 0 {
            FixedPoint::ONE
        } else {
            (acc / FixedPoint::from_int(n)).min(FixedPoint::ONE)
        }
    }
}

/// Normalizes `window` starting from `start`; returns inputs and end state.
fn normalize_window(window: &[FeatureVector], start: &NormalizerState) -> (Vec<Vec<FixedPoint>>, NormalizerState) {
    let mut st = start.clone();
    let xs = window.iter().map(|f| st.observe(f)).collect();
    (xs, st)
}

fn check_window(model: &TwfModel, window: &[FeatureVector]) -> Result<()> {
    if window.len() < model.window {
        return Err(Error::InsufficientHistory { need: model.window, have: window.len() });
    }
    if window.len() > model.window {
        return Err(Error::Shape(format!("window of {} for a model expecting {}", window.len(), model.window)));
    }
    let k = model.num_shards();
    if let Some(f) = window.iter().find(|f| f.num_shards() != k) {
        return Err(Error::Shape(format!("feature with {} shards for a {k}-shard model", f.num_shards())));
    }
    Ok(())
}

/// Raw-unit rollouts, one per sample: `samples x steps x K`.
fn rollouts(
    model: &TwfModel,
    window: &[FeatureVector],
    start: &NormalizerState,
    last_height: u64,
    steps: usize,
    samples: usize,
    dropout: bool,
    seed: u64,
) -> Vec<Vec<Vec<FixedPoint>>> {
    let p = &model.params;
    let k = p.outputs;
    let (inputs, end) = normalize_window(window, start);
    let mut base = p.zero_state();
    for x in &inputs {
        p.step(x, &mut base);
    }
    let last = window.last().expect("non-empty window");
    let last_total: FixedPoint = last.loads.sum();
    let keep = FixedPoint::ONE - p.dropout;
    let scale = FixedPoint::ONE / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = if dropout { samples } else { 1 };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mask: Option<Vec<FixedPoint>> = dropout.then(|| {
            (0..p.hidden)
                .map(|_| if rng.random_bool(keep.to_f64()) { scale } else { FixedPoint::ZERO })
                .collect()
        });
        let mut state: CellState = base.clone();
        let mut seq = Vec::with_capacity(steps);
        for j in 1..=steps {
            let y = p.output(&state.h, mask.as_deref());
            let raw: Vec<FixedPoint> =
                (0..k).map(|s| end.denormalize(s, y[s]).max(FixedPoint::ZERO)).collect();
            if j < steps {
                let total: FixedPoint = raw.iter().copied().sum();
                let gas = if last_total > FixedPoint::ZERO { last.gas * total / last_total } else { last.gas };
                let (hs, hc) = hour_encoding(last_height + j as u64, model.blocks_per_hour);
                let mut x = y.clone();
                x.push(end.apply(k, gas));
                x.push(hs);
                x.push(hc);
                p.step(&x, &mut state);
            }
            seq.push(raw);
        }
        out.push(seq);
    }
    out
}

/// H-step forecast from a window of exactly W features.
///
/// `start` is the normalizer state before `window[0]`; `last_height` is the
/// height of the last window entry; `seed` keys the dropout masks.
pub fn forecast(
    model: &TwfModel,
    window: &[FeatureVector],
    start: &NormalizerState,
    last_height: u64,
    settings: &ForecastSettings,
    seed: u64,
) -> Result<ForecastBundle> {
    if settings.horizon == 0 || settings.horizon > MAX_HORIZON {
        return Err(Error::config("horizon", format!("must lie in 1..={MAX_HORIZON}")));
    }
    if settings.samples == 0 {
        return Err(Error::config("samples", "need at least one dropout sample"));
    }
    check_window(model, window)?;
    let runs = rollouts(
        model,
        window,
        start,
        last_height,
        settings.horizon,
        settings.samples,
        settings.dropout,
        seed,
    );
    let k = model.num_shards();
    let n = FixedPoint::from_int(runs.len() as i64);
    let mut mean = Vec::with_capacity(settings.horizon);
    let mut variance = Vec::with_capacity(settings.horizon);
    for j in 0..settings.horizon {
        let m: Vec<FixedPoint> = (0..k).map(|s| runs.iter().map(|r| r[j][s]).sum::<FixedPoint>() / n).collect();
        let v: Vec<FixedPoint> = if runs.len() < 2 {
            vec![FixedPoint::ZERO; k]
        } else {
            let dof = FixedPoint::from_int(runs.len() as i64 - 1);
            (0..k)
                .map(|s| {
                    runs.iter()
                        .map(|r| {
                            let d = r[j][s] - m[s];
                            d * d
                        })
                        .sum::<FixedPoint>()
                        / dof
                })
                .collect()
        };
        mean.push(LoadVector(m));
        variance.push(LoadVector(v));
    }
    Ok(ForecastBundle::from_moments(mean, variance))
}

/// Forecast beyond [`MAX_HORIZON`] by chaining capped rollouts: each segment
/// re-windows on the last W features, predicted loads included.
pub fn forecast_chained(
    model: &TwfModel,
    window: &[FeatureVector],
    start: &NormalizerState,
    last_height: u64,
    total_steps: usize,
    settings: &ForecastSettings,
    seed: u64,
) -> Result<ForecastBundle> {
    check_window(model, window)?;
    let mut win = window.to_vec();
    let mut st = start.clone();
    let mut height = last_height;
    let mut mean = Vec::new();
    let mut variance = Vec::new();
    let mut segment = 0u64;
    while mean.len() < total_steps {
        let h = (total_steps - mean.len()).min(MAX_HORIZON);
        let s = ForecastSettings { horizon: h, ..*settings };
        let b = forecast(model, &win, &st, height, &s, seed.wrapping_add(segment))?;
        let last_gas = win.last().expect("non-empty").gas;
        let last_total = win.last().expect("non-empty").loads.sum();
        for (j, m) in b.mean.iter().enumerate() {
            let total = m.sum();
            let gas = if last_total > FixedPoint::ZERO { last_gas * total / last_total } else { last_gas };
            let (hour_sin, hour_cos) = hour_encoding(height + 1 + j as u64, model.blocks_per_hour);
            win.push(FeatureVector { loads: m.clone(), gas, hour_sin, hour_cos });
        }
        let drop = win.len() - model.window;
        for f in &win[..drop] {
            st.observe(f);
        }
        win.drain(..drop);
        height += h as u64;
        mean.extend(b.mean);
        variance.extend(b.variance);
        segment += 1;
    }
    Ok(ForecastBundle::from_moments(mean, variance))
}
