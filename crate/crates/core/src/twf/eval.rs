//! Rolling-origin accuracy of multi-step forecasts over a held-out series.

use serde::{Deserialize, Serialize};

use super::forecast::{forecast, forecast_chained, ForecastSettings, MAX_HORIZON};
use super::model::TwfModel;
use super::train::LoadSeries;
use super::{accuracy, Accuracy};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonAccuracy {
    pub horizon: usize,
    pub origins: usize,
    /// Pooled over every step `1..=horizon`, shard and origin.
    pub overall: Accuracy,
    /// MAPE (percent) of step `j + 1` alone.
    pub per_step_mape: Vec<f64>,
}

/// Forecasts `horizon` steps from every `stride`-th origin of `series` with
/// dropout disabled and scores them against the realized loads. Horizons past
/// [`MAX_HORIZON`] chain capped rollouts.
pub fn evaluate(model: &TwfModel, series: &LoadSeries, horizon: usize, stride: usize) -> Result<HorizonAccuracy> {
    let w = model.window;
    if series.num_shards() != model.num_shards() {
        return Err(Error::Shape(format!("series has {} shards, model {}", series.num_shards(), model.num_shards())));
    }
    if horizon == 0 || stride == 0 {
        return Err(Error::config("horizon", "horizon and stride must be positive"));
    }
    if series.len() < w + horizon {
        return Err(Error::InsufficientHistory { need: w + horizon, have: series.len() });
    }
    let feats = series.features();
    let k = model.num_shards();
    let mut state = model.normalizer.clone();
    let mut consumed = 0;
    let (mut preds, mut actual) = (Vec::new(), Vec::new());
    let mut steps: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); horizon];
    let mut origins = 0;
    let mut t = w;
    while t + horizon <= feats.len() {
        while consumed < t - w {
            state.observe(&feats[consumed]);
            consumed += 1;
        }
        let height = series.start_height + t as u64 - 1;
        let window = &feats[t - w..t];
        let b = if horizon <= MAX_HORIZON {
            forecast(model, window, &state, height, &ForecastSettings::point(horizon), 0)?
        } else {
            forecast_chained(model, window, &state, height, horizon, &ForecastSettings::point(MAX_HORIZON), 0)?
        };
        for (j, m) in b.mean.iter().enumerate() {
            for s in 0..k {
                let p = m.0[s].to_f64();
                let a = series.loads[t + j][s] as f64;
                preds.push(p);
                actual.push(a);
                steps[j].0.push(p);
                steps[j].1.push(a);
            }
        }
        origins += 1;
        t += stride;
    }
    let per_step_mape = steps
        .iter()
        .map(|(p, a)| accuracy(p, a).map(|x| x.mape))
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizonAccuracy { horizon, origins, overall: accuracy(&preds, &actual)?, per_step_mape })
}
