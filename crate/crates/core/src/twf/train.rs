//! Teacher-forced training of the `f64` shadow with AdamW, cosine learning
//! rate decay and early stopping on validation NMSE.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TwfModel;
use super::shadow::{Batch, LstmF64, LstmGrads};
use super::{FeatureVector, NormalizerState, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::types::AllocationMap;
use crate::workload::BlockBatch;

/// Per-block shard loads and total gas, the raw material for features.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSeries {
    /// `T x K` executed (or arriving) work items per shard.
    pub loads: Vec<Vec<u32>>,
    pub gas: Vec<u64>,
    pub start_height: u64,
    pub blocks_per_hour: u32,
}

impl LoadSeries {
    /// Per-shard arrival counts of a trace under a fixed allocation.
    pub fn from_blocks(blocks: &[BlockBatch], alloc: &AllocationMap, blocks_per_hour: u32) -> Self {
        let k = alloc.num_shards() as usize;
        let mut loads = Vec::with_capacity(blocks.len());
        let mut gas = Vec::with_capacity(blocks.len());
        for b in blocks {
            let mut row = vec![0u32; k];
            let mut g = 0u64;
            for tx in b {
                row[alloc.shard_of(tx.src).index()] += 1;
                g += tx.gas;
            }
            loads.push(row);
            gas.push(g);
        }
        Self { loads, gas, start_height: 0, blocks_per_hour }
    }

    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }

    pub fn num_shards(&self) -> usize {
        self.loads.first().map_or(0, |r| r.len())
    }

    pub fn feature(&self, i: usize) -> FeatureVector {
        FeatureVector::new(&self.loads[i], self.gas[i], self.start_height + i as u64, self.blocks_per_hour)
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        (0..self.len()).map(|i| self.feature(i)).collect()
    }

    /// Sub-series `[from, to)` with heights preserved.
    pub fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            loads: self.loads[from..to].to_vec(),
            gas: self.gas[from..to].to_vec(),
            start_height: self.start_height + from as u64,
            blocks_per_hour: self.blocks_per_hour,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Inference window W.
    pub window: usize,
    /// Training sequence length; longer than W so rollout states are seen in training.
    pub seq_len: usize,
    /// Leading positions of each sequence excluded from the loss.
    pub warmup: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub grad_clip: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            window: 16,
            seq_len: 48,
            warmup: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            dropout: 0.2,
            max_epochs: 40,
            patience: 5,
            batch_size: 32,
            stride: 2,
            val_fraction: 0.2,
            grad_clip: 1.0,
            decay: super::DEFAULT_DECAY,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_nmse: f64,
    pub best_val_nmse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean training loss per epoch (dropout active).
    pub train_loss: Vec<f64>,
    pub val_nmse: Vec<f64>,
}

/// Normalized inputs, next-step targets and NMSE weights for a whole series.
pub(crate) struct Prepared {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub normalizer: NormalizerState,
}

pub(crate) fn prepare(series: &LoadSeries, n_train: usize, decay: f64) -> Prepared {
    let k = series.num_shards();
    let feats = series.features();
    let mut mean = vec![0.0; k + 1];
    let mut var = vec![0.0; k + 1];
    let raw = |f: &FeatureVector, i: usize| if i < k { f.loads.0[i].to_f64() } else { f.gas.to_f64() };
    for f in &feats[..n_train] {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += raw(f, i) / n_train as f64;
        }
    }
    for f in &feats[..n_train] {
        for (i, v) in var.iter_mut().enumerate() {
            *v += (raw(f, i) - mean[i]).powi(2) / n_train as f64;
        }
    }
    let floor = VAR_FLOOR.to_f64();
    let sigma2: Vec<f64> = var.iter().map(|v| v.max(floor)).collect();
    let normalizer = NormalizerState::from_stats(&mean, &var, decay);
    let mut st = normalizer.clone();
    let mut x = Vec::with_capacity(feats.len());
    let mut post_var = Vec::with_capacity(feats.len());
    for f in &feats {
        x.push(st.observe(f).iter().map(|v| v.to_f64()).collect::<Vec<f64>>());
        post_var.push(st.var.iter().map(|v| v.to_f64()).collect::<Vec<f64>>());
    }
    let mut y = Vec::with_capacity(feats.len());
    let mut w = Vec::with_capacity(feats.len());
    for t in 0..feats.len().saturating_sub(1) {
        y.push(x[t + 1][..k].to_vec());
        w.push((0..k).map(|s| (post_var[t][s] + floor) / sigma2[s]).collect());
    }
    Prepared { x, y, w, normalizer }
}

fn make_batch(p: &Prepared, starts: &[usize], cfg: &TrainConfig, k: usize, masks: Option<&mut ChaCha8Rng>) -> Batch {
    let (l, b) = (cfg.seq_len, starts.len());
    let n_in = p.x[0].len();
    let x = Array3::from_shape_fn((l, b, n_in), |(t, j, i)| p.x[starts[j] + t][i]);
    let y = Array3::from_shape_fn((l, b, k), |(t, j, s)| p.y[starts[j] + t][s]);
    let weight =
        Array3::from_shape_fn((l, b, k), |(t, j, s)| if t >= cfg.warmup { p.w[starts[j] + t][s] } else { 0.0 });
    let mask = match masks {
        Some(rng) => {
            let keep = 1.0 - cfg.dropout;
            Array2::from_shape_fn((b, cfg.hidden), |_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        }
        None => Array2::ones((b, cfg.hidden)),
    };
    Batch { x, y, weight, mask }
}

struct AdamW {
    m: LstmGrads,
    v: LstmGrads,
    t: i32,
}

impl AdamW {
    fn step(&mut self, model: &mut LstmF64, g: &LstmGrads, lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        macro_rules! upd {
            ($p:expr, $g:expr, $m:expr, $v:expr, $decay:expr) => {
                ndarray::Zip::from(&mut $p).and(&$g).and(&mut $m).and(&mut $v).for_each(|p, g, m, v| {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + EPS) + $decay * *p);
                });
            };
        }
        upd!(model.w, g.w, self.m.w, self.v.w, wd);
        upd!(model.b, g.b, self.m.b, self.v.b, 0.0);
        upd!(model.w_out, g.w_out, self.m.w_out, self.v.w_out, wd);
        upd!(model.b_out, g.b_out, self.m.b_out, self.v.b_out, 0.0);
    }
}

fn starts(from: usize, to: usize, cfg: &TrainConfig) -> Vec<usize> {
    // the last target index of a sequence is s + seq_len, which must stay below `to`
    let mut out = Vec::new();
    let mut s = from;
    while s + cfg.seq_len < to {
        out.push(s);
        s += cfg.stride.max(1);
    }
    out
}

fn val_loss(model: &LstmF64, p: &Prepared, val: &[usize], cfg: &TrainConfig, k: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in val.chunks(cfg.batch_size.max(1)) {
        let b = make_batch(p, chunk, cfg, k, None);
        let entries = b.weight.iter().filter(|w| **w > 0.0).count() as f64;
        total += model.loss(&b) * entries;
        n += entries;
    }
    total / n.max(1.0)
}

/// Trains a forecaster on `series`; the tail `val_fraction` is held out.
pub fn train(series: &LoadSeries, cfg: &TrainConfig) -> Result<(TwfModel, TrainReport)> {
    let k = series.num_shards();
    if k == 0 {
        return Err(Error::EmptyShardSet);
    }
    if cfg.window == 0 || cfg.seq_len < cfg.window || cfg.warmup >= cfg.seq_len {
        return Err(Error::config("train", "need 0 < window <= seq_len and warmup < seq_len"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::config("train.dropout", "must lie in [0, 1)"));
    }
    let n = series.len();
    let n_train = ((n as f64) * (1.0 - cfg.val_fraction)).round() as usize;
    let train_starts = starts(0, n_train, cfg);
    let val_starts = starts(n_train, n, cfg);
    if train_starts.is_empty() || val_starts.is_empty() {
        return Err(Error::InsufficientHistory { need: 2 * (cfg.seq_len + 1), have: n });
    }
    let prep = prepare(series, n_train, cfg.decay);
    let mut model = LstmF64::init(k + 3, cfg.hidden, k, cfg.seed);
    let mut opt = AdamW { m: model.zero_grads(), v: model.zero_grads(), t: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let batches_per_epoch = train_starts.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = (batches_per_epoch * cfg.max_epochs).max(1);

    let initial = val_loss(&model, &prep, &val_starts, cfg, k);
    let mut best = (initial, 0usize, model.clone());
    let mut report = TrainReport {
        initial_val_nmse: initial,
        best_val_nmse: initial,
        best_epoch: 0,
        epochs_run: 0,
        train_loss: Vec::new(),
        val_nmse: Vec::new(),
    };
    let mut order = train_starts.clone();
    let mut step = 0usize;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let use_dropout = cfg.dropout > 0.0;
            let batch = make_batch(&prep, chunk, cfg, k, use_dropout.then_some(&mut rng));
            let (loss, mut g) = model.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::Degenerate(format!("non-finite training loss at epoch {epoch}")));
            }
            let norm = g.norm();
            if norm > cfg.grad_clip {
                g.scale(cfg.grad_clip / norm);
            }
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            opt.step(&mut model, &g, lr, cfg.weight_decay);
            step += 1;
            epoch_loss += loss / batches_per_epoch as f64;
        }
        let v = val_loss(&model, &prep, &val_starts, cfg, k);
        report.train_loss.push(epoch_loss);
        report.val_nmse.push(v);
        report.epochs_run = epoch;
        if v < best.0 {
            best = (v, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    report.best_val_nmse = best.0;
    report.best_epoch = best.1;
    let twf = TwfModel {
        params: best.2.quantize(cfg.dropout),
        normalizer: prep.normalizer,
        window: cfg.window,
        blocks_per_hour: series.blocks_per_hour,
    };
    Ok((twf, report))
}

#[cfg(test)]
mod tests {
    use super::super::{forecast, ForecastSettings};
    use super::*;

    fn constant_series(n: usize, k: usize) -> LoadSeries {
        LoadSeries {
            loads: vec![vec![400; k]; n],
            gas: vec![400 * k as u64 * 650; n],
            start_height: 0,
            blocks_per_hour: 10,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 12,
            window: 8,
            seq_len: 16,
            warmup: 4,
            max_epochs: 15,
            batch_size: 16,
            stride: 4,
            lr: 5e-3,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_load_is_learned() {
        let s = constant_series(300, 2);
        let (m, rep) = train(&s, &small_cfg()).unwrap();
        assert!(rep.best_val_nmse <= rep.initial_val_nmse);
        let feats = s.features();
        let mut st = m.normalizer.clone();
        for f in &feats[..200] {
            st.observe(f);
        }
        let b = forecast(&m, &feats[200..208], &st, 207, &ForecastSettings::point(1), 0).unwrap();
        for v in &b.mean[0].0 {
            assert!((v.to_f64() - 400.0).abs() / 400.0 < 0.01, "{v:?}");
        }
    }

    #[test]
    fn too_short_series_errors() {
        let s = constant_series(20, 2);
        assert!(matches!(train(&s, &small_cfg()), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn train_loss_non_increasing_on_noise_free_target() {
        // smooth periodic target, no dropout, small steps
        let n = 400;
        let loads: Vec<Vec<u32>> = (0..n)
            .map(|t| {
                let s = (std::f64::consts::TAU * t as f64 / 240.0).sin();
                vec![(400.0 + 100.0 * s).round() as u32, (300.0 - 50.0 * s).round() as u32]
            })
            .collect();
        let gas = loads.iter().map(|r| r.iter().map(|x| *x as u64 * 650).sum()).collect();
        let s = LoadSeries { loads, gas, start_height: 0, blocks_per_hour: 10 };
        let cfg = TrainConfig { lr: 2e-3, max_epochs: 12, patience: 100, ..small_cfg() };
        let n_train = 320;
        let prep = prepare(&s, n_train, cfg.decay);
        let tr = starts(0, n_train, &cfg);
        let mut model = LstmF64::init(5, cfg.hidden, 2, 3);
        let mut opt = AdamW { m: model.zero_grads(), v: model.zero_grads(), t: 0 };
        let full = make_batch(&prep, &tr, &cfg, 2, None);
        let mut last = model.loss(&full);
        for _ in 0..cfg.max_epochs {
            let (_, g) = model.loss_and_grad(&full);
            opt.step(&mut model, &g, cfg.lr, 0.0);
            let l = model.loss(&full);
            assert!(l <= last + 1e-12, "{l} > {last}");
            last = l;
        }
    }
}
