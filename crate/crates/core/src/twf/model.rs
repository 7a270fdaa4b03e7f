use serde_json::json;

use super::quant::LstmParams;
use super::NormalizerState;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::hash::Digest256;

/// A trained forecaster: quantized LSTM, the normalizer state it was trained
/// against, and the feature layout it expects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwfModel {
    pub params: LstmParams,
    /// Normalizer state at the start of any stream fed to this model.
    pub normalizer: NormalizerState,
    /// Input window length W.
    pub window: usize,
    pub blocks_per_hour: u32,
}

impl TwfModel {
    pub fn num_shards(&self) -> usize {
        self.params.outputs
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let p = &self.params;
        let mut c = Checkpoint::new(
            CheckpointKind::Forecaster,
            json!({
                "shards": p.outputs,
                "hidden": p.hidden,
                "window": self.window,
                "blocks_per_hour": self.blocks_per_hour,
                "dropout_raw": p.dropout.raw(),
                "decay_raw": self.normalizer.decay.raw(),
            }),
        );
        c.push("lstm.w", p.w.clone());
        c.push("lstm.b", p.b.clone());
        c.push("out.w", p.w_out.clone());
        c.push("out.b", p.b_out.clone());
        c.push("norm.mean", self.normalizer.mean.clone());
        c.push("norm.var", self.normalizer.var.clone());
        c
    }

    pub fn content_hash(&self) -> Digest256 {
        self.to_checkpoint().content_hash()
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != CheckpointKind::Forecaster {
            return Err(Error::Checkpoint("not a forecaster checkpoint".into()));
        }
        let get = |key: &str| {
            c.meta
                .get(key)
                .and_then(|v| v.as_i64())
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field {key}")))
        };
        let k = get("shards")? as usize;
        let hidden = get("hidden")? as usize;
        let inputs = k + 3;
        let params = LstmParams::new(
            inputs,
            hidden,
            k,
            FixedPoint::from_raw(get("dropout_raw")?),
            c.tensor_len("lstm.w", 4 * hidden * (inputs + hidden))?,
            c.tensor_len("lstm.b", 4 * hidden)?,
            c.tensor_len("out.w", k * hidden)?,
            c.tensor_len("out.b", k)?,
        );
        let normalizer = NormalizerState {
            mean: c.tensor_len("norm.mean", k + 1)?,
            var: c.tensor_len("norm.var", k + 1)?,
            decay: FixedPoint::from_raw(get("decay_raw")?),
        };
        Ok(Self {
            params,
            normalizer,
            window: get("window")? as usize,
            blocks_per_hour: get("blocks_per_hour")? as u32,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<Digest256> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
