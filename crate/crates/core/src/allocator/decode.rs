//! Sequential pointer decoding with dynamic masks.
//!
//! Logits are fixed for the whole decision. Each step masks chosen
//! candidates and any whose move would not strictly improve the projected
//! balance, picks a candidate or STOP, and updates the projected loads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Candidate;
use crate::fixed::FixedPoint;
use crate::types::{Move, ShardId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStep {
    /// Candidate indices selectable at this step.
    pub valid: Vec<u32>,
    /// Chosen candidate, or `None` for STOP.
    pub choice: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub moves: Vec<Move>,
    pub steps: Vec<DecodeStep>,
}

pub enum DecodeMode<'a, R: Rng> {
    Greedy,
    Sample(&'a mut R),
}

fn lowest(projected: &[FixedPoint]) -> usize {
    let mut best = 0;
    for (i, v) in projected.iter().enumerate() {
        if *v < projected[best] {
            best = i;
        }
    }
    best
}

/// Decodes up to `cap` moves. `projected` holds per-shard projected loads in
/// transactions per block; destinations are always the currently lowest shard.
pub fn decode<R: Rng>(
    candidates: &[Candidate],
    projected: &[FixedPoint],
    cap: usize,
    logits: &[f64],
    stop: f64,
    mut mode: DecodeMode<'_, R>,
) -> Decoded {
    debug_assert_eq!(candidates.len(), logits.len());
    let mut load = projected.to_vec();
    let mut taken = vec![false; candidates.len()];
    let mut out = Decoded::default();
    while out.moves.len() < cap {
        let dest = lowest(&load);
        let valid: Vec<u32> = candidates
            .iter()
            .enumerate()
            .filter(|(j, c)| {
                !taken[*j]
                    && c.load > FixedPoint::ZERO
                    && c.shard.index() != dest
                    && load[dest] + c.load < load[c.shard.index()]
            })
            .map(|(j, _)| j as u32)
            .collect();
        if valid.is_empty() {
            break;
        }
        let choice = match &mut mode {
            DecodeMode::Greedy => {
                let mut best: Option<u32> = None;
                let mut best_v = stop;
                for &j in &valid {
                    if logits[j as usize] > best_v {
                        best_v = logits[j as usize];
                        best = Some(j);
                    }
                }
                best
            }
            DecodeMode::Sample(rng) => {
                let p = step_probs(&valid, logits, stop);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &j) in valid.iter().enumerate() {
                    acc += p[i];
                    if u < acc {
                        pick = Some(j);
                        break;
                    }
                }
                pick
            }
        };
        out.steps.push(DecodeStep { valid, choice });
        let Some(j) = choice else { break };
        let c = &candidates[j as usize];
        taken[j as usize] = true;
        load[c.shard.index()] -= c.load;
        load[dest] += c.load;
        out.moves.push(Move { account: c.account, from: c.shard, to: ShardId(dest as u16) });
    }
    out
}

/// Softmax over `valid` logits followed by STOP (last entry).
pub fn step_probs(valid: &[u32], logits: &[f64], stop: f64) -> Vec<f64> {
    let mx = valid.iter().map(|j| logits[*j as usize]).fold(stop, f64::max);
    let mut p: Vec<f64> = valid.iter().map(|j| (logits[*j as usize] - mx).exp()).collect();
    p.push((stop - mx).exp());
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Log-probability and entropy of a recorded decode under `logits`.
pub fn log_prob_entropy(steps: &[DecodeStep], logits: &[f64], stop: f64) -> (f64, f64) {
    let mut lp = 0.0;
    let mut ent = 0.0;
    for s in steps {
        let p = step_probs(&s.valid, logits, stop);
        let idx = match s.choice {
            Some(c) => s.valid.iter().position(|j| *j == c).expect("choice among valid"),
            None => s.valid.len(),
        };
        lp += p[idx].max(f64::MIN_POSITIVE).ln();
        ent -= p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    (lp, ent)
}

/// Gradients of `a * log_prob + b * entropy` with respect to candidate logits and STOP.
pub fn log_prob_entropy_grad(steps: &[DecodeStep], logits: &[f64], stop: f64, a: f64, b: f64) -> (Vec<f64>, f64) {
    let mut du = vec![0.0; logits.len()];
    let mut ds = 0.0;
    for s in steps {
        let p = step_probs(&s.valid, logits, stop);
        let idx = match s.choice {
            Some(c) => s.valid.iter().position(|j| *j == c).expect("choice among valid"),
            None => s.valid.len(),
        };
        let h: f64 = -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        for (i, pi) in p.iter().enumerate() {
            let onehot = if i == idx { 1.0 } else { 0.0 };
            let lp_term = onehot - pi;
            let ent_term = if *pi > 0.0 { -pi * (pi.ln() + h) } else { 0.0 };
            let g = a * lp_term + b * ent_term;
            if i < s.valid.len() {
                du[s.valid[i] as usize] += g;
            } else {
                ds += g;
            }
        }
    }
    (du, ds)
}
