//! Constrained PPO: GAE for reward and cost, clipped Lagrangian surrogate,
//! clipped critic losses, KL early stop and projected dual ascent on λ.

use serde::{Deserialize, Serialize};

use super::decode::{log_prob_entropy, log_prob_entropy_grad, DecodeStep};
use super::policy::{Forward, OutputGrads, PolicyInput, PolicyNet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Blocks per rollout (updates run every this many blocks).
    pub rollout: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub kl_max: f64,
    pub entropy: f64,
    pub lr: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    /// Step size of the dual variable.
    pub lambda_lr: f64,
    pub cost_target: f64,
    pub lambda_max: f64,
    pub lambda_init: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            rollout: 20,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 64,
            kl_max: 0.02,
            entropy: 0.02,
            lr: 3e-4,
            value_coef: 0.5,
            grad_clip: 0.5,
            lambda_lr: 0.05,
            cost_target: 0.0,
            lambda_max: 100.0,
            lambda_init: 0.0,
        }
    }
}

/// One block's decision with its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: PolicyInput,
    pub steps: Vec<DecodeStep>,
    pub old_log_prob: f64,
    pub value: f64,
    pub cost_value: f64,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub capacity: usize,
    pub items: Vec<Transition>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::with_capacity(capacity) }
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(self.items.len() < self.capacity);
        self.items.push(t);
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

/// Generalized advantage estimation over one continuing rollout.
/// Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], next_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { next_value };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Adam over the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Per-sample targets fixed before the optimization epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Targets {
    pub advantage: f64,
    pub ret: f64,
    pub cost_ret: f64,
}

fn clipped_value_grad(v: f64, v_old: f64, target: f64, clip: f64) -> (f64, f64) {
    let unclipped = (v - target).powi(2);
    let vc = v_old + (v - v_old).clamp(-clip, clip);
    let clipped = (vc - target).powi(2);
    if unclipped >= clipped {
        (0.5 * unclipped, v - target)
    } else {
        let inside = (v - v_old).abs() < clip;
        (0.5 * clipped, if inside { vc - target } else { 0.0 })
    }
}

/// Loss of one transition and its output gradients (averaging left to the caller).
pub fn sample_loss(
    net: &PolicyNet,
    tr: &Transition,
    tg: &Targets,
    cfg: &PpoConfig,
) -> (f64, OutputGrads, Forward) {
    let f = net.forward(&tr.input);
    let (lp, ent) = log_prob_entropy(&tr.steps, &f.logits, f.stop);
    let ratio = (lp - tr.old_log_prob).exp();
    let a = tg.advantage;
    let s1 = ratio * a;
    let s2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
    let surrogate = s1.min(s2);
    // d(-surrogate)/d lp is -ratio * a on the unclipped branch, 0 on the flat clipped one
    let d_lp = if s1 <= s2 { -ratio * a } else { 0.0 };
    let (lv, dv) = clipped_value_grad(f.value, tr.value, tg.ret, cfg.clip);
    let (lc, dc) = clipped_value_grad(f.cost_value, tr.cost_value, tg.cost_ret, cfg.clip);
    let loss = -surrogate + cfg.value_coef * (lv + lc) - cfg.entropy * ent;
    let (du, ds) = log_prob_entropy_grad(&tr.steps, &f.logits, f.stop, d_lp, -cfg.entropy);
    let grads = OutputGrads { logits: du, stop: ds, value: cfg.value_coef * dv, cost_value: cfg.value_coef * dc };
    (loss, grads, f)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub epochs_run: usize,
    pub mean_loss: f64,
    pub approx_kl: f64,
    pub mean_cost: f64,
    pub lambda: f64,
    pub early_stop: bool,
}

/// Builds advantage targets: GAE for both signals, Lagrangian mix, normalization.
pub fn targets(buf: &RolloutBuffer, next: (f64, f64), lambda: f64, cfg: &PpoConfig) -> Vec<Targets> {
    let r: Vec<f64> = buf.items.iter().map(|t| t.reward).collect();
    let c: Vec<f64> = buf.items.iter().map(|t| t.cost).collect();
    let v: Vec<f64> = buf.items.iter().map(|t| t.value).collect();
    let vc: Vec<f64> = buf.items.iter().map(|t| t.cost_value).collect();
    let (ar, rr) = gae(&r, &v, next.0, cfg.gamma, cfg.gae_lambda);
    let (ac, rc) = gae(&c, &vc, next.1, cfg.gamma, cfg.gae_lambda);
    let mut mix: Vec<f64> = ar.iter().zip(&ac).map(|(a, b)| a - lambda * b).collect();
    normalize(&mut mix);
    mix.iter().zip(rr.iter().zip(&rc)).map(|(a, (r, c))| Targets { advantage: *a, ret: *r, cost_ret: *c }).collect()
}

/// One Safe-PPO update. On a non-finite loss or gradient the parameters and
/// optimizer state are restored and an error is returned.
pub fn update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    lambda: &mut f64,
    buf: &RolloutBuffer,
    next: (f64, f64),
    cfg: &PpoConfig,
) -> Result<UpdateStats> {
    if buf.is_empty() {
        return Err(Error::NoRolloutSource);
    }
    let snapshot = (net.theta.clone(), opt.clone());
    let tg = targets(buf, next, *lambda, cfg);
    let mut stats = UpdateStats::default();
    let n = buf.len();
    let mut losses = 0.0;
    let mut count = 0usize;
    for epoch in 0..cfg.epochs {
        for start in (0..n).step_by(cfg.minibatch.max(1)) {
            let end = (start + cfg.minibatch.max(1)).min(n);
            let mut g = vec![0.0; net.num_params()];
            let mut mb_loss = 0.0;
            for i in start..end {
                let tr = &buf.items[i];
                let (loss, d, f) = sample_loss(net, tr, &tg[i], cfg);
                net.backward(&tr.input, &f, &d, &mut g);
                mb_loss += loss;
            }
            let m = (end - start) as f64;
            g.iter_mut().for_each(|v| *v /= m);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !mb_loss.is_finite() || !norm.is_finite() {
                net.theta = snapshot.0;
                *opt = snapshot.1;
                return Err(Error::Degenerate(format!("non-finite policy loss in epoch {epoch}")));
            }
            if norm > cfg.grad_clip {
                g.iter_mut().for_each(|v| *v *= cfg.grad_clip / norm);
            }
            opt.step(&mut net.theta, &g, cfg.lr);
            losses += mb_loss / m;
            count += 1;
        }
        stats.epochs_run = epoch + 1;
        let kl: f64 = buf
            .items
            .iter()
            .map(|tr| {
                let f = net.forward(&tr.input);
                tr.old_log_prob - log_prob_entropy(&tr.steps, &f.logits, f.stop).0
            })
            .sum::<f64>()
            / n as f64;
        stats.approx_kl = kl;
        if kl > cfg.kl_max {
            stats.early_stop = true;
            break;
        }
    }
    let mean_cost = buf.items.iter().map(|t| t.cost).sum::<f64>() / n as f64;
    *lambda = dual_step(*lambda, mean_cost, cfg);
    stats.mean_loss = losses / count.max(1) as f64;
    stats.mean_cost = mean_cost;
    stats.lambda = *lambda;
    Ok(stats)
}

/// Projected dual ascent `λ <- clamp(λ + η (c̄ - c̄_target), 0, λ_max)`.
pub fn dual_step(lambda: f64, mean_cost: f64, cfg: &PpoConfig) -> f64 {
    (lambda + cfg.lambda_lr * (mean_cost - cfg.cost_target)).clamp(0.0, cfg.lambda_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_matches_hand_recursion() {
        let (g, l) = (0.99, 0.95);
        let r = [1.0, 0.5, -0.2];
        let v = [0.3, 0.1, 0.4];
        let next = 0.2;
        let d2 = r[2] + g * next - v[2];
        let d1 = r[1] + g * v[2] - v[1];
        let d0 = r[0] + g * v[1] - v[0];
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (adv, ret) = gae(&r, &v, next, g, l);
        for (x, y) in adv.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((ret[0] - (a0 + v[0])).abs() < 1e-12);
    }

    #[test]
    fn dual_ascent_signs() {
        let cfg = PpoConfig::default();
        assert_eq!(dual_step(0.0, 0.0, &cfg), 0.0);
        assert_eq!(dual_step(0.7, 0.0, &cfg), 0.7);
        let mut l = 0.0;
        for _ in 0..5 {
            let next = dual_step(l, 0.015, &cfg);
            assert!(next > l);
            l = next;
        }
        assert_eq!(dual_step(99.999, 10.0, &cfg), cfg.lambda_max);
        let neg = PpoConfig { cost_target: 1.0, ..PpoConfig::default() };
        assert_eq!(dual_step(0.01, 0.0, &neg), 0.0);
    }

    #[test]
    fn clipped_value_branches() {
        // inside the clip range the two branches coincide
        let (l, g) = clipped_value_grad(1.1, 1.0, 0.0, 0.2);
        assert!((l - 0.5 * 1.21).abs() < 1e-12 && (g - 1.1).abs() < 1e-12);
        // far outside, moving away from the target: the unclipped branch is larger
        let (_, g) = clipped_value_grad(2.0, 1.0, 0.0, 0.2);
        assert_eq!(g, 2.0);
        // far outside, moving toward the target: clipped branch dominates, flat
        let (_, g) = clipped_value_grad(0.1, 1.0, 0.0, 0.2);
        assert_eq!(g, 0.0);
    }

    use crate::allocator::decode::{decode, log_prob_entropy, DecodeMode};
    use crate::allocator::{Candidate, PolicyInput, FEATURES};
    use crate::fixed::FixedPoint;
    use crate::types::{AccountId, ShardId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STATE: usize = 10;

    fn sampled(net: &PolicyNet, seed: u64) -> Transition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let input = PolicyInput {
            state: (0..STATE).map(|_| rng.random_range(-1.0..1.0)).collect(),
            features: (0..n * FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect(),
            prior: (0..n).map(|_| rng.random_range(0.0..4.0)).collect(),
        };
        let cands: Vec<Candidate> = (0..n as u64)
            .map(|a| Candidate {
                account: AccountId(a),
                shard: ShardId(0),
                load: FixedPoint::from_int(5),
                validator: false,
            })
            .collect();
        let proj = [FixedPoint::from_int(300), FixedPoint::ZERO, FixedPoint::ZERO];
        let f = net.forward(&input);
        let mut dr = ChaCha8Rng::seed_from_u64(seed + 1);
        // strong STOP bias would end most decodes at once; sample with it lowered
        let d = decode(&cands, &proj, 4, &f.logits, f.stop - 4.0, DecodeMode::Sample(&mut dr));
        let (lp, _) = log_prob_entropy(&d.steps, &f.logits, f.stop);
        Transition {
            input,
            steps: d.steps,
            old_log_prob: lp,
            value: f.value,
            cost_value: f.cost_value,
            reward: 0.0,
            cost: 0.0,
        }
    }

    fn full_grad(net: &PolicyNet, tr: &Transition, tg: &Targets, cfg: &PpoConfig) -> (f64, Vec<f64>) {
        let (loss, d, f) = sample_loss(net, tr, tg, cfg);
        let mut g = vec![0.0; net.num_params()];
        net.backward(&tr.input, &f, &d, &mut g);
        (loss, g)
    }

    #[test]
    fn unit_ratio_surrogate_is_the_advantage() {
        let net = PolicyNet::init(STATE, 4);
        let tr = sampled(&net, 9);
        assert!(!tr.steps.is_empty());
        let cfg = PpoConfig { value_coef: 0.0, entropy: 0.0, ..PpoConfig::default() };
        for a in [-1.5, 0.0, 2.0] {
            let tg = Targets { advantage: a, ret: 0.0, cost_ret: 0.0 };
            let (loss, d, f) = sample_loss(&net, &tr, &tg, &cfg);
            assert!((loss + a).abs() < 1e-12);
            let (du, ds) = crate::allocator::decode::log_prob_entropy_grad(&tr.steps, &f.logits, f.stop, -a, 0.0);
            assert_eq!(d.logits, du);
            assert_eq!(d.stop, ds);
        }
    }

    #[test]
    fn entropy_step_raises_entropy() {
        let mut net = PolicyNet::init(STATE, 6);
        let tr = sampled(&net, 2);
        let cfg = PpoConfig { value_coef: 0.0, entropy: 1.0, ..PpoConfig::default() };
        let tg = Targets { advantage: 0.0, ret: 0.0, cost_ret: 0.0 };
        let ent = |n: &PolicyNet| {
            let f = n.forward(&tr.input);
            log_prob_entropy(&tr.steps, &f.logits, f.stop).1
        };
        let mut prev = ent(&net);
        for _ in 0..5 {
            let (_, g) = full_grad(&net, &tr, &tg, &cfg);
            for (t, gi) in net.theta.iter_mut().zip(&g) {
                *t -= 1e-3 * gi;
            }
            let now = ent(&net);
            assert!(now > prev, "{now} <= {prev}");
            prev = now;
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = PolicyNet::init(STATE, 11);
        let tr = sampled(&net, 3);
        assert!(!tr.steps.is_empty());
        let cfg = PpoConfig::default();
        let tg = Targets { advantage: 0.7, ret: tr.value + 0.05, cost_ret: tr.cost_value - 0.05 };
        let (_, g) = full_grad(&net, &tr, &tg, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        let mut probes = 0;
        for _ in 0..150 {
            let i = rng.random_range(0..net.num_params());
            let mut p = net.clone();
            p.theta[i] += h;
            let mut m = net.clone();
            m.theta[i] -= h;
            let fd = (sample_loss(&p, &tr, &tg, &cfg).0 - sample_loss(&m, &tr, &tg, &cfg).0) / (2.0 * h);
            let tol = 1e-6 + 1e-4 * fd.abs().max(g[i].abs());
            assert!((fd - g[i]).abs() < tol, "param {i}: fd {fd} vs {}", g[i]);
            probes += 1;
        }
        assert!(probes >= 100);
    }
}
