//! Soft actor-critic with a tanh-squashed Gaussian policy, twin critics,
//! Polyak-averaged target critics and automatic temperature tuning.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::Transition;
use crate::nn::{Adam, Mlp, ScalarAdam};

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub init_alpha: f64,
    /// Defaults to `-action_dim` when unset.
    pub target_entropy: Option<f64>,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![128, 128],
            lr: 3e-4,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            init_alpha: 1.0,
            target_entropy: None,
            buffer_capacity: 100_000,
        }
    }
}

/// Bounded FIFO store of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Transition> + ExactSizeIterator {
        self.items.iter()
    }

    /// The most recent `q` entries (all of them if fewer), oldest first.
    pub fn recent(&self, q: usize) -> impl Iterator<Item = &Transition> {
        let skip = self.items.len().saturating_sub(q);
        self.items.iter().skip(skip)
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        (0..batch).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// A diagonal Gaussian squashed by tanh and mapped affinely onto the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub scale: Vec<f64>,
    pub center: Vec<f64>,
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
#[inline]
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl SquashedGaussian {
    /// Log density of the action obtained from pre-squash value `u = mean + std * xi`.
    pub fn log_prob_pre_squash(&self, xi: &[f64], u: &[f64]) -> f64 {
        (0..self.mean.len())
            .map(|i| {
                -0.5 * xi[i] * xi[i] - self.log_std[i] - HALF_LOG_TWO_PI
                    - log_one_minus_tanh_sq(u[i])
                    - self.scale[i].ln()
            })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let xi: Vec<f64> = self.mean.iter().map(|_| rng.sample(StandardNormal)).collect();
        let u: Vec<f64> = (0..self.mean.len()).map(|i| self.mean[i] + self.log_std[i].exp() * xi[i]).collect();
        let a = (0..u.len()).map(|i| self.center[i] + self.scale[i] * u[i].tanh()).collect();
        (a, self.log_prob_pre_squash(&xi, &u))
    }

    pub fn mode(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.center[i] + self.scale[i] * self.mean[i].tanh()).collect()
    }

    /// Log density at an action strictly inside the box.
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        let u: Vec<f64> = (0..action.len())
            .map(|i| ((action[i] - self.center[i]) / self.scale[i]).atanh())
            .collect();
        let xi: Vec<f64> = (0..u.len()).map(|i| (u[i] - self.mean[i]) / self.log_std[i].exp()).collect();
        self.log_prob_pre_squash(&xi, &u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// Soft Bellman target for one transition.
pub fn soft_target(reward: f64, gamma: f64, done: bool, min_q: f64, alpha: f64, log_prob: f64) -> f64 {
    let cont = if done { 0.0 } else { 1.0 };
    reward + gamma * cont * (min_q - alpha * log_prob)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLosses {
    pub q1: f64,
    pub q2: f64,
    pub policy: f64,
    pub alpha: f64,
    pub alpha_value: f64,
    pub entropy: f64,
}

/// Everything needed to run the trained policy elsewhere: the network maps
/// an observation to `(mean, log_std)` pre-squash, actions are
/// `center + scale * tanh(mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub network: Mlp,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub cfg: SacConfig,
    obs_dim: usize,
    act_dim: usize,
    scale: Vec<f64>,
    center: Vec<f64>,
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    opt_policy: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: ScalarAdam,
    updates: u64,
}

/// Per-sample policy outputs for a batch.
struct PolicyBatch {
    u: Array2<f64>,
    xi: Array2<f64>,
    std: Array2<f64>,
    log_std_clamped: Array2<bool>,
    actions: Array2<f64>,
    log_prob: Array1<f64>,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, low: &[f64], high: &[f64], cfg: SacConfig, rng: &mut R) -> Self {
        assert_eq!(low.len(), high.len());
        let act_dim = low.len();
        let mut sizes = vec![obs_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(2 * act_dim);
        let mut policy = Mlp::new(&sizes, rng);
        policy.scale_output(0.01);
        let mut qsizes = vec![obs_dim + act_dim];
        qsizes.extend(&cfg.hidden);
        qsizes.push(1);
        let q1 = Mlp::new(&qsizes, rng);
        let q2 = Mlp::new(&qsizes, rng);
        let lr = cfg.lr;
        SacAgent {
            obs_dim,
            act_dim,
            scale: low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect(),
            center: low.iter().zip(high).map(|(l, h)| 0.5 * (h + l)).collect(),
            opt_policy: Adam::new(&policy, lr),
            opt_q1: Adam::new(&q1, lr),
            opt_q2: Adam::new(&q2, lr),
            opt_alpha: ScalarAdam::new(lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            log_alpha: cfg.init_alpha.ln(),
            policy,
            q1,
            q2,
            updates: 0,
            cfg,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn policy_snapshot(&self) -> PolicySnapshot {
        PolicySnapshot { center: self.center.clone(), scale: self.scale.clone(), network: self.policy.clone() }
    }

    pub fn action_dim(&self) -> usize {
        self.act_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-(self.act_dim as f64))
    }

    /// Action distribution at one observation.
    pub fn distribution(&self, obs: &[f64]) -> SquashedGaussian {
        let out = self.policy.predict_one(obs).expect("observation width");
        let (mean, log_std) = out.split_at(self.act_dim);
        SquashedGaussian {
            mean: mean.to_vec(),
            log_std: log_std.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
            scale: self.scale.clone(),
            center: self.center.clone(),
        }
    }

    /// Returns an action strictly inside the bounds and its log density
    /// (NaN in deterministic mode).
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], mode: ActionMode, rng: &mut R) -> (Vec<f64>, f64) {
        let dist = self.distribution(obs);
        match mode {
            ActionMode::Stochastic => {
                let (a, lp) = dist.sample(rng);
                (self.clamp_inside(a), lp)
            }
            ActionMode::Deterministic => (self.clamp_inside(dist.mode()), f64::NAN),
        }
    }

    /// tanh saturates to exactly ±1 in floating point; pull such actions back
    /// inside the open box.
    fn clamp_inside(&self, mut a: Vec<f64>) -> Vec<f64> {
        for i in 0..a.len() {
            let lo = self.center[i] - self.scale[i];
            let hi = self.center[i] + self.scale[i];
            if a[i] <= lo {
                a[i] = lo.next_up();
            } else if a[i] >= hi {
                a[i] = hi.next_down();
            }
        }
        a
    }

    /// Samples actions for a batch of observations (n × obs_dim).
    pub fn sample_actions_batch<R: Rng + ?Sized>(&self, obs: ArrayView2<'_, f64>, rng: &mut R) -> Array2<f64> {
        let out = self.policy.predict(obs);
        let pb = self.squash_batch(&out, rng);
        let mut actions = pb.actions;
        for mut row in actions.rows_mut() {
            let fixed = self.clamp_inside(row.to_vec());
            row.assign(&Array1::from(fixed));
        }
        actions
    }

    fn squash_batch<R: Rng + ?Sized>(&self, out: &Array2<f64>, rng: &mut R) -> PolicyBatch {
        let n = out.nrows();
        let d = self.act_dim;
        let mean = out.slice(s![.., ..d]);
        let raw_log_std = out.slice(s![.., d..]);
        let log_std_clamped = raw_log_std.mapv(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let std = log_std.mapv(f64::exp);
        let xi = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        let u = &mean + &(&std * &xi);
        let mut actions = Array2::zeros((n, d));
        let mut log_prob = Array1::zeros(n);
        for r in 0..n {
            let mut lp = 0.0;
            for i in 0..d {
                let ui = u[[r, i]];
                actions[[r, i]] = self.center[i] + self.scale[i] * ui.tanh();
                lp += -0.5 * xi[[r, i]] * xi[[r, i]] - log_std[[r, i]] - HALF_LOG_TWO_PI
                    - log_one_minus_tanh_sq(ui)
                    - self.scale[i].ln();
            }
            log_prob[r] = lp;
        }
        PolicyBatch { u, xi, std, log_std_clamped, actions, log_prob }
    }

    fn q_input(obs: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[obs, actions]).expect("matching rows")
    }

    /// Soft Bellman targets for a batch, with fresh next actions.
    pub fn critic_targets<R: Rng + ?Sized>(
        &self,
        rewards: &[f64],
        next_obs: ArrayView2<'_, f64>,
        dones: &[bool],
        rng: &mut R,
    ) -> Vec<f64> {
        let out = self.policy.predict(next_obs);
        let pb = self.squash_batch(&out, rng);
        let input = Self::q_input(next_obs, pb.actions.view());
        let t1 = self.q1_target.predict(input.view());
        let t2 = self.q2_target.predict(input.view());
        let alpha = self.alpha();
        (0..rewards.len())
            .map(|r| {
                let min_q = t1[[r, 0]].min(t2[[r, 0]]);
                soft_target(rewards[r], self.cfg.gamma, dones[r], min_q, alpha, pb.log_prob[r])
            })
            .collect()
    }

    /// One gradient step on both critics, the policy and the temperature,
    /// followed by a target-network update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> UpdateLosses {
        assert!(!batch.is_empty(), "empty batch");
        let n = batch.len();
        let obs = rows(batch.iter().map(|t| t.obs.as_slice()), self.obs_dim);
        let next_obs = rows(batch.iter().map(|t| t.next_obs.as_slice()), self.obs_dim);
        let actions = rows(batch.iter().map(|t| t.action.as_slice()), self.act_dim);
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();

        let targets = self.critic_targets(&rewards, next_obs.view(), &dones, rng);
        let q_in = Self::q_input(obs.view(), actions.view());
        let q1_loss = critic_step(&mut self.q1, &mut self.opt_q1, q_in.view(), &targets);
        let q2_loss = critic_step(&mut self.q2, &mut self.opt_q2, q_in.view(), &targets);

        // policy, reparameterized through the critics
        let (out, tape) = self.policy.forward_batch(obs.view());
        let pb = self.squash_batch(&out, rng);
        let pi_in = Self::q_input(obs.view(), pb.actions.view());
        let (v1, tape1) = self.q1.forward_batch(pi_in.view());
        let (v2, tape2) = self.q2.forward_batch(pi_in.view());
        let alpha = self.alpha();
        let inv_n = 1.0 / n as f64;
        let mut up1 = Array2::zeros((n, 1));
        let mut up2 = Array2::zeros((n, 1));
        let mut policy_loss = 0.0;
        for r in 0..n {
            let (a, b) = (v1[[r, 0]], v2[[r, 0]]);
            if a <= b {
                up1[[r, 0]] = 1.0;
            } else {
                up2[[r, 0]] = 1.0;
            }
            policy_loss += alpha * pb.log_prob[r] - a.min(b);
        }
        policy_loss *= inv_n;
        let (_, dx1) = self.q1.backward(&tape1, up1.view());
        let (_, dx2) = self.q2.backward(&tape2, up2.view());
        let d = self.act_dim;
        let mut d_out = Array2::zeros((n, 2 * d));
        for r in 0..n {
            for i in 0..d {
                let u = pb.u[[r, i]];
                let th = u.tanh();
                let da_du = self.scale[i] * (1.0 - th * th);
                // dL/da from -min(Q1, Q2), averaged over the batch
                let dl_da = -(dx1[[r, self.obs_dim + i]] + dx2[[r, self.obs_dim + i]]) * inv_n;
                let noise = pb.std[[r, i]] * pb.xi[[r, i]];
                d_out[[r, i]] = alpha * inv_n * 2.0 * th + dl_da * da_du;
                if !pb.log_std_clamped[[r, i]] {
                    d_out[[r, d + i]] = alpha * inv_n * (-1.0 + 2.0 * th * noise) + dl_da * da_du * noise;
                }
            }
        }
        let (g, _) = self.policy.backward(&tape, d_out.view());
        self.opt_policy.step(&mut self.policy, &g);

        // temperature
        let mean_log_prob = pb.log_prob.sum() * inv_n;
        let target = self.target_entropy();
        let alpha_grad = -(mean_log_prob + target);
        let alpha_loss = -self.log_alpha * (mean_log_prob + target);
        self.opt_alpha.step(&mut self.log_alpha, alpha_grad);

        self.q1_target.soft_update_from(&self.q1, self.cfg.tau);
        self.q2_target.soft_update_from(&self.q2, self.cfg.tau);
        self.updates += 1;
        UpdateLosses {
            q1: q1_loss,
            q2: q2_loss,
            policy: policy_loss,
            alpha: alpha_loss,
            alpha_value: self.alpha(),
            entropy: -mean_log_prob,
        }
    }
}

fn rows<'a>(it: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Array2<f64> {
    let n = it.len();
    let mut flat = Vec::with_capacity(n * width);
    for r in it {
        debug_assert_eq!(r.len(), width);
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((n, width), flat).expect("row widths")
}

/// One step of mean-squared-error regression of `net` toward `targets`.
/// Returns the loss before the step.
fn critic_step(net: &mut Mlp, opt: &mut Adam, input: ArrayView2<'_, f64>, targets: &[f64]) -> f64 {
    let n = targets.len();
    let (q, tape) = net.forward_batch(input);
    let mut dq = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for r in 0..n {
        let e = q[[r, 0]] - targets[r];
        loss += e * e;
        dq[[r, 0]] = 2.0 * e / n as f64;
    }
    let (g, _) = net.backward(&tape, dq.view());
    opt.step(net, &g);
    loss / n as f64
}
