//! The model-based policy optimization loop: collect environment data, refit
//! the dynamics model, generate short model rollouts from recent real states
//! and train the agent on model data only.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    evaluate_model, DynamicsError, DynamicsModel, NeuralConfig, NeuralDynamics, Source, SymbolicDynamics, Transition,
};
use crate::envs::{Env, EnvKind};
use crate::sac::{ActionMode, ReplayBuffer, SacAgent, SacConfig, UpdateLosses};
use crate::sr::{GeneratorConfig, SrError};

/// Which dynamics model drives the loop. `Free` trains the same agent
/// directly on environment data, one interleaved schedule of updates per
/// epoch, as the model-free reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Symbolic,
    Neural,
    Oracle,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown model kind '{0}' (expected symbolic, neural, oracle or free)")]
pub struct UnknownModel(pub String);

impl FromStr for ModelKind {
    type Err = UnknownModel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "symbolic" => Ok(ModelKind::Symbolic),
            "neural" => Ok(ModelKind::Neural),
            "oracle" => Ok(ModelKind::Oracle),
            "free" => Ok(ModelKind::Free),
            _ => Err(UnknownModel(s.to_string())),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Symbolic => "symbolic",
            ModelKind::Neural => "neural",
            ModelKind::Oracle => "oracle",
            ModelKind::Free => "free",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub model: ModelKind,
    /// Epochs (N).
    pub epochs: usize,
    /// Environment transitions per epoch (n).
    pub env_steps: usize,
    /// Model rollouts per epoch (M).
    pub rollouts: usize,
    /// Rollout length (k).
    pub rollout_length: usize,
    /// Initial states are drawn from the last `q` environment transitions.
    pub initial_chunk: usize,
    /// Gradient updates per epoch (G).
    pub updates: usize,
    /// Uniform-random steps collected before the first epoch.
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once an evaluation reaches this mean return.
    pub stop_return: Option<f64>,
    pub seed: u64,
    pub sac: SacConfig,
    pub sr: GeneratorConfig,
    pub neural: NeuralConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::Pendulum,
            model: ModelKind::Symbolic,
            epochs: 100,
            env_steps: 200,
            rollouts: 400,
            rollout_length: 1,
            initial_chunk: 10_000,
            updates: 200,
            warmup_steps: 1000,
            eval_every: 1,
            eval_episodes: 5,
            stop_return: None,
            seed: 0,
            sac: SacConfig::default(),
            sr: GeneratorConfig { generations: 40, islands: 1, ..GeneratorConfig::default() },
            neural: NeuralConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {msg}")]
pub struct ConfigError {
    pub field: String,
    pub msg: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |field: &str, msg: &str| Err(ConfigError { field: field.into(), msg: msg.into() });
        for (field, v) in [
            ("epochs", self.epochs),
            ("env_steps", self.env_steps),
            ("rollouts", self.rollouts),
            ("rollout_length", self.rollout_length),
            ("initial_chunk", self.initial_chunk),
            ("updates", self.updates),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return err(field, "must be at least 1");
            }
        }
        let s = &self.sac;
        if s.hidden.is_empty() || s.hidden.contains(&0) {
            return err("sac.hidden", "need at least one non-empty hidden layer");
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return err("sac.lr", "must be positive");
        }
        if s.batch_size == 0 {
            return err("sac.batch_size", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&s.gamma) {
            return err("sac.gamma", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&s.tau) {
            return err("sac.tau", "must be in [0, 1]");
        }
        if !(s.init_alpha > 0.0 && s.init_alpha.is_finite()) {
            return err("sac.init_alpha", "must be positive");
        }
        if s.buffer_capacity == 0 {
            return err("sac.buffer_capacity", "must be at least 1");
        }
        if self.neural.hidden.contains(&0) || self.neural.batch_size == 0 {
            return err("neural", "layer widths and batch size must be positive");
        }
        self.sr.validate().map_err(|e| ConfigError { field: "sr".into(), msg: e.to_string() })
    }
}

/// Everything recorded about one epoch. Contains no timing so identical
/// seeds give identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub env_steps: usize,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    /// Held-out squared error per state coordinate of this epoch's model.
    pub model_mse: Vec<f64>,
    pub model_fit_failed: bool,
    /// Cumulative coordinate predictions that fell back to identity hold.
    pub model_fallbacks: u64,
    pub env_buffer: usize,
    pub model_buffer: usize,
    pub updates: u64,
    pub losses: UpdateLosses,
    pub alpha: f64,
}

/// Returns of a batch of evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        EvalResult { returns, mean, std }
    }
}

/// Runs `episodes` full episodes with the deterministic policy from resets
/// drawn with `seed`.
pub fn evaluate_policy(kind: EnvKind, agent: &SacAgent, episodes: usize, seed: u64) -> EvalResult {
    assert!(episodes >= 1, "need at least one episode");
    evaluate_with(kind, episodes, seed, |obs, rng| agent.sample_action(obs, ActionMode::Deterministic, rng).0)
}

/// Episode returns of an arbitrary policy, which receives the observation
/// and a random stream of its own.
pub fn evaluate_with(
    kind: EnvKind,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
) -> EvalResult {
    let mut reset_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    policy_rng.set_stream(1);
    let mut env = Env::new(kind);
    let returns = (0..episodes)
        .map(|_| {
            let mut obs = env.reset(&mut reset_rng);
            let mut total = 0.0;
            loop {
                let step = env.step(&policy(&obs, &mut policy_rng));
                total += step.reward;
                obs = step.obs;
                if step.truncated {
                    break total;
                }
            }
        })
        .collect();
    EvalResult::from_returns(returns)
}

/// Observer states of up to `count` records drawn uniformly from the last
/// `q` entries of `buffer`.
pub fn sample_initial_states<R: Rng + ?Sized>(
    kind: EnvKind,
    buffer: &[Transition],
    q: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, RunError> {
    if buffer.is_empty() {
        return Err(RunError::EmptyBuffer);
    }
    let chunk = &buffer[buffer.len() - q.min(buffer.len())..];
    Ok((0..count).map(|_| kind.observer(&chunk[rng.random_range(0..chunk.len())].obs)).collect())
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("no environment transitions to sample from")]
    EmptyBuffer,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Sr(#[from] SrError),
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// State of a training run between epochs.
pub struct Run {
    pub cfg: RunConfig,
    pub agent: SacAgent,
    /// All environment transitions (serves both model fitting and initial
    /// state sampling).
    pub env_buffer: Vec<Transition>,
    /// Model transitions, the agent's only training data in model-based
    /// modes.
    pub model_buffer: ReplayBuffer,
    model: Option<Box<dyn DynamicsModel>>,
    env: Env,
    env_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    rollout_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    epoch: usize,
    last_mse: Vec<f64>,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let spec = cfg.env.spec();
        let mut init_rng = stream(cfg.seed, 0);
        let agent = SacAgent::new(spec.obs_dim, &spec.action_low, &spec.action_high, cfg.sac.clone(), &mut init_rng);
        let model: Option<Box<dyn DynamicsModel>> = match cfg.model {
            ModelKind::Symbolic => Some(Box::new(SymbolicDynamics::identity(cfg.env).with_generator(cfg.sr.clone()))),
            ModelKind::Oracle => Some(Box::new(SymbolicDynamics::reference(cfg.env))),
            ModelKind::Neural => Some(Box::new(NeuralDynamics::new(cfg.env, cfg.neural.clone(), &mut init_rng))),
            ModelKind::Free => None,
        };
        let mut env = Env::new(cfg.env);
        let mut env_rng = stream(cfg.seed, 1);
        env.reset(&mut env_rng);
        let model_buffer = ReplayBuffer::new(cfg.sac.buffer_capacity);
        let mut run = Run {
            agent,
            env_buffer: Vec::new(),
            model_buffer,
            model,
            env,
            env_rng,
            act_rng: stream(cfg.seed, 2),
            rollout_rng: stream(cfg.seed, 3),
            update_rng: stream(cfg.seed, 4),
            epoch: 0,
            last_mse: vec![f64::NAN; spec.state_dim],
            cfg,
        };
        for _ in 0..run.cfg.warmup_steps {
            run.env_step(true);
        }
        Ok(run)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn env_steps(&self) -> usize {
        self.env_buffer.len()
    }

    pub fn model(&self) -> Option<&dyn DynamicsModel> {
        self.model.as_deref()
    }

    /// One environment step, continuing the current episode.
    fn env_step(&mut self, random: bool) {
        let obs = self.cfg.env.observe(self.env.state());
        let action = if random {
            self.env.spec().uniform_action(&mut self.act_rng)
        } else {
            self.agent.sample_action(&obs, ActionMode::Stochastic, &mut self.act_rng).0
        };
        let (t, truncated) = self.env.transition(&action);
        self.env_buffer.push(t);
        if truncated {
            self.env.reset(&mut self.env_rng);
        }
    }

    /// Appends `n` environment transitions under the current policy.
    pub fn collect_env_transitions(&mut self, n: usize) {
        for _ in 0..n {
            self.env_step(false);
        }
    }

    fn fit_model(&mut self) -> bool {
        let seed = self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(self.epoch as u64);
        let kind = self.cfg.env;
        let Some(model) = self.model.as_mut() else {
            return false;
        };
        let result = match self.cfg.model {
            ModelKind::Oracle => evaluate_model(model.as_ref(), kind, &self.env_buffer),
            _ => model.fit(&self.env_buffer, seed),
        };
        match result {
            Ok(fit) => {
                self.last_mse = fit.coord_mse;
                false
            }
            // keep the previous model and carry on
            Err(_) => true,
        }
    }

    /// `M` rollouts of length `k` from recent real states into the model
    /// buffer.
    fn generate_rollouts(&mut self) -> Result<(), RunError> {
        let kind = self.cfg.env;
        let spec = kind.spec();
        let model = self.model.as_deref().expect("model-based mode");
        let mut states =
            sample_initial_states(kind, &self.env_buffer, self.cfg.initial_chunk, self.cfg.rollouts, &mut self.rollout_rng)?;
        for _ in 0..self.cfg.rollout_length {
            let obs: Vec<Vec<f64>> = states.iter().map(|s| kind.observe(s)).collect();
            let mut obs_m = Array2::zeros((obs.len(), spec.obs_dim));
            for (r, o) in obs.iter().enumerate() {
                for (j, v) in o.iter().enumerate() {
                    obs_m[[r, j]] = *v;
                }
            }
            let acts = self.agent.sample_actions_batch(obs_m.view(), &mut self.rollout_rng);
            let actions: Vec<Vec<f64>> = acts.rows().into_iter().map(|r| r.to_vec()).collect();
            let next = model.predict_batch(&states, &actions)?;
            for (((s, o), a), n) in states.iter().zip(obs).zip(&actions).zip(&next) {
                self.model_buffer.push(Transition {
                    reward: kind.reward(s, a, n),
                    state: s.clone(),
                    obs: o,
                    action: a.clone(),
                    next_state: n.clone(),
                    next_obs: kind.observe(n),
                    done: false,
                    source: Source::Model,
                });
            }
            states = next;
        }
        Ok(())
    }

    fn sac_update(&mut self, from_env: bool) -> UpdateLosses {
        let b = self.cfg.sac.batch_size;
        let batch: Vec<&Transition> = if from_env {
            (0..b).map(|_| &self.env_buffer[self.update_rng.random_range(0..self.env_buffer.len())]).collect()
        } else {
            let batch = self.model_buffer.sample(b, &mut self.update_rng);
            debug_assert!(batch.iter().all(|t| t.source == Source::Model));
            batch
        };
        self.agent.update(&batch, &mut self.update_rng)
    }

    /// One epoch in loop order: collect, fit, roll out, update, evaluate.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, RunError> {
        self.epoch += 1;
        let n = self.cfg.env_steps;
        let g = self.cfg.updates;
        let mut sum = LossSum::default();
        let mut fit_failed = false;
        if self.cfg.model == ModelKind::Free {
            for i in 0..n {
                self.env_step(false);
                let todo = (i + 1) * g / n - i * g / n;
                for _ in 0..todo {
                    let l = self.sac_update(true);
                    sum.add(&l);
                }
            }
        } else {
            self.collect_env_transitions(n);
            fit_failed = self.fit_model();
            self.generate_rollouts()?;
            for _ in 0..g {
                let l = self.sac_update(false);
                sum.add(&l);
            }
        }
        let eval = (self.epoch % self.cfg.eval_every == 0).then(|| self.evaluate());
        let fallbacks = self.model.as_deref().map_or(0, |m| m.fallbacks());
        Ok(EpochMetrics {
            epoch: self.epoch,
            env_steps: self.env_steps(),
            eval_return_mean: eval.as_ref().map(|e| e.mean),
            eval_return_std: eval.as_ref().map(|e| e.std),
            model_mse: if self.model.is_some() { self.last_mse.clone() } else { Vec::new() },
            model_fit_failed: fit_failed,
            model_fallbacks: fallbacks,
            env_buffer: self.env_buffer.len(),
            model_buffer: self.model_buffer.len(),
            updates: self.agent.updates(),
            losses: sum.mean(),
            alpha: self.agent.alpha(),
        })
    }

    /// Evaluation on a fixed set of start states per run.
    pub fn evaluate(&self) -> EvalResult {
        evaluate_policy(self.cfg.env, &self.agent, self.cfg.eval_episodes, self.cfg.seed ^ 0x5eed_e7a1)
    }

    /// Text of the current symbolic model, if any.
    pub fn model_text(&self) -> Option<String> {
        self.model.as_deref().and_then(|m| m.to_text())
    }
}

#[derive(Default)]
struct LossSum {
    n: usize,
    total: UpdateLosses,
}

impl LossSum {
    fn add(&mut self, l: &UpdateLosses) {
        self.n += 1;
        let t = &mut self.total;
        t.q1 += l.q1;
        t.q2 += l.q2;
        t.policy += l.policy;
        t.alpha += l.alpha;
        t.alpha_value += l.alpha_value;
        t.entropy += l.entropy;
    }

    fn mean(&self) -> UpdateLosses {
        if self.n == 0 {
            return UpdateLosses::default();
        }
        let k = 1.0 / self.n as f64;
        let t = &self.total;
        UpdateLosses {
            q1: t.q1 * k,
            q2: t.q2 * k,
            policy: t.policy * k,
            alpha: t.alpha * k,
            alpha_value: t.alpha_value * k,
            entropy: t.entropy * k,
        }
    }
}

/// Outcome of a complete run.
pub struct RunResult {
    pub metrics: Vec<EpochMetrics>,
    pub agent: SacAgent,
    pub model_text: Option<String>,
    /// Environment steps at the first evaluation reaching `stop_return`.
    pub reached_at: Option<usize>,
}

/// Runs all epochs, passing the run state and every record to `on_epoch` as
/// it completes.
pub fn run_training(cfg: RunConfig, mut on_epoch: impl FnMut(&Run, &EpochMetrics)) -> Result<RunResult, RunError> {
    let mut run = Run::new(cfg)?;
    let mut metrics = Vec::with_capacity(run.cfg.epochs);
    let mut reached_at = None;
    for _ in 0..run.cfg.epochs {
        let m = run.run_epoch()?;
        on_epoch(&run, &m);
        let stop = match (run.cfg.stop_return, m.eval_return_mean) {
            (Some(goal), Some(ret)) if ret >= goal => {
                reached_at = Some(m.env_steps);
                true
            }
            _ => false,
        };
        metrics.push(m);
        if stop {
            break;
        }
    }
    Ok(RunResult { model_text: run.model_text(), agent: run.agent, metrics, reached_at })
}
