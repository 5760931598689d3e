//! Dynamics models over compact states: symbolic (one expression per state
//! coordinate) and a neural baseline, plus model rollouts and multi-step
//! prediction error.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvSpec};
use crate::expr::{parse_with_names, ExprTree, ParseError};
use crate::fit::{Dataset, FitError, FitReport};
use crate::nn::{Adam, Mlp};
use crate::sr::{fit_dimension, DimensionFit, GeneratorConfig, GpGenerator, SrError};

/// Where a transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Env,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// Set only by environment termination rules; never by a model.
    pub done: bool,
    pub source: Source,
}

/// Minimum number of transitions a model fit accepts.
pub const MIN_FIT_TRANSITIONS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {need} transitions, got {got}")]
    TooFewTransitions { need: usize, got: usize },
    #[error("fitting coordinate {coord}: {source}")]
    Sr { coord: String, source: SrError },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("model file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("model file line {line}: {source}")]
    Parse { line: usize, source: ParseError },
}

/// Per-coordinate held-out quality of a model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub coord_mse: Vec<f64>,
    pub coord_r2: Vec<f64>,
}

impl ModelFit {
    fn from_reports(reports: &[FitReport]) -> Self {
        ModelFit {
            coord_mse: reports.iter().map(|r| r.mse).collect(),
            coord_r2: reports.iter().map(|r| r.r2).collect(),
        }
    }
}

/// A deterministic map `(state, action) -> next state`.
pub trait DynamicsModel: Send + Sync {
    fn env_spec(&self) -> &EnvSpec;

    fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, DynamicsError>;

    /// Predicts many transitions; results are in input order.
    fn predict_batch(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        states.iter().zip(actions).map(|(s, a)| self.predict(s, a)).collect()
    }

    /// Refits the model on environment transitions. `seed` drives every
    /// random choice of the fit.
    fn fit(&mut self, data: &[Transition], seed: u64) -> Result<ModelFit, DynamicsError>;

    /// Text form for persistence, when the model has one.
    fn to_text(&self) -> Option<String> {
        None
    }

    /// Number of coordinate predictions that fell back to holding the
    /// current value because the model could not evaluate them.
    fn fallbacks(&self) -> u64 {
        0
    }
}

fn check_dims(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<(), DynamicsError> {
    if s.len() != spec.state_dim {
        return Err(DynamicsError::Dimension { expected: spec.state_dim, got: s.len() });
    }
    if a.len() != spec.action_dim {
        return Err(DynamicsError::Dimension { expected: spec.action_dim, got: a.len() });
    }
    Ok(())
}

/// Input rows `[g(obs), a]` and per-coordinate targets. Next-state angles are
/// unwrapped relative to the current state.
pub fn model_dataset(kind: EnvKind, data: &[Transition]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let spec = kind.spec();
    let mut cols = vec![Vec::with_capacity(data.len()); spec.input_dim()];
    let mut targets = vec![Vec::with_capacity(data.len()); spec.state_dim];
    for t in data {
        let s = kind.observer(&t.obs);
        let next = spec.unwrap_next(&s, &kind.observer(&t.next_obs));
        for (c, v) in cols.iter_mut().zip(s.iter().chain(&t.action)) {
            c.push(*v);
        }
        for (c, v) in targets.iter_mut().zip(&next) {
            c.push(*v);
        }
    }
    (cols, targets)
}

/// One expression per state coordinate over `[state, action]` inputs.
#[derive(Debug)]
pub struct SymbolicDynamics {
    kind: EnvKind,
    spec: EnvSpec,
    exprs: Vec<ExprTree>,
    pub gen_cfg: GeneratorConfig,
    fallbacks: AtomicU64,
}

impl Clone for SymbolicDynamics {
    fn clone(&self) -> Self {
        SymbolicDynamics {
            kind: self.kind,
            spec: self.spec.clone(),
            exprs: self.exprs.clone(),
            gen_cfg: self.gen_cfg.clone(),
            fallbacks: AtomicU64::new(self.fallbacks.load(Ordering::Relaxed)),
        }
    }
}

impl SymbolicDynamics {
    /// Builds a model from expressions; every tree must validate for the
    /// input dimension (the node budget is not enforced since fitted trees
    /// carry folded scaling).
    pub fn new(kind: EnvKind, exprs: Vec<ExprTree>) -> Result<Self, DynamicsError> {
        let spec = kind.spec();
        if exprs.len() != spec.state_dim {
            return Err(DynamicsError::Dimension { expected: spec.state_dim, got: exprs.len() });
        }
        for (i, e) in exprs.iter().enumerate() {
            e.validate_with(spec.input_dim(), usize::MAX).map_err(|v| DynamicsError::Parse {
                line: i + 1,
                source: ParseError::Invalid(v),
            })?;
        }
        Ok(SymbolicDynamics { kind, spec, exprs, gen_cfg: GeneratorConfig::default(), fallbacks: AtomicU64::new(0) })
    }

    /// Every coordinate holds its value.
    pub fn identity(kind: EnvKind) -> Self {
        let exprs = (0..kind.spec().state_dim).map(ExprTree::var).collect();
        SymbolicDynamics::new(kind, exprs).expect("identity expressions are valid")
    }

    /// The exact dynamics written as expressions.
    pub fn reference(kind: EnvKind) -> Self {
        let text: String = kind
            .spec()
            .state_names
            .iter()
            .zip(kind.reference_expressions())
            .map(|(n, e)| format!("{n}\t{e}\n"))
            .collect();
        SymbolicDynamics::from_text(kind, &text).expect("reference expressions parse")
    }

    pub fn with_generator(mut self, cfg: GeneratorConfig) -> Self {
        self.gen_cfg = cfg;
        self
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn exprs(&self) -> &[ExprTree] {
        &self.exprs
    }

    /// Parses the `<coord>\t<expr>` per line format.
    pub fn from_text(kind: EnvKind, text: &str) -> Result<Self, DynamicsError> {
        let spec = kind.spec();
        let names = spec.input_names();
        let mut exprs = vec![None; spec.state_dim];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (coord, body) = line.split_once('\t').ok_or_else(|| DynamicsError::Format {
                line: i + 1,
                msg: "expected '<coord>\\t<expression>'".into(),
            })?;
            let pos = spec.state_names.iter().position(|n| *n == coord.trim()).ok_or_else(|| {
                DynamicsError::Format { line: i + 1, msg: format!("unknown coordinate '{coord}'") }
            })?;
            let tree = parse_with_names(body, &names).map_err(|source| DynamicsError::Parse { line: i + 1, source })?;
            exprs[pos] = Some(tree);
        }
        let exprs = exprs
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                e.ok_or_else(|| DynamicsError::Format {
                    line: 0,
                    msg: format!("missing coordinate '{}'", spec.state_names[i]),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        SymbolicDynamics::new(kind, exprs)
    }

    pub fn text(&self) -> String {
        let names = self.spec.input_names();
        self.spec
            .state_names
            .iter()
            .zip(&self.exprs)
            .map(|(n, e)| format!("{n}\t{}\n", e.display_with(&names)))
            .collect()
    }
}

impl DynamicsModel for SymbolicDynamics {
    fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        check_dims(&self.spec, s, a)?;
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let mut next: Vec<f64> = self
            .exprs
            .iter()
            .zip(s)
            .map(|(e, &cur)| match e.evaluate(&x) {
                Ok(v) => v,
                Err(_) => {
                    self.fallbacks.fetch_add(1, Ordering::Relaxed);
                    cur
                }
            })
            .collect();
        self.spec.canonicalize(&mut next);
        Ok(next)
    }

    fn predict_batch(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        for (s, a) in states.iter().zip(actions) {
            check_dims(&self.spec, s, a)?;
        }
        let n = states.len();
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); self.spec.input_dim()];
        for (s, a) in states.iter().zip(actions) {
            for (c, v) in cols.iter_mut().zip(s.iter().chain(a)) {
                c.push(*v);
            }
        }
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let mut out = states.to_vec();
        for (j, e) in self.exprs.iter().enumerate() {
            let pred = e.eval_columns(&refs, n);
            for (row, p) in out.iter_mut().zip(pred) {
                if p.is_nan() {
                    self.fallbacks.fetch_add(1, Ordering::Relaxed);
                } else {
                    row[j] = p;
                }
            }
        }
        for row in &mut out {
            self.spec.canonicalize(row);
        }
        Ok(out)
    }

    fn fit(&mut self, data: &[Transition], seed: u64) -> Result<ModelFit, DynamicsError> {
        let (model, fits) = fit_symbolic(self.kind, data, &self.gen_cfg, seed)?;
        self.exprs = model.exprs;
        let reports: Vec<FitReport> = fits.iter().map(|f| f.report).collect();
        Ok(ModelFit::from_reports(&reports))
    }

    fn to_text(&self) -> Option<String> {
        Some(self.text())
    }

    fn fallbacks(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }
}

/// Fits one expression per state coordinate. Coordinate `i` uses seed
/// `seed + i`.
pub fn fit_symbolic(
    kind: EnvKind,
    data: &[Transition],
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(SymbolicDynamics, Vec<DimensionFit>), DynamicsError> {
    if data.len() < MIN_FIT_TRANSITIONS {
        return Err(DynamicsError::TooFewTransitions { need: MIN_FIT_TRANSITIONS, got: data.len() });
    }
    let spec = kind.spec();
    let (cols, targets) = model_dataset(kind, data);
    let gen = GpGenerator::new(cfg.clone());
    let mut fits = Vec::with_capacity(spec.state_dim);
    for (i, y) in targets.into_iter().enumerate() {
        let sr_err = |source| DynamicsError::Sr { coord: spec.state_names[i].to_string(), source };
        let ds = Dataset::from_columns(cols.clone(), y).map_err(|e| sr_err(SrError::Fit(e)))?;
        let fit = fit_dimension(&ds, &gen, cfg.n_candidates, cfg.max_rows, seed.wrapping_add(i as u64))
            .map_err(sr_err)?;
        fits.push(fit);
    }
    let exprs = fits.iter().map(|f| f.tree.clone()).collect();
    let model = SymbolicDynamics::new(kind, exprs)?.with_generator(cfg.clone());
    Ok((model, fits))
}

/// Held-out quality of a fixed model, per state coordinate, with angle
/// errors wrapped.
pub fn evaluate_model(model: &dyn DynamicsModel, kind: EnvKind, data: &[Transition]) -> Result<ModelFit, DynamicsError> {
    let spec = kind.spec();
    let states: Vec<Vec<f64>> = data.iter().map(|t| kind.observer(&t.obs)).collect();
    let actions: Vec<Vec<f64>> = data.iter().map(|t| t.action.clone()).collect();
    let pred = model.predict_batch(&states, &actions)?;
    let mut reports = Vec::with_capacity(spec.state_dim);
    for j in 0..spec.state_dim {
        let (p, y): (Vec<f64>, Vec<f64>) = data
            .iter()
            .zip(&states)
            .zip(&pred)
            .map(|((t, s), p)| {
                let truth = spec.unwrap_next(s, &kind.observer(&t.next_obs));
                let close = spec.unwrap_next(s, p);
                (close[j], truth[j])
            })
            .unzip();
        reports.push(FitReport::from_predictions(&p, &y)?);
    }
    Ok(ModelFit::from_reports(&reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig { hidden: vec![200, 200], lr: 1e-3, batch_size: 128, train_steps: 1000 }
    }
}

/// MLP predicting the normalized state change.
#[derive(Debug, Clone)]
pub struct NeuralDynamics {
    kind: EnvKind,
    spec: EnvSpec,
    pub cfg: NeuralConfig,
    net: Mlp,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    out_std: Vec<f64>,
}

fn mean_std(rows: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
    let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt().max(1e-6))
}

impl NeuralDynamics {
    pub fn new<R: Rng + ?Sized>(kind: EnvKind, cfg: NeuralConfig, rng: &mut R) -> Self {
        let spec = kind.spec();
        let net = Mlp::new(&Self::sizes(&spec, &cfg), rng);
        NeuralDynamics {
            kind,
            in_mean: vec![0.0; spec.input_dim()],
            in_std: vec![1.0; spec.input_dim()],
            out_std: vec![1.0; spec.state_dim],
            spec,
            cfg,
            net,
        }
    }

    fn sizes(spec: &EnvSpec, cfg: &NeuralConfig) -> Vec<usize> {
        std::iter::once(spec.input_dim()).chain(cfg.hidden.iter().copied()).chain([spec.state_dim]).collect()
    }

    /// Replaces the network with an all-zero one, which predicts no change.
    pub fn zero_weights(&mut self) {
        self.net = Mlp::zeros(&Self::sizes(&self.spec, &self.cfg));
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    fn input_row(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        s.iter()
            .chain(a)
            .zip(self.in_mean.iter().zip(&self.in_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }
}

impl DynamicsModel for NeuralDynamics {
    fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        Ok(self.predict_batch(&[s.to_vec()], &[a.to_vec()])?.remove(0))
    }

    fn predict_batch(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        let d = self.spec.input_dim();
        let mut x = Array2::zeros((states.len(), d));
        for (r, (s, a)) in states.iter().zip(actions).enumerate() {
            check_dims(&self.spec, s, a)?;
            for (j, v) in self.input_row(s, a).into_iter().enumerate() {
                x[[r, j]] = v;
            }
        }
        let y = self.net.predict(x.view());
        Ok(states
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let mut next: Vec<f64> = s
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let dv = y[[r, j]] * self.out_std[j];
                        if dv.is_finite() {
                            v + dv
                        } else {
                            *v
                        }
                    })
                    .collect();
                self.spec.canonicalize(&mut next);
                next
            })
            .collect())
    }

    fn fit(&mut self, data: &[Transition], seed: u64) -> Result<ModelFit, DynamicsError> {
        if data.len() < MIN_FIT_TRANSITIONS {
            return Err(DynamicsError::TooFewTransitions { need: MIN_FIT_TRANSITIONS, got: data.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let n_test = (data.len() / 5).max(1);
        let (test_idx, train_idx) = idx.split_at(n_test);

        let inputs: Vec<Vec<f64>> = train_idx
            .iter()
            .map(|&i| {
                let t = &data[i];
                self.kind.observer(&t.obs).into_iter().chain(t.action.iter().copied()).collect()
            })
            .collect();
        let deltas: Vec<Vec<f64>> = train_idx
            .iter()
            .map(|&i| {
                let t = &data[i];
                self.spec.state_delta(&self.kind.observer(&t.obs), &self.kind.observer(&t.next_obs))
            })
            .collect();
        for j in 0..self.spec.input_dim() {
            (self.in_mean[j], self.in_std[j]) = mean_std(&inputs, j);
        }
        for j in 0..self.spec.state_dim {
            let rms = (deltas.iter().map(|r| r[j] * r[j]).sum::<f64>() / deltas.len() as f64).sqrt();
            self.out_std[j] = rms.max(1e-6);
        }

        self.net = Mlp::new(&Self::sizes(&self.spec, &self.cfg), &mut rng);
        let mut opt = Adam::new(&self.net, self.cfg.lr);
        let b = self.cfg.batch_size.min(inputs.len());
        let (din, dout) = (self.spec.input_dim(), self.spec.state_dim);
        for _ in 0..self.cfg.train_steps {
            let mut x = Array2::zeros((b, din));
            let mut target = Array2::zeros((b, dout));
            for r in 0..b {
                let i = rng.random_range(0..inputs.len());
                for j in 0..din {
                    x[[r, j]] = (inputs[i][j] - self.in_mean[j]) / self.in_std[j];
                }
                for j in 0..dout {
                    target[[r, j]] = deltas[i][j] / self.out_std[j];
                }
            }
            let (y, tape) = self.net.forward_batch(x.view());
            let dy = (&y - &target) * (2.0 / (b * dout) as f64);
            let (grads, _) = self.net.backward(&tape, dy.view());
            opt.step(&mut self.net, &grads);
        }
        let test: Vec<Transition> = test_idx.iter().map(|&i| data[i].clone()).collect();
        evaluate_model(self, self.kind, &test)
    }
}

/// Policy used for rollouts: maps a raw observation to an action.
pub trait Policy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64>;
}

impl<F: FnMut(&[f64]) -> Vec<f64>> Policy for F {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        self(obs)
    }
}

/// `k` model steps from `s0` with rewards from the true reward function.
/// Model transitions are never terminal.
pub fn rollout(
    model: &dyn DynamicsModel,
    policy: &mut dyn Policy,
    s0: &[f64],
    k: usize,
    kind: EnvKind,
) -> Result<Vec<Transition>, DynamicsError> {
    assert!(k >= 1, "rollout length must be at least 1");
    let spec = kind.spec();
    let mut s = s0.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let obs = kind.observe(&s);
        let a = spec.clip_action(&policy.act(&obs));
        let next = model.predict(&s, &a)?;
        let reward = kind.reward(&s, &a, &next);
        let next_obs = kind.observe(&next);
        out.push(Transition {
            state: s,
            obs,
            action: a,
            reward,
            next_state: next.clone(),
            next_obs,
            done: false,
            source: Source::Model,
        });
        s = next;
    }
    Ok(out)
}

/// Mean squared state error after each of `h` steps, comparing the model
/// against the true dynamics under the actions the policy takes on the true
/// trajectory. Angle errors are wrapped.
pub fn horizon_mse(
    model: &dyn DynamicsModel,
    kind: EnvKind,
    start_states: &[Vec<f64>],
    policy: &mut dyn Policy,
    h: usize,
) -> Result<Vec<f64>, DynamicsError> {
    assert!(h >= 1, "horizon must be at least 1");
    assert!(!start_states.is_empty(), "need at least one start state");
    let spec = kind.spec();
    let mut sums = vec![0.0; h];
    for s0 in start_states {
        let mut truth = s0.clone();
        spec.canonicalize(&mut truth);
        let mut pred = truth.clone();
        for sum in sums.iter_mut() {
            let a = spec.clip_action(&policy.act(&kind.observe(&truth)));
            truth = kind.step_state(&truth, &a);
            pred = model.predict(&pred, &a)?;
            let d = spec.state_delta(&truth, &pred);
            *sum += d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / start_states.len() as f64).collect())
}
