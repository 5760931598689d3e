//! Analytic control tasks: Pendulum, a PD-controlled two-link Reacher and a
//! kinematic-bicycle Car2d.
//!
//! Each task is described by its compact *state* (what the dynamics model
//! predicts) and its raw *observation* (what the policy sees). The observer
//! maps observations to states and the inverse observer maps states back.
//! Step functions operate on states and are deterministic.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Source, Transition};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Static description of a task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_limit: usize,
    pub state_names: Vec<&'static str>,
    pub action_names: Vec<&'static str>,
    /// State coordinates that are angles wrapped to (-pi, pi].
    pub angle_coords: Vec<usize>,
}

impl EnvSpec {
    /// State names followed by action names: the variable names of model
    /// expressions.
    pub fn input_names(&self) -> Vec<&'static str> {
        self.state_names.iter().chain(&self.action_names).copied().collect()
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }

    /// Difference `to - from` with angle coordinates wrapped.
    pub fn state_delta(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = to.iter().zip(from).map(|(b, a)| b - a).collect();
        for &i in &self.angle_coords {
            d[i] = wrap_angle(d[i]);
        }
        d
    }

    /// Next state expressed continuously from `from`: angle coordinates are
    /// unwrapped so that they do not jump by 2pi.
    pub fn unwrap_next(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        let d = self.state_delta(from, to);
        from.iter().zip(&d).map(|(a, b)| a + b).collect()
    }

    /// Wraps the angle coordinates of a state in place.
    pub fn canonicalize(&self, s: &mut [f64]) {
        for &i in &self.angle_coords {
            s[i] = wrap_angle(s[i]);
        }
    }

    pub fn uniform_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pendulum,
    Reacher,
    Car2d,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown environment '{0}' (expected pendulum, reacher or car2d)")]
pub struct UnknownEnv(pub String);

impl FromStr for EnvKind {
    type Err = UnknownEnv;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pendulum" => Ok(EnvKind::Pendulum),
            "reacher" => Ok(EnvKind::Reacher),
            "car2d" => Ok(EnvKind::Car2d),
            _ => Err(UnknownEnv(s.to_string())),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spec().name)
    }
}

pub mod pendulum {
    //! Gym-style pendulum, upright at theta = 0.

    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;

    /// Next (theta, theta_dot) before the angle is wrapped, computed in the
    /// same operation order as the reference expressions.
    pub fn dynamics(theta: f64, theta_dot: f64, u: f64) -> (f64, f64) {
        let u = u.max(-MAX_TORQUE).min(MAX_TORQUE);
        let v = (theta_dot + (((15.0 * theta.sin()) + (3.0 * u)) * DT)).max(-MAX_SPEED).min(MAX_SPEED);
        (theta + (v * DT), v)
    }

    /// Classic cost on the current state and applied torque.
    pub fn reward(theta: f64, theta_dot: f64, u: f64) -> f64 {
        let th = super::wrap_angle(theta);
        let u = u.clamp(-MAX_TORQUE, MAX_TORQUE);
        -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * u * u)
    }

    pub const VELOCITY_EXPR: &str =
        "clip((theta_dot + (((15.0 * sin(theta)) + (3.0 * clip(u, 2.0))) * 0.05)), 8.0)";
    pub const ANGLE_EXPR: &str =
        "theta + (clip((theta_dot + (((15.0 * sin(theta)) + (3.0 * clip(u, 2.0))) * 0.05)), 8.0) * 0.05)";
}

pub mod reacher {
    //! Two-link planar arm whose joints track position setpoints through PD
    //! regulators. The joint dynamics are decoupled double integrators.

    pub const DT: f64 = 0.02;
    pub const KP: f64 = 40.0;
    pub const KD: f64 = 4.0;
    /// Setpoint offset per unit action.
    pub const SETPOINT_STEP: f64 = 0.3;
    pub const MAX_VEL: f64 = 10.0;
    pub const LINKS: (f64, f64) = (0.1, 0.1);
    pub const TARGET_RADIUS: (f64, f64) = (0.05, 0.2);

    pub fn tip(q1: f64, q2: f64) -> (f64, f64) {
        let (l1, l2) = LINKS;
        (l1 * q1.cos() + l2 * (q1 + q2).cos(), l1 * q1.sin() + l2 * (q1 + q2).sin())
    }

    /// One joint: returns (q', q_dot') before wrapping.
    pub fn joint(q: f64, q_dot: f64, a: f64) -> (f64, f64) {
        let a = a.max(-1.0).min(1.0);
        let torque = (KP * (a * SETPOINT_STEP)) - (KD * q_dot);
        let v = (q_dot + (DT * torque)).max(-MAX_VEL).min(MAX_VEL);
        (q + (DT * v), v)
    }

    pub fn velocity_expr(q_dot: &str, a: &str) -> String {
        format!("clip(({q_dot} + (0.02 * ((40 * (clip({a}, 1) * 0.3)) - (4 * {q_dot})))), 10)")
    }
}

pub mod car2d {
    //! Kinematic bicycle that cannot drive backward.

    pub const DT: f64 = 0.1;
    pub const WHEELBASE: f64 = 0.5;
    pub const MAX_STEER: f64 = 0.6;
    pub const MAX_SPEED: f64 = 2.0;
    pub const GOAL_RADIUS: f64 = 0.1;
    pub const GOAL_BONUS: f64 = 1.0;
    pub const TARGET_BOX: f64 = 2.0;

    /// (x, y, psi, v, delta) -> next, before wrapping psi.
    pub fn dynamics(s: [f64; 5], accel: f64, steer_rate: f64) -> [f64; 5] {
        let [x, y, psi, v, delta] = s;
        let accel = accel.max(-1.0).min(1.0);
        let steer_rate = steer_rate.max(-1.0).min(1.0);
        let delta2 = (delta + (steer_rate * DT)).max(-MAX_STEER).min(MAX_STEER);
        // clamp to [0, MAX_SPEED] written as a symmetric clip around 1
        let v2 = 1.0 + ((v + (accel * DT)) - 1.0).max(-1.0).min(1.0);
        let psi2 = psi + (((v2 / WHEELBASE) * delta2.tan()) * DT);
        let x2 = x + ((v2 * psi2.cos()) * DT);
        let y2 = y + ((v2 * psi2.sin()) * DT);
        [x2, y2, psi2, v2, delta2]
    }

    pub fn reward(x: f64, y: f64, tx: f64, ty: f64) -> f64 {
        let dist = ((x - tx).powi(2) + (y - ty).powi(2)).sqrt();
        let bonus = if dist <= GOAL_RADIUS { GOAL_BONUS } else { 0.0 };
        -dist * DT + bonus
    }
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Pendulum, EnvKind::Reacher, EnvKind::Car2d];

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::Pendulum => EnvSpec {
                name: "pendulum",
                obs_dim: 3,
                state_dim: 2,
                action_dim: 1,
                action_low: vec![-pendulum::MAX_TORQUE],
                action_high: vec![pendulum::MAX_TORQUE],
                episode_limit: 200,
                state_names: vec!["theta", "theta_dot"],
                action_names: vec!["u"],
                angle_coords: vec![0],
            },
            EnvKind::Reacher => EnvSpec {
                name: "reacher",
                obs_dim: 10,
                state_dim: 6,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                episode_limit: 50,
                state_names: vec!["q1", "q2", "q1_dot", "q2_dot", "target_x", "target_y"],
                action_names: vec!["a1", "a2"],
                angle_coords: vec![0, 1],
            },
            EnvKind::Car2d => EnvSpec {
                name: "car2d",
                obs_dim: 8,
                state_dim: 7,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                episode_limit: 250,
                state_names: vec!["x", "y", "psi", "v", "delta", "target_x", "target_y"],
                action_names: vec!["accel", "steer_rate"],
                angle_coords: vec![2],
            },
        }
    }

    /// Deterministic transition on states; angles are wrapped.
    pub fn step_state(self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut next = self.step_state_unwrapped(s, a);
        self.spec().canonicalize(&mut next);
        next
    }

    /// Deterministic transition on states without wrapping the angles.
    pub fn step_state_unwrapped(self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => {
                let (th, v) = pendulum::dynamics(s[0], s[1], a[0]);
                vec![th, v]
            }
            EnvKind::Reacher => {
                let (q1, v1) = reacher::joint(s[0], s[2], a[0]);
                let (q2, v2) = reacher::joint(s[1], s[3], a[1]);
                vec![q1, q2, v1, v2, s[4], s[5]]
            }
            EnvKind::Car2d => {
                let n = car2d::dynamics([s[0], s[1], s[2], s[3], s[4]], a[0], a[1]);
                vec![n[0], n[1], n[2], n[3], n[4], s[5], s[6]]
            }
        }
    }

    /// True reward of a transition.
    pub fn reward(self, s: &[f64], a: &[f64], next: &[f64]) -> f64 {
        match self {
            EnvKind::Pendulum => pendulum::reward(s[0], s[1], a[0]),
            EnvKind::Reacher => {
                let (x, y) = reacher::tip(next[0], next[1]);
                -((x - next[4]).powi(2) + (y - next[5]).powi(2)).sqrt()
            }
            EnvKind::Car2d => car2d::reward(next[0], next[1], next[5], next[6]),
        }
    }

    /// Inverse observer: state to raw observation.
    pub fn observe(self, s: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![s[0].cos(), s[0].sin(), s[1]],
            EnvKind::Reacher => {
                let (x, y) = reacher::tip(s[0], s[1]);
                vec![
                    s[0].cos(),
                    s[1].cos(),
                    s[0].sin(),
                    s[1].sin(),
                    s[2],
                    s[3],
                    s[4],
                    s[5],
                    s[4] - x,
                    s[5] - y,
                ]
            }
            EnvKind::Car2d => vec![s[0], s[1], s[2].cos(), s[2].sin(), s[3], s[4], s[5], s[6]],
        }
    }

    /// Observer: raw observation to state.
    pub fn observer(self, o: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![o[1].atan2(o[0]), o[2]],
            EnvKind::Reacher => vec![o[2].atan2(o[0]), o[3].atan2(o[1]), o[4], o[5], o[6], o[7]],
            EnvKind::Car2d => vec![o[0], o[1], o[3].atan2(o[2]), o[4], o[5], o[6], o[7]],
        }
    }

    /// Samples an initial state.
    pub fn reset_state<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)],
            EnvKind::Reacher => {
                let (r0, r1) = reacher::TARGET_RADIUS;
                let q1 = rng.random_range(-PI..PI);
                let q2 = rng.random_range(-PI..PI);
                // uniform over the annulus area
                let r = rng.random_range(r0 * r0..r1 * r1).sqrt();
                let phi = rng.random_range(-PI..PI);
                vec![q1, q2, 0.0, 0.0, r * phi.cos(), r * phi.sin()]
            }
            EnvKind::Car2d => {
                let b = car2d::TARGET_BOX;
                let psi = rng.random_range(-PI..PI);
                let tx = rng.random_range(-b..b);
                let ty = rng.random_range(-b..b);
                vec![0.0, 0.0, psi, 0.0, 0.0, tx, ty]
            }
        }
    }

    /// Reference expressions for every state coordinate, in the naming of
    /// [`EnvSpec::input_names`]. They reproduce [`EnvKind::step_state_unwrapped`].
    pub fn reference_expressions(self) -> Vec<String> {
        match self {
            EnvKind::Pendulum => vec![pendulum::ANGLE_EXPR.to_string(), pendulum::VELOCITY_EXPR.to_string()],
            EnvKind::Reacher => {
                let v1 = reacher::velocity_expr("q1_dot", "a1");
                let v2 = reacher::velocity_expr("q2_dot", "a2");
                vec![
                    format!("(q1 + (0.02 * {v1}))"),
                    format!("(q2 + (0.02 * {v2}))"),
                    v1,
                    v2,
                    "target_x".into(),
                    "target_y".into(),
                ]
            }
            EnvKind::Car2d => {
                let delta = "clip((delta + (clip(steer_rate, 1) * 0.1)), 0.6)".to_string();
                let v = "(1 + clip(((v + (clip(accel, 1) * 0.1)) - 1), 1))".to_string();
                let psi = format!("(psi + (((({v}) / 0.5) * tan({delta})) * 0.1))");
                vec![
                    format!("(x + (({v} * cos({psi})) * 0.1))"),
                    format!("(y + (({v} * sin({psi})) * 0.1))"),
                    psi,
                    v,
                    delta,
                    "target_x".into(),
                    "target_y".into(),
                ]
            }
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode ended by the time limit.
    pub truncated: bool,
}

/// A running environment instance with a time limit.
#[derive(Debug, Clone)]
pub struct Env {
    kind: EnvKind,
    spec: EnvSpec,
    state: Vec<f64>,
    t: usize,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        let spec = kind.spec();
        let state = vec![0.0; spec.state_dim];
        Env { kind, spec, state, t: 0 }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.state = self.kind.reset_state(rng);
        self.t = 0;
        self.kind.observe(&self.state)
    }

    /// Starts an episode from a given state.
    pub fn reset_to(&mut self, state: &[f64]) -> Vec<f64> {
        assert_eq!(state.len(), self.spec.state_dim);
        self.state = state.to_vec();
        self.spec.canonicalize(&mut self.state);
        self.t = 0;
        self.kind.observe(&self.state)
    }

    pub fn step(&mut self, action: &[f64]) -> Step {
        let a = self.spec.clip_action(action);
        let next = self.kind.step_state(&self.state, &a);
        let reward = self.kind.reward(&self.state, &a, &next);
        self.state = next;
        self.t += 1;
        Step {
            obs: self.kind.observe(&self.state),
            reward,
            truncated: self.t >= self.spec.episode_limit,
        }
    }

    /// Steps and packages the result as an environment transition.
    pub fn transition(&mut self, action: &[f64]) -> (Transition, bool) {
        let state = self.state.clone();
        let obs = self.kind.observe(&state);
        let a = self.spec.clip_action(action);
        let step = self.step(&a);
        let t = Transition {
            state,
            obs,
            action: a,
            reward: step.reward,
            next_state: self.state.clone(),
            next_obs: step.obs,
            done: false,
            source: Source::Env,
        };
        (t, step.truncated)
    }
}

/// Action-hold exploration data: trajectory `j` uses hold period
/// `k = j mod 10 + 1`, resampling a uniform action every `k` steps.
pub fn collect_exploration_dataset<R: Rng + ?Sized>(
    kind: EnvKind,
    n_traj: usize,
    traj_len: usize,
    rng: &mut R,
) -> Vec<Transition> {
    assert!(n_traj >= 1 && traj_len >= 1, "need at least one step");
    let mut env = Env::new(kind);
    let mut out = Vec::with_capacity(n_traj * traj_len);
    for j in 0..n_traj {
        let hold = j % 10 + 1;
        env.reset(rng);
        let mut action = Vec::new();
        for t in 0..traj_len {
            if t % hold == 0 {
                action = env.spec().uniform_action(rng);
            }
            let (tr, _) = env.transition(&action);
            out.push(tr);
        }
    }
    out
}

/// CSV header: state names, action names, `next_` state names, reward, done.
pub fn dataset_header(spec: &EnvSpec) -> Vec<String> {
    let mut h: Vec<String> = spec.input_names().iter().map(|s| s.to_string()).collect();
    h.extend(spec.state_names.iter().map(|s| format!("next_{s}")));
    h.push("reward".into());
    h.push("done".into());
    h
}

/// Writes transitions as CSV. Next-state angles are written unwrapped
/// relative to the current state so each row is a smooth function of its
/// inputs.
pub fn write_dataset_csv<W: Write>(spec: &EnvSpec, data: &[Transition], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", dataset_header(spec).join(","))?;
    for t in data {
        let next = spec.unwrap_next(&t.state, &t.next_state);
        let fields: Vec<String> = t
            .state
            .iter()
            .chain(&t.action)
            .chain(&next)
            .chain(std::iter::once(&t.reward))
            .map(|v| format!("{v}"))
            .chain(std::iter::once(u8::from(t.done).to_string()))
            .collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
