//! Strategies and property checks shared by the property suite and the
//! acceptance run.
#![allow(dead_code)]

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symdyn::envs::car2d;
use symdyn::expr::{BinaryOp, UnaryOp};
use symdyn::mbpo::ModelKind;
use symdyn::nn::{Dense, Mlp};
use symdyn::sr::sample_random_expr;
use symdyn::{
    parse, run_training, Env, EnvKind, ExprTree, GeneratorConfig, ReplayBuffer, RunConfig, SacConfig, Source,
    Transition,
};

pub type Check = Result<(), TestCaseError>;

/// Smooth expressions over two variables, built without the generator.
pub fn smooth_tree() -> impl Strategy<Value = ExprTree> {
    let leaf = prop_oneof![
        (0usize..2).prop_map(ExprTree::var),
        (-2.0f64..2.0).prop_map(ExprTree::constant),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ExprTree::binary(BinaryOp::Add, a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ExprTree::binary(BinaryOp::Sub, a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ExprTree::binary(BinaryOp::Mul, a, b)),
            inner.clone().prop_map(|a| ExprTree::unary(UnaryOp::Sin, a)),
            inner.clone().prop_map(|a| ExprTree::unary(UnaryOp::Cos, a)),
            inner.clone().prop_map(|a| ExprTree::unary(UnaryOp::Atan, a)),
            inner.prop_map(|a| ExprTree::unary(UnaryOp::Pow(2), a)),
        ]
    })
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect()
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut out = net.clone();
    let mut it = p.iter();
    for l in &mut out.layers {
        for v in l.w.iter_mut().chain(l.b.iter_mut()) {
            *v = *it.next().unwrap();
        }
    }
    out
}

fn tagged(i: usize) -> Transition {
    Transition {
        state: vec![i as f64],
        obs: vec![i as f64],
        action: vec![0.0],
        reward: i as f64,
        next_state: vec![i as f64],
        next_obs: vec![i as f64],
        done: false,
        source: Source::Env,
    }
}

pub fn generated_tree_parses_back(seed: u64, d: usize) -> Check {
    let tree = sample_random_expr(&GeneratorConfig::default(), d, &mut ChaCha8Rng::seed_from_u64(seed));
    let text = tree.to_string();
    let back = parse(&text, d).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
    prop_assert!(back.bit_eq(&tree), "{} vs {}", text, back);
    Ok(())
}

pub fn smooth_tree_parses_back(tree: &ExprTree) -> Check {
    let back = parse(&tree.to_string(), 2).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(back.bit_eq(tree));
    Ok(())
}

/// Constant gradients against central differences, relative tolerance 1e-4.
pub fn constant_gradients_match(tree: &ExprTree, x: [f64; 2]) -> Check {
    let grad = tree.grad_constants(&x).map_err(|_| TestCaseError::fail("invalid"))?;
    let c = tree.constants();
    prop_assert_eq!(grad.len(), c.len());
    for i in 0..c.len() {
        let h = 1e-5 * c[i].abs().max(1.0);
        let at = |v: f64| {
            let mut t = tree.clone();
            let mut cc = c.clone();
            cc[i] = v;
            t.set_constants(&cc);
            t.evaluate(&x).unwrap()
        };
        let fd = (at(c[i] + h) - at(c[i] - h)) / (2.0 * h);
        prop_assert!(close(grad[i], fd, 1e-4), "constant {}: {} vs {}", i, grad[i], fd);
    }
    Ok(())
}

/// Parameter and input gradients of `sum(w * net(x))` against central
/// differences, relative tolerance 1e-4.
pub fn network_gradients_match(seed: u64, widths: &[usize], rows: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![3];
    sizes.extend(widths);
    sizes.push(2);
    let mut net = Mlp::new(&sizes, &mut rng);
    for l in &mut net.layers {
        l.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let x = Array2::from_shape_fn((rows, 3), |_| rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_fn((rows, 2), |_| rng.random_range(-1.0..1.0));
    let loss = |n: &Mlp, x: &Array2<f64>| (n.predict(x.view()) * &w).sum();
    let (_, tape) = net.forward_batch(x.view());
    let (grads, dx) = net.backward(&tape, w.view());

    let h = 1e-6;
    let params = flatten(&net.layers);
    let flat = flatten(&grads.layers);
    prop_assert_eq!(params.len(), flat.len());
    for i in 0..params.len() {
        let (mut up, mut down) = (params.clone(), params.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (loss(&with_params(&net, &up), &x) - loss(&with_params(&net, &down), &x)) / (2.0 * h);
        prop_assert!(close(flat[i], fd, 1e-4), "param {}: {} vs {}", i, flat[i], fd);
    }
    for r in 0..rows {
        for j in 0..3 {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[[r, j]] += h;
            down[[r, j]] -= h;
            let fd = (loss(&net, &up) - loss(&net, &down)) / (2.0 * h);
            prop_assert!(close(dx[[r, j]], fd, 1e-4), "input ({}, {}): {} vs {}", r, j, dx[[r, j]], fd);
        }
    }
    Ok(())
}

pub fn replay_buffer_is_fifo(cap: usize, n: usize) -> Check {
    let mut buf = ReplayBuffer::new(cap);
    for i in 0..n {
        buf.push(tagged(i));
    }
    let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
    let expected: Vec<f64> = (n.saturating_sub(cap)..n).map(|i| i as f64).collect();
    prop_assert_eq!(kept, expected);
    let recent: Vec<f64> = buf.recent(3).map(|t| t.reward).collect();
    let expected: Vec<f64> = (n.saturating_sub(cap.min(3))..n).map(|i| i as f64).collect();
    prop_assert_eq!(recent, expected);
    Ok(())
}

/// Observer and inverse observer agree within 1e-12 on reachable states.
pub fn observers_round_trip(seed: u64, steps: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in EnvKind::ALL {
        let mut env = Env::new(kind);
        env.reset(&mut rng);
        for _ in 0..steps {
            let a = kind.spec().uniform_action(&mut rng);
            env.step(&a);
        }
        let s = env.state().to_vec();
        let o = kind.observe(&s);
        let back = kind.observer(&o);
        prop_assert_eq!(back.len(), kind.spec().state_dim);
        for (a, b) in s.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12, "{}: {:?} vs {:?}", kind, s, back);
        }
        let o2 = kind.observe(&back);
        for (a, b) in o.iter().zip(&o2) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
    Ok(())
}

pub fn car_speed_stays_valid(v: f64, actions: &[(f64, f64)]) -> Check {
    let mut s = [0.0, 0.0, 0.0, v, 0.0];
    for &(a, w) in actions {
        s = car2d::dynamics(s, a, w);
        prop_assert!(s[3] >= 0.0 && s[3] <= car2d::MAX_SPEED);
        prop_assert!(s[4].abs() <= car2d::MAX_STEER);
    }
    Ok(())
}

/// `count` random action sequences of 20 steps, including out-of-bounds
/// actions. Returns the number of steps checked.
pub fn car_speed_over_sequences(count: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Env::new(EnvKind::Car2d);
    let mut steps = 0;
    for i in 0..count {
        env.reset(&mut rng);
        for _ in 0..20 {
            let a = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            env.step(&a);
            steps += 1;
            if env.state()[3] < 0.0 {
                return Err(format!("sequence {i}: v = {}", env.state()[3]));
            }
        }
    }
    Ok(steps)
}

pub fn tiny_run(model: ModelKind, env: EnvKind) -> RunConfig {
    RunConfig {
        env,
        model,
        epochs: 2,
        env_steps: 20,
        rollouts: 10,
        updates: 5,
        warmup_steps: 40,
        eval_episodes: 1,
        sac: SacConfig { hidden: vec![8, 8], batch_size: 16, ..SacConfig::default() },
        sr: GeneratorConfig { population: 40, generations: 2, refine_top: 2, ..GeneratorConfig::default() },
        ..RunConfig::default()
    }
}

/// Serialized metrics, model text and policy of a short run.
pub fn run_bytes(cfg: &RunConfig) -> Vec<u8> {
    let res = run_training(cfg.clone(), |_, _| {}).expect("run completes");
    let mut out = serde_json::to_vec(&res.metrics).unwrap();
    out.extend(res.model_text.unwrap_or_default().bytes());
    out.extend(serde_json::to_vec(&res.agent.policy_snapshot()).unwrap());
    out
}

/// Two runs per model kind and environment must serialize identically.
pub fn full_runs_are_deterministic() -> Result<(), String> {
    for env in EnvKind::ALL {
        for model in [ModelKind::Symbolic, ModelKind::Neural, ModelKind::Oracle, ModelKind::Free] {
            let cfg = tiny_run(model, env);
            if run_bytes(&cfg) != run_bytes(&cfg) {
                return Err(format!("{env} {model} differs between runs"));
            }
        }
    }
    Ok(())
}
