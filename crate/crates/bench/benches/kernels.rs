use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symdyn::dynamics::model_dataset;
use symdyn::envs::{collect_exploration_dataset, pendulum};
use symdyn::fit::refine_constants;
use symdyn::sac::ActionMode;
use symdyn::{parse_with_names, Dataset, EnvKind, SacAgent, SacConfig, Transition};

fn pendulum_data(n_traj: usize) -> Vec<Transition> {
    collect_exploration_dataset(EnvKind::Pendulum, n_traj, 50, &mut ChaCha8Rng::seed_from_u64(0))
}

fn bench_eval(c: &mut Criterion) {
    let data = pendulum_data(8);
    let (cols, _) = model_dataset(EnvKind::Pendulum, &data);
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let tree = parse_with_names(pendulum::VELOCITY_EXPR, &["theta", "theta_dot", "u"]).unwrap();
    c.bench_function("eval_columns pendulum velocity 400 rows", |b| {
        b.iter(|| tree.eval_columns(black_box(&refs), 400))
    });
    let row = [0.3, -1.0, 0.5];
    c.bench_function("evaluate pendulum velocity one row", |b| b.iter(|| tree.evaluate(black_box(&row))));
}

fn bench_refine(c: &mut Criterion) {
    let data = pendulum_data(8);
    let (cols, targets) = model_dataset(EnvKind::Pendulum, &data);
    let ds = Dataset::from_columns(cols, targets[1].clone()).unwrap();
    // right structure, wrong constants
    let start = parse_with_names(
        "clip((theta_dot + (((10.0 * sin(theta)) + (1.0 * clip(u, 2.0))) * 0.1)), 8.0)",
        &["theta", "theta_dot", "u"],
    )
    .unwrap();
    c.bench_function("bfgs refine pendulum velocity 400 rows", |b| {
        b.iter(|| refine_constants(black_box(&start), &ds).unwrap())
    });
}

fn bench_sac(c: &mut Criterion) {
    let spec = EnvKind::Pendulum.spec();
    let data = pendulum_data(20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let agent = SacAgent::new(spec.obs_dim, &spec.action_low, &spec.action_high, SacConfig::default(), &mut rng);
    let batch: Vec<&Transition> = data.iter().take(256).collect();
    c.bench_function("sac update batch 256", |b| {
        b.iter_batched(
            || (agent.clone(), ChaCha8Rng::seed_from_u64(2)),
            |(mut a, mut r)| a.update(&batch, &mut r),
            BatchSize::LargeInput,
        )
    });
    let obs = data[0].obs.clone();
    c.bench_function("sac deterministic action", |b| {
        b.iter(|| agent.sample_action(black_box(&obs), ActionMode::Deterministic, &mut rng))
    });
}

criterion_group!(benches, bench_eval, bench_refine, bench_sac);
criterion_main!(benches);
