use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use symdyn::EnvKind;

fn symdyn(args: &[&str], run_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_symdyn"));
    cmd.args(args);
    match run_dir {
        Some(d) => cmd.env("SYMDYN_RUN_DIR", d),
        None => cmd.env_remove("SYMDYN_RUN_DIR"),
    };
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
    "epochs": 2, "env_steps": 10, "rollouts": 5, "updates": 5, "warmup_steps": 30, "eval_episodes": 1,
    "sac": {"hidden": [8, 8], "batch_size": 16},
    "sr": {"population": 30, "generations": 2, "refine_top": 1},
    "neural": {"hidden": [8], "train_steps": 5}
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn train_writes_every_seed_and_an_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = symdyn(&["train", "--config", &cfg, "--env", "pendulum", "--model", "symbolic", "--seeds", "3", "-q"], Some(tmp.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("pendulum-symbolic");
    for seed in 0..3 {
        let s = run.join(format!("seed-{seed}"));
        let metrics = fs::read_to_string(s.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        for line in metrics.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["epoch", "env_steps", "eval_return_mean", "eval_return_std", "model_mse", "losses"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
        }
        assert!(s.join("models/epoch-0001.tsv").exists());
        assert!(s.join("models/epoch-0002.tsv").exists());
        assert!(s.join("model.tsv").exists());
        assert!(s.join("policy.json").exists());
    }
    let agg = fs::read_to_string(run.join("aggregate.csv")).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines[0], "env_steps,mean,std");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("40,"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(manifest["config"]["epochs"], 2);
    assert!(manifest["revision"].is_string());
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn train_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let o = symdyn(
            &["train", "--config", &cfg, "--seed-list", "4", "--name", name, "-q", "--out", &tmp.path().display().to_string()],
            None,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let s = tmp.path().join(name).join("seed-4");
        outputs.push((
            fs::read(s.join("metrics.jsonl")).unwrap(),
            fs::read(s.join("model.tsv")).unwrap(),
            fs::read(s.join("policy.json")).unwrap(),
            fs::read(tmp.path().join(name).join("aggregate.csv")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn neural_and_free_baselines_share_the_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    for model in ["neural", "free", "oracle"] {
        let o = symdyn(&["train", "--config", &cfg, "--model", model, "--seeds", "1", "-q"], Some(tmp.path()));
        assert!(o.status.success(), "{model}: {}", stderr(&o));
        let m = fs::read_to_string(tmp.path().join(format!("pendulum-{model}/seed-0/metrics.jsonl"))).unwrap();
        assert_eq!(m.lines().count(), 2);
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = symdyn(&["train", "--env", "mujoco"], Some(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    let o = symdyn(&["train", "--set", "mbpo.k=2"], Some(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mbpo"), "{}", stderr(&o));
    let o = symdyn(&["train", "--set", "epochs=0"], Some(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochs"));
    let o = symdyn(&["eval-model", "--env", "pendulum"], None);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn collect_row_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for p in [&a, &b] {
        let o = symdyn(&["collect", "--env", "car2d", "--n-traj", "7", "--traj-len", "13", "--seed", "3", "--out", &p.display().to_string()], None);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + 7 * 13);
    assert!(text.starts_with("x,y,psi,v,delta,target_x,target_y,accel,steer_rate,next_x"), "{}", text.lines().next().unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn collect_defaults_give_the_full_pendulum_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("p.csv");
    let o = symdyn(&["collect", "--env", "pendulum", "--out", &p.display().to_string()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1 + 250_000);
}

#[test]
fn fit_sr_demo_reports_refinement_gains() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("cands.csv");
    let args = ["fit-sr", "--demo", "--generator", "random", "--pool", "20", "--candidates", &table.display().to_string()];
    let o = symdyn(&args, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&table).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let gains: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(gains.len(), 7);
    assert!(gains.iter().cloned().fold(f64::MIN, f64::max) >= 0.1, "{gains:?}");
    let again = symdyn(&args, None);
    assert_eq!(stdout(&o), stdout(&again));
    assert!(stdout(&o).starts_with("expression\t"));
}

#[test]
fn fit_sr_reads_env_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.csv");
    let o = symdyn(&["collect", "--env", "pendulum", "--n-traj", "20", "--traj-len", "50", "--out", &data.display().to_string()], None);
    assert!(o.status.success());
    let o = symdyn(
        &["fit-sr", "--data", &data.display().to_string(), "--target", "next_theta_dot", "--set", "generations=5", "--set", "islands=1"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mse: f64 = out.lines().find_map(|l| l.strip_prefix("held_out_mse\t")).unwrap().parse().unwrap();
    assert!(mse.is_finite());
    let expr = out.lines().next().unwrap();
    assert!(!expr.contains("next_") && !expr.contains("reward"), "{expr}");
}

#[test]
fn fit_sr_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tmp.path().join("small.csv");
    let mut text = String::from("x,y\n");
    for i in 0..10 {
        text.push_str(&format!("{i},{}\n", i * i));
    }
    fs::write(&small, text).unwrap();
    let o = symdyn(&["fit-sr", "--data", &small.display().to_string(), "--target", "y"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("20"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "x,y\n1,2\n2,oops\n").unwrap();
    let o = symdyn(&["fit-sr", "--data", &bad.display().to_string(), "--target", "y"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3, column 2"), "{}", stderr(&o));

    let o = symdyn(&["fit-sr", "--data", &bad.display().to_string(), "--target", "z"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_model_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("truth.tsv");
    let names = EnvKind::Pendulum.spec().state_names;
    let exprs = EnvKind::Pendulum.reference_expressions();
    let text: String = names.iter().zip(&exprs).map(|(n, e)| format!("{n}\t{e}\n")).collect();
    fs::write(&truth, text).unwrap();
    let out = tmp.path().join("h.csv");
    let o = symdyn(&["eval-model", "--model", &truth.display().to_string(), "--env", "pendulum", "--out", &out.display().to_string()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let v: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v <= 1e-12, "{r}");
    }

    let ident = tmp.path().join("ident.tsv");
    fs::write(&ident, "theta\ttheta\ntheta_dot\ttheta_dot\n").unwrap();
    let o = symdyn(&["eval-model", "--model", &ident.display().to_string(), "--env", "pendulum", "--horizon", "1"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let first: f64 = stdout(&o).lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(first > 0.0);

    let broken = tmp.path().join("broken.tsv");
    fs::write(&broken, "theta\tsin(\ntheta_dot\ttheta_dot\n").unwrap();
    let o = symdyn(&["eval-model", "--model", &broken.display().to_string(), "--env", "pendulum"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}
