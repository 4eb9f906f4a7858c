use std::path::Path;
use std::process::{Command, Output};

use fusedmpc_cli::RunConfig;

fn fusedmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusedmpc"))
        .args(args)
        .output()
        .expect("spawn fusedmpc")
}

fn ok(args: &[&str]) -> String {
    let out = fusedmpc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const TINY_TRAIN: &[&str] = &[
    "--train.num_envs",
    "2",
    "--train.steps_per_update",
    "32",
    "--train.minibatch_size",
    "64",
    "--train.sgd_epochs",
    "2",
    "--train.policy.actor_hidden",
    "[16]",
    "--train.policy.critic_hidden",
    "[16]",
];

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--out", out];
    v.extend_from_slice(TINY_TRAIN);
    v.extend_from_slice(extra);
    v
}

fn metric_steps(path: impl AsRef<Path>) -> Vec<u64> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn hover_solve_converges() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    ok(&["solve", "--out", out.to_str().unwrap(), "--solver.K", "10"]);
    let summary: toml::Table = toml::from_str(&read(out.join("summary.toml"))).unwrap();
    let inst = summary["instance"].as_array().unwrap();
    assert_eq!(inst.len(), 1);
    assert_eq!(inst[0]["converged"].as_bool(), Some(true));
    assert!(!inst[0]["alpha_history"].as_array().unwrap().is_empty());
    let traj = read(out.join("trajectory.csv"));
    assert!(traj.starts_with("instance,t,x0,x1,x2,x3,x4,x5,u0,u1\n"));
    assert_eq!(traj.lines().count(), 1 + 11);
    assert!(read(out.join("config.toml")).contains("[solver]"));
}

#[test]
fn malformed_config_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[solver]\nT = \"ten\"\n").unwrap();
    let out = fusedmpc(&["solve", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("solver.T"), "{err}");

    std::fs::write(&cfg, "[train]\ngamma_typo = 0.9\n").unwrap();
    let out = fusedmpc(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma_typo"));

    std::fs::write(&cfg, "[solver\nT = 3\n").unwrap();
    let out = fusedmpc(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["solve", "--out", d, "--solver.T", "0"],
        vec!["solve", "--out", d, "--workers", "0"],
        vec!["solve", "--out", d, "--solve.scenario", "loop"],
        vec!["bench", "--out", d, "--bench.B", "[]"],
        vec!["train", "--out", d, "--train.gamma", "1.5"],
        vec!["eval", "--out", d],
        vec!["eval", "--out", d, "--checkpoint", "missing.json"],
        vec!["solve", "--no-such-flag"],
    ] {
        assert_eq!(fusedmpc(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn fused_and_naive_dumps_match_outside_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut dumps = Vec::new();
    for mode in ["fused", "naive"] {
        let out = dir.path().join(mode);
        ok(&["solve", "--out", out.to_str().unwrap(), "--mode", mode, "--solve.batch", "4", "--seed", "3"]);
        let summary = read(out.join("summary.toml"));
        let (body, stats) = summary.split_once("[stats]").unwrap();
        assert!(stats.contains(&format!("mode = \"{mode}\"")));
        dumps.push((body.to_string(), read(out.join("trajectory.csv"))));
    }
    assert_eq!(dumps[0], dumps[1]);
}

#[test]
fn problem_file_solve() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("p.toml");
    // Double integrator in 1D, T = 2: stage diag [q_pos, q_vel, r], lin zero.
    std::fs::write(
        &prob,
        "[[instance]]\nx_init = [1.0, 0.0]\ndiag = [1.0, 1.0, 0.1, 1.0, 1.0, 0.1]\nlin = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]\n\
         [[instance]]\nx_init = [-2.0, 0.5]\ndiag = [1.0, 1.0, 0.1, 1.0, 1.0, 0.1]\nlin = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    ok(&[
        "solve",
        "--out",
        out.to_str().unwrap(),
        "--solve.problem",
        prob.to_str().unwrap(),
        "--model.kind",
        "double_integrator",
        "--model.dim",
        "1",
        "--solver.T",
        "2",
    ]);
    let summary: toml::Table = toml::from_str(&read(out.join("summary.toml"))).unwrap();
    let inst = summary["instance"].as_array().unwrap();
    assert_eq!(inst.len(), 2);
    for i in inst {
        assert_eq!(i["status"].as_str(), Some("ok"));
    }

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[[instance]]\nx_init = [1.0, 0.0]\ndiag = [1.0]\nlin = [0.0]\n").unwrap();
    let code = fusedmpc(&[
        "solve",
        "--out",
        out.to_str().unwrap(),
        "--solve.problem",
        bad.to_str().unwrap(),
        "--model.kind",
        "double_integrator",
        "--model.dim",
        "1",
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
}

#[test]
fn bench_rows_cover_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let stdout = ok(&[
        "bench",
        "--out",
        out.to_str().unwrap(),
        "--bench.B",
        "[1, 3]",
        "--bench.T",
        "[2, 4, 6]",
        "--bench.K",
        "2",
        "--reps",
        "1",
    ]);
    let csv = read(out.join("latency.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mode,B,T,K,forward_ms,backward_ms,dispatches"));
    assert_eq!(lines.count(), 2 * 3 * 2);
    assert!(stdout.contains("fwd/naive"));
    let echo: RunConfig = toml::from_str(&read(out.join("config.toml"))).unwrap();
    assert_eq!(echo.bench.reps, 1);
}

#[test]
fn default_bench_grid() {
    let cfg = RunConfig::default();
    for b in [1, 256] {
        assert!(cfg.bench.batches.contains(&b));
    }
    for t in [2, 10, 50] {
        assert!(cfg.bench.horizons.contains(&t));
    }
}

#[test]
fn grid_sweep_makes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = out.to_str().unwrap();
    ok(&train_args(o, &["--train.total_steps", "64", "--grid.T", "[2, 5]", "--grid.K", "[1, 5]"]));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["T2_K1", "T2_K5", "T5_K1", "T5_K5"]);
    for n in &names {
        let cell = out.join(n);
        assert!(cell.join("checkpoint.json").is_file());
        assert_eq!(metric_steps(cell.join("metrics.csv")), [64]);
        let echo: RunConfig = toml::from_str(&read(cell.join("config.toml"))).unwrap();
        assert_eq!(format!("T{}_K{}", echo.grid.horizons[0], echo.grid.iterations[0]), *n);
    }
}

#[test]
fn mlp_run_echo_has_no_solver_section() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = out.to_str().unwrap();
    ok(&train_args(o, &["--mode", "ac_mlp", "--train.total_steps", "64", "--grid.T", "[2, 5]"]));
    assert!(out.join("checkpoint.json").is_file());
    let echo = read(out.join("config.toml"));
    assert!(!echo.contains("[solver]"), "{echo}");
    assert!(!echo.contains("[grid]"), "{echo}");
    assert!(echo.contains("mode = \"ac_mlp\""));
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = out.to_str().unwrap();
    ok(&train_args(o, &["--train.total_steps", "128", "--train.checkpoint_every", "1"]));
    assert!(out.join("checkpoint_000001.json").is_file());
    assert_eq!(metric_steps(out.join("metrics.csv")), [64, 128]);
    let ckpt = out.join("checkpoint.json");
    ok(&train_args(o, &["--train.total_steps", "256", "--resume", ckpt.to_str().unwrap()]));
    assert_eq!(metric_steps(out.join("metrics.csv")), [64, 128, 192, 256]);
    assert_eq!(read(out.join("metrics.csv")).matches("update,").count(), 1);
}

#[test]
fn eval_of_untrained_checkpoint_is_well_formed_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("u");
    let o = out.to_str().unwrap();
    ok(&train_args(o, &["--train.total_steps", "0"]));
    let ckpt = out.join("checkpoint.json");
    let mut tables = Vec::new();
    for run in ["e1", "e2"] {
        let eo = dir.path().join(run);
        let stdout = ok(&[
            "eval",
            "--out",
            eo.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--episodes",
            "1",
            "--seed",
            "5",
        ]);
        let csv = read(eo.join("laptimes.csv"));
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("policy,mode,T,K,episodes,completed,completion_rate,median_lap_s,best_lap_s")
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[1..5], ["ac_mpc", "2", "5", "1"]);
        assert_eq!(row[5], "0");
        assert_eq!(row[7..], ["none", "none"]);
        assert!(eo.join("u").join("episode_000.csv").is_file());
        tables.push((stdout, csv, read(eo.join("u").join("episode_000.csv"))));
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn solver_failure_exits_1_with_partial_dump() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("p.toml");
    let stage = "diag = [1,1,1,1,1,1,0.1,0.1, 1,1,1,1,1,1,0.1,0.1]\nlin = [0,0,0,0,0,0,0,0, 0,0,0,0,0,0,0,0]\n";
    std::fs::write(
        &prob,
        format!(
            "[[instance]]\nx_init = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]\n{stage}\
             [[instance]]\nx_init = [1e300, 0.0, 0.0, 1e300, 0.0, 0.0]\n{stage}"
        ),
    )
    .unwrap();
    let out = dir.path().join("o");
    let res = fusedmpc(&[
        "solve",
        "--out",
        out.to_str().unwrap(),
        "--solve.problem",
        prob.to_str().unwrap(),
        "--solver.T",
        "2",
    ]);
    assert_eq!(res.status.code(), Some(1));
    let summary: toml::Table = toml::from_str(&read(out.join("summary.toml"))).unwrap();
    let inst = summary["instance"].as_array().unwrap();
    assert_eq!(inst[0]["status"].as_str(), Some("ok"));
    assert_eq!(inst[1]["status"].as_str(), Some("failed"));
    assert!(inst[1]["error"].as_str().unwrap().contains("non-finite"));
    let traj = read(out.join("trajectory.csv"));
    assert_eq!(traj.lines().count(), 1 + 3);
}
