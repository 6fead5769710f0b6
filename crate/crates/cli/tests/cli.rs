use std::fs;
use std::process::Command;

use clap::Parser;
use gtopk::models::{self, ModelKind};
use gtopk::DatasetF32;
use gtopk_cli::bench::cmd_bench;
use gtopk_cli::cost::{cmd_cost_model, cmd_pingpong};
use gtopk_cli::train::{cmd_train, LOG_HEADER};
use gtopk_cli::{Cli, Command as Sub};

fn parse(args: &[&str]) -> Sub {
    let mut full = vec!["gtopk"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).unwrap().command
}

fn gtopk(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gtopk")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn dense_single_worker_decreases_loss() {
    let Sub::Train(a) = parse(&["train", "--algo", "dense", "--P", "1", "--model", "least-squares", "--iters", "100"])
    else {
        unreachable!()
    };
    let out = cmd_train(&a).unwrap();
    let ds: DatasetF32 = models::gen_dataset(ModelKind::LeastSquares { outputs: 1 }, 4096, 64, 1).unwrap();
    let init = models::init_params(ModelKind::LeastSquares { outputs: 1 }, 64, 1);
    let before = models::loss(&ds, &init, &ds.all_indices()).unwrap() as f64;
    assert!(out.summary.final_loss < 0.5 * before, "{} vs {before}", out.summary.final_loss);
    assert_eq!(out.log.len(), 100);
}

#[test]
fn training_log_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let (code, stdout, _) = gtopk(&[
            "train", "--algo", "gtopk", "--P", "4", "--rho", "0.01", "--seed", "7", "--iters", "40", "--no-timing",
            "--out", path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        (fs::read(path).unwrap(), stdout)
    };
    let (a, sa) = run("a.csv");
    let (b, sb) = run("b.csv");
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn warmup_schedule_drives_k() {
    let Sub::Train(a) = parse(&[
        "train", "--P", "2", "--m", "1024", "--d", "64", "--n", "256", "--b", "16", "--epochs", "6", "--warmup", "default",
        "--rho", "0.001",
    ]) else {
        unreachable!()
    };
    let out = cmd_train(&a).unwrap();
    let per_epoch: Vec<(f64, usize)> = out.log.iter().step_by(8).map(|r| (r.rho, r.k)).collect();
    assert_eq!(
        per_epoch,
        vec![(0.25, 256), (0.0725, 74), (0.015, 15), (0.004, 4), (0.001, 1), (0.001, 1)]
    );
}

#[test]
fn divergence_column_is_reported() {
    let Sub::Train(a) = parse(&["train", "--algo", "gtopk-naive", "--P", "4", "--rho", "0.05", "--iters", "20", "--compare"])
    else {
        unreachable!()
    };
    let s = cmd_train(&a).unwrap().summary;
    let rate = s.divergence_rate.unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let (code, stdout, _) = gtopk(&["train", "--algo", "dense", "--P", "2", "--iters", "3"]);
    assert_eq!(code, 0);
    let mut lines = stdout.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "divergence_rate").unwrap();
    assert_eq!(row[col], "");
}

#[test]
fn bench_bytes_match_formulas() {
    let (p, m, k) = (4usize, 10_000usize, 10usize);
    let Sub::Bench(a) = parse(&["bench", "--P", "4", "--m", "1e4", "--rho", "0.001", "--reps", "3", "--warmups", "1"])
    else {
        unreachable!()
    };
    let rows = cmd_bench(&a).unwrap();
    assert_eq!(rows.len(), 3);
    let envelope = 8 + 12;
    for r in &rows {
        assert_eq!(r.k, k);
        assert!(r.std_ms >= 0.0 && r.mean_ms >= 0.0);
        let expected_sent = match r.collective.name() {
            "dense" => 2 * (p - 1) * (8 + 4 * m / p),
            "topk" => (p - 1) * (envelope + 12 * k),
            "gtopk" => 2 * (envelope + 12 * k),
            other => panic!("{other}"),
        };
        assert_eq!(r.last.bytes_sent, expected_sent as u64, "{}", r.collective.name());
    }
}

#[test]
fn bench_single_worker_moves_no_bytes() {
    let Sub::Bench(a) = parse(&["bench", "--P", "1", "--m", "1000", "--reps", "2"]) else {
        unreachable!()
    };
    for r in cmd_bench(&a).unwrap() {
        assert_eq!((r.last.bytes_sent, r.last.bytes_received, r.total_bytes_sent), (0, 0, 0));
    }
}

#[test]
fn cost_model_tables() {
    let Sub::CostModel(a) = parse(&["cost-model", "--preset", "paper-1gbe"]) else {
        unreachable!()
    };
    let t = cmd_cost_model(&a).unwrap();
    assert!(t.rows.contains(&"gtopk,32,25000000,0.001,22.360000".to_string()));

    let Sub::CostModel(a) = parse(&["cost-model", "--P", "32", "--m", "1e5,1e6,1e7,1e8"]) else {
        unreachable!()
    };
    let t = cmd_cost_model(&a).unwrap();
    for algo in ["dense", "topk", "gtopk"] {
        let col: Vec<f64> = t
            .rows
            .iter()
            .filter(|r| r.starts_with(&format!("{algo},")))
            .map(|r| r.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(col.len(), 4);
        assert!(col.windows(2).all(|w| w[0] <= w[1]), "{algo}: {col:?}");
    }
}

#[test]
fn cost_model_from_fitted_samples() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("pp.csv");
    let Sub::Pingpong(a) = parse(&[
        "pingpong", "--sizes", "1,1000,100000", "--reps", "4", "--out", samples.to_str().unwrap(),
    ]) else {
        unreachable!()
    };
    assert_eq!(cmd_pingpong(&a).unwrap().len(), 12);

    let planted = dir.path().join("planted.csv");
    let mut text = String::from("size,time_ms\n");
    for n in [10, 100, 1000, 10000] {
        text.push_str(&format!("{n},{}\n", 0.5 + 2e-4 * n as f64));
    }
    fs::write(&planted, text).unwrap();
    let Sub::CostModel(a) = parse(&["cost-model", "--fit", planted.to_str().unwrap(), "--P", "2", "--m", "1000"]) else {
        unreachable!()
    };
    let t = cmd_cost_model(&a).unwrap();
    let fit = t.fit.unwrap();
    assert!((fit.alpha - 0.5).abs() < 1e-9 && (fit.beta - 2e-4).abs() < 1e-12);
    assert_eq!((t.alpha, t.beta), (fit.alpha, fit.beta));
    // P=2: dense = 2α + m·β
    let dense: f64 = t.rows[0].rsplit(',').next().unwrap().parse().unwrap();
    assert!((dense - (1.0 + 0.2)).abs() < 1e-6);

    let (code, _, _) = gtopk(&["cost-model", "--fit", samples.to_str().unwrap()]);
    assert_eq!(code, 0);
}

#[test]
fn selftest_passes_and_detects_injected_faults() {
    let (code, stdout, _) = gtopk(&["selftest"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
    let (code, stdout, stderr) = gtopk(&["selftest", "--inject-fault", "residual-identities"]);
    assert_eq!(code, 1);
    assert!(stdout.contains("FAIL residual-identities"));
    assert!(stderr.contains("residual-identities"));
    assert_eq!(stdout.matches("FAIL").count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["train", "--algo", "nope"][..],
        &["train", "--m", "100"],
        &["train", "--backend", "tcp"],
        &["train", "--P", "0"],
        &["train", "--k", "0"],
        &["bench", "--algos", "dense,ring"],
        &["cost-model", "--preset", "10gbe"],
        &["selftest", "--inject-fault", "no-such-property"],
    ] {
        let (code, _, stderr) = gtopk(args);
        assert_eq!(code, 2, "{args:?}: {stderr}");
    }
}

#[test]
fn unreachable_cluster_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let hosts = dir.path().join("hosts");
    let addrs: Vec<_> = (0..2)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port())
        .collect();
    fs::write(&hosts, format!("0 127.0.0.1 {}\n1 127.0.0.1 {}\n", addrs[0], addrs[1])).unwrap();
    let (code, _, stderr) = gtopk(&[
        "train", "--backend", "tcp", "--rank", "1", "--hosts", hosts.to_str().unwrap(), "--timeout", "0.3", "--iters", "1",
    ]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("rank 0"), "{stderr}");
}
