use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rainmap_core::forecast::{forecast_functional_grid, unit_square_grid, Functional, GridRequest};
use rainmap_core::io::read_chain;
use rainmap_core::simstudy::{true_delta, true_gamma, ScenarioKind};

fn rainmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rainmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rainmap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn simulate(dir: &Path, out: &str, m: &str, seed: &str) {
    ok(
        dir,
        &[
            "simulate",
            "--scenario",
            "nonlinear",
            "--stations",
            m,
            "--seed",
            seed,
            "--events-per-cell",
            "20",
            "--grid-res",
            "4",
            "--out",
            out,
        ],
    );
}

fn fit_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--config",
        "sim/rainmap.toml",
        "fit",
        "--data",
        "sim",
        "--iters",
        "12",
        "--burnin",
        "4",
        "--out",
        out,
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn simulate_is_deterministic_and_respects_flags() {
    let d = tempfile::tempdir().unwrap();
    simulate(d.path(), "a", "7", "5");
    simulate(d.path(), "b", "7", "5");
    for f in [
        "stations.csv",
        "daily.csv",
        "truth_grid.csv",
        "rainmap.toml",
    ] {
        assert_eq!(
            fs::read(d.path().join("a").join(f)).unwrap(),
            fs::read(d.path().join("b").join(f)).unwrap()
        );
    }
    let stations = fs::read_to_string(d.path().join("a/stations.csv")).unwrap();
    assert_eq!(stations.lines().filter(|l| l.starts_with('S')).count(), 7);

    let truth = fs::read_to_string(d.path().join("a/truth_grid.csv")).unwrap();
    let rows: Vec<Vec<f64>> = truth
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let grid = unit_square_grid(4);
    assert_eq!(rows.len(), grid.len());
    for (r, p) in rows.iter().zip(&grid) {
        assert_eq!(&r[..2], p.coords());
        assert_eq!(r[2], true_gamma(p, ScenarioKind::Nonlinear));
        assert_eq!(r[3], true_delta(p, ScenarioKind::Nonlinear));
    }
}

#[test]
fn fit_smoke_run_resume_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    simulate(p, "sim", "5", "2");
    let stdout = ok(
        p,
        &fit_args(
            "a/chain.csv",
            &["--trace", "a/trace.csv", "--checkpoint-every", "5"],
        ),
    );
    assert!(stdout.contains("rejection-free"), "{stdout}");
    assert!(stdout.contains("8 stored draws"), "{stdout}");
    ok(
        p,
        &fit_args(
            "b/chain.csv",
            &["--trace", "b/trace.csv", "--checkpoint-every", "0"],
        ),
    );
    for f in ["chain.csv", "trace.csv", "chain.csv.checkpoint.json"] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }

    // Resuming a finished run reproduces it; a changed seed is refused.
    ok(p, &fit_args("a/chain.csv", &["--resume"]));
    assert_eq!(
        fs::read(p.join("a/chain.csv")).unwrap(),
        fs::read(p.join("b/chain.csv")).unwrap()
    );
    let refused = rainmap(p, &fit_args("a/chain.csv", &["--resume", "--seed", "99"]));
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("refused"));
    let missing = rainmap(p, &fit_args("c/chain.csv", &["--resume"]));
    assert_eq!(code(&missing), 1);
}

#[test]
fn forecast_functionals_match_the_library() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    simulate(p, "sim", "5", "3");
    ok(p, &fit_args("chain.csv", &[]));
    let archive = read_chain(&p.join("chain.csv")).unwrap();
    let grid = unit_square_grid(2);
    for f in Functional::ALL {
        let out = format!("{}.csv", f.name());
        let mut args = vec![
            "forecast",
            "--chain",
            "chain.csv",
            "--functional",
            f.name(),
            "--seed",
            "4",
            "--out",
            &out,
        ];
        if f == Functional::KlVsTruth {
            args.extend(["--truth", "sim/truth_grid.csv"]);
        } else {
            args.extend(["--grid-res", "2"]);
        }
        ok(p, &args);
        let text = fs::read_to_string(p.join(&out)).unwrap();
        let medians: Vec<f64> = text
            .lines()
            .skip(2)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        let (targets, truth) = if f == Functional::KlVsTruth {
            let (pts, t) =
                rainmap_core::simstudy::read_truth_grid(&p.join("sim/truth_grid.csv")).unwrap();
            (pts, Some(t))
        } else {
            (grid.clone(), None)
        };
        let expect = forecast_functional_grid(
            &archive.draws,
            &GridRequest {
                grid: &targets,
                points: &archive.header.points,
                functional: f,
                n_trials: archive.header.n_trials,
                seed: 4,
                truth: truth.as_deref(),
            },
        )
        .unwrap();
        assert_eq!(medians, expect.median, "{f}");

        ok(
            p,
            &[&args[..7], &["--out", "again.csv"], &args[9..]].concat(),
        );
        assert_eq!(fs::read(p.join("again.csv")).unwrap(), text.as_bytes());
    }
    let bad = rainmap(
        p,
        &[
            "forecast",
            "--chain",
            "chain.csv",
            "--functional",
            "rain-dance",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&bad), 1);
    let no_truth = rainmap(
        p,
        &[
            "forecast",
            "--chain",
            "chain.csv",
            "--functional",
            "kl-vs-truth",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&no_truth), 1);
}

#[test]
fn study_is_deterministic_across_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let run = |threads: &str, out: &str| {
        ok(
            p,
            &[
                "--threads",
                threads,
                "study",
                "--scenario",
                "linear",
                "--stations",
                "5",
                "--replicates",
                "2",
                "--iters",
                "10",
                "--burnin",
                "5",
                "--grid-res",
                "3",
                "--out",
                out,
            ],
        )
    };
    let stdout = run("1", "a");
    run("3", "b");
    assert!(stdout.contains("ordering parametric"), "{stdout}");
    for f in [
        "kl_summary.csv",
        "model_aggregates.csv",
        "truth_grid.csv",
        "run_config.toml",
    ] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = fs::read_to_string(p.join("a/kl_summary.csv")).unwrap();
    assert!(summary.starts_with("# rainmap schema_version=1"));
    assert_eq!(summary.lines().count(), 2 + 2 * 9);
}

#[test]
fn diagnose_reports_and_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = rainmap(
        d.path(),
        &["diagnose", "--test", "geweke", "--draws", "100000"],
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    let n = text.lines().find(|l| l.contains("test functions")).unwrap();
    let count: usize = n.split_whitespace().next().unwrap().parse().unwrap();
    assert!(count >= 12);

    let mutated = rainmap(
        d.path(),
        &[
            "diagnose",
            "--draws",
            "100000",
            "--mutation",
            "printed-step2",
        ],
    );
    assert_eq!(code(&mutated), 4);
}

#[test]
fn usage_and_data_errors_have_their_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&rainmap(p, &["fit", "--no-such-flag"])), 1);
    assert_eq!(code(&rainmap(p, &["--help"])), 0);
    assert_eq!(
        code(&rainmap(p, &["fit", "--data", "absent", "--out", "x.csv"])),
        2
    );
    fs::write(p.join("bad.toml"), "[sampler]\nn_iter = 3\n").unwrap();
    assert_eq!(
        code(&rainmap(
            p,
            &["--config", "bad.toml", "diagnose", "--draws", "100"]
        )),
        1
    );

    simulate(p, "sim", "4", "1");
    let mut daily = fs::read_to_string(p.join("sim/daily.csv")).unwrap();
    daily.push_str("S001,2003-02-30,1.0\n");
    fs::write(p.join("sim/daily.csv"), daily).unwrap();
    let out = rainmap(p, &fit_args("x.csv", &[]));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed date"));
}

#[test]
fn help_documents_every_flag() {
    let d = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 5] = [
        (
            "simulate",
            &[
                "--scenario",
                "--stations",
                "--seed",
                "--out",
                "--layout",
                "--grid-res",
            ],
        ),
        (
            "fit",
            &[
                "--data",
                "--model",
                "--iters",
                "--burnin",
                "--thin",
                "--seed",
                "--out",
                "--resume",
                "--wet-threshold",
            ],
        ),
        (
            "forecast",
            &[
                "--chain",
                "--grid-res",
                "--targets-csv",
                "--truth",
                "--functional",
                "--out",
            ],
        ),
        (
            "study",
            &["--scenario", "--replicates", "--iters", "--out", "--seed"],
        ),
        ("diagnose", &["--test", "--model", "--draws", "--mutation"]),
    ];
    for (cmd, flags) in cases {
        let text = ok(d.path(), &[cmd, "-h"]);
        for f in flags {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(f) || l.contains(&format!(" {f} ")));
            let line = line.unwrap_or_else(|| panic!("{cmd} --help lacks {f}"));
            assert!(
                line.trim().len() > f.len() + 8,
                "{cmd} {f} undocumented: {line}"
            );
        }
        assert!(text.contains("--threads") && text.contains("--config"));
    }
}
