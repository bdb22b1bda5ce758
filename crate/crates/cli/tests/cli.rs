use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

fn trcdag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trcdag"))
        .args(args)
        .env_remove("TRCDAG_CONFIG")
        .env_remove("TRCDAG_DATA")
        .env_remove("TRCDAG_TRUTH")
        .env_remove("TRCDAG_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = trcdag(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn generate(dir: &Path, model: &str, n: usize, m: usize, seed: u64) {
    ok(&[
        "generate",
        "--model",
        model,
        "--n",
        &n.to_string(),
        "--samples",
        &m.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn is_acyclic(n: usize, edges: &[Value]) -> bool {
    let mut indeg = vec![0usize; n];
    let pairs: Vec<(usize, usize)> = edges
        .iter()
        .map(|e| {
            (
                e[0].as_u64().unwrap() as usize,
                e[1].as_u64().unwrap() as usize,
            )
        })
        .collect();
    for &(_, j) in &pairs {
        indeg[j] += 1;
    }
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = stack.pop() {
        seen += 1;
        for &(a, b) in &pairs {
            if a == i {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    stack.push(b);
                }
            }
        }
    }
    seen == n
}

fn small_run<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--data",
        data,
        "--out",
        out,
        "--batch-size",
        "8",
        "--seed",
        "3",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn generate_writes_data_and_an_acyclic_truth() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "linear-gaussian", 12, 5000, 7);
    let csv = fs::read_to_string(tmp.path().join("data.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 12);
    assert_eq!(lines.count(), 5000);
    assert!(tmp.path().join("data.json").exists());
    let truth = read_json(&tmp.path().join("truth.json"));
    assert_eq!(truth["n"], 12);
    assert!(is_acyclic(12, truth["edges"].as_array().unwrap()));
}

#[test]
fn generating_gp_data_is_quick() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    generate(tmp.path(), "gp", 10, 1000, 1);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(tmp.path().join("data.csv").exists());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().to_str().unwrap();
    assert_eq!(
        trcdag(&["generate", "--model", "gp", "--out", out_dir])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        trcdag(&["generate", "--model", "mlp", "--n", "4", "--out", out_dir])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(trcdag(&["train", "--out", out_dir]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[procedure]\nitertions = 3\n").unwrap();
    assert_eq!(
        trcdag(&["config", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn zero_iterations_give_an_empty_report() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "linear-gaussian", 4, 200, 2);
    let data = tmp.path().join("data.csv");
    let run = tmp.path().join("run");
    let (d, o) = (data.to_str().unwrap(), run.to_str().unwrap());
    ok(&[&["train"][..], &small_run(d, o, &["--iters", "0"])].concat());
    let report = read_json(&run.join("report.json"));
    assert_eq!(report["iterations"], 0);
    assert!(report["best_graph"].is_null());
    assert!(report["metrics_post_prune"].is_null());
}

#[test]
fn training_reports_metrics_and_clip_rates() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "linear-gaussian", 4, 200, 2);
    let data = tmp.path().join("data.csv");
    let (trc_dir, ppo_dir) = (tmp.path().join("trc"), tmp.path().join("ppo"));
    let d = data.to_str().unwrap();
    let o = trc_dir.to_str().unwrap();
    let printed: Value =
        serde_json::from_str(&ok(
            &[&["train"][..], &small_run(d, o, &["--iters", "6"])].concat()
        ))
        .unwrap();
    assert!(printed["shd"].is_u64());
    let report = read_json(&trc_dir.join("report.json"));
    assert_eq!(report["iterations"], 6);
    assert!(report["metrics_post_prune"]["shd"].is_u64());
    assert!(trc_dir.join("graph.json").exists());
    assert!(trc_dir.join("periodic.csv").exists());
    assert_eq!(
        fs::read_to_string(trc_dir.join("log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let o = ppo_dir.to_str().unwrap();
    ok(&[
        &["train"][..],
        &small_run(d, o, &["--iters", "6", "--algo", "ppo"]),
    ]
    .concat());
    let report = read_json(&ppo_dir.join("report.json"));
    let (trc, ppo) = (
        report["clip_rate_trc"].as_f64().unwrap(),
        report["clip_rate_ppo"].as_f64().unwrap(),
    );
    assert!((0.0..=1.0).contains(&trc) && (0.0..=1.0).contains(&ppo));
}

#[test]
fn runs_are_reproducible_from_config_and_seed() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "lingam", 4, 200, 5);
    let data = tmp.path().join("data.csv");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[procedure]\niterations = 5\nbatch_size = 6\n").unwrap();
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        let mut r = read_json(&out.join("report.json"));
        r.as_object_mut().unwrap().remove("wall_clock_secs");
        reports.push(r);
        logs.push(fs::read(out.join("log.jsonl")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn a_single_cell_grid_matches_a_train_run() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "linear-gaussian", 4, 200, 4);
    let data = tmp.path().join("data.csv");
    let d = data.to_str().unwrap();
    let grid = tmp.path().join("grid");
    let cfg = tmp.path().join("trc.toml");
    fs::write(&cfg, "[trc]\nepsilon = 0.2\nsigma = 0.05\n").unwrap();
    let c = cfg.to_str().unwrap();
    let cell_args = [
        "--iters",
        "10",
        "--epsilons",
        "0.2",
        "--deltas",
        "0.05",
        "--seeds",
        "1",
        "--config",
        c,
    ];
    ok(&[
        &["gridsearch"][..],
        &small_run(d, grid.to_str().unwrap(), &cell_args),
    ]
    .concat());
    let train = tmp.path().join("train");
    ok(&[
        &["train"][..],
        &small_run(
            d,
            train.to_str().unwrap(),
            &["--iters", "10", "--config", c],
        ),
    ]
    .concat());

    let mut rd = csv::Reader::from_path(grid.join("grid_cells.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let headers = rd.headers().unwrap().clone();
    let field = |name: &str| -> f64 {
        rows[0][headers.iter().position(|h| h == name).unwrap()]
            .parse()
            .unwrap()
    };

    let report = read_json(&train.join("report.json"));
    assert_eq!(
        field("mean_shd"),
        report["metrics_post_prune"]["shd"].as_f64().unwrap()
    );
    let log = fs::read_to_string(train.join("log.jsonl")).unwrap();
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(field("mean_reward"), last["mean_reward"].as_f64().unwrap());
    assert_eq!(field("failures"), 0.0);
}

#[test]
fn the_default_grid_has_ten_cells_in_a_fixed_order() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "linear-gaussian", 3, 100, 6);
    let data = tmp.path().join("data.csv");
    let d = data.to_str().unwrap();
    let mut tables = Vec::new();
    for name in ["g1", "g2"] {
        let out = tmp.path().join(name);
        ok(&[
            &["gridsearch"][..],
            &small_run(d, out.to_str().unwrap(), &["--iters", "2", "--seeds", "1"]),
        ]
        .concat());
        let cells = fs::read_to_string(out.join("grid_cells.csv")).unwrap();
        assert_eq!(cells.lines().count(), 11);
        let table = fs::read_to_string(out.join("grid_table.csv")).unwrap();
        let mut lines = table.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 1 + 2 * 3);
        let deltas: Vec<f64> = lines
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(deltas, vec![0.02, 0.035, 0.05, 0.065, 0.08]);
        tables.push(table);
    }
    assert_eq!(tables[0], tables[1]);
}

fn write_graph(path: &Path, n: usize, edges: &[[usize; 2]]) {
    fs::write(
        path,
        serde_json::json!({ "n": n, "edges": edges }).to_string(),
    )
    .unwrap();
}

#[test]
fn eval_compares_graphs() {
    let tmp = TempDir::new().unwrap();
    let [truth, same, rev, small] =
        ["t", "s", "r", "x"].map(|n| tmp.path().join(format!("{n}.json")));
    write_graph(&truth, 3, &[[0, 1]]);
    write_graph(&same, 3, &[[0, 1]]);
    write_graph(&rev, 3, &[[1, 0]]);
    write_graph(&small, 2, &[[0, 1]]);
    let t = truth.to_str().unwrap();

    let v: Value = serde_json::from_str(&ok(&[
        "eval",
        "--estimate",
        same.to_str().unwrap(),
        "--truth",
        t,
    ]))
    .unwrap();
    assert_eq!(v["shd"], 0);
    assert_eq!(v["metrics"]["tpr"], 1.0);

    let v: Value = serde_json::from_str(&ok(&[
        "eval",
        "--estimate",
        rev.to_str().unwrap(),
        "--truth",
        t,
    ]))
    .unwrap();
    assert_eq!(v["metrics"]["fdr"], 1.0);
    assert_eq!(v["correct"], 0);
    assert_eq!(v["predicted"], 1);

    let out = trcdag(&["eval", "--estimate", small.to_str().unwrap(), "--truth", t]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_can_prune_against_data() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path(), "linear-gaussian", 4, 500, 8);
    let truth = tmp.path().join("truth.json");
    let full = tmp.path().join("full.json");
    write_graph(&full, 4, &[[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]);
    let v: Value = serde_json::from_str(&ok(&[
        "eval",
        "--estimate",
        full.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--prune",
        "--data",
        tmp.path().join("data.csv").to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(v["pruned"], true);
    assert!(v["graph"]["edges"].as_array().unwrap().len() <= 6);
}

#[test]
fn config_prints_loadable_toml() {
    let tmp = TempDir::new().unwrap();
    let text = ok(&["config"]);
    let path = tmp.path().join("c.toml");
    fs::write(&path, &text).unwrap();
    assert_eq!(ok(&["config", "--config", path.to_str().unwrap()]), text);
}

#[test]
fn configuration_chapter_matches_the_defaults() {
    let chapter = include_str!("../../../book/src/configuration.md");
    let block = chapter
        .split("```toml\n")
        .nth(1)
        .unwrap()
        .split("```")
        .next()
        .unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, block).unwrap();
    assert_eq!(
        ok(&["config", "--config", path.to_str().unwrap()]),
        ok(&["config"])
    );
}
