//! End-to-end runs of the `csunet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use csunet::config::RunConfig;
use csunet::network::CsUnet;
use csunet::tensor::Tensor;
use csunet::training::io::{read_image, read_mask, write_image, write_mask, write_tensor, Raster};
use csunet::training::{predict, Checkpoint, EpochRecord, SegSample};
use serde_json::Value;

/// Shrinks the tiny preset so a run takes a few seconds.
const SMALL: &[&str] = &[
    "model.input_size=[64, 64]",
    "model.window_size=2",
    "data.synthetic.size=64",
    "data.synthetic.samples=10",
];

fn csunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_small(mut args: Vec<&str>) -> Vec<&str> {
    for s in SMALL {
        args.extend(["--set", s]);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), String::from_utf8_lossy(&o.stderr));
}

fn train_into(dir: &Path) -> Output {
    let out = dir.to_str().unwrap();
    csunet(&with_small(vec!["train", "--epochs", "2", "--lr", "0.004", "-o", out]))
}

/// One shared two-epoch run, trained on first use.
fn shared_run() -> &'static Path {
    static RUN: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        assert_ok(&train_into(&run));
        (dir, run)
    });
    path
}

fn small_config() -> RunConfig {
    let o: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    RunConfig::from_overrides(&o).unwrap()
}

fn records(dir: &Path) -> Vec<EpochRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn summary(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoints_log_and_config_snapshot() {
    let run = shared_run();
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl", "config.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(records(run).len(), 2);
    let snapshot = RunConfig::load(&run.join("config.toml"), &[]).unwrap();
    assert_eq!(snapshot.train.lr, 0.004);
    assert_eq!(snapshot.train.epochs, 2);
    assert_eq!(snapshot.model, small_config().model);
}

#[test]
fn rerunning_reproduces_the_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&train_into(dir.path()));
    let read = |d: &Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(dir.path()), read(shared_run()));
}

#[test]
fn eval_matches_the_best_training_epoch() {
    let run = shared_run();
    let out = run.parent().unwrap().join("eval-best.jsonl");
    let o = csunet(&["eval", "--checkpoint", run.join("best.ckpt").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    assert!(stdout(&o).contains("mean"));
    let s = summary(&out);
    let mean = s["mean_dsc"].as_f64().unwrap();
    assert!(mean > 0.0 && mean <= 1.0, "{mean}");
    let best = records(run).into_iter().max_by(|a, b| a.val_mean_dsc.total_cmp(&b.val_mean_dsc)).unwrap();
    assert!((mean - best.val_mean_dsc).abs() < 1e-9, "{mean} vs {}", best.val_mean_dsc);
    assert!((s["mean_hd"].as_f64().unwrap() - best.val_mean_hd).abs() < 1e-9);
    let lines = std::fs::read_to_string(&out).unwrap().lines().count();
    assert_eq!(lines, s["cases"].as_u64().unwrap() as usize + 1);
}

#[test]
fn ground_truth_masks_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (_, val) = small_config().data.load().unwrap();
    for s in &val {
        write_mask(&dir.path().join(format!("{}.pgm", s.id)), s.height, s.width, &s.mask, false).unwrap();
    }
    let out = dir.path().join("eval.jsonl");
    let o = csunet(&with_small(vec!["eval", "--masks", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_ok(&o);
    let s = summary(&out);
    assert_eq!(s["mean_dsc"].as_f64(), Some(1.0));
    assert_eq!(s["mean_hd"].as_f64(), Some(0.0));
}

#[test]
fn predict_matches_the_library_argmax() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let (_, val) = small_config().data.load().unwrap();
    let s = &val[0];
    let image = dir.path().join("case.pgm");
    let raster = Raster { channels: s.channels, height: s.height, width: s.width, data: s.image.clone() };
    write_image(&image, &raster, true).unwrap();
    let mask = dir.path().join("case-mask.pgm");
    let ckpt = run.join("best.ckpt");
    assert_ok(&csunet(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        mask.to_str().unwrap(),
    ]));

    let ck = Checkpoint::load(&ckpt).unwrap();
    let (model, _) = CsUnet::new::<f32>(&ck.model, 0).unwrap();
    let r = read_image(&image).unwrap();
    let sample = SegSample { id: "case".into(), channels: 1, height: r.height, width: r.width, image: r.data, mask: vec![] };
    let want = predict(&model, &ck.params, &sample).unwrap();
    let (h, w, got) = read_mask(&mask).unwrap();
    assert_eq!((h, w), (64, 64));
    assert_eq!(got, want);
    let legend = std::fs::read_to_string(dir.path().join("case-mask.pgm.legend.txt")).unwrap();
    assert_eq!(legend.lines().collect::<Vec<_>>(), ["0\tbackground", "1\tclass_1", "2\tclass_2", "3\tclass_3"]);
}

#[test]
fn predict_accepts_an_all_zero_tensor_image() {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("blank.cstn");
    write_tensor(&image, &Tensor::<f32>::zeros(vec![1, 64, 64])).unwrap();
    let mask = dir.path().join("blank.pgm");
    assert_ok(&csunet(&[
        "predict",
        "--ascii",
        "--checkpoint",
        run.join("last.ckpt").to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        mask.to_str().unwrap(),
    ]));
    let (_, _, labels) = read_mask(&mask).unwrap();
    assert!(labels.iter().all(|&l| l < 4));
    assert!(std::fs::read(&mask).unwrap().starts_with(b"P2"));
}

fn params_total(args: &[&str]) -> (usize, usize) {
    let o = csunet(args);
    assert_ok(&o);
    let text = stdout(&o);
    let mut groups = 0;
    let mut total = 0;
    for line in text.lines() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        match cols.as_slice() {
            ["total", n] if !n.ends_with('M') => total = n.parse().unwrap(),
            [_, n] if !line.starts_with(' ') && !line.starts_with("total") => {
                if let Ok(n) = n.parse::<usize>() {
                    groups += n;
                }
            }
            _ => {}
        }
    }
    (groups, total)
}

#[test]
fn params_lines_add_up_and_match_the_reported_sizes() {
    let (groups, total) = params_total(&["params"]);
    assert_eq!(groups, total);
    let within = |n: usize, target: f64| ((n as f64 / 1e6) - target).abs() <= 0.03 * target;
    let (g6, m6) = params_total(&["params", "--preset", "full", "--method", "6"]);
    let (g0, m0) = params_total(&["params", "--preset", "full", "--method", "0"]);
    assert_eq!((g6, g0), (m6, m0));
    assert!(within(m6, 24.68), "{m6}");
    assert!(within(m0, 27.15), "{m0}");
}

#[test]
fn gradcheck_reports_and_signals_failures_by_exit_code() {
    let o = csunet(&["gradcheck", "w_cmsa"]);
    assert_ok(&o);
    assert!(stdout(&o).lines().any(|l| l.starts_with("w_cmsa") && l.ends_with("PASS")));
    let list = stdout(&csunet(&["gradcheck", "list"]));
    assert!(list.contains("sw_cmsa") && list.contains("full"));
    assert_eq!(csunet(&["gradcheck", "no_such_op"]).status.code(), Some(1));
}

#[test]
fn ablate_prints_one_row_per_requested_method() {
    let o = csunet(&["ablate", "--ids", "3"]);
    assert_ok(&o);
    let rows: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with(char::is_numeric)).map(String::from).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with('3') && rows[0].ends_with('M'));
    assert_eq!(csunet(&["ablate", "--ids", "9"]).status.code(), Some(1));
}

#[test]
fn dumped_config_reloads_to_the_same_dump() {
    let dir = tempfile::tempdir().unwrap();
    let o = csunet(&["dump-config", "--preset", "full", "--set", "train.epochs=7"]);
    assert_ok(&o);
    let path = dir.path().join("full.toml");
    std::fs::write(&path, stdout(&o)).unwrap();
    let again = csunet(&["dump-config", "--preset", "full", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&again), stdout(&o));
    assert!(stdout(&o).contains("epochs = 7"));
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    assert_eq!(csunet(&["train", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(csunet(&["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(csunet(&["params", "--method", "7"]).status.code(), Some(1));
    assert_eq!(csunet(&["eval", "--checkpoint", "/nonexistent/last.ckpt"]).status.code(), Some(2));
    assert_eq!(csunet(&["--help"]).status.code(), Some(0));
    let threads = Command::new(env!("CARGO_BIN_EXE_csunet"))
        .args(["gradcheck", "list"])
        .env("CSUNET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}
