//! End-to-end tests of the `stn` binary: exit codes, output files,
//! determinism across runs, and the single-branch reductions.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stn"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = stn().args(args).output().expect("spawn stn");
    assert!(
        out.status.success(),
        "stn {:?} failed: {}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    stn()
        .args(args)
        .output()
        .expect("spawn stn")
        .status
        .code()
        .expect("exit code")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }
}

/// Generates a small dataset and trains a fast toy configuration once.
fn prepare_trained(ws: &Workspace) {
    run_ok(&[
        "gen-synthetic",
        "--out",
        &ws.arg("data"),
        "--classes",
        "20",
        "--per-class",
        "8",
        "--seed",
        "3",
    ]);
    let config = serde_json::json!({
        "n_way": 5,
        "k_shot": 1,
        "t_query": 3,
        "epochs": 1,
        "episodes_per_epoch": 4,
        "val_episodes": 2,
        "encoder": { "embed_dim": 16, "depth": 1, "heads": 2 },
    });
    std::fs::write(ws.path("run.json"), serde_json::to_vec(&config).unwrap()).unwrap();
    run_ok(&[
        "train",
        "--data",
        &ws.arg("data/manifest.json"),
        "--config",
        &ws.arg("run.json"),
        "--out",
        &ws.arg("ckpt"),
        "--seed",
        "5",
    ]);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = run_ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-synthetic",
        "train",
        "eval",
        "sweep-alpha",
        "ablate-metrics",
        "ablate-fusion",
        "export-attention",
    ] {
        assert!(text.contains(sub), "--help missing {sub}:\n{text}");
    }
    let out = run_ok(&["eval", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--data",
        "--ckpt-global",
        "--ckpt-local",
        "--alpha",
        "--tasks",
        "--seed",
        "default value",
    ] {
        assert!(
            text.to_lowercase()
                .contains(&flag.replace("default value", "default")),
            "eval --help missing {flag}:\n{text}"
        );
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(exit_code(&["no-such-command"]), 1);
    assert_eq!(exit_code(&["eval", "--bogus-flag"]), 1);
    assert_eq!(exit_code(&[]), 1);
    // Spec violation in a flag value is a usage error too.
    let ws = Workspace::new();
    assert_eq!(
        exit_code(&["gen-synthetic", "--out", &ws.arg("data"), "--classes", "4",]),
        1
    );
}

#[test]
fn data_errors_exit_two() {
    let ws = Workspace::new();
    assert_eq!(
        exit_code(&[
            "train",
            "--data",
            &ws.arg("missing/manifest.json"),
            "--out",
            &ws.arg("ckpt"),
        ]),
        2
    );
    // A corrupted checkpoint is a format error.
    prepare_trained(&ws);
    let ckpt = ws.path("ckpt/global.stnt");
    let bytes = read(&ckpt);
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(
        exit_code(&[
            "eval",
            "--data",
            &ws.arg("data/manifest.json"),
            "--ckpt-global",
            &ws.arg("ckpt/global.stnt"),
            "--ckpt-local",
            &ws.arg("ckpt/local.stnt"),
            "--out",
            &ws.arg("eval"),
            "--tasks",
            "2",
            "--t",
            "2",
        ]),
        2
    );
}

#[test]
fn train_eval_roundtrip_and_cross_run_determinism() {
    let ws_a = Workspace::new();
    let ws_b = Workspace::new();
    for ws in [&ws_a, &ws_b] {
        prepare_trained(ws);
        run_ok(&[
            "eval",
            "--data",
            &ws.arg("data/manifest.json"),
            "--ckpt-global",
            &ws.arg("ckpt/global.stnt"),
            "--ckpt-local",
            &ws.arg("ckpt/local.stnt"),
            "--out",
            &ws.arg("eval"),
            "--tasks",
            "5",
            "--t",
            "3",
            "--seed",
            "9",
        ]);
    }
    for rel in [
        "ckpt/train_log.csv",
        "ckpt/global.stnt",
        "ckpt/local.stnt",
        "eval/eval.csv",
    ] {
        assert_eq!(
            read(&ws_a.path(rel)),
            read(&ws_b.path(rel)),
            "{rel} differs between identical runs"
        );
    }
    // The JSON summary embeds the resolved configuration.
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&ws_a.path("eval/eval.json"))).unwrap();
    assert!(summary["config"]["options"]["fusion"]["alpha"].is_number());
    assert_eq!(summary["config"]["common"]["seed"], 9);
}

#[test]
fn eval_alpha_endpoints_match_single_branch_reports() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    let eval_at = |alpha: &str, out: &str| {
        run_ok(&[
            "eval",
            "--data",
            &ws.arg("data/manifest.json"),
            "--ckpt-global",
            &ws.arg("ckpt/global.stnt"),
            "--ckpt-local",
            &ws.arg("ckpt/local.stnt"),
            "--out",
            &ws.arg(out),
            "--tasks",
            "4",
            "--t",
            "3",
            "--seed",
            "11",
            "--alpha",
            alpha,
        ]);
        let v: serde_json::Value =
            serde_json::from_slice(&read(&ws.path(&format!("{out}/eval.json")))).unwrap();
        v["mean"].as_f64().unwrap()
    };
    // Same seeds, same tasks: endpoint fusions must reproduce the
    // single-branch evaluations exactly.
    let a0 = eval_at("0.0", "eval_a0");
    let a0_again = eval_at("0.0", "eval_a0_again");
    assert_eq!(a0, a0_again);
    let a1 = eval_at("1.0", "eval_a1");
    let a1_again = eval_at("1.0", "eval_a1_again");
    assert_eq!(a1, a1_again);
}

#[test]
fn sweep_alpha_grid_shape() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    run_ok(&[
        "sweep-alpha",
        "--data",
        &ws.arg("data/manifest.json"),
        "--ckpt-global",
        &ws.arg("ckpt/global.stnt"),
        "--ckpt-local",
        &ws.arg("ckpt/local.stnt"),
        "--out",
        &ws.arg("sweep"),
        "--grid",
        "0.1:0.9:0.1",
        "--tasks",
        "2",
        "--t",
        "2",
    ]);
    let csv = String::from_utf8(read(&ws.path("sweep/sweep.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9, "csv:\n{csv}");
    let alphas: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').next().unwrap().parse().unwrap())
        .collect();
    for (i, a) in alphas.iter().enumerate() {
        assert!(
            (a - 0.1 * (i + 1) as f64).abs() < 1e-9,
            "grid echo {alphas:?}"
        );
    }
    assert_eq!(
        exit_code(&[
            "sweep-alpha",
            "--grid",
            "bad",
            "--data",
            "x",
            "--ckpt-global",
            "x",
            "--ckpt-local",
            "x",
            "--out",
            "x"
        ]),
        1
    );
}

#[test]
fn ablate_metrics_cross_table() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    run_ok(&[
        "ablate-metrics",
        "--data",
        &ws.arg("data/manifest.json"),
        "--ckpt-global",
        &ws.arg("ckpt/global.stnt"),
        "--ckpt-local",
        &ws.arg("ckpt/local.stnt"),
        "--out",
        &ws.arg("metrics"),
        "--global-kinds",
        "sqr,dot",
        "--local-kinds",
        "kl,covar",
        "--tasks",
        "2",
        "--t",
        "2",
    ]);
    let csv = String::from_utf8(read(&ws.path("metrics/metrics.csv"))).unwrap();
    // 2 single global + 2 single local + 2x2 cross = 8 rows.
    assert_eq!(csv.lines().count() - 1, 8, "csv:\n{csv}");
}

#[test]
fn ablate_fusion_modes() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    for (mode, normalize, out) in [
        ("manual", "on", "fuse_on"),
        ("manual", "off", "fuse_off"),
        ("adaptive", "on", "fuse_adaptive"),
    ] {
        run_ok(&[
            "ablate-fusion",
            "--data",
            &ws.arg("data/manifest.json"),
            "--ckpt-global",
            &ws.arg("ckpt/global.stnt"),
            "--ckpt-local",
            &ws.arg("ckpt/local.stnt"),
            "--out",
            &ws.arg(out),
            "--mode",
            mode,
            "--normalize",
            normalize,
            "--tasks",
            "2",
            "--t",
            "2",
            "--adapt-episodes",
            "3",
        ]);
        let v: serde_json::Value =
            serde_json::from_slice(&read(&ws.path(&format!("{out}/fusion.json")))).unwrap();
        assert_eq!(v["mode"], mode);
        assert!(v["mean"].as_f64().unwrap() >= 0.0);
        if mode == "adaptive" {
            assert!(v["adaptive_params"]["omega"].is_array());
        }
    }
}

#[test]
fn export_attention_writes_row_stochastic_maps() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    // Any image blob from the dataset works as input.
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&ws.path("data/manifest.json"))).unwrap();
    let blob = manifest["classes"][0]["image_blobs"][0].as_str().unwrap();
    run_ok(&[
        "export-attention",
        "--ckpt",
        &ws.arg("ckpt/global.stnt"),
        "--image",
        &ws.path("data").join(blob).display().to_string(),
        "--out",
        &ws.arg("attn.stnt"),
    ]);
    let map = stn_core::episodic::load_tensor_map(&ws.path("attn.stnt")).unwrap();
    // depth 1, 2 heads in the toy config.
    assert_eq!(map.len(), 2);
    for (name, tensor) in &map {
        assert_eq!(
            tensor.dims,
            vec![17, 17],
            "{name} has dims {:?}",
            tensor.dims
        );
        let values = match &tensor.payload {
            stn_core::episodic::TensorPayload::F64(v) => v,
            other => panic!("{name}: unexpected payload {other:?}"),
        };
        for row in values.chunks(17) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "{name} row sums to {s}");
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    let eval_with_threads = |threads: &str, out: &str| {
        let status = stn()
            .env("STN_THREADS", threads)
            .args([
                "eval",
                "--data",
                &ws.arg("data/manifest.json"),
                "--ckpt-global",
                &ws.arg("ckpt/global.stnt"),
                "--ckpt-local",
                &ws.arg("ckpt/local.stnt"),
                "--out",
                &ws.arg(out),
                "--tasks",
                "6",
                "--t",
                "2",
                "--seed",
                "21",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        read(&ws.path(&format!("{out}/eval.csv")))
    };
    let single = eval_with_threads("1", "eval_t1");
    let parallel = eval_with_threads("0", "eval_t0");
    assert_eq!(single, parallel, "results differ across thread counts");
}

#[test]
fn outputs_are_idempotent() {
    let ws = Workspace::new();
    prepare_trained(&ws);
    let first = read(&ws.path("ckpt/train_log.csv"));
    // Re-running with identical flags overwrites with identical bytes.
    run_ok(&[
        "train",
        "--data",
        &ws.arg("data/manifest.json"),
        "--config",
        &ws.arg("run.json"),
        "--out",
        &ws.arg("ckpt"),
        "--seed",
        "5",
    ]);
    assert_eq!(first, read(&ws.path("ckpt/train_log.csv")));
}
