use std::path::Path;
use std::process::{Command, Output};

use pillarflow::harness::dataset::read_dataset;
use pillarflow::harness::eval::format_table;
use pillarflow::harness::experiment::decode_config;
use pillarflow::harness::{detect, evaluate, prepare_scene, FrameResult, Model, ModelConfig, RunConfig, DISTANCES};
use pillarflow::params::ParamStore;
use pillarflow::tensor::checkpoint;

const CONFIG: &str = "\
x_range = -8,8
y_range = -8,8
pillar_size = 0.5
max_pillars = 512
state_dim = 8
message_dim = 8
steps = 1
block_channels = 8,8,8
up_channels = 8
sequences = 4
frames = 3
seq_len = 2
epochs = 25
lr = 2e-3
";

fn pillarflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pillarflow"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = pillarflow(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gradcheck_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["gradcheck"], dir.path());
    assert!(text.lines().skip(1).all(|l| l.ends_with("\tok")), "{text}");
}

#[test]
fn bad_usage_exits_nonzero_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["train", "--bogus"],
        vec!["eval", "--dets", "missing", "--gts", "missing"],
        vec!["infer", "--checkpoint", "missing.ckpt", "--out", "x"],
    ] {
        let out = pillarflow(&args, dir.path());
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn gen_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), CONFIG).unwrap();
    for out in ["a", "b"] {
        ok(&["gen", "--config", "run.cfg", "--seed", "7", "--out", out], d);
    }
    ok(&["gen", "--config", "run.cfg", "--seed", "8", "--out", "c"], d);
    let read = |sub: &str| std::fs::read(d.join(sub).join("seq_0000.frames")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

/// The file-based pipeline reports the AP of the same model evaluated in
/// process.
#[test]
fn infer_then_eval_reproduces_in_process_ap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), CONFIG).unwrap();
    ok(&["gen", "--config", "run.cfg", "--out", "data"], d);
    ok(&["train", "--config", "run.cfg", "--data", "data", "--out", "run"], d);
    ok(&["infer", "--config", "run.cfg", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "dets"], d);
    let table = ok(&["eval", "--dets", "dets", "--gts", "dets"], d);

    let run = RunConfig::parse(CONFIG).unwrap();
    let config = ModelConfig::from_run(&run).unwrap();
    let grid = config.anchor_grid().unwrap();
    let model = Model {
        config: config.clone(),
        params: ParamStore::from_entries(checkpoint::load(&d.join("run/model.ckpt")).unwrap()).unwrap(),
    };
    let results: Vec<FrameResult> = read_dataset(&d.join("data"))
        .unwrap()
        .iter()
        .map(|(_, scene)| {
            let sample = prepare_scene(&config, &grid, scene, run.seq_len, false).unwrap();
            FrameResult {
                detections: detect(&model, &sample, &decode_config(&run)).unwrap(),
                gts: sample.last().gts.clone(),
            }
        })
        .collect();
    let rows = evaluate(&results, &DISTANCES);
    assert!(rows[0].mean > 0.0, "{}", format_table(&rows));
    assert_eq!(table, format_table(&rows));
}
