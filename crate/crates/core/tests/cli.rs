//! Drives every CLI command once on tiny phantoms and checks the artifacts.

use std::path::Path;

use segbone::checkpoint::ModelBundle;
use segbone::evaluation::EvalReport;
use segbone::volume::{load_mask, load_volume, DatasetManifest};
use serde_json::{json, Value};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["segbone"];
    argv.extend_from_slice(args);
    segbone::cli::run(argv)
}

fn ok(args: &[&str]) {
    assert_eq!(run(args), 0, "segbone {}", args.join(" "));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn cli_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let phantom_cfg = d.join("phantom.json");
    std::fs::write(
        &phantom_cfg,
        json!({"size_range_mm": [3.0, 5.0], "length_range_mm": [8.0, 12.0], "margin_mm": 1.0, "max_objects": 3}).to_string(),
    )
    .unwrap();
    let train_cfg = d.join("train.json");
    std::fs::write(
        &train_cfg,
        json!({
            "epochs": 1, "batch_size": 4, "warmup_iters": 0, "input_size": 32,
            "model": serde_json::to_value(segbone::sam2d::ModelConfig::tiny(32)).unwrap(),
            "vnet": {"size": 16, "base_channels": 2, "levels": 3},
        })
        .to_string(),
    )
    .unwrap();

    let data = d.join("data");
    ok(&["phantom", "gen", "--count", "6", "--seed", "5", "--shape", "6,32,32", "--spacing", "2,1,1", "--config", p(&phantom_cfg), "--out", p(&data)]);
    let manifest = data.join("manifest.json");
    ok(&["split", "--manifest", p(&manifest), "--counts", "4,1,1", "--seed", "0"]);
    let m = DatasetManifest::load(&manifest).unwrap();
    assert_eq!(m.entries.len(), 12, "six phantoms with a twin each");
    m.check_patient_partition().unwrap();

    let tc = p(&train_cfg);
    ok(&["train-2d", "--data", p(&manifest), "--out", p(&d.join("a")), "--config", tc]);
    ok(&["train-3d", "--data", p(&manifest), "--out", p(&d.join("v")), "--config", tc, "--batch-size", "1"]);
    ok(&["attn-precompute", "--ckpt", p(&d.join("v/bundle.bin")), "--data", p(&manifest), "--config", tc]);
    ok(&["train-fusion", "--data", p(&manifest), "--ckpt", p(&d.join("a/bundle.bin")), "--out", p(&d.join("f")), "--config", tc]);
    for stage in ["a", "v", "f"] {
        let s = read(&d.join(stage).join("summary.json"));
        assert_eq!(s["epochs"].as_array().unwrap().len(), 1);
        assert!(d.join(stage).join("config.json").exists());
        assert!(!std::fs::read_to_string(d.join(stage).join("train_log.jsonl")).unwrap().is_empty());
    }
    let fusion = ModelBundle::load(d.join("f/bundle.bin")).unwrap();
    assert_eq!(fusion.stage, "FUSION");
    assert_eq!(fusion.history, vec!["A2D".to_string()]);

    let report = d.join("eval.json");
    let csv = d.join("eval.csv");
    ok(&[
        "eval", "--ckpt", p(&d.join("f/bundle.bin")), "--data", p(&manifest), "--split", "test",
        "--report", p(&report), "--csv", p(&csv), "--use-depth-attention", "--bootstrap", "50",
    ]);
    let r: EvalReport = serde_json::from_value(read(&report)).unwrap();
    assert_eq!(r.volumes.len(), 1);
    assert!((0.0..=1.0).contains(&r.mean_dsc));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);

    let vol = &m.entries.iter().find(|e| e.sequence_tag == "t1").unwrap().volume;
    let out = d.join("seg");
    ok(&[
        "segment", "--ckpt", p(&d.join("f/bundle.bin")), "--volume", p(vol), "--mode", "prompt",
        "--prompts", r#"{"points":[[10,12]]}"#, "--slices", "2,3", "--out", p(&out),
    ]);
    let (mask, _) = load_mask(&out).unwrap();
    assert_eq!(mask.shape(), load_volume(vol).unwrap().shape());
    for k in [0, 1, 4, 5] {
        assert!(mask.data.index_axis(ndarray::Axis(0), k).iter().all(|&v| v == 0));
    }
    ok(&[
        "segment", "--ckpt", p(&d.join("f/bundle.bin")), "--volume", p(vol), "--ckpt3d", p(&d.join("v/bundle.bin")),
        "--use-depth-attention", "--out", p(&d.join("seg_auto")),
    ]);

    // Input errors exit 1, missing files 2.
    assert_eq!(run(&["segment", "--ckpt", p(&d.join("f/bundle.bin")), "--volume", p(vol), "--mode", "prompt", "--out", p(&out)]), 1);
    assert_eq!(run(&["segment", "--ckpt", p(&d.join("f/bundle.bin")), "--volume", p(vol), "--slices", "9", "--out", p(&out)]), 1);
    assert_eq!(run(&["eval", "--ckpt", p(&d.join("nope.bin")), "--data", p(&manifest), "--report", p(&report)]), 2);
}
