use candle_core::Device;
use segbone::depth3d::{load_attention, DepthModel, VNetConfig};
use segbone::evaluation::{evaluate_dataset, EvalConfig, EvalMode};
use segbone::sam2d::{is_encoder, ModelConfig, SegModel};
use segbone::training::{
    load_split, precompute_attention, train_stage_a2d, train_stage_fusion, train_v3d, TrainConfig, TrainLog,
};
use segbone::volume::{generate_dataset, split_dataset, PhantomConfig, Split, SplitRatios};

fn small_phantoms() -> PhantomConfig {
    PhantomConfig {
        shape: [6, 32, 32],
        spacing_mm: [2.0, 1.0, 1.0],
        size_range_mm: (3.0, 5.0),
        length_range_mm: (8.0, 12.0),
        margin_mm: 1.0,
        min_objects: 1,
        max_objects: 3,
        ..PhantomConfig::default()
    }
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        warmup_iters: 0,
        input_size: 32,
        model: ModelConfig::tiny(32),
        vnet: VNetConfig { size: 16, base_channels: 2, levels: 3 },
        ..TrainConfig::default()
    }
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 6, 11, &small_phantoms()).unwrap();
    let m = split_dataset(&m, SplitRatios::new(4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0), 1).unwrap();
    let dev = Device::Cpu;
    let train = load_split(&m, Split::Train, Some("t1")).unwrap();
    let val = load_split(&m, Split::Val, Some("t1")).unwrap();
    assert_eq!((train.len(), val.len()), (4, 1));
    let cfg = smoke_config();
    let log_path = dir.path().join("a.jsonl");
    let mut log = TrainLog::new(Some(&log_path)).unwrap();
    let a = train_stage_a2d(&cfg, &train, &val, None, &mut log, &dev).unwrap();
    log.flush().unwrap();
    assert_eq!(a.iterations, 6);
    let line = std::fs::read_to_string(&log_path).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for k in ["iter", "lr", "loss", "ce", "dice", "mode"] {
        assert!(first.get(k).is_some(), "log lacks {k}");
    }
    let path = dir.path().join("a.bundle");
    a.bundle.save(&path).unwrap();
    let reloaded = SegModel::from_bundle(&segbone::checkpoint::ModelBundle::load(&path).unwrap(), &dev).unwrap();
    assert_eq!(reloaded.store.hashes().unwrap(), SegModel::from_bundle(&a.bundle, &dev).unwrap().store.hashes().unwrap());

    let cfg3 = TrainConfig { batch_size: 1, ..smoke_config() };
    let v = train_v3d(&cfg3, &train, &val, &mut TrainLog::new(None).unwrap(), &dev).unwrap();
    assert_eq!(v.iterations, 4);
    let dm = DepthModel::from_bundle(&v.bundle, &dev).unwrap();
    let all: Vec<_> = m.entries.clone();
    assert_eq!(precompute_attention(&dm, "h", &all, &cfg.attention).unwrap(), all.len());
    for e in &all {
        let (maps, _) = load_attention(&e.volume).unwrap();
        assert_eq!(maps.dim().0, 6);
        assert!(maps.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    let f = train_stage_fusion(&cfg, &train, &val, &a.bundle, &mut TrainLog::new(None).unwrap(), &dev).unwrap();
    assert!(f.changed.iter().all(|n| !is_encoder(n)));
    assert!(f.changed.iter().any(|n| n.starts_with("fusion.")));
    let model = SegModel::from_bundle(&f.bundle, &dev).unwrap();
    let test = m.select(Split::Test, Some("t1"));
    for mode in [EvalMode::Auto, EvalMode::TwoDOnly, EvalMode::PromptedOracle] {
        let r = evaluate_dataset(
            &model,
            &test,
            &EvalConfig { mode, use_depth_attention: true, ..EvalConfig::default() },
        )
        .unwrap();
        for s in &r.volumes {
            assert!((s.dsc - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-9);
        }
    }
}
