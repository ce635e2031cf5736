use ngpsr::checkpoint::Checkpoint;
use ngpsr::config::TrainConfig;
use ngpsr::dataset::{load_scene, save_scene, Split};
use ngpsr::evaluate::{evaluate_model, evaluate_renders, mean_score, render_file_name};
use ngpsr::synth::synth_scene;
use ngpsr::trainer::{train, TrainOutput};

fn small_config() -> TrainConfig {
    TrainConfig { epochs: 4, steps_per_epoch: 10, batch_size: 256, lr: 0.005, deterministic: true, ..TrainConfig::default() }
}

#[test]
fn scene_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_scene(3, 4, 32, 2).unwrap();
    save_scene(&ds, dir.path()).unwrap();
    let back = load_scene(dir.path(), 2).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.indices(Split::Test), ds.indices(Split::Test));
    for (a, b) in back.views().iter().zip(ds.views()) {
        assert_eq!(a.name, b.name);
        // stored as 8-bit PNG
        for (x, y) in a.lr.data().iter().zip(b.lr.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn short_training_reduces_loss_and_checkpoint_restores() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_scene(0, 4, 32, 2).unwrap();
    let path = dir.path().join("model.ngps");
    let out = TrainOutput { checkpoint: Some(path.clone()) };
    let mut seen = 0;
    let r = train(&ds, &small_config(), &out, |_| seen += 1).unwrap();
    assert_eq!(seen, 40);
    let first: f32 = r.losses[..5].iter().map(|l| l.loss).sum();
    let last: f32 = r.losses[35..].iter().map(|l| l.loss).sum();
    assert!(last < first, "loss did not drop: {first} -> {last}");

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.config.to_text(), small_config().to_text());
    let (model, store) = ck.restore().unwrap();
    let a = mean_score(&evaluate_model(&model, &store, &ds, Split::Train).unwrap());
    let b = mean_score(&evaluate_model(&r.model, &r.checkpoint.params, &ds, Split::Train).unwrap());
    assert_eq!(a, b);
}

#[test]
fn saved_renders_score_like_in_memory_renders() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_scene(2, 3, 16, 2).unwrap();
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: 3, batch_size: 64, deterministic: true, ..TrainConfig::default() };
    let r = train(&ds, &cfg, &TrainOutput::default(), |_| ()).unwrap();
    let store = &r.checkpoint.params;
    for v in ds.indices(Split::Test) {
        let img = r.model.render_view(store, &ds, v).unwrap();
        img.save_png(&dir.path().join(render_file_name(&ds.view(v).name))).unwrap();
    }
    let from_disk = evaluate_renders(dir.path(), &ds, Split::Test).unwrap();
    let direct = evaluate_model(&r.model, store, &ds, Split::Test).unwrap();
    for (a, b) in from_disk.iter().zip(&direct) {
        assert_eq!(a.bicubic_psnr, b.bicubic_psnr);
        // quantization to 8 bits costs little
        assert!((a.psnr - b.psnr).abs() < 0.5, "{} vs {}", a.psnr, b.psnr);
    }
}

#[test]
fn missing_renders_are_all_named() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_scene(0, 4, 16, 2).unwrap();
    let err = evaluate_renders(dir.path(), &ds, Split::Train).unwrap_err().to_string();
    for v in ds.indices(Split::Train) {
        assert!(err.contains(&render_file_name(&ds.view(v).name)), "{err}");
    }
}

#[test]
fn config_text_round_trips_with_overrides() {
    let mut cfg = TrainConfig::default();
    cfg.apply_override("lr=0.002").unwrap();
    cfg.apply_override("ablation=no_gcnn").unwrap();
    let back = TrainConfig::parse_text(&cfg.to_text()).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert!(cfg.apply_override("nonsense=1").is_err());
    let err = TrainConfig::parse_text("lr = 0.1\nbogus line\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
