//! Batch sampling and the optimization loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{BatchUnit, Schedule, TrainConfig};
use crate::dataset::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::model::{Model, Pixel};
use crate::optim::{clip_grad_norm, AdamState};
use crate::params::ParamStore;

/// Stream of the batch sampler, kept apart from parameter initialization.
const SAMPLER_STREAM: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub pixel: Pixel,
    pub target: [f32; 3],
}

fn hr_of(ds: &SceneDataset, view: usize) -> Result<&crate::image::Image> {
    ds.view(view)
        .hr
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("view {} ({}) has no HR target", view, ds.view(view).name)))
}

/// `n` pixels drawn uniformly, with replacement, from all HR pixels of `views`.
pub fn sample_batch<R: Rng>(ds: &SceneDataset, views: &[usize], n: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let mut offsets = Vec::with_capacity(views.len());
    let mut total = 0usize;
    for &v in views {
        let hr = hr_of(ds, v)?;
        offsets.push(total);
        total += hr.width() * hr.height();
    }
    if n > 0 && total == 0 {
        return Err(Error::Contract("no pixels to sample from".into()));
    }
    (0..n)
        .map(|_| {
            let k = rng.gen_range(0..total);
            let i = offsets.partition_point(|&o| o <= k) - 1;
            let view = views[i];
            let hr = hr_of(ds, view)?;
            let local = k - offsets[i];
            let (x, y) = (local % hr.width(), local / hr.width());
            Ok(Sample { pixel: Pixel { view, x, y }, target: hr.pixel(x, y) })
        })
        .collect()
}

/// Every pixel of `n` distinct views drawn from `views` (all of them if `n` is larger).
pub fn sample_images<R: Rng>(ds: &SceneDataset, views: &[usize], n: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let mut picked: Vec<usize> = sample_indices(rng, views.len(), n.min(views.len())).into_iter().map(|i| views[i]).collect();
    picked.sort_unstable();
    let mut out = Vec::new();
    for view in picked {
        let hr = hr_of(ds, view)?;
        for y in 0..hr.height() {
            for x in 0..hr.width() {
                out.push(Sample { pixel: Pixel { view, x, y }, target: hr.pixel(x, y) });
            }
        }
    }
    Ok(out)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState,
    ds: &SceneDataset,
    batch: &[Sample],
    grad_clip: f32,
) -> Result<f32> {
    let pixels: Vec<Pixel> = batch.iter().map(|s| s.pixel).collect();
    let targets: Vec<f32> = batch.iter().flat_map(|s| s.target).collect();
    let (loss, grads) = model.loss_and_grads(store, ds, &pixels, &targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {loss}{}", first_bad_param(store))));
    }
    for (id, name, _) in store.iter() {
        if let Some(g) = grads.get(id) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at element {i} is {}", g[i])));
            }
        }
    }
    store.accumulate(&grads)?;
    if grad_clip > 0.0 {
        clip_grad_norm(store, grad_clip);
    }
    adam.step(store)?;
    let bad = first_bad_param(store);
    if !bad.is_empty() {
        return Err(Error::NonFinite(format!("after update{bad}")));
    }
    Ok(loss)
}

fn first_bad_param(store: &ParamStore<f32>) -> String {
    store
        .iter()
        .find_map(|(_, name, t)| t.first_non_finite().map(|i| format!("; first non-finite tensor `{name}` at element {i}")))
        .unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.epoch, r.loss).unwrap();
    }
    out
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    fs::write(path, loss_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Steps per epoch after resolving the automatic setting.
pub fn steps_per_epoch(cfg: &TrainConfig, ds: &SceneDataset) -> usize {
    if cfg.steps_per_epoch > 0 {
        return cfg.steps_per_epoch;
    }
    let train = ds.indices(Split::Train);
    let units = match cfg.batch_unit {
        BatchUnit::Pixels => train.iter().map(|&v| ds.view(v).hr_size()).map(|(w, h)| w * h).sum(),
        BatchUnit::Images => train.len(),
    };
    units.div_ceil(cfg.batch_size).max(1)
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f32 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => (cfg.lr as f64 * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())) as f32,
    }
}

/// Where [`train`] writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Final checkpoint; periodic ones go next to it as `<stem>.epoch<N>.ngps`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
}

/// Runs `epochs × steps_per_epoch` steps on the training split.
/// `on_step` sees every logged row as it is produced.
pub fn train(
    ds: &SceneDataset,
    cfg: &TrainConfig,
    output: &TrainOutput,
    mut on_step: impl FnMut(&LossRow) + Send,
) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.scale() != cfg.scale {
        return Err(Error::Config(format!("scene scale {} differs from configured scale {}", ds.scale(), cfg.scale)));
    }
    let ds_levels;
    let ds = if ds.levels() != cfg.model.levels {
        ds_levels = ds.clone().with_levels(cfg.model.levels)?;
        &ds_levels
    } else {
        ds
    };
    let views = ds.indices(Split::Train);
    if views.is_empty() {
        return Err(Error::Contract("scene has no training views".into()));
    }
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let (model, mut store) = Model::new(cfg.model.clone(), cfg.seed)?;
        model.audit(&store)?;
        let mut adam = AdamState::new(&store, cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        let per_epoch = steps_per_epoch(cfg, ds);
        let total = cfg.epochs * per_epoch;
        let mut losses = Vec::with_capacity(total);
        for epoch in 0..cfg.epochs {
            for _ in 0..per_epoch {
                let step = losses.len();
                let batch = match cfg.batch_unit {
                    BatchUnit::Pixels => sample_batch(ds, &views, cfg.batch_size, &mut rng)?,
                    BatchUnit::Images => sample_images(ds, &views, cfg.batch_size, &mut rng)?,
                };
                adam.lr = lr_at(cfg, step, total);
                let loss = train_step(&model, &mut store, &mut adam, ds, &batch, cfg.grad_clip)?;
                let row = LossRow { step, epoch, loss };
                on_step(&row);
                losses.push(row);
            }
            if let Some(path) = &output.checkpoint {
                if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                    let ck = Checkpoint { config: cfg.clone(), params: store.clone(), adam: Some(adam.clone()) };
                    ck.save(&path.with_extension(format!("epoch{}.ngps", epoch + 1)))?;
                }
            }
        }
        adam.lr = cfg.lr;
        let checkpoint = Checkpoint { config: cfg.clone(), params: store, adam: Some(adam) };
        if let Some(path) = &output.checkpoint {
            checkpoint.save(path)?;
        }
        Ok(TrainResult { model, checkpoint, losses })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::synth_scene;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            epochs: 2,
            steps_per_epoch: 3,
            model: ModelConfig { table_size: 1 << 10, ..ModelConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampling_is_seeded_and_total() {
        let ds = synth_scene(0, 3, 16, 2).unwrap();
        let views = ds.indices(Split::Train);
        let draw = |seed| sample_batch(&ds, &views, 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
        assert!(sample_batch(&ds, &views, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().is_empty());
        for s in draw(3) {
            assert!(views.contains(&s.pixel.view));
            assert_eq!(s.target, ds.view(s.pixel.view).hr.as_ref().unwrap().pixel(s.pixel.x, s.pixel.y));
        }
    }

    #[test]
    fn image_batches_cover_whole_views() {
        let ds = synth_scene(0, 4, 8, 2).unwrap();
        let b = sample_images(&ds, &ds.indices(Split::Train), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.len(), 2 * 64);
    }

    #[test]
    fn matching_targets_leave_parameters_unchanged() {
        let ds = synth_scene(0, 2, 16, 2).unwrap();
        let cfg = tiny_config();
        let (model, mut store) = Model::new(cfg.model.clone(), 0).unwrap();
        let pixels: Vec<Pixel> = (0..20).map(|i| Pixel { view: 0, x: i % 16, y: i / 16 }).collect();
        let pred = model.forward_pixels(&store, &ds, &pixels).unwrap();
        let batch: Vec<Sample> = pixels
            .iter()
            .zip(pred.chunks(3))
            .map(|(&pixel, c)| Sample { pixel, target: [c[0], c[1], c[2]] })
            .collect();
        let before = store.clone();
        let mut adam = AdamState::new(&store, cfg.lr);
        let loss = train_step(&model, &mut store, &mut adam, &ds, &batch, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        for ((_, _, a), (_, _, b)) in before.iter().zip(store.iter()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn short_run_logs_every_step_and_is_reproducible() {
        let ds = synth_scene(0, 3, 16, 2).unwrap();
        let mut cfg = tiny_config();
        cfg.deterministic = true;
        let mut seen = 0;
        let a = train(&ds, &cfg, &TrainOutput::default(), |_| seen += 1).unwrap();
        assert_eq!(a.losses.len(), 6);
        assert_eq!(seen, 6);
        assert_eq!(loss_csv(&a.losses).lines().count(), 7);
        let b = train(&ds, &cfg, &TrainOutput::default(), |_| ()).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn every_ablation_trains() {
        let ds = synth_scene(0, 3, 16, 2).unwrap();
        for ablation in ["no_gcam", "no_gcnn", "no_gfuse"] {
            let mut cfg = tiny_config();
            cfg.set("ablation", ablation).unwrap();
            cfg.epochs = 1;
            let r = train(&ds, &cfg, &TrainOutput::default(), |_| ()).unwrap();
            assert!(r.losses.iter().all(|l| l.loss.is_finite()));
        }
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let ds = synth_scene(0, 3, 16, 4).unwrap();
        assert!(train(&ds, &tiny_config(), &TrainOutput::default(), |_| ()).is_err());
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        let cfg = TrainConfig { schedule: Schedule::Cosine, ..TrainConfig::default() };
        assert_eq!(lr_at(&cfg, 0, 10), cfg.lr);
        assert!(lr_at(&cfg, 9, 10) < 0.05 * cfg.lr);
    }
}
