//! Command implementations behind the `ngpsr` binary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ngpsr::checkpoint::Checkpoint;
use ngpsr::config::TrainConfig;
use ngpsr::dataset::{load_scene_with_levels, save_scene, SceneDataset, Split};
use ngpsr::error::Error;
use ngpsr::evaluate::{ablation_csv, eval_csv, evaluate_model, evaluate_renders, mean_score, render_file_name, AblationRow};
use ngpsr::gradcheck::run_gradcheck;
use ngpsr::model::{Ablation, Model};
use ngpsr::synth::synth_scene;
use ngpsr::trainer::{train, write_loss_csv, TrainOutput, TrainResult};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_NON_FINITE: u8 = 2;
pub const EXIT_GRADCHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "ngpsr", version, about = "Camera-conditioned hash-grid super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural scene in the NeRF-Blender layout.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        hr_size: usize,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a scene and write a checkpoint and loss log.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to the checkpoint path with a `.loss.csv` extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Render every view of a split at HR.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Expected scale; must agree with the checkpoint when given.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score renders against HR ground truth.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        /// CSV output; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the full model and the three ablations with shared seeds.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference self-test of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set ablation=...`.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Single-threaded, reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(a) = &self.ablation {
            cfg.set("ablation", a)?;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Marker for a gradient check that ran but did not pass.
#[derive(Debug)]
pub struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

/// Exit status for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<GradcheckFailed>() {
        return EXIT_GRADCHECK;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_)) => EXIT_NON_FINITE,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, views, hr_size, scale, out } => cmd_synth(seed, views, hr_size, scale, &out),
        Command::Train { scene, config, out, loss_csv } => {
            let cfg = config.resolve()?;
            let loss_csv = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            cmd_train(&scene, &cfg, &out, &loss_csv)
        }
        Command::Render { checkpoint, scene, split, scale, out } => cmd_render(&checkpoint, &scene, &split, scale, &out),
        Command::Eval { renders, scene, split, scale, out } => cmd_eval(&renders, &scene, &split, scale, out.as_deref()),
        Command::Ablate { scene, config, out } => {
            let cfg = config.resolve()?;
            cmd_ablate(&scene, &cfg, out.as_deref())
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

pub fn cmd_synth(seed: u64, views: usize, hr_size: usize, scale: usize, out: &Path) -> Result<()> {
    let ds = synth_scene(seed, views, hr_size, scale)?;
    save_scene(&ds, out)?;
    println!("wrote {} views ({}x{} HR, x{}) to {}", ds.len(), hr_size, hr_size, scale, out.display());
    Ok(())
}

fn load(scene: &Path, cfg: &TrainConfig) -> Result<SceneDataset> {
    load_scene_with_levels(scene, cfg.scale, cfg.model.levels).with_context(|| format!("loading scene {}", scene.display()))
}

fn train_logged(ds: &SceneDataset, cfg: &TrainConfig, out: Option<&Path>, label: &str) -> Result<TrainResult> {
    let (model, store) = Model::new(cfg.model.clone(), cfg.seed)?;
    model.audit(&store)?;
    println!("[{label}] parameters: {}", store.num_scalars());
    let start = Instant::now();
    let output = TrainOutput { checkpoint: out.map(Path::to_path_buf) };
    let result = train(ds, cfg, &output, |row| {
        if row.step % 100 == 0 {
            println!("[{label}] step {} epoch {} loss {:.6}", row.step, row.epoch, row.loss);
            let _ = std::io::stdout().flush();
        }
    })?;
    let secs = start.elapsed().as_secs_f64();
    let steps = result.losses.len();
    let last = result.losses.last().map_or(f32::NAN, |r| r.loss);
    println!("[{label}] {steps} steps in {secs:.1}s ({:.2} steps/s), final loss {last:.6}", steps as f64 / secs);
    Ok(result)
}

pub fn cmd_train(scene: &Path, cfg: &TrainConfig, out: &Path, loss_csv: &Path) -> Result<()> {
    let ds = load(scene, cfg)?;
    let result = train_logged(&ds, cfg, Some(out), cfg.model.ablation.as_str())?;
    write_loss_csv(loss_csv, &result.losses)?;
    println!("checkpoint: {}\nloss log: {}", out.display(), loss_csv.display());
    Ok(())
}

pub fn cmd_render(checkpoint: &Path, scene: &Path, split: &str, scale: Option<usize>, out: &Path) -> Result<()> {
    let split = Split::parse(split)?;
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(s) = scale {
        if s != ck.config.scale {
            bail!(
                "checkpoint {} was trained at scale {}, scene {} requested at scale {s}",
                checkpoint.display(),
                ck.config.scale,
                scene.display()
            );
        }
    }
    let ds = load(scene, &ck.config)
        .with_context(|| format!("scene {} at checkpoint scale {}", scene.display(), ck.config.scale))?;
    let (model, store) = ck.restore()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for v in ds.indices(split) {
        let img = model.render_view(&store, &ds, v)?;
        let path = out.join(render_file_name(&ds.view(v).name));
        img.save_png(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn cmd_eval(renders: &Path, scene: &Path, split: &str, scale: usize, out: Option<&Path>) -> Result<()> {
    let split = Split::parse(split)?;
    let ds = ngpsr::dataset::load_scene(scene, scale)?;
    let rows = evaluate_renders(renders, &ds, split)?;
    let csv = eval_csv(&rows);
    emit(&csv, out)?;
    let m = mean_score(&rows);
    eprintln!(
        "mean over {} views: PSNR {:.2} dB (bicubic {:.2}), SSIM {:.4} (bicubic {:.4})",
        rows.len(),
        m.psnr,
        m.bicubic_psnr,
        m.ssim,
        m.bicubic_ssim
    );
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Trains one variant per ablation on the same seed and step budget.
pub fn ablation_rows(ds: &SceneDataset, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&variant| {
            let mut c = cfg.clone();
            c.model.ablation = variant;
            let r = train_logged(ds, &c, None, variant.as_str())?;
            let (model, store) = (&r.model, &r.checkpoint.params);
            let train = mean_score(&evaluate_model(model, store, ds, Split::Train)?);
            let test = mean_score(&evaluate_model(model, store, ds, Split::Test)?);
            Ok(AblationRow { variant, train, test, params: store.num_scalars(), seed: c.seed, steps: r.losses.len() })
        })
        .collect()
}

pub fn cmd_ablate(scene: &Path, cfg: &TrainConfig, out: Option<&Path>) -> Result<()> {
    let ds = load(scene, cfg)?;
    let rows = ablation_rows(&ds, cfg)?;
    emit(&ablation_csv(&rows), out)
}

pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = run_gradcheck(seed)?;
    for op in &report.ops {
        println!(
            "{:<6} {:<20} worst relative error {:.3e} over {} elements (tolerance {:.0e})",
            if op.passed() { "ok" } else { "FAIL" },
            op.name,
            op.worst,
            op.checked,
            op.tolerance
        );
    }
    for s in &report.samples {
        println!(
            "{:<6} {:<24} [{}] analytic {:+.6e} numeric {:+.6e} relative error {:.3e}",
            if s.error < report.end_to_end.tolerance { "ok" } else { "FAIL" },
            s.tensor,
            s.index,
            s.analytic,
            s.numeric,
            s.error
        );
    }
    let e = &report.end_to_end;
    println!(
        "end-to-end: {} tensors sampled, worst relative error {:.3e} (tolerance {:.0e})",
        e.checked, e.worst, e.tolerance
    );
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(GradcheckFailed.into())
    }
}
