//! Scoring renders against HR ground truth, with a bicubic baseline.
//!
//! CSV schemas (column order and names are stable):
//!
//! * per-view scores: `view,psnr,ssim,bicubic_psnr,bicubic_ssim`, one row per
//!   view followed by a `mean` row holding the arithmetic means;
//! * ablation table: `variant,psnr,ssim,lpips,test_psnr,test_ssim,params,seed,steps`,
//!   scored on the training views, `lpips` always `n/a`.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{SceneDataset, Split, ViewRecord};
use crate::error::{Error, Result};
use crate::image::{upsample_bicubic, Image};
use crate::metrics::{psnr, ssim};
use crate::model::{Ablation, Model};
use crate::params::ParamStore;

pub const EVAL_HEADER: &str = "view,psnr,ssim,bicubic_psnr,bicubic_ssim";
pub const ABLATION_HEADER: &str = "variant,psnr,ssim,lpips,test_psnr,test_ssim,params,seed,steps";
pub const MEAN_ROW: &str = "mean";

#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

fn hr(view: &ViewRecord) -> Result<&Image> {
    view.hr.as_ref().ok_or_else(|| Error::Contract(format!("view `{}` has no HR ground truth", view.name)))
}

/// The model-independent reference: LR upsampled by the dataset's own bicubic kernel.
pub fn bicubic_baseline(view: &ViewRecord) -> Result<Image> {
    upsample_bicubic(&view.lr, view.scale)
}

pub fn score_view(render: &Image, view: &ViewRecord) -> Result<ViewScore> {
    let gt = hr(view)?;
    if !render.same_size(gt) {
        return Err(Error::Dimension(format!(
            "render of `{}` is {}x{}, ground truth is {}x{}",
            view.name,
            render.width(),
            render.height(),
            gt.width(),
            gt.height()
        )));
    }
    let base = bicubic_baseline(view)?;
    Ok(ViewScore {
        view: view.name.clone(),
        psnr: psnr(render, gt)?,
        ssim: ssim(render, gt)?,
        bicubic_psnr: psnr(&base, gt)?,
        bicubic_ssim: ssim(&base, gt)?,
    })
}

pub fn mean_score(rows: &[ViewScore]) -> ViewScore {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&ViewScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ViewScore {
        view: MEAN_ROW.into(),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
        bicubic_psnr: avg(|r| r.bicubic_psnr),
        bicubic_ssim: avg(|r| r.bicubic_ssim),
    }
}

/// Per-view rows plus the mean row.
pub fn eval_csv(rows: &[ViewScore]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows.iter().chain(std::iter::once(&mean_score(rows))) {
        writeln!(out, "{},{},{},{},{}", r.view, r.psnr, r.ssim, r.bicubic_psnr, r.bicubic_ssim).unwrap();
    }
    out
}

/// File a render of `view_name` is stored under: its last path component plus `.png`.
pub fn render_file_name(view_name: &str) -> String {
    let base = view_name.rsplit(['/', '\\']).next().unwrap_or(view_name);
    format!("{base}.png")
}

/// Renders and scores every view of `split`.
pub fn evaluate_model(model: &Model, store: &ParamStore<f32>, ds: &SceneDataset, split: Split) -> Result<Vec<ViewScore>> {
    ds.indices(split)
        .into_iter()
        .map(|v| score_view(&model.render_view(store, ds, v)?, ds.view(v)))
        .collect()
}

/// Scores PNG renders found in `dir`. Every missing file is listed in the error.
pub fn evaluate_renders(dir: &Path, ds: &SceneDataset, split: Split) -> Result<Vec<ViewScore>> {
    let idx = ds.indices(split);
    let missing: Vec<String> = idx
        .iter()
        .map(|&v| dir.join(render_file_name(&ds.view(v).name)))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!("missing renders: {}", missing.join(", "))));
    }
    idx.into_iter()
        .map(|v| {
            let img = Image::load_png(&dir.join(render_file_name(&ds.view(v).name)))?;
            score_view(&img, ds.view(v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub train: ViewScore,
    pub test: ViewScore,
    pub params: usize,
    pub seed: u64,
    pub steps: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},n/a,{},{},{},{},{}",
            r.variant, r.train.psnr, r.train.ssim, r.test.psnr, r.test.ssim, r.params, r.seed, r.steps
        )
        .unwrap();
    }
    out
}
