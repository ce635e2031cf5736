//! Procedural desk-scale scenes: a textured ground plane seen from a ring of cameras.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraPose;
use crate::dataset::{SceneDataset, Split, ViewRecord, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::image::Image;

/// Field of view shared by every synthetic camera (the Blender lego value).
pub const SYNTH_FOV_X: f64 = 0.6911;
const RING_RADIUS: f64 = 0.5;
const RING_HEIGHT: f64 = 2.0;
const SUPERSAMPLE: usize = 3;
const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

/// Texture parameters drawn from the seed.
#[derive(Clone, Debug)]
struct PlaneTexture {
    checker_period: f64,
    checker_angle: f64,
    colors: [[f64; 3]; 2],
    stripe_freq: [f64; 2],
    stripe_phase: f64,
    stripe_tint: [f64; 3],
    blob_center: [f64; 2],
}

impl PlaneTexture {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut color = || [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let colors = [color(), color()];
        let angle = rng.gen_range(0.0..TAU);
        let freq = rng.gen_range(4.0..6.0);
        Self {
            checker_period: rng.gen_range(0.25..0.35),
            checker_angle: rng.gen_range(0.0..TAU),
            colors,
            stripe_freq: [freq * angle.cos(), freq * angle.sin()],
            stripe_phase: rng.gen_range(0.0..TAU),
            stripe_tint: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
            blob_center: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
        }
    }

    /// Albedo at world point `(u, v)` on the `z = 0` plane.
    fn albedo(&self, u: f64, v: f64) -> [f64; 3] {
        let (s, c) = self.checker_angle.sin_cos();
        let (ru, rv) = (c * u - s * v, s * u + c * v);
        let cu = (ru / self.checker_period).floor() as i64;
        let cv = (rv / self.checker_period).floor() as i64;
        let base = self.colors[((cu + cv).rem_euclid(2)) as usize];
        let stripe = (TAU * (self.stripe_freq[0] * u + self.stripe_freq[1] * v) + self.stripe_phase).sin();
        let d2 = (u - self.blob_center[0]).powi(2) + (v - self.blob_center[1]).powi(2);
        let blob = 0.25 * (-d2 / 0.05).exp();
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (base[i] + stripe * self.stripe_tint[i] + blob).clamp(0.0, 1.0);
        }
        out
    }
}

/// Camera `i` of `n` on a horizontal ring above the plane, looking at the origin.
pub fn ring_pose(i: usize, n: usize, phase: f64) -> Result<CameraPose> {
    let theta = phase + TAU * i as f64 / n as f64;
    let eye = [RING_RADIUS * theta.cos(), RING_RADIUS * theta.sin(), RING_HEIGHT];
    CameraPose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], SYNTH_FOV_X)
}

fn render(tex: &PlaneTexture, pose: &CameraPose, size: usize) -> Image {
    let eye = pose.position();
    let inv = 1.0 / SUPERSAMPLE as f64;
    Image::from_fn(size, size, |x, y| {
        let mut acc = [0.0; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) * inv;
                let py = y as f64 + (sy as f64 + 0.5) * inv;
                let d = pose.ray_direction(px, py, size, size);
                let c = if d[2] < -1e-9 {
                    let t = -eye[2] / d[2];
                    tex.albedo(eye[0] + t * d[0], eye[1] + t * d[1])
                } else {
                    BACKGROUND
                };
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        [(acc[0] / n) as f32, (acc[1] / n) as f32, (acc[2] / n) as f32]
    })
    .quantized()
}

/// Deterministic synthetic scene. The last view is held out as the test split;
/// HR renders are quantized to 8-bit so the scene survives a PNG round trip unchanged.
pub fn synth_scene(seed: u64, n_views: usize, hr_size: usize, scale: usize) -> Result<SceneDataset> {
    if scale == 0 || hr_size == 0 || hr_size % scale != 0 {
        return Err(Error::Config(format!("hr_size {hr_size} must be a positive multiple of scale {scale}")));
    }
    if n_views < 2 {
        return Err(Error::Config(format!("need at least 2 views (one is held out), got {n_views}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = PlaneTexture::sample(&mut rng);
    let phase = rng.gen_range(0.0..TAU);
    let mut views = Vec::with_capacity(n_views);
    let mut splits = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let pose = ring_pose(i, n_views, phase)?;
        let hr = render(&tex, &pose, hr_size);
        let split = if i + 1 == n_views { Split::Test } else { Split::Train };
        let name = format!("{}/r_{i}", split.as_str());
        views.push(ViewRecord::from_hr(pose, hr, scale, name)?);
        splits.push(split);
    }
    SceneDataset::new(views, splits, DEFAULT_LEVELS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synth_scene(0, 8, 64, 2).unwrap();
        let b = synth_scene(0, 8, 64, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for v in a.views() {
            assert_eq!((v.lr.width(), v.lr.height()), (32, 32));
            let hr = v.hr.as_ref().unwrap();
            assert_eq!((hr.width(), hr.height()), (64, 64));
            assert!(hr.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(a.indices(Split::Test), vec![7]);
        assert_ne!(a, synth_scene(1, 8, 64, 2).unwrap());
    }

    #[test]
    fn adjacent_views_differ() {
        let ds = synth_scene(0, 8, 64, 2).unwrap();
        let a = ds.view(0).hr.as_ref().unwrap();
        let b = ds.view(1).hr.as_ref().unwrap();
        let mad: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.data().len() as f32;
        assert!(mad > 0.01, "mean abs difference {mad}");
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(synth_scene(0, 4, 63, 2).is_err());
        assert!(synth_scene(0, 1, 64, 2).is_err());
    }
}
