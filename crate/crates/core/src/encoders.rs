//! Camera codes, pose-aware texture tokens and per-level query tokens.
//!
//! A query token for HR pixel `(x, y)` at pyramid level `l` is the five-vector
//! `[x̂, ŷ, ξ₁, ξ₂, ξ₃]`: the normalized pixel center followed by three texture
//! tokens that summarize the 3×3 LR patch around the pixel at that level. The
//! texture encoder ends in `tanh`, and its output is remapped to `[0, 1]` so every
//! component of the token is a valid coordinate in the unit hypercube the hash
//! grid discretizes.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image::{extract_patch, hr_to_lr_coord, Pyramid, PATCH_LEN};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::tensor::Real;

pub const CAMERA_INPUT: usize = 12;
pub const CAMERA_CODE: usize = 16;
pub const TEXTURE_TOKENS: usize = 3;
/// Spatial axes plus texture tokens.
pub const QUERY_DIM: usize = 2 + TEXTURE_TOKENS;
const CAMERA_HIDDEN: usize = 64;
const TEXTURE_HIDDEN: usize = 128;

/// MLP over the flattened 3×4 camera-to-world matrix, `tanh`-bounded output.
#[derive(Clone, Debug)]
pub struct CameraEncoder {
    pub mlp: Mlp,
}

impl CameraEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::new(
            store,
            rng,
            "camera",
            &[CAMERA_INPUT, CAMERA_HIDDEN, CAMERA_HIDDEN, CAMERA_CODE],
            Activation::Relu,
            Some(Activation::Tanh),
        )?;
        Ok(Self { mlp })
    }

    /// One 16-dimensional code per pose, stacked as `[poses.len(), 16]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, poses: &[&CameraPose]) -> Result<Var> {
        let input: Vec<T> =
            poses.iter().flat_map(|p| p.flattened()).map(T::from_f64_lossy).collect();
        let x = tape.constant(vec![poses.len(), CAMERA_INPUT], input)?;
        self.mlp.forward(tape, x)
    }
}

/// Per-level patch encoder `G_T^l`: `[patch, camera code] → 3 tokens in [-1, 1]`.
#[derive(Clone, Debug)]
pub struct TextureEncoder {
    pub level: usize,
    pub mlp: Mlp,
}

impl TextureEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, level: usize) -> Result<Self> {
        let mlp = Mlp::new(
            store,
            rng,
            &format!("texture.l{level}"),
            &[PATCH_LEN + CAMERA_CODE, TEXTURE_HIDDEN, TEXTURE_HIDDEN, TEXTURE_TOKENS],
            Activation::Relu,
            Some(Activation::Tanh),
        )?;
        Ok(Self { level, mlp })
    }

    /// `patches: [B, 27]`, `cam: [B, 16]` → `[B, 3]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, patches: Var, cam: Var) -> Result<Var> {
        let x = tape.concat(&[patches, cam])?;
        self.mlp.forward(tape, x)
    }
}

/// Normalized HR pixel center.
pub fn pixel_coords(x_hr: usize, y_hr: usize, width: usize, height: usize) -> [f64; 2] {
    [(x_hr as f64 + 0.5) / width as f64, (y_hr as f64 + 0.5) / height as f64]
}

/// The 3×3 LR patch a level-`level` token is computed from.
pub fn level_patch(pyramid: &Pyramid, x_hr: usize, y_hr: usize, level: usize, scale: usize) -> [f32; PATCH_LEN] {
    let rx = hr_to_lr_coord(x_hr, level, scale);
    let ry = hr_to_lr_coord(y_hr, level, scale);
    extract_patch(pyramid.level(level), rx, ry)
}

/// Assembles `[coords, (tokens + 1) / 2]` for a batch: `coords: [B, 2]`, `tokens: [B, 3]`.
pub fn assemble_query<T: Real>(tape: &mut Tape<'_, T>, coords: Var, tokens: Var) -> Result<Var> {
    let n = tape.value(tokens).len();
    let half = T::from_f64_lossy(0.5);
    let shift = vec![half; n];
    let unit = tape.affine(tokens, half, Some(&shift))?;
    tape.concat(&[coords, unit])
}

/// A single materialized query token.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryToken {
    pub coords: [f64; 2],
    pub tokens: [f64; TEXTURE_TOKENS],
    pub level: usize,
}

impl QueryToken {
    pub fn components(&self) -> [f64; QUERY_DIM] {
        let mut out = [0.0; QUERY_DIM];
        out[..2].copy_from_slice(&self.coords);
        out[2..].copy_from_slice(&self.tokens);
        out
    }
}

pub(crate) fn check_pixel(x: usize, y: usize, w: usize, h: usize) -> Result<()> {
    if x >= w || y >= h {
        return Err(Error::Contract(format!("pixel ({x}, {y}) outside the {w}x{h} HR grid")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coords_closed_forms() {
        assert_eq!(pixel_coords(0, 0, 64, 64), [0.0078125, 0.0078125]);
        assert_eq!(pixel_coords(31, 31, 64, 64), [0.4921875, 0.4921875]);
    }

    #[test]
    fn camera_code_is_bounded_and_zeroable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = CameraEncoder::new(&mut store, &mut rng).unwrap();
        let poses: Vec<CameraPose> = (0..5)
            .map(|i| CameraPose::look_at([i as f64, 1.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.7).unwrap())
            .collect();
        let refs: Vec<&CameraPose> = poses.iter().collect();
        let mut tape = Tape::new(&store);
        let code = enc.embed(&mut tape, &refs).unwrap();
        assert_eq!(tape.value(code).shape(), &[5, CAMERA_CODE]);
        assert!(tape.value(code).values().iter().all(|v| (-1.0..=1.0).contains(v)));

        enc.mlp.zero_output_layer(&mut store);
        let mut tape = Tape::new(&store);
        let code = enc.embed(&mut tape, &refs).unwrap();
        assert!(tape.value(code).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn texture_tokens_pure_bounded_and_sensitive() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextureEncoder::new(&mut store, &mut rng, 1).unwrap();
        let mut patch: Vec<f32> = (0..PATCH_LEN).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let cam: Vec<f32> = (0..CAMERA_CODE).map(|i| (i as f32 * 0.11).cos() * 0.5).collect();

        let run = |patch: &[f32]| {
            let mut tape = Tape::new(&store);
            let p = tape.constant(vec![1, PATCH_LEN], patch.to_vec()).unwrap();
            let c = tape.constant(vec![1, CAMERA_CODE], cam.clone()).unwrap();
            let t = enc.encode(&mut tape, p, c).unwrap();
            tape.value(t).values().to_vec()
        };
        let a = run(&patch);
        assert_eq!(a.len(), TEXTURE_TOKENS);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, run(&patch));
        patch[13] += 0.5;
        assert_ne!(a, run(&patch));
    }

    #[test]
    fn assembled_query_is_in_unit_cube() {
        let store = ParamStore::<f32>::new();
        let mut tape = Tape::new(&store);
        let coords = tape.constant(vec![2, 2], vec![0.1, 0.9, 0.5, 0.5]).unwrap();
        let toks = tape.constant(vec![2, 3], vec![-1.0, 0.0, 1.0, 0.5, -0.5, 0.25]).unwrap();
        let q = assemble_query(&mut tape, coords, toks).unwrap();
        assert_eq!(tape.value(q).values(), &[0.1, 0.9, 0.0, 0.5, 1.0, 0.5, 0.5, 0.75, 0.25, 0.625]);
    }

    #[test]
    fn level_patch_follows_pyramid() {
        let img = Image::from_fn(8, 8, |x, y| [x as f32 / 8.0, y as f32 / 8.0, 0.0]);
        let pyr = Pyramid::build(&img, 2).unwrap();
        // HR pixel (5, 3) at scale 2, level 1 → LR (2.25, 1.25) → center (2, 1)
        let p = level_patch(&pyr, 5, 3, 1, 2);
        assert_eq!(&p[12..15], &img.pixel(2, 1));
    }

    #[test]
    fn pixel_bounds() {
        assert!(check_pixel(63, 63, 64, 64).is_ok());
        assert!(check_pixel(64, 0, 64, 64).is_err());
    }
}
