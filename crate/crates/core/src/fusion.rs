//! Camera fusion, global LR context, context fusion and the color head.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::encoders::CAMERA_CODE;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Mlp;
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Width of the intermediate, global and fused features.
pub const FEATURE_WIDTH: usize = 32;
const FUSION_HIDDEN: usize = 64;
const CNN_CHANNELS: [usize; 4] = [3, 64, 64, FEATURE_WIDTH];

/// Maps hash features (plus, normally, the camera code) to `f_inter`.
#[derive(Clone, Debug)]
pub enum CamFuse {
    /// `[v, cam] → 64 → 64 → 64 → 64 → 32`, tanh hidden.
    WithCamera(Mlp),
    /// `v → 64 → 32`, the camera is ignored.
    CameraFree(Mlp),
}

impl CamFuse {
    pub fn with_camera<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, hash_width: usize) -> Result<Self> {
        let h = FUSION_HIDDEN;
        let widths = [hash_width + CAMERA_CODE, h, h, h, h, FEATURE_WIDTH];
        Ok(Self::WithCamera(Mlp::new(store, rng, "gcam", &widths, Activation::Tanh, None)?))
    }

    pub fn camera_free<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, hash_width: usize) -> Result<Self> {
        let widths = [hash_width, FUSION_HIDDEN, FEATURE_WIDTH];
        Ok(Self::CameraFree(Mlp::new(store, rng, "gcam_free", &widths, Activation::Tanh, None)?))
    }

    pub fn mlp(&self) -> &Mlp {
        match self {
            Self::WithCamera(m) | Self::CameraFree(m) => m,
        }
    }

    /// `v: [B, L·F_h]`, `cam: [B, 16]` → `[B, 32]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, v: Var, cam: Var) -> Result<Var> {
        match self {
            Self::WithCamera(m) => {
                let x = tape.concat(&[v, cam])?;
                m.forward(tape, x)
            }
            Self::CameraFree(m) => m.forward(tape, v),
        }
    }
}

/// Three 3×3 convolutions with ReLU, then a spatial mean: one 32-vector per LR image.
#[derive(Clone, Debug)]
pub struct GlobalCnn {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl GlobalCnn {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R) -> Result<Self> {
        let layers = CNN_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let kernel = store.add(format!("cnn.{i}.kernel"), he_uniform(rng, vec![c[1], c[0], 3, 3], c[0] * 9))?;
                let bias = store.add(format!("cnn.{i}.bias"), Tensor::zeros(vec![c[1]]))?;
                Ok((kernel, bias))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Global feature `[32]` of a single image.
    pub fn forward_image<T: Real>(&self, tape: &mut Tape<'_, T>, img: &Image) -> Result<Var> {
        if img.width() < 3 || img.height() < 3 {
            return Err(Error::Dimension(format!(
                "global encoder needs an image of at least 3x3, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let planar = img.to_planar().into_iter().map(|v| T::from_f32(v).unwrap()).collect();
        let mut h = tape.constant(vec![3, img.height(), img.width()], planar)?;
        for &(k, b) in &self.layers {
            let (kv, bv) = (tape.param(k), tape.param(b));
            let c = tape.conv2d(h, kv, bv)?;
            h = tape.relu(c);
        }
        tape.adaptive_avg_pool(h)
    }

    /// Stacked global features `[images.len(), 32]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<Var> {
        let rows = images.iter().map(|img| self.forward_image(tape, img)).collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }
}

/// `[f_inter, f_lr] → 64 ×4 → 32`, tanh hidden.
pub fn context_fuse_net<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R) -> Result<Mlp> {
    let h = FUSION_HIDDEN;
    let widths = [2 * FEATURE_WIDTH, h, h, h, h, FEATURE_WIDTH];
    Mlp::new(store, rng, "gfuse", &widths, Activation::Tanh, None)
}

/// `32 → 64 → 3`, ReLU hidden, sigmoid output.
pub fn color_decoder<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R) -> Result<Mlp> {
    Mlp::new(store, rng, "decoder", &[FEATURE_WIDTH, FUSION_HIDDEN, 3], Activation::Relu, Some(Activation::Sigmoid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn parameter_counts() {
        let mut s = ParamStore::new();
        let mut r = rng();
        assert_eq!(CamFuse::with_camera(&mut s, &mut r, 16).unwrap().mlp().num_params(), 16672);
        assert_eq!(CamFuse::camera_free(&mut s, &mut r, 16).unwrap().mlp().num_params(), 3168);
        assert_eq!(context_fuse_net(&mut s, &mut r).unwrap().num_params(), 18720);
        assert_eq!(color_decoder(&mut s, &mut r).unwrap().num_params(), 2307);
        let before = s.num_scalars();
        GlobalCnn::new(&mut s, &mut r).unwrap();
        assert_eq!(s.num_scalars() - before, 57184);
    }

    #[test]
    fn cam_fuse_shapes_zeroing_and_camera_sensitivity() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let net = CamFuse::with_camera(&mut s, &mut r, 16).unwrap();
        let run = |s: &ParamStore<f32>, cam: f32| {
            let mut tape = Tape::new(s);
            let v = tape.constant(vec![1, 16], (0..16).map(|i| i as f32 * 0.03).collect()).unwrap();
            let c = tape.constant(vec![1, 16], vec![cam; 16]).unwrap();
            let y = net.forward(&mut tape, v, c).unwrap();
            tape.value(y).values().to_vec()
        };
        let a = run(&s, 0.2);
        assert_eq!(a.len(), FEATURE_WIDTH);
        let b = run(&s, -0.4);
        let l2: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(l2 > 0.0);
        net.mlp().zero_output_layer(&mut s);
        assert!(run(&s, 0.2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_zero_kernels_and_flip_invariance() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let cnn = GlobalCnn::new(&mut s, &mut r).unwrap();
        let img = Image::from_fn(8, 6, |x, y| [x as f32 / 8.0, y as f32 / 6.0, 0.3]);
        let run = |s: &ParamStore<f32>, img: &Image| {
            let mut tape = Tape::new(s);
            let f = cnn.forward(&mut tape, &[img]).unwrap();
            assert_eq!(tape.value(f).shape(), &[1, FEATURE_WIDTH]);
            tape.value(f).values().to_vec()
        };
        // horizontally symmetric kernels commute with a horizontal flip
        for &(k, _) in &cnn.layers {
            let t = s.get_mut(k);
            for tap in t.values_mut().chunks_mut(9) {
                for row in tap.chunks_mut(3) {
                    row[2] = row[0];
                }
            }
        }
        let a = run(&s, &img);
        let b = run(&s, &img.flip_horizontal());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        for &(k, _) in &cnn.layers {
            s.get_mut(k).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(run(&s, &Image::filled(5, 5, [0.5; 3])).iter().all(|&v| v == 0.0));
        let mut tape = Tape::new(&s);
        assert!(cnn.forward(&mut tape, &[&Image::filled(2, 5, [0.5; 3])]).is_err());
    }

    #[test]
    fn decoder_is_bounded_and_centered_when_zeroed() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let dec = color_decoder(&mut s, &mut r).unwrap();
        let mut tape = Tape::new(&s);
        let x = tape.constant(vec![4, 32], (0..128).map(|i| (i as f32 - 64.0) * 0.5).collect()).unwrap();
        let y = dec.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).values().iter().all(|v| (0.0..=1.0).contains(v)));
        dec.zero_output_layer(&mut s);
        let mut tape = Tape::new(&s);
        let x = tape.constant(vec![1, 32], vec![3.0; 32]).unwrap();
        let y = dec.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5, 0.5]);
    }
}
