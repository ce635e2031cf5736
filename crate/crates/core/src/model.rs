//! The full per-pixel pipeline and its batched, chunked training path.
//!
//! Per-view quantities (camera code, global LR feature) are computed once on a
//! "view tape". Pixels are then processed in fixed-size chunks, each on its own
//! tape that sees the view quantities as leaf variables. Chunk gradients are
//! merged in chunk order and the accumulated view-level gradients are pushed
//! back through the view tape, so the result does not depend on how many worker
//! threads ran the chunks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::dataset::SceneDataset;
use crate::encoders::{assemble_query, check_pixel, level_patch, pixel_coords, CameraEncoder, TextureEncoder};
use crate::error::{Error, Result};
use crate::fusion::{color_decoder, context_fuse_net, CamFuse, GlobalCnn, FEATURE_WIDTH};
use crate::hashfield::HashField;
use crate::image::{Image, PATCH_LEN};
use crate::nn::Mlp;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Real;

/// Pixels per chunk tape.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    #[default]
    Full,
    NoGcam,
    NoGcnn,
    NoGfuse,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoGcam, Ablation::NoGcnn, Ablation::NoGfuse];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "none",
            Self::NoGcam => "no_gcam",
            Self::NoGcnn => "no_gcnn",
            Self::NoGfuse => "no_gfuse",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Self::Full),
            "no_gcam" => Ok(Self::NoGcam),
            "no_gcnn" => Ok(Self::NoGcnn),
            "no_gfuse" => Ok(Self::NoGfuse),
            _ => Err(Error::Config(format!(
                "unknown ablation '{s}' (expected none, no_gcam, no_gcnn or no_gfuse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub n_base: u32,
    pub table_size: usize,
    pub features: usize,
    pub raw_weights: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { levels: 4, n_base: 8, table_size: 1 << 16, features: 4, raw_weights: false, ablation: Ablation::Full }
    }
}

/// One HR pixel of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

/// Parameter-independent inputs of a set of pixels: normalized coordinates,
/// per-level LR patches and the row of each pixel's view in the view tensors.
#[derive(Clone, Debug)]
pub struct PixelInputs {
    pub coords: Vec<f64>,
    pub patches: Vec<Vec<f32>>,
    pub slots: Vec<usize>,
}

impl PixelInputs {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Camera codes `[V, 16]` and global features `[V, 32]` (absent without the CNN).
#[derive(Clone, Copy, Debug)]
pub struct ViewContext {
    pub cam: Var,
    pub global: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub camera: CameraEncoder,
    pub textures: Vec<TextureEncoder>,
    pub field: HashField,
    pub cam_fuse: CamFuse,
    pub cnn: Option<GlobalCnn>,
    pub fuse: Option<Mlp>,
    pub decoder: Mlp,
}

/// Each component draws from its own stream so variants share identical
/// initial values for the parts they have in common.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let s = &mut store;
        let camera = CameraEncoder::new(s, &mut stream(seed, 1))?;
        let textures = (1..=config.levels)
            .map(|l| TextureEncoder::new(s, &mut stream(seed, 10 + l as u64), l))
            .collect::<Result<Vec<_>>>()?;
        let field = HashField::new(
            s,
            &mut stream(seed, 2),
            config.levels,
            config.n_base,
            config.table_size,
            config.features,
            config.raw_weights,
        )?;
        let hash_width = field.output_width();
        let cam_fuse = match config.ablation {
            Ablation::NoGcam => CamFuse::camera_free(s, &mut stream(seed, 3), hash_width)?,
            _ => CamFuse::with_camera(s, &mut stream(seed, 3), hash_width)?,
        };
        let cnn = match config.ablation {
            Ablation::NoGcnn | Ablation::NoGfuse => None,
            _ => Some(GlobalCnn::new(s, &mut stream(seed, 4))?),
        };
        let fuse = match config.ablation {
            Ablation::NoGfuse => None,
            _ => Some(context_fuse_net(s, &mut stream(seed, 5))?),
        };
        let decoder = color_decoder(s, &mut stream(seed, 6))?;
        let model = Self { config, camera, textures, field, cam_fuse, cnn, fuse, decoder };
        Ok((model, store))
    }

    /// Every learnable tensor the architecture declares, in creation order.
    pub fn learnable_ids(&self) -> Vec<ParamId> {
        fn mlp(ids: &mut Vec<ParamId>, m: &Mlp) {
            for l in m.layers() {
                ids.extend([l.weight, l.bias]);
            }
        }
        let mut ids = Vec::new();
        mlp(&mut ids, &self.camera.mlp);
        for t in &self.textures {
            mlp(&mut ids, &t.mlp);
        }
        ids.push(self.field.table.param);
        mlp(&mut ids, &self.field.weights.mlp);
        mlp(&mut ids, self.cam_fuse.mlp());
        if let Some(cnn) = &self.cnn {
            for &(k, b) in &cnn.layers {
                ids.extend([k, b]);
            }
        }
        if let Some(f) = &self.fuse {
            mlp(&mut ids, f);
        }
        mlp(&mut ids, &self.decoder);
        ids
    }

    /// Checks that `store` holds exactly the declared tensors and returns their names.
    pub fn audit<T: Real>(&self, store: &ParamStore<T>) -> Result<Vec<String>> {
        let mut declared: Vec<usize> = self.learnable_ids().iter().map(|id| id.index()).collect();
        declared.sort_unstable();
        let stored: Vec<usize> = store.ids().map(|id| id.index()).collect();
        if declared != stored {
            return Err(Error::Contract(format!(
                "declared learnable tensors {declared:?} differ from stored {stored:?}"
            )));
        }
        Ok(store.iter().map(|(_, name, _)| name.to_string()).collect())
    }

    /// Camera codes and global features for `views` (dataset indices) on `tape`.
    pub fn view_context<T: Real>(&self, tape: &mut Tape<'_, T>, ds: &SceneDataset, views: &[usize]) -> Result<ViewContext> {
        if let Some(&v) = views.iter().find(|&&v| v >= ds.len()) {
            return Err(Error::Contract(format!("view {v} outside a scene of {}", ds.len())));
        }
        let poses: Vec<_> = views.iter().map(|&v| &ds.view(v).pose).collect();
        let cam = self.camera.embed(tape, &poses)?;
        let global = match &self.cnn {
            Some(cnn) => {
                let imgs: Vec<&Image> = views.iter().map(|&v| &ds.view(v).lr).collect();
                Some(cnn.forward(tape, &imgs)?)
            }
            None => None,
        };
        Ok(ViewContext { cam, global })
    }

    /// Gathers the parameter-independent inputs. `slot_of` maps a dataset view index
    /// to its row in the view tensors.
    pub fn pixel_inputs(&self, ds: &SceneDataset, pixels: &[Pixel], slot_of: &BTreeMap<usize, usize>) -> Result<PixelInputs> {
        if ds.levels() < self.config.levels {
            return Err(Error::Contract(format!(
                "scene pyramid has {} levels, model needs {}",
                ds.levels(),
                self.config.levels
            )));
        }
        let scale = ds.scale();
        let mut coords = Vec::with_capacity(pixels.len() * 2);
        let mut patches = vec![Vec::with_capacity(pixels.len() * PATCH_LEN); self.config.levels];
        let mut slots = Vec::with_capacity(pixels.len());
        for p in pixels {
            if p.view >= ds.len() {
                return Err(Error::Contract(format!("view {} outside a scene of {}", p.view, ds.len())));
            }
            let (w, h) = ds.view(p.view).hr_size();
            check_pixel(p.x, p.y, w, h)?;
            coords.extend(pixel_coords(p.x, p.y, w, h));
            for (l, out) in patches.iter_mut().enumerate() {
                out.extend(level_patch(ds.pyramid(p.view), p.x, p.y, l + 1, scale));
            }
            let slot = slot_of
                .get(&p.view)
                .ok_or_else(|| Error::Contract(format!("view {} has no context row", p.view)))?;
            slots.push(*slot);
        }
        Ok(PixelInputs { coords, patches, slots })
    }

    /// RGB predictions `[B, 3]` for a batch, given view context on the same tape.
    pub fn pixel_forward<T: Real>(&self, tape: &mut Tape<'_, T>, inputs: &PixelInputs, ctx: ViewContext) -> Result<Var> {
        let b = inputs.len();
        let cam = tape.gather_rows(ctx.cam, inputs.slots.clone())?;
        let coords = tape.constant(vec![b, 2], inputs.coords.iter().map(|&c| T::from_f64_lossy(c)).collect())?;
        let mut queries = Vec::with_capacity(self.textures.len());
        for (enc, patch) in self.textures.iter().zip(&inputs.patches) {
            let p = tape.constant(vec![b, PATCH_LEN], patch.iter().map(|&v| T::from_f32(v).unwrap()).collect())?;
            let tokens = enc.encode(tape, p, cam)?;
            queries.push(assemble_query(tape, coords, tokens)?);
        }
        let v = self.field.encode_multiscale(tape, &queries, cam)?;
        let f_inter = self.cam_fuse.forward(tape, v, cam)?;
        let fused = match &self.fuse {
            Some(fuse) => {
                let g = match ctx.global {
                    Some(g) => tape.gather_rows(g, inputs.slots.clone())?,
                    None => tape.constant(vec![b, FEATURE_WIDTH], vec![T::zero(); b * FEATURE_WIDTH])?,
                };
                let x = tape.concat(&[f_inter, g])?;
                fuse.forward(tape, x)?
            }
            // the projection from f_inter to the decoder width is the identity
            None => f_inter,
        };
        self.decoder.forward(tape, fused)
    }

    /// Everything on one tape: the reference evaluation used for rendering
    /// checks and finite differences.
    pub fn forward_pixels<T: Real>(&self, store: &ParamStore<T>, ds: &SceneDataset, pixels: &[Pixel]) -> Result<Vec<T>> {
        let (views, slot_of) = distinct_views(pixels);
        let mut tape = Tape::new(store);
        let ctx = self.view_context(&mut tape, ds, &views)?;
        let inputs = self.pixel_inputs(ds, pixels, &slot_of)?;
        let rgb = self.pixel_forward(&mut tape, &inputs, ctx)?;
        Ok(tape.value(rgb).values().to_vec())
    }

    /// Mean squared error of a batch on a single tape.
    pub fn batch_loss<T: Real>(&self, store: &ParamStore<T>, ds: &SceneDataset, pixels: &[Pixel], targets: &[T]) -> Result<T> {
        let pred = self.forward_pixels(store, ds, pixels)?;
        check_targets(pixels, targets)?;
        let n = T::from_usize(targets.len()).unwrap();
        Ok(pred.iter().zip(targets).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n)
    }

    /// Mean squared error of a batch and its parameter gradients, via the
    /// view tape and `CHUNK`-pixel chunk tapes.
    pub fn loss_and_grads<T: Real + Send + Sync>(
        &self,
        store: &ParamStore<T>,
        ds: &SceneDataset,
        pixels: &[Pixel],
        targets: &[T],
    ) -> Result<(T, ParamGrads<T>)> {
        check_targets(pixels, targets)?;
        if pixels.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let (views, slot_of) = distinct_views(pixels);
        let mut view_tape = Tape::new(store);
        let ctx = self.view_context(&mut view_tape, ds, &views)?;
        let cam_vals = view_tape.value(ctx.cam).clone();
        let global_vals = ctx.global.map(|g| view_tape.value(g).clone());
        let total = T::from_usize(pixels.len()).unwrap();

        let work: Vec<_> = pixels.chunks(CHUNK).zip(targets.chunks(CHUNK * 3)).collect();
        let outs = work
            .par_iter()
            .map(|&(px, tg)| -> Result<ChunkOut<T>> {
                let inputs = self.pixel_inputs(ds, px, &slot_of)?;
                let mut tape = Tape::new(store);
                let cam = tape.variable(cam_vals.shape().to_vec(), cam_vals.values().to_vec())?;
                let global = match &global_vals {
                    Some(g) => Some(tape.variable(g.shape().to_vec(), g.values().to_vec())?),
                    None => None,
                };
                let rgb = self.pixel_forward(&mut tape, &inputs, ViewContext { cam, global })?;
                let mse = tape.mse_loss(rgb, tg)?;
                let loss = tape.scale(mse, T::from_usize(px.len()).unwrap() / total);
                let g = tape.backward(loss)?;
                Ok(ChunkOut {
                    loss: tape.value(loss).values()[0],
                    d_cam: g.wrt(cam).map(<[T]>::to_vec),
                    d_global: global.and_then(|v| g.wrt(v).map(<[T]>::to_vec)),
                    params: g.into_params(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss = T::zero();
        let mut params = ParamGrads::empty(store.len());
        let mut d_cam = vec![T::zero(); cam_vals.len()];
        let mut d_global = vec![T::zero(); global_vals.as_ref().map_or(0, |g| g.len())];
        for out in &outs {
            loss = loss + out.loss;
            params.merge(&out.params);
            add_into(&mut d_cam, out.d_cam.as_deref());
            add_into(&mut d_global, out.d_global.as_deref());
        }
        let mut seeds = vec![(ctx.cam, d_cam.as_slice())];
        if let Some(g) = ctx.global {
            seeds.push((g, d_global.as_slice()));
        }
        params.merge(view_tape.backward_from(&seeds)?.params());
        Ok((loss, params))
    }

    /// Renders every HR pixel of a view.
    pub fn render_view<T: Real + Send + Sync>(&self, store: &ParamStore<T>, ds: &SceneDataset, view: usize) -> Result<Image> {
        if view >= ds.len() {
            return Err(Error::Contract(format!("view {view} outside a scene of {}", ds.len())));
        }
        let (w, h) = ds.view(view).hr_size();
        let mut tape = Tape::new(store);
        let ctx = self.view_context(&mut tape, ds, &[view])?;
        let cam_vals = tape.value(ctx.cam).clone();
        let global_vals = ctx.global.map(|g| tape.value(g).clone());
        let slot_of = BTreeMap::from([(view, 0)]);
        let pixels: Vec<Pixel> = (0..h).flat_map(|y| (0..w).map(move |x| Pixel { view, x, y })).collect();
        let rows = pixels
            .par_chunks(CHUNK)
            .map(|px| -> Result<Vec<f32>> {
                let inputs = self.pixel_inputs(ds, px, &slot_of)?;
                let mut tape = Tape::new(store);
                let cam = tape.constant(cam_vals.shape().to_vec(), cam_vals.values().to_vec())?;
                let global = match &global_vals {
                    Some(g) => Some(tape.constant(g.shape().to_vec(), g.values().to_vec())?),
                    None => None,
                };
                let rgb = self.pixel_forward(&mut tape, &inputs, ViewContext { cam, global })?;
                Ok(tape.value(rgb).values().iter().map(|v| v.to_f64_lossy() as f32).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Image::new(w, h, rows.concat())
    }
}

struct ChunkOut<T> {
    loss: T,
    d_cam: Option<Vec<T>>,
    d_global: Option<Vec<T>>,
    params: ParamGrads<T>,
}

fn add_into<T: Real>(acc: &mut [T], g: Option<&[T]>) {
    if let Some(g) = g {
        for (a, &b) in acc.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
}

fn check_targets<T>(pixels: &[Pixel], targets: &[T]) -> Result<()> {
    if targets.len() != pixels.len() * 3 {
        return Err(Error::Dimension(format!("{} target values for {} pixels", targets.len(), pixels.len())));
    }
    Ok(())
}

/// Sorted distinct view indices and each one's row.
pub fn distinct_views(pixels: &[Pixel]) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let mut slot_of = BTreeMap::new();
    for p in pixels {
        slot_of.entry(p.view).or_insert(0);
    }
    let views: Vec<usize> = slot_of.keys().copied().collect();
    for (i, v) in views.iter().enumerate() {
        slot_of.insert(*v, i);
    }
    (views, slot_of)
}
