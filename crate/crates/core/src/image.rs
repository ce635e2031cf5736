//! RGB float images, Catmull-Rom resampling, LR pyramids and patch extraction.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Pixel lookup with coordinates clamped to the image.
    pub fn pixel_clamped(&self, x: isize, y: isize) -> [f32; 3] {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.pixel(cx, cy)
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Channel-planar copy `[3, H, W]`, the layout the CNN consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    /// Values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Image { width: self.width, height: self.height, data }
    }

    fn pad_to_multiple(&self, factor: usize) -> Image {
        let w = self.width.div_ceil(factor) * factor;
        let h = self.height.div_ceil(factor) * factor;
        if w == self.width && h == self.height {
            return self.clone();
        }
        Image::from_fn(w, h, |x, y| self.pixel_clamped(x as isize, y as isize))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::format(path, format!("cannot decode image: {e}")))?;
        let rgba = img.to_rgba8();
        let (w, h) = rgba.dimensions();
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for px in rgba.pixels() {
            let a = px[3] as f32 / 255.0;
            for c in 0..3 {
                // composite over white
                let v = px[c] as f32 / 255.0;
                data.push(if px[3] == 255 { v } else { v * a + (1.0 - a) });
            }
        }
        Image::new(w as usize, h as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized from dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, format!("cannot write PNG: {e}")))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output sample: `(source index, weight)` taps, normalized to sum to one.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - 2.0).floor() as isize;
            let hi = (center + 2.0).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic_kernel(j as f64 + 0.5 - center);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

/// Separable bicubic resize with edge replication; output clamped to `[0, 1]`.
///
/// The kernel is evaluated at unit spacing in the source grid for both
/// magnification and minification, so downsampling is plain interpolation at
/// the target pixel centers.
pub fn resize_bicubic(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension(format!("cannot resize to {out_w}x{out_h}")));
    }
    let (w, h) = (img.width, img.height);
    let xt = axis_taps(w, out_w);
    let yt = axis_taps(h, out_h);
    // horizontal pass at f64
    let mut tmp = vec![0.0f64; out_w * h * 3];
    for y in 0..h {
        for (ox, taps) in xt.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(sx, wt) in taps {
                let p = img.pixel(sx, y);
                for c in 0..3 {
                    acc[c] += wt * p[c] as f64;
                }
            }
            tmp[(y * out_w + ox) * 3..(y * out_w + ox) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut data = vec![0.0f32; out_w * out_h * 3];
    for (oy, taps) in yt.iter().enumerate() {
        for ox in 0..out_w {
            let mut acc = [0.0f64; 3];
            for &(sy, wt) in taps {
                let i = (sy * out_w + ox) * 3;
                for c in 0..3 {
                    acc[c] += wt * tmp[i + c];
                }
            }
            let o = (oy * out_w + ox) * 3;
            for c in 0..3 {
                data[o + c] = acc[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(out_w, out_h, data)
}

/// Shrinks by an integer factor. Extents that are not multiples of `factor`
/// are first padded by edge replication.
pub fn downsample_bicubic(img: &Image, factor: usize) -> Result<Image> {
    if factor < 1 {
        return Err(Error::Contract(format!("downsample factor must be >= 1, got {factor}")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let padded = img.pad_to_multiple(factor);
    resize_bicubic(&padded, padded.width / factor, padded.height / factor)
}

pub fn upsample_bicubic(img: &Image, factor: usize) -> Result<Image> {
    if factor < 1 {
        return Err(Error::Contract(format!("upsample factor must be >= 1, got {factor}")));
    }
    resize_bicubic(img, img.width * factor, img.height * factor)
}

/// Dyadic pyramid of an LR image. Level 1 is the image itself; each further
/// level halves both extents, rounding up, down to a 1×1 floor.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<Image>,
}

impl Pyramid {
    pub fn build(lr: &Image, levels: usize) -> Result<Pyramid> {
        if levels == 0 {
            return Err(Error::Contract("pyramid needs at least one level".into()));
        }
        let mut out = vec![lr.clone()];
        while out.len() < levels {
            let prev = out.last().unwrap();
            out.push(downsample_bicubic(prev, 2)?);
        }
        Ok(Pyramid { levels: out })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// One-based level access.
    pub fn level(&self, l: usize) -> &Image {
        &self.levels[l - 1]
    }
}

/// Continuous coordinate of an HR pixel center in the frame of pyramid level
/// `level` (one-based), using the align-centers convention.
pub fn hr_to_lr_coord(x_hr: usize, level: usize, scale: usize) -> f64 {
    let factor = (scale << (level - 1)) as f64;
    (x_hr as f64 + 0.5) / factor - 0.5
}

pub const PATCH_LEN: usize = 27;

/// 3×3 RGB neighborhood around the rounded center with clamp-to-edge reads,
/// flattened in `(dy, dx, channel)` order.
pub fn extract_patch(img: &Image, rx: f64, ry: f64) -> [f32; PATCH_LEN] {
    // saturating float->int casts keep far-away centers in range
    let cx = rx.round() as isize;
    let cy = ry.round() as isize;
    let mut out = [0.0f32; PATCH_LEN];
    let mut i = 0;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let p = img.pixel_clamped(cx.saturating_add(dx), cy.saturating_add(dy));
            out[i..i + 3].copy_from_slice(&p);
            i += 3;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn kernel_partition_of_unity() {
        for &t in &[0.0, 0.1, 0.37, 0.5, 0.9] {
            let s: f64 = (-3..=3).map(|k| cubic_kernel(k as f64 - t)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(8, 6, [0.3, 0.6, 0.9]);
        let d = downsample_bicubic(&img, 2).unwrap();
        assert_eq!((d.width(), d.height()), (4, 3));
        for v in d.data().chunks(3) {
            assert!((v[0] - 0.3).abs() < 1e-6 && (v[1] - 0.6).abs() < 1e-6 && (v[2] - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn single_impulse_stays_local_and_bounded() {
        let img = Image::from_fn(4, 4, |x, y| if (x, y) == (1, 1) { [1.0; 3] } else { [0.0; 3] });
        let d = downsample_bicubic(&img, 2).unwrap();
        assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // the impulse sits under output pixel (0, 0)
        assert!(d.pixel(0, 0)[0] > 0.0);
        let total: f32 = d.data().iter().step_by(3).sum();
        assert!(total > 0.0 && total <= 1.0);
    }

    #[test]
    fn up_then_down_round_trip() {
        let img = random_image(7, 8, 8);
        let back = downsample_bicubic(&upsample_bicubic(&img, 2).unwrap(), 2).unwrap();
        let mae: f32 =
            img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.data().len() as f32;
        assert!(mae < 0.05, "mae {mae}");
    }

    #[test]
    fn non_divisible_extent_is_padded() {
        let img = random_image(3, 5, 7);
        let d = downsample_bicubic(&img, 2).unwrap();
        assert_eq!((d.width(), d.height()), (3, 4));
        assert!(downsample_bicubic(&img, 0).is_err());
    }

    #[test]
    fn pyramid_halving_chain() {
        let img = random_image(1, 12, 5);
        let p = Pyramid::build(&img, 5).unwrap();
        let dims: Vec<_> = (1..=5).map(|l| (p.level(l).width(), p.level(l).height())).collect();
        assert_eq!(dims, vec![(12, 5), (6, 3), (3, 2), (2, 1), (1, 1)]);
        assert_eq!(p.level(1), &img);
        assert_eq!(p, Pyramid::build(&img, 5).unwrap());
    }

    #[test]
    fn coordinate_mapping_closed_forms() {
        assert_eq!(hr_to_lr_coord(0, 1, 2), -0.25);
        assert_eq!(hr_to_lr_coord(1, 1, 2), 0.25);
        assert_eq!(hr_to_lr_coord(7, 2, 2), 1.375);
    }

    #[test]
    fn patch_cases() {
        let c = Image::filled(5, 5, [0.4; 3]);
        assert!(extract_patch(&c, 2.0, 2.0).iter().all(|&v| v == 0.4));

        let img = random_image(2, 3, 3);
        let whole = extract_patch(&img, 1.0, 1.0);
        assert_eq!(&whole[..], img.data());

        let corner = extract_patch(&img, -0.25, -0.25);
        // row dy=-1 replicates row 0, column dx=-1 replicates column 0
        assert_eq!(&corner[0..3], &img.pixel(0, 0));
        assert_eq!(&corner[3..6], &img.pixel(0, 0));
        assert_eq!(&corner[6..9], &img.pixel(1, 0));
        assert_eq!(&corner[12..15], &img.pixel(0, 0));
        assert_eq!(&corner[24..27], &img.pixel(1, 1));
    }

    #[test]
    fn planar_layout() {
        let img = Image::from_fn(2, 1, |x, _| [x as f32, 10.0 + x as f32, 20.0 + x as f32]);
        assert_eq!(img.to_planar(), vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = random_image(4, 6, 5).quantized();
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }

    proptest::proptest! {
        #[test]
        fn patch_never_reads_out_of_bounds(rx in -1e6f64..1e6, ry in -1e6f64..1e6) {
            let img = random_image(9, 4, 3);
            let p = extract_patch(&img, rx, ry);
            proptest::prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
