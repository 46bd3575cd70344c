//! Float raster images and the resampling kernels shared by the rest of the
//! pipeline.
//!
//! Samples are `f32` in `[0, 1]`, stored row-major as (row, column, channel).
//! Nothing in here normalizes sample statistics: loading divides by the
//! integer range and every other operation either moves or resamples pixels.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CharmError, Result};

/// BT.601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CharmError::EmptyImage { height, width });
        }
        if channels != 1 && channels != 3 {
            return Err(CharmError::Channels(channels));
        }
        if data.len() != height * width * channels {
            return Err(CharmError::LengthMismatch {
                left: data.len(),
                right: height * width * channels,
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CharmError::Data(format!("sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(row, col, channel)` for every sample.
    /// Values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(CharmError::Dimension(format!(
                "crop {height}x{width} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for r in top..top + height {
            let start = (r * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image {
            height,
            width,
            channels: c,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            if self.channels == 1 {
                let v = to_u8(self.get(r, c, 0));
                image::Rgb([v, v, v])
            } else {
                image::Rgb([
                    to_u8(self.get(r, c, 0)),
                    to_u8(self.get(r, c, 1)),
                    to_u8(self.get(r, c, 2)),
                ])
            }
        })
    }
}

/// Cell layout of an image: `rows x cols` square cells of `cell_px` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell_px: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn for_dims(height: usize, width: usize, cell_px: usize) -> Result<Self> {
        if cell_px == 0 {
            return Err(CharmError::Config("cell size must be at least 1".into()));
        }
        let (rows, cols) = (height / cell_px, width / cell_px);
        if rows == 0 || cols == 0 {
            return Err(CharmError::TooSmall {
                height,
                width,
                cell: cell_px,
            });
        }
        Ok(Self { cell_px, rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height_px(&self) -> usize {
        self.rows * self.cell_px
    }

    pub fn width_px(&self) -> usize {
        self.cols * self.cell_px
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub rotate_probability: f64,
    pub enabled: bool,
    /// Augment the full-size image, then apply the max-edge limit. The
    /// default order is the reverse.
    #[serde(default)]
    pub before_max_edge: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            rotate_probability: 0.5,
            enabled: true,
            before_max_edge: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("rotate_probability", self.rotate_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CharmError::Config(format!("{name} = {p} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Decodes a PNG or JPEG into a 3-channel image scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = decode(path)?.to_rgb32f();
    let (w, h) = decoded.dimensions();
    Image::new(
        h as usize,
        w as usize,
        3,
        decoded.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Decodes any supported image as a single luma channel in `[0, 1]`.
pub fn load_luma(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = decode(path)?.to_luma32f();
    let (w, h) = decoded.dimensions();
    Image::new(
        h as usize,
        w as usize,
        1,
        decoded.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path)?
        .with_guessed_format()
        .map_err(CharmError::Io)?;
    let img = reader.decode().map_err(|source| CharmError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(CharmError::EmptyImage {
            height: img.height() as usize,
            width: img.width() as usize,
        });
    }
    Ok(img)
}

pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|px| {
                    // channel-equal pixels map to themselves exactly
                    if px[0] == px[1] && px[1] == px[2] {
                        px[0]
                    } else {
                        (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]).clamp(0.0, 1.0)
                    }
                })
                .collect();
            Image::new(img.height, img.width, 1, data)
        }
        c => Err(CharmError::Channels(c)),
    }
}

/// Per-axis sampling taps for half-pixel-center bilinear resampling.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let max = (src - 1) as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = pos.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(src - 1));
            taps.frac.push(pos - lo as f64);
        }
        taps
    }
}

/// Bilinear resize of a row-major `(h, w, channels)` buffer with half-pixel
/// centers. Every output sample is a convex combination of its four source
/// taps and is clamped to their range, so rounding can never leave the
/// input's value range.
pub(crate) fn bilinear_resample(
    data: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    debug_assert_eq!(data.len(), height * width * channels);
    let ys = Taps::new(height, out_h);
    let xs = Taps::new(width, out_w);
    let at = |r: usize, c: usize, ch: usize| data[(r * width + c) * channels + ch];
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for oy in 0..out_h {
        let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
        for ox in 0..out_w {
            let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            for ch in 0..channels {
                let a = at(y0, x0, ch);
                let b = at(y0, x1, ch);
                let c = at(y1, x0, ch);
                let d = at(y1, x1, ch);
                let (a64, b64, c64, d64) = (a as f64, b as f64, c as f64, d as f64);
                let top = a64 + (b64 - a64) * fx;
                let bottom = c64 + (d64 - c64) * fx;
                let v = (top + (bottom - top) * fy) as f32;
                let lo = a.min(b).min(c).min(d);
                let hi = a.max(b).max(c).max(d);
                out.push(v.clamp(lo, hi));
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(CharmError::Dimension(format!(
            "resize target {out_h}x{out_w} has a zero dimension"
        )));
    }
    let data = bilinear_resample(&img.data, img.height, img.width, img.channels, out_h, out_w);
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: img.channels,
        data,
    })
}

/// Nearest-neighbor resize using the same half-pixel-center mapping.
pub fn resize_nearest(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(CharmError::Dimension(format!(
            "resize target {out_h}x{out_w} has a zero dimension"
        )));
    }
    let src =
        |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1);
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let sy = src(oy, img.height, out_h);
        for ox in 0..out_w {
            let sx = src(ox, img.width, out_w);
            let start = (sy * img.width + sx) * c;
            data.extend_from_slice(&img.data[start..start + c]);
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// Shrinks the image so its longer edge equals `max_edge`. Images already
/// within the limit are returned unchanged.
pub fn max_edge_downscale(img: &Image, max_edge: usize) -> Result<Image> {
    if max_edge == 0 {
        return Err(CharmError::Config("max_edge must be at least 1".into()));
    }
    let (h, w) = (img.height, img.width);
    if h.max(w) <= max_edge {
        return Ok(img.clone());
    }
    let shorter = |short: usize, long: usize| (((short * max_edge) as f64 / long as f64).round() as usize).max(1);
    let (out_h, out_w) = if h >= w {
        (max_edge, shorter(w, h))
    } else {
        (shorter(h, w), max_edge)
    };
    resize_bilinear(img, out_h, out_w)
}

/// Crops the bottom/right remainder so both dimensions are multiples of
/// `cell_px`.
pub fn crop_to_grid(img: &Image, cell_px: usize) -> Result<(Image, GridSpec)> {
    let grid = GridSpec::for_dims(img.height, img.width, cell_px)?;
    if grid.height_px() == img.height && grid.width_px() == img.width {
        return Ok((img.clone(), grid));
    }
    Ok((img.crop(0, 0, grid.height_px(), grid.width_px())?, grid))
}

/// Number of `p x p` patches a standard ViT extracts from an `h x w` image.
pub fn seq_len(h: usize, w: usize, p: usize) -> usize {
    (h / p) * (w / p)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let c = img.channels;
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks_exact(img.width * c) {
        for px in row.chunks_exact(c).rev() {
            data.extend_from_slice(px);
        }
    }
    Image { data, ..*img }
}

/// Rotates clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(img: &Image, quarter_turns: u32) -> Image {
    let c = img.channels;
    let (h, w) = (img.height, img.width);
    match quarter_turns % 4 {
        0 => img.clone(),
        2 => {
            let mut data = Vec::with_capacity(img.data.len());
            for px in img.data.chunks_exact(c).rev() {
                data.extend_from_slice(px);
            }
            Image { data, ..*img }
        }
        turns => {
            let mut data = Vec::with_capacity(img.data.len());
            for r in 0..w {
                for col in 0..h {
                    let (sr, sc) = if turns == 1 { (h - 1 - col, r) } else { (col, w - 1 - r) };
                    let start = (sr * w + sc) * c;
                    data.extend_from_slice(&img.data[start..start + c]);
                }
            }
            Image {
                height: w,
                width: h,
                channels: c,
                data,
            }
        }
    }
}

/// Random horizontal flip and random 90/180/270 rotation. Each is gated
/// independently by its probability; the angle is uniform over the three.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let flip = rng.random_bool(cfg.flip_probability);
    let rotate = rng.random_bool(cfg.rotate_probability);
    let turns = rng.random_range(1..=3u32);
    let mut out = if flip { flip_horizontal(img) } else { img.clone() };
    if rotate {
        out = rotate90(&out, turns);
    }
    Ok(out)
}

/// Max-edge limit and optional augmentation, in the order the augment
/// config asks for.
pub fn prepare_image<R: Rng + ?Sized>(
    img: &Image,
    max_edge: Option<usize>,
    aug: Option<&AugmentConfig>,
    rng: &mut R,
) -> Result<Image> {
    let limit = |img: &Image| match max_edge {
        Some(edge) => max_edge_downscale(img, edge),
        None => Ok(img.clone()),
    };
    match aug {
        None => limit(img),
        Some(cfg) if cfg.before_max_edge => limit(&augment(img, cfg, rng)?),
        Some(cfg) => augment(&limit(img)?, cfg, rng),
    }
}
