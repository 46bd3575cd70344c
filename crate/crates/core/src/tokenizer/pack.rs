//! Fixed-length token packs and their on-disk format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CHRM" | u32 version | u32 l | u32 p | u32 channels | u32 num_scales
//! | num_scales x (u32 rows, u32 cols)
//! | f32 pixels[l * p * p * channels] | u8 scale_ids[l] | u32 coords[l * 2]
//! | u8 valid[l] | u32 meta_len | meta_len bytes of UTF-8 JSON
//! ```

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TokenizerConfig;
use crate::error::{CharmError, Result};

pub const PACK_MAGIC: &[u8; 4] = b"CHRM";
pub const PACK_VERSION: u32 = 1;

/// Scale id carried by padding tokens.
pub const PAD_SCALE: u8 = u8::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackMode {
    Single,
    Two,
    Three,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackMeta {
    pub source: Option<String>,
    pub original_dims: [usize; 2],
    pub cropped_dims: [usize; 2],
    pub mode: PackMode,
    pub config: TokenizerConfig,
    /// Seed of the per-image RNG, when the caller derived one.
    pub image_seed: Option<u64>,
    pub dropped: usize,
}

/// One `p x p x channels` token before packing.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub pixels: Vec<f32>,
    pub scale: u8,
    pub row: u32,
    pub col: u32,
}

/// Tokens of one image, ordered by ascending scale, plus what is needed to
/// interpret them.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub patch: usize,
    pub channels: usize,
    pub grid_dims: Vec<[u32; 2]>,
    pub tokens: Vec<Token>,
    pub meta: PackMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPack {
    pub patch: usize,
    pub channels: usize,
    /// `len() * patch * patch * channels` samples, token-major.
    pub pixels: Vec<f32>,
    pub scale_ids: Vec<u8>,
    pub coords: Vec<[u32; 2]>,
    pub grid_dims: Vec<[u32; 2]>,
    pub valid: Vec<bool>,
    pub meta: PackMeta,
}

impl TokenPack {
    pub fn len(&self) -> usize {
        self.scale_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale_ids.is_empty()
    }

    pub fn token_size(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn token_pixels(&self, i: usize) -> &[f32] {
        let n = self.token_size();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn pad_count(&self) -> usize {
        self.len() - self.valid_count()
    }

    /// Valid-token count per scale id.
    pub fn scale_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.grid_dims.len()];
        for (s, v) in self.scale_ids.iter().zip(&self.valid) {
            if *v {
                counts[*s as usize] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        if l == 0 {
            return Err(CharmError::Format("pack has zero length".into()));
        }
        if self.coords.len() != l || self.valid.len() != l || self.pixels.len() != l * self.token_size() {
            return Err(CharmError::Format("per-token arrays disagree in length".into()));
        }
        let mut last_scale = 0u8;
        let mut seen_pad = false;
        for i in 0..l {
            if self.valid[i] {
                if seen_pad {
                    return Err(CharmError::Format(format!("valid token {i} follows a pad")));
                }
                let s = self.scale_ids[i];
                if s < last_scale {
                    return Err(CharmError::Format(format!("token {i} breaks scale ordering")));
                }
                last_scale = s;
                let dims = self
                    .grid_dims
                    .get(s as usize)
                    .ok_or_else(|| CharmError::Format(format!("token {i} has unknown scale {s}")))?;
                let [r, c] = self.coords[i];
                if r >= dims[0] || c >= dims[1] {
                    return Err(CharmError::Format(format!(
                        "token {i} at ({r},{c}) outside scale grid {dims:?}"
                    )));
                }
            } else {
                seen_pad = true;
                if self.scale_ids[i] != PAD_SCALE || self.token_pixels(i).iter().any(|v| *v != 0.0) {
                    return Err(CharmError::Format(format!("pad token {i} is not blank")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let l = self.len();
        let mut out =
            Vec::with_capacity(24 + 8 * self.grid_dims.len() + l * (self.token_size() * 4 + 10) + 4 + meta.len());
        out.extend_from_slice(PACK_MAGIC);
        for v in [
            PACK_VERSION,
            l as u32,
            self.patch as u32,
            self.channels as u32,
            self.grid_dims.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for [r, c] in &self.grid_dims {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.scale_ids);
        for [r, c] in &self.coords {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend(self.valid.iter().map(|v| *v as u8));
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TokenPack> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != PACK_MAGIC {
            return Err(CharmError::Format("bad magic, not a token pack".into()));
        }
        let version = r.u32()?;
        if version != PACK_VERSION {
            return Err(CharmError::Version {
                kind: "pack",
                found: version,
                expected: PACK_VERSION,
            });
        }
        let l = r.u32()? as usize;
        let patch = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let num_scales = r.u32()? as usize;
        if num_scales == 0 || num_scales > 3 {
            return Err(CharmError::Format(format!("num_scales = {num_scales}")));
        }
        let mut grid_dims = Vec::with_capacity(num_scales);
        for _ in 0..num_scales {
            grid_dims.push([r.u32()?, r.u32()?]);
        }
        let n_pixels = l
            .checked_mul(patch * patch * channels)
            .ok_or_else(|| CharmError::Format("pixel count overflows".into()))?;
        let pixels = r
            .take(
                n_pixels
                    .checked_mul(4)
                    .ok_or_else(|| CharmError::Format("pixel count overflows".into()))?,
            )?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let scale_ids = r.take(l)?.to_vec();
        let mut coords = Vec::with_capacity(l);
        for _ in 0..l {
            coords.push([r.u32()?, r.u32()?]);
        }
        let valid = r
            .take(l)?
            .iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(CharmError::Format(format!("valid flag {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        if !r.is_done() {
            return Err(CharmError::Format(format!("{} trailing bytes", r.remaining())));
        }
        let pack = TokenPack {
            patch,
            channels,
            pixels,
            scale_ids,
            coords,
            grid_dims,
            valid,
            meta,
        };
        pack.validate()?;
        Ok(pack)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CharmError::Format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_done(&self) -> bool {
        self.remaining() == 0
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CharmError::Io(e.error))?;
    Ok(())
}

pub fn write_pack(pack: &TokenPack, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &pack.to_bytes()?)
}

pub fn read_pack(path: impl AsRef<Path>) -> Result<TokenPack> {
    TokenPack::from_bytes(&std::fs::read(path)?)
}

/// Pads with blank tokens or randomly drops tokens so exactly `l` remain.
///
/// Drops come from the most downscaled scale first; a scale is only touched
/// once every coarser scale is exhausted.
pub fn pack_to_length<R: Rng + ?Sized>(set: TokenSet, l: usize, rng: &mut R) -> Result<TokenPack> {
    if l == 0 {
        return Err(CharmError::Config("target length must be at least 1".into()));
    }
    let TokenSet {
        patch,
        channels,
        grid_dims,
        tokens,
        mut meta,
    } = set;
    if tokens.windows(2).any(|w| w[0].scale > w[1].scale) {
        return Err(CharmError::Data("tokens are not ordered by ascending scale".into()));
    }
    let size = patch * patch * channels;
    if let Some(t) = tokens.iter().find(|t| t.pixels.len() != size) {
        return Err(CharmError::LengthMismatch {
            left: t.pixels.len(),
            right: size,
        });
    }

    let mut keep = vec![true; tokens.len()];
    let mut excess = tokens.len().saturating_sub(l);
    meta.dropped = excess;
    for scale in (0..grid_dims.len() as u8).rev() {
        if excess == 0 {
            break;
        }
        let members: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].scale == scale).collect();
        if members.len() <= excess {
            members.iter().for_each(|&i| keep[i] = false);
            excess -= members.len();
        } else {
            for j in rand::seq::index::sample(rng, members.len(), excess) {
                keep[members[j]] = false;
            }
            excess = 0;
        }
    }

    let mut pack = TokenPack {
        patch,
        channels,
        pixels: Vec::with_capacity(l * size),
        scale_ids: Vec::with_capacity(l),
        coords: Vec::with_capacity(l),
        grid_dims,
        valid: Vec::with_capacity(l),
        meta,
    };
    for (t, _) in tokens.into_iter().zip(keep).filter(|(_, k)| *k) {
        pack.pixels.extend_from_slice(&t.pixels);
        pack.scale_ids.push(t.scale);
        pack.coords.push([t.row, t.col]);
        pack.valid.push(true);
    }
    while pack.valid.len() < l {
        pack.pixels.extend(std::iter::repeat_n(0.0, size));
        pack.scale_ids.push(PAD_SCALE);
        pack.coords.push([0, 0]);
        pack.valid.push(false);
    }
    Ok(pack)
}

/// Paints every valid token's source region onto the cropped image and
/// returns the per-pixel hit counts (row-major, cropped dims).
///
/// A token at `(i, j)` in a scale grid of `rows x cols` owns the pixels
/// whose centers fall in `[i*H/rows, (i+1)*H/rows) x [j*W/cols, (j+1)*W/cols)`.
pub fn coverage_counts(pack: &TokenPack) -> Vec<u32> {
    let [h, w] = pack.meta.cropped_dims;
    let spans = |cells: u32, px: usize| -> Vec<(usize, usize)> {
        let mut spans = vec![(usize::MAX, 0usize); cells as usize];
        for y in 0..px {
            let idx = (cells as usize * (2 * y + 1)) / (2 * px);
            let s = &mut spans[idx];
            s.0 = s.0.min(y);
            s.1 = s.1.max(y + 1);
        }
        spans
    };
    let row_spans: Vec<_> = pack.grid_dims.iter().map(|d| spans(d[0], h)).collect();
    let col_spans: Vec<_> = pack.grid_dims.iter().map(|d| spans(d[1], w)).collect();
    let mut counts = vec![0u32; h * w];
    for i in (0..pack.len()).filter(|&i| pack.valid[i]) {
        let s = pack.scale_ids[i] as usize;
        let [r, c] = pack.coords[i];
        let (y0, y1) = row_spans[s][r as usize];
        let (x0, x1) = col_spans[s][c as usize];
        for y in y0..y1 {
            for x in x0..x1 {
                counts[y * w + x] += 1;
            }
        }
    }
    counts
}
