//! Named-tensor weight container.
//!
//! ```text
//! "CHWT" | u32 version | u32 tensor_count
//! | per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Tensors keep file order, so a
//! file that is read and written again is byte-identical.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::embeddings::{EmbeddingTable, PosGrid};
use crate::error::{CharmError, Result};
use crate::tokenizer::{write_atomic, ByteReader};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CHWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(CharmError::LengthMismatch {
                left: data.len(),
                right: n,
            });
        }
        Ok(Self { dims, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: IndexMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| CharmError::MissingTensor(name.to_string()))?;
        if t.dims != dims {
            return Err(CharmError::Shape {
                name: name.to_string(),
                found: t.dims.clone(),
                expected: dims.to_vec(),
            });
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(CharmError::NonFinite(format!("tensor `{name}`")));
        }
        Ok(&t.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len =
                u16::try_from(name.len()).map_err(|_| CharmError::Format(format!("tensor name `{name}` too long")))?;
            let ndim = u8::try_from(t.dims.len())
                .map_err(|_| CharmError::Format(format!("tensor `{name}` has too many dims")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(CharmError::Format("bad magic, not a weights file".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(CharmError::Version {
                kind: "weights",
                found: version,
                expected: WEIGHTS_VERSION,
            });
        }
        let count = r.u32()?;
        let mut store = TensorStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CharmError::Format(format!("tensor name: {e}")))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CharmError::Format(format!("tensor `{name}` is too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if store.tensors.contains_key(&name) {
                return Err(CharmError::Format(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, Tensor { dims, data });
        }
        if !r.is_done() {
            return Err(CharmError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub norm1_w: Array1<f64>,
    pub norm1_b: Array1<f64>,
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array1<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub norm2_w: Array1<f64>,
    pub norm2_b: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// Typed, shape-checked weights for one [`ViTConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub(crate) config: ViTConfig,
    pub(crate) patch_w: Array2<f64>,
    pub(crate) patch_b: Array1<f64>,
    pub(crate) cls_token: Array1<f64>,
    pub(crate) pos: PosGrid,
    pub(crate) table: EmbeddingTable,
    pub(crate) blocks: Vec<Block>,
    pub(crate) norm_w: Array1<f64>,
    pub(crate) norm_b: Array1<f64>,
    pub(crate) head_w: Array2<f64>,
    pub(crate) head_b: Array1<f64>,
}

fn vec1(data: &[f32]) -> Array1<f64> {
    data.iter().map(|v| *v as f64).collect()
}

fn mat(data: &[f32], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data.iter().map(|v| *v as f64).collect()).expect("shape checked")
}

fn t1(a: &Array1<f64>) -> Tensor {
    Tensor {
        dims: vec![a.len()],
        data: a.iter().map(|v| *v as f32).collect(),
    }
}

fn t2(a: &Array2<f64>) -> Tensor {
    Tensor {
        dims: a.shape().to_vec(),
        data: a.iter().map(|v| *v as f32).collect(),
    }
}

impl Weights {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn pos_grid(&self) -> &PosGrid {
        &self.pos
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn from_store(store: &TensorStore, config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hd = config.hidden_dim();
        let [gr, gc] = config.pos_grid;
        let out = config.head.outputs();
        let v = |name: &str| store.expect(name, &[d]).map(vec1);
        let m = |name: &str, r: usize, c: usize| store.expect(name, &[r, c]).map(|x| mat(x, r, c));

        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(Block {
                norm1_w: v(&p("norm1.weight"))?,
                norm1_b: v(&p("norm1.bias"))?,
                qkv_w: m(&p("attn.qkv.weight"), 3 * d, d)?,
                qkv_b: store.expect(&p("attn.qkv.bias"), &[3 * d]).map(vec1)?,
                proj_w: m(&p("attn.proj.weight"), d, d)?,
                proj_b: v(&p("attn.proj.bias"))?,
                norm2_w: v(&p("norm2.weight"))?,
                norm2_b: v(&p("norm2.bias"))?,
                fc1_w: m(&p("mlp.fc1.weight"), hd, d)?,
                fc1_b: store.expect(&p("mlp.fc1.bias"), &[hd]).map(vec1)?,
                fc2_w: m(&p("mlp.fc2.weight"), d, hd)?,
                fc2_b: v(&p("mlp.fc2.bias"))?,
            });
        }
        Ok(Self {
            config: *config,
            patch_w: m("patch_embed.weight", d, config.patch_dim())?,
            patch_b: v("patch_embed.bias")?,
            cls_token: v("cls_token")?,
            pos: PosGrid::new(
                gr,
                gc,
                d,
                store.expect("pos_embed.grid", &[gr, gc, d])?.to_vec(),
                store.expect("pos_embed.cls", &[d])?.to_vec(),
            )?,
            table: EmbeddingTable::new(
                d,
                store.expect("scale_embed", &[config.num_scales, d])?.to_vec(),
                store.expect("mask_token", &[d])?.to_vec(),
            )?,
            blocks,
            norm_w: v("norm.weight")?,
            norm_b: v("norm.bias")?,
            head_w: m("head.weight", out, d)?,
            head_b: store.expect("head.bias", &[out]).map(vec1)?,
        })
    }

    pub fn to_store(&self) -> TensorStore {
        let c = &self.config;
        let d = c.dim;
        let mut s = TensorStore::new();
        s.insert("patch_embed.weight", t2(&self.patch_w));
        s.insert("patch_embed.bias", t1(&self.patch_b));
        s.insert("cls_token", t1(&self.cls_token));
        s.insert(
            "pos_embed.grid",
            Tensor {
                dims: vec![c.pos_grid[0], c.pos_grid[1], d],
                data: self.pos.data().to_vec(),
            },
        );
        s.insert(
            "pos_embed.cls",
            Tensor {
                dims: vec![d],
                data: self.pos.cls().to_vec(),
            },
        );
        s.insert(
            "scale_embed",
            Tensor {
                dims: vec![c.num_scales, d],
                data: self.table.scale_vectors().to_vec(),
            },
        );
        s.insert(
            "mask_token",
            Tensor {
                dims: vec![d],
                data: self.table.mask_vector().to_vec(),
            },
        );
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            s.insert(p("norm1.weight"), t1(&b.norm1_w));
            s.insert(p("norm1.bias"), t1(&b.norm1_b));
            s.insert(p("attn.qkv.weight"), t2(&b.qkv_w));
            s.insert(p("attn.qkv.bias"), t1(&b.qkv_b));
            s.insert(p("attn.proj.weight"), t2(&b.proj_w));
            s.insert(p("attn.proj.bias"), t1(&b.proj_b));
            s.insert(p("norm2.weight"), t1(&b.norm2_w));
            s.insert(p("norm2.bias"), t1(&b.norm2_b));
            s.insert(p("mlp.fc1.weight"), t2(&b.fc1_w));
            s.insert(p("mlp.fc1.bias"), t1(&b.fc1_b));
            s.insert(p("mlp.fc2.weight"), t2(&b.fc2_w));
            s.insert(p("mlp.fc2.bias"), t1(&b.fc2_b));
        }
        s.insert("norm.weight", t1(&self.norm_w));
        s.insert("norm.bias", t1(&self.norm_b));
        s.insert("head.weight", t2(&self.head_w));
        s.insert("head.bias", t1(&self.head_b));
        s
    }

    /// Seeded synthetic weights. Linear layers use `N(0, 1/fan_in)`, biases
    /// and embeddings `N(0, 0.02^2)`, norms start near identity.
    pub fn random<R: Rng + ?Sized>(config: &ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hd = config.hidden_dim();
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let lin = |rows: usize, cols: usize, rng: &mut R| {
            let n = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| n.sample(rng) as f32 as f64)
        };
        let vec_small =
            |n: usize, rng: &mut R| -> Array1<f64> { (0..n).map(|_| small.sample(rng) as f32 as f64).collect() };
        let norm_w = |n: usize, rng: &mut R| -> Array1<f64> {
            (0..n).map(|_| (1.0 + small.sample(rng)) as f32 as f64).collect()
        };

        let patch_w = lin(d, config.patch_dim(), rng);
        let patch_b = vec_small(d, rng);
        let cls_token = vec_small(d, rng);
        let pos = PosGrid::synthetic(config.pos_grid[0], config.pos_grid[1], d, rng)?;
        let table = EmbeddingTable::random(config.num_scales, d, rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                norm1_w: norm_w(d, rng),
                norm1_b: vec_small(d, rng),
                qkv_w: lin(3 * d, d, rng),
                qkv_b: vec_small(3 * d, rng),
                proj_w: lin(d, d, rng),
                proj_b: vec_small(d, rng),
                norm2_w: norm_w(d, rng),
                norm2_b: vec_small(d, rng),
                fc1_w: lin(hd, d, rng),
                fc1_b: vec_small(hd, rng),
                fc2_w: lin(d, hd, rng),
                fc2_b: vec_small(d, rng),
            });
        }
        let norm_w = norm_w(d, rng);
        let norm_b = vec_small(d, rng);
        let head_w = lin(config.head.outputs(), d, rng);
        let head_b = vec_small(config.head.outputs(), rng);
        Ok(Self {
            config: *config,
            patch_w,
            patch_b,
            cls_token,
            pos,
            table,
            blocks,
            norm_w,
            norm_b,
            head_w,
            head_b,
        })
    }

    /// Replaces the head with the given parameters (`outputs x dim`).
    pub fn set_head(&mut self, weight: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        let expected = [self.config.head.outputs(), self.config.dim];
        if weight.shape() != expected || bias.len() != expected[0] {
            return Err(CharmError::Shape {
                name: "head".into(),
                found: weight.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        self.head_w = weight;
        self.head_b = bias;
        Ok(())
    }

    /// Replaces the patch projection (`dim x patch_dim`) and its bias.
    pub fn set_patch_projection(&mut self, weight: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        let expected = [self.config.dim, self.config.patch_dim()];
        if weight.shape() != expected || bias.len() != expected[0] {
            return Err(CharmError::Shape {
                name: "patch_embed".into(),
                found: weight.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        self.patch_w = weight;
        self.patch_b = bias;
        Ok(())
    }

    pub fn set_table(&mut self, table: EmbeddingTable) -> Result<()> {
        if table.dim() != self.config.dim || table.num_scales() != self.config.num_scales {
            return Err(CharmError::Dimension("embedding table does not match config".into()));
        }
        self.table = table;
        Ok(())
    }
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    weights.to_store().write(path)
}

pub fn load_weights(path: impl AsRef<Path>, config: &ViTConfig) -> Result<Weights> {
    Weights::from_store(&TensorStore::read(path)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ViTConfig {
        ViTConfig::toy(4, 3)
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Weights::random(&toy(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Weights::random(&toy(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_roundtrip() {
        let w = Weights::random(&toy(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.chwt");
        save_weights(&w, &path).unwrap();
        assert_eq!(load_weights(&path, &toy()).unwrap(), w);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(TensorStore::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn missing_and_misshapen_tensors() {
        let w = Weights::random(&toy(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut store = w.to_store();
        store.remove("cls_token");
        assert!(matches!(
            Weights::from_store(&store, &toy()),
            Err(CharmError::MissingTensor(n)) if n == "cls_token"
        ));
        let mut store = w.to_store();
        store.insert("mask_token", Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(matches!(
            Weights::from_store(&store, &toy()),
            Err(CharmError::Shape { .. })
        ));
        let bigger = ViTConfig { layers: 3, ..toy() };
        assert!(Weights::from_store(&w.to_store(), &bigger).is_err());
    }

    #[test]
    fn container_errors() {
        let w = Weights::random(&toy(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bytes = w.to_store().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"CHRM");
        assert!(matches!(TensorStore::from_bytes(&bad), Err(CharmError::Format(_))));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            TensorStore::from_bytes(&v2),
            Err(CharmError::Version { found: 2, .. })
        ));
        assert!(TensorStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
