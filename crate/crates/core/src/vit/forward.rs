use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{HeadKind, ViTConfig, Weights};
use crate::embeddings;
use crate::error::{CharmError, Result};
use crate::tokenizer::TokenPack;

const LN_EPS: f64 = 1e-6;

/// Assembled encoder input: CLS row followed by one row per token, and the
/// key mask (`true` = attendable). The CLS entry is always `true`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub seq: Array2<f64>,
    pub key_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Score(f64),
    Distribution(Vec<f64>),
}

/// Linear projection of every token's flattened pixels (`l x d`).
pub fn patch_encode(pack: &TokenPack, weights: &Weights) -> Result<Array2<f64>> {
    let cfg = &weights.config;
    if pack.patch != cfg.patch || pack.channels != cfg.channels {
        return Err(CharmError::Shape {
            name: "token".into(),
            found: vec![pack.patch, pack.patch, pack.channels],
            expected: vec![cfg.patch, cfg.patch, cfg.channels],
        });
    }
    let pixels = Array2::from_shape_vec(
        (pack.len(), pack.token_size()),
        pack.pixels.iter().map(|v| *v as f64).collect(),
    )
    .map_err(|e| CharmError::Format(e.to_string()))?;
    Ok(pixels.dot(&weights.patch_w.t()) + &weights.patch_b)
}

/// Valid rows get `encoded + position + scale`, pad rows the mask vector,
/// and the CLS row (token plus CLS position) is prepended.
pub fn assemble_input(
    encoded: &Array2<f64>,
    positions: &Array2<f32>,
    scales: &Array2<f32>,
    weights: &Weights,
    valid: &[bool],
) -> Result<EncoderInput> {
    let d = weights.config.dim;
    let l = valid.len();
    for (name, shape) in [
        ("encoded", encoded.shape()),
        ("positions", positions.shape()),
        ("scales", scales.shape()),
    ] {
        if shape != [l, d] {
            return Err(CharmError::Shape {
                name: name.into(),
                found: shape.to_vec(),
                expected: vec![l, d],
            });
        }
    }
    let mask = weights.table.mask_vector();
    let cls_pos = weights.pos.cls();
    let mut seq = Array2::zeros((l + 1, d));
    for k in 0..d {
        seq[[0, k]] = weights.cls_token[k] + cls_pos[k] as f64;
    }
    for i in 0..l {
        let mut row = seq.row_mut(i + 1);
        if valid[i] {
            for k in 0..d {
                row[k] = encoded[[i, k]] + positions[[i, k]] as f64 + scales[[i, k]] as f64;
            }
        } else {
            row.iter_mut().zip(mask).for_each(|(o, m)| *o = *m as f64);
        }
    }
    let mut key_mask = Vec::with_capacity(l + 1);
    key_mask.push(true);
    key_mask.extend_from_slice(valid);
    Ok(EncoderInput { seq, key_mask })
}

fn layer_norm(x: &Array2<f64>, w: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * w[k] + b[k];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn check_finite(x: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CharmError::NonFinite(what()))
    }
}

/// Pre-norm transformer stack. Keys whose mask entry is `false` receive
/// zero attention weight. No final norm is applied here.
pub fn encoder_forward(input: &EncoderInput, weights: &Weights, cfg: &ViTConfig) -> Result<Array2<f64>> {
    let (rows, d) = input.seq.dim();
    if d != cfg.dim || input.key_mask.len() != rows || weights.blocks.len() != cfg.layers {
        return Err(CharmError::Shape {
            name: "encoder input".into(),
            found: vec![rows, d, weights.blocks.len()],
            expected: vec![input.key_mask.len(), cfg.dim, cfg.layers],
        });
    }
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = input.seq.clone();
    for (li, block) in weights.blocks.iter().enumerate() {
        let h = layer_norm(&x, &block.norm1_w, &block.norm1_b);
        let qkv = h.dot(&block.qkv_w.t()) + &block.qkv_b;
        let mut attn_out = Array2::zeros((rows, d));
        for head in 0..heads {
            let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
            let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
            let mut scores = q.dot(&k.t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row
                    .iter()
                    .zip(&input.key_mask)
                    .filter(|(_, m)| **m)
                    .map(|(s, _)| *s)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (s, m) in row.iter_mut().zip(&input.key_mask) {
                    *s = if *m { (*s - max).exp() } else { 0.0 };
                    sum += *s;
                }
                row.mapv_inplace(|s| s / sum);
            }
            attn_out
                .slice_mut(s![.., head * dh..(head + 1) * dh])
                .assign(&scores.dot(&v));
        }
        x = x + attn_out.dot(&block.proj_w.t()) + &block.proj_b;

        let h = layer_norm(&x, &block.norm2_w, &block.norm2_b);
        let hidden = (h.dot(&block.fc1_w.t()) + &block.fc1_b).mapv(gelu);
        x = x + hidden.dot(&block.fc2_w.t()) + &block.fc2_b;
        check_finite(&x, || format!("encoder layer {li}"))?;
    }
    Ok(x)
}

/// Affine head on a CLS state; the distribution head applies a softmax.
pub fn head(cls: ArrayView1<f64>, weights: &Weights, kind: HeadKind) -> Result<Prediction> {
    if cls.len() != weights.config.dim || weights.head_w.nrows() != kind.outputs() {
        return Err(CharmError::Shape {
            name: "head".into(),
            found: vec![weights.head_w.nrows(), cls.len()],
            expected: vec![kind.outputs(), weights.config.dim],
        });
    }
    let logits = weights.head_w.dot(&cls) + &weights.head_b;
    Ok(match kind {
        HeadKind::Score => Prediction::Score(logits[0]),
        HeadKind::Distribution { .. } => {
            let max = logits.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            let exp = logits.mapv(|v| (v - max).exp());
            let sum = exp.sum();
            Prediction::Distribution(exp.iter().map(|e| e / sum).collect())
        }
    })
}

/// Pack to prediction: encode, add embeddings, run the stack, normalize the
/// CLS state and apply the head.
pub fn predict(pack: &TokenPack, weights: &Weights) -> Result<Prediction> {
    let cfg = weights.config;
    let encoded = patch_encode(pack, weights)?;
    let positions = embeddings::position_for_tokens(pack, &weights.pos)?;
    let scales = embeddings::scale_embed(pack, &weights.table)?;
    let input = assemble_input(&encoded, &positions, &scales, weights, &pack.valid)?;
    let out = encoder_forward(&input, weights, &cfg)?;
    let cls = out.slice(s![0..1, ..]).to_owned();
    let cls = layer_norm(&cls, &weights.norm_w, &weights.norm_b);
    head(cls.index_axis(Axis(0), 0), weights, cfg.head)
}
