//! Miniature ViT-style encoder: sliding-window patchify, token assembly with
//! position and camera embeddings, pre-norm transformer blocks, and the
//! per-block feature trace consumed by the mask generator and diagnostics.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DpmError;
use crate::graph::{Graph, Var};
use crate::tensor::{FreezeGroup, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cameras: usize,
    pub lambda_cam: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_h: 32,
            image_w: 16,
            channels: 3,
            patch: 8,
            stride: 4,
            dim: 64,
            depth: 12,
            heads: 4,
            mlp_ratio: 4,
            cameras: 3,
            lambda_cam: 3.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), DpmError> {
        if self.patch > self.image_h || self.patch > self.image_w {
            return Err(DpmError::invalid(
                "patch",
                format!("patch {} exceeds image {}x{}", self.patch, self.image_h, self.image_w),
            ));
        }
        if self.stride == 0 {
            return Err(DpmError::invalid("stride", "must be >= 1"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DpmError::invalid(
                "dim",
                format!("dim {} must be divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.depth < 2 {
            return Err(DpmError::invalid("depth", "must be >= 2"));
        }
        if self.channels == 0 || self.cameras == 0 || self.mlp_ratio == 0 {
            return Err(DpmError::invalid("encoder", "channels, cameras, mlp_ratio must be >= 1"));
        }
        let (gh, gw) = self.grid();
        if gh == 0 || gw == 0 {
            return Err(DpmError::invalid("encoder", "patch grid is empty"));
        }
        Ok(())
    }

    /// Per-axis window counts (rows, cols) of the patch grid.
    pub fn grid(&self) -> (usize, usize) {
        let gh = (self.image_h - self.patch + self.stride) / self.stride;
        let gw = (self.image_w - self.patch + self.stride) / self.stride;
        (gh, gw)
    }

    /// Patch count D: the product of the per-axis window counts.
    pub fn patch_count(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Everything one forward pass exposes: per-block patch features f_l, the
/// per-block class token, and the last block's class query / patch keys.
pub struct EncoderState {
    /// Patch rows of z_l per block, each [D, c].
    pub patch_features: Vec<Var>,
    /// Class token per block, each [1, c].
    pub class_tokens: Vec<Var>,
    /// Class-token query of the last block, [1, c] (pre head split).
    pub class_query: Var,
    /// Image-patch keys of the last block, [D, c].
    pub patch_keys: Var,
}

impl EncoderState {
    pub fn final_class_token(&self) -> Var {
        *self.class_tokens.last().expect("encoder depth >= 2")
    }
}

/// Extract D sliding-window patches, row-major over window positions, each
/// flattened to patch*patch*channels (pixel-major, channel-minor).
pub fn patchify<T: Scalar>(
    image: &Tensor<T>,
    patch: usize,
    stride: usize,
) -> Result<Tensor<T>, DpmError> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(DpmError::shape("patchify", format!("expected [h,w,c], got {:?}", shape)));
    }
    let (h, w, cin) = (shape[0], shape[1], shape[2]);
    if patch > h || patch > w {
        return Err(DpmError::shape(
            "patchify",
            format!("window {patch} larger than image {h}x{w}"),
        ));
    }
    if stride == 0 {
        return Err(DpmError::invalid("stride", "must be >= 1"));
    }
    let gh = (h - patch + stride) / stride;
    let gw = (w - patch + stride) / stride;
    let pd = patch * patch * cin;
    let mut data = Vec::with_capacity(gh * gw * pd);
    let src = image.data();
    for py in 0..gh {
        for px in 0..gw {
            let (y0, x0) = (py * stride, px * stride);
            for dy in 0..patch {
                let row = ((y0 + dy) * w + x0) * cin;
                data.extend_from_slice(&src[row..row + patch * cin]);
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], data)
}

fn uniform_fan_in<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Register all encoder parameters. Linear weights get scaled-uniform fan-in
/// init; class token, position and camera tables start at zero.
pub fn init_params<T: Scalar>(
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) -> Result<(), DpmError> {
    cfg.validate()?;
    let (c, d) = (cfg.dim, cfg.patch_count());
    let pd = cfg.patch_dim();
    let g = FreezeGroup::Encoder;
    store.insert("enc.patch_embed.w", uniform_fan_in(rng, &[pd, c], pd), g)?;
    store.insert("enc.patch_embed.b", Tensor::zeros(&[c]), g)?;
    store.insert("enc.cls", Tensor::zeros(&[1, c]), g)?;
    store.insert("enc.pos", Tensor::zeros(&[d + 1, c]), g)?;
    for cam in 0..cfg.cameras {
        store.insert(&format!("enc.cam{cam}"), Tensor::zeros(&[c]), g)?;
    }
    let mc = c * cfg.mlp_ratio;
    for l in 1..=cfg.depth {
        let p = format!("enc.block{l}");
        store.insert(&format!("{p}.ln1.g"), Tensor::full(&[c], T::one()), g)?;
        store.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[c]), g)?;
        for nm in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{nm}"), uniform_fan_in(rng, &[c, c], c), g)?;
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}.attn.{nm}"), Tensor::zeros(&[c]), g)?;
        }
        store.insert(&format!("{p}.ln2.g"), Tensor::full(&[c], T::one()), g)?;
        store.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[c]), g)?;
        store.insert(&format!("{p}.mlp.w1"), uniform_fan_in(rng, &[c, mc], c), g)?;
        store.insert(&format!("{p}.mlp.b1"), Tensor::zeros(&[mc]), g)?;
        store.insert(&format!("{p}.mlp.w2"), uniform_fan_in(rng, &[mc, c], mc), g)?;
        store.insert(&format!("{p}.mlp.b2"), Tensor::zeros(&[c]), g)?;
    }
    Ok(())
}

/// Parameter-name -> tape-variable binding for one recorded step.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    /// Insert every parameter into the graph. Parameters whose freeze group
    /// satisfies `trainable` become differentiable leaves, the rest constants.
    pub fn bind<T: Scalar>(
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        trainable: impl Fn(FreezeGroup) -> bool,
    ) -> Self {
        let mut vars = HashMap::new();
        for (name, p) in store.iter() {
            let v = if p.trainable && trainable(p.group) {
                g.leaf(p.value.clone())
            } else {
                g.constant(p.value.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Binding { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    /// Rebind one name to a different tape variable.
    pub fn override_var(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }
}

/// Token assembly: [cls; F(x_1); ...; F(x_D)] + pos + lambda * cam.
pub fn assemble_input<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &EncoderConfig,
    patches: Var,
    camera: usize,
) -> Result<Var, DpmError> {
    if camera >= cfg.cameras {
        return Err(DpmError::invalid(
            "camera",
            format!("camera id {camera} out of {}", cfg.cameras),
        ));
    }
    let d = cfg.patch_count();
    let got = g.value(patches).shape().to_vec();
    if got != [d, cfg.patch_dim()] {
        return Err(DpmError::shape(
            "assemble_input",
            format!("patches {:?}, expected [{d}, {}]", got, cfg.patch_dim()),
        ));
    }
    let emb = g.matmul(patches, b.get("enc.patch_embed.w"))?;
    let emb = g.add_row(emb, b.get("enc.patch_embed.b"))?;
    let tokens = g.concat(0, &[b.get("enc.cls"), emb])?;
    let tokens = g.add(tokens, b.get("enc.pos"))?;
    let cam = g.scale(b.get(&format!("enc.cam{camera}")), T::from_f64c(cfg.lambda_cam))?;
    g.add_row(tokens, cam)
}

/// Pre-norm transformer stack. Records per-block patch features and class
/// tokens, and the last block's class query / patch keys (taken where the
/// block's attention computes them, after the block's first LayerNorm).
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &EncoderConfig,
    z0: Var,
) -> Result<EncoderState, DpmError> {
    let (c, d, n) = (cfg.dim, cfg.patch_count(), cfg.heads);
    let hd = cfg.head_dim();
    let mut z = z0;
    let mut patch_features = Vec::with_capacity(cfg.depth);
    let mut class_tokens = Vec::with_capacity(cfg.depth);
    let mut last_qk = None;
    for l in 1..=cfg.depth {
        let p = format!("enc.block{l}");
        let h = g
            .layer_norm(z, b.get(&format!("{p}.ln1.g")), b.get(&format!("{p}.ln1.b")))
            .map_err(|e| block_err(e, l))?;
        let q = g.matmul(h, b.get(&format!("{p}.attn.wq")))?;
        let q = g.add_row(q, b.get(&format!("{p}.attn.bq")))?;
        let k = g.matmul(h, b.get(&format!("{p}.attn.wk")))?;
        let k = g.add_row(k, b.get(&format!("{p}.attn.bk")))?;
        let v = g.matmul(h, b.get(&format!("{p}.attn.wv")))?;
        let v = g.add_row(v, b.get(&format!("{p}.attn.bv")))?;
        if l == cfg.depth {
            let class_query = g.slice(q, 0, 0, 1)?;
            let patch_keys = g.slice(k, 0, 1, d)?;
            last_qk = Some((class_query, patch_keys));
        }
        let mut head_outs = Vec::with_capacity(n);
        for head in 0..n {
            let qh = g.slice(q, 1, head * hd, hd)?;
            let kh = g.slice(k, 1, head * hd, hd)?;
            let vh = g.slice(v, 1, head * hd, hd)?;
            let (oh, _attn) = g.sdpa(qh, kh, vh).map_err(|e| block_err(e, l))?;
            head_outs.push(oh);
        }
        let attn_out = g.concat(1, &head_outs)?;
        let attn_out = g.matmul(attn_out, b.get(&format!("{p}.attn.wo")))?;
        let attn_out = g.add_row(attn_out, b.get(&format!("{p}.attn.bo")))?;
        z = g.add(z, attn_out).map_err(|e| block_err(e, l))?;

        let h2 = g.layer_norm(z, b.get(&format!("{p}.ln2.g")), b.get(&format!("{p}.ln2.b")))?;
        let m = g.matmul(h2, b.get(&format!("{p}.mlp.w1")))?;
        let m = g.add_row(m, b.get(&format!("{p}.mlp.b1")))?;
        let m = g.gelu(m).map_err(|e| block_err(e, l))?;
        let m = g.matmul(m, b.get(&format!("{p}.mlp.w2")))?;
        let m = g.add_row(m, b.get(&format!("{p}.mlp.b2")))?;
        z = g.add(z, m).map_err(|e| block_err(e, l))?;

        patch_features.push(g.slice(z, 0, 1, d)?);
        class_tokens.push(g.slice(z, 0, 0, 1)?);
        let _ = c;
    }
    let (class_query, patch_keys) = last_qk.expect("depth >= 1");
    Ok(EncoderState { patch_features, class_tokens, class_query, patch_keys })
}

fn block_err(e: DpmError, block: usize) -> DpmError {
    match e {
        DpmError::NonFinite { context } => {
            DpmError::non_finite(format!("{context} in encoder block {block}"))
        }
        other => other,
    }
}

/// Per-block minimum cosine similarity between patch-feature pairs (the
/// most dissimilar pair; class token excluded).
pub fn diag_block_similarity_gap<T: Scalar>(g: &Graph<T>, state: &EncoderState) -> Vec<f64> {
    state
        .patch_features
        .iter()
        .map(|&f| {
            let t = g.value(f);
            let (rows, c) = (t.shape()[0], t.shape()[1]);
            let data = t.data();
            let norms: Vec<f64> = (0..rows)
                .map(|r| {
                    data[r * c..(r + 1) * c]
                        .iter()
                        .map(|v| v.to_f64c() * v.to_f64c())
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mut min_cos = 1.0f64;
            for i in 0..rows {
                for j in i + 1..rows {
                    let dot: f64 = (0..c)
                        .map(|p| data[i * c + p].to_f64c() * data[j * c + p].to_f64c())
                        .sum();
                    let cos = dot / (norms[i] * norms[j]).max(1e-24);
                    min_cos = min_cos.min(cos);
                }
            }
            min_cos
        })
        .collect()
}
