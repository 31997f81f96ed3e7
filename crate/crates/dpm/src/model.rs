//! Whole-model wiring: parameter initialization across all freeze groups
//! and the batched forward pass that produces features, masks, and every
//! loss component on one tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, Binding, EncoderConfig};
use crate::error::DpmError;
use crate::graph::{Graph, Var};
use crate::hem;
use crate::hmg::{self, MaskGeneratorConfig, MaskVariant};
use crate::losses::{self, LossParts, LossWeights};
use crate::tensor::{FreezeGroup, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hmg: MaskGeneratorConfig,
    pub weights: LossWeights,
    /// Number of identities C (prototype rows).
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DpmError> {
        self.encoder.validate()?;
        self.hmg.validate(self.encoder.depth)?;
        self.weights.validate()?;
        if self.classes == 0 {
            return Err(DpmError::invalid("classes", "must be >= 1"));
        }
        Ok(())
    }
}

/// Initialize every parameter group: encoder, HMG, and the prototype bank
/// `proto.w` (C x c, one row per identity).
pub fn init_params<T: Scalar>(
    cfg: &ModelConfig,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) -> Result<(), DpmError> {
    cfg.validate()?;
    encoder::init_params(&cfg.encoder, rng, store)?;
    hmg::init_params(&cfg.hmg, &cfg.encoder, rng, store)?;
    let c = cfg.encoder.dim;
    let bound = 1.0 / (c as f64).sqrt();
    let data: Vec<T> = (0..cfg.classes * c)
        .map(|_| T::from_f64c(rng.gen_range(-bound..bound)))
        .collect();
    let w = Tensor::new(vec![cfg.classes, c], data)?;
    for j in 0..cfg.classes {
        let norm: f64 = w.data()[j * c..(j + 1) * c]
            .iter()
            .map(|v| v.to_f64c().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm <= 1e-8 {
            return Err(DpmError::invalid(
                "proto.w",
                format!("degenerate prototype row {j} (norm {norm:.3e})"),
            ));
        }
    }
    store.insert("proto.w", w, FreezeGroup::Prototype)?;
    Ok(())
}

/// One sample of a training batch.
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub camera: usize,
    pub label: usize,
}

/// Everything a batched forward exposes for training and diagnostics.
pub struct BatchForward {
    /// Final class tokens, [B, c], unnormalized.
    pub features: Var,
    /// Per-sample prototype masks, each [c].
    pub masks: Vec<Var>,
    /// Per-sample head attention maps, each [N, D].
    pub attention: Vec<Var>,
    pub parts: LossParts,
    pub total: Var,
}

/// Variant-dependent per-sample similarity row [1, C] for the masked branch.
fn masked_sims<T: Scalar>(
    g: &mut Graph<T>,
    variant: MaskVariant,
    feature: Var,
    mask: Var,
    w_p: Var,
    w_p_normed: Var,
) -> Result<Var, DpmError> {
    let xn = g.l2norm_rows(feature)?;
    let c = g.value(mask).shape()[0];
    let mask_row = g.reshape(mask, &[1, c])?;
    if variant.prototype_side() {
        if variant.after_norm() {
            let wm = g.mul_row(w_p_normed, mask)?;
            g.matmul_nt(xn, wm)
        } else {
            let wm = g.mul_row(w_p, mask)?;
            let wmn = g.l2norm_rows(wm)?;
            g.matmul_nt(xn, wmn)
        }
    } else if variant.after_norm() {
        let xm = g.mul(xn, mask_row)?;
        g.matmul_nt(xm, w_p_normed)
    } else {
        let xm = g.mul(feature, mask_row)?;
        let xmn = g.l2norm_rows(xm)?;
        g.matmul_nt(xmn, w_p_normed)
    }
}

/// Full forward over a batch: encoder, mask generation, both classification
/// branches, HEM penalty, and batch-hard triplet, combined by the loss weights.
pub fn forward_batch<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &ModelConfig,
    batch: &[Sample<T>],
) -> Result<BatchForward, DpmError> {
    if batch.is_empty() {
        return Err(DpmError::invalid("batch", "empty batch".to_string()));
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let w_p = b.get("proto.w");
    let w_p_normed = g.l2norm_rows(w_p)?;

    let mut tokens = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    let mut attention = Vec::with_capacity(batch.len());
    let mut hem_terms = Vec::with_capacity(batch.len());
    let mut sims = Vec::with_capacity(batch.len());
    for s in batch {
        let patches = encoder::patchify(&s.image, cfg.encoder.patch, cfg.encoder.stride)?;
        let pv = g.constant(patches);
        let z0 = encoder::assemble_input(g, b, &cfg.encoder, pv, s.camera)?;
        let state = encoder::forward(g, b, &cfg.encoder, z0)?;
        let token = state.final_class_token();
        tokens.push(token);

        let stacked = hmg::gather_features(g, &cfg.encoder, &state, &cfg.hmg.gate)?;
        let mask = hmg::generate_mask(g, b, &cfg.hmg, stacked)?;
        sims.push(masked_sims(g, cfg.hmg.variant, token, mask, w_p, w_p_normed)?);
        masks.push(mask);

        let a = hem::class_attention(g, state.class_query, state.patch_keys, cfg.encoder.heads)?;
        attention.push(a);
        let h = hem::hem_loss(g, a)?;
        hem_terms.push(g.reshape(h, &[1])?);
    }
    let features = g.concat(0, &tokens)?;

    let s = T::from_f64c(cfg.weights.scale_s);
    let m = T::from_f64c(cfg.weights.margin_m);
    let (plain_margin, masked_margin) = cfg.weights.branch_losses.margins();
    let cls = if plain_margin {
        let fx = g.l2norm_rows(features)?;
        let cosines = g.matmul_nt(fx, w_p_normed)?;
        let rows: Vec<Var> = (0..batch.len())
            .map(|i| g.slice(cosines, 0, i, 1))
            .collect::<Result<_, _>>()?;
        losses::margin_ce_from_sims(g, &rows, &labels, m, s)?
    } else {
        losses::cls_loss(g, features, w_p, &labels, s)?
    };
    let masked_cls = {
        let bm = if masked_margin { m } else { T::zero() };
        losses::margin_ce_from_sims(g, &sims, &labels, bm, s)?
    };
    let hem_all = g.concat(0, &hem_terms)?;
    let hem = g.mean_all(hem_all)?;
    let triplet = losses::triplet_loss(g, features, &labels, T::from_f64c(cfg.weights.triplet_margin))?;

    let parts = LossParts { cls, masked_cls, hem, triplet };
    let total = losses::total_loss(g, parts, &cfg.weights)?;
    Ok(BatchForward { features, masks, attention, parts, total })
}

/// Feature + mask extraction for retrieval: no losses, no labels needed.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    camera: usize,
) -> Result<(Tensor<T>, Tensor<T>), DpmError> {
    let patches = encoder::patchify(image, cfg.encoder.patch, cfg.encoder.stride)?;
    let pv = g.constant(patches);
    let z0 = encoder::assemble_input(g, b, &cfg.encoder, pv, camera)?;
    let state = encoder::forward(g, b, &cfg.encoder, z0)?;
    let token = state.final_class_token();
    let stacked = hmg::gather_features(g, &cfg.encoder, &state, &cfg.hmg.gate)?;
    let mask = hmg::generate_mask(g, b, &cfg.hmg, stacked)?;
    let feat = Tensor::from_vec(g.value(token).data().to_vec());
    Ok((feat, g.value(mask).clone()))
}

/// Loss component selector for the finite-difference suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Cls,
    MaskedCls,
    Hem,
    Triplet,
    Total,
}

impl Component {
    pub const ALL: [Component; 5] =
        [Component::Cls, Component::MaskedCls, Component::Hem, Component::Triplet, Component::Total];

    pub fn name(self) -> &'static str {
        match self {
            Component::Cls => "L_cls",
            Component::MaskedCls => "L_Mcls",
            Component::Hem => "L_hem",
            Component::Triplet => "L_tri",
            Component::Total => "total",
        }
    }

    fn pick(self, out: &BatchForward) -> Var {
        match self {
            Component::Cls => out.parts.cls,
            Component::MaskedCls => out.parts.masked_cls,
            Component::Hem => out.parts.hem,
            Component::Triplet => out.parts.triplet,
            Component::Total => out.total,
        }
    }
}

/// One (loss component, parameter) finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub component: Component,
    pub group: FreezeGroup,
    pub param: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Small representative parameters, at least one per freeze group, so the
/// full check stays fast while every gradient path is exercised.
pub fn default_gradcheck_params(cfg: &ModelConfig) -> Vec<String> {
    vec![
        "enc.patch_embed.b".to_string(),
        "enc.block1.ln1.g".to_string(),
        format!("enc.block{}.attn.wq", cfg.encoder.depth),
        "hmg.conv1.b".to_string(),
        "hmg.conv2.w".to_string(),
        "proto.w".to_string(),
    ]
}

/// Replace the mask generator's output conv weights with full-scale random
/// values. At init they are near zero (neutral mask start), which scales the
/// gradient into the earlier conv below finite-difference resolution; checks
/// should run at a generic point instead.
pub fn randomize_mask_output_conv(
    store: &mut ParamStore<f64>,
    rng: &mut impl Rng,
) -> Result<(), DpmError> {
    let entry = store
        .get_mut("hmg.conv2.w")
        .ok_or_else(|| DpmError::invalid("store", "hmg.conv2.w missing"))?;
    let shape = entry.value.shape().to_vec();
    let n: usize = shape.iter().product();
    entry.value = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
    Ok(())
}

/// Central-difference check of every loss component against each listed
/// parameter, batch held fixed. 64-bit only.
pub fn gradcheck_components(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    batch: &[Sample<f64>],
    params: &[String],
    step: f64,
    tol: f64,
) -> Result<Vec<GradCheckRow>, DpmError> {
    let mut rows = Vec::new();
    for &component in &Component::ALL {
        for name in params {
            let p = store
                .get(name)
                .ok_or_else(|| DpmError::invalid("gradcheck", format!("unknown parameter {name}")))?;
            let group = p.group;
            let report = crate::graph::grad_check(
                |g, x| {
                    let mut b = Binding::bind(store, g, |_| false);
                    b.override_var(name, x);
                    let out = forward_batch(g, &b, cfg, batch)?;
                    Ok(component.pick(&out))
                },
                &p.value,
                step,
                tol,
            )?;
            rows.push(GradCheckRow {
                component,
                group,
                param: name.clone(),
                max_rel_err: report.max_rel_err,
                checked: report.checked,
                pass: report.pass,
            });
        }
    }
    Ok(rows)
}
