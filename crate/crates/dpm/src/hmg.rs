//! Hierarchical mask generator: gated multi-block patch features are stacked
//! channel-wise, pushed through a small conv stack, pooled, and squashed to a
//! per-sample channel mask that carves a subspace out of the prototype bank.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Binding, EncoderConfig, EncoderState};
use crate::error::DpmError;
use crate::graph::{Graph, Var};
use crate::tensor::{FreezeGroup, ParamStore, Scalar, Tensor};

/// Where the mask multiplies in, following the P / F / Pn / Fn naming:
/// prototype- or feature-side, before or after L2 normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskVariant {
    P,
    F,
    Pn,
    Fn,
}

impl MaskVariant {
    /// Prototype-side variants act on the class-prototype bank at training
    /// time; feature-side variants act on the feature representation.
    pub fn prototype_side(self) -> bool {
        matches!(self, MaskVariant::P | MaskVariant::Pn)
    }

    pub fn after_norm(self) -> bool {
        matches!(self, MaskVariant::Pn | MaskVariant::Fn)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MaskGeneratorConfig {
    /// Block indices (1-based) whose patch features feed the generator.
    pub gate: Vec<usize>,
    pub kernel: usize,
    /// Channel width between the two conv layers.
    pub hidden: usize,
    pub variant: MaskVariant,
}

impl Default for MaskGeneratorConfig {
    fn default() -> Self {
        MaskGeneratorConfig { gate: vec![2, 4, 10, 12], kernel: 3, hidden: 64, variant: MaskVariant::Pn }
    }
}

impl MaskGeneratorConfig {
    pub fn validate(&self, depth: usize) -> Result<(), DpmError> {
        if self.gate.is_empty() {
            return Err(DpmError::invalid("hmg_gate", "at least one gate bit must be set"));
        }
        let mut prev = 0;
        for &l in &self.gate {
            if l == 0 || l > depth {
                return Err(DpmError::invalid(
                    "hmg_gate",
                    format!("block index {l} out of 1..={depth}"),
                ));
            }
            if l <= prev {
                return Err(DpmError::invalid("hmg_gate", "indices must be strictly ascending"));
            }
            prev = l;
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(DpmError::invalid("hmg_kernel", "kernel must be odd and >= 1"));
        }
        if self.hidden == 0 {
            return Err(DpmError::invalid("hmg_hidden", "must be >= 1"));
        }
        Ok(())
    }
}

/// Register conv-stack parameters: kernel conv (k*c -> hidden), GELU,
/// then 1x1 conv (hidden -> c). The output layer starts near zero so
/// training begins from an almost neutral mask (~0.5 everywhere).
pub fn init_params<T: Scalar>(
    cfg: &MaskGeneratorConfig,
    enc: &EncoderConfig,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) -> Result<(), DpmError> {
    cfg.validate(enc.depth)?;
    let c = enc.dim;
    let cin = cfg.gate.len() * c;
    let k = cfg.kernel;
    let g = FreezeGroup::Hmg;
    let fan1 = k * k * cin;
    let bound1 = 1.0 / (fan1 as f64).sqrt();
    let n1 = k * k * cin * cfg.hidden;
    store.insert(
        "hmg.conv1.w",
        Tensor::new(
            vec![k, k, cin, cfg.hidden],
            (0..n1).map(|_| T::from_f64c(rng.gen_range(-bound1..bound1))).collect(),
        )?,
        g,
    )?;
    store.insert("hmg.conv1.b", Tensor::zeros(&[cfg.hidden]), g)?;
    // the output layer starts near zero so the first forward emits an almost
    // neutral mask (~0.5 everywhere); keeping the weights slightly random
    // (instead of exactly zero) preserves gradient flow into conv1 at init
    let bound2 = 1e-2 / (cfg.hidden as f64).sqrt();
    let n2 = cfg.hidden * c;
    store.insert(
        "hmg.conv2.w",
        Tensor::new(
            vec![1, 1, cfg.hidden, c],
            (0..n2).map(|_| T::from_f64c(rng.gen_range(-bound2..bound2))).collect(),
        )?,
        g,
    )?;
    store.insert("hmg.conv2.b", Tensor::zeros(&[c]), g)?;
    Ok(())
}

/// Reshape each gated block's patch features to [h, w, c] (class token is
/// already excluded from `patch_features`) and concatenate along channels
/// in ascending block order -> [h, w, k*c].
pub fn gather_features<T: Scalar>(
    g: &mut Graph<T>,
    enc: &EncoderConfig,
    state: &EncoderState,
    gate: &[usize],
) -> Result<Var, DpmError> {
    let (gh, gw) = enc.grid();
    let c = enc.dim;
    let mut maps = Vec::with_capacity(gate.len());
    for &l in gate {
        if l == 0 || l > state.patch_features.len() {
            return Err(DpmError::invalid("hmg_gate", format!("block {l} not available")));
        }
        let f = state.patch_features[l - 1];
        let d = g.value(f).shape()[0];
        if d != gh * gw {
            return Err(DpmError::shape(
                "gather_features",
                format!("D={d} does not factor into grid {gh}x{gw}"),
            ));
        }
        maps.push(g.reshape(f, &[gh, gw, c])?);
    }
    g.concat(2, &maps)
}

/// Conv stack, global spatial average pool, sigmoid -> mask in (0,1)^c.
pub fn generate_mask<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &MaskGeneratorConfig,
    stacked: Var,
) -> Result<Var, DpmError> {
    let pad = cfg.kernel / 2;
    let h = g.conv2d(stacked, b.get("hmg.conv1.w"), b.get("hmg.conv1.b"), pad)?;
    let h = g.gelu(h)?;
    let h = g.conv2d(h, b.get("hmg.conv2.w"), b.get("hmg.conv2.b"), 0)?;
    let shape = g.value(h).shape().to_vec();
    let (gh, gw, c) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(h, &[gh * gw, c])?;
    let pooled = g.mean_axis0(flat)?;
    g.sigmoid(pooled)
}

/// Row-extended Hadamard product: every class row of the prototype matrix
/// is multiplied by the per-sample mask.
pub fn apply_mask<T: Scalar>(g: &mut Graph<T>, prototypes: Var, mask: Var) -> Result<Var, DpmError> {
    g.mul_row(prototypes, mask)
}
