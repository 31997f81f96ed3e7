//! Training objectives: cosine-softmax classification on the shared
//! prototype bank, its angular-margin variant on per-sample masked
//! prototypes, batch-hard triplet mining, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::DpmError;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Which branch gets the angular margin: S = plain cosine softmax,
/// A = margin inserted at the target logit. First letter is the plain
/// (unmasked) branch, second the masked branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BranchLosses {
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "AA")]
    Aa,
    #[default]
    #[serde(rename = "SA")]
    Sa,
}

impl BranchLosses {
    /// (plain branch margin?, masked branch margin?)
    pub fn margins(self) -> (bool, bool) {
        match self {
            BranchLosses::Ss => (false, false),
            BranchLosses::Aa => (true, true),
            BranchLosses::Sa => (false, true),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub margin_m: f64,
    pub scale_s: f64,
    pub triplet_margin: f64,
    pub branch_losses: BranchLosses,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.1,
            margin_m: 0.5,
            scale_s: 30.0,
            triplet_margin: 0.3,
            branch_losses: BranchLosses::Sa,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DpmError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DpmError::invalid("alpha", format!("{} not in [0,1]", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(DpmError::invalid("beta", format!("{} < 0", self.beta)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin_m) {
            return Err(DpmError::invalid(
                "margin_m",
                format!("{} not in [0, pi/2)", self.margin_m),
            ));
        }
        if self.scale_s <= 0.0 {
            return Err(DpmError::invalid("scale_s", format!("{} <= 0", self.scale_s)));
        }
        if self.triplet_margin < 0.0 {
            return Err(DpmError::invalid(
                "triplet_margin",
                format!("{} < 0", self.triplet_margin),
            ));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<(), DpmError> {
    if labels.is_empty() {
        return Err(DpmError::invalid("labels", "empty batch".to_string()));
    }
    if labels.len() != batch {
        return Err(DpmError::invalid(
            "labels",
            format!("{} labels for batch {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DpmError::invalid("labels", format!("label {bad} >= C={classes}")));
    }
    Ok(())
}

/// Mean cross-entropy with cosine logits s * cos(x_i, W_p[j]), no margin.
pub fn cls_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    w_p: Var,
    labels: &[usize],
    s: T,
) -> Result<Var, DpmError> {
    let b = g.value(features).shape()[0];
    check_labels(labels, b, g.value(w_p).shape()[0])?;
    let fx = g.l2norm_rows(features)?;
    let wn = g.l2norm_rows(w_p)?;
    let cosines = g.matmul_nt(fx, wn)?;
    let logits = g.scale(cosines, s)?;
    let lse = g.logsumexp_rows(logits)?;
    let target = g.row_gather(logits, labels)?;
    let per_sample = g.sub(lse, target)?;
    g.mean_all(per_sample)
}

/// Angular-margin cross-entropy where each sample classifies against its
/// own masked prototype matrix: the target logit is s * cos(theta_y + m),
/// non-target logits are plain scaled cosines.
pub fn masked_cls_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    w_mp: &[Var],
    labels: &[usize],
    m: T,
    s: T,
) -> Result<Var, DpmError> {
    let b = g.value(features).shape()[0];
    if w_mp.is_empty() {
        return Err(DpmError::invalid("w_mp", "empty batch".to_string()));
    }
    if w_mp.len() != b {
        return Err(DpmError::invalid(
            "w_mp",
            format!("{} prototype sets for batch {b}", w_mp.len()),
        ));
    }
    let classes = g.value(w_mp[0]).shape()[0];
    check_labels(labels, b, classes)?;
    let mut sims = Vec::with_capacity(b);
    for (i, &wi) in w_mp.iter().enumerate() {
        let xi = g.slice(features, 0, i, 1)?;
        let xn = g.l2norm_rows(xi)?;
        let wn = g.l2norm_rows(wi)?;
        sims.push(g.matmul_nt(xn, wn)?);
    }
    margin_ce_from_sims(g, &sims, labels, m, s)
}

/// Angular-margin cross-entropy on precomputed per-sample similarity rows
/// (each [1, C], values in [-1, 1]). This is the core both branches share:
/// the model feeds it whichever masked/normalized similarities the active
/// variant produces.
pub fn margin_ce_from_sims<T: Scalar>(
    g: &mut Graph<T>,
    sims: &[Var],
    labels: &[usize],
    m: T,
    s: T,
) -> Result<Var, DpmError> {
    if sims.is_empty() {
        return Err(DpmError::invalid("sims", "empty batch".to_string()));
    }
    let classes = g.value(sims[0]).shape()[1];
    check_labels(labels, sims.len(), classes)?;
    let md = m.to_f64c();
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&md) {
        return Err(DpmError::invalid("margin_m", format!("{md} not in [0, pi/2)")));
    }
    let mut per_sample = Vec::with_capacity(sims.len());
    for (&row, &y) in sims.iter().zip(labels) {
        let logits = g.scale(row, s)?;
        // swap the target logit for its margin-shifted version by adding
        // (s*cos(theta+m) - s*cos(theta)) on a one-hot row
        let cos_y = g.row_gather(row, &[y])?;
        let theta = g.acos_clamped(cos_y)?;
        let shifted = g.add_const(theta, m)?;
        let cos_shifted = g.cos(shifted)?;
        let margin_logit = g.scale(cos_shifted, s)?;
        let plain_logit = g.row_gather(logits, &[y])?;
        let delta = g.sub(margin_logit, plain_logit)?;
        let mut onehot = vec![T::zero(); classes];
        onehot[y] = T::one();
        let bump = g.scalar_times(delta, &Tensor::new(vec![1, classes], onehot)?)?;
        let adjusted = g.add(logits, bump)?;
        let lse = g.logsumexp_rows(adjusted)?;
        let target = g.row_gather(adjusted, &[y])?;
        per_sample.push(g.sub(lse, target)?);
    }
    let all = g.concat(0, &per_sample)?;
    g.mean_all(all)
}

const TRIPLET_EPS: f64 = 1e-12;

/// Batch-hard triplet loss: per anchor, the farthest same-identity sample
/// and the nearest other-identity sample, hinged at `margin`. Euclidean
/// distance on the raw (unnormalized) features. Anchors without a positive
/// are skipped.
pub fn triplet_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    labels: &[usize],
    margin: T,
) -> Result<Var, DpmError> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DpmError::shape(
            "triplet_loss",
            format!("features {:?} with {} labels", shape, labels.len()),
        ));
    }
    let (b, c) = (shape[0], shape[1]);
    // mine hardest pairs on forward values; only the chosen pairs enter
    // the differentiable expression
    let vals = g.value(features).data().to_vec();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for p in 0..c {
            let d = vals[i * c + p].to_f64c() - vals[j * c + p].to_f64c();
            s += d * d;
        }
        (s + TRIPLET_EPS).sqrt()
    };
    let mut terms = Vec::new();
    for a in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) else {
            continue;
        };
        let pair_dist = |g: &mut Graph<T>, j: usize| -> Result<Var, DpmError> {
            let fa = g.slice(features, 0, a, 1)?;
            let fj = g.slice(features, 0, j, 1)?;
            let diff = g.sub(fa, fj)?;
            let sq = g.mul(diff, diff)?;
            let ss = g.sum_all(sq)?;
            let eps = g.add_const(ss, T::from_f64c(TRIPLET_EPS))?;
            g.sqrt(eps)
        };
        let d_ap = pair_dist(g, p)?;
        let d_an = pair_dist(g, n)?;
        let gap = g.sub(d_ap, d_an)?;
        let hinge_in = g.add_const(gap, margin)?;
        let hinged = g.relu(hinge_in)?;
        terms.push(g.reshape(hinged, &[1])?);
    }
    if terms.is_empty() {
        return Err(DpmError::invalid(
            "triplet_loss",
            "no anchor has both a positive and a negative".to_string(),
        ));
    }
    let all = g.concat(0, &terms)?;
    g.mean_all(all)
}

/// The four components of the overall objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: Var,
    pub masked_cls: Var,
    pub hem: Var,
    pub triplet: Var,
}

/// alpha * L_cls + (1 - alpha) * L_Mcls + beta * L_hem + L_tri.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    parts: LossParts,
    weights: &LossWeights,
) -> Result<Var, DpmError> {
    weights.validate()?;
    for (name, v) in [
        ("L_cls", parts.cls),
        ("L_Mcls", parts.masked_cls),
        ("L_hem", parts.hem),
        ("L_tri", parts.triplet),
    ] {
        if !g.value(v).is_finite() {
            return Err(DpmError::non_finite(name));
        }
    }
    let a = T::from_f64c(weights.alpha);
    let wc = g.scale(parts.cls, a)?;
    let wm = g.scale(parts.masked_cls, T::one() - a)?;
    let wh = g.scale(parts.hem, T::from_f64c(weights.beta))?;
    let s1 = g.add(wc, wm)?;
    let s2 = g.add(s1, wh)?;
    g.add(s2, parts.triplet)
}
