//! Head enrich module: class-token-to-patch attention per head in the last
//! block, and the orthonormality penalty that pushes heads apart.

use crate::error::DpmError;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Per-head softmax attention from the class-token query to the image-patch
/// keys (the class token's own key is excluded by construction): A is [N, D].
pub fn class_attention<T: Scalar>(
    g: &mut Graph<T>,
    class_query: Var,
    patch_keys: Var,
    heads: usize,
) -> Result<Var, DpmError> {
    let qs = g.value(class_query).shape().to_vec();
    let ks = g.value(patch_keys).shape().to_vec();
    if qs.len() != 2 || qs[0] != 1 || ks.len() != 2 || ks[1] != qs[1] {
        return Err(DpmError::shape(
            "class_attention",
            format!("q {:?}, K {:?}", qs, ks),
        ));
    }
    let c = qs[1];
    if heads == 0 || c % heads != 0 {
        return Err(DpmError::shape(
            "class_attention",
            format!("dim {c} not divisible by {heads} heads"),
        ));
    }
    let hd = c / heads;
    let scale = T::one() / T::from_f64c((hd as f64).sqrt());
    let mut rows = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(class_query, 1, h * hd, hd)?;
        let kh = g.slice(patch_keys, 1, h * hd, hd)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, scale)?;
        rows.push(g.softmax_rows(scaled)?);
    }
    g.concat(0, &rows)
}

/// Squared Frobenius norm of (normalized A)(normalized A)^T minus identity.
/// Zero exactly when the heads' normalized attention rows are orthogonal.
pub fn hem_loss<T: Scalar>(g: &mut Graph<T>, attention: Var) -> Result<Var, DpmError> {
    let n = g.value(attention).shape()[0];
    let normed = g.l2norm_rows(attention)?;
    let gram = g.matmul_nt(normed, normed)?;
    let eye = g.constant(Tensor::eye(n));
    let diff = g.sub(gram, eye)?;
    let sq = g.mul(diff, diff)?;
    g.sum_all(sq)
}

/// Cross-correlation matrix between heads' normalized attention rows, for
/// offline inspection.
pub fn diag_head_crosscorr<T: Scalar>(
    g: &mut Graph<T>,
    attention: Var,
) -> Result<Tensor<T>, DpmError> {
    let normed = g.l2norm_rows(attention)?;
    let gram = g.matmul_nt(normed, normed)?;
    Ok(g.value(gram).clone())
}

/// Mean absolute off-diagonal entry of a square matrix.
pub fn mean_off_diagonal<T: Scalar>(m: &Tensor<T>) -> f64 {
    let n = m.shape()[0];
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.data()[i * n + j].to_f64c().abs();
            }
        }
    }
    s / ((n * (n - 1)) as f64)
}
