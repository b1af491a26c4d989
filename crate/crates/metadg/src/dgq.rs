//! Dynamic graph qualification: score cross-step edge reliability and turn
//! it into a multiplicative edge-weight adjustment.
//!
//! Edges whose qualification clears a learned node-wise threshold are
//! strengthened, the rest weakened, with the scaling coefficients taken
//! from an exponentiated instance-normalized positive mask. The diagonal
//! never lands in the weakened class: the threshold is the diagonal
//! qualification scaled by a sigmoid, which is strictly below one.

use crate::error::{Error, Result};
use crate::tensor::{Array, Element, Graph, Var};

/// Variance floor of the instance normalization inside the scaler.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Binary support mask from the static node embedding: `m_ij = 1` iff
/// `(N N^T)_ij > 0`. Returned with the smallest |inner product|, which
/// measures the distance to a sign flip (useful for gradient checks).
///
/// The mask is a plain array: the binarization is non-differentiable and is
/// treated as a constant of the forward pass.
pub fn static_mask<E: Element>(n_static: &Array<E>) -> (Array<E>, f64) {
    assert_eq!(n_static.ndim(), 2, "static_mask wants [N, d_s]");
    let (n, d) = (n_static.shape()[0], n_static.shape()[1]);
    let mut mask = Array::<E>::zeros(&[n, n]);
    let mut margin = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let mut dot = E::ZERO;
            for k in 0..d {
                dot += n_static.data()[i * d + k] * n_static.data()[j * d + k];
            }
            margin = margin.min(dot.to_f64().abs());
            if dot > E::ZERO {
                mask.data_mut()[i * n + j] = E::ONE;
            }
        }
    }
    (mask, margin)
}

/// Row-normalized rectified cross-step Gram matrix `P_t`; all-zero rows
/// stay zero. The second value is the smallest nonzero |entry| before
/// rectification (distance to a ReLU kink).
pub fn edge_qualification<E: Element>(
    g: &mut Graph<E>,
    nm_cur: Var,
    nm_prev: Var,
    mask: &Array<E>,
) -> Result<(Var, f64)> {
    let sc = g.shape(nm_cur).to_vec();
    if g.shape(nm_prev) != sc.as_slice() {
        return Err(Error::Shape {
            op: "edge_qualification",
            expected: format!("nm_prev with shape {sc:?}"),
            actual: format!("{:?}", g.shape(nm_prev)),
        });
    }
    if sc.len() != 3 || mask.shape() != [sc[1], sc[1]] {
        return Err(Error::Shape {
            op: "edge_qualification",
            expected: format!("[N, N] mask for N = {}", sc[1]),
            actual: format!("{:?}", mask.shape()),
        });
    }
    let cross = g.matmul_nt(nm_cur, nm_prev); // [B, N, N]
    let mask_c = g.constant(mask.clone());
    let masked = g.mul(cross, mask_c);
    let mut kink = f64::INFINITY;
    for &v in g.value(masked).data() {
        let a = v.to_f64().abs();
        if a > 0.0 {
            kink = kink.min(a);
        }
    }
    let rect = g.relu(masked);
    Ok((row_normalize_keep_zero(g, rect), kink))
}

/// Row-normalize a non-negative matrix; rows summing to zero are all-zero
/// already and stay that way.
pub fn row_normalize_keep_zero<E: Element>(g: &mut Graph<E>, x: Var) -> Var {
    let s = g.sum_last_keep(x);
    // substitute 1 for zero row sums; those rows are identically zero
    let sv = g.value(s).clone();
    let subst = sv.map(|v| if v > E::ZERO { E::ZERO } else { E::ONE });
    let subst_c = g.constant(subst);
    let denom = g.add(s, subst_c);
    g.div(x, denom)
}

/// Everything [`adjust_weights`] produces besides `phi` itself.
pub struct Qualification<E: Element> {
    /// Edge-weight adjustment matrix, `[B, N, N]`, strictly positive.
    pub phi: Var,
    /// Node-wise thresholds, `[B, N]`.
    pub eps: Var,
    /// Strengthened-edge mask (sigmoid-valued on its support), `[B, N, N]`.
    pub m_pos: Var,
    /// Weakened-edge indicator (constant 0/1), `[B, N, N]`.
    pub m_neg: Array<E>,
    /// Scaling coefficients `exp(InstanceNorm(M_pos) * delta)`, `[B, N, N]`.
    pub beta: Var,
    /// Smallest |P_ij - eps_i|: distance to a classification flip.
    pub tie_margin: f64,
}

/// Classify edges against the node-wise threshold and produce the
/// edge-weight adjustment matrix. The default scales both classes by the
/// adaptive coefficients; `fixed_weaken = Some(c)` multiplies the weakened
/// class by the constant `c` instead.
pub fn adjust_weights<E: Element>(
    g: &mut Graph<E>,
    p: Var,
    nm_cur: Var,
    eps_pool: Var,
    delta: f64,
) -> Result<Qualification<E>> {
    adjust_weights_with(g, p, nm_cur, eps_pool, delta, None)
}

/// [`adjust_weights`] with an explicit weakening mode.
pub fn adjust_weights_with<E: Element>(
    g: &mut Graph<E>,
    p: Var,
    nm_cur: Var,
    eps_pool: Var,
    delta: f64,
    fixed_weaken: Option<f64>,
) -> Result<Qualification<E>> {
    let sp = g.shape(p).to_vec();
    if sp.len() != 3 || sp[1] != sp[2] {
        return Err(Error::Shape {
            op: "adjust_weights",
            expected: "P with shape [B, N, N]".into(),
            actual: format!("{sp:?}"),
        });
    }
    let (b, n) = (sp[0], sp[1]);
    let d_s = g.shape(nm_cur)[2];
    if g.shape(eps_pool) != [d_s] && g.shape(eps_pool) != [d_s, 1] {
        return Err(Error::Shape {
            op: "adjust_weights",
            expected: format!("eps pool of length d_s = {d_s}"),
            actual: format!("{:?}", g.shape(eps_pool)),
        });
    }

    // node-wise threshold: eps_i = P_(i,i) * sigmoid(Nm_i . eps_pool)
    let diag = g.diag_last2(p); // [B, N]
    let pool_col = g.reshape(eps_pool, vec![d_s, 1]);
    let pre = g.matmul(nm_cur, pool_col); // [B, N, 1]
    let pre_flat = g.reshape(pre, vec![b, n]);
    let gate = g.sigmoid(pre_flat);
    let eps = g.mul(diag, gate); // [B, N]
    let eps_col = g.reshape(eps, vec![b, n, 1]);

    let margin = g.sub(p, eps_col); // [B, N, N]

    // classification is a constant of the forward pass
    let mv = g.value(margin).clone();
    let mut tie_margin = f64::INFINITY;
    for &v in mv.data() {
        tie_margin = tie_margin.min(v.to_f64().abs());
    }
    let pos_sel = mv.map(|v| if v >= E::ZERO { E::ONE } else { E::ZERO });
    let m_neg = pos_sel.map(|v| E::ONE - v);
    let pos_sel_c = g.constant(pos_sel);

    let sig = g.sigmoid(margin);
    let m_pos = g.mul(sig, pos_sel_c);

    // beta = exp(InstanceNorm(M_pos) * delta), statistics over the N*N
    // entries of each batch instance
    let mu = g.mean_keep(m_pos, &[1, 2]);
    let centered = g.sub(m_pos, mu);
    let sq = g.mul(centered, centered);
    let var = g.mean_keep(sq, &[1, 2]);
    let var_floored = g.add_scalar(var, INSTANCE_NORM_EPS);
    let sd = g.sqrt(var_floored);
    let normed = g.div(centered, sd);
    let scaled = g.mul_scalar(normed, delta);
    let beta = g.exp(scaled);

    let phi = match fixed_weaken {
        None => {
            let m_neg_c = g.constant(m_neg.clone());
            let support = g.add(m_pos, m_neg_c);
            g.mul(beta, support)
        }
        Some(c) => {
            let strengthened = g.mul(beta, m_pos);
            let shrunk = g.constant(m_neg.map(|v| v * E::from_f64(c)));
            g.add(strengthened, shrunk)
        }
    };

    Ok(Qualification {
        phi,
        eps,
        m_pos,
        m_neg,
        beta,
        tie_margin,
    })
}
