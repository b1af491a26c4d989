//! Spatio-temporal correlation enhancement of dynamic node embeddings.
//!
//! SCE pulls global information from the previous step's node
//! representations through single-head cross-attention; TCE smooths across
//! steps with a gate derived from the recurrent update gate; STCE chains
//! them (fuse before smooth by default, the reverse order behind the
//! `tsce_order` flag). Three independent instances (p/g/m) feed the
//! meta-parameters, the raw adjacency, and the edge qualification.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Array, Element, Graph, Var};

/// Cross-attention + MLP parameters of one branch side.
#[derive(Debug, Clone, Copy)]
pub struct SceVars {
    pub fc_q_weight: Var,
    pub fc_q_bias: Var,
    pub fc_k_weight: Var,
    pub fc_k_bias: Var,
    pub fc_v_weight: Var,
    pub fc_v_bias: Var,
    pub mlp0_weight: Var,
    pub mlp0_bias: Var,
    /// Zero-initialized so the residual starts as the identity.
    pub mlp1_weight: Var,
    pub mlp1_bias: Var,
}

/// Update-gate projection of one branch side.
#[derive(Debug, Clone, Copy)]
pub struct TceVars {
    pub fc_z_weight: Var,
    pub fc_z_bias: Var,
}

/// Enhancement switches, lifted from the model config.
#[derive(Debug, Clone, Copy)]
pub struct StceFlags {
    pub use_sce: bool,
    pub use_tce: bool,
    pub tsce_order: bool,
}

/// Variational dropout masks for one branch, sampled once per window and
/// reused at every step. Already scaled by 1/(1-rate).
#[derive(Debug, Clone)]
pub struct DropoutMasks<E: Element> {
    /// Applied to the attention output entering the MLP, `[B, 1, d_attn]`.
    pub m0: Array<E>,
    /// Applied to the hidden MLP activation, `[B, 1, d_s]`.
    pub m1: Array<E>,
}

/// Sample per-window masks. A rate of 0 yields `None` (no-op).
pub fn sample_masks<E: Element>(
    rng: &mut Rng,
    batch: usize,
    d_attn: usize,
    d_s: usize,
    rate: f64,
) -> Option<DropoutMasks<E>> {
    if rate <= 0.0 {
        return None;
    }
    let scale = 1.0 / (1.0 - rate);
    let mut draw = |dim: usize| {
        let mut m = Array::<E>::zeros(&[batch, 1, dim]);
        for v in m.data_mut() {
            if !rng.bernoulli(rate) {
                *v = E::from_f64(scale);
            }
        }
        m
    };
    Some(DropoutMasks {
        m0: draw(d_attn),
        m1: draw(d_s),
    })
}

/// Rolling state of one branch across the window.
#[derive(Debug, Clone)]
pub struct BranchState<E: Element> {
    /// Raw embedding of the previous step (N_static at window start).
    pub prev_raw: Var,
    /// Enhanced embedding of the previous step (N_static at window start).
    pub prev_enh: Var,
    pub masks: Option<DropoutMasks<E>>,
}

impl<E: Element> BranchState<E> {
    /// Window-start state: both lookbacks are the static embedding.
    pub fn at_window_start(
        g: &mut Graph<E>,
        n_static: Var,
        batch: usize,
        masks: Option<DropoutMasks<E>>,
    ) -> Self {
        let s = g.shape(n_static).to_vec();
        let init = g.reshape(n_static, vec![1, s[0], s[1]]);
        let zeros = g.constant(Array::zeros(&[batch, s[0], s[1]]));
        let init_b = g.add(init, zeros); // broadcast to [B, N, d_s]
        BranchState {
            prev_raw: init_b,
            prev_enh: init_b,
            masks,
        }
    }
}

/// Spatial correlation enhancement: residual cross-attention of the current
/// embedding over the previous step's. Returns `(enhanced, alpha)`.
pub fn sce<E: Element>(
    g: &mut Graph<E>,
    n_cur: Var,
    n_prev: Var,
    vars: &SceVars,
    masks: Option<&DropoutMasks<E>>,
) -> Result<(Var, Var)> {
    let sc = g.shape(n_cur).to_vec();
    let sp = g.shape(n_prev).to_vec();
    if sc.len() != 3 || sp != sc {
        return Err(Error::Shape {
            op: "sce",
            expected: format!("n_prev with shape {sc:?}"),
            actual: format!("{sp:?}"),
        });
    }
    let d_attn = g.shape(vars.fc_q_weight)[1];

    let q = affine(g, n_cur, vars.fc_q_weight, vars.fc_q_bias);
    let k = affine(g, n_prev, vars.fc_k_weight, vars.fc_k_bias);
    let v = affine(g, n_prev, vars.fc_v_weight, vars.fc_v_bias);

    let scores = g.matmul_nt(q, k);
    let scaled = g.mul_scalar(scores, 1.0 / (d_attn as f64).sqrt());
    let alpha = g.softmax_last(scaled); // [B, N, N]
    let mut fused = g.matmul(alpha, v); // [B, N, d_attn]

    if let Some(m) = masks {
        let m0 = g.constant(m.m0.clone());
        fused = g.mul(fused, m0);
    }
    let h_pre = affine(g, fused, vars.mlp0_weight, vars.mlp0_bias);
    let mut h = g.tanh(h_pre);
    if let Some(m) = masks {
        let m1 = g.constant(m.m1.clone());
        h = g.mul(h, m1);
    }
    let delta = affine(g, h, vars.mlp1_weight, vars.mlp1_bias);
    Ok((g.add(n_cur, delta), alpha))
}

/// Temporal correlation enhancement: gate-blend the previous enhanced
/// embedding with the current one. Returns `(blended, z_hat)`.
pub fn tce<E: Element>(
    g: &mut Graph<E>,
    n_cur: Var,
    n_prev_enh: Var,
    z_prev: Var,
    vars: &TceVars,
) -> Result<(Var, Var)> {
    let sc = g.shape(n_cur).to_vec();
    if g.shape(n_prev_enh) != sc.as_slice() {
        return Err(Error::Shape {
            op: "tce",
            expected: format!("n_prev_enh with shape {sc:?}"),
            actual: format!("{:?}", g.shape(n_prev_enh)),
        });
    }
    let pre = affine(g, z_prev, vars.fc_z_weight, vars.fc_z_bias);
    let z_hat = g.sigmoid(pre); // [B, N, d_s]
    let keep = g.mul(z_hat, n_prev_enh);
    let inv = g.one_minus(z_hat);
    let new = g.mul(inv, n_cur);
    Ok((g.add(keep, new), z_hat))
}

/// One STCE step at window position `t` (1-based across encoder + decoder).
///
/// `t = 1` applies SCE only and seeds the enhanced lookback; later steps
/// chain SCE and TCE in the configured order. Disabled stages pass their
/// input through; with both disabled this is the identity.
#[allow(clippy::too_many_arguments)]
pub fn stce_step<E: Element>(
    g: &mut Graph<E>,
    flags: StceFlags,
    sce_vars: Option<&SceVars>,
    tce_vars: Option<&TceVars>,
    state: &mut BranchState<E>,
    n_t: Var,
    z_prev: Option<Var>,
    t: usize,
) -> Result<Var> {
    if t == 0 {
        return Err(Error::Shape {
            op: "stce_step",
            expected: "step index t >= 1".into(),
            actual: "0".into(),
        });
    }
    let run_sce = |g: &mut Graph<E>, cur: Var, state: &BranchState<E>| -> Result<Var> {
        let vars = sce_vars.ok_or(Error::Shape {
            op: "stce_step",
            expected: "SCE parameters when use_sce".into(),
            actual: "none".into(),
        })?;
        Ok(sce(g, cur, state.prev_raw, vars, state.masks.as_ref())?.0)
    };
    let run_tce = |g: &mut Graph<E>, cur: Var, state: &BranchState<E>| -> Result<Var> {
        let vars = tce_vars.ok_or(Error::Shape {
            op: "stce_step",
            expected: "TCE parameters when use_tce".into(),
            actual: "none".into(),
        })?;
        let z = z_prev.ok_or(Error::Shape {
            op: "stce_step",
            expected: "previous update gate for TCE at t >= 2".into(),
            actual: "none".into(),
        })?;
        Ok(tce(g, cur, state.prev_enh, z, vars)?.0)
    };

    let out = if t == 1 {
        if flags.use_sce {
            run_sce(g, n_t, state)?
        } else {
            n_t
        }
    } else if flags.tsce_order {
        // smooth before fuse
        let smoothed = if flags.use_tce {
            run_tce(g, n_t, state)?
        } else {
            n_t
        };
        if flags.use_sce {
            run_sce(g, smoothed, state)?
        } else {
            smoothed
        }
    } else {
        // fuse before smooth
        let fused = if flags.use_sce {
            run_sce(g, n_t, state)?
        } else {
            n_t
        };
        if flags.use_tce {
            run_tce(g, fused, state)?
        } else {
            fused
        }
    };
    state.prev_raw = n_t;
    state.prev_enh = out;
    Ok(out)
}

fn affine<E: Element>(g: &mut Graph<E>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add(y, b)
}
