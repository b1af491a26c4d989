//! Dynamic node generation: fuse the static node embedding with the
//! previous hidden state through a time-based gate.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

/// Parameters of one side's dynamic node generator.
#[derive(Debug, Clone, Copy)]
pub struct DngVars {
    /// Time gate pool, `[2*d_t, d_s]`.
    pub gamma_pool: Var,
    /// Hidden-to-embedding map, `[d_H, d_s]` plus `[d_s]` bias.
    pub fc_h_weight: Var,
    pub fc_h_bias: Var,
}

/// Raw dynamic node embedding `N_t = gamma ⊙ N + (1 - gamma) ⊙ FC_H(H_{t-1})`.
///
/// `gamma = sigmoid(T_hat · Gamma)` is `[B, d_s]` and broadcasts over the
/// node axis. Returns `(N_t, gamma)`; the gate is exposed for tests.
pub fn dynamic_node_embed<E: Element>(
    g: &mut Graph<E>,
    t_hat: Var,
    h_prev: Var,
    n_static: Var,
    vars: &DngVars,
) -> Result<(Var, Var)> {
    let (b2, dt2) = {
        let s = g.shape(t_hat);
        if s.len() != 2 {
            return Err(shape_err("t_hat [B, 2*d_t]", s));
        }
        (s[0], s[1])
    };
    let (n, d_s) = {
        let s = g.shape(n_static);
        if s.len() != 2 {
            return Err(shape_err("n_static [N, d_s]", s));
        }
        (s[0], s[1])
    };
    {
        let s = g.shape(h_prev);
        if s.len() != 3 || s[0] != b2 || s[1] != n {
            return Err(shape_err("h_prev [B, N, d_H]", s));
        }
    }
    {
        let s = g.shape(vars.gamma_pool);
        if s != [dt2, d_s] {
            return Err(shape_err("gamma_pool [2*d_t, d_s]", s));
        }
    }

    let pre = g.matmul(t_hat, vars.gamma_pool);
    let gamma = g.sigmoid(pre); // [B, d_s]
    let gamma_b = g.reshape(gamma, vec![b2, 1, d_s]);
    let h_proj = g.matmul(h_prev, vars.fc_h_weight);
    let h_hat = g.add(h_proj, vars.fc_h_bias); // [B, N, d_s]
    let keep = g.mul(gamma_b, n_static);
    let inv = g.one_minus(gamma_b);
    let blend = g.mul(inv, h_hat);
    Ok((g.add(keep, blend), gamma))
}

fn shape_err(expected: &str, actual: &[usize]) -> Error {
    Error::Shape {
        op: "dynamic_node_embed",
        expected: expected.to_string(),
        actual: format!("{actual:?}"),
    }
}
