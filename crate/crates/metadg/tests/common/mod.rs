//! Straight-line scalar reference implementations of every kernel, kept
//! deliberately naive (nested loops over `Vec<Vec<f64>>`) and independent
//! of the tape-based implementation they check.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use metadg::config::ModelConfig;
use metadg::model::MetaDg;

pub type Mat = Vec<Vec<f64>>;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Named parameter tensors of a model, widened to f64.
pub fn param_map(model: &MetaDg<f64>) -> HashMap<String, (Vec<usize>, Vec<f64>)> {
    model
        .params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                (p.value.shape().to_vec(), p.value.to_f64_vec()),
            )
        })
        .collect()
}

pub struct Fetch<'a>(pub &'a HashMap<String, (Vec<usize>, Vec<f64>)>);

impl Fetch<'_> {
    /// A parameter as a row-major matrix.
    pub fn mat(&self, name: &str) -> Mat {
        let (shape, data) = &self.0[name];
        assert_eq!(shape.len(), 2, "{name} is not a matrix");
        data.chunks_exact(shape[1]).map(|r| r.to_vec()).collect()
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        let (shape, data) = &self.0[name];
        assert_eq!(shape.len(), 1, "{name} is not a vector");
        data.clone()
    }

    /// A rank-3 pool as nested vecs.
    pub fn pool3(&self, name: &str) -> Vec<Mat> {
        let (shape, data) = &self.0[name];
        assert_eq!(shape.len(), 3, "{name} is not rank 3");
        let (a, b, c) = (shape[0], shape[1], shape[2]);
        (0..a)
            .map(|i| {
                (0..b)
                    .map(|j| data[(i * b + j) * c..(i * b + j + 1) * c].to_vec())
                    .collect()
            })
            .collect()
    }
}

/// `x W + b` for row-major `x: [N][in]`, `w: [in][out]`.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| {
                    let mut acc = b[o];
                    for (k, v) in row.iter().enumerate() {
                        acc += v * w[k][o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Dynamic node generation (single batch element): the gate fusion of the
/// static embedding with the projected previous hidden state.
pub fn dng_oracle(
    t_hat: &[f64],
    gamma_pool: &Mat,
    fc_h_w: &Mat,
    fc_h_b: &[f64],
    h_prev: &Mat,
    n_static: &Mat,
) -> Mat {
    let d_s = n_static[0].len();
    let gamma: Vec<f64> = (0..d_s)
        .map(|k| {
            let mut pre = 0.0;
            for (i, v) in t_hat.iter().enumerate() {
                pre += v * gamma_pool[i][k];
            }
            sigmoid(pre)
        })
        .collect();
    let h_hat = affine(h_prev, fc_h_w, fc_h_b);
    n_static
        .iter()
        .zip(&h_hat)
        .map(|(srow, hrow)| {
            (0..d_s)
                .map(|k| gamma[k] * srow[k] + (1.0 - gamma[k]) * hrow[k])
                .collect()
        })
        .collect()
}

/// Cross-attention parameters of one SCE instance.
pub struct SceP {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub w0: Mat,
    pub b0: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
}

impl SceP {
    pub fn fetch(f: &Fetch, branch: &str, side: &str) -> Self {
        let name = |fc: &str, wb: &str| format!("stce.{branch}.{side}.{fc}.{wb}");
        SceP {
            wq: f.mat(&name("fc_q", "weight")),
            bq: f.vec(&name("fc_q", "bias")),
            wk: f.mat(&name("fc_k", "weight")),
            bk: f.vec(&name("fc_k", "bias")),
            wv: f.mat(&name("fc_v", "weight")),
            bv: f.vec(&name("fc_v", "bias")),
            w0: f.mat(&name("mlp0", "weight")),
            b0: f.vec(&name("mlp0", "bias")),
            w1: f.mat(&name("mlp1", "weight")),
            b1: f.vec(&name("mlp1", "bias")),
        }
    }
}

/// Single-head cross-attention of `cur` over `prev` with the residual MLP.
pub fn sce_oracle(cur: &Mat, prev: &Mat, p: &SceP) -> Mat {
    let n = cur.len();
    let d_attn = p.bq.len();
    let q = affine(cur, &p.wq, &p.bq);
    let k = affine(prev, &p.wk, &p.bk);
    let v = affine(prev, &p.wv, &p.bv);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                let mut dot = 0.0;
                for a in 0..d_attn {
                    dot += q[i][a] * k[j][a];
                }
                dot / (d_attn as f64).sqrt()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut fused = vec![0.0; d_attn];
        for j in 0..n {
            let a = exps[j] / z;
            for c in 0..d_attn {
                fused[c] += a * v[j][c];
            }
        }
        let hidden: Vec<f64> = (0..p.b0.len())
            .map(|o| {
                let mut h = p.b0[o];
                for (c, fv) in fused.iter().enumerate() {
                    h += fv * p.w0[c][o];
                }
                h.tanh()
            })
            .collect();
        let row: Vec<f64> = (0..p.b1.len())
            .map(|o| {
                let mut d = p.b1[o];
                for (c, hv) in hidden.iter().enumerate() {
                    d += hv * p.w1[c][o];
                }
                cur[i][o] + d
            })
            .collect();
        out.push(row);
    }
    out
}

/// Gate-blend smoothing against the previous enhanced embedding.
pub fn tce_oracle(cur: &Mat, prev_enh: &Mat, z_prev: &Mat, wz: &Mat, bz: &[f64]) -> Mat {
    let z_hat = affine(z_prev, wz, bz);
    cur.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &c)| {
                    let zh = sigmoid(z_hat[i][k]);
                    zh * prev_enh[i][k] + (1.0 - zh) * c
                })
                .collect()
        })
        .collect()
}

/// Binary support mask from the static embedding.
pub fn static_mask_oracle(n_static: &Mat) -> Mat {
    let n = n_static.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let dot: f64 = n_static[i]
                        .iter()
                        .zip(&n_static[j])
                        .map(|(a, b)| a * b)
                        .sum();
                    if dot > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Edge qualification + adjustment: `(P, phi)`.
pub fn dgq_oracle(
    nm_cur: &Mat,
    nm_prev: &Mat,
    mask: &Mat,
    eps_pool: &[f64],
    delta: f64,
) -> (Mat, Mat) {
    let n = nm_cur.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            let dot: f64 = nm_cur[i]
                .iter()
                .zip(&nm_prev[j])
                .map(|(a, b)| a * b)
                .sum();
            p[i][j] = (mask[i][j] * dot).max(0.0);
            row_sum += p[i][j];
        }
        if row_sum > 0.0 {
            for v in &mut p[i] {
                *v /= row_sum;
            }
        }
    }
    let eps: Vec<f64> = (0..n)
        .map(|i| {
            let dot: f64 = nm_cur[i].iter().zip(eps_pool).map(|(a, b)| a * b).sum();
            p[i][i] * sigmoid(dot)
        })
        .collect();
    let mut m_pos = vec![vec![0.0; n]; n];
    let mut m_neg = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d = p[i][j] - eps[i];
            if d >= 0.0 {
                m_pos[i][j] = sigmoid(d);
            } else {
                m_neg[i][j] = 1.0;
            }
        }
    }
    let cnt = (n * n) as f64;
    let mu: f64 = m_pos.iter().flatten().sum::<f64>() / cnt;
    let var: f64 = m_pos
        .iter()
        .flatten()
        .map(|v| (v - mu) * (v - mu))
        .sum::<f64>()
        / cnt;
    let sd = (var + 1e-5).sqrt();
    let phi = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let beta = ((m_pos[i][j] - mu) / sd * delta).exp();
                    beta * m_pos[i][j] + beta * m_neg[i][j]
                })
                .collect()
        })
        .collect();
    (p, phi)
}

/// Meta-parameter contraction for one batch element:
/// `theta[n][i][o] = sum_k np[n][k] pool[k][i][o]`.
pub fn meta_oracle(np: &Mat, pool: &[Mat]) -> Vec<Mat> {
    let (i_dim, o_dim) = (pool[0].len(), pool[0][0].len());
    np.iter()
        .map(|row| {
            (0..i_dim)
                .map(|i| {
                    (0..o_dim)
                        .map(|o| {
                            row.iter()
                                .enumerate()
                                .map(|(k, v)| v * pool[k][i][o])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Continuous-time encoding.
pub fn ctime_oracle(omega: &[f64], tau: f64) -> Vec<f64> {
    let d_c = omega.len();
    let scale = (1.0 / (2.0 * d_c as f64)).sqrt();
    let mut out = Vec::with_capacity(2 * d_c);
    for &w in omega {
        out.push(scale * (w * tau).cos());
        out.push(scale * (w * tau).sin());
    }
    out
}

/// Dynamic adjacency with the high-rank correction, `phi` adjustment, row
/// normalization and self-loop fallback.
pub fn adjacency_oracle(
    ng: &Mat,
    tau: f64,
    phi: Option<&Mat>,
    omega: &[f64],
    fc_h_w: &Mat,
    fc_h_b: &[f64],
) -> Mat {
    let n = ng.len();
    let d_s = ng[0].len();
    let d_c2 = 2 * omega.len();
    let tc = ctime_oracle(omega, tau);
    let proj = affine(ng, fc_h_w, fc_h_b); // [N][d_s * 2 d_c]
    let nh: Mat = (0..n)
        .map(|i| {
            (0..d_s)
                .map(|k| {
                    (0..d_c2)
                        .map(|c| proj[i][k * d_c2 + c] * tc[c])
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let raw: f64 = ng[i].iter().zip(&ng[j]).map(|(x, y)| x * y).sum();
            let hr: f64 = nh[i].iter().zip(&nh[j]).map(|(x, y)| x * y).sum();
            a[i][j] = raw.max(0.0) * hr.max(0.0);
            if let Some(p) = phi {
                a[i][j] *= p[i][j];
            }
        }
    }
    for i in 0..n {
        let s: f64 = a[i].iter().sum();
        if s > 0.0 {
            for v in &mut a[i] {
                *v /= s;
            }
        } else {
            a[i][i] = 1.0;
        }
    }
    a
}

/// Graph convolution over `{identity, A~}` with node-wise parameters.
pub fn graph_conv_oracle(z: &Mat, a_tilde: &Mat, theta: &[Mat], bias: &Mat) -> Mat {
    let n = z.len();
    let d = z[0].len();
    let o_dim = bias[0].len();
    (0..n)
        .map(|i| {
            let mut stacked = vec![0.0; 2 * d];
            stacked[..d].copy_from_slice(&z[i]);
            for k in 0..d {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a_tilde[i][j] * z[j][k];
                }
                stacked[d + k] = acc;
            }
            (0..o_dim)
                .map(|o| {
                    let mut acc = bias[i][o];
                    for (k, s) in stacked.iter().enumerate() {
                        acc += s * theta[i][k][o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Full encoder rollout (batch size 1, default flags: SCE+TCE on, DGQ on,
/// separate branches, tanh candidate, dual support, dropout 0). Returns
/// the hidden state after every step.
pub struct RolloutOracle<'a> {
    pub fetch: Fetch<'a>,
    pub cfg: &'a ModelConfig,
}

impl RolloutOracle<'_> {
    pub fn run(
        &self,
        x_steps: &[Mat],      // [T][N][3]
        tod: &[usize],        // per step
        dow: &[usize],
    ) -> Vec<Mat> {
        let f = &self.fetch;
        let cfg = self.cfg;
        assert!(cfg.use_sce && cfg.use_tce && cfg.use_dgq);
        assert!(!cfg.joined_embedding && !cfg.tsce_order && !cfg.single_support);
        let n = cfg.num_nodes;
        let d_h = cfg.d_hidden;

        let n_static = f.mat("node_static");
        let tod_pool = f.mat("tod_pool");
        let dow_pool = f.mat("dow_pool");
        let omega = f.vec("ctime_omega");
        let mask = static_mask_oracle(&n_static);

        let emb = |t: usize| -> Vec<f64> {
            let mut e = tod_pool[tod[t]].clone();
            e.extend_from_slice(&dow_pool[dow[t]]);
            e
        };
        let anchor = emb(0);

        let gamma_pool = f.mat("dng.enc.gamma_pool");
        let dng_w = f.mat("dng.enc.fc_h.weight");
        let dng_b = f.vec("dng.enc.fc_h.bias");
        let sce_p = SceP::fetch(f, "p", "enc");
        let sce_g = SceP::fetch(f, "g", "enc");
        let sce_m = SceP::fetch(f, "m", "enc");
        let tce_w: Vec<Mat> = ["p", "g", "m"]
            .iter()
            .map(|br| f.mat(&format!("stce.{br}.enc.fc_z.weight")))
            .collect();
        let tce_b: Vec<Vec<f64>> = ["p", "g", "m"]
            .iter()
            .map(|br| f.vec(&format!("stce.{br}.enc.fc_z.bias")))
            .collect();
        let eps_pool = f.vec("dgq.enc.eps_pool");
        let adj_w = f.mat("cell.enc.fc_h.weight");
        let adj_b = f.vec("cell.enc.fc_h.bias");
        let theta_pools: Vec<Vec<Mat>> = ["z", "r", "c"]
            .iter()
            .map(|gt| f.pool3(&format!("cell.enc.theta_{gt}")))
            .collect();
        let bias_pools: Vec<Mat> = ["z", "r", "c"]
            .iter()
            .map(|gt| f.mat(&format!("cell.enc.bias_{gt}")))
            .collect();

        let mut h = vec![vec![0.0; d_h]; n];
        let mut z_prev: Option<Mat> = None;
        let mut prev_raw = [n_static.clone(), n_static.clone(), n_static.clone()];
        let mut prev_enh = prev_raw.clone();
        let mut hiddens = Vec::new();

        for (t_idx, x_t) in x_steps.iter().enumerate() {
            let t = t_idx + 1;
            let mut t_hat = anchor.clone();
            t_hat.extend(emb(t_idx));

            let n_t = dng_oracle(&t_hat, &gamma_pool, &dng_w, &dng_b, &h, &n_static);

            let nm_lookback = prev_enh[2].clone();
            let mut outs: Vec<Mat> = Vec::with_capacity(3);
            for (bi, sce_params) in [&sce_p, &sce_g, &sce_m].iter().enumerate() {
                let fused = sce_oracle(&n_t, &prev_raw[bi], sce_params);
                let out = if t == 1 {
                    fused
                } else {
                    tce_oracle(
                        &fused,
                        &prev_enh[bi],
                        z_prev.as_ref().unwrap(),
                        &tce_w[bi],
                        &tce_b[bi],
                    )
                };
                prev_raw[bi] = n_t.clone();
                prev_enh[bi] = out.clone();
                outs.push(out);
            }
            let (np, ng, nm) = (&outs[0], &outs[1], &outs[2]);

            let (_p, phi) = dgq_oracle(nm, &nm_lookback, &mask, &eps_pool, cfg.delta_scale);
            let a_tilde = adjacency_oracle(ng, t as f64, Some(&phi), &omega, &adj_w, &adj_b);

            // gates
            let cat = |a: &Mat, b: &Mat| -> Mat {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let mut row = x.clone();
                        row.extend_from_slice(y);
                        row
                    })
                    .collect()
            };
            let zr_in = cat(x_t, &h);
            let gate = |pool_idx: usize, input: &Mat| -> Mat {
                let theta = meta_oracle(np, &theta_pools[pool_idx]);
                let bias: Mat = np
                    .iter()
                    .map(|row| {
                        (0..d_h)
                            .map(|o| {
                                row.iter()
                                    .enumerate()
                                    .map(|(k, v)| v * bias_pools[pool_idx][k][o])
                                    .sum()
                            })
                            .collect()
                    })
                    .collect();
                graph_conv_oracle(input, &a_tilde, &theta, &bias)
            };
            let z: Mat = gate(0, &zr_in)
                .into_iter()
                .map(|row| row.into_iter().map(sigmoid).collect())
                .collect();
            let r: Mat = gate(1, &zr_in)
                .into_iter()
                .map(|row| row.into_iter().map(sigmoid).collect())
                .collect();
            let rh: Mat = r
                .iter()
                .zip(&h)
                .map(|(rr, hh)| rr.iter().zip(hh).map(|(a, b)| a * b).collect())
                .collect();
            let c_in = cat(x_t, &rh);
            let c: Mat = gate(2, &c_in)
                .into_iter()
                .map(|row| row.into_iter().map(f64::tanh).collect())
                .collect();
            h = (0..n)
                .map(|i| {
                    (0..d_h)
                        .map(|k| z[i][k] * h[i][k] + (1.0 - z[i][k]) * c[i][k])
                        .collect()
                })
                .collect();
            z_prev = Some(z);
            hiddens.push(h.clone());
        }
        hiddens
    }
}

/// Flatten a nested matrix for comparisons.
pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().cloned().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
