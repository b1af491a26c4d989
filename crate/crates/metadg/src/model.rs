//! The dynamic-graph convolutional recurrent model: per-step meta-parameter
//! generation, dynamic adjacency assembly with a continuous-time high-rank
//! correction, the gated graph-convolutional recurrence, and the
//! encoder–decoder rollout.

use std::collections::HashMap;

use crate::config::{CandidateActivation, ModelConfig};
use crate::data::{Normalizer, WindowBatch};
use crate::dgq;
use crate::dng::{dynamic_node_embed, DngVars};
use crate::embeddings::{continuous_time_encode, enhance_time, init_omegas, Side};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stce::{sample_masks, stce_step, BranchState, SceVars, StceFlags, TceVars};
use crate::tensor::{Array, Element, Graph, Var};

/// Input channels: normalized flow, tod fraction, dow fraction.
pub const INPUT_CHANNELS: usize = 3;

/// A named learnable tensor.
#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Array<E>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// uniform(-1/sqrt(dim), 1/sqrt(dim)) embedding-style
    Embedding(usize),
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) linear-style
    FanIn(usize),
    Zeros,
    /// geometric frequency ladder for the continuous-time encoder
    Omega,
}

/// Human-readable init scheme recorded in every checkpoint manifest.
pub const INIT_SCHEME: &str = "uniform_fan_in; embeddings uniform(+-1/sqrt(dim)); residual mlp1 and biases zero; omegas geometric 1/2016..1/2 cycles/step";

/// The MetaDG forecaster: config plus its parameter bank.
#[derive(Debug)]
pub struct MetaDg<E: Element> {
    pub cfg: ModelConfig,
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

fn branch_names(cfg: &ModelConfig) -> Vec<&'static str> {
    if cfg.joined_embedding {
        vec!["joined"]
    } else if cfg.use_dgq {
        vec!["p", "g", "m"]
    } else {
        vec!["p", "g"]
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d_s = cfg.d_s;
    let d_t = cfg.d_t();
    let d_h = cfg.d_hidden;
    let d_a = cfg.d_attn;
    let d_c = cfg.d_c;
    let n = cfg.num_nodes;
    let support = if cfg.single_support { 1 } else { 2 };
    let gc_in = support * (INPUT_CHANNELS + d_h);

    let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
        ("node_static".into(), vec![n, d_s], Init::Embedding(d_s)),
        ("tod_pool".into(), vec![288, cfg.d_tod], Init::Embedding(cfg.d_tod)),
        ("dow_pool".into(), vec![7, cfg.d_dow], Init::Embedding(cfg.d_dow)),
        ("ctime_omega".into(), vec![d_c], Init::Omega),
    ];
    for side in ["enc", "dec"] {
        specs.push((
            format!("dng.{side}.gamma_pool"),
            vec![2 * d_t, d_s],
            Init::FanIn(2 * d_t),
        ));
        specs.push((format!("dng.{side}.fc_h.weight"), vec![d_h, d_s], Init::FanIn(d_h)));
        specs.push((format!("dng.{side}.fc_h.bias"), vec![d_s], Init::Zeros));
        for br in branch_names(cfg) {
            if cfg.use_sce {
                for fc in ["fc_q", "fc_k", "fc_v"] {
                    specs.push((
                        format!("stce.{br}.{side}.{fc}.weight"),
                        vec![d_s, d_a],
                        Init::FanIn(d_s),
                    ));
                    specs.push((format!("stce.{br}.{side}.{fc}.bias"), vec![d_a], Init::Zeros));
                }
                specs.push((
                    format!("stce.{br}.{side}.mlp0.weight"),
                    vec![d_a, d_s],
                    Init::FanIn(d_a),
                ));
                specs.push((format!("stce.{br}.{side}.mlp0.bias"), vec![d_s], Init::Zeros));
                specs.push((format!("stce.{br}.{side}.mlp1.weight"), vec![d_s, d_s], Init::Zeros));
                specs.push((format!("stce.{br}.{side}.mlp1.bias"), vec![d_s], Init::Zeros));
            }
            if cfg.use_tce {
                specs.push((
                    format!("stce.{br}.{side}.fc_z.weight"),
                    vec![d_h, d_s],
                    Init::FanIn(d_h),
                ));
                specs.push((format!("stce.{br}.{side}.fc_z.bias"), vec![d_s], Init::Zeros));
            }
        }
        if cfg.use_dgq {
            specs.push((format!("dgq.{side}.eps_pool"), vec![d_s], Init::FanIn(d_s)));
        }
        specs.push((
            format!("cell.{side}.fc_h.weight"),
            vec![d_s, d_s * 2 * d_c],
            Init::FanIn(d_s),
        ));
        specs.push((format!("cell.{side}.fc_h.bias"), vec![d_s * 2 * d_c], Init::Zeros));
        for gate in ["z", "r", "c"] {
            specs.push((
                format!("cell.{side}.theta_{gate}"),
                vec![d_s, gc_in, d_h],
                Init::FanIn(gc_in),
            ));
            specs.push((format!("cell.{side}.bias_{gate}"), vec![d_s, d_h], Init::Zeros));
        }
    }
    specs.push(("head.weight".into(), vec![d_h, 1], Init::FanIn(d_h)));
    specs.push(("head.bias".into(), vec![1], Init::Zeros));
    specs
}

impl<E: Element> MetaDg<E> {
    /// Fresh model with seeded initialization (stream `"init"` of the seed).
    pub fn new(cfg: ModelConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stream = rng.fork("init");
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, shape, init) in param_specs(&cfg) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Embedding(dim) | Init::FanIn(dim) => {
                    let bound = 1.0 / (dim as f64).sqrt();
                    (0..len).map(|_| stream.uniform(-bound, bound)).collect()
                }
                Init::Zeros => vec![0.0; len],
                Init::Omega => init_omegas(len),
            };
            index.insert(name.clone(), params.len());
            params.push(Param {
                name,
                value: Array::from_f64(shape, &data),
            });
        }
        Ok(MetaDg { cfg, params, index })
    }

    /// Rebuild a model from checkpointed tensors; names and shapes must
    /// cover the config's parameter set exactly.
    pub fn from_params(cfg: ModelConfig, mut tensors: HashMap<String, Array<E>>) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, shape, _) in param_specs(&cfg) {
            let value = tensors.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{name}`"))
            })?;
            if value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: expected shape {shape:?}, got {:?}",
                    value.shape()
                )));
            }
            index.insert(name.clone(), params.len());
            params.push(Param { name, value });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor `{extra}` for this config"
            )));
        }
        Ok(MetaDg { cfg, params, index })
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Array<E> {
        &mut self.params[i].value
    }

    pub fn get(&self, name: &str) -> Option<&Array<E>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn set(&mut self, name: &str, value: Array<E>) {
        let i = self.index[name];
        assert_eq!(self.params[i].value.shape(), value.shape());
        self.params[i].value = value;
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn side_vars(&self, vars: &[Var], side: &str) -> SideVars {
        let v = |name: String| -> Var { vars[self.index[&name]] };
        let branch = |br: &str| -> RunnableBranch {
            RunnableBranch {
                sce: self.cfg.use_sce.then(|| SceVars {
                    fc_q_weight: v(format!("stce.{br}.{side}.fc_q.weight")),
                    fc_q_bias: v(format!("stce.{br}.{side}.fc_q.bias")),
                    fc_k_weight: v(format!("stce.{br}.{side}.fc_k.weight")),
                    fc_k_bias: v(format!("stce.{br}.{side}.fc_k.bias")),
                    fc_v_weight: v(format!("stce.{br}.{side}.fc_v.weight")),
                    fc_v_bias: v(format!("stce.{br}.{side}.fc_v.bias")),
                    mlp0_weight: v(format!("stce.{br}.{side}.mlp0.weight")),
                    mlp0_bias: v(format!("stce.{br}.{side}.mlp0.bias")),
                    mlp1_weight: v(format!("stce.{br}.{side}.mlp1.weight")),
                    mlp1_bias: v(format!("stce.{br}.{side}.mlp1.bias")),
                }),
                tce: self.cfg.use_tce.then(|| TceVars {
                    fc_z_weight: v(format!("stce.{br}.{side}.fc_z.weight")),
                    fc_z_bias: v(format!("stce.{br}.{side}.fc_z.bias")),
                }),
            }
        };
        SideVars {
            dng: DngVars {
                gamma_pool: v(format!("dng.{side}.gamma_pool")),
                fc_h_weight: v(format!("dng.{side}.fc_h.weight")),
                fc_h_bias: v(format!("dng.{side}.fc_h.bias")),
            },
            branches: branch_names(&self.cfg).iter().map(|br| branch(br)).collect(),
            eps_pool: self.cfg.use_dgq.then(|| v(format!("dgq.{side}.eps_pool"))),
            fc_h_weight: v(format!("cell.{side}.fc_h.weight")),
            fc_h_bias: v(format!("cell.{side}.fc_h.bias")),
            theta: ["z", "r", "c"].map(|gt| v(format!("cell.{side}.theta_{gt}"))),
            bias: ["z", "r", "c"].map(|gt| v(format!("cell.{side}.bias_{gt}"))),
        }
    }
}

struct RunnableBranch {
    sce: Option<SceVars>,
    tce: Option<TceVars>,
}

struct SideVars {
    dng: DngVars,
    branches: Vec<RunnableBranch>,
    eps_pool: Option<Var>,
    fc_h_weight: Var,
    fc_h_bias: Var,
    theta: [Var; 3],
    bias: [Var; 3],
}

// ---- standalone kernels ----

/// Node-wise meta-parameters `theta_t = N^p Theta`: `[B,N,d_s] x [d_s,I,O]
/// -> [B,N,I,O]`.
pub fn meta_params<E: Element>(g: &mut Graph<E>, np: Var, pool: Var) -> Result<Var> {
    let sp = g.shape(pool).to_vec();
    let sn = g.shape(np).to_vec();
    if sp.len() != 3 || sn.len() != 3 || sn[2] != sp[0] {
        return Err(Error::Shape {
            op: "meta_params",
            expected: "np [B,N,d_s] and pool [d_s,I,O]".into(),
            actual: format!("{sn:?} vs {sp:?}"),
        });
    }
    let (d_s, i_dim, o_dim) = (sp[0], sp[1], sp[2]);
    let flat = g.reshape(pool, vec![d_s, i_dim * o_dim]);
    let mixed = g.matmul(np, flat);
    Ok(g.reshape(mixed, vec![sn[0], sn[1], i_dim, o_dim]))
}

/// Node-wise bias `N^p b`: `[B,N,d_s] x [d_s,O] -> [B,N,O]`.
pub fn meta_bias<E: Element>(g: &mut Graph<E>, np: Var, pool: Var) -> Result<Var> {
    let sp = g.shape(pool).to_vec();
    let sn = g.shape(np).to_vec();
    if sp.len() != 2 || sn.len() != 3 || sn[2] != sp[0] {
        return Err(Error::Shape {
            op: "meta_bias",
            expected: "np [B,N,d_s] and pool [d_s,O]".into(),
            actual: format!("{sn:?} vs {sp:?}"),
        });
    }
    Ok(g.matmul(np, pool))
}

/// Per-step graph state the recurrence produces besides the hidden state.
pub struct AdjacencyParts {
    /// `ReLU(N^g N^g^T)` before any correction, `[B,N,N]`.
    pub a_raw: Var,
    /// After the continuous-time high-rank Hadamard correction.
    pub a_corrected: Var,
    /// Row-normalized final graph with self-loop fallback rows.
    pub a_tilde: Var,
    /// Smallest nonzero |x| entering a ReLU here (kink distance).
    pub relu_margin: f64,
}

/// Assemble the dynamic graph for one step: similarity graph from `N^g`,
/// high-rank correction from the continuous-time encoding, optional
/// edge-weight adjustment `phi`, then row normalization where all-zero rows
/// fall back to a pure self-loop.
pub fn dynamic_adjacency<E: Element>(
    g: &mut Graph<E>,
    ng: Var,
    tau: f64,
    phi: Option<Var>,
    omega: Var,
    fc_h_weight: Var,
    fc_h_bias: Var,
) -> Result<AdjacencyParts> {
    let sn = g.shape(ng).to_vec();
    if sn.len() != 3 {
        return Err(Error::Shape {
            op: "dynamic_adjacency",
            expected: "ng [B,N,d_s]".into(),
            actual: format!("{sn:?}"),
        });
    }
    let (b, n, d_s) = (sn[0], sn[1], sn[2]);
    let d_c = g.shape(omega)[0];

    let gram = g.matmul_nt(ng, ng);
    let a_raw = g.relu(gram);

    let tc = continuous_time_encode(g, omega, tau);
    let proj_pre = g.matmul(ng, fc_h_weight);
    let proj = g.add(proj_pre, fc_h_bias); // [B,N,d_s*2*d_c]
    let proj4 = g.reshape(proj, vec![b, n, d_s, 2 * d_c]);
    let tc_col = g.reshape(tc, vec![2 * d_c, 1]);
    let nh_col = g.matmul(proj4, tc_col);
    let nh = g.reshape(nh_col, vec![b, n, d_s]);
    let gram_h = g.matmul_nt(nh, nh);
    let corr = g.relu(gram_h);
    let a_corrected = g.mul(corr, a_raw);

    let qualified = match phi {
        Some(p) => g.mul(p, a_corrected),
        None => a_corrected,
    };

    // row normalization with self-loop fallback for all-zero rows
    let s = g.sum_last_keep(qualified); // [B,N,1]
    let sv = g.value(s).clone();
    let zero_row = sv.map(|v| if v > E::ZERO { E::ZERO } else { E::ONE });
    let denom_subst = g.constant(zero_row.clone());
    let denom = g.add(s, denom_subst);
    let base = g.div(qualified, denom);
    let mut selfloop = Array::<E>::zeros(&[b, n, n]);
    for bi in 0..b {
        for i in 0..n {
            if zero_row.data()[bi * n + i] == E::ONE {
                selfloop.data_mut()[bi * n * n + i * n + i] = E::ONE;
            }
        }
    }
    let kink = {
        let mut m = f64::INFINITY;
        for &v in g.value(gram).data().iter().chain(g.value(gram_h).data()) {
            let a = v.to_f64().abs();
            if a > 0.0 {
                m = m.min(a);
            }
        }
        m
    };
    let sl = g.constant(selfloop);
    let a_tilde = g.add(base, sl);
    Ok(AdjacencyParts {
        a_raw,
        a_corrected,
        a_tilde,
        relu_margin: kink,
    })
}

/// Meta-parameter graph convolution over the supports `{identity, A~}`
/// (or `{A~}` alone with `single_support`): per-node contraction of the
/// stacked support features against that node's generated weights.
pub fn graph_conv<E: Element>(
    g: &mut Graph<E>,
    z_in: Var,
    a_tilde: Var,
    theta: Var,
    bias: Var,
    single_support: bool,
) -> Result<Var> {
    let sz = g.shape(z_in).to_vec();
    let st = g.shape(theta).to_vec();
    if sz.len() != 3 || st.len() != 4 {
        return Err(Error::Shape {
            op: "graph_conv",
            expected: "z [B,N,D], theta [B,N,I,O]".into(),
            actual: format!("{sz:?} vs {st:?}"),
        });
    }
    let (b, n, d) = (sz[0], sz[1], sz[2]);
    let expect_i = if single_support { d } else { 2 * d };
    if st[2] != expect_i {
        return Err(Error::Shape {
            op: "graph_conv",
            expected: format!("theta input dim {expect_i} for D = {d}"),
            actual: st[2].to_string(),
        });
    }
    let prop = g.matmul(a_tilde, z_in);
    let stacked = if single_support {
        prop
    } else {
        g.concat_last(&[z_in, prop])
    };
    let s4 = g.reshape(stacked, vec![b, n, 1, expect_i]);
    let out4 = g.matmul(s4, theta);
    let out = g.reshape(out4, vec![b, n, st[3]]);
    Ok(g.add(out, bias))
}

// ---- forward pass ----

/// Per-step artifacts collected when tracing is on. Arrays are detached
/// copies of the forward values.
pub struct StepTrace<E: Element> {
    pub side: Side,
    /// Global window step, 1-based across encoder then decoder.
    pub t: usize,
    pub gamma: Array<E>,
    pub z_gate: Array<E>,
    pub r_gate: Array<E>,
    pub qualification: Option<Array<E>>,
    pub phi: Option<Array<E>>,
    pub m_pos: Option<Array<E>>,
    pub m_neg: Option<Array<E>>,
    pub beta: Option<Array<E>>,
    pub a_raw: Array<E>,
    pub a_tilde: Array<E>,
    pub hidden: Array<E>,
    /// Variational dropout masks applied at this step, per branch:
    /// (branch, mlp-input mask, hidden mask).
    pub applied_masks: Vec<(String, Array<E>, Array<E>)>,
    /// Distance to the nearest classification tie at this step.
    pub tie_margin: f64,
    /// Distance to the nearest ReLU kink in the adjacency assembly.
    pub relu_margin: f64,
}

/// Whole-window trace.
pub struct Trace<E: Element> {
    pub steps: Vec<StepTrace<E>>,
    /// Distance of the static 0-1 mask to a sign flip.
    pub static_mask_margin: f64,
}

/// Forward switches.
pub struct ForwardOpts<'r> {
    /// Apply dropout and allow teacher forcing.
    pub training: bool,
    /// Build the Huber loss against the batch targets.
    pub compute_loss: bool,
    /// Collect per-step artifacts.
    pub trace: bool,
    /// Replace the edge-weight adjustment with exact ones (diagnostics).
    pub force_unit_phi: bool,
    /// Mask source for variational dropout; required when training with a
    /// nonzero dropout rate.
    pub rng: Option<&'r mut Rng>,
}

impl<'r> Default for ForwardOpts<'r> {
    fn default() -> Self {
        ForwardOpts {
            training: false,
            compute_loss: true,
            trace: false,
            force_unit_phi: false,
            rng: None,
        }
    }
}

/// Result of one forward pass.
pub struct ForwardRun<E: Element> {
    /// Tape leaves aligned with [`MetaDg::params`].
    pub param_vars: Vec<Var>,
    /// Denormalized predictions, `[B, T', N]`, detached.
    pub preds_raw: Array<E>,
    /// Mean Huber loss on the raw scale, when requested.
    pub loss: Option<Var>,
    pub trace: Option<Trace<E>>,
}

struct RollState<E: Element> {
    h: Var,
    z_gate: Option<Var>,
    branches: Vec<BranchState<E>>,
}

impl<E: Element> MetaDg<E> {
    /// Run the encoder over the input window and the decoder
    /// autoregressively over the prediction horizon.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        batch: &WindowBatch<E>,
        normalizer: &Normalizer,
        mut opts: ForwardOpts<'_>,
    ) -> Result<ForwardRun<E>> {
        let cfg = &self.cfg;
        let (b, t_in, n, c_in) = {
            let s = batch.x.shape();
            (s[0], s[1], s[2], s[3])
        };
        if n != cfg.num_nodes {
            return Err(Error::NodeCountMismatch {
                config: cfg.num_nodes,
                dataset: n,
            });
        }
        if c_in != INPUT_CHANNELS || t_in != cfg.horizon_in {
            return Err(Error::Shape {
                op: "forward",
                expected: format!("x [B,{},N,{INPUT_CHANNELS}]", cfg.horizon_in),
                actual: format!("{:?}", batch.x.shape()),
            });
        }
        let t_out = cfg.horizon_out;

        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let var = if opts.training {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                g.set_label(var, p.name.clone());
                var
            })
            .collect();
        let v = |name: &str| param_vars[self.index[name]];
        let n_static = v("node_static");
        let (tod_pool, dow_pool, omega) = (v("tod_pool"), v("dow_pool"), v("ctime_omega"));
        let (head_w, head_b) = (v("head.weight"), v("head.bias"));

        // static support mask, recomputed from the current embedding and
        // treated as a constant of this pass
        let (static_mask, static_margin) = if cfg.use_dgq {
            let (m, margin) = dgq::static_mask(g.value(n_static));
            (Some(m), margin)
        } else {
            (None, f64::INFINITY)
        };

        // one variational dropout mask set per branch per window
        let masks: Vec<_> = {
            let n_branches = branch_names(cfg).len();
            if opts.training && cfg.dropout > 0.0 && cfg.use_sce {
                let rng = opts.rng.as_deref_mut().ok_or_else(|| {
                    Error::Config(vec![
                        "training forward with dropout needs an RNG".into()
                    ])
                })?;
                (0..n_branches)
                    .map(|_| sample_masks::<E>(rng, b, cfg.d_attn, cfg.d_s, cfg.dropout))
                    .collect()
            } else {
                vec![None; n_branches]
            }
        };

        let mut state = RollState {
            h: g.constant(Array::zeros(&[b, n, cfg.d_hidden])),
            z_gate: None,
            branches: masks
                .into_iter()
                .map(|m| BranchState::at_window_start(g, n_static, b, m))
                .collect(),
        };
        let mut trace = opts.trace.then(|| Trace {
            steps: Vec::new(),
            static_mask_margin: static_margin,
        });

        let enc_vars = self.side_vars(&param_vars, "enc");
        let dec_vars = self.side_vars(&param_vars, "dec");

        let enc_t_hat = enhance_time(g, tod_pool, dow_pool, &batch.enc_time, Side::Encoder, None)?;
        let dec_t_hat = enhance_time(
            g,
            tod_pool,
            dow_pool,
            &batch.dec_time,
            Side::Decoder,
            batch.enc_time.last(),
        )?;

        // encoder
        for (k, &t_hat) in enc_t_hat.iter().enumerate() {
            let x_t = g.constant(step_input(&batch.x, k));
            self.cell_step(
                g,
                &enc_vars,
                Side::Encoder,
                k + 1,
                x_t,
                t_hat,
                n_static,
                static_mask.as_ref(),
                omega,
                &mut state,
                &mut trace,
                &opts,
            )?;
        }

        // decoder: autoregressive flow input, first step uses the last
        // observed (normalized) flow
        let mut flow: Var = g.constant(flow_channel(&batch.x, t_in - 1));
        let mut preds_norm: Vec<Var> = Vec::with_capacity(t_out);
        let mut losses: Vec<Var> = Vec::with_capacity(t_out);
        let mut preds_raw = Array::<E>::zeros(&[b, t_out, n]);
        for (k, &t_hat) in dec_t_hat.iter().enumerate() {
            let x_t = {
                let time_c = g.constant(time_channels(batch, k, n));
                let f3 = g.reshape(flow, vec![b, n, 1]);
                g.concat_last(&[f3, time_c])
            };
            self.cell_step(
                g,
                &dec_vars,
                Side::Decoder,
                t_in + k + 1,
                x_t,
                t_hat,
                n_static,
                static_mask.as_ref(),
                omega,
                &mut state,
                &mut trace,
                &opts,
            )?;
            let lin = g.matmul(state.h, head_w);
            let pred3 = g.add(lin, head_b);
            let pred = g.reshape(pred3, vec![b, n]);
            g.set_label(pred, format!("dec.t{}.pred", k + 1));
            preds_norm.push(pred);

            let pred_raw = {
                let scaled = g.mul_scalar(pred, normalizer.std);
                g.add_scalar(scaled, normalizer.mean)
            };
            if opts.compute_loss {
                let y_t = target_step(&batch.y_raw, k);
                losses.push(g.huber_mean(pred_raw, &y_t, cfg.huber_kappa));
            }
            // next decoder input
            flow = if opts.training && cfg.teacher_forcing {
                let y_t = target_step(&batch.y_raw, k);
                let norm = y_t.map(|raw| E::from_f64(normalizer.forward(raw.to_f64())));
                g.constant(norm)
            } else {
                pred
            };
            // copy the detached raw prediction
            let pv = g.value(pred_raw).clone();
            for bi in 0..b {
                for ni in 0..n {
                    preds_raw.data_mut()[(bi * t_out + k) * n + ni] = pv.data()[bi * n + ni];
                }
            }
        }

        let loss = if opts.compute_loss {
            let mut acc = losses[0];
            for l in &losses[1..] {
                acc = g.add(acc, *l);
            }
            let mean = g.mul_scalar(acc, 1.0 / losses.len() as f64);
            g.set_label(mean, "loss");
            Some(mean)
        } else {
            None
        };

        Ok(ForwardRun {
            param_vars,
            preds_raw,
            loss,
            trace,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_step(
        &self,
        g: &mut Graph<E>,
        sv: &SideVars,
        side: Side,
        t_global: usize,
        x_t: Var,
        t_hat: Var,
        n_static: Var,
        static_mask: Option<&Array<E>>,
        omega: Var,
        state: &mut RollState<E>,
        trace: &mut Option<Trace<E>>,
        opts: &ForwardOpts<'_>,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let side_tag = match side {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        };
        let flags = StceFlags {
            use_sce: cfg.use_sce,
            use_tce: cfg.use_tce,
            tsce_order: cfg.tsce_order,
        };

        let (n_t, gamma) = dynamic_node_embed(g, t_hat, state.h, n_static, &sv.dng)?;
        g.set_label(n_t, format!("{side_tag}.t{t_global}.n_t"));

        // m-branch lookback must be captured before the state advances
        let names = branch_names(cfg);
        let m_slot = names.iter().position(|&b| b == "m" || b == "joined");
        let nm_prev = m_slot.map(|i| state.branches[i].prev_enh);

        let mut outs: Vec<Var> = Vec::with_capacity(names.len());
        for (bi, rb) in sv.branches.iter().enumerate() {
            let out = stce_step(
                g,
                flags,
                rb.sce.as_ref(),
                rb.tce.as_ref(),
                &mut state.branches[bi],
                n_t,
                state.z_gate,
                t_global,
            )?;
            outs.push(out);
        }
        let np = outs[0];
        let ng = if cfg.joined_embedding { outs[0] } else { outs[1] };
        let nm = m_slot.map(|i| if cfg.joined_embedding { outs[0] } else { outs[i] });

        // edge-weight adjustment
        let mut qual = None;
        let phi = if cfg.use_dgq && !opts.force_unit_phi {
            let mask = static_mask.expect("mask exists when use_dgq");
            let (p, qual_kink) = dgq::edge_qualification(g, nm.unwrap(), nm_prev.unwrap(), mask)?;
            g.set_label(p, format!("{side_tag}.t{t_global}.qualification"));
            let q = dgq::adjust_weights_with(
                g,
                p,
                nm.unwrap(),
                sv.eps_pool.unwrap(),
                cfg.delta_scale,
                (cfg.dgq_weaken_factor > 0.0).then_some(cfg.dgq_weaken_factor),
            )?;
            g.set_label(q.phi, format!("{side_tag}.t{t_global}.phi"));
            let phi = q.phi;
            qual = Some((p, q, qual_kink));
            Some(phi)
        } else if cfg.use_dgq {
            // diagnostics: phi forced to exact ones
            let b = g.shape(n_t)[0];
            let n = g.shape(n_t)[1];
            Some(g.constant(Array::full(&[b, n, n], E::ONE)))
        } else {
            None
        };

        let tau = t_global as f64;
        let adj = dynamic_adjacency(g, ng, tau, phi, omega, sv.fc_h_weight, sv.fc_h_bias)?;
        g.set_label(adj.a_tilde, format!("{side_tag}.t{t_global}.a_tilde"));

        let h_prev = state.h;
        let zr_in = g.concat_last(&[x_t, h_prev]);
        let theta_z = meta_params(g, np, sv.theta[0])?;
        let bias_z = meta_bias(g, np, sv.bias[0])?;
        let z_pre = graph_conv(g, zr_in, adj.a_tilde, theta_z, bias_z, cfg.single_support)?;
        let z = g.sigmoid(z_pre);
        g.set_label(z, format!("{side_tag}.t{t_global}.z"));

        let theta_r = meta_params(g, np, sv.theta[1])?;
        let bias_r = meta_bias(g, np, sv.bias[1])?;
        let r_pre = graph_conv(g, zr_in, adj.a_tilde, theta_r, bias_r, cfg.single_support)?;
        let r = g.sigmoid(r_pre);

        let rh = g.mul(r, h_prev);
        let c_in = g.concat_last(&[x_t, rh]);
        let theta_c = meta_params(g, np, sv.theta[2])?;
        let bias_c = meta_bias(g, np, sv.bias[2])?;
        let c_pre = graph_conv(g, c_in, adj.a_tilde, theta_c, bias_c, cfg.single_support)?;
        let c = match cfg.candidate_activation {
            CandidateActivation::Tanh => g.tanh(c_pre),
            CandidateActivation::Sigmoid => g.sigmoid(c_pre),
        };

        let keep = g.mul(z, h_prev);
        let inv = g.one_minus(z);
        let new = g.mul(inv, c);
        let h = g.add(keep, new);
        g.set_label(h, format!("{side_tag}.t{t_global}.h"));

        if let Some(tr) = trace.as_mut() {
            let applied_masks = names
                .iter()
                .zip(&state.branches)
                .filter_map(|(name, st)| {
                    st.masks
                        .as_ref()
                        .map(|m| (name.to_string(), m.m0.clone(), m.m1.clone()))
                })
                .collect();
            tr.steps.push(StepTrace {
                side,
                t: t_global,
                gamma: g.value(gamma).clone(),
                z_gate: g.value(z).clone(),
                r_gate: g.value(r).clone(),
                qualification: qual.as_ref().map(|(p, _, _)| g.value(*p).clone()),
                phi: qual.as_ref().map(|(_, q, _)| g.value(q.phi).clone()),
                m_pos: qual.as_ref().map(|(_, q, _)| g.value(q.m_pos).clone()),
                m_neg: qual.as_ref().map(|(_, q, _)| q.m_neg.clone()),
                beta: qual.as_ref().map(|(_, q, _)| g.value(q.beta).clone()),
                a_raw: g.value(adj.a_raw).clone(),
                a_tilde: g.value(adj.a_tilde).clone(),
                hidden: g.value(h).clone(),
                applied_masks,
                tie_margin: qual.as_ref().map_or(f64::INFINITY, |(_, q, _)| q.tie_margin),
                relu_margin: adj.relu_margin.min(
                    qual.as_ref().map_or(f64::INFINITY, |(_, _, k)| *k),
                ),
            });
        }

        state.h = h;
        state.z_gate = Some(z);
        Ok(())
    }
}

/// Extract step `t` of `[B,T,N,C]` as `[B,N,C]`.
fn step_input<E: Element>(x: &Array<E>, t: usize) -> Array<E> {
    let s = x.shape();
    let (b, t_len, n, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Array::<E>::zeros(&[b, n, c]);
    for bi in 0..b {
        let src = &x.data()[((bi * t_len) + t) * n * c..((bi * t_len) + t + 1) * n * c];
        out.data_mut()[bi * n * c..(bi + 1) * n * c].copy_from_slice(src);
    }
    out
}

/// Extract the normalized flow channel of step `t` as `[B,N,1]`.
fn flow_channel<E: Element>(x: &Array<E>, t: usize) -> Array<E> {
    let s = x.shape();
    let (b, t_len, n, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Array::<E>::zeros(&[b, n, 1]);
    for bi in 0..b {
        for ni in 0..n {
            out.data_mut()[bi * n + ni] = x.data()[(((bi * t_len) + t) * n + ni) * c];
        }
    }
    out
}

/// Time scalar channels of decoder step `k`, broadcast over nodes: `[B,N,2]`.
fn time_channels<E: Element>(batch: &WindowBatch<E>, k: usize, n: usize) -> Array<E> {
    let st = &batch.dec_time[k];
    let b = st.tod.len();
    let mut out = Array::<E>::zeros(&[b, n, 2]);
    for bi in 0..b {
        let tod = E::from_f64(st.tod[bi] as f64 / crate::data::SLOTS_PER_DAY as f64);
        let dow = E::from_f64(st.dow[bi] as f64 / 7.0);
        for ni in 0..n {
            out.data_mut()[(bi * n + ni) * 2] = tod;
            out.data_mut()[(bi * n + ni) * 2 + 1] = dow;
        }
    }
    out
}

/// Target step `k` of `[B,T',N]` as `[B,N]`.
fn target_step<E: Element>(y: &Array<E>, k: usize) -> Array<E> {
    let s = y.shape();
    let (b, t_len, n) = (s[0], s[1], s[2]);
    let mut out = Array::<E>::zeros(&[b, n]);
    for bi in 0..b {
        let src = &y.data()[(bi * t_len + k) * n..(bi * t_len + k + 1) * n];
        out.data_mut()[bi * n..(bi + 1) * n].copy_from_slice(src);
    }
    out
}
