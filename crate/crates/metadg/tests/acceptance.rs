//! Acceptance gate: one test per criterion, each printing a PASS line.
//!
//! 1. oracle equivalence of every vectorized kernel on tiny shapes
//! 2. structural invariants over 100 random trials
//! 3. full-model gradient check vs central finite differences (f64)
//! 4. desk-scale overfit target, including ablated variants
//! 5. variational-dropout mask contract
//! 6. bitwise training determinism
//! 7. metric correctness against a scalar loop
//! 8. (ignored) full PEMS08 training run; needs the real dataset + hours

#![allow(clippy::needless_range_loop)]
#![allow(clippy::field_reassign_with_default)]
#![allow(clippy::type_complexity)]

mod common;


use common::*;
use metadg::config::{EpochRecord, ModelConfig};
use metadg::data::{split_and_window, Split, SyntheticSpec};
use metadg::dgq;
use metadg::dng::{dynamic_node_embed, DngVars};
use metadg::model::{dynamic_adjacency, graph_conv, meta_params, ForwardOpts, MetaDg};
use metadg::rng::Rng;
use metadg::stce::{sce, stce_step, BranchState, SceVars, StceFlags, TceVars};
use metadg::tensor::{Array, Graph, Var};
use metadg::train::{self, train_loop};

fn rnd_array(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi)).collect(),
    )
}

fn to_mat(a: &Array<f64>, rows: usize, cols: usize) -> Mat {
    assert_eq!(a.len(), rows * cols);
    a.data().chunks_exact(cols).map(|r| r.to_vec()).collect()
}

/// Tiny default-flag config shared by several criteria.
fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.num_nodes = 4;
    cfg.horizon_in = 2;
    cfg.horizon_out = 2;
    cfg.d_s = 3;
    cfg.d_tod = 2;
    cfg.d_dow = 2;
    cfg.d_c = 2;
    cfg.d_hidden = 5;
    cfg.d_attn = 4;
    cfg.batch_size = 2;
    cfg.dropout = 0.0;
    cfg.synthetic_steps = 160;
    cfg
}

#[test]
fn criterion_1_oracle_equivalence() {
    let mut worst: f64 = 0.0;

    // gate fusion (dynamic node generation), B = 2
    {
        let (b, n, d_s, d_h, dt2) = (2, 3, 2, 4, 6);
        let mut rng = Rng::new(101);
        let mut g = Graph::<f64>::new();
        let gamma_pool = rnd_array(&mut rng, &[dt2, d_s], -1.0, 1.0);
        let fc_w = rnd_array(&mut rng, &[d_h, d_s], -1.0, 1.0);
        let fc_b = rnd_array(&mut rng, &[d_s], -0.5, 0.5);
        let t_hat = rnd_array(&mut rng, &[b, dt2], -1.0, 1.0);
        let h_prev = rnd_array(&mut rng, &[b, n, d_h], -1.0, 1.0);
        let n_static = rnd_array(&mut rng, &[n, d_s], -1.0, 1.0);
        let vars = DngVars {
            gamma_pool: g.param(gamma_pool.clone()),
            fc_h_weight: g.param(fc_w.clone()),
            fc_h_bias: g.param(fc_b.clone()),
        };
        let th = g.constant(t_hat.clone());
        let hp = g.constant(h_prev.clone());
        let ns = g.constant(n_static.clone());
        let (out, _) = dynamic_node_embed(&mut g, th, hp, ns, &vars).unwrap();
        for bi in 0..b {
            let h_mat: Mat = (0..n)
                .map(|i| (0..d_h).map(|k| h_prev.at(&[bi, i, k])).collect())
                .collect();
            let want = dng_oracle(
                &(0..dt2).map(|k| t_hat.at(&[bi, k])).collect::<Vec<_>>(),
                &to_mat(&gamma_pool, dt2, d_s),
                &to_mat(&fc_w, d_h, d_s),
                fc_b.data(),
                &h_mat,
                &to_mat(&n_static, n, d_s),
            );
            let got: Vec<f64> = (0..n)
                .flat_map(|i| (0..d_s).map(move |k| (i, k)))
                .map(|(i, k)| g.value(out).at(&[bi, i, k]))
                .collect();
            worst = worst.max(max_abs_diff(&got, &flat(&want)));
        }
        assert!(worst < 1e-6, "dng vs oracle: {worst}");
    }

    // cross-attention enhancement
    {
        let (n, d_s, d_attn) = (4, 3, 5);
        let mut rng = Rng::new(102);
        let mut g = Graph::<f64>::new();
        let mats: Vec<Array<f64>> = vec![
            rnd_array(&mut rng, &[d_s, d_attn], -0.8, 0.8), // wq
            rnd_array(&mut rng, &[d_attn], -0.3, 0.3),
            rnd_array(&mut rng, &[d_s, d_attn], -0.8, 0.8), // wk
            rnd_array(&mut rng, &[d_attn], -0.3, 0.3),
            rnd_array(&mut rng, &[d_s, d_attn], -0.8, 0.8), // wv
            rnd_array(&mut rng, &[d_attn], -0.3, 0.3),
            rnd_array(&mut rng, &[d_attn, d_s], -0.8, 0.8), // mlp0
            rnd_array(&mut rng, &[d_s], -0.3, 0.3),
            rnd_array(&mut rng, &[d_s, d_s], -0.8, 0.8), // mlp1
            rnd_array(&mut rng, &[d_s], -0.3, 0.3),
        ];
        let vars = SceVars {
            fc_q_weight: g.param(mats[0].clone()),
            fc_q_bias: g.param(mats[1].clone()),
            fc_k_weight: g.param(mats[2].clone()),
            fc_k_bias: g.param(mats[3].clone()),
            fc_v_weight: g.param(mats[4].clone()),
            fc_v_bias: g.param(mats[5].clone()),
            mlp0_weight: g.param(mats[6].clone()),
            mlp0_bias: g.param(mats[7].clone()),
            mlp1_weight: g.param(mats[8].clone()),
            mlp1_bias: g.param(mats[9].clone()),
        };
        let cur = rnd_array(&mut rng, &[1, n, d_s], -1.0, 1.0);
        let prev = rnd_array(&mut rng, &[1, n, d_s], -1.0, 1.0);
        let cv = g.constant(cur.clone());
        let pv = g.constant(prev.clone());
        let (out, _) = sce(&mut g, cv, pv, &vars, None).unwrap();
        let p = SceP {
            wq: to_mat(&mats[0], d_s, d_attn),
            bq: mats[1].data().to_vec(),
            wk: to_mat(&mats[2], d_s, d_attn),
            bk: mats[3].data().to_vec(),
            wv: to_mat(&mats[4], d_s, d_attn),
            bv: mats[5].data().to_vec(),
            w0: to_mat(&mats[6], d_attn, d_s),
            b0: mats[7].data().to_vec(),
            w1: to_mat(&mats[8], d_s, d_s),
            b1: mats[9].data().to_vec(),
        };
        let want = sce_oracle(&to_mat(&cur, n, d_s), &to_mat(&prev, n, d_s), &p);
        let diff = max_abs_diff(g.value(out).data(), &flat(&want));
        worst = worst.max(diff);
        assert!(diff < 1e-6, "sce vs oracle: {diff}");
    }

    // chained STCE rollout over 3 steps
    {
        let (b, n, d_s, d_attn, d_h) = (1, 3, 2, 4, 3);
        let mut rng = Rng::new(103);
        let mut g = Graph::<f64>::new();
        let wq = rnd_array(&mut rng, &[d_s, d_attn], -0.8, 0.8);
        let bq = rnd_array(&mut rng, &[d_attn], -0.3, 0.3);
        let wk = rnd_array(&mut rng, &[d_s, d_attn], -0.8, 0.8);
        let bk = rnd_array(&mut rng, &[d_attn], -0.3, 0.3);
        let wv = rnd_array(&mut rng, &[d_s, d_attn], -0.8, 0.8);
        let bv = rnd_array(&mut rng, &[d_attn], -0.3, 0.3);
        let w0 = rnd_array(&mut rng, &[d_attn, d_s], -0.8, 0.8);
        let b0 = rnd_array(&mut rng, &[d_s], -0.3, 0.3);
        let w1 = rnd_array(&mut rng, &[d_s, d_s], -0.8, 0.8);
        let b1 = rnd_array(&mut rng, &[d_s], -0.3, 0.3);
        let wz = rnd_array(&mut rng, &[d_h, d_s], -0.8, 0.8);
        let bz = rnd_array(&mut rng, &[d_s], -0.3, 0.3);
        let sce_vars = SceVars {
            fc_q_weight: g.param(wq.clone()),
            fc_q_bias: g.param(bq.clone()),
            fc_k_weight: g.param(wk.clone()),
            fc_k_bias: g.param(bk.clone()),
            fc_v_weight: g.param(wv.clone()),
            fc_v_bias: g.param(bv.clone()),
            mlp0_weight: g.param(w0.clone()),
            mlp0_bias: g.param(b0.clone()),
            mlp1_weight: g.param(w1.clone()),
            mlp1_bias: g.param(b1.clone()),
        };
        let tce_vars = TceVars {
            fc_z_weight: g.param(wz.clone()),
            fc_z_bias: g.param(bz.clone()),
        };
        let n_static = rnd_array(&mut rng, &[n, d_s], -1.0, 1.0);
        let ns = g.param(n_static.clone());
        let raws: Vec<Array<f64>> = (0..3)
            .map(|_| rnd_array(&mut rng, &[b, n, d_s], -1.0, 1.0))
            .collect();
        let zs: Vec<Array<f64>> = (0..3)
            .map(|_| rnd_array(&mut rng, &[b, n, d_h], -1.0, 1.0))
            .collect();
        let flags = StceFlags {
            use_sce: true,
            use_tce: true,
            tsce_order: false,
        };
        let mut state = BranchState::at_window_start(&mut g, ns, b, None);
        let mut got_steps = Vec::new();
        for t in 1..=3usize {
            let nt = g.constant(raws[t - 1].clone());
            let z_prev: Option<Var> = (t >= 2).then(|| g.constant(zs[t - 2].clone()));
            let out = stce_step(
                &mut g,
                flags,
                Some(&sce_vars),
                Some(&tce_vars),
                &mut state,
                nt,
                z_prev,
                t,
            )
            .unwrap();
            got_steps.push(g.value(out).clone());
        }
        // scalar chaining
        let p = SceP {
            wq: to_mat(&wq, d_s, d_attn),
            bq: bq.data().to_vec(),
            wk: to_mat(&wk, d_s, d_attn),
            bk: bk.data().to_vec(),
            wv: to_mat(&wv, d_s, d_attn),
            bv: bv.data().to_vec(),
            w0: to_mat(&w0, d_attn, d_s),
            b0: b0.data().to_vec(),
            w1: to_mat(&w1, d_s, d_s),
            b1: b1.data().to_vec(),
        };
        let wz_m = to_mat(&wz, d_h, d_s);
        let mut prev_raw = to_mat(&n_static, n, d_s);
        let mut prev_enh = prev_raw.clone();
        for t in 1..=3usize {
            let cur = to_mat(&raws[t - 1], n, d_s);
            let fused = sce_oracle(&cur, &prev_raw, &p);
            let want = if t == 1 {
                fused
            } else {
                let z_mat = to_mat(&zs[t - 2], n, d_h);
                tce_oracle(&fused, &prev_enh, &z_mat, &wz_m, bz.data())
            };
            let diff = max_abs_diff(got_steps[t - 1].data(), &flat(&want));
            worst = worst.max(diff);
            assert!(diff < 1e-6, "stce step {t} vs oracle: {diff}");
            prev_raw = cur;
            prev_enh = want;
        }
    }

    // dynamic graph qualification
    {
        let (b, n, d_s) = (1, 5, 3);
        let mut rng = Rng::new(104);
        let mut g = Graph::<f64>::new();
        let stat = rnd_array(&mut rng, &[n, d_s], -1.0, 1.0);
        let (mask, _) = dgq::static_mask(&stat);
        let cur = rnd_array(&mut rng, &[b, n, d_s], -1.0, 1.0);
        let prev = rnd_array(&mut rng, &[b, n, d_s], -1.0, 1.0);
        let pool = rnd_array(&mut rng, &[d_s], -1.0, 1.0);
        let cv = g.constant(cur.clone());
        let pv = g.constant(prev.clone());
        let poolv = g.param(pool.clone());
        let (p_var, _) = dgq::edge_qualification(&mut g, cv, pv, &mask).unwrap();
        let q = dgq::adjust_weights(&mut g, p_var, cv, poolv, 2.0).unwrap();
        let (p_want, phi_want) = dgq_oracle(
            &to_mat(&cur, n, d_s),
            &to_mat(&prev, n, d_s),
            &to_mat(&mask, n, n),
            pool.data(),
            2.0,
        );
        let dp = max_abs_diff(g.value(p_var).data(), &flat(&p_want));
        let dphi = max_abs_diff(g.value(q.phi).data(), &flat(&phi_want));
        worst = worst.max(dp).max(dphi);
        assert!(dp < 1e-6 && dphi < 1e-6, "dgq vs oracle: P {dp}, phi {dphi}");
    }

    // meta-parameter contraction
    {
        let (b, n, d_s, i_dim, o_dim) = (2, 3, 3, 4, 2);
        let mut rng = Rng::new(105);
        let mut g = Graph::<f64>::new();
        let pool = rnd_array(&mut rng, &[d_s, i_dim, o_dim], -1.0, 1.0);
        let np = rnd_array(&mut rng, &[b, n, d_s], -1.0, 1.0);
        let poolv = g.param(pool.clone());
        let npv = g.constant(np.clone());
        let theta = meta_params(&mut g, npv, poolv).unwrap();
        let pool_nested: Vec<Mat> = (0..d_s)
            .map(|k| {
                (0..i_dim)
                    .map(|i| (0..o_dim).map(|o| pool.at(&[k, i, o])).collect())
                    .collect()
            })
            .collect();
        for bi in 0..b {
            let np_mat: Mat = (0..n)
                .map(|i| (0..d_s).map(|k| np.at(&[bi, i, k])).collect())
                .collect();
            let want = meta_oracle(&np_mat, &pool_nested);
            for (i, wmat) in want.iter().enumerate() {
                for (ii, row) in wmat.iter().enumerate() {
                    for (oo, wv) in row.iter().enumerate() {
                        let gv = g.value(theta).at(&[bi, i, ii, oo]);
                        let d = (gv - wv).abs();
                        worst = worst.max(d);
                        assert!(d < 1e-6, "meta contraction ({bi},{i},{ii},{oo}): {d}");
                    }
                }
            }
        }
    }

    // dynamic adjacency assembly
    {
        let (b, n, d_s, d_c) = (1, 4, 3, 2);
        let mut rng = Rng::new(106);
        let mut g = Graph::<f64>::new();
        let ng_a = rnd_array(&mut rng, &[b, n, d_s], -1.0, 1.0);
        let om = metadg::embeddings::init_omegas(d_c);
        let om_a = Array::from_f64(vec![d_c], &om);
        let w_a = rnd_array(&mut rng, &[d_s, d_s * 2 * d_c], -1.0, 1.0);
        let b_a = rnd_array(&mut rng, &[d_s * 2 * d_c], -0.5, 0.5);
        let phi_a = {
            let mut p = rnd_array(&mut rng, &[b, n, n], 0.1, 1.5);
            for v in p.data_mut() {
                *v = v.abs();
            }
            p
        };
        let ngv = g.constant(ng_a.clone());
        let omv = g.param(om_a.clone());
        let wv = g.param(w_a.clone());
        let bv = g.param(b_a.clone());
        let phiv = g.constant(phi_a.clone());
        let parts = dynamic_adjacency(&mut g, ngv, 3.0, Some(phiv), omv, wv, bv).unwrap();
        let want = adjacency_oracle(
            &to_mat(&ng_a, n, d_s),
            3.0,
            Some(&to_mat(&phi_a, n, n)),
            &om,
            &to_mat(&w_a, d_s, d_s * 2 * d_c),
            b_a.data(),
        );
        let d = max_abs_diff(g.value(parts.a_tilde).data(), &flat(&want));
        worst = worst.max(d);
        assert!(d < 1e-6, "adjacency vs oracle: {d}");
    }

    // graph convolution
    {
        let (b, n, d, o) = (1, 3, 2, 4);
        let mut rng = Rng::new(107);
        let mut g = Graph::<f64>::new();
        let z_a = rnd_array(&mut rng, &[b, n, d], -1.0, 1.0);
        let a_a = rnd_array(&mut rng, &[b, n, n], 0.0, 1.0);
        let th_a = rnd_array(&mut rng, &[b, n, 2 * d, o], -1.0, 1.0);
        let bi_a = rnd_array(&mut rng, &[b, n, o], -0.5, 0.5);
        let zv = g.constant(z_a.clone());
        let av = g.constant(a_a.clone());
        let thv = g.constant(th_a.clone());
        let biv = g.constant(bi_a.clone());
        let out = graph_conv(&mut g, zv, av, thv, biv, false).unwrap();
        let theta_nested: Vec<Mat> = (0..n)
            .map(|i| {
                (0..2 * d)
                    .map(|k| (0..o).map(|oo| th_a.at(&[0, i, k, oo])).collect())
                    .collect()
            })
            .collect();
        let want = graph_conv_oracle(
            &to_mat(&z_a, n, d),
            &to_mat(&a_a, n, n),
            &theta_nested,
            &to_mat(&bi_a, n, o),
        );
        let dmax = max_abs_diff(g.value(out).data(), &flat(&want));
        worst = worst.max(dmax);
        assert!(dmax < 1e-6, "graph_conv vs oracle: {dmax}");
    }

    // full two-step cell rollout (encoder)
    let rollout_diff = {
        let cfg = tiny_cfg();
        let series = SyntheticSpec::new(cfg.num_nodes, cfg.synthetic_steps, 3).generate();
        let prep = split_and_window(series, &cfg).unwrap();
        let model = MetaDg::<f64>::new(cfg.clone(), &Rng::new(12)).unwrap();
        let batch = prep.batch::<f64>(&prep.train[5..6]);
        let mut g = Graph::<f64>::new();
        let run = model
            .forward(
                &mut g,
                &batch,
                &prep.normalizer,
                ForwardOpts {
                    trace: true,
                    ..ForwardOpts::default()
                },
            )
            .unwrap();
        let trace = run.trace.unwrap();

        let params = param_map(&model);
        let oracle = RolloutOracle {
            fetch: Fetch(&params),
            cfg: &cfg,
        };
        let n = cfg.num_nodes;
        let x_steps: Vec<Mat> = (0..cfg.horizon_in)
            .map(|t| {
                (0..n)
                    .map(|i| (0..3).map(|c| batch.x.at(&[0, t, i, c])).collect())
                    .collect()
            })
            .collect();
        let tod: Vec<usize> = batch.enc_time.iter().map(|st| st.tod[0]).collect();
        let dow: Vec<usize> = batch.enc_time.iter().map(|st| st.dow[0]).collect();
        let hiddens = oracle.run(&x_steps, &tod, &dow);

        let mut dmax: f64 = 0.0;
        for (step, want) in trace.steps.iter().zip(&hiddens) {
            dmax = dmax.max(max_abs_diff(step.hidden.data(), &flat(want)));
        }
        assert!(
            dmax < 1e-5,
            "2-step cell rollout vs straight-line oracle: {dmax}"
        );
        dmax
    };

    println!(
        "acceptance criterion 1 (oracle equivalence): PASS \
         (kernel max |diff| {worst:.2e} < 1e-6, 2-step rollout {rollout_diff:.2e} < 1e-5)"
    );
}

#[test]
fn criterion_2_structural_invariants() {
    // attention rows over 100 random inputs
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        let mut g = Graph::<f64>::new();
        let (n, d_s, d_attn) = (5, 3, 4);
        let vars = SceVars {
            fc_q_weight: g.param(rnd_array(&mut rng, &[d_s, d_attn], -1.0, 1.0)),
            fc_q_bias: g.param(rnd_array(&mut rng, &[d_attn], -0.3, 0.3)),
            fc_k_weight: g.param(rnd_array(&mut rng, &[d_s, d_attn], -1.0, 1.0)),
            fc_k_bias: g.param(rnd_array(&mut rng, &[d_attn], -0.3, 0.3)),
            fc_v_weight: g.param(rnd_array(&mut rng, &[d_s, d_attn], -1.0, 1.0)),
            fc_v_bias: g.param(rnd_array(&mut rng, &[d_attn], -0.3, 0.3)),
            mlp0_weight: g.param(rnd_array(&mut rng, &[d_attn, d_s], -1.0, 1.0)),
            mlp0_bias: g.param(rnd_array(&mut rng, &[d_s], -0.3, 0.3)),
            mlp1_weight: g.param(rnd_array(&mut rng, &[d_s, d_s], -1.0, 1.0)),
            mlp1_bias: g.param(rnd_array(&mut rng, &[d_s], -0.3, 0.3)),
        };
        let cur = g.constant(rnd_array(&mut rng, &[2, n, d_s], -2.0, 2.0));
        let prev = g.constant(rnd_array(&mut rng, &[2, n, d_s], -2.0, 2.0));
        let (_, alpha) = sce(&mut g, cur, prev, &vars, None).unwrap();
        for row in g.value(alpha).data().chunks_exact(n) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "attention row sum {s}");
        }
    }

    // whole-model per-step invariants over 100 random (model, window) pairs
    let cfg = tiny_cfg();
    let series = SyntheticSpec::new(cfg.num_nodes, cfg.synthetic_steps, 5).generate();
    let prep = split_and_window(series, &cfg).unwrap();
    for trial in 0..100u64 {
        let mut c = cfg.clone();
        c.seed = trial;
        let model = MetaDg::<f64>::new(c, &Rng::new(trial)).unwrap();
        let w = (trial as usize * 7) % (prep.train.len() - 2);
        let batch = prep.batch::<f64>(&prep.train[w..w + 2]);
        let mut g = Graph::<f64>::new();
        let run = model
            .forward(
                &mut g,
                &batch,
                &prep.normalizer,
                ForwardOpts {
                    trace: true,
                    ..ForwardOpts::default()
                },
            )
            .unwrap();
        for step in &run.trace.unwrap().steps {
            for &v in step.gamma.data() {
                assert!(v > 0.0 && v < 1.0, "gamma out of (0,1): {v}");
            }
            for &v in step.z_gate.data().iter().chain(step.r_gate.data()) {
                assert!(v > 0.0 && v < 1.0, "gate out of (0,1): {v}");
            }
            let n = step.a_tilde.shape()[2];
            for row in step.a_tilde.data().chunks_exact(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "A~ row sum {s}");
            }
            let (m_pos, m_neg) = (
                step.m_pos.as_ref().unwrap(),
                step.m_neg.as_ref().unwrap(),
            );
            for (p, q) in m_pos.data().iter().zip(m_neg.data()) {
                assert!(
                    (*p > 0.0) != (*q > 0.0),
                    "supports not disjoint+exhaustive: pos {p} neg {q}"
                );
            }
            let qual = step.qualification.as_ref().unwrap();
            for b in 0..qual.shape()[0] {
                for i in 0..n {
                    if qual.at(&[b, i, i]) > 0.0 {
                        assert!(
                            m_pos.at(&[b, i, i]) > 0.0,
                            "positive diagonal fell in weakened class"
                        );
                    }
                }
            }
            for &v in step.beta.as_ref().unwrap().data() {
                assert!(v > 0.0, "beta not positive: {v}");
            }
        }
    }
    println!(
        "acceptance criterion 2 (structural invariants): PASS \
         (100 attention trials + 100 traced forwards)"
    );
}

#[test]
fn criterion_3_gradient_check() {
    // find a seed whose forward stays away from every non-differentiable
    // boundary (mask sign flips, pos/neg classification ties, ReLU kinks,
    // Huber transition)
    let cfg = tiny_cfg();
    let series = SyntheticSpec::new(cfg.num_nodes, cfg.synthetic_steps, 9).generate();
    let prep = split_and_window(series, &cfg).unwrap();
    let batch = prep.batch::<f64>(&prep.train[3..4]);

    let margin_ok = |model: &MetaDg<f64>| -> Option<(f64, f64)> {
        let mut g = Graph::<f64>::new();
        let run = model
            .forward(
                &mut g,
                &batch,
                &prep.normalizer,
                ForwardOpts {
                    trace: true,
                    ..ForwardOpts::default()
                },
            )
            .ok()?;
        let trace = run.trace.unwrap();
        let mut tie = trace.static_mask_margin;
        let mut relu = f64::INFINITY;
        for s in &trace.steps {
            tie = tie.min(s.tie_margin);
            relu = relu.min(s.relu_margin);
        }
        // Huber kink distance on the raw-scale errors
        let mut huber_margin = f64::INFINITY;
        for (p, t) in run.preds_raw.data().iter().zip(batch.y_raw.data()) {
            huber_margin = huber_margin.min(((p - t).abs() - model.cfg.huber_kappa).abs());
        }
        let loss_ok = run.loss.map(|l| g.value(l).data()[0].is_finite()) == Some(true);
        (tie > 1e-3 && relu > 1e-3 && huber_margin > 1e-3 && loss_ok)
            .then_some((tie, relu.min(huber_margin)))
    };

    let mut chosen = None;
    for seed in 0..64u64 {
        let model = MetaDg::<f64>::new(cfg.clone(), &Rng::new(seed)).unwrap();
        if let Some(margins) = margin_ok(&model) {
            chosen = Some((model, seed, margins));
            break;
        }
    }
    let (mut model, seed, (tie, relu)) =
        chosen.expect("no seed with safe classification margins in 64 tries");

    // analytic gradients
    let (analytic, n_params) = {
        let mut g = Graph::<f64>::new();
        let run = model
            .forward(
                &mut g,
                &batch,
                &prep.normalizer,
                ForwardOpts {
                    training: true,
                    ..ForwardOpts::default()
                },
            )
            .unwrap();
        let grads = g.backward(run.loss.unwrap());
        let per_param: Vec<Vec<f64>> = run
            .param_vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                grads
                    .get(v)
                    .map(|a| a.to_f64_vec())
                    .unwrap_or_else(|| vec![0.0; model.params()[i].value.len()])
            })
            .collect();
        let n: usize = per_param.iter().map(|p| p.len()).sum();
        (per_param, n)
    };

    let loss_of = |model: &MetaDg<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let run = model
            .forward(&mut g, &batch, &prep.normalizer, ForwardOpts::default())
            .unwrap();
        g.value(run.loss.unwrap()).data()[0]
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let n_tensors = model.params().len();
    for pi in 0..n_tensors {
        let len = model.params()[pi].value.len();
        let name = model.params()[pi].name.clone();
        for j in 0..len {
            let orig = model.params()[pi].value.data()[j];
            model.param_mut(pi).data_mut()[j] = orig + h;
            let up = loss_of(&model);
            model.param_mut(pi).data_mut()[j] = orig - h;
            let down = loss_of(&model);
            model.param_mut(pi).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            // absolute differences below 1e-8 sit under the f64 resolution
            // of central differences at h = 1e-5 on this loss scale
            if (a - fd).abs() < 1e-8 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{j}]");
            }
            assert!(
                rel < 1e-4,
                "gradient mismatch at {name}[{j}]: analytic {a:.3e}, fd {fd:.3e}, rel {rel:.3e}"
            );
        }
    }
    println!(
        "acceptance criterion 3 (gradient check): PASS \
         ({n_params} parameters, seed {seed}, margins tie {tie:.2e} / kink {relu:.2e}, \
         worst rel err {worst:.2e} at {worst_name})"
    );
}

/// Overfit configuration shared by criterion 4 and 6: N = 8, exactly 200
/// training windows, low-noise synthetic series.
fn overfit_setup(
    mutate: impl Fn(&mut ModelConfig),
) -> (ModelConfig, metadg::data::PreparedData) {
    let mut cfg = ModelConfig::default();
    cfg.num_nodes = 8;
    cfg.horizon_in = 6;
    cfg.horizon_out = 6;
    cfg.d_s = 6;
    cfg.d_tod = 4;
    cfg.d_dow = 2;
    cfg.d_c = 2;
    cfg.d_hidden = 24;
    cfg.d_attn = 8;
    cfg.batch_size = 16;
    cfg.lr = 3e-3;
    cfg.dropout = 0.0;
    cfg.max_epochs = 200;
    cfg.patience = 200;
    cfg.synthetic_steps = 352; // 60% split holds 211 steps = 200 windows
    mutate(&mut cfg);
    let mut spec = SyntheticSpec::new(cfg.num_nodes, cfg.synthetic_steps, 7);
    spec.noise_amp = 0.2;
    let prep = split_and_window(spec.generate(), &cfg).unwrap();
    assert_eq!(prep.train.len(), 200);
    (cfg, prep)
}

#[test]
fn criterion_4_overfit_target() {
    let variants: [(&str, fn(&mut ModelConfig)); 3] = [
        ("full model", |_| {}),
        ("w/o SCE", |c| c.use_sce = false),
        ("w/o DGQ", |c| c.use_dgq = false),
    ];
    let mut summary = Vec::new();
    for (name, mutate) in variants {
        let (cfg, prep) = overfit_setup(mutate);
        let target = 0.05 * prep.normalizer.std;
        let mut reached = None;
        {
            let prep_ref = &prep;
            let reached = &mut reached;
            let mut stop = |m: &MetaDg<f32>, r: &EpochRecord| {
                // the Huber train loss bounds MAE from below only loosely;
                // measure actual train MAE once the loss is in range
                if r.train_loss < 0.7 {
                    let mae = train::evaluate(m, prep_ref, Split::Train)
                        .unwrap()
                        .overall
                        .mae;
                    if mae < target {
                        *reached = Some((r.epoch, mae));
                        return true;
                    }
                }
                false
            };
            train_loop::<f32>(&cfg, &prep, None, Some(&mut stop)).unwrap();
        }
        let (epoch, mae) = reached.unwrap_or_else(|| {
            panic!("{name}: train MAE did not reach {target:.4} within 200 epochs")
        });
        summary.push(format!("{name}: MAE {mae:.3} < {target:.3} at epoch {epoch}"));
    }
    println!(
        "acceptance criterion 4 (overfit target): PASS ({})",
        summary.join("; ")
    );
}

#[test]
fn criterion_5_variational_dropout_contract() {
    let mut cfg = tiny_cfg();
    cfg.dropout = 0.35;
    let series = SyntheticSpec::new(cfg.num_nodes, cfg.synthetic_steps, 11).generate();
    let prep = split_and_window(series, &cfg).unwrap();
    let model = MetaDg::<f64>::new(cfg.clone(), &Rng::new(13)).unwrap();
    let batch = prep.batch::<f64>(&prep.train[..2]);

    let mut rng = Rng::new(21).fork("dropout");
    let masks_of = |g_rng: &mut Rng| {
        let mut g = Graph::<f64>::new();
        let run = model
            .forward(
                &mut g,
                &batch,
                &prep.normalizer,
                ForwardOpts {
                    training: true,
                    trace: true,
                    rng: Some(g_rng),
                    ..ForwardOpts::default()
                },
            )
            .unwrap();
        run.trace.unwrap()
    };
    let w1 = masks_of(&mut rng);
    // identical masks at every step within a window
    let first = &w1.steps[0].applied_masks;
    assert!(!first.is_empty(), "no masks recorded");
    for step in &w1.steps {
        assert_eq!(step.applied_masks.len(), first.len());
        for (a, b) in first.iter().zip(&step.applied_masks) {
            assert_eq!(a.1.data(), b.1.data(), "mlp-input mask changed mid-window");
            assert_eq!(a.2.data(), b.2.data(), "hidden mask changed mid-window");
        }
    }
    // a fresh window resamples
    let w2 = masks_of(&mut rng);
    let second = &w2.steps[0].applied_masks;
    let identical = first
        .iter()
        .zip(second)
        .all(|(a, b)| a.1.data() == b.1.data() && a.2.data() == b.2.data());
    assert!(!identical, "masks failed to resample across windows");
    // and an independently seeded stream differs too
    let mut other = Rng::new(22).fork("dropout");
    let w3 = masks_of(&mut other);
    let third = &w3.steps[0].applied_masks;
    let same_as_first = first
        .iter()
        .zip(third)
        .all(|(a, b)| a.1.data() == b.1.data() && a.2.data() == b.2.data());
    assert!(!same_as_first, "masks identical across different seeds");
    println!(
        "acceptance criterion 5 (variational dropout): PASS \
         ({} branches x {} steps share masks; windows and seeds resample)",
        first.len(),
        w1.steps.len()
    );
}

#[test]
fn criterion_6_training_determinism() {
    let (cfg, prep) = overfit_setup(|c| {
        c.max_epochs = 1;
        c.patience = 1;
        c.dropout = 0.1; // exercise the mask stream too
    });
    let a = train_loop::<f32>(&cfg, &prep, None, None).unwrap();
    let b = train_loop::<f32>(&cfg, &prep, None, None).unwrap();
    let (la, lb) = (
        a.manifest.epochs[0].train_loss,
        b.manifest.epochs[0].train_loss,
    );
    assert_eq!(
        la.to_bits(),
        lb.to_bits(),
        "epoch-1 training loss differs between identical runs"
    );
    assert_eq!(
        a.manifest.epochs[0].val_loss.to_bits(),
        b.manifest.epochs[0].val_loss.to_bits()
    );
    println!(
        "acceptance criterion 6 (determinism): PASS \
         (epoch-1 loss bitwise equal: {la:.9e})"
    );
}

#[test]
fn criterion_7_metric_correctness() {
    use metadg::data::compute_metrics;

    // hand case; the defined masked MAPE (|e|/truth over truth >= 1) gives
    // (1/1 + 2/2)/2 * 100 = 100.0 here, not the 75.0 sometimes quoted,
    // which is only reachable by dividing the second entry by the
    // prediction instead of the truth
    let hand = compute_metrics(&[2.0, 4.0], &[1.0, 2.0], 1, 2, 1.0);
    assert!((hand.overall.mae - 1.5).abs() < 1e-12);
    assert!((hand.overall.rmse - 2.5f64.sqrt()).abs() < 1e-12);
    assert!((hand.overall.mape - 100.0).abs() < 1e-12);

    // random tensors vs an independent scalar loop, including zero-masking
    let mut rng = Rng::new(77);
    let (m, h, n) = (4, 3, 5);
    let total = m * h * n;
    let pred: Vec<f64> = (0..total).map(|_| rng.uniform(0.0, 60.0)).collect();
    let mut truth: Vec<f64> = (0..total).map(|_| rng.uniform(0.0, 60.0)).collect();
    for i in (0..total).step_by(9) {
        truth[i] = 0.0; // force masked entries
    }
    let table = compute_metrics(&pred, &truth, h, n, 1.0);

    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut ape = 0.0;
    let mut ape_n = 0usize;
    let mut per_h_abs = vec![0.0; h];
    let mut per_h_n = vec![0usize; h];
    for w in 0..m {
        for hh in 0..h {
            for i in 0..n {
                let idx = (w * h + hh) * n + i;
                let e = pred[idx] - truth[idx];
                abs += e.abs();
                sq += e * e;
                per_h_abs[hh] += e.abs();
                per_h_n[hh] += 1;
                if truth[idx] >= 1.0 {
                    ape += (e / truth[idx]).abs();
                    ape_n += 1;
                }
            }
        }
    }
    let want_mae = abs / total as f64;
    let want_rmse = (sq / total as f64).sqrt();
    let want_mape = 100.0 * ape / ape_n as f64;
    assert!((table.overall.mae - want_mae).abs() < 1e-10);
    assert!((table.overall.rmse - want_rmse).abs() < 1e-10);
    assert!((table.overall.mape - want_mape).abs() < 1e-10);
    for hh in 0..h {
        let want = per_h_abs[hh] / per_h_n[hh] as f64;
        assert!((table.per_horizon[hh].mae - want).abs() < 1e-10);
    }
    println!(
        "acceptance criterion 7 (metric correctness): PASS \
         (hand case 1.5 / {:.4} / 100.0 — note: the defined |e|/truth MAPE \
         yields 100.0, not 75.0; scalar-loop agreement < 1e-10)",
        2.5f64.sqrt()
    );
}

/// Full PEMS08 reproduction. Needs `pems08.npy` (shape [17856, 170],
/// flow channel) under `$METADG_DATA_ROOT` and several GPU-class hours of
/// CPU time; excluded from the default suite.
#[test]
#[ignore = "full-scale training run; provide pems08.npy and hours of CPU"]
fn criterion_8_full_pems08_training() {
    let root = std::env::var_os("METADG_DATA_ROOT")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::PathBuf::from("."));
    let cfg = ModelConfig::preset("pems08").unwrap();
    let prep = metadg::data::prepare(&cfg, &root).expect("pems08.npy under METADG_DATA_ROOT");
    let outcome = train_loop::<f32>(&cfg, &prep, None, None).unwrap();
    let mae = outcome.test_metrics.unwrap().overall.mae;
    assert!(
        mae <= 13.70,
        "PEMS08 test MAE {mae:.2} exceeds 13.70 (reference 13.04 + 5%)"
    );
    println!("acceptance criterion 8 (full PEMS08): PASS (test MAE {mae:.2} <= 13.70)");
}
