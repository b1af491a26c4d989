//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] is an append-only list of nodes; node ids are their
//! topological order, so backward is a single reverse sweep. Each op stores
//! a closure that maps the output gradient to per-parent gradients. Values
//! are reference-counted so closures can capture what they need cheaply.

use std::rc::Rc;

use super::array::{batched_matmul, Array};
use super::Element;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&Array<E>) -> Vec<Array<E>>>;

struct Node<E: Element> {
    value: Rc<Array<E>>,
    parents: Vec<Var>,
    backward: Option<BackFn<E>>,
    needs_grad: bool,
    label: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<E: Element> {
    grads: Vec<Option<Array<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Var) -> Option<&Array<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Reverse-mode tape over [`Array`] values.
#[derive(Default)]
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Array<E>,
        parents: Vec<Var>,
        backward: Option<BackFn<E>>,
    ) -> Var {
        let needs_grad =
            backward.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&mut self, value: Array<E>) -> Var {
        self.push(value, vec![], None)
    }

    /// Insert a leaf that accumulates gradients (a parameter).
    pub fn param(&mut self, value: Array<E>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            needs_grad: true,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<E> {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Array<E>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// Scan nodes in creation order for the first non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Some(
                    n.label
                        .clone()
                        .unwrap_or_else(|| format!("node#{i}")),
                );
            }
        }
        None
    }

    // ---- elementwise binary ops (broadcasting) ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = va.broadcast_zip(&vb, |x, y| x + y);
        let (spa, spb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.reduce_to(&spa), g.reduce_to(&spb)]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = va.broadcast_zip(&vb, |x, y| x - y);
        let (spa, spb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.reduce_to(&spa), g.map(|x| -x).reduce_to(&spb)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = va.broadcast_zip(&vb, |x, y| x * y);
        let (spa, spb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    g.broadcast_zip(&vb, |x, y| x * y).reduce_to(&spa),
                    g.broadcast_zip(&va, |x, y| x * y).reduce_to(&spb),
                ]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = va.broadcast_zip(&vb, |x, y| x / y);
        let (spa, spb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = g.broadcast_zip(&vb, |x, y| x / y).reduce_to(&spa);
                let num = g.broadcast_zip(&va, |x, y| x * y);
                let db = num
                    .broadcast_zip(&vb, |x, y| -x / (y * y))
                    .reduce_to(&spb);
                vec![da, db]
            })),
        )
    }

    // ---- scalar ops ----

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = E::from_f64(c);
        let out = self.value(a).map(|x| x + cc);
        self.push(out, vec![a], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = E::from_f64(c);
        let out = self.value(a).map(|x| x * cc);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.map(|x| x * cc)])),
        )
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let cc = E::from_f64(c);
        let out = self.value(a).map(|x| cc - x);
        self.push(out, vec![a], Some(Box::new(|g| vec![g.map(|x| -x)])))
    }

    /// `1 - a`, the usual gate complement.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.rsub_scalar(1.0, a)
    }

    // ---- elementwise unary ops ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = E::ONE;
        let out = self.value(a).map(|x| one / (one + (-x).exp()));
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&y, |gv, yv| gv * yv * (one - yv))]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let y = Rc::new(out.clone());
        let one = E::ONE;
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&y, |gv, yv| gv * (one - yv * yv))]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let out = va.map(|x| x.max(E::ZERO));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&va, |gv, xv| {
                    if xv > E::ZERO {
                        gv
                    } else {
                        E::ZERO
                    }
                })]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&y, |gv, yv| gv * yv)]
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        let y = Rc::new(out.clone());
        let half = E::from_f64(0.5);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&y, |gv, yv| gv * half / yv)]
            })),
        )
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let out = va.map(|x| x.cos());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&va, |gv, xv| -gv * xv.sin())]
            })),
        )
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let out = va.map(|x| x.sin());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.broadcast_zip(&va, |gv, xv| gv * xv.cos())]
            })),
        )
    }

    // ---- softmax over the trailing axis ----

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let d = *va.shape().last().expect("softmax needs rank >= 1");
        let mut out = Array::zeros(va.shape());
        for (row_in, row_out) in va
            .data()
            .chunks_exact(d)
            .zip(out.data_mut().chunks_exact_mut(d))
        {
            let mut mx = row_in[0];
            for &v in row_in {
                mx = mx.max(v);
            }
            let mut sum = E::ZERO;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                // dx = y * (g - sum(g*y)) per row
                let mut dx = Array::zeros(y.shape());
                for ((gr, yr), dr) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(dx.data_mut().chunks_exact_mut(d))
                {
                    let mut dot = E::ZERO;
                    for (gv, yv) in gr.iter().zip(yr) {
                        dot += *gv * *yv;
                    }
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = *yv * (*gv - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- matrix products ----

    /// Batched `a @ b` with broadcasting over leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = batched_matmul(&va, &vb, false, false);
        let (spa, spb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = batched_matmul(g, &vb, false, true).reduce_to(&spa);
                let db = batched_matmul(&va, g, true, false).reduce_to(&spb);
                vec![da, db]
            })),
        )
    }

    /// Batched `a @ b^T` (transpose of the trailing two axes of `b`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = batched_matmul(&va, &vb, false, true);
        let (spa, spb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = batched_matmul(g, &vb, false, false).reduce_to(&spa);
                let db = batched_matmul(g, &va, true, false).reduce_to(&spb);
                vec![da, db]
            })),
        )
    }

    // ---- reductions ----

    /// Sum of all entries, shaped `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let mut acc = E::ZERO;
        for &v in va.data() {
            acc += v;
        }
        let sp = va.shape().to_vec();
        self.push(
            Array::scalar(acc),
            vec![a],
            Some(Box::new(move |g| {
                vec![Array::full(&sp, g.data()[0])]
            })),
        )
    }

    /// Mean of all entries, shaped `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_keep(&mut self, a: Var, axes: &[usize]) -> Var {
        let va = self.rc(a);
        let mut target = va.shape().to_vec();
        for &ax in axes {
            target[ax] = 1;
        }
        let out = va.reduce_to(&target);
        let sp = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let zero = Array::zeros(&sp);
                vec![zero.broadcast_zip(g, |_, gv| gv)]
            })),
        )
    }

    /// Mean over `axes`, keeping them as size-1 dims.
    pub fn mean_keep(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.value(a).shape().to_vec();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_keep(a, axes);
        self.mul_scalar(s, 1.0 / count as f64)
    }

    /// Sum over the trailing axis, keeping it as a size-1 dim.
    pub fn sum_last_keep(&mut self, a: Var) -> Var {
        let last = self.value(a).ndim() - 1;
        self.sum_keep(a, &[last])
    }

    // ---- structural ops ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = self.rc(a);
        let out = va.reshaped(shape);
        let sp = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.reshaped(sp.clone())])),
        )
    }

    /// Concatenate along the trailing axis. All inputs must agree on the
    /// leading axes.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Array<E>>> = parts.iter().map(|&p| self.rc(p)).collect();
        let lead = &vals[0].shape()[..vals[0].ndim() - 1];
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(&v.shape()[..v.ndim() - 1], lead, "concat leading dims");
                *v.shape().last().unwrap()
            })
            .collect();
        let total_w: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(total_w);
        let mut data = Vec::with_capacity(rows * total_w);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Array::new(shape, data);
        let widths_b = widths.clone();
        let lead_b = lead.to_vec();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let rows: usize = lead_b.iter().product();
                let total_w: usize = widths_b.iter().sum();
                let mut grads = Vec::with_capacity(widths_b.len());
                let mut off = 0usize;
                for &w in &widths_b {
                    let mut shape = lead_b.clone();
                    shape.push(w);
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g.data()[r * total_w + off..r * total_w + off + w]);
                    }
                    grads.push(Array::new(shape, part));
                    off += w;
                }
                grads
            })),
        )
    }

    /// Select rows of a `[R, d]` table by index, producing `[B, d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let vt = self.rc(table);
        assert_eq!(vt.ndim(), 2, "gather_rows wants a [rows, dim] table");
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        for &i in indices {
            assert!(i < rows, "gather index {i} out of range {rows}");
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Array::new(vec![indices.len(), d], data);
        let idx = indices.to_vec();
        self.push(
            out,
            vec![table],
            Some(Box::new(move |g| {
                let mut dt = Array::zeros(&[rows, d]);
                for (b, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[i * d + j] += g.data()[b * d + j];
                    }
                }
                vec![dt]
            })),
        )
    }

    /// Diagonal of the trailing two axes: `[..., N, N] -> [..., N]`.
    pub fn diag_last2(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let nd = va.ndim();
        assert!(nd >= 2 && va.shape()[nd - 1] == va.shape()[nd - 2]);
        let n = va.shape()[nd - 1];
        let batch: usize = va.shape()[..nd - 2].iter().product();
        let mut shape = va.shape()[..nd - 2].to_vec();
        shape.push(n);
        let mut data = Vec::with_capacity(batch * n);
        for b in 0..batch {
            for i in 0..n {
                data.push(va.data()[b * n * n + i * n + i]);
            }
        }
        let out = Array::new(shape, data);
        let sp = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Array::zeros(&sp);
                for b in 0..batch {
                    for i in 0..n {
                        dx.data_mut()[b * n * n + i * n + i] = g.data()[b * n + i];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Mean Huber loss between `pred` and a constant target, shaped `[1]`.
    pub fn huber_mean(&mut self, pred: Var, target: &Array<E>, kappa: f64) -> Var {
        let vp = self.rc(pred);
        assert_eq!(vp.shape(), target.shape(), "huber shapes");
        let k = E::from_f64(kappa);
        let half = E::from_f64(0.5);
        let n = vp.len();
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut acc = E::ZERO;
        for (&p, &t) in vp.data().iter().zip(target.data()) {
            let e = p - t;
            let ae = e.abs();
            acc += if ae <= k {
                half * e * e
            } else {
                k * (ae - half * k)
            };
        }
        let tgt = target.clone();
        self.push(
            Array::scalar(acc * inv_n),
            vec![pred],
            Some(Box::new(move |g| {
                let gs = g.data()[0] * inv_n;
                let dx = vp.broadcast_zip(&tgt, |p, t| {
                    let e = p - t;
                    gs * e.max(-k).min(k)
                });
                vec![dx]
            })),
        )
    }

    // ---- backward sweep ----

    /// Backpropagate from a scalar loss. Returns gradients for every node
    /// that required them; intermediate gradients are freed as the sweep
    /// passes them, leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Grads<E> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), E::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(back) = &node.backward else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let pgrads = back(&g);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}
