//! Row-major dense arrays with NumPy-style broadcasting.

use super::Element;

/// A contiguous row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Array<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![E::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: E) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Array::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Reinterpret with a new shape of the same total size.
    pub fn reshaped(&self, shape: Vec<usize>) -> Array<E> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Array {
            shape,
            data: self.data.clone(),
        }
    }

    /// Value at a multi-index (debug/test helper, not a hot path).
    pub fn at(&self, idx: &[usize]) -> E {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for d in (0..idx.len()).rev() {
            assert!(idx[d] < self.shape[d]);
            off += idx[d] * stride;
            stride *= self.shape[d];
        }
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Array<E> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Array<E>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise binary op with NumPy broadcasting.
    pub fn broadcast_zip(&self, other: &Array<E>, f: impl Fn(E, E) -> E) -> Array<E> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Array {
                shape: self.shape.clone(),
                data,
            };
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", self.shape, other.shape));
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        let nd = out_shape.len();
        let mut idx = vec![0usize; nd];
        let mut oa = 0usize;
        let mut ob = 0usize;
        for _ in 0..total {
            data.push(f(self.data[oa], other.data[ob]));
            // odometer increment over the output index space
            for d in (0..nd).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                oa -= sa[d] * out_shape[d];
                ob -= sb[d] * out_shape[d];
            }
        }
        Array {
            shape: out_shape,
            data,
        }
    }

    /// Sum entries so the result has `target` shape (inverse of broadcasting).
    pub fn reduce_to(&self, target: &[usize]) -> Array<E> {
        if self.shape == target {
            return self.clone();
        }
        let mut out = Array::zeros(target);
        let nd = self.shape.len();
        debug_assert!(target.len() <= nd);
        let st = broadcast_strides(target, &self.shape);
        let mut idx = vec![0usize; nd];
        let mut ot = 0usize;
        for i in 0..self.data.len() {
            out.data[ot] += self.data[i];
            for d in (0..nd).rev() {
                idx[d] += 1;
                ot += st[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
                ot -= st[d] * self.shape[d];
            }
        }
        out
    }
}

/// Broadcast shape of two operand shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for d in 0..nd {
        let da = if d + a.len() >= nd { a[d + a.len() - nd] } else { 1 };
        let db = if d + b.len() >= nd { b[d + b.len() - nd] } else { 1 };
        if da == db || db == 1 {
            out[d] = da;
        } else if da == 1 {
            out[d] = db;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Per-dimension strides of `shape` viewed in `out_shape`'s index space,
/// with zero stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1usize;
    for d in (0..shape.len()).rev() {
        let od = d + nd - shape.len();
        strides[od] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Batched matrix multiply with optional transposition of either operand's
/// trailing two axes. Leading (batch) axes broadcast.
pub fn batched_matmul<E: Element>(
    a: &Array<E>,
    b: &Array<E>,
    ta: bool,
    tb: bool,
) -> Array<E> {
    assert!(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs rank >= 2");
    let (am, ak) = mat_dims(a.shape(), ta);
    let (bk, bn) = mat_dims(b.shape(), tb);
    assert_eq!(
        ak, bk,
        "matmul inner dims: {:?} (ta={}) vs {:?} (tb={})",
        a.shape(),
        ta,
        b.shape(),
        tb
    );
    let a_batch = &a.shape()[..a.ndim() - 2];
    let b_batch = &b.shape()[..b.ndim() - 2];
    let batch = broadcast_shape(a_batch, b_batch)
        .unwrap_or_else(|| panic!("matmul batch dims {:?} vs {:?}", a_batch, b_batch));
    let sa = broadcast_strides(a_batch, &batch);
    let sb = broadcast_strides(b_batch, &batch);
    let a_mat = a.shape()[a.ndim() - 2] * a.shape()[a.ndim() - 1];
    let b_mat = b.shape()[b.ndim() - 2] * b.shape()[b.ndim() - 1];
    let n_batch: usize = batch.iter().product();

    let mut out_shape = batch.clone();
    out_shape.push(am);
    out_shape.push(bn);
    let mut out = vec![E::ZERO; n_batch * am * bn];

    let nd = batch.len();
    let mut idx = vec![0usize; nd];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for bi in 0..n_batch {
        let pa = &a.data()[oa * a_mat..oa * a_mat + a_mat];
        let pb = &b.data()[ob * b_mat..ob * b_mat + b_mat];
        let po = &mut out[bi * am * bn..(bi + 1) * am * bn];
        matmul_kernel(pa, pb, po, am, ak, bn, ta, tb);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * batch[d];
            ob -= sb[d] * batch[d];
        }
    }
    Array::new(out_shape, out)
}

fn mat_dims(shape: &[usize], transposed: bool) -> (usize, usize) {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

/// Single-matrix kernel. `a` is stored [m,k] (or [k,m] if `ta`), `b` is
/// stored [k,n] (or [n,k] if `tb`), `out` is [m,n] and must be zeroed.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            // ikj: stream rows of b
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            // rows of a dot rows of b
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = E::ZERO;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    *o = acc;
                }
            }
        }
        (true, false) => {
            // a stored [k,m]: pkj order
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let aip = arow[i];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = E::ZERO;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
}
