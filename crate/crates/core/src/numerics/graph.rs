//! Reverse-mode autodiff over a dynamically recorded tape.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] replays it
//! in reverse and accumulates gradients for every node. Tapes are cheap,
//! single-threaded and rebuilt per step. Shape mismatches are programming
//! errors and panic; domain errors on user-facing entry points live in
//! [`crate::numerics::functional`].

use std::rc::Rc;

use super::tensor::{matmul, matmul_a_bt_acc, matmul_at_b_acc, RawTensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    dims: Vec<usize>,
    data: Rc<Vec<f64>>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl GradStore {
    fn new(sizes: Vec<usize>) -> Self {
        GradStore { grads: vec![None; sizes.len()], sizes }
    }

    fn buf(&mut self, id: usize) -> &mut Vec<f64> {
        let size = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; size])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>, back: Option<BackFn>) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node { dims, data: Rc::new(data), back });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input node (parameter or data). Gradients flow to every leaf.
    pub fn leaf(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(dims, data, None)
    }

    pub fn leaf_tensor(&mut self, t: &RawTensor) -> Var {
        self.leaf(t.dims.clone(), t.data.clone())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(vec![1], vec![v])
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn value(&self, v: Var) -> RawTensor {
        RawTensor { dims: self.nodes[v.0].dims.clone(), data: self.nodes[v.0].data.to_vec() }
    }

    fn rc(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes[v.0].data)
    }

    /// Trailing-axis width and row count used by rowwise ops.
    fn shape2(&self, v: Var) -> (usize, usize) {
        let n = *self.nodes[v.0].dims.last().expect("rank >= 1");
        (self.nodes[v.0].data.len() / n, n)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn assert_same_dims(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.nodes[a.0].dims, self.nodes[b.0].dims, "{op}: dims mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "add");
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv;
                }
                for (o, &gv) in gs.buf(b.0).iter_mut().zip(g) {
                    *o += gv;
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "sub");
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv;
                }
                for (o, &gv) in gs.buf(b.0).iter_mut().zip(g) {
                    *o -= gv;
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "mul");
        let av = self.rc(a);
        let bv = self.rc(b);
        let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &y) in gs.buf(a.0).iter_mut().zip(g).zip(bv.iter()) {
                    *o += gv * y;
                }
                for ((o, &gv), &x) in gs.buf(b.0).iter_mut().zip(g).zip(av.iter()) {
                    *o += gv * x;
                }
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_dims(a, b, "div");
        let av = self.rc(a);
        let bv = self.rc(b);
        let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x / y).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &y) in gs.buf(a.0).iter_mut().zip(g).zip(bv.iter()) {
                    *o += gv / y;
                }
                for (i, (o, &gv)) in gs.buf(b.0).iter_mut().zip(g).enumerate() {
                    *o -= gv * av[i] / (bv[i] * bv[i]);
                }
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o -= gv;
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv * c;
                }
            })),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv;
                }
            })),
        )
    }

    /// Multiply a tensor by a scalar node ([1]).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.numel(s), 1, "scale_by: scalar expected");
        let av = self.rc(a);
        let sv = self.data(s)[0];
        let out: Vec<f64> = av.iter().map(|x| x * sv).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv * sv;
                }
                let ds: f64 = g.iter().zip(av.iter()).map(|(&gv, &x)| gv * x).sum();
                gs.buf(s.0)[0] += ds;
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let y = Rc::new(out.clone());
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &yv) in gs.buf(a.0).iter_mut().zip(g).zip(y.iter()) {
                    *o += gv * yv;
                }
            })),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out: Vec<f64> = av.iter().map(|x| x.ln()).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &x) in gs.buf(a.0).iter_mut().zip(g).zip(av.iter()) {
                    *o += gv / x;
                }
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let y = Rc::new(out.clone());
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &yv) in gs.buf(a.0).iter_mut().zip(g).zip(y.iter()) {
                    *o += gv * (1.0 - yv * yv);
                }
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.sqrt()).collect();
        let y = Rc::new(out.clone());
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &yv) in gs.buf(a.0).iter_mut().zip(g).zip(y.iter()) {
                    *o += gv * 0.5 / yv;
                }
            })),
        )
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out: Vec<f64> = av.iter().map(|x| x * x).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for ((o, &gv), &x) in gs.buf(a.0).iter_mut().zip(g).zip(av.iter()) {
                    *o += gv * 2.0 * x;
                }
            })),
        )
    }

    // ── matrix / rowwise ────────────────────────────────────────────

    /// a: m×k, b: k×n → m×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape2(a);
        let (kb, n) = self.shape2(b);
        assert_eq!(k, kb, "matmul: inner dims mismatch");
        let av = self.rc(a);
        let bv = self.rc(b);
        let out = matmul(&av, &bv, m, k, n);
        self.push(
            vec![m, n],
            out,
            Some(Box::new(move |g, gs| {
                matmul_a_bt_acc(g, &bv, m, n, k, gs.buf(a.0));
                matmul_at_b_acc(&av, g, m, k, n, gs.buf(b.0));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let av = self.rc(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push(
            vec![n, m],
            out,
            Some(Box::new(move |g, gs| {
                let buf = gs.buf(a.0);
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            })),
        )
    }

    /// Broadcast-add a length-n row vector to every row of an m×n tensor.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (m, n) = self.shape2(a);
        assert_eq!(self.numel(r), n, "add_row: width mismatch");
        let rv = self.rc(r);
        let out: Vec<f64> =
            self.data(a).iter().enumerate().map(|(i, x)| x + rv[i % n]).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv;
                }
                let buf = gs.buf(r.0);
                for i in 0..m {
                    for j in 0..n {
                        buf[j] += g[i * n + j];
                    }
                }
            })),
        )
    }

    /// Broadcast-multiply every row of an m×n tensor by a length-n row vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (m, n) = self.shape2(a);
        assert_eq!(self.numel(r), n, "mul_row: width mismatch");
        let av = self.rc(a);
        let rv = self.rc(r);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * rv[i % n]).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (i, (o, &gv)) in gs.buf(a.0).iter_mut().zip(g).enumerate() {
                    *o += gv * rv[i % n];
                }
                let buf = gs.buf(r.0);
                for i in 0..m {
                    for j in 0..n {
                        buf[j] += g[i * n + j] * av[i * n + j];
                    }
                }
            })),
        )
    }

    /// Scale row i of an m×n tensor by c[i].
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (m, n) = self.shape2(a);
        assert_eq!(self.numel(c), m, "mul_col: height mismatch");
        let av = self.rc(a);
        let cv = self.rc(c);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * cv[i / n]).collect();
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                for (i, (o, &gv)) in gs.buf(a.0).iter_mut().zip(g).enumerate() {
                    *o += gv * cv[i / n];
                }
                let buf = gs.buf(c.0);
                for i in 0..m {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * av[i * n + j];
                    }
                    buf[i] += s;
                }
            })),
        )
    }

    /// Numerically stabilized softmax over the trailing axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let av = self.rc(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out[i * n + j] /= s;
            }
        }
        let y = Rc::new(out.clone());
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                let buf = gs.buf(a.0);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        buf[i * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            })),
        )
    }

    /// Per-row normalization to zero mean / unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.shape2(a);
        let av = self.rc(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * is;
            }
        }
        let y = Rc::new(out.clone());
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                let buf = gs.buf(a.0);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym: f64 =
                        gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n as f64;
                    for j in 0..n {
                        buf[i * n + j] += inv_std[i] * (gr[j] - gm - yr[j] * gym);
                    }
                }
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let numel = self.numel(a);
        self.push(
            vec![1],
            vec![s],
            Some(Box::new(move |g, gs| {
                let gv = g[0];
                for o in gs.buf(a.0).iter_mut().take(numel) {
                    *o += gv;
                }
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let numel = self.numel(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / numel as f64)
    }

    /// Mean over rows: m×n → n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape2(a);
        let mut out = vec![0.0; n];
        for (i, &x) in self.data(a).iter().enumerate() {
            out[i % n] += x;
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.push(
            vec![n],
            out,
            Some(Box::new(move |g, gs| {
                let buf = gs.buf(a.0);
                let inv = 1.0 / m as f64;
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j] * inv;
                    }
                }
            })),
        )
    }

    /// Stack equal-width vectors (or single rows) into an m×n tensor.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: empty input");
        let n = self.numel(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert_eq!(self.numel(r), n, "stack_rows: width mismatch");
            out.extend_from_slice(self.data(r));
        }
        let parents: Vec<usize> = rows.iter().map(|v| v.0).collect();
        self.push(
            vec![rows.len(), n],
            out,
            Some(Box::new(move |g, gs| {
                for (i, &p) in parents.iter().enumerate() {
                    for (o, &gv) in gs.buf(p).iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *o += gv;
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ma, n) = self.shape2(a);
        let (mb, nb) = self.shape2(b);
        assert_eq!(n, nb, "concat_rows: width mismatch");
        let mut out = Vec::with_capacity((ma + mb) * n);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        self.push(
            vec![ma + mb, n],
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(&g[..ma * n]) {
                    *o += gv;
                }
                for (o, &gv) in gs.buf(b.0).iter_mut().zip(&g[ma * n..]) {
                    *o += gv;
                }
            })),
        )
    }

    /// Rows r0..r1 of an m×n tensor.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (m, n) = self.shape2(a);
        assert!(r0 < r1 && r1 <= m, "slice_rows: bad range");
        let out = self.data(a)[r0 * n..r1 * n].to_vec();
        self.push(
            vec![r1 - r0, n],
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0)[r0 * n..r1 * n].iter_mut().zip(g) {
                    *o += gv;
                }
            })),
        )
    }

    /// Row i of an m×n tensor, as a length-n vector.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let (m, n) = self.shape2(a);
        assert!(i < m, "row: index out of range");
        let out = self.data(a)[i * n..(i + 1) * n].to_vec();
        self.push(
            vec![n],
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0)[i * n..(i + 1) * n].iter_mut().zip(g) {
                    *o += gv;
                }
            })),
        )
    }

    /// Same data, new dims.
    pub fn reshape(&mut self, a: Var, new_dims: Vec<usize>) -> Var {
        assert_eq!(
            new_dims.iter().product::<usize>(),
            self.numel(a),
            "reshape: element count"
        );
        let out = self.data(a).to_vec();
        self.push(
            new_dims,
            out,
            Some(Box::new(move |g, gs| {
                for (o, &gv) in gs.buf(a.0).iter_mut().zip(g) {
                    *o += gv;
                }
            })),
        )
    }

    /// Arbitrary gather: out[i] = a[map[i]]. Backward scatter-adds.
    pub fn reindex(&mut self, a: Var, new_dims: Vec<usize>, map: std::sync::Arc<Vec<usize>>) -> Var {
        assert_eq!(new_dims.iter().product::<usize>(), map.len(), "reindex: map length");
        let av = self.rc(a);
        let out: Vec<f64> = map.iter().map(|&i| av[i]).collect();
        self.push(
            new_dims,
            out,
            Some(Box::new(move |g, gs| {
                let buf = gs.buf(a.0);
                for (&src, &gv) in map.iter().zip(g) {
                    buf[src] += gv;
                }
            })),
        )
    }

    /// Sliding-window mean over rows with edge-replicated asymmetric padding:
    /// ⌊(k−1)/2⌋ rows in front, ⌈(k−1)/2⌉ at the back.
    pub fn moving_average_rows(&mut self, a: Var, k: usize) -> Var {
        let (t, n) = self.shape2(a);
        assert!(k >= 1, "moving_average_rows: k >= 1");
        assert!(k <= 2 * t, "moving_average_rows: window larger than 2T");
        let front = (k - 1) / 2;
        let av = self.rc(a);
        let mut out = vec![0.0; t * n];
        let inv = 1.0 / k as f64;
        for ot in 0..t {
            for w in 0..k {
                let src = (ot + w).saturating_sub(front).min(t - 1);
                for j in 0..n {
                    out[ot * n + j] += av[src * n + j] * inv;
                }
            }
        }
        self.push(
            self.nodes[a.0].dims.clone(),
            out,
            Some(Box::new(move |g, gs| {
                let buf = gs.buf(a.0);
                for ot in 0..t {
                    for w in 0..k {
                        let src = (ot + w).saturating_sub(front).min(t - 1);
                        for j in 0..n {
                            buf[src * n + j] += g[ot * n + j] * inv;
                        }
                    }
                }
            })),
        )
    }

    // ── composites ──────────────────────────────────────────────────

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let ab = self.dot(a, b);
        let aa = self.dot(a, a);
        let bb = self.dot(b, b);
        let na = self.sqrt(aa);
        let nb = self.sqrt(bb);
        let denom = self.mul(na, nb);
        self.div(ab, denom)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Run reverse-mode accumulation from a scalar loss node.
    pub fn backward(&self, loss: Var) -> GradStore {
        assert_eq!(self.numel(loss), 1, "backward: loss must be scalar");
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.data.len()).collect();
        let mut gs = GradStore::new(sizes);
        gs.buf(loss.0)[0] = 1.0;
        for id in (0..=loss.0).rev() {
            let Some(g) = gs.grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                back(&g, &mut gs);
            }
            gs.grads[id] = Some(g);
        }
        gs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_product_chain() {
        // loss = sum((a*b + a)^2) with a=[1,2], b=[3,4]
        let mut g = Graph::new();
        let a = g.leaf(vec![2], vec![1.0, 2.0]);
        let b = g.leaf(vec![2], vec![3.0, 4.0]);
        let ab = g.mul(a, b);
        let s = g.add(ab, a);
        let sq = g.sqr(s);
        let loss = g.sum_all(sq);
        assert_eq!(g.data(loss)[0], 16.0 + 100.0);
        let gs = g.backward(loss);
        // d/da_i = 2*(a_i*b_i + a_i)*(b_i+1)
        let ga = gs.get(a).unwrap();
        assert_eq!(ga, &[2.0 * 4.0 * 4.0, 2.0 * 10.0 * 5.0]);
        let gb = gs.get(b).unwrap();
        assert_eq!(gb, &[2.0 * 4.0 * 1.0, 2.0 * 10.0 * 2.0]);
    }

    #[test]
    fn matmul_gradients_match_manual() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = g.leaf(vec![2, 2], vec![0.5, -1.0, 2.0, 1.5]);
        let c = g.matmul(a, b);
        let loss = g.sum_all(c);
        let gs = g.backward(loss);
        // dA = ones·Bᵀ, dB = Aᵀ·ones
        assert_eq!(gs.get(a).unwrap(), &[-0.5, 3.5, -0.5, 3.5]);
        assert_eq!(gs.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 3], vec![1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0]);
        let y = g.softmax_rows(a);
        let d = g.data(y);
        assert!((d[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn moving_average_hand_oracle() {
        // [1,2,3,4] per channel, k=3, padded [1,1,2,3,4,4] -> [4/3, 2, 3, 11/3]
        let mut g = Graph::new();
        let a = g.leaf(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.moving_average_rows(a, 3);
        let d = g.data(y);
        let expect = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        for (got, want) in d.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn moving_average_k1_identity_and_constant() {
        let mut g = Graph::new();
        let a = g.leaf(vec![5, 2], (0..10).map(|i| i as f64).collect());
        let y = g.moving_average_rows(a, 1);
        assert_eq!(g.data(y), g.data(a));
        let c = g.leaf(vec![6, 1], vec![7.0; 6]);
        for k in [2, 3, 4, 5] {
            let yc = g.moving_average_rows(c, k);
            assert!(g.data(yc).iter().all(|&v| (v - 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn layer_norm_rows_moments() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 4], vec![1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 5.0, 2.0]);
        let y = g.layer_norm_rows(a, 1e-12);
        let d = g.data(y);
        for i in 0..2 {
            let row = &d[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_values() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2], vec![1.0, 2.0]);
        let b = g.leaf(vec![2], vec![3.0, 4.0]);
        let c = g.cosine(a, b);
        assert!((g.data(c)[0] - 11.0 / (5.0_f64.sqrt() * 5.0)).abs() < 1e-12);
    }
}
