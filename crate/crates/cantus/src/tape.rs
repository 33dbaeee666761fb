//! Reverse-mode autodiff over a small f64 matrix type.
//!
//! Training and gradient checks run in f64 so central-difference comparisons
//! at h=1e-4 stay well inside the 1e-3 relative tolerance; the f32 kernels in
//! [`crate::tensor`] are reserved for the decode engine. The tape is an
//! append-only arena: ops push nodes whose backward closures capture the
//! parent values they need.

use crate::tensor::Mat;

/// Row-major f64 matrix used by the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Td {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Td {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Td { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Td { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Td { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Td { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&x| x as f64).collect() }
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&x| x as f32).collect())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    fn add_in_place(&mut self, other: &Td) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// out = a @ b
pub fn mm(a: &Td, b: &Td) -> Td {
    assert_eq!(a.cols, b.rows);
    let mut out = Td::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = out.row_mut(i);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// out = a @ b^T
pub fn mm_nt(a: &Td, b: &Td) -> Td {
    assert_eq!(a.cols, b.cols);
    let mut out = Td::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
        out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// out = a^T @ b
pub fn mm_tn(a: &Td, b: &Td) -> Td {
    assert_eq!(a.rows, b.rows);
    let mut out = Td::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Td, &mut dyn FnMut(usize, Td))>;

struct Node {
    value: Td,
    back: Option<BackFn>,
}

/// Append-only autodiff arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Td, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Td) -> Var {
        self.push(value, None)
    }

    pub fn leaf_from_mat(&mut self, m: &Mat) -> Var {
        self.leaf(Td::from_mat(m))
    }

    pub fn value(&self, v: Var) -> &Td {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let mut out = self.nodes[a.0].value.clone();
        out.add_in_place(&self.nodes[b.0].value);
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                acc(a.0, g.clone());
                acc(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let mut out = self.nodes[a.0].value.clone();
        for (x, y) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *x -= y;
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                acc(a.0, g.clone());
                let mut neg = g.clone();
                for v in neg.data.iter_mut() {
                    *v = -*v;
                }
                acc(b.0, neg);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let mut out = av.clone();
        for (x, y) in out.data.iter_mut().zip(&bv.data) {
            *x *= y;
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut ga = g.clone();
                for (x, y) in ga.data.iter_mut().zip(&bv.data) {
                    *x *= y;
                }
                acc(a.0, ga);
                let mut gb = g.clone();
                for (x, y) in gb.data.iter_mut().zip(&av.data) {
                    *x *= y;
                }
                acc(b.0, gb);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut ga = g.clone();
                for v in ga.data.iter_mut() {
                    *v *= c;
                }
                acc(a.0, ga);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v += c;
        }
        self.push(out, Some(Box::new(move |g, acc| acc(a.0, g.clone()))))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out = mm(&av, &bv);
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                acc(a.0, mm_nt(g, &bv));
                acc(b.0, mm_tn(&av, g));
            })),
        )
    }

    /// out = a @ b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out = mm_nt(&av, &bv);
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                acc(a.0, mm(g, &bv));
                acc(b.0, mm_tn(g, &av));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows, av.cols);
        let mut out = Td::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = av.data[i * c + j];
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gt = Td::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        gt.data[i * c + j] = g.data[j * r + i];
                    }
                }
                acc(a.0, gt);
            })),
        )
    }

    /// Gather rows of `table` by token id; backward scatter-adds.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = &self.nodes[table.0].value;
        let (v, d) = (tv.rows, tv.cols);
        let mut out = Td::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            assert!((id as usize) < v, "token id {id} out of vocab {v}");
            out.row_mut(r).copy_from_slice(tv.row(id as usize));
        }
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gt = Td::zeros(v, d);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = gt.row_mut(id as usize);
                    for (x, y) in dst.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(table.0, gt);
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut row_spans = Vec::new();
        let mut at = 0usize;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols, cols);
            data.extend_from_slice(&pv.data);
            row_spans.push((p.0, at, pv.rows));
            at += pv.rows;
        }
        let out = Td::from_vec(at, cols, data);
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                for &(pid, start, rows) in &row_spans {
                    let part = Td::from_vec(
                        rows,
                        cols,
                        g.data[start * cols..(start + rows) * cols].to_vec(),
                    );
                    acc(pid, part);
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows, av.cols);
        assert!(r0 <= r1 && r1 <= rows);
        let out = Td::from_vec(r1 - r0, cols, av.data[r0 * cols..r1 * cols].to_vec());
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gt = Td::zeros(rows, cols);
                gt.data[r0 * cols..r1 * cols].copy_from_slice(&g.data);
                acc(a.0, gt);
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows, av.cols);
        assert!(c0 <= c1 && c1 <= cols);
        let mut out = Td::zeros(rows, c1 - c0);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[c0..c1]);
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gt = Td::zeros(rows, cols);
                for r in 0..rows {
                    gt.row_mut(r)[c0..c1].copy_from_slice(g.row(r));
                }
                acc(a.0, gt);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let spans: Vec<(usize, usize)> = {
            let mut at = 0;
            parts
                .iter()
                .map(|&p| {
                    let c = self.shape(p).1;
                    let s = (p.0, at);
                    at += c;
                    (s.0, s.1)
                })
                .collect()
        };
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Td::zeros(rows, total);
        for (pi, &p) in parts.iter().enumerate() {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows, rows);
            let (_, off) = spans[pi];
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
        }
        let widths: Vec<(usize, usize, usize)> = parts
            .iter()
            .enumerate()
            .map(|(pi, &p)| (p.0, spans[pi].1, self.shape(p).1))
            .collect();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                for &(pid, off, w) in &widths {
                    let mut part = Td::zeros(g.rows, w);
                    for r in 0..g.rows {
                        part.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    acc(pid, part);
                }
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let pv = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for r in 0..gx.rows {
                    let p = pv.row(r);
                    let gr = gx.row_mut(r);
                    let dot: f64 = gr.iter().zip(p).map(|(x, y)| x * y).sum();
                    for (gi, &pi) in gr.iter_mut().zip(p) {
                        *gi = pi * (*gi - dot);
                    }
                }
                acc(a.0, gx);
            })),
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let lv = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for r in 0..gx.rows {
                    let gsum: f64 = gx.row(r).iter().sum();
                    let l = lv.row(r);
                    let gr = gx.row_mut(r);
                    for (gi, &li) in gr.iter_mut().zip(l) {
                        *gi -= li.exp() * gsum;
                    }
                }
                acc(a.0, gx);
            })),
        )
    }

    /// y_ij = x_ij * w_j / rms(x_i), with `w` a 1 x d weight.
    pub fn rmsnorm_rows(&mut self, x: Var, w: Var, eps: f64) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        assert_eq!(wv.rows, 1);
        assert_eq!(wv.cols, xv.cols);
        let d = xv.cols;
        let mut inv = vec![0.0f64; xv.rows];
        let mut out = Td::zeros(xv.rows, d);
        for r in 0..xv.rows {
            let ss: f64 = xv.row(r).iter().map(|v| v * v).sum();
            inv[r] = 1.0 / (ss / d as f64 + eps).sqrt();
            for (o, (&xi, &wi)) in out.row_mut(r).iter_mut().zip(xv.row(r).iter().zip(&wv.data)) {
                *o = xi * inv[r] * wi;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = Td::zeros(g.rows, d);
                let mut gw = Td::zeros(1, d);
                for r in 0..g.rows {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let ir = inv[r];
                    let s: f64 =
                        gr.iter().zip(&wv.data).zip(xr).map(|((gi, wi), xi)| gi * wi * xi).sum();
                    for k in 0..d {
                        gx.row_mut(r)[k] = ir * (gr[k] * wv.data[k] - xr[k] * s * ir * ir / d as f64);
                        gw.data[k] += gr[k] * xr[k] * ir;
                    }
                }
                acc(x.0, gx);
                acc(w.0, gw);
            })),
        )
    }

    /// Rotary position encoding over rows; `positions[r]` is the rotation
    /// index for row r, pairs rotated within each `head_dim` span.
    pub fn rotary_rows(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(positions.len(), xv.rows);
        assert_eq!(xv.cols % head_dim, 0);
        let mut out = xv.clone();
        let positions = positions.to_vec();
        let half = head_dim / 2;
        for (r, &pos) in positions.iter().enumerate() {
            let row = out.row_mut(r);
            for head in row.chunks_exact_mut(head_dim) {
                for i in 0..half {
                    let theta = pos as f64 * base.powf(-(2.0 * i as f64) / head_dim as f64);
                    let (sin, cos) = theta.sin_cos();
                    let a = head[2 * i];
                    let b = head[2 * i + 1];
                    head[2 * i] = a * cos - b * sin;
                    head[2 * i + 1] = a * sin + b * cos;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for (r, &pos) in positions.iter().enumerate() {
                    let row = gx.row_mut(r);
                    for head in row.chunks_exact_mut(head_dim) {
                        for i in 0..half {
                            let theta =
                                pos as f64 * base.powf(-(2.0 * i as f64) / head_dim as f64);
                            let (sin, cos) = theta.sin_cos();
                            let a = head[2 * i];
                            let b = head[2 * i + 1];
                            head[2 * i] = a * cos + b * sin;
                            head[2 * i + 1] = -a * sin + b * cos;
                        }
                    }
                }
                acc(x.0, gx);
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let mut out = av.clone();
        for v in out.data.iter_mut() {
            *v = *v / (1.0 + (-*v).exp());
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for (gi, &x) in gx.data.iter_mut().zip(&av.data) {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *gi *= s * (1.0 + x * (1.0 - s));
                }
                acc(a.0, gx);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let sv = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for (gi, &s) in gx.data.iter_mut().zip(&sv.data) {
                    *gi *= s * (1.0 - s);
                }
                acc(a.0, gx);
            })),
        )
    }

    /// log(sigmoid(x)) computed stably as -softplus(-x).
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let mut out = av.clone();
        for v in out.data.iter_mut() {
            *v = if *v > 0.0 { -(-*v).exp().ln_1p() } else { *v - v.exp().ln_1p() };
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for (gi, &x) in gx.data.iter_mut().zip(&av.data) {
                    *gi *= 1.0 / (1.0 + x.exp());
                }
                acc(a.0, gx);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = v.exp();
        }
        let ev = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for (gi, &e) in gx.data.iter_mut().zip(&ev.data) {
                    *gi *= e;
                }
                acc(a.0, gx);
            })),
        )
    }

    /// 1/sqrt(x + eps), elementwise.
    pub fn rsqrt(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = 1.0 / (*v + eps).sqrt();
        }
        let ov = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut gx = g.clone();
                for (gi, &o) in gx.data.iter_mut().zip(&ov.data) {
                    *gi *= -0.5 * o * o * o;
                }
                acc(a.0, gx);
            })),
        )
    }

    /// Row-wise dot product: (L x d, L x d) -> L x 1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let mut out = Td::zeros(av.rows, 1);
        for r in 0..av.rows {
            out.data[r] = av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum();
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut ga = bv.clone();
                let mut gb = av.clone();
                for r in 0..ga.rows {
                    let gr = g.data[r];
                    for v in ga.row_mut(r) {
                        *v *= gr;
                    }
                    for v in gb.row_mut(r) {
                        *v *= gr;
                    }
                }
                acc(a.0, ga);
                acc(b.0, gb);
            })),
        )
    }

    /// Multiply each row of `a` (L x d) by the matching entry of `col` (L x 1).
    pub fn mul_col_broadcast(&mut self, a: Var, col: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let cv = self.nodes[col.0].value.clone();
        assert_eq!(cv.cols, 1);
        assert_eq!(cv.rows, av.rows);
        let mut out = av.clone();
        for r in 0..out.rows {
            let c = cv.data[r];
            for v in out.row_mut(r) {
                *v *= c;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut ga = g.clone();
                let mut gc = Td::zeros(av.rows, 1);
                for r in 0..av.rows {
                    gc.data[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                    let c = cv.data[r];
                    for v in ga.row_mut(r) {
                        *v *= c;
                    }
                }
                acc(a.0, ga);
                acc(col.0, gc);
            })),
        )
    }

    /// Multiply a matrix by a 1x1 scalar variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let sv = self.nodes[s.0].value.item();
        let mut out = av.clone();
        for v in out.data.iter_mut() {
            *v *= sv;
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                let mut ga = g.clone();
                for v in ga.data.iter_mut() {
                    *v *= sv;
                }
                acc(a.0, ga);
                let gs: f64 = g.data.iter().zip(&av.data).map(|(x, y)| x * y).sum();
                acc(s.0, Td::scalar(gs));
            })),
        )
    }

    /// Broadcast-add a 1 x d row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let rv = self.nodes[row.0].value.clone();
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *v += b;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, acc| {
                acc(a.0, g.clone());
                let mut gr = Td::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &x) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(row.0, gr);
            })),
        )
    }

    /// Sum of a[r, targets[r]] over rows; returns a 1x1.
    pub fn gather_sum(&mut self, a: Var, targets: &[u32]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(targets.len(), av.rows);
        let (rows, cols) = (av.rows, av.cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += av.get(r, t as usize);
        }
        let targets = targets.to_vec();
        self.push(
            Td::scalar(total),
            Some(Box::new(move |g, acc| {
                let gs = g.item();
                let mut gt = Td::zeros(rows, cols);
                for (r, &t) in targets.iter().enumerate() {
                    gt.data[r * cols + t as usize] = gs;
                }
                acc(a.0, gt);
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows, av.cols);
        let total: f64 = av.data.iter().sum();
        self.push(
            Td::scalar(total),
            Some(Box::new(move |g, acc| {
                let gs = g.item();
                acc(a.0, Td::from_vec(rows, cols, vec![gs; rows * cols]))
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = {
            let av = &self.nodes[a.0].value;
            (av.rows * av.cols) as f64
        };
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a 1x1 loss; returns per-node gradients indexed by Var.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Td>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Td::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].clone() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&g, &mut |pid, pg| match &mut grads[pid] {
                    Some(cur) => cur.add_in_place(&pg),
                    slot @ None => *slot = Some(pg),
                });
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Td>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Td> {
        self.grads[v.0].as_ref()
    }
}

/// Max relative error between tape gradients and central finite differences
/// for a scalar function of the given parameters. `f` must be deterministic.
pub fn grad_check(params: &[Td], f: impl Fn(&mut Tape, &[Var]) -> Var, h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<Td> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Td::zeros(p.rows, p.cols)))
        .collect();

    let eval = |ps: &[Td]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Td> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.data.len() {
            let orig = p.data[ei];
            work[pi].data[ei] = orig + h;
            let up = eval(&work);
            work[pi].data[ei] = orig - h;
            let dn = eval(&work);
            work[pi].data[ei] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = analytic[pi].data[ei];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_td(rows: usize, cols: usize, seed: u64) -> Td {
        let mut s = seed;
        Td::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
                })
                .collect(),
        )
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let a = rng_td(3, 4, 1);
        let b = rng_td(4, 2, 2);
        let err = grad_check(&[a, b], |t, vs| {
            let y = t.matmul(vs[0], vs[1]);
            let y2 = t.mul(y, y);
            t.mean_all(y2)
        }, 1e-5);
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn attention_pipeline_grad_matches_fd() {
        let x = rng_td(5, 8, 3);
        let wq = rng_td(8, 8, 4);
        let wk = rng_td(8, 8, 5);
        let wv = rng_td(8, 8, 6);
        let wn = Td::from_vec(1, 8, vec![1.0; 8]);
        let positions: Vec<usize> = (0..5).collect();
        let err = grad_check(&[x, wq, wk, wv, wn], |t, vs| {
            let xn = t.rmsnorm_rows(vs[0], vs[4], 1e-6);
            let q0 = t.matmul(xn, vs[1]);
            let k0 = t.matmul(xn, vs[2]);
            let v = t.matmul(xn, vs[3]);
            let q = t.rotary_rows(q0, &positions, 4, 10000.0);
            let k = t.rotary_rows(k0, &positions, 4, 10000.0);
            let s0 = t.matmul_nt(q, k);
            let s1 = t.scale(s0, 0.5);
            // causal mask
            let mask = {
                let mut m = Td::zeros(5, 5);
                for i in 0..5 {
                    for j in (i + 1)..5 {
                        m.data[i * 5 + j] = -1e9;
                    }
                }
                t.leaf(m)
            };
            let s2 = t.add(s1, mask);
            let p = t.softmax_rows(s2);
            let o = t.matmul(p, v);
            let o2 = t.mul(o, o);
            t.mean_all(o2)
        }, 1e-5);
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn logsoftmax_gather_grad_matches_fd() {
        let logits = rng_td(4, 6, 9);
        let targets = [1u32, 0, 5, 3];
        let err = grad_check(&[logits], |t, vs| {
            let lp = t.log_softmax_rows(vs[0]);
            let picked = t.gather_sum(lp, &targets);
            t.scale(picked, -0.25)
        }, 1e-5);
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn misc_elementwise_grads_match_fd() {
        let a = rng_td(3, 3, 11);
        let c = rng_td(3, 1, 12);
        let s = Td::scalar(0.3);
        let err = grad_check(&[a, c, s], |t, vs| {
            let sl = t.silu(vs[0]);
            let sg = t.log_sigmoid(sl);
            let bc = t.mul_col_broadcast(sg, vs[1]);
            let sc = t.mul_scalar_var(bc, vs[2]);
            let d = t.row_dot(sc, sc);
            let r = t.rsqrt(d, 1e-3);
            t.mean_all(r)
        }, 1e-5);
        assert!(err < 1e-5, "err {err}");
    }
}
