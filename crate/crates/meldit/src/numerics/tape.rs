//! Reverse-mode automatic differentiation over [`Tensor2`].
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! op node stores a closure that routes the node's output gradient to its
//! parents. [`Tape::backward`] walks the list once in reverse. Nodes that no
//! tracked leaf can reach are skipped, so constants (noise draws, targets,
//! condition features of frozen inputs) cost nothing at backward time.
//!
//! Shapes are asserted, not returned as errors: the tape is an internal
//! builder API and a mismatch is a bug in the calling layer, while public
//! entry points validate their inputs before touching the tape.

use super::softmax::softmax_row;
use super::tensor::Tensor2;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tape, &Tensor2, &mut Grads)>;

enum Node {
    Leaf,
    Constant,
    Op(BackFn),
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor2>,
    tracked: Vec<bool>,
    /// Fully masked softmax rows seen while building this tape.
    uniform_softmax_rows: usize,
}

pub struct Grads {
    slots: Vec<Option<Tensor2>>,
    tracked: Vec<bool>,
}

impl Grads {
    /// Accumulates `delta` into the gradient slot of `var`. No-op for
    /// untracked nodes.
    pub fn accum(&mut self, var: Var, delta: Tensor2) {
        if !self.tracked[var.0] {
            return;
        }
        match &mut self.slots[var.0] {
            Some(g) => g
                .add_scaled(&delta, 1.0)
                .expect("gradient shape fixed by forward pass"),
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor2> {
        self.slots[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor2> {
        self.slots[var.0].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            tracked: Vec::new(),
            uniform_softmax_rows: 0,
        }
    }

    /// Differentiable input (parameter or data requiring gradients).
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Node::Leaf, true)
    }

    /// Non-differentiable input; gradient flow stops here.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Node::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor2 {
        &self.values[var.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count of fully masked attention rows encountered so far (diagnostic).
    pub fn uniform_softmax_rows(&self) -> usize {
        self.uniform_softmax_rows
    }

    fn push(&mut self, value: Tensor2, node: Node, tracked: bool) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        self.tracked.push(tracked);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor2, parents: &[Var], back: BackFn) -> Var {
        let tracked = parents.iter().any(|p| self.tracked[p.0]);
        let node = if tracked { Node::Op(back) } else { Node::Constant };
        self.push(value, node, tracked)
    }

    /// Gradients of scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].shape(),
            (1, 1),
            "backward root must be a 1x1 scalar"
        );
        let mut grads = Grads {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            tracked: self.tracked.clone(),
        };
        if !self.tracked[root.0] {
            return grads;
        }
        grads.slots[root.0] = Some(Tensor2::full(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            if let Node::Op(back) = &self.nodes[i] {
                back(self, &g, &mut grads);
            }
            grads.slots[i] = Some(g);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip(self.value(b), |x, y| x + y, "tape add")
            .expect("tape add shapes");
        self.push_op(
            out,
            &[a, b],
            Box::new(move |_t, g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip(self.value(b), |x, y| x - y, "tape sub")
            .expect("tape sub shapes");
        self.push_op(
            out,
            &[a, b],
            Box::new(move |_t, g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.map(|v| -v));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip(self.value(b), |x, y| x * y, "tape mul")
            .expect("tape mul shapes");
        self.push_op(
            out,
            &[a, b],
            Box::new(move |t, g, grads| {
                grads.accum(a, g.zip(t.value(b), |x, y| x * y, "mul back").unwrap());
                grads.accum(b, g.zip(t.value(a), |x, y| x * y, "mul back").unwrap());
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push_op(
            out,
            &[a],
            Box::new(move |_t, g, grads| grads.accum(a, g.map(|v| v * c))),
        )
    }

    /// `ca * a + cb * b` in one node.
    pub fn add_weighted(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Var {
        let out = self
            .value(a)
            .zip(self.value(b), |x, y| ca * x + cb * y, "tape add_weighted")
            .expect("tape add_weighted shapes");
        self.push_op(
            out,
            &[a, b],
            Box::new(move |_t, g, grads| {
                grads.accum(a, g.map(|v| v * ca));
                grads.accum(b, g.map(|v| v * cb));
            }),
        )
    }

    // ---- broadcasts ----

    /// Adds row vector `r` `[1,d]` to every row of `x` `[n,d]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(r);
        assert_eq!(rv.rows(), 1, "add_row rhs must be a row vector");
        assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
        let rrow = rv.row(0).to_vec();
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rrow) {
                *o += b;
            }
        }
        self.push_op(
            out,
            &[x, r],
            Box::new(move |_t, g, grads| {
                grads.accum(x, g.clone());
                let mut rg = Tensor2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &v) in rg.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                grads.accum(r, rg);
            }),
        )
    }

    /// Multiplies every row of `x` `[n,d]` elementwise by row vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(r);
        assert_eq!(rv.rows(), 1, "mul_row rhs must be a row vector");
        assert_eq!(xv.cols(), rv.cols(), "mul_row width mismatch");
        let rrow = rv.row(0).to_vec();
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rrow) {
                *o *= b;
            }
        }
        self.push_op(
            out,
            &[x, r],
            Box::new(move |t, g, grads| {
                let xv = t.value(x);
                let rv = t.value(r);
                let mut xg = g.clone();
                for i in 0..xg.rows() {
                    for (o, &b) in xg.row_mut(i).iter_mut().zip(rv.row(0)) {
                        *o *= b;
                    }
                }
                grads.accum(x, xg);
                let mut rg = Tensor2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    let xrow = xv.row(i);
                    for ((o, &gv), &xvv) in rg.row_mut(0).iter_mut().zip(grow).zip(xrow) {
                        *o += gv * xvv;
                    }
                }
                grads.accum(r, rg);
            }),
        )
    }

    /// `s * x` where `s` is a differentiable `[1,1]` scalar.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "scale_by expects 1x1 scalar");
        let sv = self.value(s).get(0, 0);
        let out = self.value(x).map(|v| v * sv);
        self.push_op(
            out,
            &[x, s],
            Box::new(move |t, g, grads| {
                let sv = t.value(s).get(0, 0);
                grads.accum(x, g.map(|v| v * sv));
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(t.value(x).data())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                grads.accum(s, Tensor2::full(1, 1, dot));
            }),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("tape matmul");
        self.push_op(
            out,
            &[a, b],
            Box::new(move |t, g, grads| {
                grads.accum(a, g.matmul_nt(t.value(b)).unwrap());
                grads.accum(b, t.value(a).matmul_tn(g).unwrap());
            }),
        )
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul_nt(self.value(b))
            .expect("tape matmul_nt");
        self.push_op(
            out,
            &[a, b],
            Box::new(move |t, g, grads| {
                grads.accum(a, g.matmul(t.value(b)).unwrap());
                grads.accum(b, g.matmul_tn(t.value(a)).unwrap());
            }),
        )
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat_rows width mismatch");
        let (na, nb, d) = (av.rows(), bv.rows(), av.cols());
        let mut data = Vec::with_capacity((na + nb) * d);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor2::from_fn(na + nb, d, |r, c| data[r * d + c]);
        self.push_op(
            out,
            &[a, b],
            Box::new(move |_t, g, grads| {
                let d = g.cols();
                let ga = Tensor2::from_fn(na, d, |r, c| g.get(r, c));
                let gb = Tensor2::from_fn(nb, d, |r, c| g.get(na + r, c));
                grads.accum(a, ga);
                grads.accum(b, gb);
            }),
        )
    }

    /// Concatenates equal-height blocks side by side (attention heads back
    /// into model width).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols height mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor2::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push_op(
            out,
            &parts.clone(),
            Box::new(move |_t, g, grads| {
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let gp = Tensor2::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                    grads.accum(p, gp);
                    offset += w;
                }
            }),
        )
    }

    /// Appends constant-filled rows up to `total_rows`.
    pub fn pad_rows(&mut self, x: Var, total_rows: usize, value: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        assert!(total_rows >= n, "pad_rows cannot shrink");
        let mut out = Tensor2::full(total_rows, d, value);
        out.data_mut()[..n * d].copy_from_slice(xv.data());
        self.push_op(
            out,
            &[x],
            Box::new(move |_t, g, grads| {
                grads.accum(x, Tensor2::from_fn(n, g.cols(), |r, c| g.get(r, c)));
            }),
        )
    }

    /// Keeps the first `n` rows.
    pub fn crop_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let total = xv.rows();
        assert!(n <= total, "crop_rows beyond input");
        let out = Tensor2::from_fn(n, xv.cols(), |r, c| xv.get(r, c));
        self.push_op(
            out,
            &[x],
            Box::new(move |_t, g, grads| {
                let mut gx = Tensor2::zeros(total, g.cols());
                gx.data_mut()[..n * g.cols()].copy_from_slice(g.data());
                grads.accum(x, gx);
            }),
        )
    }

    /// Row-major reinterpretation; element count must match.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape element count mismatch");
        let (orig_r, orig_c) = xv.shape();
        let data = xv.data().to_vec();
        let out = Tensor2::from_fn(rows, cols, |r, c| data[r * cols + c]);
        self.push_op(
            out,
            &[x],
            Box::new(move |_t, g, grads| {
                let gd = g.data().to_vec();
                grads.accum(
                    x,
                    Tensor2::from_fn(orig_r, orig_c, |r, c| gd[r * orig_c + c]),
                );
            }),
        )
    }

    /// Columns `[start, start+len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let out = Tensor2::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let total_cols = xv.cols();
        self.push_op(
            out,
            &[x],
            Box::new(move |_t, g, grads| {
                let mut gx = Tensor2::zeros(g.rows(), total_cols);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gx.set(r, start + c, g.get(r, c));
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// Embedding lookup: rows of `table` at `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        for &id in ids {
            assert!(id < tv.rows(), "gather_rows id {id} out of range");
        }
        let out = Tensor2::from_fn(ids.len(), tv.cols(), |r, c| tv.get(ids[r], c));
        let ids = ids.to_vec();
        let table_rows = tv.rows();
        self.push_op(
            out,
            &[table],
            Box::new(move |_t, g, grads| {
                let mut gt = Tensor2::zeros(table_rows, g.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..g.cols() {
                        let v = gt.get(id, c) + g.get(r, c);
                        gt.set(id, c, v);
                    }
                }
                grads.accum(table, gt);
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let (r, c) = self.value(x).shape();
        self.push_op(
            Tensor2::full(1, 1, s),
            &[x],
            Box::new(move |_t, g, grads| {
                grads.accum(x, Tensor2::full(r, c, g.get(0, 0)));
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let s: f64 = xv.data().iter().sum();
        let (r, c) = xv.shape();
        self.push_op(
            Tensor2::full(1, 1, s / n),
            &[x],
            Box::new(move |_t, g, grads| {
                grads.accum(x, Tensor2::full(r, c, g.get(0, 0) / n));
            }),
        )
    }

    /// Mean squared difference between two same-shape tensors, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- nonlinearities ----

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push_op(
            out,
            &[x],
            Box::new(move |t, g, grads| {
                let dx = t
                    .value(x)
                    .zip(g, |xv, gv| gelu_grad_scalar(xv) * gv, "gelu back")
                    .unwrap();
                grads.accum(x, dx);
            }),
        )
    }

    /// SiLU (x * sigmoid(x)).
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push_op(
            out,
            &[x],
            Box::new(move |t, g, grads| {
                let dx = t
                    .value(x)
                    .zip(
                        g,
                        |xv, gv| {
                            let s = sigmoid(xv);
                            gv * (s * (1.0 + xv * (1.0 - s)))
                        },
                        "silu back",
                    )
                    .unwrap();
                grads.accum(x, dx);
            }),
        )
    }

    // ---- normalizations ----

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-6;
        let xv = self.value(x);
        let (n, d) = xv.shape();
        assert!(d > 0, "layer_norm over zero columns");
        let mut out = Tensor2::zeros(n, d);
        let mut inv_stds = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_stds.push(inv);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let out_var_index = self.nodes.len();
        self.push_op(
            out,
            &[x],
            Box::new(move |t, g, grads| {
                let y = t.value(Var(out_var_index));
                let (n, d) = y.shape();
                let mut gx = Tensor2::zeros(n, d);
                for r in 0..n {
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    let gmean = grow.iter().sum::<f64>() / d as f64;
                    let gymean = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&gv, &yv)| gv * yv)
                        .sum::<f64>()
                        / d as f64;
                    let inv = inv_stds[r];
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(grow).zip(yrow) {
                        *o = inv * (gv - gmean - yv * gymean);
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// L2-normalizes each contiguous `seg`-wide slice of every row
    /// (per-head query/key normalization).
    pub fn l2_normalize_segments(&mut self, x: Var, seg: usize) -> Var {
        const FLOOR: f64 = 1e-12;
        let xv = self.value(x);
        let (n, d) = xv.shape();
        assert!(seg > 0 && d % seg == 0, "segment width must divide columns");
        let segs = d / seg;
        let mut out = Tensor2::zeros(n, d);
        let mut norms = Vec::with_capacity(n * segs);
        for r in 0..n {
            let row = xv.row(r);
            let orow = out.row_mut(r);
            for s in 0..segs {
                let v = &row[s * seg..(s + 1) * seg];
                let norm = v.iter().map(|&a| a * a).sum::<f64>().sqrt().max(FLOOR);
                norms.push(norm);
                for (o, &a) in orow[s * seg..(s + 1) * seg].iter_mut().zip(v) {
                    *o = a / norm;
                }
            }
        }
        let out_var_index = self.nodes.len();
        self.push_op(
            out,
            &[x],
            Box::new(move |t, g, grads| {
                let y = t.value(Var(out_var_index));
                let (n, d) = y.shape();
                let segs = d / seg;
                let mut gx = Tensor2::zeros(n, d);
                for r in 0..n {
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    let orow = gx.row_mut(r);
                    for s in 0..segs {
                        let range = s * seg..(s + 1) * seg;
                        let gv = &grow[range.clone()];
                        let yv = &yrow[range.clone()];
                        let dot: f64 = gv.iter().zip(yv).map(|(&a, &b)| a * b).sum();
                        let norm = norms[r * segs + s];
                        for ((o, &gvv), &yvv) in orow[range].iter_mut().zip(gv).zip(yv) {
                            *o = (gvv - yvv * dot) / norm;
                        }
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// Rotary position embedding applied independently to each `seg`-wide
    /// (head) slice of every row. Row `i` gets position `pos0 + i`.
    pub fn rope_segments(&mut self, x: Var, seg: usize, base: f64, pos0: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert!(
            seg > 0 && seg % 2 == 0 && d % seg == 0,
            "rope needs even segment width"
        );
        let mut out = xv.clone();
        apply_rope(&mut out, seg, base, pos0, 1.0);
        self.push_op(
            out,
            &[x],
            Box::new(move |_t, g, grads| {
                let mut gx = g.clone();
                // Rotation by the opposite angle is the exact transpose.
                apply_rope(&mut gx, seg, base, pos0, -1.0);
                grads.accum(x, gx);
            }),
        )
    }

    /// Rotary embedding with an explicit position per row, for callers whose
    /// rows are not laid out in consecutive positions.
    pub fn rope_segments_at(&mut self, x: Var, seg: usize, base: f64, positions: &[usize]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert!(
            seg > 0 && seg % 2 == 0 && d % seg == 0,
            "rope needs even segment width"
        );
        assert_eq!(positions.len(), xv.rows(), "one position per row");
        let mut out = xv.clone();
        apply_rope_at(&mut out, seg, base, positions, 1.0);
        let positions = positions.to_vec();
        self.push_op(
            out,
            &[x],
            Box::new(move |_t, g, grads| {
                let mut gx = g.clone();
                apply_rope_at(&mut gx, seg, base, &positions, -1.0);
                grads.accum(x, gx);
            }),
        )
    }

    /// Per-row softmax over `logits + bias`; `-inf` bias entries become
    /// exact zeros, fully masked rows become uniform (constant, so their
    /// logits receive zero gradient).
    pub fn softmax_rows_biased(&mut self, x: Var, bias: &Tensor2) -> Var {
        let xv = self.value(x);
        xv.same_shape(bias, "softmax_rows_biased").expect("softmax bias shape");
        let (n, d) = xv.shape();
        let mut out = Tensor2::zeros(n, d);
        let mut uniform_flags = vec![false; n];
        let mut uniform_count = 0usize;
        for r in 0..n {
            uniform_flags[r] = softmax_row(xv.row(r), bias.row(r), out.row_mut(r), &mut uniform_count);
        }
        if uniform_count > 0 {
            self.uniform_softmax_rows += uniform_count;
            log::warn!("attention: {uniform_count} fully masked row(s) fell back to uniform");
        }
        let out_var_index = self.nodes.len();
        self.push_op(
            out,
            &[x],
            Box::new(move |t, g, grads| {
                let p = t.value(Var(out_var_index));
                let (n, d) = p.shape();
                let mut gx = Tensor2::zeros(n, d);
                for r in 0..n {
                    if uniform_flags[r] {
                        continue;
                    }
                    let prow = p.row(r);
                    let grow = g.row(r);
                    let s: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                    for ((o, &pv), &gv) in gx.row_mut(r).iter_mut().zip(prow).zip(grow) {
                        *o = pv * (gv - s);
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }
}

/// In-place rotary rotation; `sign` selects forward (+1) or inverse (-1).
fn apply_rope(x: &mut Tensor2, seg: usize, base: f64, pos0: usize, sign: f64) {
    let positions: Vec<usize> = (pos0..pos0 + x.rows()).collect();
    apply_rope_at(x, seg, base, &positions, sign);
}

/// Rotation with one explicit position per row.
fn apply_rope_at(x: &mut Tensor2, seg: usize, base: f64, positions: &[usize], sign: f64) {
    let (n, d) = x.shape();
    let half = seg / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| base.powf(-2.0 * p as f64 / seg as f64))
        .collect();
    for r in 0..n {
        let pos = positions[r] as f64;
        let row = x.row_mut(r);
        for s in 0..d / seg {
            for (p, &w) in freqs.iter().enumerate() {
                let theta = sign * pos * w;
                let (sin, cos) = theta.sin_cos();
                let i0 = s * seg + 2 * p;
                let (a, b) = (row[i0], row[i0 + 1]);
                row[i0] = a * cos - b * sin;
                row[i0 + 1] = a * sin + b * cos;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

