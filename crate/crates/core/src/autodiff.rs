//! Minimal reverse-mode autodiff on a tape of 2-D `f64` tensors.
//!
//! Every differentiable quantity in the crate (fitting energies, body-model
//! Jacobians, denoiser training) runs through this tape. Tapes are cheap and
//! short-lived: build the graph, call [`Tape::backward`], drop the tape.
//! All operations are deterministic; the only parallelism is a row-split in
//! large matrix products, which does not change per-element summation order.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Arr = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&TapeView<'_>, &Arr, &mut dyn FnMut(usize, Arr))>;

pub struct TapeView<'a> {
    values: &'a [Arr],
}

impl<'a> TapeView<'a> {
    #[inline]
    fn val(&self, i: usize) -> &Arr {
        &self.values[i]
    }
}

enum Node {
    Leaf,
    Op(BackFn),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Arr>,
    nodes: Vec<Node>,
    needs: Vec<bool>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.g[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.g[v.0].take()
    }
}

/// Deterministic matrix product; splits rows across two rayon tasks for
/// large problems without changing per-element accumulation order.
pub fn mm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Arr {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "matmul inner dims {k} != {k2}");
    let flops = n * k * m;
    if flops < 4_000_000 || n < 8 || rayon::current_num_threads() < 2 {
        return a.dot(&b);
    }
    let mut out = Arr::zeros((n, m));
    let split = n / 2;
    let (top, bot) = out.view_mut().split_at(Axis(0), split);
    let (a_top, a_bot) = a.split_at(Axis(0), split);
    rayon::join(
        || ndarray::linalg::general_mat_mul(1.0, &a_top, &b, 0.0, &mut { top }),
        || ndarray::linalg::general_mat_mul(1.0, &a_bot, &b, 0.0, &mut { bot }),
    );
    out
}

fn accumulate(slot: &mut Option<Arr>, contrib: Arr) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        assert_eq!(a.dim(), (1, 1));
        a[(0, 0)]
    }

    fn push(&mut self, value: Arr, node: Node, needs: bool) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Node::Leaf, true)
    }

    /// Non-differentiable input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Node::Leaf, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Arr::from_elem((1, 1), x))
    }

    fn any_needs(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.needs[p.0])
    }

    fn op(&mut self, value: Arr, parents: &[Var], back: BackFn) -> Var {
        let needs = self.any_needs(parents);
        if needs {
            self.push(value, Node::Op(back), true)
        } else {
            // Constant subgraph: no backward needed.
            self.push(value, Node::Leaf, false)
        }
    }

    /// Run reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].dim(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut g: Vec<Option<Arr>> = (0..self.values.len()).map(|_| None).collect();
        g[root.0] = Some(Arr::from_elem((1, 1), 1.0));
        let view = TapeView {
            values: &self.values,
        };
        for i in (0..=root.0).rev() {
            if !self.needs[i] || g[i].is_none() {
                continue;
            }
            if let Node::Op(back) = &self.nodes[i] {
                let gi = g[i].take().unwrap();
                back(&view, &gi, &mut |p, contrib| accumulate(&mut g[p], contrib));
            }
        }
        Grads { g }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.op(
            v,
            &[a, b],
            Box::new(move |_, g, sink| {
                sink(ia, g.clone());
                sink(ib, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.op(
            v,
            &[a, b],
            Box::new(move |_, g, sink| {
                sink(ia, g.clone());
                sink(ib, -g);
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        let (ia, ib) = (a.0, b.0);
        self.op(
            v,
            &[a, b],
            Box::new(move |t, g, sink| {
                sink(ia, g * t.val(ib));
                sink(ib, g * t.val(ia));
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ia = a.0;
        self.op(v, &[a], Box::new(move |_, g, sink| sink(ia, g * k)))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let ia = a.0;
        self.op(v, &[a], Box::new(move |_, g, sink| sink(ia, g.clone())))
    }

    /// Elementwise multiply by a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Arr) -> Var {
        assert_eq!(self.value(a).dim(), c.dim());
        let v = self.value(a) * c;
        let ia = a.0;
        let c = c.clone();
        self.op(v, &[a], Box::new(move |_, g, sink| sink(ia, g * &c)))
    }

    /// Elementwise add a constant array of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Arr) -> Var {
        assert_eq!(self.value(a).dim(), c.dim());
        let v = self.value(a) + c;
        let ia = a.0;
        self.op(v, &[a], Box::new(move |_, g, sink| sink(ia, g.clone())))
    }

    /// `a (n,m) + row (1,m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, m));
        let mut v = self.value(a).clone();
        let r = self.value(row).row(0).to_owned();
        for mut vr in v.rows_mut() {
            vr += &r;
        }
        let _ = n;
        let (ia, ir) = (a.0, row.0);
        self.op(
            v,
            &[a, row],
            Box::new(move |_, g, sink| {
                sink(ia, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                sink(ir, summed);
            }),
        )
    }

    /// `a (n,m) * col (n,1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, m) = self.value(a).dim();
        assert_eq!(self.value(col).dim(), (n, 1));
        let mut v = self.value(a).clone();
        for (mut vr, c) in v.rows_mut().into_iter().zip(self.value(col).column(0)) {
            vr *= *c;
        }
        let _ = m;
        let (ia, ic) = (a.0, col.0);
        self.op(
            v,
            &[a, col],
            Box::new(move |t, g, sink| {
                let col_v = t.val(ic);
                let mut ga = g.clone();
                for (mut gr, c) in ga.rows_mut().into_iter().zip(col_v.column(0)) {
                    gr *= *c;
                }
                sink(ia, ga);
                let av = t.val(ia);
                let gc = (g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                sink(ic, gc);
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = mm(self.value(a).view(), self.value(b).view());
        let (ia, ib) = (a.0, b.0);
        let need_a = self.needs[a.0];
        let need_b = self.needs[b.0];
        self.op(
            v,
            &[a, b],
            Box::new(move |t, g, sink| {
                if need_a {
                    sink(ia, mm(g.view(), t.val(ib).t()));
                }
                if need_b {
                    sink(ib, mm(t.val(ia).t(), g.view()));
                }
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ia = a.0;
        self.op(v, &[a], Box::new(move |_, g, sink| sink(ia, g.t().to_owned())))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Arr::from_elem((1, 1), self.value(a).sum());
        let ia = a.0;
        let dim = self.value(a).dim();
        self.op(
            v,
            &[a],
            Box::new(move |_, g, sink| sink(ia, Arr::from_elem(dim, g[(0, 0)]))),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise sum of squares: `(n,m) -> (n,1)`.
    pub fn sumsq_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .collect::<Vec<f64>>();
        let n = av.nrows();
        let v = Arr::from_shape_vec((n, 1), v).unwrap();
        let ia = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |t, g, sink| {
                let av = t.val(ia);
                let mut ga = av * 2.0;
                for (mut gr, gg) in ga.rows_mut().into_iter().zip(g.column(0)) {
                    gr *= *gg;
                }
                sink(ia, ga);
            }),
        )
    }

    /// Sum of squared entries as a scalar.
    pub fn sumsq(&mut self, a: Var) -> Var {
        let v = Arr::from_elem((1, 1), self.value(a).iter().map(|x| x * x).sum());
        let ia = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |t, g, sink| sink(ia, t.val(ia) * (2.0 * g[(0, 0)]))),
        )
    }

    /// Elementwise sqrt with a lower clamp; gradient is zero where clamped.
    pub fn sqrt_guard(&mut self, a: Var, min: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(min).sqrt());
        let ia = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |t, g, sink| {
                let av = t.val(ia);
                let ga = ndarray::Zip::from(av).and(g).map_collect(|&x, &gg| {
                    if x > min {
                        gg * 0.5 / x.sqrt()
                    } else {
                        0.0
                    }
                });
                sink(ia, ga);
            }),
        )
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()));
        let ia = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |t, g, sink| {
                let av = t.val(ia);
                let ga = ndarray::Zip::from(av).and(g).map_collect(|&x, &gg| {
                    let inner = C * (x + K * x * x * x);
                    let th = inner.tanh();
                    let d = 0.5 * (1.0 + th)
                        + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * K * x * x);
                    gg * d
                });
                sink(ia, ga);
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut r in v.rows_mut() {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r.mapv_inplace(|x| (x - mx).exp());
            let s = r.sum();
            r.mapv_inplace(|x| x / s);
        }
        let ia = a.0;
        let out_idx_known = self.values.len(); // index this op will occupy
        self.op(
            v,
            &[a],
            Box::new(move |t, g, sink| {
                let y = t.val(out_idx_known);
                let mut ga = g * y;
                for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = gr.sum();
                    gr.zip_mut_with(&yr.to_owned(), |gg, &yy| *gg -= dot * yy);
                }
                sink(ia, ga);
            }),
        )
    }

    /// Row layer norm with learnable gain/bias: `(x - mu)/sqrt(var + eps) * gamma + beta`.
    pub fn layernorm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (n, m) = av.dim();
        assert_eq!(self.value(gamma).dim(), (1, m));
        assert_eq!(self.value(beta).dim(), (1, m));
        let gm = self.value(gamma).row(0).to_owned();
        let bt = self.value(beta).row(0).to_owned();
        let mut v = Arr::zeros((n, m));
        for (i, r) in av.rows().into_iter().enumerate() {
            let mu = r.mean().unwrap();
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &x) in r.iter().enumerate() {
                v[(i, j)] = (x - mu) * inv * gm[j] + bt[j];
            }
        }
        let (ia, ig, ib) = (a.0, gamma.0, beta.0);
        self.op(
            v,
            &[a, gamma, beta],
            Box::new(move |t, g, sink| {
                let av = t.val(ia);
                let (n, m) = av.dim();
                let gm = t.val(ig).row(0).to_owned();
                let mut ga = Arr::zeros((n, m));
                let mut ggamma = Arr::zeros((1, m));
                let mut gbeta = Arr::zeros((1, m));
                for i in 0..n {
                    let r = av.row(i);
                    let mu = r.mean().unwrap();
                    let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mu) * inv
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    for j in 0..m {
                        let xhat = (av[(i, j)] - mu) * inv;
                        let gy = g[(i, j)] * gm[j];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat;
                        ggamma[(0, j)] += g[(i, j)] * xhat;
                        gbeta[(0, j)] += g[(i, j)];
                    }
                    mean_gy /= m as f64;
                    mean_gy_xhat /= m as f64;
                    for j in 0..m {
                        let xhat = (av[(i, j)] - mu) * inv;
                        let gy = g[(i, j)] * gm[j];
                        ga[(i, j)] = (gy - mean_gy - xhat * mean_gy_xhat) * inv;
                    }
                }
                sink(ia, ga);
                sink(ig, ggamma);
                sink(ib, gbeta);
            }),
        )
    }

    /// Numerically stable log-sum-exp over a single row: `(1,k) -> (1,1)`.
    pub fn logsumexp_row(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), 1);
        let mx = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.iter().map(|x| (x - mx).exp()).sum();
        let v = Arr::from_elem((1, 1), mx + s.ln());
        let ia = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |t, g, sink| {
                let av = t.val(ia);
                let mx = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sm = av.mapv(|x| (x - mx).exp());
                let s = sm.sum();
                sm.mapv_inplace(|x| x / s * g[(0, 0)]);
                sink(ia, sm);
            }),
        )
    }

    // ---- shape ops ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ia = a.0;
        let dim = self.value(a).dim();
        self.op(
            v,
            &[a],
            Box::new(move |_, g, sink| {
                let mut ga = Arr::zeros(dim);
                ga.slice_mut(s![.., start..start + len]).assign(g);
                sink(ia, ga);
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ia = a.0;
        let dim = self.value(a).dim();
        self.op(
            v,
            &[a],
            Box::new(move |_, g, sink| {
                let mut ga = Arr::zeros(dim);
                ga.slice_mut(s![start..start + len, ..]).assign(g);
                sink(ia, ga);
            }),
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut v = Arr::zeros((n, total));
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            v.slice_mut(s![.., off..off + w]).assign(self.value(*p));
            off += w;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths2 = widths.clone();
        self.op(
            v,
            parts,
            Box::new(move |_, g, sink| {
                let mut off = 0;
                for (i, w) in idx.iter().zip(&widths2) {
                    sink(*i, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).ncols();
        let heights: Vec<usize> = parts.iter().map(|p| self.value(*p).nrows()).collect();
        let total: usize = heights.iter().sum();
        let mut v = Arr::zeros((total, m));
        let mut off = 0;
        for (p, h) in parts.iter().zip(&heights) {
            v.slice_mut(s![off..off + h, ..]).assign(self.value(*p));
            off += h;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let heights2 = heights.clone();
        self.op(
            v,
            parts,
            Box::new(move |_, g, sink| {
                let mut off = 0;
                for (i, h) in idx.iter().zip(&heights2) {
                    sink(*i, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }),
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let m = av.ncols();
        let mut v = Arr::zeros((indices.len(), m));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&av.row(i));
        }
        let ia = a.0;
        let dim = av.dim();
        let idx = indices.to_vec();
        self.op(
            v,
            &[a],
            Box::new(move |_, g, sink| {
                let mut ga = Arr::zeros(dim);
                for (k, &i) in idx.iter().enumerate() {
                    let mut r = ga.row_mut(i);
                    r += &g.row(k);
                }
                sink(ia, ga);
            }),
        )
    }

    // ---- fused domain ops ----

    /// Gram–Schmidt decode of a 6D rotation: `(1,6) -> (3,3)` column matrix.
    /// Norms are clamped below at 1e-8 (zero gradient in the clamped regime).
    pub fn rot6d(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), (1, 6));
        let (m, _) = rot6d_forward(&[
            x[(0, 0)],
            x[(0, 1)],
            x[(0, 2)],
            x[(0, 3)],
            x[(0, 4)],
            x[(0, 5)],
        ]);
        let ia = a.0;
        self.op(
            m,
            &[a],
            Box::new(move |t, g, sink| {
                let x = t.val(ia);
                let v = [
                    x[(0, 0)],
                    x[(0, 1)],
                    x[(0, 2)],
                    x[(0, 3)],
                    x[(0, 4)],
                    x[(0, 5)],
                ];
                sink(ia, rot6d_backward(&v, g));
            }),
        )
    }

    /// Linear blend skinning: per-vertex weighted rigid transforms.
    ///
    /// `out[v] = sum_j w[v,j] * (R_j (vs[v] - j_rest[j]) + j_world[j])`
    ///
    /// `rots` are `(3,3)` column-convention rotation matrices per joint.
    /// `plan` lists, per joint, the vertices it influences with weights.
    pub fn lbs(
        &mut self,
        vs: Var,
        rots: &[Var],
        j_rest: Var,
        j_world: Var,
        plan: &LbsPlan,
    ) -> Var {
        let nj = rots.len();
        assert_eq!(self.value(j_rest).dim(), (nj, 3));
        assert_eq!(self.value(j_world).dim(), (nj, 3));
        let vsv = self.value(vs);
        let nv = vsv.nrows();
        let mut out = Arr::zeros((nv, 3));
        {
            let jr = self.value(j_rest);
            let jw = self.value(j_world);
            for (j, support) in plan.support.iter().enumerate() {
                if support.is_empty() {
                    continue;
                }
                let r = self.value(rots[j]);
                let vsv = self.value(vs);
                for &(v, w) in support {
                    let p = [
                        vsv[(v, 0)] - jr[(j, 0)],
                        vsv[(v, 1)] - jr[(j, 1)],
                        vsv[(v, 2)] - jr[(j, 2)],
                    ];
                    for c in 0..3 {
                        let rp = r[(c, 0)] * p[0] + r[(c, 1)] * p[1] + r[(c, 2)] * p[2];
                        out[(v, c)] += w * (rp + jw[(j, c)]);
                    }
                }
            }
        }
        let ivs = vs.0;
        let (ijr, ijw) = (j_rest.0, j_world.0);
        let irots: Vec<usize> = rots.iter().map(|r| r.0).collect();
        let plan = plan.clone();
        let mut parents: Vec<Var> = vec![vs, j_rest, j_world];
        parents.extend_from_slice(rots);
        self.op(
            out,
            &parents,
            Box::new(move |t, g, sink| {
                let vsv = t.val(ivs);
                let jr = t.val(ijr);
                let jw = t.val(ijw);
                let _ = jw;
                let nv = vsv.nrows();
                let nj = irots.len();
                let mut gvs = Arr::zeros((nv, 3));
                let mut gjr = Arr::zeros((nj, 3));
                let mut gjw = Arr::zeros((nj, 3));
                for (j, support) in plan.support.iter().enumerate() {
                    if support.is_empty() {
                        continue;
                    }
                    let r = t.val(irots[j]);
                    let mut gr = Arr::zeros((3, 3));
                    for &(v, w) in support {
                        let p = [
                            vsv[(v, 0)] - jr[(j, 0)],
                            vsv[(v, 1)] - jr[(j, 1)],
                            vsv[(v, 2)] - jr[(j, 2)],
                        ];
                        let go = [g[(v, 0)], g[(v, 1)], g[(v, 2)]];
                        // d out / d jw[j] = w * I
                        for c in 0..3 {
                            gjw[(j, c)] += w * go[c];
                        }
                        // d out / d R = w * go (outer) p ; d/d p = w * R^T go
                        let mut rt_go = [0.0; 3];
                        for c in 0..3 {
                            for k in 0..3 {
                                gr[(c, k)] += w * go[c] * p[k];
                            }
                        }
                        for k in 0..3 {
                            rt_go[k] = r[(0, k)] * go[0] + r[(1, k)] * go[1] + r[(2, k)] * go[2];
                        }
                        for k in 0..3 {
                            gvs[(v, k)] += w * rt_go[k];
                            gjr[(j, k)] -= w * rt_go[k];
                        }
                    }
                    sink(irots[j], gr);
                }
                sink(ivs, gvs);
                sink(ijr, gjr);
                sink(ijw, gjw);
            }),
        )
    }

    /// Pinhole projection `(n,3) -> (n,2)`. Caller must ensure z > 0.
    pub fn pinhole(&mut self, points: Var, focal: f64, cx: f64, cy: f64) -> Var {
        let p = self.value(points);
        let n = p.nrows();
        let mut v = Arr::zeros((n, 2));
        for i in 0..n {
            let z = p[(i, 2)];
            v[(i, 0)] = focal * p[(i, 0)] / z + cx;
            v[(i, 1)] = focal * p[(i, 1)] / z + cy;
        }
        let ip = points.0;
        self.op(
            v,
            &[points],
            Box::new(move |t, g, sink| {
                let p = t.val(ip);
                let n = p.nrows();
                let mut gp = Arr::zeros((n, 3));
                for i in 0..n {
                    let (x, y, z) = (p[(i, 0)], p[(i, 1)], p[(i, 2)]);
                    let (gu, gv) = (g[(i, 0)], g[(i, 1)]);
                    gp[(i, 0)] = focal / z * gu;
                    gp[(i, 1)] = focal / z * gv;
                    gp[(i, 2)] = -focal * (x * gu + y * gv) / (z * z);
                }
                sink(ip, gp);
            }),
        )
    }

    /// Geman–McClure robustifier applied to squared errors:
    /// `rho(e2) = e2 * s2 / (e2 + s2)` elementwise, `s2 = sigma^2`.
    pub fn gm_from_sq(&mut self, e2: Var, sigma: f64) -> Var {
        let s2 = sigma * sigma;
        let v = self.value(e2).mapv(|x| x * s2 / (x + s2));
        let ie = e2.0;
        self.op(
            v,
            &[e2],
            Box::new(move |t, g, sink| {
                let e = t.val(ie);
                let ga = ndarray::Zip::from(e).and(g).map_collect(|&x, &gg| {
                    let d = x + s2;
                    gg * s2 * s2 / (d * d)
                });
                sink(ie, ga);
            }),
        )
    }

    /// Multi-head self-attention over fixed-length token groups.
    ///
    /// `q,k,v` are `(B*T, D)` with `D = heads * head_dim`; attention runs
    /// within each consecutive block of `tokens` rows. `attn_mask`, when
    /// present, is `(B*heads*T, T)` multiplied onto the softmax probabilities
    /// (inverted-dropout masks go here).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        attn_mask: Option<&Arr>,
    ) -> Var {
        let d = self.value(q).ncols();
        assert_eq!(d % heads, 0);
        let hd = d / heads;
        let rows = self.value(q).nrows();
        assert_eq!(rows % tokens, 0);
        let batch = rows / tokens;
        let scale = 1.0 / (hd as f64).sqrt();

        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = Arr::zeros((rows, d));
        // probs stored per (sample, head): (B*H*T, T)
        let mut probs = Arr::zeros((batch * heads * tokens, tokens));
        for s_i in 0..batch {
            let r0 = s_i * tokens;
            for h in 0..heads {
                let c0 = h * hd;
                for ti in 0..tokens {
                    let prow = (s_i * heads + h) * tokens + ti;
                    // scores
                    let mut mx = f64::NEG_INFINITY;
                    let mut scores = vec![0.0; tokens];
                    for tj in 0..tokens {
                        let mut dot = 0.0;
                        for c in 0..hd {
                            dot += qv[(r0 + ti, c0 + c)] * kv[(r0 + tj, c0 + c)];
                        }
                        let sc = dot * scale;
                        scores[tj] = sc;
                        mx = mx.max(sc);
                    }
                    let mut sum = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        sum += *sc;
                    }
                    for (tj, sc) in scores.iter().enumerate() {
                        let mut p = sc / sum;
                        if let Some(mask) = attn_mask {
                            p *= mask[(prow, tj)];
                        }
                        probs[(prow, tj)] = p;
                        for c in 0..hd {
                            out[(r0 + ti, c0 + c)] += p * vv[(r0 + tj, c0 + c)];
                        }
                    }
                }
            }
        }
        let (iq, ik, iv) = (q.0, k.0, v.0);
        let mask_c = attn_mask.cloned();
        self.op(
            out,
            &[q, k, v],
            Box::new(move |t, g, sink| {
                let qv = t.val(iq);
                let kv = t.val(ik);
                let vv = t.val(iv);
                let rows = qv.nrows();
                let d = qv.ncols();
                let batch = rows / tokens;
                let hd = d / heads;
                let mut gq = Arr::zeros((rows, d));
                let mut gk = Arr::zeros((rows, d));
                let mut gv = Arr::zeros((rows, d));
                for s_i in 0..batch {
                    let r0 = s_i * tokens;
                    for h in 0..heads {
                        let c0 = h * hd;
                        // recompute softmax probs (pre-mask) for this block
                        for ti in 0..tokens {
                            let prow = (s_i * heads + h) * tokens + ti;
                            let mut mx = f64::NEG_INFINITY;
                            let mut scores = vec![0.0; tokens];
                            for tj in 0..tokens {
                                let mut dot = 0.0;
                                for c in 0..hd {
                                    dot += qv[(r0 + ti, c0 + c)] * kv[(r0 + tj, c0 + c)];
                                }
                                let sc = dot * scale;
                                scores[tj] = sc;
                                mx = mx.max(sc);
                            }
                            let mut sum = 0.0;
                            for sc in scores.iter_mut() {
                                *sc = (*sc - mx).exp();
                                sum += *sc;
                            }
                            let p_soft: Vec<f64> = scores.iter().map(|sc| sc / sum).collect();
                            // d out[ti] = sum_j p_masked[j] v[j]
                            // g wrt p_masked[j] = <g_out[ti], v[j]>
                            let mut gp = vec![0.0; tokens];
                            for tj in 0..tokens {
                                let mut dot = 0.0;
                                for c in 0..hd {
                                    dot += g[(r0 + ti, c0 + c)] * vv[(r0 + tj, c0 + c)];
                                }
                                // v grad: p_masked * g_out
                                let pm = if let Some(mask) = &mask_c {
                                    p_soft[tj] * mask[(prow, tj)]
                                } else {
                                    p_soft[tj]
                                };
                                for c in 0..hd {
                                    gv[(r0 + tj, c0 + c)] += pm * g[(r0 + ti, c0 + c)];
                                }
                                gp[tj] = if let Some(mask) = &mask_c {
                                    dot * mask[(prow, tj)]
                                } else {
                                    dot
                                };
                            }
                            // softmax backward: gs = p*(gp - sum(gp*p))
                            let dot_gp: f64 =
                                gp.iter().zip(&p_soft).map(|(a, b)| a * b).sum();
                            for tj in 0..tokens {
                                let gs = p_soft[tj] * (gp[tj] - dot_gp) * scale;
                                for c in 0..hd {
                                    gq[(r0 + ti, c0 + c)] += gs * kv[(r0 + tj, c0 + c)];
                                    gk[(r0 + tj, c0 + c)] += gs * qv[(r0 + ti, c0 + c)];
                                }
                            }
                        }
                    }
                }
                sink(iq, gq);
                sink(ik, gk);
                sink(iv, gv);
            }),
        )
    }

    /// Attach an externally computed loss with its gradient at the current
    /// value of `at`. `loss` and `grad` must be evaluated at `value(at)`;
    /// the backward pass contributes `grad * upstream`.
    pub fn external_scalar(&mut self, at: Var, loss: f64, grad: Arr) -> Var {
        assert_eq!(self.value(at).dim(), grad.dim());
        let ia = at.0;
        self.op(
            Arr::from_elem((1, 1), loss),
            &[at],
            Box::new(move |_, g, sink| sink(ia, &grad * g[(0, 0)])),
        )
    }
}

/// Per-joint vertex influence lists for [`Tape::lbs`].
#[derive(Debug, Clone)]
pub struct LbsPlan {
    pub support: std::sync::Arc<Vec<Vec<(usize, f64)>>>,
}

impl LbsPlan {
    /// Build from a dense `(V, J)` weight matrix, skipping zero entries.
    pub fn from_weights(weights: &Arr) -> LbsPlan {
        let (nv, nj) = weights.dim();
        let mut support = vec![Vec::new(); nj];
        for v in 0..nv {
            for j in 0..nj {
                let w = weights[(v, j)];
                if w != 0.0 {
                    support[j].push((v, w));
                }
            }
        }
        LbsPlan {
            support: std::sync::Arc::new(support),
        }
    }
}

pub(crate) fn rot6d_forward(x: &[f64; 6]) -> (Arr, bool) {
    let a = [x[0], x[1], x[2]];
    let b = [x[3], x[4], x[5]];
    let na = dot(&a, &a).sqrt().max(1e-8);
    let c1 = [a[0] / na, a[1] / na, a[2] / na];
    let d = dot(&c1, &b);
    let u = [b[0] - d * c1[0], b[1] - d * c1[1], b[2] - d * c1[2]];
    let nu = dot(&u, &u).sqrt().max(1e-8);
    let c2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let c3 = cross(&c1, &c2);
    let mut m = Arr::zeros((3, 3));
    for i in 0..3 {
        m[(i, 0)] = c1[i];
        m[(i, 1)] = c2[i];
        m[(i, 2)] = c3[i];
    }
    (m, na > 1e-8 && nu > 1e-8)
}

fn rot6d_backward(x: &[f64; 6], g: &Arr) -> Arr {
    let a = [x[0], x[1], x[2]];
    let b = [x[3], x[4], x[5]];
    let na_raw = dot(&a, &a).sqrt();
    let na = na_raw.max(1e-8);
    let c1 = [a[0] / na, a[1] / na, a[2] / na];
    let d = dot(&c1, &b);
    let u = [b[0] - d * c1[0], b[1] - d * c1[1], b[2] - d * c1[2]];
    let nu_raw = dot(&u, &u).sqrt();
    let nu = nu_raw.max(1e-8);
    let c2 = [u[0] / nu, u[1] / nu, u[2] / nu];

    let g1 = [g[(0, 0)], g[(1, 0)], g[(2, 0)]];
    let g2 = [g[(0, 1)], g[(1, 1)], g[(2, 1)]];
    let g3 = [g[(0, 2)], g[(1, 2)], g[(2, 2)]];

    // c3 = c1 x c2
    let mut gc1 = add(&g1, &cross(&c2, &g3));
    let gc2 = add(&g2, &cross(&g3, &c1));

    // c2 = u / nu (zero gradient if clamped)
    let gu = if nu_raw > 1e-8 {
        let pd = dot(&c2, &gc2);
        [
            (gc2[0] - pd * c2[0]) / nu,
            (gc2[1] - pd * c2[1]) / nu,
            (gc2[2] - pd * c2[2]) / nu,
        ]
    } else {
        [0.0; 3]
    };

    // u = b - (c1.b) c1
    let c1_gu = dot(&c1, &gu);
    let gb = [
        gu[0] - c1_gu * c1[0],
        gu[1] - c1_gu * c1[1],
        gu[2] - c1_gu * c1[2],
    ];
    gc1[0] += -b[0] * c1_gu - d * gu[0];
    gc1[1] += -b[1] * c1_gu - d * gu[1];
    gc1[2] += -b[2] * c1_gu - d * gu[2];

    // c1 = a / na (zero gradient if clamped)
    let ga = if na_raw > 1e-8 {
        let pd = dot(&c1, &gc1);
        [
            (gc1[0] - pd * c1[0]) / na,
            (gc1[1] - pd * c1[1]) / na,
            (gc1[2] - pd * c1[2]) / na,
        ]
    } else {
        [0.0; 3]
    };

    let mut out = Arr::zeros((1, 6));
    for i in 0..3 {
        out[(0, i)] = ga[i];
        out[(0, 3 + i)] = gb[i];
    }
    out
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
#[inline]
fn add(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Central finite differences of a scalar-valued function, for gradient
/// verification in tests and the acceptance suite.
pub fn finite_difference<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let x0 = xp[i];
        xp[i] = x0 + step;
        let fp = f(&xp);
        xp[i] = x0 - step;
        let fm = f(&xp);
        xp[i] = x0;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Max relative error between an analytic gradient and a reference,
/// normalized by the larger magnitude (floored to avoid 0/0).
pub fn max_rel_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, r)| (a - r).abs() / a.abs().max(r.abs()).max(floor))
        .fold(0.0, f64::max)
}
