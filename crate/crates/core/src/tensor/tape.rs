//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every primitive computes its value eagerly and appends a node; a node can
//! only reference earlier nodes, so the tape is already in topological order
//! and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::graph::{propagate_level, LevelAdjacency, RatingGraph};

use super::array::{axpy, dot, NumArray};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<'a> {
    Constant,
    Param(usize),
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Spmm {
        src: Var,
        adj: &'a LevelAdjacency,
        scale: Option<&'a [f64]>,
    },
    Relu(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
    },
    ScaleAdd(Vec<(f64, Var)>),
    Bilinear {
        n: Var,
        weights: Vec<Var>,
        users: Vec<usize>,
        items: Vec<usize>,
        // n · W_t for every level
        left: Vec<NumArray>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: NumArray,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Sum(Var),
}

struct Node<'a> {
    value: NumArray,
    op: Op<'a>,
}

/// Gradients of a scalar with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_param: Vec<Option<NumArray>>,
}

impl Grads {
    pub fn get(&self, param: usize) -> Option<&NumArray> {
        self.by_param.get(param).and_then(Option::as_ref)
    }

    pub fn take(&mut self, param: usize) -> Option<NumArray> {
        self.by_param.get_mut(param).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn same_shape(op: &'static str, a: &NumArray, b: &NumArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NumArray, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf whose gradient is reported under `id` by [`Tape::backward`].
    pub fn param(&mut self, id: usize, value: NumArray) -> Var {
        self.push(value, Op::Param(id))
    }

    /// Row lookup: `out[k] = table[index[k]]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = NumArray::zeros(index.len(), t.cols());
        for (k, &r) in index.iter().enumerate() {
            if r >= t.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "gather table",
                    index: r,
                    len: t.rows(),
                });
            }
            out.row_mut(k).copy_from_slice(t.row(r));
        }
        Ok(self.push(
            out,
            Op::Gather {
                src: table,
                index: index.to_vec(),
            },
        ))
    }

    /// Column-wise concatenation; parts may have zero columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {rows}", self.value(bad).rows()),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = NumArray::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Normalized propagation over rating level `t` with optional sender
    /// scales (node dropout).
    pub fn spmm(
        &mut self,
        graph: &'a RatingGraph,
        t: usize,
        src: Var,
        scale: Option<&'a [f64]>,
    ) -> Result<Var> {
        if t >= graph.n_levels() {
            return Err(Error::IndexOutOfRange {
                what: "rating levels",
                index: t,
                len: graph.n_levels(),
            });
        }
        let adj = graph.level(t);
        let out = propagate_level(adj, self.value(src), scale)?;
        Ok(self.push(out, Op::Spmm { src, adj, scale }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// `x · wᵀ`, i.e. the map `v ↦ W v` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul_t(self.value(w))?;
        Ok(self.push(out, Op::Linear { x, w }))
    }

    /// `Σ α_k x_k` over same-shaped inputs.
    pub fn scale_add(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::shape("scale_add", "no inputs"))?;
        let (rows, cols) = self.value(first).shape();
        let mut out = NumArray::zeros(rows, cols);
        for &(alpha, v) in terms {
            let x = &self.nodes[v.0].value;
            same_shape("scale_add", &out, x)?;
            out.add_scaled(alpha, x);
        }
        Ok(self.push(out, Op::ScaleAdd(terms.to_vec())))
    }

    /// Per-pair bilinear scores: `out[k, t] = n[users[k]]ᵀ W_t n[items[k]]`.
    pub fn bilinear(
        &mut self,
        n: Var,
        weights: &[Var],
        users: &[usize],
        items: &[usize],
    ) -> Result<Var> {
        if users.len() != items.len() {
            return Err(Error::shape(
                "bilinear",
                format!("{} users vs {} items", users.len(), items.len()),
            ));
        }
        let nv = self.value(n);
        let d = nv.cols();
        for &idx in users.iter().chain(items) {
            if idx >= nv.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "node representations",
                    index: idx,
                    len: nv.rows(),
                });
            }
        }
        let mut left = Vec::with_capacity(weights.len());
        for &w in weights {
            let wv = self.value(w);
            if wv.shape() != (d, d) {
                return Err(Error::shape(
                    "bilinear",
                    format!("decoder matrix {:?} for width {d}", wv.shape()),
                ));
            }
            left.push(nv.matmul(wv)?);
        }
        let n_classes = weights.len();
        let mut out = NumArray::zeros(users.len(), n_classes);
        for (k, (&u, &i)) in users.iter().zip(items).enumerate() {
            let ni = nv.row(i);
            for (t, l) in left.iter().enumerate() {
                out.set(k, t, dot(l.row(u), ni));
            }
        }
        Ok(self.push(
            out,
            Op::Bilinear {
                n,
                weights: weights.to_vec(),
                users: users.to_vec(),
                items: items.to_vec(),
                left,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{} targets for {} rows", targets.len(), lv.rows()),
            ));
        }
        if targets.is_empty() {
            return Err(Error::Empty("cross entropy over zero rows"));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            if t >= row.len() {
                return Err(Error::IndexOutOfRange {
                    what: "classes",
                    index: t,
                    len: row.len(),
                });
            }
            total += log_sum_exp(row) - row[t];
        }
        let probs = softmax(lv);
        let loss = total / targets.len() as f64;
        Ok(self.push(
            NumArray::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise cosine similarity as an `n x 1` column. A zero row on either
    /// side yields 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("cosine_rows", av, bv)?;
        let mut out = NumArray::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            out.set(r, 0, cosine(av.row(r), bv.row(r)));
        }
        Ok(self.push(out, Op::Cosine { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(NumArray::scalar(s), Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<NumArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(NumArray::scalar(1.0));
        let mut out = Grads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if out.by_param.len() <= *id {
                        out.by_param.resize(id + 1, None);
                    }
                    accumulate(&mut out.by_param[*id], g);
                }
                Op::Gather { src, index } => {
                    let sv = self.value(*src);
                    let mut gs = NumArray::zeros(sv.rows(), sv.cols());
                    for (k, &r) in index.iter().enumerate() {
                        axpy(1.0, g.row(k), gs.row_mut(r));
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut gp = NumArray::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::Spmm { src, adj, scale } => {
                    // Adjacency is symmetric: the transpose of A·S is S·A.
                    let mut gs = propagate_level(adj, &g, None)?;
                    if let Some(s) = scale {
                        for (r, &sr) in s.iter().enumerate() {
                            gs.row_mut(r).iter_mut().for_each(|v| *v *= sr);
                        }
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (gi, &y) in gx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *gi *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Linear { x, w } => {
                    let gx = g.matmul(self.value(*w))?;
                    let gw = g.t_matmul(self.value(*x))?;
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::ScaleAdd(terms) => {
                    for &(alpha, v) in terms {
                        let mut gv = g.clone();
                        if alpha != 1.0 {
                            gv.as_mut_slice().iter_mut().for_each(|x| *x *= alpha);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                }
                Op::Bilinear {
                    n,
                    weights,
                    users,
                    items,
                    left,
                } => {
                    let nv = self.value(*n);
                    let (rows, d) = nv.shape();
                    let mut gn = NumArray::zeros(rows, d);
                    for (t, (&w, l)) in weights.iter().zip(left).enumerate() {
                        let wv = self.value(w);
                        // right[i] = W_t n[i]
                        let right = nv.matmul_t(wv)?;
                        let mut c = NumArray::zeros(rows, d);
                        for (k, (&u, &i)) in users.iter().zip(items).enumerate() {
                            let gk = g.get(k, t);
                            if gk == 0.0 {
                                continue;
                            }
                            axpy(gk, l.row(u), gn.row_mut(i));
                            axpy(gk, right.row(i), gn.row_mut(u));
                            axpy(gk, nv.row(i), c.row_mut(u));
                        }
                        accumulate(&mut grads[w.0], nv.t_matmul(&c)?);
                    }
                    accumulate(&mut grads[n.0], gn);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = NumArray::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.as_slice()[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Cosine { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = NumArray::zeros(av.rows(), av.cols());
                    let mut gb = NumArray::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let (ar, br) = (av.row(r), bv.row(r));
                        let (na, nb) = (dot(ar, ar).sqrt(), dot(br, br).sqrt());
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let gr = g.get(r, 0);
                        let cos = node.value.get(r, 0);
                        let inv = 1.0 / (na * nb);
                        let ga_r = ga.row_mut(r);
                        for ((o, &x), &y) in ga_r.iter_mut().zip(ar).zip(br) {
                            *o = gr * (y * inv - cos * x / (na * na));
                        }
                        let gb_r = gb.row_mut(r);
                        for ((o, &x), &y) in gb_r.iter_mut().zip(ar).zip(br) {
                            *o = gr * (x * inv - cos * y / (nb * nb));
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    accumulate(&mut grads[x.0], NumArray::filled(rows, cols, g.as_slice()[0]));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<NumArray>, g: NumArray) {
    match slot {
        Some(acc) => acc.add_scaled(1.0, &g),
        None => *slot = Some(g),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(x: &NumArray) -> NumArray {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: usize, cols: usize, v: &[f64]) -> NumArray {
        NumArray::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn gather_identity_and_scatter() {
        let mut tape = Tape::new();
        let table = tape.param(0, arr(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let same = tape.gather(table, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(same), tape.value(table));
        let twice = tape.gather(table, &[1, 1]).unwrap();
        let s = tape.sum(twice);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().as_slice(), &[0., 0., 2., 2., 0., 0.]);
        assert!(tape.gather(table, &[3]).is_err());
    }

    #[test]
    fn concat_shapes_and_split() {
        let mut tape = Tape::new();
        let a = tape.param(0, arr(2, 1, &[1., 2.]));
        let b = tape.param(1, arr(2, 2, &[3., 4., 5., 6.]));
        let c = tape.param(2, arr(2, 1, &[7., 8.]));
        let cat = tape.concat_cols(&[a, b, c]).unwrap();
        assert_eq!(tape.value(cat).shape(), (2, 4));
        assert_eq!(tape.value(cat).row(1), &[2., 5., 6., 8.]);

        let e0 = tape.constant(NumArray::zeros(2, 0));
        let e1 = tape.constant(NumArray::zeros(2, 0));
        let only = tape.concat_cols(&[e0, b, e1]).unwrap();
        assert_eq!(tape.value(only), tape.value(b));

        let weights = tape.constant(arr(2, 4, &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let dotted = tape.scale_add(&[(1.0, cat)]).unwrap();
        let prod = tape.cosine_rows(dotted, weights).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().shape(), (2, 1));
        assert_eq!(g.get(1).unwrap().shape(), (2, 2));
        assert_eq!(g.get(2).unwrap().shape(), (2, 1));

        let short = tape.constant(NumArray::zeros(3, 1));
        assert!(tape.concat_cols(&[a, short]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(0, arr(2, 3, &[0.5; 6]));
        let q = tape.param(1, arr(1, 1, &[2.0]));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().as_slice(), &[1.0; 6]);
        assert!(g.get(1).is_none());
        let _ = q;
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(0, arr(2, 1, &[1., 2.]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn elementary_values() {
        let mut tape = Tape::new();
        let z = tape.constant(arr(1, 1, &[0.0]));
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).as_slice(), &[0.0]);
        let l = tape.constant(arr(1, 5, &[0.3; 5]));
        let s = tape.softmax_rows(l);
        for &p in tape.value(s).as_slice() {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let v = tape.constant(arr(2, 2, &[1., 2., 0., 0.]));
        let c = tape.cosine_rows(v, v).unwrap();
        assert!((tape.value(c).get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(tape.value(c).get(1, 0), 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let uniform = tape.constant(NumArray::zeros(3, 5));
        let ce = tape.cross_entropy_rows(uniform, &[0, 2, 4]).unwrap();
        assert!((tape.value(ce).as_slice()[0] - 5f64.ln()).abs() < 1e-12);
        let sharp = tape.constant(arr(1, 2, &[800.0, -800.0]));
        let ce = tape.cross_entropy_rows(sharp, &[0]).unwrap();
        assert!(tape.value(ce).as_slice()[0] < 1e-300);
        assert!(tape.cross_entropy_rows(sharp, &[2]).is_err());
        let empty = tape.constant(NumArray::zeros(0, 2));
        assert!(tape.cross_entropy_rows(empty, &[]).is_err());
    }

    #[test]
    fn zero_cosine_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(0, arr(1, 2, &[0., 0.]));
        let b = tape.param(1, arr(1, 2, &[1., 1.]));
        let c = tape.cosine_rows(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().as_slice(), &[0., 0.]);
        assert_eq!(g.get(1).unwrap().as_slice(), &[0., 0.]);
    }
}
