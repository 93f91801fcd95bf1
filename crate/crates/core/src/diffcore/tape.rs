use std::collections::HashMap;

use super::lstm::{self, LstmCache};
use super::matrix::gemm;
use super::{Matrix, ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean values at or below this make the coefficient of variation zero.
pub const CV_MEAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
    },
    Softmax(NodeId),
    TopK {
        gate: NodeId,
        selected: Vec<Vec<usize>>,
        sums: Vec<f64>,
    },
    RowSum(NodeId),
    MeanRows(NodeId),
    Bce {
        pred: NodeId,
        labels: Vec<f64>,
    },
    BalanceCv {
        mean_gate: NodeId,
        counts: Vec<f64>,
        alpha: f64,
    },
    FillRows {
        present: Option<NodeId>,
        mask: Vec<bool>,
        fill: Option<NodeId>,
    },
    BagMean {
        table: NodeId,
        bags: Vec<Vec<usize>>,
    },
    Lstm {
        x: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        cache: Box<LstmCache>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Reverse-mode computation record for one forward pass.
///
/// Parameters enter the tape through [`Tape::param`], which returns the same
/// node for repeated requests so gradients from every use accumulate there
/// before being added to the store.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries, ties broken toward the smaller index,
/// returned in descending order of value.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Smallest distance of any recorded input to a point where the graph is
    /// not differentiable: ReLU inputs at zero, top-k selection boundaries and
    /// the BCE clamp. Infinite when the tape has no such ops.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::TopK { gate, selected, .. } => {
                    let g = self.value(*gate);
                    for (r, sel) in selected.iter().enumerate() {
                        let row = g.row(r);
                        let low = sel.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
                        let high = (0..row.len())
                            .filter(|j| !sel.contains(j))
                            .map(|j| row[j])
                            .fold(f64::NEG_INFINITY, f64::max);
                        margin = margin.min(low - high);
                    }
                }
                Op::Bce { pred, .. } => {
                    for p in self.value(*pred).data() {
                        margin = margin.min((p - BCE_CLAMP).abs()).min((1.0 - BCE_CLAMP - p).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.get(id).as_matrix(), Op::Param(id));
        self.params.insert(id, node);
        node
    }

    pub fn param_named(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        Ok(self.param(store, store.id(name)?))
    }

    /// `x * w^T + b`: rows of `x` are inputs, `w` is `out x in`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(Error::shape("linear", &xv.shape(), &wv.shape()));
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = Matrix::zeros(n, m);
        gemm(n, k, m, 1.0, xv.data(), false, wv.data(), true, 0.0, out.data_mut());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.rows() != 1 || bv.cols() != m {
                return Err(Error::shape("linear bias", &[1, m], &bv.shape()));
            }
            for r in 0..n {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, &av.shape(), &bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat", &[rows], &v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len` of `src`.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sv = self.value(src);
        if start + len > sv.cols() || len == 0 {
            return Err(Error::shape("slice", &sv.shape(), &[start, len]));
        }
        let mut out = Matrix::zeros(sv.rows(), len);
        for r in 0..sv.rows() {
            out.row_mut(r).copy_from_slice(&sv.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::Slice { src, start }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Empty("softmax"));
        }
        if !av.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Keeps the `k` largest entries of each row and renormalizes them to
    /// sum to one; all other entries become zero. Returns the node and the
    /// selected indices per row (descending gate order).
    pub fn top_k_renorm(&mut self, gate: NodeId, k: usize) -> Result<(NodeId, Vec<Vec<usize>>)> {
        if k == 0 {
            return Err(Error::Config("top-k requires k >= 1".into()));
        }
        let gv = self.value(gate);
        let mut out = Matrix::zeros(gv.rows(), gv.cols());
        let mut selected = Vec::with_capacity(gv.rows());
        let mut sums = Vec::with_capacity(gv.rows());
        for r in 0..gv.rows() {
            let row = gv.row(r);
            let sel = top_k_indices(row, k);
            let s: f64 = sel.iter().map(|&j| row[j]).sum();
            for &j in &sel {
                out.set(r, j, row[j] / s);
            }
            selected.push(sel);
            sums.push(s);
        }
        let picks = selected.clone();
        Ok((
            self.push(
                out,
                Op::TopK {
                    gate,
                    selected,
                    sums,
                },
            ),
            picks,
        ))
    }

    /// Sum over columns: `B x K -> B x 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(av.rows(), 1, data).expect("row_sum shape");
        self.push(out, Op::RowSum(a))
    }

    /// Mean over rows: `B x K -> 1 x K`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let n = av.rows() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Mean binary cross-entropy of a `B x 1` probability column.
    pub fn bce(&mut self, pred: NodeId, labels: &[f64]) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.cols() != 1 || pv.rows() != labels.len() {
            return Err(Error::shape("bce", &pv.shape(), &[labels.len(), 1]));
        }
        if labels.is_empty() {
            return Err(Error::Empty("bce"));
        }
        let loss = bce_value(pv.data(), labels);
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `alpha * CV(counts ⊙ mean_gate)` with population standard deviation.
    /// `counts` are constants; gradient flows only into `mean_gate`.
    pub fn balance_cv(&mut self, mean_gate: NodeId, counts: &[f64], alpha: f64) -> Result<NodeId> {
        let pv = self.value(mean_gate);
        if pv.rows() != 1 || pv.cols() != counts.len() {
            return Err(Error::shape("balance_cv", &pv.shape(), &[1, counts.len()]));
        }
        let x: Vec<f64> = counts.iter().zip(pv.data()).map(|(f, p)| f * p).collect();
        let value = alpha * coefficient_of_variation(&x);
        Ok(self.push(
            Matrix::row_vector(vec![value]),
            Op::BalanceCv {
                mean_gate,
                counts: counts.to_vec(),
                alpha,
            },
        ))
    }

    /// Scatters the rows of `present` into the rows where `mask` is true and
    /// fills every other row with the `1 x d` row `fill` (zeros when `None`).
    pub fn fill_rows(
        &mut self,
        present: Option<NodeId>,
        mask: &[bool],
        fill: Option<NodeId>,
        width: usize,
    ) -> Result<NodeId> {
        let n_present = mask.iter().filter(|&&m| m).count();
        if let Some(p) = present {
            let pv = self.value(p);
            if pv.rows() != n_present || pv.cols() != width {
                return Err(Error::shape("fill_rows", &pv.shape(), &[n_present, width]));
            }
        } else if n_present > 0 {
            return Err(Error::shape("fill_rows", &[0, width], &[n_present, width]));
        }
        if let Some(f) = fill {
            let fv = self.value(f);
            if fv.shape() != [1, width] {
                return Err(Error::shape("fill_rows fill", &fv.shape(), &[1, width]));
            }
        }
        let mut out = Matrix::zeros(mask.len(), width);
        let mut j = 0;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                let src = self.nodes[present.unwrap().0].value.row(j);
                out.row_mut(r).copy_from_slice(src);
                j += 1;
            } else if let Some(f) = fill {
                out.row_mut(r).copy_from_slice(self.nodes[f.0].value.data());
            }
        }
        Ok(self.push(
            out,
            Op::FillRows {
                present,
                mask: mask.to_vec(),
                fill,
            },
        ))
    }

    /// Row `i` of the result is the mean of `table` rows listed in `bags[i]`.
    pub fn bag_mean(&mut self, table: NodeId, bags: &[Vec<usize>]) -> Result<NodeId> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(bags.len(), tv.cols());
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Empty("bag_mean"));
            }
            let inv = 1.0 / bag.len() as f64;
            for &t in bag {
                if t >= tv.rows() {
                    return Err(Error::OutOfVocabulary {
                        id: t,
                        vocab: tv.rows(),
                    });
                }
                for (o, v) in out.row_mut(i).iter_mut().zip(tv.row(t)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(
            out,
            Op::BagMean {
                table,
                bags: bags.to_vec(),
            },
        ))
    }

    /// Final hidden state (`batch x h`) of an LSTM run over `x`, which holds
    /// `steps` time-major blocks of `batch` rows. With `reverse` the steps
    /// are consumed last to first.
    pub fn lstm(
        &mut self,
        x: NodeId,
        steps: usize,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        reverse: bool,
    ) -> Result<NodeId> {
        let (xv, wi, wh, bv) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(b));
        let g4 = wi.rows();
        let h = g4 / 4;
        if steps == 0 || xv.rows() == 0 || xv.rows() % steps != 0 {
            return Err(Error::shape("lstm input", &xv.shape(), &[steps]));
        }
        if g4 == 0 || g4 % 4 != 0 || wi.cols() != xv.cols() {
            return Err(Error::shape("lstm w_ih", &wi.shape(), &xv.shape()));
        }
        if wh.shape() != [g4, h] {
            return Err(Error::shape("lstm w_hh", &wh.shape(), &[g4, h]));
        }
        if bv.shape() != [1, g4] {
            return Err(Error::shape("lstm bias", &bv.shape(), &[1, g4]));
        }
        let batch = xv.rows() / steps;
        let cache = lstm::forward(
            xv.data(),
            steps,
            batch,
            xv.cols(),
            wi.data(),
            wh.data(),
            bv.data(),
            h,
            reverse,
        );
        let out = Matrix::from_vec(batch, h, cache.final_hidden().to_vec())?;
        Ok(self.push(
            out,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache: Box::new(cache),
            },
        ))
    }

    /// Propagates `d loss / d node` back through the tape and adds the
    /// parameter gradients into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::NoForward);
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    let p = store.get_mut(*pid);
                    for (dst, src) in p.gradient.iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                    if !self.is_constant(*x) {
                        let dx = slot(&mut grads, *x, n, k);
                        gemm(n, m, k, 1.0, g.data(), false, wv.data(), false, 1.0, dx.data_mut());
                    }
                    let dw = slot(&mut grads, *w, m, k);
                    gemm(m, n, k, 1.0, g.data(), true, xv.data(), false, 1.0, dw.data_mut());
                    if let Some(b) = b {
                        let db = slot(&mut grads, *b, 1, m);
                        for r in 0..n {
                            for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |x, y| x * y);
                    let db = zip_map(&g, av, |x, y| x * y);
                    accumulate_owned(&mut grads, *a, da);
                    accumulate_owned(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate_owned(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, &node.value, |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate_owned(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |x, y| x * (1.0 - y * y));
                    accumulate_owned(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |x, y| x * y * (1.0 - y));
                    accumulate_owned(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if !self.is_constant(p) {
                            let dp = slot(&mut grads, p, g.rows(), w);
                            for r in 0..g.rows() {
                                for (d, v) in dp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                    *d += v;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::Slice { src, start } => {
                    let sv = self.value(*src);
                    let ds = slot(&mut grads, *src, sv.rows(), sv.cols());
                    for r in 0..g.rows() {
                        let dst = &mut ds.row_mut(r)[*start..*start + g.cols()];
                        for (d, v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                        for ((o, gi), si) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(s.row(r)) {
                            *o = si * (gi - dot);
                        }
                    }
                    accumulate_owned(&mut grads, *a, d);
                }
                Op::TopK {
                    gate,
                    selected,
                    sums,
                } => {
                    let w = &node.value;
                    let mut d = Matrix::zeros(w.rows(), w.cols());
                    for r in 0..w.rows() {
                        let sel = &selected[r];
                        let dot: f64 = sel.iter().map(|&j| g.get(r, j) * w.get(r, j)).sum();
                        for &j in sel {
                            d.set(r, j, (g.get(r, j) - dot) / sums[r]);
                        }
                    }
                    accumulate_owned(&mut grads, *gate, d);
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let da = slot(&mut grads, *a, av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gr = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|v| *v += gr);
                    }
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.rows() as f64;
                    let da = slot(&mut grads, *a, av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (d, v) in da.row_mut(r).iter_mut().zip(g.data()) {
                            *d += v / n;
                        }
                    }
                }
                Op::Bce { pred, labels } => {
                    let pv = self.value(*pred);
                    let n = labels.len() as f64;
                    let scale = g.get(0, 0);
                    let data = pv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                -scale / n * (y / p - (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    accumulate_owned(&mut grads, *pred, Matrix::from_vec(pv.rows(), 1, data)?);
                }
                Op::BalanceCv {
                    mean_gate,
                    counts,
                    alpha,
                } => {
                    let pv = self.value(*mean_gate);
                    let x: Vec<f64> = counts.iter().zip(pv.data()).map(|(f, p)| f * p).collect();
                    let dx = cv_gradient(&x);
                    let scale = g.get(0, 0) * alpha;
                    let data = dx.iter().zip(counts).map(|(d, f)| scale * d * f).collect();
                    accumulate_owned(&mut grads, *mean_gate, Matrix::row_vector(data));
                }
                Op::FillRows {
                    present,
                    mask,
                    fill,
                } => {
                    let width = g.cols();
                    if let Some(p) = present {
                        let n_present = self.value(*p).rows();
                        let dp = slot(&mut grads, *p, n_present, width);
                        let mut j = 0;
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                for (d, v) in dp.row_mut(j).iter_mut().zip(g.row(r)) {
                                    *d += v;
                                }
                                j += 1;
                            }
                        }
                    }
                    if let Some(f) = fill {
                        let df = slot(&mut grads, *f, 1, width);
                        for (r, &m) in mask.iter().enumerate() {
                            if !m {
                                for (d, v) in df.data_mut().iter_mut().zip(g.row(r)) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                Op::Lstm {
                    x,
                    w_ih,
                    w_hh,
                    b,
                    cache,
                } => {
                    let (xv, wi, wh) = (self.value(*x), self.value(*w_ih), self.value(*w_hh));
                    let (g4, h, f) = (wi.rows(), wh.cols(), xv.cols());
                    let mut dwi = Matrix::zeros(g4, f);
                    let mut dwh = Matrix::zeros(g4, h);
                    let mut dbias = Matrix::zeros(1, g4);
                    let mut dx = (!self.is_constant(*x)).then(|| Matrix::zeros(xv.rows(), f));
                    lstm::backward(
                        cache,
                        g.data(),
                        xv.data(),
                        f,
                        wi.data(),
                        wh.data(),
                        dwi.data_mut(),
                        dwh.data_mut(),
                        dbias.data_mut(),
                        dx.as_mut().map(|m| m.data_mut()),
                    );
                    accumulate_owned(&mut grads, *w_ih, dwi);
                    accumulate_owned(&mut grads, *w_hh, dwh);
                    accumulate_owned(&mut grads, *b, dbias);
                    if let Some(dx) = dx {
                        accumulate_owned(&mut grads, *x, dx);
                    }
                }
                Op::BagMean { table, bags } => {
                    let tv = self.value(*table);
                    let dt = slot(&mut grads, *table, tv.rows(), tv.cols());
                    for (i, bag) in bags.iter().enumerate() {
                        let inv = 1.0 / bag.len() as f64;
                        for &t in bag {
                            for (d, v) in dt.row_mut(t).iter_mut().zip(g.row(i)) {
                                *d += v * inv;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn is_constant(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Constant)
    }
}

fn slot(grads: &mut [Option<Matrix>], id: NodeId, rows: usize, cols: usize) -> &mut Matrix {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: &Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

fn accumulate_owned(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        empty => *empty = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("zip_map shapes")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn bce_value(pred: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    let total: f64 = pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -total / n
}

/// Population coefficient of variation; zero when the mean is not positive.
pub fn coefficient_of_variation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    if mu <= CV_MEAN_FLOOR {
        return 0.0;
    }
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    var.sqrt() / mu
}

fn cv_gradient(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    if mu <= CV_MEAN_FLOOR {
        return vec![0.0; x.len()];
    }
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    x.iter()
        .map(|&xi| {
            let dsigma = if sigma > 0.0 {
                (xi - mu) / (n * sigma)
            } else {
                0.0
            };
            dsigma / mu - sigma / (mu * mu * n)
        })
        .collect()
}
