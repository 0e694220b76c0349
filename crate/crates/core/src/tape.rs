//! Minimal reverse-mode autodiff over dense matrices.
//!
//! A `Tape` records the forward computation as a flat list of nodes; the
//! backward pass walks the list in reverse with fixed accumulation order, so
//! gradients are bit-reproducible. Only the operations the model needs are
//! implemented.

use crate::math::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// One anchor row of a contrastive objective: positives share the anchor's
/// group, negatives are the contrast set. Indices address batch rows.
#[derive(Clone, Debug)]
pub struct Anchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

enum Op {
    Leaf,
    /// A(m×k)·B(k×n)
    MatMul(NodeId, NodeId),
    /// A(m×k)·B(n×k)ᵀ
    MatMulTb(NodeId, NodeId),
    /// matrix + row vector broadcast over rows
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    ConcatCols(NodeId, NodeId),
    /// Mean of table rows per output row: (bucket, count) pairs, ascending.
    EmbedMean(NodeId, Vec<Vec<(usize, usize)>>),
    /// Weighted sum of 1×1 scalars.
    Lincomb(Vec<(NodeId, f64)>),
    /// Mean over rows of -(pos·ln p + neg·ln(1-p)) with probability clamping.
    LogLoss { probs: NodeId, pos: Mat, neg: Mat, clamp: f64 },
    /// Mean over anchors (and positives within an anchor) of
    /// -log(e^{s_ap/τ} / (e^{s_ap/τ} + Σ_n e^{s_an/τ})) over a similarity
    /// matrix.
    InfoNce { sims: NodeId, anchors: Vec<Anchor>, tau: f64 },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.at(0, 0)
    }

    pub fn leaf(&mut self, value: Mat, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul_tb(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulTb(a, b), needs)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let m = self.value(a);
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(m.cols(), r.cols());
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(r.row(0).iter()) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let needs = self.needs(a);
        self.push(value, Op::NormalizeRows(a), needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows());
        let mut value = Mat::zeros(ma.rows(), ma.cols() + mb.cols());
        for i in 0..ma.rows() {
            let row = value.row_mut(i);
            row[..ma.cols()].copy_from_slice(ma.row(i));
            row[ma.cols()..].copy_from_slice(mb.row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a, b), needs)
    }

    /// Per output row, the mean of `table` rows selected by (bucket, count)
    /// pairs; pairs must be in ascending bucket order.
    pub fn embed_mean(&mut self, table: NodeId, rows: Vec<Vec<(usize, usize)>>) -> NodeId {
        let t = self.value(table);
        let d = t.cols();
        let mut value = Mat::zeros(rows.len(), d);
        for (i, pairs) in rows.iter().enumerate() {
            let out = value.row_mut(i);
            let mut total = 0usize;
            for &(bucket, count) in pairs {
                let src = t.row(bucket);
                for (o, &v) in out.iter_mut().zip(src.iter()) {
                    *o += v * count as f64;
                }
                total += count;
            }
            if total > 0 {
                let inv = 1.0 / total as f64;
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let needs = self.needs(table);
        self.push(value, Op::EmbedMean(table, rows), needs)
    }

    pub fn lincomb(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let mut total = 0.0;
        let mut needs = false;
        for &(id, coeff) in &terms {
            debug_assert_eq!(self.value(id).len(), 1);
            total += coeff * self.value(id).at(0, 0);
            needs |= self.needs(id);
        }
        self.push(Mat::from_vec(1, 1, vec![total]), Op::Lincomb(terms), needs)
    }

    pub fn log_loss(&mut self, probs: NodeId, pos: Mat, neg: Mat, clamp: f64) -> NodeId {
        let p = self.value(probs);
        assert!(p.same_shape(&pos) && p.same_shape(&neg));
        let batch = p.rows() as f64;
        let mut total = 0.0;
        for i in 0..p.rows() {
            for ((&v, &w_pos), &w_neg) in
                p.row(i).iter().zip(pos.row(i).iter()).zip(neg.row(i).iter())
            {
                let v = v.clamp(clamp, 1.0 - clamp);
                total -= w_pos * v.ln() + w_neg * (1.0 - v).ln();
            }
        }
        let needs = self.needs(probs);
        self.push(
            Mat::from_vec(1, 1, vec![total / batch]),
            Op::LogLoss { probs, pos, neg, clamp },
            needs,
        )
    }

    pub fn info_nce(&mut self, sims: NodeId, anchors: Vec<Anchor>, tau: f64) -> NodeId {
        let value = info_nce_value(self.value(sims), &anchors, tau);
        let needs = self.needs(sims);
        self.push(Mat::from_vec(1, 1, vec![value]), Op::InfoNce { sims, anchors, tau }, needs)
    }

    /// Backward pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_seeded(root, Mat::from_vec(1, 1, vec![1.0]))
    }

    /// Backward pass with an explicit output adjoint (for jacobian rows).
    pub fn backward_seeded(&self, root: NodeId, seed: Mat) -> Grads {
        assert!(self.value(root).same_shape(&seed));
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, gout: &Mat, grads: &mut Vec<Option<Mat>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.add_grad(grads, *a, gout.matmul_tb(vb));
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, va.matmul_ta(gout));
                }
            }
            Op::MatMulTb(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.add_grad(grads, *a, gout.matmul(vb));
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, gout.matmul_ta(va));
                }
            }
            Op::AddRow(a, row) => {
                self.add_grad(grads, *a, gout.clone());
                if self.needs(*row) {
                    let mut sums = Mat::zeros(1, gout.cols());
                    for i in 0..gout.rows() {
                        for (s, &g) in sums.row_mut(0).iter_mut().zip(gout.row(i).iter()) {
                            *s += g;
                        }
                    }
                    self.add_grad(grads, *row, sums);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut dx = gout.clone();
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice().iter()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = gout.clone();
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(y.as_slice().iter()) {
                    *d *= v * (1.0 - v);
                }
                self.add_grad(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y
                        .row(i)
                        .iter()
                        .zip(gout.row(i).iter())
                        .map(|(&yv, &gv)| yv * gv)
                        .sum();
                    for ((d, &yv), &gv) in
                        dx.row_mut(i).iter_mut().zip(y.row(i).iter()).zip(gout.row(i).iter())
                    {
                        *d = yv * (gv - dot);
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                    let dot: f64 = x
                        .row(i)
                        .iter()
                        .zip(gout.row(i).iter())
                        .map(|(&xv, &gv)| xv * gv)
                        .sum();
                    let n3 = norm * norm * norm;
                    for ((d, &xv), &gv) in
                        dx.row_mut(i).iter_mut().zip(x.row(i).iter()).zip(gout.row(i).iter())
                    {
                        *d = gv / norm - xv * dot / n3;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                if self.needs(*a) {
                    let mut da = Mat::zeros(gout.rows(), ca);
                    for i in 0..gout.rows() {
                        da.row_mut(i).copy_from_slice(&gout.row(i)[..ca]);
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Mat::zeros(gout.rows(), cb);
                    for i in 0..gout.rows() {
                        db.row_mut(i).copy_from_slice(&gout.row(i)[ca..]);
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::EmbedMean(table, rows) => {
                let t = self.value(*table);
                let mut dt = Mat::zeros(t.rows(), t.cols());
                for (i, pairs) in rows.iter().enumerate() {
                    let total: usize = pairs.iter().map(|&(_, c)| c).sum();
                    if total == 0 {
                        continue;
                    }
                    let inv = 1.0 / total as f64;
                    let g = gout.row(i);
                    for &(bucket, count) in pairs {
                        let w = count as f64 * inv;
                        for (d, &gv) in dt.row_mut(bucket).iter_mut().zip(g.iter()) {
                            *d += gv * w;
                        }
                    }
                }
                self.add_grad(grads, *table, dt);
            }
            Op::Lincomb(terms) => {
                let g = gout.at(0, 0);
                for &(id, coeff) in terms {
                    self.add_grad(grads, id, Mat::from_vec(1, 1, vec![g * coeff]));
                }
            }
            Op::LogLoss { probs, pos, neg, clamp } => {
                let p = self.value(*probs);
                let batch = p.rows() as f64;
                let g = gout.at(0, 0);
                let mut dp = Mat::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    for (c, ((d, &v), (&w_pos, &w_neg))) in dp
                        .row_mut(i)
                        .iter_mut()
                        .zip(p.row(i).iter())
                        .zip(pos.row(i).iter().zip(neg.row(i).iter()))
                        .enumerate()
                    {
                        let _ = c;
                        if v <= *clamp || v >= 1.0 - *clamp {
                            continue; // clamped region is flat
                        }
                        *d = g * (-(w_pos / v) + w_neg / (1.0 - v)) / batch;
                    }
                }
                self.add_grad(grads, *probs, dp);
            }
            Op::InfoNce { sims, anchors, tau } => {
                let s = self.value(*sims);
                let g = gout.at(0, 0);
                let valid: Vec<&Anchor> = anchors
                    .iter()
                    .filter(|a| !a.positives.is_empty() && !a.negatives.is_empty())
                    .collect();
                if valid.is_empty() {
                    return;
                }
                let mut ds = Mat::zeros(s.rows(), s.cols());
                let anchor_w = 1.0 / valid.len() as f64;
                for a in valid {
                    let pos_w = anchor_w / a.positives.len() as f64;
                    for &p in &a.positives {
                        // softmax over {positive} ∪ negatives in s/τ space
                        let zp = s.at(a.anchor, p) / tau;
                        let mut m = zp;
                        for &n in &a.negatives {
                            m = m.max(s.at(a.anchor, n) / tau);
                        }
                        let ep = (zp - m).exp();
                        let mut denom = ep;
                        for &n in &a.negatives {
                            denom += (s.at(a.anchor, n) / tau - m).exp();
                        }
                        let wp = ep / denom;
                        let row = ds.row_mut(a.anchor);
                        row[p] += g * pos_w * (wp - 1.0) / tau;
                        for &n in &a.negatives {
                            let wn = ((s.at(a.anchor, n) / tau) - m).exp() / denom;
                            ds.row_mut(a.anchor)[n] += g * pos_w * wn / tau;
                        }
                    }
                }
                self.add_grad(grads, *sims, ds);
            }
        }
    }
}

/// Forward value of the InfoNCE objective over a similarity matrix; shared
/// by the tape op and the pure loss functions.
pub fn info_nce_value(sims: &Mat, anchors: &[Anchor], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in anchors {
        if a.positives.is_empty() || a.negatives.is_empty() {
            continue;
        }
        let mut anchor_loss = 0.0;
        for &p in &a.positives {
            let zp = sims.at(a.anchor, p) / tau;
            let mut m = zp;
            for &n in &a.negatives {
                m = m.max(sims.at(a.anchor, n) / tau);
            }
            let mut denom = (zp - m).exp();
            for &n in &a.negatives {
                denom += (sims.at(a.anchor, n) / tau - m).exp();
            }
            anchor_loss += -(zp - m) + denom.ln();
        }
        total += anchor_loss / a.positives.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
