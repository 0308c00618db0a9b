//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep is a single reverse scan.

use super::kernels::{self, gemm, AttnMask, LayerNormStats};
use super::{NumericsError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameter values concatenated in id order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_values(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            g.scale_assign(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Vec<f64>),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: LayerNormStats,
    },
    LogSoftmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Tensor>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    Unfold {
        x: NodeId,
        rows: usize,
    },
    /// Scalar loss with its gradient wrt `input` precomputed at forward time.
    Loss {
        input: NodeId,
        grad: Tensor,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// A single forward computation recorded for differentiation.
///
/// Parameters are borrowed from the store, never copied. One graph serves
/// one forward pass on one thread.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.store.get(*p),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(NumericsError::Shape(format!(
                "add: {:?} vs {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId, NumericsError> {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId, NumericsError> {
        let vx = self.value(x);
        if vx.dims() != c.dims() {
            return Err(NumericsError::Shape(format!(
                "add_const: {:?} vs {:?}",
                vx.dims(),
                c.dims()
            )));
        }
        let mut v = vx.clone();
        v.add_assign(c);
        Ok(self.push(v, Op::AddConst(x)))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_assign(k);
        self.push(v, Op::Scale(x, k))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId, NumericsError> {
        let mut v = self.value(x).clone();
        if v.len() != mask.len() {
            return Err(NumericsError::Shape(format!(
                "mul_const: {} values vs mask of {}",
                v.len(),
                mask.len()
            )));
        }
        for (a, m) in v.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        Ok(self.push(v, Op::MulConst(x, mask)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = kernels::gelu(self.value(x));
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: ParamId,
        bias: ParamId,
    ) -> Result<NodeId, NumericsError> {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let (v, stats) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let v = kernels::log_softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::LogSoftmax(x)))
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<NodeId, NumericsError> {
        let (out, probs) = kernels::multi_head_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            mask,
        )?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(NumericsError::Shape(format!(
                    "concat_rows: part {:?} vs {cols} columns",
                    t.dims()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(NumericsError::Shape(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                t.rows()
            )));
        }
        let v = t.slice_rows(start, len);
        Ok(self.push(v, Op::SliceRows(x, start)))
    }

    /// Groups every `stride` consecutive rows into one row, zero-padding the
    /// tail: `[n, f]` becomes `[ceil(n/stride), stride·f]`.
    pub fn unfold(&mut self, x: NodeId, stride: usize) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 || stride == 0 {
            return Err(NumericsError::Shape(format!(
                "unfold of {:?} by {stride}",
                t.dims()
            )));
        }
        let (n, f) = (t.rows(), t.cols());
        let out_rows = n.div_ceil(stride);
        let mut data = t.data().to_vec();
        data.resize(out_rows * stride * f, 0.0);
        let v = Tensor::matrix(out_rows, stride * f, data)?;
        Ok(self.push(v, Op::Unfold { x, rows: n }))
    }

    /// Records a scalar loss whose gradient wrt `input` is already known.
    pub fn loss(
        &mut self,
        input: NodeId,
        value: f64,
        grad: Tensor,
    ) -> Result<NodeId, NumericsError> {
        if grad.dims() != self.value(input).dims() {
            return Err(NumericsError::Shape(format!(
                "loss gradient {:?} vs input {:?}",
                grad.dims(),
                self.value(input).dims()
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Loss { input, grad }))
    }

    /// Mean token cross-entropy of `logits [n, c]` against class `targets`,
    /// with optional label smoothing spread uniformly over all classes.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<NodeId, NumericsError> {
        let x = self.value(logits);
        let (n, c) = (x.rows(), x.cols());
        if targets.len() != n || n == 0 {
            return Err(NumericsError::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let logp = kernels::log_softmax_rows(x)?;
        let mut grad = Tensor::zeros(&[n, c]);
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(NumericsError::Shape(format!(
                    "target {y} outside {c} classes"
                )));
            }
            let row = logp.row(i);
            let uniform = -row.iter().sum::<f64>() / c as f64;
            total += (1.0 - smoothing) * -row[y] + smoothing * uniform;
            let g = grad.row_mut(i);
            for (j, lp) in row.iter().enumerate() {
                g[j] = lp.exp() - smoothing / c as f64;
            }
            g[y] -= 1.0 - smoothing;
        }
        grad.scale_assign(1.0 / n as f64);
        self.loss(logits, total / n as f64, grad)
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, NumericsError> {
        let mut total = 0.0;
        for &(n, w) in terms {
            let v = self.value(n);
            if v.len() != 1 {
                return Err(NumericsError::Shape(format!(
                    "weighted_sum term of dims {:?}",
                    v.dims()
                )));
            }
            total += w * v.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter of the store gets a
    /// gradient; parameters not on the graph get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward from non-scalar node of dims {:?}",
                lv.dims()
            )));
        }
        if !lv.item().is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "loss value {}",
                lv.item()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(lv.dims(), 1.0));
        let mut grads = Gradients::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => grads.grads[p.0].add_assign(&d),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let da = slot(&mut adj, *a, va.dims());
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        d.data(),
                        n,
                        1,
                        vb.data(),
                        1,
                        n,
                        1.0,
                        da.data_mut(),
                        k,
                        1,
                    );
                    let db = slot(&mut adj, *b, vb.dims());
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        va.data(),
                        1,
                        k,
                        d.data(),
                        n,
                        1,
                        1.0,
                        db.data_mut(),
                        n,
                        1,
                    );
                }
                Op::Add(a, b) => {
                    slot(&mut adj, *a, d.dims()).add_assign(&d);
                    slot(&mut adj, *b, d.dims()).add_assign(&d);
                }
                Op::AddBias(x, b) => {
                    slot(&mut adj, *x, d.dims()).add_assign(&d);
                    let n = d.cols();
                    let bdims = self.value(*b).dims().to_vec();
                    let db = slot(&mut adj, *b, &bdims);
                    if n > 0 {
                        for row in d.data().chunks(n) {
                            for (g, v) in db.data_mut().iter_mut().zip(row) {
                                *g += *v;
                            }
                        }
                    }
                }
                Op::AddConst(x) => slot(&mut adj, *x, d.dims()).add_assign(&d),
                Op::Scale(x, k) => {
                    let dx = slot(&mut adj, *x, d.dims());
                    for (g, v) in dx.data_mut().iter_mut().zip(d.data()) {
                        *g += k * v;
                    }
                }
                Op::MulConst(x, mask) => {
                    let dx = slot(&mut adj, *x, d.dims());
                    for ((g, v), m) in dx.data_mut().iter_mut().zip(d.data()).zip(mask) {
                        *g += v * m;
                    }
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let dx = slot(&mut adj, *x, d.dims());
                    for ((g, v), xi) in dx.data_mut().iter_mut().zip(d.data()).zip(vx.data()) {
                        *g += v * kernels::gelu_grad_scalar(*xi);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let (m, n) = (d.rows(), d.cols());
                    let g = self.value(*gain).clone();
                    {
                        let dg = slot(&mut adj, *gain, g.dims());
                        for i in 0..m {
                            let xh = stats.normalized.row(i);
                            for (j, gv) in dg.data_mut().iter_mut().enumerate() {
                                *gv += d.row(i)[j] * xh[j];
                            }
                        }
                    }
                    {
                        let db = slot(&mut adj, *bias, g.dims());
                        for i in 0..m {
                            for (j, bv) in db.data_mut().iter_mut().enumerate() {
                                *bv += d.row(i)[j];
                            }
                        }
                    }
                    let dx = slot(&mut adj, *x, d.dims());
                    let mut dxh = vec![0.0; n];
                    for i in 0..m {
                        let is = stats.inv_std[i];
                        if is == 0.0 {
                            continue;
                        }
                        let xh = stats.normalized.row(i);
                        for j in 0..n {
                            dxh[j] = d.row(i)[j] * g.data()[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let row = dx.row_mut(i);
                        for j in 0..n {
                            row[j] += is * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let y = self.value(NodeId(i)).clone();
                    let dx = slot(&mut adj, *x, d.dims());
                    let n = d.cols();
                    if n > 0 {
                        for r in 0..d.rows() {
                            let s: f64 = d.row(r).iter().sum();
                            let yr = y.row(r);
                            let dr = d.row(r);
                            for (j, g) in dx.row_mut(r).iter_mut().enumerate() {
                                *g += dr[j] - yr[j].exp() * s;
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    self.attention_backward(&mut adj, &d, *q, *k, *v, *heads, probs);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let dims = self.value(*p).dims().to_vec();
                        let len = dims.iter().product::<usize>();
                        let dp = slot(&mut adj, *p, &dims);
                        for (g, v) in dp.data_mut().iter_mut().zip(&d.data()[off..off + len]) {
                            *g += *v;
                        }
                        off += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    let dims = self.value(*x).dims().to_vec();
                    let c = d.cols();
                    let dx = slot(&mut adj, *x, &dims);
                    let dst = &mut dx.data_mut()[start * c..start * c + d.len()];
                    for (g, v) in dst.iter_mut().zip(d.data()) {
                        *g += *v;
                    }
                }
                Op::Unfold { x, rows } => {
                    let dims = self.value(*x).dims().to_vec();
                    let len = rows * dims[1];
                    let dx = slot(&mut adj, *x, &dims);
                    for (g, v) in dx.data_mut().iter_mut().zip(&d.data()[..len]) {
                        *g += *v;
                    }
                }
                Op::Loss { input, grad } => {
                    let s = d.item();
                    let di = slot(&mut adj, *input, grad.dims());
                    for (g, v) in di.data_mut().iter_mut().zip(grad.data()) {
                        *g += s * v;
                    }
                }
                Op::WeightedSum(terms) => {
                    let s = d.item();
                    for (n, w) in terms {
                        let dims = self.value(*n).dims().to_vec();
                        slot(&mut adj, *n, &dims).data_mut()[0] += w * s;
                    }
                }
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        adj: &mut [Option<Tensor>],
        d: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[Tensor],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, dq) = (vq.rows(), vq.cols());
        let tk = vk.rows();
        let dv = vv.cols();
        let (hq, hv) = (dq / heads, dv / heads);
        let scale = 1.0 / (hq as f64).sqrt();
        let mut gq = Tensor::zeros(vq.dims());
        let mut gk = Tensor::zeros(vk.dims());
        let mut gv = Tensor::zeros(vv.dims());
        let mut dp = vec![0.0; tq * tk];
        for (h, p) in probs.iter().enumerate() {
            // dP = dO_h · V_hᵀ
            gemm(
                tq,
                hv,
                tk,
                1.0,
                &d.data()[h * hv..],
                dv,
                1,
                &vv.data()[h * hv..],
                1,
                dv,
                0.0,
                &mut dp,
                tk,
                1,
            );
            // dV_h += Pᵀ · dO_h
            gemm(
                tk,
                tq,
                hv,
                1.0,
                p.data(),
                1,
                tk,
                &d.data()[h * hv..],
                dv,
                1,
                1.0,
                &mut gv.data_mut()[h * hv..],
                dv,
                1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..tq {
                let pr = &p.data()[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ_h += scale · dS · K_h ; dK_h += scale · dSᵀ · Q_h
            gemm(
                tq,
                tk,
                hq,
                scale,
                &dp,
                tk,
                1,
                &vk.data()[h * hq..],
                dq,
                1,
                1.0,
                &mut gq.data_mut()[h * hq..],
                dq,
                1,
            );
            gemm(
                tk,
                tq,
                hq,
                scale,
                &dp,
                1,
                tk,
                &vq.data()[h * hq..],
                dq,
                1,
                1.0,
                &mut gk.data_mut()[h * hq..],
                dq,
                1,
            );
        }
        slot(adj, q, vq.dims()).add_assign(&gq);
        slot(adj, k, vk.dims()).add_assign(&gk);
        slot(adj, v, vv.dims()).add_assign(&gv);
    }
}

fn slot<'s>(adj: &'s mut [Option<Tensor>], id: NodeId, dims: &[usize]) -> &'s mut Tensor {
    adj[id.0].get_or_insert_with(|| Tensor::zeros(dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.25, 0.0, 1.5]]).unwrap(),
        );
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(&[vec![3.0, -2.0]]).unwrap());
        let wn = g.param(w);
        let y = g.matmul(x, wn).unwrap();
        // sum via a loss node with all-ones gradient
        let total: f64 = g.value(y).data().iter().sum();
        let l = g.loss(y, total, Tensor::filled(&[1, 3], 1.0)).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).data(), &[3.0, 3.0, 3.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_one_hot() {
        let mut store = ParamStore::new();
        let z = store.add(
            "z",
            Tensor::from_rows(&[vec![0.2, -1.3, 0.7, 0.0]]).unwrap(),
        );
        let mut g = Graph::new(&store);
        let zn = g.param(z);
        let l = g.cross_entropy(zn, &[2], 0.0).unwrap();
        let grads = g.backward(l).unwrap();
        let sm = kernels::softmax_rows(store.get(z)).unwrap();
        for j in 0..4 {
            let expect = sm.data()[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((grads.get(z).data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(&[1, 1], 2.0));
        let b = store.add("b", Tensor::filled(&[3], 1.0));
        let mut g = Graph::new(&store);
        let an = g.param(a);
        let l = g.loss(an, 2.0, Tensor::filled(&[1, 1], 1.0)).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).dims(), &[3]);
        assert_eq!(grads.get(b).data(), &[0.0, 0.0, 0.0]);
    }
}
