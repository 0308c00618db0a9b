//! Forward kernels. Every function here is pure over its inputs.

use super::{NumericsError, Tensor};

/// Additive score offset for masked attention positions.
pub const MASK_NEG: f64 = -1e30;

/// Rows whose variance falls below this normalize to zero.
pub const LN_ZERO_VAR: f64 = 1e-12;

/// Stabilizer inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(
        a.len() >= span(m, k, rsa, csa),
        "gemm: lhs buffer too small"
    );
    assert!(
        b.len() >= span(k, n, rsb, csb),
        "gemm: rhs buffer too small"
    );
    assert!(
        c.len() >= span(m, n, rsc, csc),
        "gemm: output buffer too small"
    );
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn expect_matrix(t: &Tensor, what: &str) -> Result<(usize, usize), NumericsError> {
    if t.rank() != 2 {
        return Err(NumericsError::Shape(format!(
            "{what}: expected a matrix, got dims {:?}",
            t.dims()
        )));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

/// `a [m,k] · b [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = expect_matrix(a, "matmul lhs")?;
    let (k2, n) = expect_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul: inner dims {k} vs {k2}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        1.0,
        a.data(),
        k,
        1,
        b.data(),
        n,
        1,
        0.0,
        out.data_mut(),
        n,
        1,
    );
    Ok(out)
}

/// `a [m,k] · bᵀ` where `b` is `[n,k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = expect_matrix(a, "matmul_nt lhs")?;
    let (n, k2) = expect_matrix(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul_nt: inner dims {k} vs {k2}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        1.0,
        a.data(),
        k,
        1,
        b.data(),
        1,
        k,
        0.0,
        out.data_mut(),
        n,
        1,
    );
    Ok(out)
}

/// Adds `bias [n]` to every row of `x [m,n]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    let (_, n) = expect_matrix(x, "add_bias")?;
    if bias.len() != n {
        return Err(NumericsError::Shape(format!(
            "add_bias: bias has {} values for {n} columns",
            bias.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n.max(1)) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    Ok(out)
}

/// Row statistics kept by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats {
    pub normalized: Tensor,
    /// Per-row `1/sqrt(var + eps)`, or 0 for zero-variance rows.
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with gain and bias.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormStats), NumericsError> {
    let (m, n) = expect_matrix(x, "layer_norm")?;
    if gain.len() != n || bias.len() != n {
        return Err(NumericsError::Shape(format!(
            "layer_norm: gain/bias lengths {}/{} for {n} columns",
            gain.len(),
            bias.len()
        )));
    }
    let mut normalized = Tensor::zeros(&[m, n]);
    let mut out = Tensor::zeros(&[m, n]);
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var < LN_ZERO_VAR {
            // normalized row stays zero
            out.row_mut(i).copy_from_slice(bias.data());
            continue;
        }
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        let nrow = normalized.row_mut(i);
        for (j, v) in row.iter().enumerate() {
            nrow[j] = (v - mean) * is;
        }
        let nrow = normalized.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = nrow[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        out,
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (_, n) = expect_matrix(x, "softmax_rows")?;
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (_, n) = expect_matrix(x, "log_softmax_rows")?;
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// `log Σ exp(vᵢ)` with max-shift stabilization.
pub fn log_sum_exp(values: &[f64]) -> Result<f64, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::Domain(
            "log_sum_exp of an empty slice".into(),
        ));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Two-argument log-add used by the alignment recursions.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Boolean attention mask over `[queries, keys]`; a single row broadcasts
/// over every query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self, NumericsError> {
        if rows * cols != allowed.len() {
            return Err(NumericsError::Shape(format!(
                "mask dims [{rows},{cols}] need {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(AttnMask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all_pass(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Query `i` may only attend to keys in `spans[i]`.
    pub fn from_spans(spans: &[(usize, usize)], cols: usize) -> Self {
        let mut allowed = vec![false; spans.len() * cols];
        for (i, &(s, e)) in spans.iter().enumerate() {
            for a in &mut allowed[i * cols + s..i * cols + e] {
                *a = true;
            }
        }
        AttnMask {
            rows: spans.len(),
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        let r = if self.rows == 1 { 0 } else { q };
        self.allowed[r * self.cols + k]
    }

    pub(crate) fn check(&self, queries: usize, keys: usize) -> Result<(), NumericsError> {
        if self.cols != keys || (self.rows != 1 && self.rows != queries) {
            return Err(NumericsError::Shape(format!(
                "mask [{},{}] not broadcastable to scores [{queries},{keys}]",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub(crate) fn apply(&self, scores: &mut [f64], queries: usize, keys: usize) {
        for i in 0..queries {
            for j in 0..keys {
                if !self.is_allowed(i, j) {
                    scores[i * keys + j] += MASK_NEG;
                }
            }
        }
    }
}

/// Single-head `softmax(q kᵀ / sqrt(dk) + mask) v`. Returns the output and
/// the attention weights.
pub fn masked_scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
) -> Result<(Tensor, Tensor), NumericsError> {
    let (tq, dk) = expect_matrix(q, "attention q")?;
    let (tk, dk2) = expect_matrix(k, "attention k")?;
    let (tv, dv) = expect_matrix(v, "attention v")?;
    if dk != dk2 || tk != tv {
        return Err(NumericsError::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let out = multi_head_attention(q, k, v, 1, mask)?;
    debug_assert_eq!(out.0.dims(), &[tq, dv]);
    let probs = out.1.into_iter().next().expect("one head");
    Ok((out.0, probs))
}

/// Multi-head scaled dot-product attention over column-partitioned heads.
/// Returns the concatenated head outputs and each head's weight matrix.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<(Tensor, Vec<Tensor>), NumericsError> {
    let (tq, dq) = expect_matrix(q, "attention q")?;
    let (tk, dk) = expect_matrix(k, "attention k")?;
    let (tv, dv) = expect_matrix(v, "attention v")?;
    if dq != dk || tk != tv || heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(NumericsError::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}, heads {heads}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if let Some(m) = mask {
        m.check(tq, tk)?;
    }
    let hq = dq / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hq as f64).sqrt();
    let mut out = Tensor::zeros(&[tq, dv]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut p = Tensor::zeros(&[tq, tk]);
        gemm(
            tq,
            hq,
            tk,
            scale,
            &q.data()[h * hq..],
            dq,
            1,
            &k.data()[h * hq..],
            1,
            dk,
            0.0,
            p.data_mut(),
            tk,
            1,
        );
        if let Some(m) = mask {
            m.apply(p.data_mut(), tq, tk);
        }
        if tk > 0 {
            for row in p.data_mut().chunks_mut(tk) {
                softmax_in_place(row);
            }
        }
        gemm(
            tq,
            tk,
            hv,
            1.0,
            p.data(),
            tk,
            1,
            &v.data()[h * hv..],
            dv,
            1,
            0.0,
            &mut out.data_mut()[h * hv..],
            dv,
            1,
        );
        probs.push(p);
    }
    Ok((out, probs))
}

/// Sinusoidal position encodings for positions `0..len`, `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
