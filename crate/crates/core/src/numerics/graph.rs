//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! the seeded output with respect to tracked inputs and to every parameter
//! that took part in the computation.

use rand::Rng;

use super::kernels::{gemm, gemm_strided, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Additive attention mask applied before normalization.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    /// Query `i` may only attend to keys `j <= i`.
    Causal,
    /// Explicit `[q_len, k_len]` additive mask (`-inf` blocks a pair).
    Additive(Tensor),
}

const LN_EPS: f64 = 1e-5;
const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        src: Var,
        positions: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SumAll(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Grads {
    /// Gradient with respect to a tracked input, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

/// Recording tape. Borrows the parameter store for the duration of a pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    /// When false (inference / glancing first pass) nodes are marked as not
    /// needing gradients and backward caches are skipped.
    track: bool,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that never records gradient information.
    pub fn inference(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `x` as `[n, in]`, `w` as `[in, out]`, `b` as `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, din) = as_matrix(tx);
        if tw.shape().len() != 2 || tw.shape()[0] != din {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let dout = tw.shape()[1];
        let mut out = Tensor::zeros(&[n, dout]);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != dout {
                return Err(shape_err("linear bias", tw.shape(), tb.shape()));
            }
            for r in 0..n {
                out.row_mut(r).copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            din,
            dout,
            1.0,
            MatRef::new(tx.data(), din, 1),
            MatRef::new(tw.data(), dout, 1),
            beta,
            out.data_mut(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma` and `beta`. A zero-variance row maps to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = as_matrix(tx);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                o[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Log-softmax along `axis`, stabilized by subtracting the slice max.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "log_softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = tx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|j| (d[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..len {
                    d[at(j)] -= lse;
                }
            }
        }
        Ok(self.push(
            out,
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// 1-D convolution over rows. `x` is `[n, c_in]`, `w` is
    /// `[kernel * c_in, c_out]` ordered by (tap, input channel), `b` is
    /// `[c_out]`. Output length is `(n + 2*pad - kernel) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let (n, cin) = as_matrix(tx);
        if tw.shape().len() != 2 || tw.shape()[0] != kernel * cin || stride == 0 {
            return Err(shape_err("conv1d", tx.shape(), tw.shape()));
        }
        if n + 2 * pad < kernel {
            return Err(Error::Shape(format!(
                "conv1d: input length {n} too short for kernel {kernel}"
            )));
        }
        let cout = tw.shape()[1];
        let nout = (n + 2 * pad - kernel) / stride + 1;
        let width = kernel * cin;
        let mut cols = vec![0.0; nout * width];
        for o in 0..nout {
            for tap in 0..kernel {
                let src = (o * stride + tap) as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    let dst = o * width + tap * cin;
                    cols[dst..dst + cin].copy_from_slice(tx.row(src as usize));
                }
            }
        }
        let mut out = Tensor::zeros(&[nout, cout]);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != cout {
                return Err(shape_err("conv1d bias", tw.shape(), tb.shape()));
            }
            for r in 0..nout {
                out.row_mut(r).copy_from_slice(tb.data());
            }
        }
        gemm(
            nout,
            width,
            cout,
            1.0,
            MatRef::new(&cols, width, 1),
            MatRef::new(tw.data(), cout, 1),
            if b.is_some() { 1.0 } else { 0.0 },
            out.data_mut(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let cols = if self.track { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            &inputs,
        ))
    }

    /// Per-channel convolution with "same" padding. `x` is `[n, c]`, `w` is
    /// `[kernel, c]` with odd `kernel`, `b` is `[c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, c) = as_matrix(tx);
        if tw.shape().len() != 2 || tw.shape()[1] != c || tw.shape()[0] % 2 == 0 || tb.len() != c
        {
            return Err(shape_err("depthwise_conv1d", tx.shape(), tw.shape()));
        }
        let kernel = tw.shape()[0];
        let pad = kernel / 2;
        let mut out = Tensor::zeros(&[n, c]);
        for t in 0..n {
            let o = out.row_mut(t);
            o.copy_from_slice(tb.data());
            for tap in 0..kernel {
                let src = t as isize + tap as isize - pad as isize;
                if src < 0 || src as usize >= n {
                    continue;
                }
                let xr = tx.row(src as usize);
                let wr = tw.row(tap);
                for j in 0..c {
                    o[j] += xr[j] * wr[j];
                }
            }
        }
        Ok(self.push(out, Op::DepthwiseConv1d { x, w, b }, &[x, w, b]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = as_matrix(tt);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!(
                "embedding: id {bad} out of range for table of {v} rows"
            )));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tt.row(i));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `[tq, d]`, `k` and `v`
    /// are `[tk, d]`; head `h` uses columns `h*d/heads .. (h+1)*d/heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = as_matrix(tq);
        let (nk, dk) = as_matrix(tk);
        if dk != d || tv.shape() != tk.shape() || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        if let AttnMask::Additive(m) = mask {
            if m.shape() != [nq, nk] {
                return Err(shape_err("attention mask", m.shape(), &[nq, nk]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = Tensor::zeros(&[nq, d]);
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                scale,
                MatRef::at(tq.data(), h * dh, d, 1),
                MatRef::at(tk.data(), h * dh, d, 1).t(),
                0.0,
                p,
            );
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                match mask {
                    AttnMask::None => {}
                    AttnMask::Causal => row.iter_mut().skip(i + 1).for_each(|x| {
                        *x = f64::NEG_INFINITY;
                    }),
                    AttnMask::Additive(m) => {
                        for (x, a) in row.iter_mut().zip(m.row(i)) {
                            *x += a;
                        }
                    }
                }
                softmax_in_place(row);
            }
            gemm_strided(
                nq,
                nk,
                dh,
                1.0,
                MatRef::new(p, nk, 1),
                MatRef::at(tv.data(), h * dh, d, 1),
                0.0,
                out.data_mut(),
                h * dh,
                d,
                1,
            );
        }
        let probs = if self.track { probs } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = as_matrix(tx);
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather_rows: row {bad} out of range for {n} rows"
            )));
        }
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tx.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Copy of `base` whose row `positions[j]` is replaced by row `j` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (n, c) = as_matrix(tb);
        if ts.cols() != c || ts.rows() != positions.len() || positions.iter().any(|&p| p >= n) {
            return Err(shape_err("replace_rows", tb.shape(), ts.shape()));
        }
        let mut out = tb.clone();
        for (j, &p) in positions.iter().enumerate() {
            out.row_mut(p).copy_from_slice(ts.row(j));
        }
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                src,
                positions: positions.to_vec(),
            },
            &[base, src],
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = as_matrix(tx);
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols: {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let mut out = Tensor::zeros(&[n, w]);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Inverted dropout. Identity when `p == 0` or the graph is not tracking.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 || !self.track {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse pass seeded with `seed = d(objective)/d(output)`.
    pub fn backward(self, output: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err(
                "backward seed",
                seed.shape(),
                self.value(output).shape(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut param_grads: Vec<(ParamId, Tensor)> = Vec::new();
        let mut param_slot: std::collections::HashMap<ParamId, usize> =
            std::collections::HashMap::new();

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => match param_slot.get(id) {
                    Some(&s) => param_grads[s].1.add_assign(&g),
                    None => {
                        param_slot.insert(*id, param_grads.len());
                        param_grads.push((*id, g));
                    }
                },
                op => self.backward_op(op, &g, &mut grads),
            }
        }
        param_grads.sort_by_key(|(id, _)| *id);
        Ok(Grads {
            nodes: grads,
            params: param_grads,
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates into the gradient slot for `v`, allocating zeros first.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let shape = self.value(v).shape().to_vec();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn backward_op(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let ga = self.slot(grads, *a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::new(g.data(), n, 1),
                        MatRef::new(tb.data(), n, 1).t(),
                        1.0,
                        ga.data_mut(),
                    );
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::new(ta.data(), k, 1).t(),
                        MatRef::new(g.data(), n, 1),
                        1.0,
                        gb.data_mut(),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = as_matrix(tx);
                let dout = tw.shape()[1];
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        MatRef::new(g.data(), dout, 1),
                        MatRef::new(tw.data(), dout, 1).t(),
                        1.0,
                        gx.data_mut(),
                    );
                }
                if self.needs(*w) {
                    let gw = self.slot(grads, *w);
                    gemm(
                        din,
                        n,
                        dout,
                        1.0,
                        MatRef::new(tx.data(), din, 1).t(),
                        MatRef::new(g.data(), dout, 1),
                        1.0,
                        gw.data_mut(),
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = self.slot(grads, *b);
                        let gbd = gb.data_mut();
                        for r in 0..n {
                            for (acc, x) in gbd.iter_mut().zip(g.row(r)) {
                                *acc += x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.needs(*row) {
                    let gr = self.slot(grads, *row);
                    let d = gr.data_mut();
                    for r in 0..g.rows() {
                        for (acc, x) in d.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(g.shape(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gx, &x)| {
                        let u = GELU_A * (x + GELU_B * x * x * x);
                        let t = u.tanh();
                        let du = GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                        gx * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Sigmoid(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gx, &x)| {
                        let s = sigmoid(x);
                        gx * s * (1.0 - s)
                    })
                    .collect();
                self.accum(grads, *a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = as_matrix(g);
                let tg = self.value(*gamma);
                if self.needs(*gamma) {
                    let gg = self.slot(grads, *gamma).data_mut();
                    for r in 0..n {
                        for j in 0..c {
                            gg[j] += g.row(r)[j] * xhat[r * c + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = self.slot(grads, *beta).data_mut();
                    for r in 0..n {
                        for j in 0..c {
                            gb[j] += g.row(r)[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let gr = g.row(r);
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * tg.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let o = gx.row_mut(r);
                        for j in 0..c {
                            o[j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => {
                // dx = dy - softmax(x) * sum(dy), softmax recomputed from x.
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(g.shape());
                let xd = tx.data();
                let gd = g.data();
                let od = gx.data_mut();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let m = (0..*len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + (0..*len).map(|j| (xd[at(j)] - m).exp()).sum::<f64>().ln();
                        let gsum: f64 = (0..*len).map(|j| gd[at(j)]).sum();
                        for j in 0..*len {
                            od[at(j)] = gd[at(j)] - (xd[at(j)] - lse).exp() * gsum;
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let tw = self.value(*w);
                let (n, cin) = as_matrix(self.value(*x));
                let cout = tw.shape()[1];
                let nout = g.rows();
                let width = kernel * cin;
                if self.needs(*w) {
                    let gw = self.slot(grads, *w);
                    gemm(
                        width,
                        nout,
                        cout,
                        1.0,
                        MatRef::new(cols, width, 1).t(),
                        MatRef::new(g.data(), cout, 1),
                        1.0,
                        gw.data_mut(),
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = self.slot(grads, *b).data_mut();
                        for r in 0..nout {
                            for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; nout * width];
                    gemm(
                        nout,
                        cout,
                        width,
                        1.0,
                        MatRef::new(g.data(), cout, 1),
                        MatRef::new(tw.data(), cout, 1).t(),
                        0.0,
                        &mut dcols,
                    );
                    let gx = self.slot(grads, *x);
                    for o in 0..nout {
                        for tap in 0..*kernel {
                            let src = (o * stride + tap) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < n {
                                let row = gx.row_mut(src as usize);
                                let base = o * width + tap * cin;
                                for j in 0..cin {
                                    row[j] += dcols[base + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, c) = as_matrix(tx);
                let kernel = tw.shape()[0];
                let pad = kernel / 2;
                if self.needs(*b) {
                    let gb = self.slot(grads, *b).data_mut();
                    for t in 0..n {
                        for j in 0..c {
                            gb[j] += g.row(t)[j];
                        }
                    }
                }
                let mut gw = Tensor::zeros(tw.shape());
                let mut gx = Tensor::zeros(tx.shape());
                for t in 0..n {
                    let gr = g.row(t);
                    for tap in 0..kernel {
                        let src = t as isize + tap as isize - pad as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let s = src as usize;
                        for j in 0..c {
                            gw.data_mut()[tap * c + j] += gr[j] * tx.row(s)[j];
                            gx.data_mut()[s * c + j] += gr[j] * tw.row(tap)[j];
                        }
                    }
                }
                self.accum(grads, *w, gw);
                self.accum(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let gt = self.slot(grads, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += v;
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
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = as_matrix(tq);
                let nk = tk.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(tq.shape());
                let mut gk = Tensor::zeros(tk.shape());
                let mut gv = Tensor::zeros(tv.shape());
                let mut dp = vec![0.0; nq * nk];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let go = MatRef::at(g.data(), h * dh, d, 1);
                    // dV_h = P^T dO_h
                    gemm_strided(
                        nk,
                        nq,
                        dh,
                        1.0,
                        MatRef::new(p, nk, 1).t(),
                        go,
                        1.0,
                        gv.data_mut(),
                        h * dh,
                        d,
                        1,
                    );
                    // dP = dO_h V_h^T
                    gemm(
                        nq,
                        dh,
                        nk,
                        1.0,
                        go,
                        MatRef::at(tv.data(), h * dh, d, 1).t(),
                        0.0,
                        &mut dp,
                    );
                    for i in 0..nq {
                        let pr = &p[i * nk..(i + 1) * nk];
                        let dr = &mut dp[i * nk..(i + 1) * nk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dv, pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h ; dK_h = dS^T Q_h
                    gemm_strided(
                        nq,
                        nk,
                        dh,
                        1.0,
                        MatRef::new(&dp, nk, 1),
                        MatRef::at(tk.data(), h * dh, d, 1),
                        1.0,
                        gq.data_mut(),
                        h * dh,
                        d,
                        1,
                    );
                    gemm_strided(
                        nk,
                        nq,
                        dh,
                        1.0,
                        MatRef::new(&dp, nk, 1).t(),
                        MatRef::at(tq.data(), h * dh, d, 1),
                        1.0,
                        gk.data_mut(),
                        h * dh,
                        d,
                        1,
                    );
                }
                self.accum(grads, *q, gq);
                self.accum(grads, *k, gk);
                self.accum(grads, *v, gv);
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::ReplaceRows {
                base,
                src,
                positions,
            } => {
                if self.needs(*src) {
                    let c = g.cols();
                    let mut gs = Tensor::zeros(&[positions.len(), c]);
                    for (j, &p) in positions.iter().enumerate() {
                        gs.row_mut(j).copy_from_slice(g.row(p));
                    }
                    self.accum(grads, *src, gs);
                }
                if self.needs(*base) {
                    let mut gb = g.clone();
                    for &p in positions {
                        gb.row_mut(p).fill(0.0);
                    }
                    self.accum(grads, *base, gb);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (acc, v) in gx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accum(grads, *x, Tensor::new(g.shape(), d).unwrap());
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
