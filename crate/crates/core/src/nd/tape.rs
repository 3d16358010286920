//! Arena-based Wengert tape: ops are recorded during the forward pass and
//! replayed in reverse for gradients.

use super::{NdError, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

struct Buf {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op {
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul { a: Node, b: Node, out: Node },
    /// elementwise, same shape
    Add { a: Node, b: Node, out: Node },
    /// x: [t,c] + row: [c] broadcast over rows
    AddRow { x: Node, row: Node, out: Node },
    Mul { a: Node, b: Node, out: Node },
    Scale { x: Node, c: f32, out: Node },
    Exp { x: Node, out: Node },
    /// gradient passes only where lo <= x <= hi
    Clamp { x: Node, lo: f32, hi: f32, out: Node },
    /// x: [t,c_in], w: [k,c_in,c_out]; tap i reads position t - i*dilation
    ConvCausal { x: Node, w: Node, dilation: usize, out: Node },
    Embed { table: Node, ids: Vec<u32>, out: Node },
    /// per-row normalization over the last dim, saved (mean, rstd) per row
    LayerNorm { x: Node, gain: Node, bias: Node, out: Node, stats: Vec<(f32, f32)> },
    Gelu { x: Node, out: Node },
    Softmax { x: Node, out: Node },
    /// fused multi-head causal self-attention; saves per-head probs [heads][t*t]
    CausalAttention { q: Node, k: Node, v: Node, heads: usize, out: Node, probs: Vec<Vec<f32>> },
    /// contiguous row range of a 2-d tensor
    SliceRows { x: Node, start: usize, len: usize, out: Node },
    /// scalar mean nats/token over all rows
    CrossEntropySmoothed { logits: Node, targets: Vec<u32>, smoothing: f32, out: Node },
    SumSquares { x: Node, out: Node },
    /// out = min(x, c) on a scalar; gradient passes only while x < c
    MinConst { x: Node, c: f32, out: Node },
    /// scalar node with per-input gradients fixed at forward time; used to
    /// bridge external (f64) math such as the GP prior KL into the graph
    ScalarBridge { inputs: Vec<Node>, input_grads: Vec<Vec<f32>>, out: Node },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Clamp { .. } => "clamp",
            Op::ConvCausal { .. } => "conv1d_causal",
            Op::Embed { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::CausalAttention { .. } => "causal_attention",
            Op::SliceRows { .. } => "slice_rows",
            Op::CrossEntropySmoothed { .. } => "cross_entropy_smoothed",
            Op::SumSquares { .. } => "sum_squares",
            Op::MinConst { .. } => "min_const",
            Op::ScalarBridge { .. } => "scalar_bridge",
        }
    }
}

/// Reverse-mode tape. Single-threaded; values are immutable once written.
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
    nonfinite: Option<String>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;
const LN_EPS: f32 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new(), nonfinite: None }
    }

    fn push_buf(&mut self, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool) -> Node {
        self.bufs.push(Buf { data, shape, needs_grad });
        self.grads.push(None);
        Node(self.bufs.len() - 1)
    }

    /// Register a constant input (no gradient flows to it).
    pub fn constant(&mut self, t: &Tensor) -> Node {
        self.push_buf(t.data.clone(), t.shape.clone(), false)
    }

    /// Register a leaf that receives a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Node {
        self.push_buf(t.data.clone(), t.shape.clone(), true)
    }

    pub fn value(&self, n: Node) -> &[f32] {
        &self.bufs[n.0].data
    }

    pub fn shape(&self, n: Node) -> &[usize] {
        &self.bufs[n.0].shape
    }

    pub fn scalar_value(&self, n: Node) -> f32 {
        assert_eq!(self.bufs[n.0].data.len(), 1, "node is not a scalar");
        self.bufs[n.0].data[0]
    }

    /// First op that produced a non-finite output, if any.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    fn record(&mut self, data: Vec<f32>, shape: Vec<usize>, mk: impl FnOnce(Node) -> Op) -> Node {
        let out = self.push_buf(data, shape, false);
        let op = mk(out);
        let inputs = op_inputs(&op);
        let needs_grad = inputs.iter().any(|n| self.bufs[n.0].needs_grad);
        self.bufs[out.0].needs_grad = needs_grad;
        if self.nonfinite.is_none() && !self.bufs[out.0].data.iter().all(|v| v.is_finite()) {
            self.nonfinite = Some(op.name().to_string());
        }
        self.ops.push(op);
        out
    }

    fn dims2(&self, n: Node, what: &str) -> (usize, usize) {
        let s = self.shape(n);
        assert_eq!(s.len(), 2, "{what} must be 2-d, got shape {s:?}");
        (s[0], s[1])
    }

    // ── op builders ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Node, b: Node) -> Node {
        let (m, ka) = self.dims2(a, "matmul lhs");
        let (kb, n) = self.dims2(b, "matmul rhs");
        assert_eq!(ka, kb, "matmul inner dims differ: {ka} vs {kb}");
        let out = matmul_f64acc(self.value(a), self.value(b), m, ka, n);
        self.record(out, vec![m, n], |o| Op::Matmul { a, b, out: o })
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.record(out, shape, |o| Op::Add { a, b, out: o })
    }

    pub fn add_row(&mut self, x: Node, row: Node) -> Node {
        let (t, c) = self.dims2(x, "add_row input");
        assert_eq!(self.shape(row), &[c], "add_row bias must be [{c}]");
        let mut out = self.value(x).to_vec();
        let r = self.value(row).to_vec();
        for ti in 0..t {
            for ci in 0..c {
                out[ti * c + ci] += r[ci];
            }
        }
        self.record(out, vec![t, c], |o| Op::AddRow { x, row, out: o })
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.record(out, shape, |o| Op::Mul { a, b, out: o })
    }

    pub fn scale(&mut self, x: Node, c: f32) -> Node {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(out, shape, |o| Op::Scale { x, c, out: o })
    }

    pub fn exp(&mut self, x: Node) -> Node {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.record(out, shape, |o| Op::Exp { x, out: o })
    }

    pub fn clamp(&mut self, x: Node, lo: f32, hi: f32) -> Node {
        assert!(lo <= hi, "clamp bounds inverted");
        let out: Vec<f32> = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        self.record(out, shape, |o| Op::Clamp { x, lo, hi, out: o })
    }

    /// Causal dilated 1-d convolution with implicit left zero-padding, so the
    /// output has the same length as the input. Tap `i` of the kernel reads
    /// position `t - i*dilation`; positions before the sequence are zero.
    pub fn conv1d_causal(&mut self, x: Node, w: Node, dilation: usize) -> Node {
        assert!(dilation >= 1, "dilation must be >= 1");
        let (t, c_in) = self.dims2(x, "conv input");
        let ws = self.shape(w);
        assert_eq!(ws.len(), 3, "conv weights must be [k, c_in, c_out], got {ws:?}");
        let (k, wc_in, c_out) = (ws[0], ws[1], ws[2]);
        assert_eq!(wc_in, c_in, "conv channel mismatch: input {c_in}, weights {wc_in}");
        let out = conv_forward(self.value(x), self.value(w), t, c_in, k, c_out, dilation);
        self.record(out, vec![t, c_out], |o| Op::ConvCausal { x, w, dilation, out: o })
    }

    pub fn embedding(&mut self, table: Node, ids: &[u32]) -> Node {
        let (v, c) = self.dims2(table, "embedding table");
        let tab = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "token id {id} out of range for vocab {v}");
            out.extend_from_slice(&tab[id * c..(id + 1) * c]);
        }
        let ids = ids.to_vec();
        self.record(out, vec![ids.len(), c], |o| Op::Embed { table, ids, out: o })
    }

    pub fn layer_norm(&mut self, x: Node, gain: Node, bias: Node) -> Node {
        let (t, c) = self.dims2(x, "layer_norm input");
        assert_eq!(self.shape(gain), &[c], "layer_norm gain must be [{c}]");
        assert_eq!(self.shape(bias), &[c], "layer_norm bias must be [{c}]");
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0f32; t * c];
        let mut stats = Vec::with_capacity(t);
        for ti in 0..t {
            let row = &xv[ti * c..(ti + 1) * c];
            let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32;
            let var = (row.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>()
                / c as f64) as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for ci in 0..c {
                out[ti * c + ci] = (row[ci] - mean) * rstd * g[ci] + b[ci];
            }
            stats.push((mean, rstd));
        }
        self.record(out, vec![t, c], |o| Op::LayerNorm { x, gain, bias, out: o, stats })
    }

    pub fn gelu(&mut self, x: Node) -> Node {
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(out, shape, |o| Op::Gelu { x, out: o })
    }

    pub fn softmax(&mut self, x: Node) -> Node {
        let (t, c) = self.dims2(x, "softmax input");
        let xv = self.value(x);
        let mut out = vec![0.0f32; t * c];
        for ti in 0..t {
            softmax_row(&xv[ti * c..(ti + 1) * c], &mut out[ti * c..(ti + 1) * c]);
        }
        self.record(out, vec![t, c], |o| Op::Softmax { x, out: o })
    }

    /// Multi-head causal self-attention over already-projected q/k/v, each
    /// [t, d]. Position i attends to positions <= i.
    pub fn causal_attention(&mut self, q: Node, k: Node, v: Node, heads: usize) -> Node {
        let (t, d) = self.dims2(q, "attention q");
        assert_eq!(self.shape(k), &[t, d], "attention k shape mismatch");
        assert_eq!(self.shape(v), &[t, d], "attention v shape mismatch");
        assert!(heads >= 1 && d % heads == 0, "d_model {d} not divisible by heads {heads}");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0f32; t * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0f32; t * t];
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut row = vec![f32::NEG_INFINITY; t];
                for j in 0..=i {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let dot: f64 =
                        qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                    row[j] = dot as f32 * scale;
                }
                softmax_row(&row[..=i], &mut p[i * t..i * t + i + 1]);
                for j in 0..=i {
                    let pij = p[i * t + j] as f64;
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for e in 0..dh {
                        out[i * d + off + e] += (pij * vj[e] as f64) as f32;
                    }
                }
            }
            probs.push(p);
        }
        self.record(out, vec![t, d], |o| Op::CausalAttention { q, k, v, heads, out: o, probs })
    }

    /// Rows `start..start+len` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Node, start: usize, len: usize) -> Node {
        let (t, c) = self.dims2(x, "slice_rows input");
        assert!(start + len <= t, "slice {start}..{} out of range for {t} rows", start + len);
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.record(out, vec![len, c], |o| Op::SliceRows { x, start, len, out: o })
    }

    /// Mean label-smoothed cross-entropy in nats/token. With smoothing `s`,
    /// the target distribution is `(1-s)*onehot + s/V`.
    pub fn cross_entropy_smoothed(&mut self, logits: Node, targets: &[u32], smoothing: f32) -> Node {
        let (t, v) = self.dims2(logits, "cross_entropy logits");
        assert_eq!(targets.len(), t, "targets length {} != rows {t}", targets.len());
        assert!((0.0..1.0).contains(&smoothing), "smoothing must be in [0,1)");
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for (ti, &tgt) in targets.iter().enumerate() {
            let tgt = tgt as usize;
            assert!(tgt < v, "target {tgt} out of range for vocab {v}");
            let row = &lv[ti * v..(ti + 1) * v];
            let (lse, _) = log_sum_exp(row);
            let mean_logit = row.iter().map(|&x| x as f64).sum::<f64>() / v as f64;
            let q_dot_logit = (1.0 - smoothing) as f64 * row[tgt] as f64
                + smoothing as f64 * mean_logit;
            total += lse - q_dot_logit;
        }
        let loss = vec![(total / t as f64) as f32];
        let targets = targets.to_vec();
        self.record(loss, vec![1], |o| Op::CrossEntropySmoothed {
            logits,
            targets,
            smoothing,
            out: o,
        })
    }

    pub fn sum_squares(&mut self, x: Node) -> Node {
        let s: f64 = self.value(x).iter().map(|&v| (v as f64) * (v as f64)).sum();
        self.record(vec![s as f32], vec![1], |o| Op::SumSquares { x, out: o })
    }

    pub fn min_const(&mut self, x: Node, c: f32) -> Node {
        assert_eq!(self.bufs[x.0].data.len(), 1, "min_const expects a scalar");
        let out = vec![self.scalar_value(x).min(c)];
        self.record(out, vec![1], |o| Op::MinConst { x, c, out: o })
    }

    /// Scalar output whose gradients w.r.t. each input were computed by the
    /// caller at forward time (the output is linear in upstream gradient).
    pub fn scalar_bridge(&mut self, inputs: &[Node], value: f32, input_grads: Vec<Vec<f32>>) -> Node {
        assert_eq!(inputs.len(), input_grads.len(), "one gradient per input required");
        for (n, g) in inputs.iter().zip(&input_grads) {
            assert_eq!(self.bufs[n.0].data.len(), g.len(), "bridge gradient shape mismatch");
        }
        let inputs = inputs.to_vec();
        self.record(vec![value], vec![1], |o| Op::ScalarBridge {
            inputs,
            input_grads,
            out: o,
        })
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Seed d(loss)/d(loss) = 1 and sweep the tape in reverse. `loss` must be
    /// a scalar node.
    pub fn backward(&mut self, loss: Node) -> Result<(), NdError> {
        if self.bufs[loss.0].data.len() != 1 {
            return Err(NdError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.bufs[loss.0].shape
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    /// Gradient of the last backward() loss w.r.t. a node, if any flowed.
    pub fn grad(&self, n: Node) -> Option<&[f32]> {
        self.grads[n.0].as_deref()
    }

    /// Gradient or zeros for a leaf that the loss never touched.
    pub fn grad_or_zeros(&self, n: Node) -> Vec<f32> {
        match &self.grads[n.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.bufs[n.0].data.len()],
        }
    }

    fn accum(&mut self, n: Node, g: &[f32]) {
        if !self.bufs[n.0].needs_grad {
            return;
        }
        match &mut self.grads[n.0] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => self.grads[n.0] = Some(g.to_vec()),
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops never alias their output with an input, so taking the op out by
        // index and cloning the upstream gradient keeps the borrows simple.
        let op = &self.ops[idx];
        let out = match op {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::AddRow { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Exp { out, .. }
            | Op::Clamp { out, .. }
            | Op::ConvCausal { out, .. }
            | Op::Embed { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::Softmax { out, .. }
            | Op::CausalAttention { out, .. }
            | Op::SliceRows { out, .. }
            | Op::CrossEntropySmoothed { out, .. }
            | Op::SumSquares { out, .. }
            | Op::MinConst { out, .. }
            | Op::ScalarBridge { out, .. } => *out,
        };
        let Some(gout) = self.grads[out.0].clone() else { return };
        match &self.ops[idx] {
            &Op::Matmul { a, b, out: _ } => {
                let (m, k) = (self.bufs[a.0].shape[0], self.bufs[a.0].shape[1]);
                let n = self.bufs[b.0].shape[1];
                if self.bufs[a.0].needs_grad {
                    // dA = dOut @ B^T
                    let bv = &self.bufs[b.0].data;
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0f64;
                            for l in 0..n {
                                acc += gout[i * n + l] as f64 * bv[j * n + l] as f64;
                            }
                            da[i * k + j] = acc as f32;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.bufs[b.0].needs_grad {
                    // dB = A^T @ dOut
                    let av = &self.bufs[a.0].data;
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for l in 0..m {
                                acc += av[l * k + i] as f64 * gout[l * n + j] as f64;
                            }
                            db[i * n + j] = acc as f32;
                        }
                    }
                    self.accum(b, &db);
                }
            }
            &Op::Add { a, b, out: _ } => {
                self.accum(a, &gout);
                self.accum(b, &gout);
            }
            &Op::AddRow { x, row, out: _ } => {
                self.accum(x, &gout);
                if self.bufs[row.0].needs_grad {
                    let c = self.bufs[row.0].data.len();
                    let t = gout.len() / c;
                    let mut dr = vec![0.0f32; c];
                    for ti in 0..t {
                        for ci in 0..c {
                            dr[ci] += gout[ti * c + ci];
                        }
                    }
                    self.accum(row, &dr);
                }
            }
            &Op::Mul { a, b, out: _ } => {
                if self.bufs[a.0].needs_grad {
                    let da: Vec<f32> =
                        gout.iter().zip(&self.bufs[b.0].data).map(|(&g, &y)| g * y).collect();
                    self.accum(a, &da);
                }
                if self.bufs[b.0].needs_grad {
                    let db: Vec<f32> =
                        gout.iter().zip(&self.bufs[a.0].data).map(|(&g, &x)| g * x).collect();
                    self.accum(b, &db);
                }
            }
            &Op::Scale { x, c, out: _ } => {
                let dx: Vec<f32> = gout.iter().map(|&g| g * c).collect();
                self.accum(x, &dx);
            }
            &Op::Exp { x, out } => {
                let dx: Vec<f32> =
                    gout.iter().zip(&self.bufs[out.0].data).map(|(&g, &y)| g * y).collect();
                self.accum(x, &dx);
            }
            &Op::Clamp { x, lo, hi, out: _ } => {
                let dx: Vec<f32> = gout
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(&g, &v)| if v >= lo && v <= hi { g } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::ConvCausal { x, w, dilation, out: _ } => {
                let (x, w, dilation) = (*x, *w, *dilation);
                let (t, c_in) = (self.bufs[x.0].shape[0], self.bufs[x.0].shape[1]);
                let (k, c_out) = (self.bufs[w.0].shape[0], self.bufs[w.0].shape[2]);
                if self.bufs[x.0].needs_grad {
                    let wv = &self.bufs[w.0].data;
                    let mut dx = vec![0.0f64; t * c_in];
                    for ti in 0..t {
                        for i in 0..k {
                            let Some(src) = ti.checked_sub(i * dilation) else { break };
                            for co in 0..c_out {
                                let g = gout[ti * c_out + co] as f64;
                                for ci in 0..c_in {
                                    dx[src * c_in + ci] +=
                                        g * wv[(i * c_in + ci) * c_out + co] as f64;
                                }
                            }
                        }
                    }
                    let dx: Vec<f32> = dx.iter().map(|&v| v as f32).collect();
                    self.accum(x, &dx);
                }
                if self.bufs[w.0].needs_grad {
                    let xv = &self.bufs[x.0].data;
                    let mut dw = vec![0.0f64; k * c_in * c_out];
                    for ti in 0..t {
                        for i in 0..k {
                            let Some(src) = ti.checked_sub(i * dilation) else { break };
                            for ci in 0..c_in {
                                let xval = xv[src * c_in + ci] as f64;
                                for co in 0..c_out {
                                    dw[(i * c_in + ci) * c_out + co] +=
                                        xval * gout[ti * c_out + co] as f64;
                                }
                            }
                        }
                    }
                    let dw: Vec<f32> = dw.iter().map(|&v| v as f32).collect();
                    self.accum(w, &dw);
                }
            }
            Op::Embed { table, ids, out: _ } => {
                let table = *table;
                if self.bufs[table.0].needs_grad {
                    let c = self.bufs[table.0].shape[1];
                    let mut dt = vec![0.0f32; self.bufs[table.0].data.len()];
                    for (ti, &id) in ids.clone().iter().enumerate() {
                        let id = id as usize;
                        for ci in 0..c {
                            dt[id * c + ci] += gout[ti * c + ci];
                        }
                    }
                    self.accum(table, &dt);
                }
            }
            Op::LayerNorm { x, gain, bias, out: _, stats } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let stats = stats.clone();
                let (t, c) = (self.bufs[x.0].shape[0], self.bufs[x.0].shape[1]);
                let xv = self.bufs[x.0].data.clone();
                let gv = self.bufs[gain.0].data.clone();
                if self.bufs[gain.0].needs_grad || self.bufs[bias.0].needs_grad {
                    let mut dg = vec![0.0f32; c];
                    let mut db = vec![0.0f32; c];
                    for ti in 0..t {
                        let (mean, rstd) = stats[ti];
                        for ci in 0..c {
                            let xhat = (xv[ti * c + ci] - mean) * rstd;
                            dg[ci] += gout[ti * c + ci] * xhat;
                            db[ci] += gout[ti * c + ci];
                        }
                    }
                    self.accum(gain, &dg);
                    self.accum(bias, &db);
                }
                if self.bufs[x.0].needs_grad {
                    let mut dx = vec![0.0f32; t * c];
                    for ti in 0..t {
                        let (mean, rstd) = stats[ti];
                        // dxhat_i = g_i * gout_i; dx = rstd*(dxhat - mean(dxhat)
                        //   - xhat * mean(dxhat * xhat))
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for ci in 0..c {
                            let xhat = ((xv[ti * c + ci] - mean) * rstd) as f64;
                            let dxhat = (gv[ci] * gout[ti * c + ci]) as f64;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / c as f64;
                        let m2 = sum_dxhat_xhat / c as f64;
                        for ci in 0..c {
                            let xhat = ((xv[ti * c + ci] - mean) * rstd) as f64;
                            let dxhat = (gv[ci] * gout[ti * c + ci]) as f64;
                            dx[ti * c + ci] = (rstd as f64 * (dxhat - m1 - xhat * m2)) as f32;
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::Gelu { x, out: _ } => {
                let dx: Vec<f32> = gout
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(&g, &v)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let sech2 = 1.0 - th * th;
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + th) + 0.5 * v * sech2 * du)
                    })
                    .collect();
                self.accum(x, &dx);
            }
            &Op::Softmax { x, out } => {
                let (t, c) = (self.bufs[out.0].shape[0], self.bufs[out.0].shape[1]);
                let ov = &self.bufs[out.0].data;
                let mut dx = vec![0.0f32; t * c];
                for ti in 0..t {
                    let row = &ov[ti * c..(ti + 1) * c];
                    let dot: f64 = gout[ti * c..(ti + 1) * c]
                        .iter()
                        .zip(row)
                        .map(|(&g, &p)| g as f64 * p as f64)
                        .sum();
                    for ci in 0..c {
                        dx[ti * c + ci] =
                            (row[ci] as f64 * (gout[ti * c + ci] as f64 - dot)) as f32;
                    }
                }
                self.accum(x, &dx);
            }
            Op::CausalAttention { q, k, v, heads, out: _, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (t, d) = (self.bufs[q.0].shape[0], self.bufs[q.0].shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let probs = probs.clone();
                let qv = self.bufs[q.0].data.clone();
                let kv = self.bufs[k.0].data.clone();
                let vv = self.bufs[v.0].data.clone();
                let mut dq = vec![0.0f32; t * d];
                let mut dk = vec![0.0f32; t * d];
                let mut dv = vec![0.0f32; t * d];
                for h in 0..heads {
                    let off = h * dh;
                    let p = &probs[h];
                    for i in 0..t {
                        // dProbs_ij = gout_i . v_j ; dV_j += p_ij * gout_i
                        let gi = &gout[i * d + off..i * d + off + dh];
                        let mut dprobs = vec![0.0f64; i + 1];
                        for j in 0..=i {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            let mut dotgv = 0.0f64;
                            for e in 0..dh {
                                dotgv += gi[e] as f64 * vj[e] as f64;
                                dv[j * d + off + e] += p[i * t + j] * gi[e];
                            }
                            dprobs[j] = dotgv;
                        }
                        // softmax vjp within the masked row
                        let mut dot = 0.0f64;
                        for j in 0..=i {
                            dot += dprobs[j] * p[i * t + j] as f64;
                        }
                        for j in 0..=i {
                            let dscore = p[i * t + j] as f64 * (dprobs[j] - dot);
                            let ds = (dscore * scale as f64) as f32;
                            let kj = &kv[j * d + off..j * d + off + dh];
                            let qi = &qv[i * d + off..i * d + off + dh];
                            for e in 0..dh {
                                dq[i * d + off + e] += ds * kj[e];
                                dk[j * d + off + e] += ds * qi[e];
                            }
                        }
                    }
                }
                self.accum(q, &dq);
                self.accum(k, &dk);
                self.accum(v, &dv);
            }
            &Op::SliceRows { x, start, len, out: _ } => {
                let c = self.bufs[x.0].shape[1];
                let mut dx = vec![0.0f32; self.bufs[x.0].data.len()];
                dx[start * c..(start + len) * c].copy_from_slice(&gout);
                self.accum(x, &dx);
            }
            Op::CrossEntropySmoothed { logits, targets, smoothing, out: _ } => {
                let (logits, smoothing) = (*logits, *smoothing);
                let targets = targets.clone();
                let (t, v) = (self.bufs[logits.0].shape[0], self.bufs[logits.0].shape[1]);
                if self.bufs[logits.0].needs_grad {
                    let lv = &self.bufs[logits.0].data;
                    let g = gout[0] / t as f32;
                    let mut dl = vec![0.0f32; t * v];
                    for (ti, &tgt) in targets.iter().enumerate() {
                        let row = &lv[ti * v..(ti + 1) * v];
                        let mut p = vec![0.0f32; v];
                        softmax_row(row, &mut p);
                        for vi in 0..v {
                            let q = if vi == tgt as usize { 1.0 - smoothing } else { 0.0 }
                                + smoothing / v as f32;
                            dl[ti * v + vi] = g * (p[vi] - q);
                        }
                    }
                    self.accum(logits, &dl);
                }
            }
            &Op::SumSquares { x, out: _ } => {
                let g = gout[0];
                let dx: Vec<f32> = self.bufs[x.0].data.iter().map(|&v| 2.0 * g * v).collect();
                self.accum(x, &dx);
            }
            &Op::MinConst { x, c, out: _ } => {
                let pass = self.bufs[x.0].data[0] < c;
                let dx = vec![if pass { gout[0] } else { 0.0 }];
                self.accum(x, &dx);
            }
            Op::ScalarBridge { inputs, input_grads, out: _ } => {
                let g = gout[0];
                let pairs: Vec<(Node, Vec<f32>)> = inputs
                    .iter()
                    .zip(input_grads)
                    .map(|(&n, ig)| (n, ig.iter().map(|&x| x * g).collect()))
                    .collect();
                for (n, dg) in pairs {
                    self.accum(n, &dg);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Re-execute the recorded graph in `f64`, overriding selected leaf
    /// values, and return the value of `target`. Used by the
    /// finite-difference oracle so difference quotients are not drowned in
    /// `f32` rounding; the recorded op structure is reused but none of the
    /// `f32` arithmetic is.
    pub fn eval_f64_with(&self, target: Node, overrides: &[(Node, Vec<f64>)]) -> f64 {
        let mut vals: Vec<Option<Vec<f64>>> = self
            .bufs
            .iter()
            .map(|b| Some(b.data.iter().map(|&v| v as f64).collect()))
            .collect();
        for (n, v) in overrides {
            assert_eq!(vals[n.0].as_ref().unwrap().len(), v.len(), "override length mismatch");
            vals[n.0] = Some(v.clone());
        }
        for op in &self.ops {
            self.replay_op_f64(op, &mut vals);
        }
        let out = vals[target.0].as_ref().unwrap();
        assert_eq!(out.len(), 1, "f64 replay target must be scalar");
        out[0]
    }

    fn replay_op_f64(&self, op: &Op, vals: &mut [Option<Vec<f64>>]) {
        let get = |vals: &[Option<Vec<f64>>], n: Node| vals[n.0].clone().unwrap();
        match op {
            &Op::Matmul { a, b, out } => {
                let (m, k) = (self.bufs[a.0].shape[0], self.bufs[a.0].shape[1]);
                let n = self.bufs[b.0].shape[1];
                let (av, bv) = (get(vals, a), get(vals, b));
                let mut o = vec![0.0f64; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = av[i * k + l];
                        for j in 0..n {
                            o[i * n + j] += x * bv[l * n + j];
                        }
                    }
                }
                vals[out.0] = Some(o);
            }
            &Op::Add { a, b, out } => {
                let (av, bv) = (get(vals, a), get(vals, b));
                vals[out.0] = Some(av.iter().zip(&bv).map(|(x, y)| x + y).collect());
            }
            &Op::AddRow { x, row, out } => {
                let (xv, rv) = (get(vals, x), get(vals, row));
                let c = rv.len();
                vals[out.0] = Some(
                    xv.iter().enumerate().map(|(i, v)| v + rv[i % c]).collect(),
                );
            }
            &Op::Mul { a, b, out } => {
                let (av, bv) = (get(vals, a), get(vals, b));
                vals[out.0] = Some(av.iter().zip(&bv).map(|(x, y)| x * y).collect());
            }
            &Op::Scale { x, c, out } => {
                vals[out.0] = Some(get(vals, x).iter().map(|v| v * c as f64).collect());
            }
            &Op::Exp { x, out } => {
                vals[out.0] = Some(get(vals, x).iter().map(|v| v.exp()).collect());
            }
            &Op::Clamp { x, lo, hi, out } => {
                vals[out.0] = Some(
                    get(vals, x).iter().map(|v| v.clamp(lo as f64, hi as f64)).collect(),
                );
            }
            &Op::ConvCausal { x, w, dilation, out } => {
                let (t, c_in) = (self.bufs[x.0].shape[0], self.bufs[x.0].shape[1]);
                let (k, c_out) = (self.bufs[w.0].shape[0], self.bufs[w.0].shape[2]);
                let (xv, wv) = (get(vals, x), get(vals, w));
                let mut o = vec![0.0f64; t * c_out];
                for ti in 0..t {
                    for i in 0..k {
                        let Some(src) = ti.checked_sub(i * dilation) else { break };
                        for ci in 0..c_in {
                            let xval = xv[src * c_in + ci];
                            for co in 0..c_out {
                                o[ti * c_out + co] += xval * wv[(i * c_in + ci) * c_out + co];
                            }
                        }
                    }
                }
                vals[out.0] = Some(o);
            }
            Op::Embed { table, ids, out } => {
                let c = self.bufs[table.0].shape[1];
                let tv = get(vals, *table);
                let mut o = Vec::with_capacity(ids.len() * c);
                for &id in ids {
                    o.extend_from_slice(&tv[id as usize * c..(id as usize + 1) * c]);
                }
                vals[out.0] = Some(o);
            }
            Op::LayerNorm { x, gain, bias, out, .. } => {
                let (t, c) = (self.bufs[x.0].shape[0], self.bufs[x.0].shape[1]);
                let (xv, gv, bv) = (get(vals, *x), get(vals, *gain), get(vals, *bias));
                let mut o = vec![0.0f64; t * c];
                for ti in 0..t {
                    let row = &xv[ti * c..(ti + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
                    for ci in 0..c {
                        o[ti * c + ci] = (row[ci] - mean) * rstd * gv[ci] + bv[ci];
                    }
                }
                vals[out.0] = Some(o);
            }
            &Op::Gelu { x, out } => {
                vals[out.0] = Some(
                    get(vals, x)
                        .iter()
                        .map(|&v| {
                            0.5 * v
                                * (1.0
                                    + (GELU_C as f64 * (v + GELU_A as f64 * v * v * v)).tanh())
                        })
                        .collect(),
                );
            }
            &Op::Softmax { x, out } => {
                let (t, c) = (self.bufs[x.0].shape[0], self.bufs[x.0].shape[1]);
                let xv = get(vals, x);
                let mut o = vec![0.0f64; t * c];
                for ti in 0..t {
                    softmax_row_f64(&xv[ti * c..(ti + 1) * c], &mut o[ti * c..(ti + 1) * c]);
                }
                vals[out.0] = Some(o);
            }
            &Op::CausalAttention { q, k, v, heads, out, .. } => {
                let (t, d) = (self.bufs[q.0].shape[0], self.bufs[q.0].shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (get(vals, q), get(vals, k), get(vals, v));
                let mut o = vec![0.0f64; t * d];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..t {
                        let qi = &qv[i * d + off..i * d + off + dh];
                        let mut row = vec![0.0f64; i + 1];
                        for (j, r) in row.iter_mut().enumerate() {
                            let kj = &kv[j * d + off..j * d + off + dh];
                            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        }
                        let mut p = vec![0.0f64; i + 1];
                        softmax_row_f64(&row, &mut p);
                        for (j, pj) in p.iter().enumerate() {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            for e in 0..dh {
                                o[i * d + off + e] += pj * vj[e];
                            }
                        }
                    }
                }
                vals[out.0] = Some(o);
            }
            &Op::SliceRows { x, start, len, out } => {
                let c = self.bufs[x.0].shape[1];
                vals[out.0] = Some(get(vals, x)[start * c..(start + len) * c].to_vec());
            }
            Op::CrossEntropySmoothed { logits, targets, smoothing, out } => {
                let v = self.bufs[logits.0].shape[1];
                let lv = get(vals, *logits);
                let s = *smoothing as f64;
                let mut total = 0.0f64;
                for (ti, &tgt) in targets.iter().enumerate() {
                    let row = &lv[ti * v..(ti + 1) * v];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    let mean = row.iter().sum::<f64>() / v as f64;
                    total += lse - ((1.0 - s) * row[tgt as usize] + s * mean);
                }
                vals[out.0] = Some(vec![total / targets.len() as f64]);
            }
            &Op::SumSquares { x, out } => {
                vals[out.0] = Some(vec![get(vals, x).iter().map(|v| v * v).sum()]);
            }
            &Op::MinConst { x, c, out } => {
                vals[out.0] = Some(vec![get(vals, x)[0].min(c as f64)]);
            }
            Op::ScalarBridge { out, .. } => {
                // external-math node: value is fixed at record time; replay
                // keeps it (bridged ops are checked against their own f64
                // reference, not through this interpreter)
                vals[out.0] = Some(vec![self.bufs[out.0].data[0] as f64]);
            }
        }
    }
}

fn softmax_row_f64(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn op_inputs(op: &Op) -> Vec<Node> {
    match op {
        Op::Matmul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
        Op::AddRow { x, row, .. } => vec![*x, *row],
        Op::Scale { x, .. }
        | Op::Exp { x, .. }
        | Op::Clamp { x, .. }
        | Op::Gelu { x, .. }
        | Op::Softmax { x, .. }
        | Op::SumSquares { x, .. }
        | Op::MinConst { x, .. } => vec![*x],
        Op::ConvCausal { x, w, .. } => vec![*x, *w],
        Op::SliceRows { x, .. } => vec![*x],
        Op::Embed { table, .. } => vec![*table],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropySmoothed { logits, .. } => vec![*logits],
        Op::ScalarBridge { inputs, .. } => inputs.clone(),
    }
}

fn matmul_f64acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j] as f64;
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

fn conv_forward(
    x: &[f32],
    w: &[f32],
    t: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    dilation: usize,
) -> Vec<f32> {
    let mut acc = vec![0.0f64; t * c_out];
    for ti in 0..t {
        for i in 0..k {
            let Some(src) = ti.checked_sub(i * dilation) else { break };
            for ci in 0..c_in {
                let xv = x[src * c_in + ci] as f64;
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[(i * c_in + ci) * c_out..(i * c_in + ci + 1) * c_out];
                let orow = &mut acc[ti * c_out..(ti + 1) * c_out];
                for co in 0..c_out {
                    orow[co] += xv * wrow[co] as f64;
                }
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = ((x - max) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
}

/// Stable log-sum-exp of a row; also returns the max.
pub(crate) fn log_sum_exp(row: &[f32]) -> (f64, f64) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    (max + sum.ln(), max)
}
