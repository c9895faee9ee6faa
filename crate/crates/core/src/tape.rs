//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is a per-forward-pass arena. Leaves are copied in from
//! [`Tensor`]s, every primitive appends a node that references earlier
//! nodes by [`VarId`], and [`Tape::backward`] replays the record in
//! reverse, accumulating gradients additively across fan-out. Nodes only
//! ever reference earlier nodes, so reverse index order is reverse
//! topological order.
//!
//! The tape is built fresh for each training step and dropped afterwards;
//! tensors are immutable once recorded and gradients are written in a
//! single backward pass (single-writer contract).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    AddBias { a: VarId, bias: VarId },
    AddScalar { a: VarId, s: VarId },
    Affine { a: VarId, mul: f64 },
    Relu { a: VarId },
    Sigmoid { a: VarId },
    Tanh { a: VarId },
    Log { a: VarId },
    Clamp { a: VarId, lo: f64, hi: f64 },
    ClampMin { a: VarId, lo: f64 },
    SoftmaxRows { a: VarId },
    PmiFromFreq { f: VarId },
    Sum { a: VarId },
    Stack { parts: Vec<VarId> },
    ConcatSlices { parts: Vec<VarId> },
    ConvTime { seq: VarId, kernel: VarId },
    AttendSlices { stack: VarId, weights: VarId },
    CollapseSlices { stack: VarId, weights: VarId },
    TwoHotEmbed { table: VarId, bias: VarId, hot: (usize, usize) },
    Reshape { a: VarId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// out += a·b with optional transposes, all matrices row-major.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m×k] += g[m×n] · b[k×n]ᵀ
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · g[m×n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op, detail: None })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn node(&self, id: VarId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.node(id).data
    }

    pub fn to_tensor(&self, id: VarId) -> Tensor {
        Tensor::new(self.node(id).shape.clone(), self.node(id).data.clone())
            .expect("tape node holds a valid tensor")
    }

    /// Gradient of the most recent backward pass w.r.t. node `id`, if any
    /// reached it.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Record a tensor as a leaf. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Record raw data as a constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_const(&mut self, v: f64) -> VarId {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    // ── primitive ops ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        check_finite("matmul", &out)?;
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, ng))
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: opname,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(op, shape, out, ng))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let id = self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })?;
        check_finite("mul", self.value(id))?;
        Ok(id)
    }

    /// Matrix plus row vector, broadcast down the rows.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let bv = self.value(bias);
        let mut out = Vec::with_capacity(m * n);
        let av = self.value(a);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let ng = self.node(a).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(Op::AddBias { a, bias }, vec![m, n], out, ng))
    }

    /// Broadcast-add a scalar node to every element.
    pub fn add_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.node(s).data.len() != 1 {
            return Err(Error::contract("add_scalar rhs must be a scalar node"));
        }
        let sv = self.value(s)[0];
        let out: Vec<f64> = self.value(a).iter().map(|&x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad || self.node(s).needs_grad;
        Ok(self.push(Op::AddScalar { a, s }, shape, out, ng))
    }

    /// Elementwise `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, a: VarId, mul: f64, add: f64) -> Result<VarId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| mul * x + add).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        Ok(self.push(Op::Affine { a, mul }, shape, out, ng))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.affine(a, c, 0.0)
    }

    fn unary(
        &mut self,
        a: VarId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> VarId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.node(a).needs_grad;
        self.push(op, shape, out, ng)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    /// Natural log. Non-positive inputs are a domain error; clamp first
    /// when zeros are expected.
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        if let Some(&bad) = self.value(a).iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log { a }))
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Lower clamp with zero gradient at and below the threshold.
    pub fn clamp_min(&mut self, a: VarId, lo: f64) -> VarId {
        self.unary(a, |x| x.max(lo), Op::ClampMin { a, lo })
    }

    /// Row-wise softmax of a matrix, computed with max-subtraction.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        check_finite("softmax_rows", &out)?;
        let ng = self.node(a).needs_grad;
        Ok(self.push(Op::SoftmaxRows { a }, vec![m, n], out, ng))
    }

    /// Point-wise mutual information of a strictly positive frequency
    /// matrix: `max(log(f_ij·T / (R_i·C_j)), 0)` with T/R/C the total,
    /// row, and column sums. The kink carries zero gradient.
    pub fn pmi_from_freq(&mut self, f: VarId) -> Result<VarId> {
        let sf = self.shape(f).to_vec();
        if sf.len() != 2 {
            return Err(Error::Dimension {
                op: "pmi_from_freq",
                lhs: sf,
                rhs: vec![],
            });
        }
        let fv = self.value(f);
        if let Some(&bad) = fv.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "pmi_from_freq",
                detail: format!("non-positive frequency {bad}; clamp first"),
            });
        }
        let (m, n) = (sf[0], sf[1]);
        let (total, rows, cols) = freq_marginals(fv, m, n);
        let ln_t = total.ln();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ln_r = rows[i].ln();
            for j in 0..n {
                let l = fv[i * n + j].ln() + ln_t - ln_r - cols[j].ln();
                out[i * n + j] = l.max(0.0);
            }
        }
        check_finite("pmi_from_freq", &out)?;
        let ng = self.node(f).needs_grad;
        Ok(self.push(Op::PmiFromFreq { f }, vec![m, n], out, ng))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.value(a).iter().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite {
                op: "sum",
                detail: None,
            });
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(Op::Sum { a }, vec![1], vec![s], ng))
    }

    /// Stack equal-shape matrices into a rank-3 tensor along a new
    /// leading axis.
    pub fn stack(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("stack of zero parts"));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 2 {
            return Err(Error::Dimension {
                op: "stack",
                lhs: s0,
                rhs: vec![],
            });
        }
        let mut data = Vec::with_capacity(parts.len() * s0.iter().product::<usize>());
        let mut ng = false;
        for &p in parts {
            if self.shape(p) != s0 {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: s0,
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p));
            ng |= self.node(p).needs_grad;
        }
        let shape = vec![parts.len(), s0[0], s0[1]];
        Ok(self.push(
            Op::Stack {
                parts: parts.to_vec(),
            },
            shape,
            data,
            ng,
        ))
    }

    /// Concatenate rank-3 tensors along the leading (slice) axis,
    /// preserving order.
    pub fn concat_slices(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero parts"));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 3 {
            return Err(Error::Dimension {
                op: "concat_slices",
                lhs: s0,
                rhs: vec![],
            });
        }
        let mut total = 0;
        let mut ng = false;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 3 || sp[1..] != s0[1..] {
                return Err(Error::Dimension {
                    op: "concat_slices",
                    lhs: s0,
                    rhs: sp.to_vec(),
                });
            }
            total += sp[0];
            ng |= self.node(p).needs_grad;
        }
        let mut data = Vec::with_capacity(total * s0[1] * s0[2]);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let shape = vec![total, s0[1], s0[2]];
        Ok(self.push(
            Op::ConcatSlices {
                parts: parts.to_vec(),
            },
            shape,
            data,
            ng,
        ))
    }

    /// Depthwise 1-D convolution along the leading time axis of a
    /// `[p, n, d]` sequence. The kernel is `[w, d]`: one weight per
    /// (time offset, latent dimension), shared across vertices.
    /// Output is `[p-w+1, n, d]`, stride 1.
    pub fn conv_time(&mut self, seq: VarId, kernel: VarId) -> Result<VarId> {
        let (ss, sk) = (self.shape(seq).to_vec(), self.shape(kernel).to_vec());
        if ss.len() != 3 || sk.len() != 2 || sk[1] != ss[2] {
            return Err(Error::Dimension {
                op: "conv_time",
                lhs: ss,
                rhs: sk,
            });
        }
        let (p, n, d) = (ss[0], ss[1], ss[2]);
        let w = sk[0];
        if w < 2 || w > p {
            return Err(Error::config(format!(
                "conv_time kernel width {w} outside [2, {p}]"
            )));
        }
        let out_t = p - w + 1;
        let mut out = vec![0.0; out_t * n * d];
        let sv = self.value(seq);
        let kv = self.value(kernel);
        for t in 0..out_t {
            for s in 0..w {
                let krow = &kv[s * d..(s + 1) * d];
                let xoff = (t + s) * n * d;
                let ooff = t * n * d;
                for v in 0..n {
                    for l in 0..d {
                        out[ooff + v * d + l] += krow[l] * sv[xoff + v * d + l];
                    }
                }
            }
        }
        check_finite("conv_time", &out)?;
        let ng = self.node(seq).needs_grad || self.node(kernel).needs_grad;
        Ok(self.push(Op::ConvTime { seq, kernel }, vec![out_t, n, d], out, ng))
    }

    /// Per-vertex weighted sum over the slice axis: `stack` is
    /// `[S, n, d]`, `weights` is `[n, S]`, output row v is
    /// `Σ_k weights[v,k]·stack[k,v,:]`.
    pub fn attend_slices(&mut self, stack: VarId, weights: VarId) -> Result<VarId> {
        let (sx, sw) = (self.shape(stack).to_vec(), self.shape(weights).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[1] || sw[1] != sx[0] {
            return Err(Error::Dimension {
                op: "attend_slices",
                lhs: sx,
                rhs: sw,
            });
        }
        let (s, n, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(stack);
        let wv = self.value(weights);
        let mut out = vec![0.0; n * d];
        for k in 0..s {
            let xoff = k * n * d;
            for v in 0..n {
                let w = wv[v * s + k];
                if w == 0.0 {
                    continue;
                }
                for l in 0..d {
                    out[v * d + l] += w * xv[xoff + v * d + l];
                }
            }
        }
        check_finite("attend_slices", &out)?;
        let ng = self.node(stack).needs_grad || self.node(weights).needs_grad;
        Ok(self.push(Op::AttendSlices { stack, weights }, vec![n, d], out, ng))
    }

    /// Weighted sum over the slice axis with one weight per slice,
    /// shared across vertices: `stack` is `[S, n, d]`, `weights` `[S]`,
    /// output `[n, d]`.
    pub fn collapse_slices(&mut self, stack: VarId, weights: VarId) -> Result<VarId> {
        let (sx, sw) = (self.shape(stack).to_vec(), self.shape(weights).to_vec());
        if sx.len() != 3 || sw.len() != 1 || sw[0] != sx[0] {
            return Err(Error::Dimension {
                op: "collapse_slices",
                lhs: sx,
                rhs: sw,
            });
        }
        let (s, n, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(stack);
        let wv = self.value(weights);
        let mut out = vec![0.0; n * d];
        for (k, &w) in wv.iter().enumerate().take(s) {
            let xoff = k * n * d;
            for i in 0..n * d {
                out[i] += w * xv[xoff + i];
            }
        }
        check_finite("collapse_slices", &out)?;
        let ng = self.node(stack).needs_grad || self.node(weights).needs_grad;
        Ok(self.push(Op::CollapseSlices { stack, weights }, vec![n, d], out, ng))
    }

    /// Linear layer applied to a two-hot input vector: the output is
    /// `table[i,:] + table[j,:] + bias`, gradients flow only into the
    /// two hot rows and the bias.
    pub fn two_hot_embed(
        &mut self,
        table: VarId,
        bias: VarId,
        hot: (usize, usize),
    ) -> Result<VarId> {
        let (st, sb) = (self.shape(table).to_vec(), self.shape(bias).to_vec());
        if st.len() != 2 || sb.len() != 1 || sb[0] != st[1] {
            return Err(Error::Dimension {
                op: "two_hot_embed",
                lhs: st,
                rhs: sb,
            });
        }
        let (rows, cols) = (st[0], st[1]);
        let (i, j) = hot;
        if i >= rows || j >= rows || i == j {
            return Err(Error::contract(format!(
                "two_hot_embed rows ({i}, {j}) invalid for table with {rows} rows"
            )));
        }
        let tv = self.value(table);
        let bv = self.value(bias);
        let out: Vec<f64> = (0..cols)
            .map(|c| tv[i * cols + c] + tv[j * cols + c] + bv[c])
            .collect();
        check_finite("two_hot_embed", &out)?;
        let ng = self.node(table).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(Op::TwoHotEmbed { table, bias, hot }, vec![cols], out, ng))
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).to_vec();
        let ng = self.node(a).needs_grad;
        Ok(self.push(Op::Reshape { a }, shape, data, ng))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Every gradient-requiring leaf
    /// reachable from the root receives its gradient, readable via
    /// [`Tape::grad`].
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.node(root).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.node(root).needs_grad {
            return Err(Error::contract(
                "backward root is not connected to any gradient-requiring leaf",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn dispatch_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Local helper: lazily materialize the accumulator for an input.
        fn buf(grads: &mut [Option<Vec<f64>>], id: VarId, numel: usize) -> &mut [f64] {
            grads[id.0].get_or_insert_with(|| vec![0.0; numel])
        }
        let numel = |id: VarId| self.node(id).data.len();
        let wants = |id: VarId| self.node(id).needs_grad;

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let bv = self.value(*b).to_vec();
                    mm_nt(g, &bv, m, n, k, buf(grads, *a, m * k));
                }
                if wants(*b) {
                    let av = self.value(*a).to_vec();
                    mm_tn(&av, g, m, k, n, buf(grads, *b, k * n));
                }
            }
            Op::Add { a, b } => {
                for &t in [a, b].iter() {
                    if wants(*t) {
                        let acc = buf(grads, *t, numel(*t));
                        for (x, gg) in acc.iter_mut().zip(g) {
                            *x += gg;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    let acc = buf(grads, *a, numel(*a));
                    for (x, gg) in acc.iter_mut().zip(g) {
                        *x += gg;
                    }
                }
                if wants(*b) {
                    let acc = buf(grads, *b, numel(*b));
                    for (x, gg) in acc.iter_mut().zip(g) {
                        *x -= gg;
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = self.value(*b).to_vec();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = self.value(*a).to_vec();
                    let acc = buf(grads, *b, numel(*b));
                    for i in 0..acc.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias { a, bias } => {
                let n = self.shape(*bias)[0];
                if wants(*a) {
                    let acc = buf(grads, *a, numel(*a));
                    for (x, gg) in acc.iter_mut().zip(g) {
                        *x += gg;
                    }
                }
                if wants(*bias) {
                    let acc = buf(grads, *bias, n);
                    for (i, gg) in g.iter().enumerate() {
                        acc[i % n] += gg;
                    }
                }
            }
            Op::AddScalar { a, s } => {
                if wants(*a) {
                    let acc = buf(grads, *a, numel(*a));
                    for (x, gg) in acc.iter_mut().zip(g) {
                        *x += gg;
                    }
                }
                if wants(*s) {
                    buf(grads, *s, 1)[0] += g.iter().sum::<f64>();
                }
            }
            Op::Affine { a, mul } => {
                if wants(*a) {
                    let m = *mul;
                    let acc = buf(grads, *a, numel(*a));
                    for (x, gg) in acc.iter_mut().zip(g) {
                        *x += m * gg;
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let av = self.value(*a).to_vec();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        if av[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if wants(*a) {
                    let yv = self.nodes[idx].data.clone();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        acc[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let yv = self.nodes[idx].data.clone();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        acc[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
            }
            Op::Log { a } => {
                if wants(*a) {
                    let av = self.value(*a).to_vec();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        acc[i] += g[i] / av[i];
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if wants(*a) {
                    let (lo, hi) = (*lo, *hi);
                    let av = self.value(*a).to_vec();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        if av[i] > lo && av[i] < hi {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::ClampMin { a, lo } => {
                if wants(*a) {
                    let lo = *lo;
                    let av = self.value(*a).to_vec();
                    let acc = buf(grads, *a, numel(*a));
                    for i in 0..acc.len() {
                        if av[i] > lo {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if wants(*a) {
                    let sy = self.nodes[idx].shape.clone();
                    let (m, n) = (sy[0], sy[1]);
                    let yv = self.nodes[idx].data.clone();
                    let acc = buf(grads, *a, m * n);
                    for i in 0..m {
                        let yr = &yv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        let ar = &mut acc[i * n..(i + 1) * n];
                        for j in 0..n {
                            ar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::PmiFromFreq { f } => {
                if wants(*f) {
                    let sf = self.shape(*f).to_vec();
                    let (m, n) = (sf[0], sf[1]);
                    let fv = self.value(*f).to_vec();
                    let (total, rows, cols) = freq_marginals(&fv, m, n);
                    let out = &self.nodes[idx].data;
                    // Masked upstream gradient: zero where the max{·,0}
                    // clipped the log ratio.
                    let gm: Vec<f64> = out
                        .iter()
                        .zip(g)
                        .map(|(&o, &gg)| if o > 0.0 { gg } else { 0.0 })
                        .collect();
                    let gsum: f64 = gm.iter().sum();
                    let mut row_g = vec![0.0; m];
                    let mut col_g = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            row_g[i] += gm[i * n + j];
                            col_g[j] += gm[i * n + j];
                        }
                    }
                    let acc = buf(grads, *f, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += gm[i * n + j] / fv[i * n + j] + gsum / total
                                - row_g[i] / rows[i]
                                - col_g[j] / cols[j];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let gv = g[0];
                    let acc = buf(grads, *a, numel(*a));
                    for x in acc.iter_mut() {
                        *x += gv;
                    }
                }
            }
            Op::Stack { parts } => {
                let part_len = numel(parts[0]);
                for (k, &p) in parts.iter().enumerate() {
                    if wants(p) {
                        let acc = buf(grads, p, part_len);
                        let seg = &g[k * part_len..(k + 1) * part_len];
                        for (x, gg) in acc.iter_mut().zip(seg) {
                            *x += gg;
                        }
                    }
                }
            }
            Op::ConcatSlices { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = numel(p);
                    if wants(p) {
                        let acc = buf(grads, p, len);
                        let seg = &g[off..off + len];
                        for (x, gg) in acc.iter_mut().zip(seg) {
                            *x += gg;
                        }
                    }
                    off += len;
                }
            }
            Op::ConvTime { seq, kernel } => {
                let ss = self.shape(*seq).to_vec();
                let (_, n, d) = (ss[0], ss[1], ss[2]);
                let w = self.shape(*kernel)[0];
                let out_t = self.nodes[idx].shape[0];
                if wants(*seq) {
                    let kv = self.value(*kernel).to_vec();
                    let acc = buf(grads, *seq, numel(*seq));
                    for t in 0..out_t {
                        for s in 0..w {
                            let krow = &kv[s * d..(s + 1) * d];
                            let xoff = (t + s) * n * d;
                            let goff = t * n * d;
                            for v in 0..n {
                                for l in 0..d {
                                    acc[xoff + v * d + l] += krow[l] * g[goff + v * d + l];
                                }
                            }
                        }
                    }
                }
                if wants(*kernel) {
                    let sv = self.value(*seq).to_vec();
                    let acc = buf(grads, *kernel, w * d);
                    for t in 0..out_t {
                        for s in 0..w {
                            let xoff = (t + s) * n * d;
                            let goff = t * n * d;
                            for v in 0..n {
                                for l in 0..d {
                                    acc[s * d + l] += sv[xoff + v * d + l] * g[goff + v * d + l];
                                }
                            }
                        }
                    }
                }
            }
            Op::AttendSlices { stack, weights } => {
                let sx = self.shape(*stack).to_vec();
                let (s, n, d) = (sx[0], sx[1], sx[2]);
                if wants(*weights) {
                    let xv = self.value(*stack).to_vec();
                    let acc = buf(grads, *weights, n * s);
                    for k in 0..s {
                        let xoff = k * n * d;
                        for v in 0..n {
                            let mut dot = 0.0;
                            for l in 0..d {
                                dot += g[v * d + l] * xv[xoff + v * d + l];
                            }
                            acc[v * s + k] += dot;
                        }
                    }
                }
                if wants(*stack) {
                    let wv = self.value(*weights).to_vec();
                    let acc = buf(grads, *stack, s * n * d);
                    for k in 0..s {
                        let xoff = k * n * d;
                        for v in 0..n {
                            let w = wv[v * s + k];
                            if w == 0.0 {
                                continue;
                            }
                            for l in 0..d {
                                acc[xoff + v * d + l] += w * g[v * d + l];
                            }
                        }
                    }
                }
            }
            Op::CollapseSlices { stack, weights } => {
                let sx = self.shape(*stack).to_vec();
                let (s, n, d) = (sx[0], sx[1], sx[2]);
                if wants(*weights) {
                    let xv = self.value(*stack).to_vec();
                    let acc = buf(grads, *weights, s);
                    for (k, a) in acc.iter_mut().enumerate().take(s) {
                        let xoff = k * n * d;
                        let mut dot = 0.0;
                        for i in 0..n * d {
                            dot += g[i] * xv[xoff + i];
                        }
                        *a += dot;
                    }
                }
                if wants(*stack) {
                    let wv = self.value(*weights).to_vec();
                    let acc = buf(grads, *stack, s * n * d);
                    for (k, &w) in wv.iter().enumerate().take(s) {
                        let xoff = k * n * d;
                        for i in 0..n * d {
                            acc[xoff + i] += w * g[i];
                        }
                    }
                }
            }
            Op::TwoHotEmbed { table, bias, hot } => {
                let cols = self.shape(*table)[1];
                let (i, j) = *hot;
                if wants(*table) {
                    let acc = buf(grads, *table, numel(*table));
                    for c in 0..cols {
                        acc[i * cols + c] += g[c];
                        acc[j * cols + c] += g[c];
                    }
                }
                if wants(*bias) {
                    let acc = buf(grads, *bias, cols);
                    for c in 0..cols {
                        acc[c] += g[c];
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    let acc = buf(grads, *a, numel(*a));
                    for (x, gg) in acc.iter_mut().zip(g) {
                        *x += gg;
                    }
                }
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Total, row-sum, and column-sum marginals of a row-major matrix.
fn freq_marginals(f: &[f64], m: usize, n: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; m];
    let mut cols = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let v = f[i * n + j];
            rows[i] += v;
            cols[j] += v;
            total += v;
        }
    }
    (total, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf_grad(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>) -> VarId {
        let t = Tensor::new(shape, data).unwrap().with_requires_grad();
        tape.leaf(&t)
    }

    /// Central finite differences of a scalar-valued tape program with
    /// respect to one leaf. Rebuilds the graph from scratch per probe, so
    /// it is independent of the backward pass it checks.
    fn fd_grad(
        build: &dyn Fn(&mut Tape, &[f64]) -> VarId,
        x: &[f64],
        step: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + step;
            let mut tp = Tape::new();
            let rp = build(&mut tp, &xp);
            let fp = tp.value(rp)[0];
            xp[i] = orig - step;
            let mut tm = Tape::new();
            let rm = build(&mut tm, &xp);
            let fm = tm.value(rm)[0];
            xp[i] = orig;
            out[i] = (fp - fm) / (2.0 * step);
        }
        out
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).collect::<Vec<_>>().iter().enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (*a - *n).abs() / denom;
            assert!(
                rel < tol,
                "coordinate {i}: analytic {a} vs numeric {n} (rel {rel})"
            );
        }
    }

    fn check_leaf_grad(build: &dyn Fn(&mut Tape, &[f64]) -> VarId, x: &[f64]) {
        let mut tape = Tape::new();
        let root = build(&mut tape, x);
        tape.backward(root).unwrap();
        // The leaf is always recorded first by these builders.
        let analytic = tape.grad(VarId(0)).expect("leaf grad").to_vec();
        let numeric = fd_grad(build, x, 1e-5);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] · [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn quadratic_form_gradient_matches_finite_differences() {
        // f(x) = xᵀ W x with fixed W; d f/d x = (W + Wᵀ) x.
        let w = vec![0.5, -1.2, 2.0, 0.3, 1.1, -0.7, 0.9, 0.0, 1.5];
        let build = move |tape: &mut Tape, x: &[f64]| {
            let xv = leaf_grad(tape, x.to_vec(), vec![3, 1]);
            let wv = tape.constant(vec![3, 3], w.clone()).unwrap();
            let xt = tape.reshape(xv, vec![1, 3]).unwrap();
            let wx = tape.matmul(wv, xv).unwrap();
            let q = tape.matmul(xt, wx).unwrap();
            tape.reshape(q, vec![1]).unwrap()
        };
        check_leaf_grad(&build, &[0.4, -1.3, 0.8]);
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = tape.relu(a);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_and_derivative() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1], vec![0.0]).unwrap();
        let s = tape.sigmoid(a);
        assert_eq!(tape.value(s), &[0.5]);

        let build = |tape: &mut Tape, x: &[f64]| {
            let xv = leaf_grad(tape, x.to_vec(), vec![1]);
            let s = tape.sigmoid(xv);
            tape.sum(s).unwrap()
        };
        let mut tape = Tape::new();
        let root = build(&mut tape, &[0.0]);
        tape.backward(root).unwrap();
        let g = tape.grad(VarId(0)).unwrap()[0];
        assert!((g - 0.25).abs() < 1e-12);
        let fd = fd_grad(&build, &[0.0], 1e-5);
        assert!((g - fd[0]).abs() < 1e-4 * 0.25);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(tape.log(a).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let b = tape
            .constant(vec![1, 2], vec![(2.0f64).ln(), 0.0])
            .unwrap();
        let s2 = tape.softmax_rows(b).unwrap();
        let v = tape.value(s2);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::new();
        let a = tape.constant(vec![3, 4], data).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        for i in 0..3 {
            let row = &v[i * 4..(i + 1) * 4];
            assert!(row.iter().all(|&x| x >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_time_hand_case() {
        // Scalar lane [1,3,5], kernel (0.5, 0.5) → [2, 4].
        let mut tape = Tape::new();
        let seq = tape.constant(vec![3, 1, 1], vec![1.0, 3.0, 5.0]).unwrap();
        let k = tape.constant(vec![2, 1], vec![0.5, 0.5]).unwrap();
        let out = tape.conv_time(seq, k).unwrap();
        assert_eq!(tape.shape(out), &[2, 1, 1]);
        assert_eq!(tape.value(out), &[2.0, 4.0]);
    }

    #[test]
    fn conv_time_full_width_and_bounds() {
        let mut tape = Tape::new();
        let seq = tape.constant(vec![4, 2, 1], vec![1.0; 8]).unwrap();
        let k = tape.constant(vec![4, 1], vec![0.25; 4]).unwrap();
        let out = tape.conv_time(seq, k).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 1]);

        let k5 = tape.constant(vec![5, 1], vec![0.2; 5]).unwrap();
        assert!(matches!(
            tape.conv_time(seq, k5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_time_output_length_property() {
        for p in 2..=9usize {
            for j in 2..=p {
                let mut tape = Tape::new();
                let seq = tape.constant(vec![p, 2, 3], vec![0.5; p * 6]).unwrap();
                let k = tape.constant(vec![j, 3], vec![0.1; j * 3]).unwrap();
                let out = tape.conv_time(seq, k).unwrap();
                assert_eq!(tape.shape(out)[0], p - j + 1);
            }
        }
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq_data: Vec<f64> = (0..5 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = move |tape: &mut Tape, k: &[f64]| {
            let kv = leaf_grad(tape, k.to_vec(), vec![3, 3]);
            let seq = tape.constant(vec![5, 2, 3], seq_data.clone()).unwrap();
            let out = tape.conv_time(seq, kv).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum(sq).unwrap()
        };
        let k0: Vec<f64> = (0..9).map(|i| 0.1 * (i as f64) - 0.4).collect();
        check_leaf_grad(&build, &k0);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let mut tape = Tape::new();
        let a = tape
            .constant(vec![2, 2, 2], (0..8).map(|i| i as f64).collect())
            .unwrap();
        let c = tape.concat_slices(&[a]).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        assert_eq!(tape.shape(c), tape.shape(a));
    }

    #[test]
    fn concat_extent_arithmetic() {
        // Slices of sizes p, p-1, ..., 1 concatenate to p(p+1)/2.
        for p in [4usize, 12] {
            let mut tape = Tape::new();
            let parts: Vec<VarId> = (0..p)
                .map(|j| {
                    tape.constant(vec![p - j, 2, 1], vec![0.0; (p - j) * 2])
                        .unwrap()
                })
                .collect();
            let c = tape.concat_slices(&parts).unwrap();
            assert_eq!(tape.shape(c)[0], p * (p + 1) / 2);
        }
    }

    #[test]
    fn concat_ragged_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        let b = tape.constant(vec![1, 3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.concat_slices(&[a, b]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![1.0, -2.0, 3.0, 0.5], vec![2, 2]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![3.0], vec![1]);
        let y = leaf_grad(&mut tape, vec![4.0], vec![1]);
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert_eq!(tape.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![1.0, 2.0], vec![2]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // f = sum(x ⊙ x) reuses x twice; df/dx = 2x.
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, vec![1.5, -0.5], vec![2]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn pmi_uniform_frequencies_vanish() {
        let mut tape = Tape::new();
        let f = tape.constant(vec![3, 3], vec![2.5; 9]).unwrap();
        let p = tape.pmi_from_freq(f).unwrap();
        assert!(tape.value(p).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn pmi_gradient_matches_finite_differences() {
        // Frequencies chosen away from the relu kink.
        let f0 = vec![5.0, 1.0, 0.5, 1.0, 4.0, 1.5, 0.5, 1.0, 6.0];
        let build = |tape: &mut Tape, f: &[f64]| {
            let fv = leaf_grad(tape, f.to_vec(), vec![3, 3]);
            let p = tape.pmi_from_freq(fv).unwrap();
            let w = tape.constant(vec![3, 3], vec![0.3; 9]).unwrap();
            let pw = tape.mul(p, w).unwrap();
            tape.sum(pw).unwrap()
        };
        check_leaf_grad(&build, &f0);
    }

    #[test]
    fn primitive_gradients_match_finite_differences_on_random_instances() {
        // Ten random instances through a mixed pipeline touching matmul,
        // bias, relu, sigmoid, tanh, softmax, attention, and sum.
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let wc = w.clone();
            let bc = b.clone();
            let build = move |tape: &mut Tape, x: &[f64]| {
                let xv = leaf_grad(tape, x.to_vec(), vec![2, 3]);
                let wv = tape.constant(vec![3, 3], wc.clone()).unwrap();
                let bv = tape.constant(vec![3], bc.clone()).unwrap();
                let h = tape.matmul(xv, wv).unwrap();
                let h = tape.add_bias(h, bv).unwrap();
                let r = tape.relu(h);
                let s = tape.sigmoid(h);
                let t = tape.tanh(h);
                let mix = tape.add(r, s).unwrap();
                let mix = tape.add(mix, t).unwrap();
                let sm = tape.softmax_rows(mix).unwrap();
                let prod = tape.mul(sm, mix).unwrap();
                tape.sum(prod).unwrap()
            };
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            check_leaf_grad(&build, &x);
        }
    }

    #[test]
    fn attend_slices_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xd: Vec<f64> = (0..4 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = move |tape: &mut Tape, w: &[f64]| {
            let wv = leaf_grad(tape, w.to_vec(), vec![2, 4]);
            let x = tape.constant(vec![4, 2, 3], xd.clone()).unwrap();
            let sm = tape.softmax_rows(wv).unwrap();
            let out = tape.attend_slices(x, sm).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum(sq).unwrap()
        };
        let w0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check_leaf_grad(&build, &w0);
    }

    #[test]
    fn two_hot_embed_matches_dense_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (i, j) = (1usize, 4usize);

        let mut tape = Tape::new();
        let t = tape.constant(vec![6, 4], table.clone()).unwrap();
        let b = tape.constant(vec![4], bias.clone()).unwrap();
        let e = tape.two_hot_embed(t, b, (i, j)).unwrap();

        let mut onehot = vec![0.0; 6];
        onehot[i] = 1.0;
        onehot[j] = 1.0;
        let oh = tape.constant(vec![1, 6], onehot).unwrap();
        let dense = tape.matmul(oh, t).unwrap();
        let densev = tape.value(dense).to_vec();
        let ev = tape.value(e);
        for c in 0..4 {
            assert!((ev[c] - (densev[c] + bias[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let xv = leaf_grad(&mut tape, x, vec![3, 4]);
            let sm = tape.softmax_rows(xv).unwrap();
            let pr = tape.mul(sm, xv).unwrap();
            let s = tape.sum(pr).unwrap();
            tape.backward(s).unwrap();
            tape.grad(xv).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "gradients must be bit-identical across runs");
    }
}
