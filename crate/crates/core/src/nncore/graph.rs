use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gelu, gelu_grad, gemm, inverse_permutation, permute};
use super::{NnError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Operation kinds supported by the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    LayerNorm,
    Softmax,
    Gelu,
    Relu,
    Embedding,
    Reshape,
    Permute,
    Sum,
    Mean,
    CrossEntropy,
}

/// The op set every model in this crate is built from.
pub fn required_op_set() -> Vec<OpKind> {
    use OpKind::*;
    vec![
        MatMul,
        BatchMatMul,
        Add,
        Sub,
        Mul,
        Scale,
        LayerNorm,
        Softmax,
        Gelu,
        Relu,
        Embedding,
        Reshape,
        Permute,
        Sum,
        Mean,
        CrossEntropy,
    ]
}

/// Masking applied by [`Graph::softmax`] over the last axis.
#[derive(Clone, Debug)]
pub enum Mask {
    None,
    /// Row `i` of each trailing square block may only see columns `j <= i`.
    Causal,
    /// Columns flagged `false` are excluded. `valid` has one entry per
    /// (batch, column); `rows_per_batch` consecutive rows share a batch entry.
    KeyPadding {
        valid: Arc<Vec<bool>>,
        rows_per_batch: usize,
    },
}

/// Target index ignored by [`Graph::cross_entropy`].
pub const IGNORE_INDEX: usize = usize::MAX;

enum Op {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        count: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Eager reverse-mode tape. Every op evaluates immediately and records what
/// the backward pass needs; nodes are appended in topological order.
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name, in parameter registration order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn add_into(dst: &mut Option<Tensor>, g: Tensor) {
    match dst {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        None => *dst = Some(g),
    }
}

/// Sum `g` (shaped like the broadcast result) down to `len` trailing entries.
fn reduce_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<NodeId, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(name));
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Result<NodeId, NnError> {
        self.push(Op::Leaf, t, false, "input")
    }

    /// Looks up `name` in a set of named inputs and binds it as a constant.
    pub fn bind(&mut self, inputs: &HashMap<String, Tensor>, name: &str) -> Result<NodeId, NnError> {
        let t = inputs
            .get(name)
            .ok_or_else(|| NnError::UnboundInput(name.to_string()))?;
        self.input(t.clone())
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId, NnError> {
        self.push(Op::Param(name.to_string()), t, true, "param")
    }

    /// `a[.., k] @ b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.cols() != bv.shape()[0] {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[a, b]);
        self.push(Op::MatMul(a, b), t, ng, "matmul")
    }

    /// Batched matmul over all leading axes: `a[.., m, k] @ b[.., k, n]`, or
    /// `a[.., m, k] @ b[.., n, k]^T` when `trans_b` is set.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let mismatch = || NnError::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let nd = sa.len();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (bk, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[a, b]);
        self.push(
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            t,
            ng,
            "bmm",
        )
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_broadcast(av.shape(), bv.shape()) || bv.is_empty() {
            return Err(NnError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bl = bv.len();
        let data = av
            .data()
            .chunks(bl)
            .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        self.push(Op::Add(a, b), t, ng, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        self.push(Op::Sub(a, b), t, ng, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        self.push(Op::Mul(a, b), t, ng, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|v| v * c).collect())?;
        let ng = self.ng(&[a]);
        self.push(Op::Scale(a, c), t, ng, "scale")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId, NnError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(NnError::ShapeMismatch {
                op: "layernorm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
            ng,
            "layernorm",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId, mask: &Mask) -> Result<NodeId, NnError> {
        let av = self.value(a);
        let n = av.cols();
        let rows = av.rows();
        let shape = av.shape().to_vec();
        let m = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        match mask {
            Mask::Causal if m != n => {
                return Err(NnError::ShapeMismatch {
                    op: "softmax(causal)",
                    lhs: shape,
                    rhs: vec![m, n],
                })
            }
            Mask::KeyPadding { valid, rows_per_batch } if valid.len() * rows_per_batch != rows * n => {
                return Err(NnError::ShapeMismatch {
                    op: "softmax(padding)",
                    lhs: shape,
                    rhs: vec![valid.len(), *rows_per_batch],
                })
            }
            _ => {}
        }
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &av.data()[r * n..(r + 1) * n];
            let allowed = |j: usize| match mask {
                Mask::None => true,
                Mask::Causal => j <= r % m,
                Mask::KeyPadding { valid, rows_per_batch } => valid[(r / rows_per_batch) * n + j],
            };
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(NnError::Invalid("softmax row with every column masked".into()));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    o[j] = e;
                    z += e;
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[a]);
        self.push(Op::Softmax(a), t, ng, "softmax")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&v| gelu(v)).collect())?;
        let ng = self.ng(&[a]);
        self.push(Op::Gelu(a), t, ng, "gelu")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&v| v.max(0.0)).collect())?;
        let ng = self.ng(&[a]);
        self.push(Op::Relu(a), t, ng, "relu")
    }

    /// Row lookup `table[ids[i]]`; the result has shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], lead: &[usize]) -> Result<NodeId, NnError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(NnError::ShapeMismatch {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: lead.to_vec(),
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NnError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[table]);
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            ng,
            "embedding",
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(&[a]);
        self.push(Op::Reshape(a), t, ng, "reshape")
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId, NnError> {
        let av = self.value(a);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != av.shape().len() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(NnError::Invalid(format!(
                "permutation {perm:?} for shape {:?}",
                av.shape()
            )));
        }
        let (shape, data) = permute(av.data(), av.shape(), perm);
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[a]);
        self.push(Op::Permute(a, perm.to_vec()), t, ng, "permute")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), ng, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(NnError::Invalid("mean of empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(s), ng, "mean")
    }

    /// Mean cross-entropy of `logits[.., c]` against class ids, one per row.
    /// Rows whose target is [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NnError> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..rows {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lz).exp();
            }
            let t = targets[r];
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= c {
                return Err(NnError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: c,
                });
            }
            total += lz - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(NnError::Invalid("cross_entropy with no targets".into()));
        }
        let ng = self.ng(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
                probs,
            },
            Tensor::scalar(total / count as f64),
            ng,
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar node; returns `d loss / d param` for every
    /// registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params.push((i, name.clone(), g));
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        // parameters registered after the loss cannot influence it
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if let Op::Param(name) = &node.op {
                params.push((i, name.clone(), Tensor::zeros(node.value.shape())));
            }
        }
        params.sort_by_key(|(i, _, _)| *i);
        let params = params.into_iter().map(|(_, n, g)| (n, g)).collect();
        Ok(Gradients { entries: params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NnError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    add_into(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    add_into(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..*batch {
                        // dA = dC @ op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            !trans_b,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                    add_into(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..*batch {
                        let ga = &gd[bi * m * n..(bi + 1) * m * n];
                        let aa = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B stored n x k: dB = dC^T @ A
                            gemm(n, m, k, ga, true, aa, false, out, false);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, out, false);
                        }
                    }
                    add_into(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let mut red = reduce_broadcast(gd, bv.len());
                    if sign < 0.0 {
                        red.iter_mut().for_each(|v| *v = -*v);
                    }
                    add_into(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), red)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.len();
                if self.wants(*a) {
                    let da: Vec<f64> = gd
                        .chunks(bl)
                        .flat_map(|c| c.iter().zip(bv.data()).map(|(x, y)| x * y))
                        .collect();
                    add_into(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let db = reduce_broadcast(&prod, bl);
                    add_into(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => {
                let da = gd.iter().map(|v| v * c).collect();
                add_into(&mut grads[a.0], Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let d = gv.len();
                let rows = rstd.len();
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(g.shape().to_vec(), dx)?);
                }
                if self.wants(*gamma) {
                    let prod: Vec<f64> = gd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    add_into(&mut grads[gamma.0], Tensor::vector(reduce_broadcast(&prod, d)));
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], Tensor::vector(reduce_broadcast(gd, d)));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let dx = gd.iter().zip(av.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                add_into(&mut grads[a.0], Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let dx = gd
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[i * d + j];
                    }
                }
                add_into(&mut grads[table.0], Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                add_into(&mut grads[a.0], g.clone().reshaped(shape)?);
            }
            Op::Permute(a, perm) => {
                let (shape, data) = permute(gd, g.shape(), &inverse_permutation(perm));
                add_into(&mut grads[a.0], Tensor::new(shape, data)?);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                add_into(&mut grads[a.0], Tensor::full(av.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                add_into(&mut grads[a.0], Tensor::full(av.shape(), gd[0] / av.len() as f64));
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..c {
                        dl[r * c + j] = probs[r * c + j] * scale;
                    }
                    dl[r * c + t] -= scale;
                }
                add_into(&mut grads[logits.0], Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}
