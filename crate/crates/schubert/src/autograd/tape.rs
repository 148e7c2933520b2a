use crate::autograd::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// c = a · b, a: [m,k], b: [k,n]
    MatMul { a: TensorRef, b: TensorRef },
    /// c = a · bᵀ, a: [m,k], b: [n,k]
    MatMulNt { a: TensorRef, b: TensorRef },
    Add { a: TensorRef, b: TensorRef },
    /// x[..., n] + v[n], v broadcast over leading axes
    AddRowVec { x: TensorRef, v: TensorRef },
    /// slice i along `axis` scaled by v[i]
    MulAxis { x: TensorRef, v: TensorRef, axis: usize },
    Scale { x: TensorRef, c: Real },
    /// rows of a 2-D tensor gathered by index; backward scatter-adds
    GatherRows { x: TensorRef, indices: Vec<usize> },
    /// x with `axis` removed at position `index`
    IndexAxis { x: TensorRef, axis: usize, index: usize },
    Softmax { x: TensorRef, axis: usize },
    /// per-row standardization over the last axis; when `active` is set the
    /// mean/variance run over active entries only and inactive entries are
    /// treated as x̂ = 0
    LayerNorm {
        x: TensorRef,
        gain: TensorRef,
        shift: TensorRef,
        eps: Real,
        active: Option<Vec<bool>>,
    },
    Gelu { x: TensorRef },
    Tanh { x: TensorRef },
    /// mean negative log-softmax of target entries; empty targets give 0
    CrossEntropy { logits: TensorRef, targets: Vec<usize> },
    /// weight · Σ|xᵢ|
    WeightedL1 { x: TensorRef, weight: Real },
    Sum { x: TensorRef },
    Dropout { x: TensorRef, keep: Vec<bool>, scale: Real },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `TensorRef`.
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    visited: usize,
    nodes: usize,
}

impl Gradients {
    pub fn get(&self, r: TensorRef) -> Option<&[Real]> {
        self.grads[r.0].as_deref()
    }

    /// Accumulate the gradient for `r` into a tensor's gradient buffer.
    pub fn apply_to(&self, r: TensorRef, tensor: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(r) {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Number of nodes the backward sweep visited.
    pub fn visited_nodes(&self) -> usize {
        self.visited
    }

    /// Number of nodes that were on the tape.
    pub fn node_count(&self) -> usize {
        self.nodes
    }
}

/// Eager Wengert tape: every op computes its value when recorded, and
/// `backward` replays the record in reverse. Nodes are appended in program
/// order, so reverse index order is a reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn check_finite(op: &'static str, data: &[Real]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

// Row-major matmul kernels. The j-innermost orderings keep both operands
// streaming through cache.

fn mm(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

fn mm_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// c = aᵀ · b with a: [m,k], b: [m,n] → c: [k,n]
fn mm_tn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += ail * brow[j];
            }
        }
    }
    c
}

const GELU_SQRT_2_OVER_PI: Real = 0.797_884_560_802_865_4;
const GELU_CUBIC: Real = 0.044_715;

fn gelu_scalar(x: Real) -> Real {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: Real) -> Real {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Row softmax probabilities of a logit row, max-subtracted for stability.
fn softmax_line(line: &[Real]) -> Vec<Real> {
    let max = line.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = line.iter().map(|&x| (x - max).exp()).collect();
    let denom: Real = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= denom);
    out
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

    pub fn value(&self, r: TensorRef) -> &[Real] {
        &self.nodes[r.0].data
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn scalar_value(&self, r: TensorRef) -> Real {
        debug_assert_eq!(self.nodes[r.0].data.len(), 1);
        self.nodes[r.0].data[0]
    }

    pub fn to_tensor(&self, r: TensorRef) -> Tensor {
        Tensor::new(self.shape(r).to_vec(), self.value(r).to_vec())
            .expect("tape values are validated on record")
    }

    /// Total multiplications performed by matmul-style nodes on this tape.
    /// Elementwise work (softmax, layer norm, activations, scaling) is not
    /// counted; this is the quantity the FLOPs model predicts.
    pub fn matmul_multiplies(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| match node.op {
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    (m * k * n) as u64
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    (m * k * n) as u64
                }
                _ => 0,
            })
            .sum()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn requires(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite("leaf", &data)?;
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Record a constant leaf; gradients do not flow into it.
    pub fn input(&mut self, t: &Tensor) -> Result<TensorRef> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn input_from(&mut self, shape: Vec<usize>, data: Vec<Real>) -> Result<TensorRef> {
        self.leaf(shape, data, false)
    }

    /// Record a differentiable leaf; `backward` will report its gradient.
    pub fn param(&mut self, t: &Tensor) -> Result<TensorRef> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn param_from(&mut self, shape: Vec<usize>, data: Vec<Real>) -> Result<TensorRef> {
        self.leaf(shape, data, true)
    }

    pub fn constant(&mut self, value: Real) -> TensorRef {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.value(a), self.value(b), m, k, n);
        check_finite("matmul", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, req))
    }

    /// a · bᵀ with a: [m,k], b: [n,k].
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = mm_nt(self.value(a), self.value(b), m, k, n);
        check_finite("matmul_nt", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMulNt { a, b }, vec![m, n], data, req))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<Real> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, self.shape(a).to_vec(), data, req))
    }

    /// x[..., n] + v[n] with v broadcast over all leading axes.
    pub fn add_rowvec(&mut self, x: TensorRef, v: TensorRef) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if sv.len() != 1 || sv[0] != n || sx.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                lhs: sx,
                rhs: sv,
            });
        }
        let vdata = self.value(v);
        let data: Vec<Real> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &xi)| xi + vdata[i % n])
            .collect();
        check_finite("add_rowvec", &data)?;
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(Op::AddRowVec { x, v }, sx, data, req))
    }

    /// Scale every slice along `axis` by the matching entry of v.
    pub fn mul_axis(&mut self, x: TensorRef, v: TensorRef, axis: usize) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if axis >= sx.len() || sv.len() != 1 || sv[0] != sx[axis] {
            return Err(Error::ShapeMismatch {
                op: "mul_axis",
                lhs: sx,
                rhs: sv,
            });
        }
        let (outer, n, inner) = axis_geometry(&sx, axis);
        let xdata = self.value(x);
        let vdata = self.value(v);
        let mut data = vec![0.0; xdata.len()];
        for o in 0..outer {
            for j in 0..n {
                let vj = vdata[j];
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[base + i] = xdata[base + i] * vj;
                }
            }
        }
        check_finite("mul_axis", &data)?;
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(Op::MulAxis { x, v, axis }, sx, data, req))
    }

    pub fn scale(&mut self, x: TensorRef, c: Real) -> Result<TensorRef> {
        let data: Vec<Real> = self.value(x).iter().map(|&xi| xi * c).collect();
        check_finite("scale", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Scale { x, c }, self.shape(x).to_vec(), data, req))
    }

    /// Gather rows of a 2-D tensor. Used for embedding lookup and for
    /// selecting masked positions; backward scatter-adds into the source.
    pub fn gather_rows(&mut self, x: TensorRef, indices: &[usize]) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        for &idx in indices {
            if idx >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: idx,
                    extent: rows,
                });
            }
        }
        let xdata = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &idx in indices {
            data.extend_from_slice(&xdata[idx * cols..(idx + 1) * cols]);
        }
        let req = self.requires(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            vec![indices.len(), cols],
            data,
            req,
        ))
    }

    /// Select position `index` along `axis`, removing that axis.
    pub fn index_axis(&mut self, x: TensorRef, axis: usize, index: usize) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::ShapeMismatch {
                op: "index_axis",
                lhs: sx,
                rhs: vec![axis],
            });
        }
        if index >= sx[axis] {
            return Err(Error::IndexOutOfRange {
                op: "index_axis",
                index,
                extent: sx[axis],
            });
        }
        let (outer, n, inner) = axis_geometry(&sx, axis);
        let xdata = self.value(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&xdata[base..base + inner]);
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        let req = self.requires(x);
        Ok(self.push(Op::IndexAxis { x, axis, index }, shape, data, req))
    }

    /// Softmax along `axis`, max-subtracted for stability. Output slices sum
    /// to one.
    pub fn softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: sx,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = axis_geometry(&sx, axis);
        let xdata = self.value(x);
        let mut data = vec![0.0; xdata.len()];
        let mut line = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    line[j] = xdata[(o * n + j) * inner + i];
                }
                let probs = softmax_line(&line);
                for j in 0..n {
                    data[(o * n + j) * inner + i] = probs[j];
                }
            }
        }
        check_finite("softmax", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Softmax { x, axis }, sx, data, req))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        shift: TensorRef,
        eps: Real,
    ) -> Result<TensorRef> {
        self.layer_norm_impl(x, gain, shift, eps, None)
    }

    /// Layer norm whose mean/variance run over the `active` entries only;
    /// inactive entries contribute x̂ = 0 (their output is exactly `shift`).
    /// Pruning uses this so a masked hidden unit reproduces the statistics of
    /// the extracted smaller model bit for bit.
    pub fn layer_norm_masked(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        shift: TensorRef,
        eps: Real,
        active: &[bool],
    ) -> Result<TensorRef> {
        self.layer_norm_impl(x, gain, shift, eps, Some(active.to_vec()))
    }

    fn layer_norm_impl(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        shift: TensorRef,
        eps: Real,
        active: Option<Vec<bool>>,
    ) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        let h = *sx.last().unwrap_or(&0);
        if h == 0 || self.shape(gain) != [h] || self.shape(shift) != [h] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        if let Some(a) = &active {
            if a.len() != h {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![h],
                    rhs: vec![a.len()],
                });
            }
            if !a.iter().any(|&b| b) {
                return Err(Error::Contract("layer_norm needs an active entry".into()));
            }
        }
        let rows = self.value(x).len() / h;
        let xdata = self.value(x);
        let gdata = self.value(gain);
        let sdata = self.value(shift);
        let n_act = active
            .as_ref()
            .map(|a| a.iter().filter(|&&b| b).count())
            .unwrap_or(h);
        let mut data = vec![0.0; xdata.len()];
        for r in 0..rows {
            let row = &xdata[r * h..(r + 1) * h];
            let mut sum = 0.0;
            for j in 0..h {
                if active.as_ref().map_or(true, |a| a[j]) {
                    sum += row[j];
                }
            }
            let mean = sum / n_act as Real;
            let mut var = 0.0;
            for j in 0..h {
                if active.as_ref().map_or(true, |a| a[j]) {
                    let d = row[j] - mean;
                    var += d * d;
                }
            }
            var /= n_act as Real;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..h {
                let xhat = if active.as_ref().map_or(true, |a| a[j]) {
                    (row[j] - mean) * inv
                } else {
                    0.0
                };
                data[r * h + j] = gdata[j] * xhat + sdata[j];
            }
        }
        check_finite("layer_norm", &data)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(shift);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
                active,
            },
            sx,
            data,
            req,
        ))
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let data: Vec<Real> = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        check_finite("gelu", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Gelu { x }, self.shape(x).to_vec(), data, req))
    }

    pub fn tanh(&mut self, x: TensorRef) -> Result<TensorRef> {
        let data: Vec<Real> = self.value(x).iter().map(|&v| v.tanh()).collect();
        check_finite("tanh", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Tanh { x }, self.shape(x).to_vec(), data, req))
    }

    /// Mean negative log-softmax probability of the targets. Empty targets
    /// return 0 so random batches with no masked tokens stay well defined.
    pub fn cross_entropy(&mut self, logits: TensorRef, targets: &[usize]) -> Result<TensorRef> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: sx,
                rhs: vec![targets.len()],
            });
        }
        let (n, vocab) = (sx[0], sx[1]);
        for &t in targets {
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: vocab,
                });
            }
        }
        let xdata = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &xdata[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse: Real = row.iter().map(|&x| (x - max).exp()).sum::<Real>().ln() + max;
            total += lse - row[t];
        }
        let value = if n == 0 { 0.0 } else { total / n as Real };
        check_finite("cross_entropy", &[value])?;
        let req = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![],
            vec![value],
            req,
        ))
    }

    /// weight · Σ|xᵢ|, the L1 penalty building block. The subgradient at 0 is
    /// taken as 0.
    pub fn weighted_l1(&mut self, x: TensorRef, weight: Real) -> Result<TensorRef> {
        let value = weight * self.value(x).iter().map(|v| v.abs()).sum::<Real>();
        check_finite("weighted_l1", &[value])?;
        let req = self.requires(x);
        Ok(self.push(Op::WeightedL1 { x, weight }, vec![], vec![value], req))
    }

    pub fn sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let value: Real = self.value(x).iter().sum();
        check_finite("sum", &[value])?;
        let req = self.requires(x);
        Ok(self.push(Op::Sum { x }, vec![], vec![value], req))
    }

    /// Inverted dropout: kept entries scale by 1/(1-p) so eval needs no
    /// rescale. The keep mask is drawn by the caller.
    pub fn dropout(&mut self, x: TensorRef, keep: Vec<bool>, p: Real) -> Result<TensorRef> {
        if keep.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let scale = 1.0 / (1.0 - p);
        let data: Vec<Real> = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        check_finite("dropout", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Dropout { x, keep, scale }, self.shape(x).to_vec(), data, req))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for all
    /// differentiable leaves come back in the returned [`Gradients`].
    pub fn backward(self, loss: TensorRef) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; n_nodes];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0usize;

        for idx in (0..n_nodes).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dout, &mut grads);
            // Leaf gradients survive; interior gradients were taken above and
            // dropped, keeping peak memory at the live frontier.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dout);
            }
        }

        Ok(Gradients {
            grads,
            visited,
            nodes: n_nodes,
        })
    }

    fn accumulate(grads: &mut [Option<Vec<Real>>], r: TensorRef, delta: &[Real]) {
        match &mut grads[r.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => grads[r.0] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&self, idx: usize, dout: &[Real], grads: &mut [Option<Vec<Real>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    // dA = dC · Bᵀ
                    let da = mm_nt(dout, self.value(*b), m, n, k);
                    Self::accumulate(grads, *a, &da);
                }
                if self.requires(*b) {
                    // dB = Aᵀ · dC
                    let db = mm_tn(self.value(*a), dout, m, k, n);
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires(*a) {
                    // dA = dC · B
                    let da = mm(dout, self.value(*b), m, n, k);
                    Self::accumulate(grads, *a, &da);
                }
                if self.requires(*b) {
                    // dB = dCᵀ · A
                    let db = mm_tn(dout, self.value(*a), m, n, k);
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    Self::accumulate(grads, *a, dout);
                }
                if self.requires(*b) {
                    Self::accumulate(grads, *b, dout);
                }
            }
            Op::AddRowVec { x, v } => {
                if self.requires(*x) {
                    Self::accumulate(grads, *x, dout);
                }
                if self.requires(*v) {
                    let n = self.shape(*v)[0];
                    let mut dv = vec![0.0; n];
                    for (i, &d) in dout.iter().enumerate() {
                        dv[i % n] += d;
                    }
                    Self::accumulate(grads, *v, &dv);
                }
            }
            Op::MulAxis { x, v, axis } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = axis_geometry(sx, *axis);
                let xdata = self.value(*x);
                let vdata = self.value(*v);
                if self.requires(*x) {
                    let mut dx = vec![0.0; xdata.len()];
                    for o in 0..outer {
                        for j in 0..n {
                            let vj = vdata[j];
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                dx[base + i] = dout[base + i] * vj;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
                if self.requires(*v) {
                    let mut dv = vec![0.0; n];
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            let mut acc = 0.0;
                            for i in 0..inner {
                                acc += dout[base + i] * xdata[base + i];
                            }
                            dv[j] += acc;
                        }
                    }
                    Self::accumulate(grads, *v, &dv);
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    let dx: Vec<Real> = dout.iter().map(|&d| d * c).collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::GatherRows { x, indices } => {
                if self.requires(*x) {
                    let cols = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (row, &idx) in indices.iter().enumerate() {
                        let src = &dout[row * cols..(row + 1) * cols];
                        let dst = &mut dx[idx * cols..(idx + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::IndexAxis { x, axis, index } => {
                if self.requires(*x) {
                    let sx = self.shape(*x);
                    let (outer, n, inner) = axis_geometry(sx, *axis);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for o in 0..outer {
                        let base = (o * n + index) * inner;
                        dx[base..base + inner].copy_from_slice(&dout[o * inner..(o + 1) * inner]);
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires(*x) {
                    let sx = self.shape(*x);
                    let (outer, n, inner) = axis_geometry(sx, *axis);
                    let p = &self.nodes[idx].data;
                    let mut dx = vec![0.0; p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                dot += p[at] * dout[at];
                            }
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                dx[at] = p[at] * (dout[at] - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
                active,
            } => {
                let h = *self.shape(*x).last().unwrap();
                let rows = self.value(*x).len() / h;
                let xdata = self.value(*x);
                let gdata = self.value(*gain);
                let n_act = active
                    .as_ref()
                    .map(|a| a.iter().filter(|&&b| b).count())
                    .unwrap_or(h) as Real;
                let is_active = |j: usize| active.as_ref().map_or(true, |a| a[j]);

                let mut dx = self.requires(*x).then(|| vec![0.0; xdata.len()]);
                let mut dgain = self.requires(*gain).then(|| vec![0.0; h]);
                let mut dshift = self.requires(*shift).then(|| vec![0.0; h]);

                for r in 0..rows {
                    let row = &xdata[r * h..(r + 1) * h];
                    let drow = &dout[r * h..(r + 1) * h];
                    let mut sum = 0.0;
                    for j in 0..h {
                        if is_active(j) {
                            sum += row[j];
                        }
                    }
                    let mean = sum / n_act;
                    let mut var = 0.0;
                    for j in 0..h {
                        if is_active(j) {
                            let d = row[j] - mean;
                            var += d * d;
                        }
                    }
                    var /= n_act;
                    let inv = 1.0 / (var + eps).sqrt();

                    let xhat = |j: usize| {
                        if is_active(j) {
                            (row[j] - mean) * inv
                        } else {
                            0.0
                        }
                    };

                    if let Some(dg) = dgain.as_mut() {
                        for j in 0..h {
                            dg[j] += drow[j] * xhat(j);
                        }
                    }
                    if let Some(ds) = dshift.as_mut() {
                        for j in 0..h {
                            ds[j] += drow[j];
                        }
                    }
                    if let Some(dxr) = dx.as_mut() {
                        let mut mean_dy = 0.0;
                        let mut mean_dyx = 0.0;
                        for j in 0..h {
                            if is_active(j) {
                                let dy = drow[j] * gdata[j];
                                mean_dy += dy;
                                mean_dyx += dy * xhat(j);
                            }
                        }
                        mean_dy /= n_act;
                        mean_dyx /= n_act;
                        for j in 0..h {
                            if is_active(j) {
                                let dy = drow[j] * gdata[j];
                                dxr[r * h + j] = inv * (dy - mean_dy - xhat(j) * mean_dyx);
                            }
                        }
                    }
                }

                if let Some(d) = dx {
                    Self::accumulate(grads, *x, &d);
                }
                if let Some(d) = dgain {
                    Self::accumulate(grads, *gain, &d);
                }
                if let Some(d) = dshift {
                    Self::accumulate(grads, *shift, &d);
                }
            }
            Op::Gelu { x } => {
                if self.requires(*x) {
                    let dx: Vec<Real> = self
                        .value(*x)
                        .iter()
                        .zip(dout)
                        .map(|(&v, &d)| d * gelu_grad_scalar(v))
                        .collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.requires(*x) {
                    let y = &self.nodes[idx].data;
                    let dx: Vec<Real> = y.iter().zip(dout).map(|(&t, &d)| d * (1.0 - t * t)).collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.requires(*logits) && !targets.is_empty() {
                    let vocab = self.shape(*logits)[1];
                    let n = targets.len();
                    let xdata = self.value(*logits);
                    let d = dout[0] / n as Real;
                    let mut dx = vec![0.0; xdata.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        let probs = softmax_line(&xdata[i * vocab..(i + 1) * vocab]);
                        for j in 0..vocab {
                            dx[i * vocab + j] = d * (probs[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    Self::accumulate(grads, *logits, &dx);
                }
            }
            Op::WeightedL1 { x, weight } => {
                if self.requires(*x) {
                    let d = dout[0] * weight;
                    let dx: Vec<Real> = self
                        .value(*x)
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                d
                            } else if v < 0.0 {
                                -d
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let dx = vec![dout[0]; self.value(*x).len()];
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::Dropout { x, keep, scale } => {
                if self.requires(*x) {
                    let dx: Vec<Real> = dout
                        .iter()
                        .zip(keep)
                        .map(|(&d, &k)| if k { d * scale } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *x, &dx);
                }
            }
        }
    }
}
