//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive executed during a forward pass in
//! topological order; [`Tape::backward`] replays the records in reverse,
//! accumulating gradients additively into every leaf that was created
//! from a tensor with `requires_grad` set. One forward/backward pass owns
//! its tape exclusively.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// factor * operand, the only scalar broadcast in the engine.
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Matmul(Var, Var),
    Transpose(Var),
    /// x[B x d] + bias[d], added to every row.
    AddBias { x: Var, bias: Var },
    /// Row-wise x / max(||x||, eps); saves the raw row norms for backward.
    L2Normalize { x: Var, eps: S, norms: Vec<S> },
    /// (a[B x d], b[B x d]) -> [B x 2 x d] with a in channel 0, b in channel 1.
    ConcatChannels(Var, Var),
    /// Extracts one channel of a [B x 2 x d] tensor.
    Channel { x: Var, channel: usize },
    /// Same-length 1-D convolution over the last axis, summed over the two
    /// input channels, plus a scalar bias.
    Conv1dMix { x: Var, kernel: Var, bias: Var },
    Sum(Var),
    Mean(Var),
    /// Mean over the batch of -log softmax(logits)[label]; saves the softmax.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<S>,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
    /// True when the node is a tracked leaf or depends on one.
    needs_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Copies a tensor onto the tape. Its `requires_grad` flag decides
    /// whether [`Tape::backward`] produces a gradient for it.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Untracked constant, e.g. a pair-weight mask.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: S) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op on the tape"
        );
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise ops ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, factor: S, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, data, Op::Scale(a, factor), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, data, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let data = self
            .value(a)
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, data, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, data, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, data, Op::Abs(a), ng)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose expects a matrix, got shape {sa:?}"
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], data, Op::Transpose(a), ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(xv[i * cols + j] + bv[j]);
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(vec![rows, cols], data, Op::AddBias { x, bias }, ng))
    }

    /// Divides each row of a `[B x d]` tensor by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::InvalidArgument(format!(
                "l2_normalize epsilon must be positive, got {eps}"
            )));
        }
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "l2_normalize expects a matrix, got shape {sx:?}"
            )));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &xv[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            data.extend(row.iter().map(|&v| v / denom));
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, cols], data, Op::L2Normalize { x, eps, norms }, ng))
    }

    // ── Fusion ops ──────────────────────────────────────────────────────

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("concat_channels", a, b)?;
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "concat_channels expects matrices, got shape {sa:?}"
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(rows * 2 * cols);
        for i in 0..rows {
            data.extend_from_slice(&av[i * cols..(i + 1) * cols]);
            data.extend_from_slice(&bv[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![rows, 2, cols], data, Op::ConcatChannels(a, b), ng))
    }

    /// Inverse of `concat_channels` for one channel.
    pub fn channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] != 2 || channel >= 2 {
            return Err(Error::InvalidArgument(format!(
                "channel {channel} of shape {sx:?} is not addressable"
            )));
        }
        let (rows, cols) = (sx[0], sx[2]);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let base = i * 2 * cols + channel * cols;
            data.extend_from_slice(&xv[base..base + cols]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows, cols], data, Op::Channel { x, channel }, ng))
    }

    /// Single-output-channel convolution across the length-d axis of a
    /// `[B x 2 x d]` tensor with zero padding keeping the output length d.
    pub fn conv1d_mix(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sx[1] != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv1d_mix expects input of shape [B, 2, d], got {sx:?}"
            )));
        }
        if sk.len() != 2 || sk[0] != 2 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_mix",
                lhs: sx,
                rhs: sk,
            });
        }
        let ksize = sk[1];
        if ksize.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "conv1d_mix kernel width must be odd, got {ksize}"
            )));
        }
        if self.numel(bias) != 1 {
            return Err(Error::InvalidArgument(
                "conv1d_mix bias must be a single value".into(),
            ));
        }
        let (batch, d) = (sx[0], sx[2]);
        let pad = (ksize - 1) / 2;
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.scalar_value(bias);
        let mut data = vec![S::zero(); batch * d];
        for i in 0..batch {
            for j in 0..d {
                let mut acc = bv;
                for ch in 0..2 {
                    for t in 0..ksize {
                        let src = j + t;
                        if src < pad || src - pad >= d {
                            continue;
                        }
                        acc += kv[ch * ksize + t] * xv[i * 2 * d + ch * d + (src - pad)];
                    }
                }
                data[i * d + j] = acc;
            }
        }
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(vec![batch, d], data, Op::Conv1dMix { x, kernel, bias }, ng))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![total], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::from_f64(self.numel(a) as f64);
        let total: S = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![total / n], Op::Mean(a), ng)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed via
    /// max-shifted log-sum-exp so extreme logits stay finite.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy expects logits of shape [B, C], got {sl:?}"
            )));
        }
        let (batch, classes) = (sl[0], sl[1]);
        if labels.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lv = self.value(logits);
        let mut softmax = vec![S::zero(); batch * classes];
        let mut loss = S::zero();
        for i in 0..batch {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                softmax[i * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                softmax[i * classes + j] /= denom;
            }
            let log_sum = denom.ln() + max;
            loss += log_sum - row[labels[i]];
        }
        loss /= S::from_f64(batch as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            ng,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates `d root / d leaf` into every tracked leaf reachable from
    /// `root`, visiting each node exactly once in reverse record order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        self.grads = Vec::new();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // A tracked leaf the root never touched still reports a gradient:
        // all zeros, by independence.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![S::zero(); node.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient computed by the last `backward` call, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (gi, &d) in ga.iter_mut().zip(g) {
                        *gi += d;
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for (gi, &d) in gb.iter_mut().zip(g) {
                        *gi += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (gi, &d) in ga.iter_mut().zip(g) {
                        *gi += d;
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for (gi, &d) in gb.iter_mut().zip(g) {
                        *gi -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let ga = acc(grads, *a, g.len());
                    for ((gi, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *gi += d * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let gb = acc(grads, *b, g.len());
                    for ((gi, &d), &x) in gb.iter_mut().zip(g).zip(av) {
                        *gi += d * x;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    let f = *factor;
                    let ga = acc(grads, *a, g.len());
                    for (gi, &d) in ga.iter_mut().zip(g) {
                        *gi += d * f;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let yv = &self.nodes[id].data;
                    let ga = acc(grads, *a, g.len());
                    for ((gi, &d), &y) in ga.iter_mut().zip(g).zip(yv) {
                        *gi += d * (S::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let yv = &self.nodes[id].data;
                    let ga = acc(grads, *a, g.len());
                    for ((gi, &d), &y) in ga.iter_mut().zip(g).zip(yv) {
                        *gi += d * y * (S::one() - y);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xv = self.value(*a);
                    let ga = acc(grads, *a, g.len());
                    for ((gi, &d), &x) in ga.iter_mut().zip(g).zip(xv) {
                        if x > S::zero() {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let xv = self.value(*a);
                    let ga = acc(grads, *a, g.len());
                    for ((gi, &d), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *gi += d * sign(x);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = dC . B^T
                    let bv = self.value(*b);
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    let av = self.value(*a);
                    let gb = acc(grads, *b, k * n);
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = S::zero();
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let ga = acc(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.needs(*x) {
                    let gx = acc(grads, *x, rows * cols);
                    for (gi, &d) in gx.iter_mut().zip(g) {
                        *gi += d;
                    }
                }
                if self.needs(*bias) {
                    let gb = acc(grads, *bias, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                if self.needs(*x) {
                    let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let yv = &self.nodes[id].data;
                    let eps = *eps;
                    let gx = acc(grads, *x, rows * cols);
                    for i in 0..rows {
                        let y = &yv[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        if norms[i] >= eps {
                            let dot: S = gr.iter().zip(y).map(|(&d, &yi)| d * yi).sum();
                            for j in 0..cols {
                                gx[i * cols + j] += (gr[j] - y[j] * dot) / norms[i];
                            }
                        } else {
                            // Below eps the row was divided by the constant eps.
                            for j in 0..cols {
                                gx[i * cols + j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                if self.needs(*a) {
                    let ga = acc(grads, *a, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[i * 2 * cols + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[i * cols + j] += g[i * 2 * cols + cols + j];
                        }
                    }
                }
            }
            Op::Channel { x, channel } => {
                if self.needs(*x) {
                    let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[2]);
                    let ch = *channel;
                    let gx = acc(grads, *x, rows * 2 * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * 2 * cols + ch * cols + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Conv1dMix { x, kernel, bias } => {
                let (batch, d) = (self.shape(*x)[0], self.shape(*x)[2]);
                let ksize = self.shape(*kernel)[1];
                let pad = (ksize - 1) / 2;
                if self.needs(*x) {
                    let kv = self.value(*kernel);
                    let gx = acc(grads, *x, batch * 2 * d);
                    for i in 0..batch {
                        for j in 0..d {
                            let d_out = g[i * d + j];
                            for ch in 0..2 {
                                for t in 0..ksize {
                                    let src = j + t;
                                    if src < pad || src - pad >= d {
                                        continue;
                                    }
                                    gx[i * 2 * d + ch * d + (src - pad)] +=
                                        d_out * kv[ch * ksize + t];
                                }
                            }
                        }
                    }
                }
                if self.needs(*kernel) {
                    let xv = self.value(*x);
                    let gk = acc(grads, *kernel, 2 * ksize);
                    for i in 0..batch {
                        for j in 0..d {
                            let d_out = g[i * d + j];
                            for ch in 0..2 {
                                for t in 0..ksize {
                                    let src = j + t;
                                    if src < pad || src - pad >= d {
                                        continue;
                                    }
                                    gk[ch * ksize + t] +=
                                        d_out * xv[i * 2 * d + ch * d + (src - pad)];
                                }
                            }
                        }
                    }
                }
                if self.needs(*bias) {
                    let total: S = g.iter().copied().sum();
                    let gb = acc(grads, *bias, 1);
                    gb[0] += total;
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let len = self.numel(*a);
                    let d = g[0];
                    let ga = acc(grads, *a, len);
                    for gi in ga.iter_mut() {
                        *gi += d;
                    }
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let len = self.numel(*a);
                    let d = g[0] / S::from_f64(len as f64);
                    let ga = acc(grads, *a, len);
                    for gi in ga.iter_mut() {
                        *gi += d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                if self.needs(*logits) {
                    let (batch, classes) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let inv_b = S::one() / S::from_f64(batch as f64);
                    let d = g[0];
                    let gl = acc(grads, *logits, batch * classes);
                    for i in 0..batch {
                        for j in 0..classes {
                            let indicator = if labels[i] == j { S::one() } else { S::zero() };
                            gl[i * classes + j] += d * (softmax[i * classes + j] - indicator) * inv_b;
                        }
                    }
                }
            }
        }
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], target: Var, len: usize) -> &mut Vec<S> {
    grads[target.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central-difference oracle: d f / d x, elementwise, h = 1e-5.
    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.to_vec();
                let mut minus = x.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai), &[1.0, 2.0, 3.0, 4.0]);
        let az = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(az), &[0.0; 4]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_backward_matches_frozen_finite_differences() {
        // loss = sum(A.B), A=[[1,2]], B=[[3],[5]].
        // Central differences at h=1e-5 give dA=[[3,5]], dB=[[1],[2]].
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]).tracked());
        let b = tape.leaf(&t(&[2, 1], &[3.0, 5.0]).tracked());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(a).unwrap(), &[3.0, 5.0], 1e-12);
        assert_close(tape.grad(b).unwrap(), &[1.0, 2.0], 1e-12);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, -1.0, 2.0]));
        let th = tape.tanh(x);
        assert_eq!(tape.value(th)[0], 0.0);
        let sg = tape.sigmoid(x);
        assert_eq!(tape.value(sg)[0], 0.5);
        let re = tape.relu(x);
        assert_eq!(tape.value(re), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn binary_elementwise_rejects_mismatched_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.sub(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn tanh_derivative_matches_analytic_value() {
        // d/dx tanh(x) at 0.5 is 1 - tanh(0.5)^2; the central-difference
        // oracle agrees to ~1e-10.
        let f = |x: &[f64]| x[0].tanh();
        let numeric = numeric_grad(&f, &[0.5]);
        let expected = 1.0 - 0.5f64.tanh().powi(2);
        assert!((numeric[0] - expected).abs() < 1e-9);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[0.5]).tracked());
        let y = tape.tanh(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        // 3-4-5 triangle row, then a zero row guarded by eps.
        assert_close(tape.value(y), &[0.6, 0.8, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 1.0]));
        assert!(tape.l2_normalize(x, 0.0).is_err());
        assert!(tape.l2_normalize(x, -1.0).is_err());
    }

    #[test]
    fn l2_normalize_gradient_of_sum_at_ones_is_zero() {
        // sum(x / ||x||) is scale-invariant, so its gradient at [1,1]
        // vanishes; frozen from the central-difference oracle.
        let f = |x: &[f64]| {
            let n = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-12);
            x[0] / n + x[1] / n
        };
        let numeric = numeric_grad(&f, &[1.0, 1.0]);
        assert_close(&numeric, &[0.0, 0.0], 1e-9);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 1.0]).tracked());
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[0.0, 0.0], 1e-15);
    }

    #[test]
    fn concat_layout_and_split_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[1, 2], &[3.0, 4.0]));
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(cat), &[1, 2, 2]);
        assert_eq!(tape.value(cat), &[1.0, 2.0, 3.0, 4.0]);
        let c0 = tape.channel(cat, 0).unwrap();
        let c1 = tape.channel(cat, 1).unwrap();
        assert_eq!(tape.value(c0), tape.value(a));
        assert_eq!(tape.value(c1), tape.value(b));
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).tracked());
        let b = tape.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).tracked());
        let cat = tape.concat_channels(a, b).unwrap();
        let loss = tape.sum(cat);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn conv1d_mix_identity_routing_and_zero_kernel() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(&t(&[1, 3], &[4.0, 5.0, 6.0]));
        let x = tape.concat_channels(a, b).unwrap();

        let k_route = tape.leaf(&t(&[2, 1], &[1.0, 0.0]));
        let zero_bias = tape.leaf(&Tensor::scalar(0.0));
        let routed = tape.conv1d_mix(x, k_route, zero_bias).unwrap();
        assert_eq!(tape.value(routed), &[1.0, 2.0, 3.0]);

        let k_zero = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let one_bias = tape.leaf(&Tensor::scalar(1.0));
        let ones = tape.conv1d_mix(x, k_zero, one_bias).unwrap();
        assert_eq!(tape.value(ones), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv1d_mix_k1_matches_closed_form() {
        // kernel [[a],[b]], bias c: out[i] = a*ch0[i] + b*ch1[i] + c.
        let ch0 = [0.5, -1.0, 2.0, 0.25];
        let ch1 = [1.5, 0.5, -0.75, 3.0];
        let (ka, kb, c) = (0.7, -0.3, 0.11);
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 4], &ch0));
        let b = tape.leaf(&t(&[1, 4], &ch1));
        let x = tape.concat_channels(a, b).unwrap();
        let kernel = tape.leaf(&t(&[2, 1], &[ka, kb]));
        let bias = tape.leaf(&Tensor::scalar(c));
        let out = tape.conv1d_mix(x, kernel, bias).unwrap();
        let expect: Vec<f64> = ch0
            .iter()
            .zip(&ch1)
            .map(|(&u, &v)| ka * u + kb * v + c)
            .collect();
        assert_close(tape.value(out), &expect, 1e-12);
    }

    #[test]
    fn conv1d_mix_rejects_even_kernel() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 3], &[0.0; 3]));
        let x = tape.concat_channels(a, a).unwrap();
        let k = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        let bias = tape.leaf(&Tensor::scalar(0.0));
        assert!(tape.conv1d_mix(x, k, bias).is_err());
    }

    #[test]
    fn conv1d_mix_k3_gradient_matches_oracle() {
        // Independent forward reimplementation for the oracle closure.
        let conv = |x: &[f64], k: &[f64], bias: f64, d: usize| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for (j, slot) in out.iter_mut().enumerate() {
                let mut acc = bias;
                for ch in 0..2 {
                    for tt in 0..3 {
                        let src = j + tt;
                        if src < 1 || src > d {
                            continue;
                        }
                        acc += k[ch * 3 + tt] * x[ch * d + (src - 1)];
                    }
                }
                *slot = acc;
            }
            out
        };
        let xdata = [0.3, -0.2, 0.9, 0.1, -0.5, 0.7, 0.4, -0.8];
        let kdata = [0.2, -0.4, 0.6, 0.1, 0.5, -0.3];
        let d = 4;

        let loss_of_k = |k: &[f64]| conv(&xdata, k, 0.25, d).iter().sum::<f64>();
        let expect_gk = numeric_grad(&loss_of_k, &kdata);
        let loss_of_x = |x: &[f64]| conv(x, &kdata, 0.25, d).iter().sum::<f64>();
        let expect_gx = numeric_grad(&loss_of_x, &xdata);

        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 4], &xdata[..4]).tracked());
        let b = tape.leaf(&t(&[1, 4], &xdata[4..]).tracked());
        let x = tape.concat_channels(a, b).unwrap();
        let k = tape.leaf(&t(&[2, 3], &kdata).tracked());
        let bias = tape.leaf(&Tensor::scalar(0.25).tracked());
        let out = tape.conv1d_mix(x, k, bias).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();

        assert_close(tape.grad(k).unwrap(), &expect_gk, 1e-8);
        let mut gx = tape.grad(a).unwrap().to_vec();
        gx.extend_from_slice(tape.grad(b).unwrap());
        assert_close(&gx, &expect_gx, 1e-8);
        assert!((tape.grad(bias).unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn backward_quadratic_and_unused_param() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).tracked());
        let unused = tape.leaf(&t(&[2], &[7.0, 8.0]).tracked());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn grads_accumulate_across_uses() {
        // y = x*x + x: dy/dx = 2x + 1.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.5, -0.5]).tracked());
        let sq = tape.mul(x, x).unwrap();
        let both = tape.add(sq, x).unwrap();
        let loss = tape.sum(both);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[4.0, 0.0], 1e-15);
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        // grads of alpha*f + beta*g equal alpha*grads(f) + beta*grads(g).
        let data = [0.4, -1.2, 2.2];
        let (alpha, beta) = (0.3, -1.7);

        let grads_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Var| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[3], &data).tracked());
            let root = build(&mut tape, x);
            tape.backward(root).unwrap();
            tape.grad(x).unwrap().to_vec()
        };

        let f = |tape: &mut Tape<f64>, x: Var| {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq)
        };
        let g = |tape: &mut Tape<f64>, x: Var| {
            let th = tape.tanh(x);
            tape.sum(th)
        };
        let gf = grads_of(&f);
        let gg = grads_of(&g);

        let combined = grads_of(&|tape: &mut Tape<f64>, x: Var| {
            let fv = f(tape, x);
            let gv = g(tape, x);
            let af = tape.scale(alpha, fv);
            let bg = tape.scale(beta, gv);
            tape.add(af, bg).unwrap()
        });
        let expect: Vec<f64> = gf
            .iter()
            .zip(&gg)
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect();
        assert_close(&combined, &expect, 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_extreme_logits() {
        let mut tape = Tape::new();
        let zeros = tape.leaf(&t(&[1, 5], &[0.0; 5]));
        let ce = tape.cross_entropy_logits(zeros, &[2]).unwrap();
        assert!((tape.scalar_value(ce) - 5.0f64.ln()).abs() < 1e-15);

        let mut spike = [0.0; 4];
        spike[1] = 1000.0;
        let logits = tape.leaf(&t(&[1, 4], &spike));
        let ce = tape.cross_entropy_logits(logits, &[1]).unwrap();
        let v = tape.scalar_value(ce);
        assert!(v.is_finite() && v.abs() < 1e-12, "got {v}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        assert!(tape.cross_entropy_logits(logits, &[0, 3]).is_err());
        assert!(tape.cross_entropy_logits(logits, &[0]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_oracle() {
        let logits = [0.2, -0.7, 1.1, 0.4, 0.0, -0.2];
        let labels = [2usize, 0];
        // Naive softmax oracle, safe at these magnitudes.
        let f = |x: &[f64]| {
            let mut total = 0.0;
            for i in 0..2 {
                let row = &x[i * 3..(i + 1) * 3];
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                total += -(row[labels[i]].exp() / denom).ln();
            }
            total / 2.0
        };
        let expect = numeric_grad(&f, &logits);

        let mut tape = Tape::new();
        let l = tape.leaf(&t(&[2, 3], &logits).tracked());
        let ce = tape.cross_entropy_logits(l, &labels).unwrap();
        tape.backward(ce).unwrap();
        assert_close(tape.grad(l).unwrap(), &expect, 1e-8);
    }

    #[test]
    fn add_bias_backward_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 2], &[0.0; 6]).tracked());
        let b = tape.leaf(&t(&[2], &[1.0, -1.0]).tracked());
        let y = tape.add_bias(x, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn transpose_round_trip_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).tracked());
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.value(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.transpose(xt).unwrap();
        assert_eq!(tape.value(back), tape.value(x));

        // loss = sum(X^T . W) exercises Transpose composed with Matmul.
        let wv = [0.5, 1.0, -1.0, 2.0];
        let w = tape.leaf(&t(&[2, 2], &wv));
        let prod = tape.matmul(xt, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let f = |xd: &[f64]| {
            let mut total = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    for p in 0..2 {
                        total += xd[p * 3 + i] * wv[p * 2 + j];
                    }
                }
            }
            total
        };
        let expect = numeric_grad(&f, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_close(tape.grad(x).unwrap(), &expect, 1e-8);
    }

    #[test]
    fn engine_works_with_f32() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            &Tensor::from_vec(vec![2, 2], vec![0.5f32, -1.0, 2.0, 0.25])
                .unwrap()
                .tracked(),
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0f32, -2.0, 4.0, 0.5]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[2, 2], &[0.3, -0.4, 0.9, 0.12]).tracked());
            let th = tape.tanh(x);
            let sg = tape.sigmoid(th);
            let nm = tape.l2_normalize(sg, 1e-12).unwrap();
            let loss = tape.mean(nm);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
