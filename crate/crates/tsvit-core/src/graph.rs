//! Reverse-mode automatic differentiation on a tape.
//!
//! `Graph` is a define-by-run tape: every op appends a node holding the
//! forward value and enough metadata to replay the chain rule in reverse.
//! A graph is built per forward pass and dropped afterwards; parameters
//! live outside the graph (see [`crate::params`]) and enter as leaves.
//!
//! Supported ops: matmul (optionally batched), broadcast add, elementwise
//! mul, scale, reshape, permute, concat, slice, gather, repeat, softmax,
//! layer-norm, GELU, mean, cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// rhs shape is a suffix of lhs shape (equal shapes included).
    Add(Var, Var),
    /// Elementwise product of same-shaped tensors.
    Mul(Var, Var),
    Scale(Var, f32),
    /// lhs `[batch.., m, k]`; rhs `[k, n]` (shared) or `[batch.., k, n]`.
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    /// Rows of a 2-D table selected by index.
    Gather(Var, Vec<usize>),
    /// Tile along a new leading axis.
    Repeat(Var, usize),
    /// Softmax over the last axis.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    },
    Gelu(Var),
    /// Mean of all elements, producing a scalar.
    Mean(Var),
    /// Mean negative log-likelihood of `[rows, classes]` logits.
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather(..) => "gather",
            Op::Repeat(..) => "repeat",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Mean(..) => "mean",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulate matmuls and reductions in f64. Slower; used by the
    /// finite-difference oracle where f32 accumulation noise would drown
    /// the signal.
    precise: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            precise: false,
        }
    }

    pub fn precise() -> Self {
        Graph {
            nodes: Vec::new(),
            precise: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was needed.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad mirrors shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -----------------------------------------------------------------
    // Leaves
    // -----------------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    // -----------------------------------------------------------------
    // Ops
    // -----------------------------------------------------------------

    /// `a + b`, where `b`'s shape must be a suffix of `a`'s (broadcast over
    /// the leading axes). Equal shapes are the no-broadcast case.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(CoreError::Contract(alloc::format!(
                "add: shape {:?} is not a suffix of {:?}",
                sb,
                sa
            )));
        }
        let bn = self.nodes[b.0].value.numel().max(1);
        let mut out = self.nodes[a.0].value.data().to_vec();
        {
            let bd = self.nodes[b.0].value.data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[i % bn];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&sa, out)?, Op::Add(a, b), needs)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::Contract(alloc::format!(
                "mul: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let out: Vec<f32> = self.nodes[a.0].value.data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, out)?, Op::Scale(a, factor), needs)
    }

    /// Matrix product. `a` is `[batch.., m, k]`. `b` is either a shared
    /// `[k, n]` matrix or carries the same batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(CoreError::Contract("matmul: operands must be >= 2-D".into()));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2 && sa.len() > 2;
        if k != kb || (!shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(CoreError::Contract(alloc::format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa,
                sb
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared_b { 0 } else { bi * k * n };
            matmul_mk_kn(
                &ad[a_off..a_off + m * k],
                &bd[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
                self.precise,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        let needs = self.needs(a);
        self.push(t, Op::Reshape(a), needs)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(CoreError::Contract("permute: rank mismatch".into()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(CoreError::Contract("permute: invalid permutation".into()));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.nodes[a.0].value.data(), &shape, perm);
        let needs = self.needs(a);
        self.push(Tensor::new(&out_shape, data)?, Op::Permute(a, perm.to_vec()), needs)
    }

    /// Concatenate along `axis`; shapes must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CoreError::Contract("concat: no inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::Contract("concat: axis out of range".into()));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(CoreError::Contract("concat: incompatible shapes".into()));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0;
        for &v in inputs {
            let s_axis = self.shape(v)[axis];
            let data = self.nodes[v.0].value.data();
            for o in 0..outer {
                let src = &data[o * s_axis * inner..(o + 1) * s_axis * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + s_axis * inner].copy_from_slice(src);
            }
            offset += s_axis;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(&shape, out)?, Op::Concat(inputs.to_vec(), axis), needs)
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(CoreError::Contract(alloc::format!(
                "slice: [{start}..{}] out of axis {axis} extent {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.nodes[a.0].value.data();
        let mut out = vec![0.0f32; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src_start..src_start + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let needs = self.needs(a);
        self.push(
            Tensor::new(&out_shape, out)?,
            Op::Slice { input: a, axis, start },
            needs,
        )
    }

    /// Select rows of a 2-D `[rows, d]` table; output is `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(CoreError::Contract("gather: table must be 2-D".into()));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CoreError::Contract(alloc::format!(
                "gather: index {bad} out of {rows} rows"
            )));
        }
        let data = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::new(&[indices.len(), d], out)?,
            Op::Gather(table, indices.to_vec()),
            needs,
        )
    }

    /// Tile `a` `times` times along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(data.len() * times);
        for _ in 0..times {
            out.extend_from_slice(data);
        }
        let mut out_shape = vec![times];
        out_shape.extend_from_slice(&shape);
        let needs = self.needs(a);
        self.push(Tensor::new(&out_shape, out)?, Op::Repeat(a, times), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(CoreError::Contract("softmax: scalar input".into()));
        }
        let cols = shape[shape.len() - 1];
        let data = self.nodes[a.0].value.data();
        let mut out = vec![0.0f32; data.len()];
        for (row_in, row_out) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            softmax_row(row_in, row_out, self.precise);
        }
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(a), needs)
    }

    /// Layer normalization over the last axis with affine scale/shift.
    /// `gamma` and `beta` are 1-D of the last-axis extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            CoreError::Contract("layer_norm: scalar input".into())
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CoreError::Contract("layer_norm: affine params must be [d]".into()));
        }
        let data = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![0.0f32; data.len()];
        for (row, row_out) in data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, rstd) = row_stats(row, eps, self.precise);
            for i in 0..d {
                row_out[i] = (row[i] - mean) * rstd * gd[i] + bd[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            needs,
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f32> = self.nodes[a.0].value.data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, out)?, Op::Gelu(a), needs)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data();
        let n = data.len().max(1);
        let m = if self.precise {
            (data.iter().map(|&x| x as f64).sum::<f64>() / n as f64) as f32
        } else {
            data.iter().sum::<f32>() / n as f32
        };
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), needs)
    }

    /// Mean cross-entropy of `[rows, classes]` logits against integer
    /// targets, computed as a fused log-softmax + NLL.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(CoreError::Contract("cross_entropy: logits must be 2-D".into()));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(CoreError::Contract(alloc::format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(CoreError::Contract(alloc::format!(
                "cross_entropy: target {bad} out of {classes} classes"
            )));
        }
        let data = self.nodes[logits.0].value.data();
        let mut total = 0.0f64;
        for (row, &t) in data.chunks_exact(classes).zip(targets) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            let lse: f64 = row.iter().map(|&x| libm::exp((x - max) as f64)).sum();
            total += libm::log(lse) + max as f64 - row[t] as f64;
        }
        let loss = (total / rows as f64) as f32;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec()),
            needs,
        )
    }

    // -----------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------

    /// Populate gradients of `loss` (a scalar) w.r.t. every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::Contract(alloc::format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op) {
        let g = self.nodes[i].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, &g);
                if self.needs(*b) {
                    let bn = self.nodes[b.0].value.numel();
                    let mut gb = vec![0.0f32; bn];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % bn] += gv;
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let ga: Vec<f32> = g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate(*a, &ga);
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let gb: Vec<f32> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    self.accumulate(*b, &gb);
                }
            }
            Op::Scale(a, factor) => {
                let ga: Vec<f32> = g.iter().map(|gv| gv * factor).collect();
                self.accumulate(*a, &ga);
            }
            Op::MatMul(a, b) => self.backprop_matmul(i, *a, *b, &g),
            Op::Reshape(a) => self.accumulate(*a, &g),
            Op::Permute(a, perm) => {
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (axis, &p) in perm.iter().enumerate() {
                    inv[p] = axis;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let ga = permute_data(&g, &out_shape, &inv);
                self.accumulate(*a, &ga);
            }
            Op::Concat(inputs, axis) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let s_axis = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut gv = vec![0.0f32; outer * s_axis * inner];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            gv[o * s_axis * inner..(o + 1) * s_axis * inner]
                                .copy_from_slice(&g[src_start..src_start + s_axis * inner]);
                        }
                        self.accumulate(v, &gv);
                    }
                    offset += s_axis;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.needs(*input) {
                    let in_shape = self.shape(*input).to_vec();
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let len = out_shape[*axis];
                    let mut gi = vec![0.0f32; self.nodes[input.0].value.numel()];
                    for o in 0..outer {
                        let dst_start = (o * in_shape[*axis] + start) * inner;
                        gi[dst_start..dst_start + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(*input, &gi);
                }
            }
            Op::Gather(table, indices) => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0f32; self.nodes[table.0].value.numel()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for c in 0..d {
                            gt[idx * d + c] += g[row * d + c];
                        }
                    }
                    self.accumulate(*table, &gt);
                }
            }
            Op::Repeat(a, times) => {
                let an = self.nodes[a.0].value.numel();
                let mut ga = vec![0.0f32; an];
                for rep in 0..*times {
                    for (j, gv) in g[rep * an..(rep + 1) * an].iter().enumerate() {
                        ga[j] += gv;
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Softmax(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let shape = self.nodes[i].value.shape();
                let cols = shape[shape.len() - 1];
                let mut ga = vec![0.0f32; out.len()];
                for ((p_row, g_row), ga_row) in out
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(ga.chunks_exact_mut(cols))
                {
                    let dot: f32 = p_row.iter().zip(g_row).map(|(p, gv)| p * gv).sum();
                    for c in 0..cols {
                        ga_row[c] = p_row[c] * (g_row[c] - dot);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backprop_layer_norm(*x, *gamma, *beta, *eps, &g);
            }
            Op::Gelu(a) => {
                let ad = self.nodes[a.0].value.data();
                let ga: Vec<f32> = ad.iter().zip(&g).map(|(&x, gv)| gv * gelu_grad(x)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel().max(1);
                let per = g[0] / n as f32;
                let ga = vec![per; self.nodes[a.0].value.numel()];
                self.accumulate(*a, &ga);
            }
            Op::CrossEntropy(logits, targets) => {
                let data = self.nodes[logits.0].value.data();
                let classes = self.shape(*logits)[1];
                let rows = targets.len();
                let scale = g[0] / rows as f32;
                let mut gl = vec![0.0f32; data.len()];
                for ((row, &t), g_row) in data
                    .chunks_exact(classes)
                    .zip(targets)
                    .zip(gl.chunks_exact_mut(classes))
                {
                    softmax_row(row, g_row, self.precise);
                    for v in g_row.iter_mut() {
                        *v *= scale;
                    }
                    g_row[t] -= scale;
                }
                self.accumulate(*logits, &gl);
            }
        }
    }

    fn backprop_matmul(&mut self, i: usize, a: Var, b: Var, g: &[f32]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2 && sa.len() > 2;
        let _ = i;
        if self.needs(a) {
            // dA = dC * B^T, per batch.
            let bd = self.nodes[b.0].value.data().to_vec();
            let mut ga = vec![0.0f32; batch * m * k];
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                matmul_mn_kn_t(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &bd[b_off..b_off + k * n],
                    m,
                    n,
                    k,
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                    self.precise,
                );
            }
            self.accumulate(a, &ga);
        }
        if self.needs(b) {
            // dB = A^T * dC; shared B accumulates over batches.
            let ad = self.nodes[a.0].value.data().to_vec();
            let gb_len = if shared_b { k * n } else { batch * k * n };
            let mut gb = vec![0.0f32; gb_len];
            for bi in 0..batch {
                let out_off = if shared_b { 0 } else { bi * k * n };
                matmul_mk_t_mn(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                    &mut gb[out_off..out_off + k * n],
                );
            }
            self.accumulate(b, &gb);
        }
    }

    fn backprop_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32, g: &[f32]) {
        let shape = self.shape(x).to_vec();
        let d = shape[shape.len() - 1];
        let xd = self.nodes[x.0].value.data().to_vec();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let needs_x = self.needs(x);
        let needs_gamma = self.needs(gamma);
        let needs_beta = self.needs(beta);
        let mut gx = if needs_x { vec![0.0f32; xd.len()] } else { Vec::new() };
        let mut ggamma = vec![0.0f32; d];
        let mut gbeta = vec![0.0f32; d];
        for (row_idx, (row, g_row)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
            let (mean, rstd) = row_stats(row, eps, self.precise);
            // xhat_i = (x_i - mean) * rstd
            if needs_gamma || needs_beta {
                for c in 0..d {
                    let xhat = (row[c] - mean) * rstd;
                    ggamma[c] += g_row[c] * xhat;
                    gbeta[c] += g_row[c];
                }
            }
            if needs_x {
                let mut sum_gg = 0.0f32;
                let mut sum_ggx = 0.0f32;
                for c in 0..d {
                    let gg = g_row[c] * gd[c];
                    let xhat = (row[c] - mean) * rstd;
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                }
                let inv_d = 1.0 / d as f32;
                let gx_row = &mut gx[row_idx * d..(row_idx + 1) * d];
                for c in 0..d {
                    let gg = g_row[c] * gd[c];
                    let xhat = (row[c] - mean) * rstd;
                    gx_row[c] = rstd * (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx);
                }
            }
        }
        if needs_x {
            self.accumulate(x, &gx);
        }
        if needs_gamma {
            self.accumulate(gamma, &ggamma);
        }
        if needs_beta {
            self.accumulate(beta, &gbeta);
        }
    }
}

// ---------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------

/// C += A[m,k] * B[k,n], row-major, ikj order.
fn matmul_mk_kn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32], precise: bool) {
    if precise {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = acc as f32;
            }
        }
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A[m,n] * B[k,n]^T -> [m,k] (dot products of rows).
fn matmul_mn_kn_t(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, c: &mut [f32], precise: bool) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            c[i * k + j] += if precise {
                a_row
                    .iter()
                    .zip(b_row)
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum::<f64>() as f32
            } else {
                a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f32>()
            };
        }
    }
}

/// C += A[m,k]^T * G[m,n] -> [k,n].
fn matmul_mk_t_mn(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0f32; data.len()];
    let rank = shape.len();
    if rank == 0 {
        out.copy_from_slice(data);
        return out;
    }
    // Walk output linearly, mapping each output index to its input offset.
    let mut idx = vec![0usize; rank];
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += perm_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= perm_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

fn softmax_row(row: &[f32], out: &mut [f32], precise: bool) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
    if precise {
        let mut sum = 0.0f64;
        for (o, &x) in out.iter_mut().zip(row) {
            let e = libm::exp((x - max) as f64);
            *o = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for o in out.iter_mut() {
            *o *= inv;
        }
    } else {
        let mut sum = 0.0f32;
        for (o, &x) in out.iter_mut().zip(row) {
            let e = libm::expf(x - max);
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
}

fn row_stats(row: &[f32], eps: f32, precise: bool) -> (f32, f32) {
    let d = row.len() as f64;
    if precise {
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d;
        let var = row.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>() / d;
        (mean as f32, (1.0 / libm::sqrt(var + eps as f64)) as f32)
    } else {
        let mean = row.iter().sum::<f32>() / row.len() as f32;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / row.len() as f32;
        (mean, 1.0 / libm::sqrtf(var + eps))
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + libm::tanhf(u))
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanhf(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------

/// Central-difference gradient estimate of a scalar function, element by
/// element: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// This is the independent oracle used to cross-check `backward`; it only
/// ever evaluates `f`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    let mut grad = vec![0.0f32; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = ((plus as f64 - minus as f64) / (2.0 * h as f64)) as f32;
    }
    Tensor::new(x.shape(), grad)
}
