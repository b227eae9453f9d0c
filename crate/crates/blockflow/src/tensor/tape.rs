//! Operation recording and reverse-mode gradient accumulation.

use std::collections::HashMap;
use std::sync::Arc;

use super::ops;
use super::{fresh_tape_id, NodeId, NodeRef, Tensor};
use crate::error::{Error, Result};

/// How the right-hand operand lines up with the left in an elementwise op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Equal,
    ScalarLhs,
    ScalarRhs,
    /// rhs shape equals the trailing axes of lhs, e.g. `[t, h] op [h]`.
    TrailingRhs,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Equal);
    }
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(Broadcast::ScalarRhs);
    }
    if an == 1 {
        return Ok(Broadcast::ScalarLhs);
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Ok(Broadcast::TrailingRhs);
    }
    Err(Error::dim(format!(
        "incompatible shapes for elementwise op: {a:?} vs {b:?}"
    )))
}

#[derive(Debug, Clone, Copy)]
enum Arith {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Elementwise {
        arith: Arith,
        bcast: Broadcast,
    },
    Scale(f32),
    Silu,
    Softplus,
    Softmax {
        axis: usize,
    },
    LayerNorm {
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Sum,
    Mean,
    Transpose,
    Reshape,
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    RotatePairs,
}

/// A captured input: value snapshot plus, when the input was itself recorded
/// or is a grad-enabled leaf, the node it resolves to.
struct Src {
    node: Option<NodeId>,
    data: Arc<Vec<f32>>,
    shape: Vec<usize>,
}

struct Node {
    op: Op,
    srcs: Vec<Src>,
    out_shape: Vec<usize>,
    out_data: Arc<Vec<f32>>,
}

/// Wengert list recording ops for one forward pass.
///
/// A tape is single-owner: ops take `&mut self` and `backward` freezes it.
/// A non-recording tape executes the same arithmetic without building nodes,
/// which is how sampling and detached rollout steps run.
pub struct Tape {
    id: u64,
    recording: bool,
    frozen: bool,
    nodes: Vec<Node>,
    leaf_by_storage: HashMap<usize, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_tape_id(),
            recording: true,
            frozen: false,
            nodes: Vec::new(),
            leaf_by_storage: HashMap::new(),
        }
    }

    /// A tape that executes ops without recording anything.
    pub fn no_grad() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes that are not leaves, i.e. recorded operations.
    pub fn num_op_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn resolve_src(&mut self, t: &Tensor) -> Result<Src> {
        let node = match t.node() {
            Some(nref) => {
                if nref.tape_id != self.id {
                    return Err(Error::contract(
                        "tensor belongs to a different tape".to_string(),
                    ));
                }
                Some(nref.node)
            }
            None if t.grad_enabled() => {
                // Auto-register grad-enabled leaves, deduplicated by storage
                // identity so one parameter accumulates into one slot.
                let key = t.storage_id();
                let id = match self.leaf_by_storage.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = self.nodes.len();
                        self.nodes.push(Node {
                            op: Op::Leaf,
                            srcs: Vec::new(),
                            out_shape: t.shape().to_vec(),
                            out_data: t.storage(),
                        });
                        self.leaf_by_storage.insert(key, id);
                        id
                    }
                };
                Some(id)
            }
            None => None,
        };
        Ok(Src {
            node,
            data: t.storage(),
            shape: t.shape().to_vec(),
        })
    }

    fn finish(
        &mut self,
        op: Op,
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Vec<f32>,
    ) -> Result<Tensor> {
        let grad_any = inputs.iter().any(|t| t.grad_enabled());
        let data = Arc::new(out_data);
        if self.recording && grad_any {
            if self.frozen {
                return Err(Error::contract(
                    "cannot record ops on a frozen tape".to_string(),
                ));
            }
            let srcs = inputs
                .iter()
                .map(|t| self.resolve_src(t))
                .collect::<Result<Vec<_>>>()?;
            let id = self.nodes.len();
            self.nodes.push(Node {
                op,
                srcs,
                out_shape: out_shape.clone(),
                out_data: Arc::clone(&data),
            });
            Ok(Tensor::with_node(
                out_shape,
                data,
                true,
                Some(NodeRef {
                    tape_id: self.id,
                    node: id,
                }),
            ))
        } else {
            Ok(Tensor::with_node(out_shape, data, false, None))
        }
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects 2-d operands, got {ash:?} x {bsh:?}"
            )));
        }
        let (m, k) = (ash[0], ash[1]);
        let (k2, n) = (bsh[0], bsh[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {ash:?} x {bsh:?}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        ops::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
        self.finish(Op::Matmul, &[a, b], vec![m, n], out)
    }

    fn elementwise(&mut self, arith: Arith, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bcast = broadcast_kind(a.shape(), b.shape())?;
        // ScalarLhs is normalized by materializing the scalar across the
        // rhs shape so backward only handles three layouts.
        let (out_shape, out) = {
            let (ad, bd) = (a.data(), b.data());
            let apply = |x: f32, y: f32| match arith {
                Arith::Add => x + y,
                Arith::Sub => x - y,
                Arith::Mul => x * y,
            };
            match bcast {
                Broadcast::Equal => (
                    a.shape().to_vec(),
                    ad.iter().zip(bd).map(|(&x, &y)| apply(x, y)).collect(),
                ),
                Broadcast::ScalarRhs => {
                    let y = bd[0];
                    (a.shape().to_vec(), ad.iter().map(|&x| apply(x, y)).collect())
                }
                Broadcast::ScalarLhs => {
                    let x = ad[0];
                    (b.shape().to_vec(), bd.iter().map(|&y| apply(x, y)).collect())
                }
                Broadcast::TrailingRhs => {
                    let bn = bd.len();
                    (
                        a.shape().to_vec(),
                        ad.iter()
                            .enumerate()
                            .map(|(i, &x)| apply(x, bd[i % bn]))
                            .collect(),
                    )
                }
            }
        };
        self.finish(Op::Elementwise { arith, bcast }, &[a, b], out_shape, out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Arith::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Arith::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Arith::Mul, a, b)
    }

    pub fn scale(&mut self, a: &Tensor, s: f32) -> Result<Tensor> {
        let out = a.data().iter().map(|&x| x * s).collect();
        self.finish(Op::Scale(s), &[a], a.shape().to_vec(), out)
    }

    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = a.data().iter().map(|&x| ops::silu(x)).collect();
        self.finish(Op::Silu, &[a], a.shape().to_vec(), out)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = a.data().iter().map(|&x| ops::softplus(x)).collect();
        self.finish(Op::Softplus, &[a], a.shape().to_vec(), out)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.shape().len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {:?}",
                a.shape()
            )));
        }
        let mut out = vec![0.0f32; a.numel()];
        let data = a.data();
        ops::for_each_lane(a.shape(), axis, |index, len| {
            let mut max = f32::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[index(j)]);
            }
            let mut denom = 0.0f32;
            for j in 0..len {
                let e = (data[index(j)] - max).exp();
                out[index(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[index(j)] /= denom;
            }
        });
        self.finish(Op::Softmax { axis }, &[a], a.shape().to_vec(), out)
    }

    /// Layer normalization over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm on 0-d tensor".to_string()))?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::dim(format!(
                "layer_norm gain/bias must have shape [{n}], got {:?}/{:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = x.numel() / n;
        let data = x.data();
        let (gd, bd) = (gain.data(), bias.data());
        let mut out = vec![0.0f32; x.numel()];
        let mut means = vec![0.0f32; rows];
        let mut inv_stds = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        self.finish(
            Op::LayerNorm {
                mean: means,
                inv_std: inv_stds,
            },
            &[x, gain, bias],
            x.shape().to_vec(),
            out,
        )
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f32 = a.data().iter().sum();
        self.finish(Op::Sum, &[a], vec![1], vec![s])
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f32 = a.data().iter().sum();
        self.finish(Op::Mean, &[a], vec![1], vec![s / a.numel() as f32])
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(Error::dim(format!("transpose expects 2-d, got {sh:?}")));
        }
        let (m, n) = (sh[0], sh[1]);
        let data = a.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        self.finish(Op::Transpose, &[a], vec![n, m], out)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                a.shape(),
                shape
            )));
        }
        self.finish(Op::Reshape, &[a], shape, a.data().to_vec())
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let sh = a.shape();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(Error::dim(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {sh:?}"
            )));
        }
        let mut out_shape = sh.to_vec();
        out_shape[axis] = len;
        let inner: usize = sh[axis + 1..].iter().product();
        let outer: usize = sh[..axis].iter().product();
        let src_stride = sh[axis] * inner;
        let dst_stride = len * inner;
        let data = a.data();
        let mut out = vec![0.0f32; outer * dst_stride];
        for o in 0..outer {
            let src = &data[o * src_stride + start * inner..o * src_stride + (start + len) * inner];
            out[o * dst_stride..(o + 1) * dst_stride].copy_from_slice(src);
        }
        self.finish(Op::Narrow { axis, start, len }, &[a], out_shape, out)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors".to_string()));
        }
        let base = parts[0].shape();
        if axis >= base.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let sh = p.shape();
            if sh.len() != base.len()
                || sh[..axis] != base[..axis]
                || sh[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim(format!(
                    "concat shape mismatch: {sh:?} vs {base:?} on axis {axis}"
                )));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = base.to_vec();
        out_shape[axis] = axis_total;
        let inner: usize = base[axis + 1..].iter().product();
        let outer: usize = base[..axis].iter().product();
        let dst_stride = axis_total * inner;
        let mut out = vec![0.0f32; outer * dst_stride];
        let mut offset = 0;
        for p in parts {
            let plen = p.shape()[axis];
            let src_stride = plen * inner;
            let data = p.data();
            for o in 0..outer {
                out[o * dst_stride + offset * inner..o * dst_stride + (offset + plen) * inner]
                    .copy_from_slice(&data[o * src_stride..(o + 1) * src_stride]);
            }
            offset += plen;
        }
        self.finish(Op::Concat { axis }, parts, out_shape, out)
    }

    /// Rotates adjacent pairs along the last axis:
    /// `y[2i] = -x[2i+1], y[2i+1] = x[2i]`. Building block for rotary
    /// position embedding.
    pub fn rotate_pairs(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = *a
            .shape()
            .last()
            .ok_or_else(|| Error::dim("rotate_pairs on 0-d tensor".to_string()))?;
        if n % 2 != 0 {
            return Err(Error::dim(format!(
                "rotate_pairs needs an even last axis, got {n}"
            )));
        }
        let data = a.data();
        let mut out = vec![0.0f32; a.numel()];
        for base in (0..a.numel()).step_by(2) {
            out[base] = -data[base + 1];
            out[base + 1] = data[base];
        }
        self.finish(Op::RotatePairs, &[a], a.shape().to_vec(), out)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates gradients for every grad-enabled leaf reachable from a
    /// scalar root, then freezes the tape. A second call is rejected.
    pub fn backward(&mut self, root: &Tensor) -> Result<Gradients> {
        if self.frozen {
            return Err(Error::contract(
                "backward already ran on this tape".to_string(),
            ));
        }
        if root.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let root_id = match root.node() {
            Some(nref) if nref.tape_id == self.id => nref.node,
            Some(_) => {
                return Err(Error::contract(
                    "backward root belongs to a different tape".to_string(),
                ))
            }
            None => {
                return Err(Error::contract(
                    "backward root was not recorded on this tape".to_string(),
                ))
            }
        };
        self.frozen = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g); // keep leaf gradients
                continue;
            }
            let contributions = self.vjp(id, &g);
            for (src_idx, contrib) in contributions {
                let target = self.nodes[id].srcs[src_idx].node;
                if let Some(t) = target {
                    match &mut grads[t] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }

        let mut by_storage = HashMap::new();
        for (&storage, &leaf_id) in &self.leaf_by_storage {
            let g = grads[leaf_id]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[leaf_id].out_data.len()]);
            by_storage.insert(storage, g);
        }
        Ok(Gradients { by_storage })
    }

    /// Vector-Jacobian products: returns (src index, gradient) for every
    /// source of node `id` that resolves to a recorded node.
    fn vjp(&self, id: usize, g: &[f32]) -> Vec<(usize, Vec<f32>)> {
        let node = &self.nodes[id];
        let needs: Vec<bool> = node.srcs.iter().map(|s| s.node.is_some()).collect();
        let mut out: Vec<(usize, Vec<f32>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let a = &node.srcs[0];
                let b = &node.srcs[1];
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                if needs[0] {
                    let mut da = vec![0.0f32; m * k];
                    ops::matmul_nt(g, &b.data, &mut da, m, n, k);
                    out.push((0, da));
                }
                if needs[1] {
                    let mut db = vec![0.0f32; k * n];
                    ops::matmul_tn(&a.data, g, &mut db, m, k, n);
                    out.push((1, db));
                }
            }
            Op::Elementwise { arith, bcast } => {
                let a = &node.srcs[0];
                let b = &node.srcs[1];
                let reduce_rhs = |full: &[f32]| -> Vec<f32> {
                    match bcast {
                        Broadcast::Equal => full.to_vec(),
                        Broadcast::ScalarRhs => vec![full.iter().sum()],
                        Broadcast::ScalarLhs => full.to_vec(),
                        Broadcast::TrailingRhs => {
                            let bn = b.data.len();
                            let mut acc = vec![0.0f32; bn];
                            for (i, &v) in full.iter().enumerate() {
                                acc[i % bn] += v;
                            }
                            acc
                        }
                    }
                };
                let reduce_lhs = |full: &[f32]| -> Vec<f32> {
                    match bcast {
                        Broadcast::ScalarLhs => vec![full.iter().sum()],
                        _ => full.to_vec(),
                    }
                };
                match arith {
                    Arith::Add => {
                        if needs[0] {
                            out.push((0, reduce_lhs(g)));
                        }
                        if needs[1] {
                            out.push((1, reduce_rhs(g)));
                        }
                    }
                    Arith::Sub => {
                        if needs[0] {
                            out.push((0, reduce_lhs(g)));
                        }
                        if needs[1] {
                            let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                            out.push((1, reduce_rhs(&neg)));
                        }
                    }
                    Arith::Mul => {
                        let expand_b = |i: usize| -> f32 {
                            match bcast {
                                Broadcast::Equal => b.data[i],
                                Broadcast::ScalarRhs => b.data[0],
                                Broadcast::ScalarLhs => b.data[i],
                                Broadcast::TrailingRhs => b.data[i % b.data.len()],
                            }
                        };
                        let expand_a = |i: usize| -> f32 {
                            match bcast {
                                Broadcast::ScalarLhs => a.data[0],
                                _ => a.data[i],
                            }
                        };
                        if needs[0] {
                            let da: Vec<f32> =
                                g.iter().enumerate().map(|(i, &v)| v * expand_b(i)).collect();
                            out.push((0, reduce_lhs(&da)));
                        }
                        if needs[1] {
                            let db: Vec<f32> =
                                g.iter().enumerate().map(|(i, &v)| v * expand_a(i)).collect();
                            out.push((1, reduce_rhs(&db)));
                        }
                    }
                }
            }
            Op::Scale(s) => {
                if needs[0] {
                    out.push((0, g.iter().map(|&v| v * s).collect()));
                }
            }
            Op::Silu => {
                if needs[0] {
                    let x = &node.srcs[0].data;
                    let dx = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| {
                            let s = ops::sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    out.push((0, dx));
                }
            }
            Op::Softplus => {
                if needs[0] {
                    let x = &node.srcs[0].data;
                    let dx = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| gv * ops::sigmoid(xv))
                        .collect();
                    out.push((0, dx));
                }
            }
            Op::Softmax { axis } => {
                if needs[0] {
                    let y = &node.out_data;
                    let mut dx = vec![0.0f32; y.len()];
                    ops::for_each_lane(&node.out_shape, *axis, |index, len| {
                        let mut dot = 0.0f32;
                        for j in 0..len {
                            dot += g[index(j)] * y[index(j)];
                        }
                        for j in 0..len {
                            dx[index(j)] = y[index(j)] * (g[index(j)] - dot);
                        }
                    });
                    out.push((0, dx));
                }
            }
            Op::LayerNorm { mean, inv_std, .. } => {
                let x = &node.srcs[0];
                let gain = &node.srcs[1].data;
                let n = *x.shape.last().unwrap();
                let rows = x.data.len() / n;
                let mut dx = vec![0.0f32; x.data.len()];
                let mut dgain = vec![0.0f32; n];
                let mut dbias = vec![0.0f32; n];
                for r in 0..rows {
                    let xr = &x.data[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mu, inv) = (mean[r], inv_std[r]);
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for j in 0..n {
                        let xhat = (xr[j] - mu) * inv;
                        let dxhat = gr[j] * gain[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    if needs[0] {
                        for j in 0..n {
                            let xhat = (xr[j] - mu) * inv;
                            let dxhat = gr[j] * gain[j];
                            dx[r * n + j] = inv
                                * (dxhat
                                    - sum_dxhat / n as f32
                                    - xhat * sum_dxhat_xhat / n as f32);
                        }
                    }
                }
                if needs[0] {
                    out.push((0, dx));
                }
                if needs[1] {
                    out.push((1, dgain));
                }
                if needs[2] {
                    out.push((2, dbias));
                }
            }
            Op::Sum => {
                if needs[0] {
                    out.push((0, vec![g[0]; node.srcs[0].data.len()]));
                }
            }
            Op::Mean => {
                if needs[0] {
                    let n = node.srcs[0].data.len();
                    out.push((0, vec![g[0] / n as f32; n]));
                }
            }
            Op::Transpose => {
                if needs[0] {
                    let (m, n) = (node.srcs[0].shape[0], node.srcs[0].shape[1]);
                    // g has shape [n, m]; gradient is its transpose.
                    let mut dx = vec![0.0f32; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = g[i * m + j];
                        }
                    }
                    out.push((0, dx));
                }
            }
            Op::Reshape => {
                if needs[0] {
                    out.push((0, g.to_vec()));
                }
            }
            Op::Narrow { axis, start, len } => {
                if needs[0] {
                    let sh = &node.srcs[0].shape;
                    let inner: usize = sh[*axis + 1..].iter().product();
                    let outer: usize = sh[..*axis].iter().product();
                    let src_stride = sh[*axis] * inner;
                    let dst_stride = len * inner;
                    let mut dx = vec![0.0f32; node.srcs[0].data.len()];
                    for o in 0..outer {
                        dx[o * src_stride + start * inner..o * src_stride + (start + len) * inner]
                            .copy_from_slice(&g[o * dst_stride..(o + 1) * dst_stride]);
                    }
                    out.push((0, dx));
                }
            }
            Op::Concat { axis } => {
                let out_shape = &node.out_shape;
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let dst_stride = out_shape[*axis] * inner;
                let mut offset = 0;
                for (idx, src) in node.srcs.iter().enumerate() {
                    let plen = src.shape[*axis];
                    if needs[idx] {
                        let src_stride = plen * inner;
                        let mut dx = vec![0.0f32; src.data.len()];
                        for o in 0..outer {
                            dx[o * src_stride..(o + 1) * src_stride].copy_from_slice(
                                &g[o * dst_stride + offset * inner
                                    ..o * dst_stride + (offset + plen) * inner],
                            );
                        }
                        out.push((idx, dx));
                    }
                    offset += plen;
                }
            }
            Op::RotatePairs => {
                if needs[0] {
                    let mut dx = vec![0.0f32; g.len()];
                    for base in (0..g.len()).step_by(2) {
                        dx[base] = g[base + 1];
                        dx[base + 1] = -g[base];
                    }
                    out.push((0, dx));
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradient map produced by [`Tape::backward`], keyed by leaf storage
/// identity. Query it with the same tensors that fed the forward pass.
pub struct Gradients {
    by_storage: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.by_storage.get(&t.storage_id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.by_storage.contains_key(&t.storage_id())
    }

    pub fn len(&self) -> usize {
        self.by_storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_storage.is_empty()
    }
}
