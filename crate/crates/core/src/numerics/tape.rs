//! Reverse-mode gradient tape.
//!
//! Ops are coarse (a whole linear map, a whole attention block) and are
//! appended in execution order. Backward walks the node list from the end, so
//! the visit order is exactly the reverse of forward execution.

use std::collections::BTreeMap;

use super::kernels::{self, LayerNormCache, LevelShape, MsdaDims, SampleStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: LayerNormCache },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId, group: usize },
    Attention { qkv: NodeId, heads: usize, probs: Vec<f64> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    PadCols { x: NodeId, offset: usize },
    Msda { value: NodeId, offsets: NodeId, weights: NodeId, refs: NodeId, levels: Vec<LevelShape>, dims: MsdaDims },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::PadCols { .. } => "pad_cols",
            Op::Msda { .. } => "msda_sample",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
    sample_stats: SampleStats,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { params: None, param_nodes: Vec::new(), nodes: Vec::new(), sample_stats: SampleStats::default() }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
            sample_stats: SampleStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulated deformable-sampling work since the tape was created.
    pub fn sample_stats(&self) -> SampleStats {
        self.sample_stats
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params.expect("param node without store").tensors[*p],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        self.nodes.push(Node { op, value: Some(value) });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records a constant or differentiable input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Input, value: Some(value) });
        NodeId(self.nodes.len() - 1)
    }

    /// Records the named parameter (once per tape).
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let store = self.params.ok_or_else(|| Error::Config("tape has no parameter store".into()))?;
        let idx = store.id(name)?;
        if let Some(id) = self.param_nodes[idx] {
            return Ok(id);
        }
        self.nodes.push(Node { op: Op::Param(idx), value: None });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(id);
        Ok(id)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d_in) = xv.dims2("linear")?;
        let (w_in, d_out) = wv.dims2("linear")?;
        if w_in != d_in {
            return Err(Error::shape("linear", format!("x has {d_in} columns but W has {w_in} rows")));
        }
        if bv.shape() != [d_out] {
            return Err(Error::shape("linear", format!("bias shape {:?} but W has {d_out} columns", bv.shape())));
        }
        let y = kernels::linear_forward(xv.data(), wv.data(), bv.data(), n, d_in, d_out);
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![n, d_out], y)?)
    }

    /// Linear map with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn dense(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.linear(x, w, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(Op::Add { a, b }, out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.scale(c);
        self.push(Op::Scale { x, c }, out)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", format!("feature dim {d}, gamma {:?}, beta {:?}", gv.shape(), bv.shape())));
        }
        let (y, cache) = kernels::layer_norm_forward(xv.data(), gv.data(), bv.data(), eps);
        let shape = xv.shape().to_vec();
        self.push(Op::LayerNorm { x, gamma, beta, cache }, Tensor::new(shape, y)?)
    }

    /// Layer norm with parameters `{prefix}.g` and `{prefix}.b`.
    pub fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.layer_norm(x, g, b, 1e-5)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| kernels::gelu(v)).collect())?;
        self.push(Op::Gelu { x }, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| kernels::sigmoid(v)).collect())?;
        self.push(Op::Sigmoid { x }, out)
    }

    /// Softmax over consecutive groups of `group` trailing values.
    pub fn softmax(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || xv.last_dim() % group != 0 {
            return Err(Error::shape("softmax", format!("group {group} does not tile trailing axis {}", xv.last_dim())));
        }
        let y = kernels::softmax_forward(xv.data(), group);
        let shape = xv.shape().to_vec();
        self.push(Op::Softmax { x, group }, Tensor::new(shape, y)?)
    }

    /// Multi-head attention on a fused `[n, 3d]` projection; returns `[n, d]`.
    pub fn attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let v = self.value(qkv);
        let (n, c3) = v.dims2("attention")?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::Config(format!("width {} not divisible into {heads} heads", c3 / 3)));
        }
        let d = c3 / 3;
        let (out, probs) = kernels::attention_forward(v.data(), n, d, heads);
        self.push(Op::Attention { qkv, heads, probs }, Tensor::new(vec![n, d], out)?)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, Tensor::new(vec![rows, cols], data)?)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (r, c) = v.dims2("slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        self.push(Op::SliceRows { x, start }, out)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        let (r, c) = v.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(v.row(i));
        }
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, Tensor::new(vec![ids.len(), c], data)?)
    }

    /// Embeds `x: [n, c]` into columns `offset..offset+c` of a zero `[n, total]` block.
    pub fn pad_cols(&mut self, x: NodeId, total: usize, offset: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (n, c) = v.dims2("pad_cols")?;
        if offset + c > total {
            return Err(Error::shape("pad_cols", format!("{c} columns at {offset} exceed {total}")));
        }
        let mut data = vec![0.0; n * total];
        for i in 0..n {
            data[i * total + offset..i * total + offset + c].copy_from_slice(v.row(i));
        }
        self.push(Op::PadCols { x, offset }, Tensor::new(vec![n, total], data)?)
    }

    /// Deformable sampling over a flattened pyramid `value: [Σ H_l·W_l, C]`.
    pub fn msda_sample(
        &mut self,
        value: NodeId,
        levels: &[LevelShape],
        offsets: NodeId,
        weights: NodeId,
        refs: NodeId,
        heads: usize,
        points: usize,
    ) -> Result<NodeId> {
        let (n_val, channels) = self.value(value).dims2("msda")?;
        let (queries, two) = self.value(refs).dims2("msda")?;
        let total: usize = levels.iter().map(|l| l.height * l.width).sum();
        let slots = heads * levels.len() * points;
        if two != 2 || n_val != total || heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "msda: value rows {n_val} vs pyramid {total}, refs width {two}, channels {channels}, heads {heads}"
            )));
        }
        if self.value(offsets).shape() != [queries, slots * 2] || self.value(weights).shape() != [queries, slots] {
            return Err(Error::shape(
                "msda",
                format!(
                    "offsets {:?} / weights {:?}, expected [{queries}, {}] / [{queries}, {slots}]",
                    self.value(offsets).shape(),
                    self.value(weights).shape(),
                    slots * 2
                ),
            ));
        }
        let dims = MsdaDims { queries, channels, heads, points };
        let (out, stats) = kernels::msda_sample_forward(
            self.value(value).data(),
            levels,
            self.value(offsets).data(),
            self.value(weights).data(),
            self.value(refs).data(),
            dims,
        );
        self.sample_stats.samples += stats.samples;
        self.sample_stats.pixel_reads += stats.pixel_reads;
        self.push(
            Op::Msda { value, offsets, weights, refs, levels: levels.to_vec(), dims },
            Tensor::new(vec![queries, channels], out)?,
        )
    }

    /// Reverse pass seeded with cotangents for one or more nodes.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.shape() != self.value(*id).shape() {
                return Err(Error::shape("backward", format!("seed {:?} vs value {:?}", g.shape(), self.value(*id).shape())));
            }
            accumulate(&mut grads[id.0], g.clone());
        }
        let mut visited = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data);
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d_in) = xv.dims2("linear")?;
                let d_out = wv.shape()[1];
                let (dx, dw, db) = kernels::linear_backward(xv.data(), wv.data(), g.data(), n, d_in, d_out);
                accumulate(&mut grads[x.0], shaped(xv, dx)?);
                accumulate(&mut grads[w.0], shaped(wv, dw)?);
                accumulate(&mut grads[b.0], Tensor::vector(db));
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Scale { x, c } => {
                let mut d = g.clone();
                d.scale(*c);
                accumulate(&mut grads[x.0], d);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let gv = self.value(*gamma);
                let (dx, dg, db) = kernels::layer_norm_backward(cache, gv.data(), g.data());
                accumulate(&mut grads[x.0], shaped(g, dx)?);
                accumulate(&mut grads[gamma.0], Tensor::vector(dg));
                accumulate(&mut grads[beta.0], Tensor::vector(db));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(g.data()).map(|(&v, &gg)| gg * kernels::gelu_grad(v)).collect();
                accumulate(&mut grads[x.0], shaped(g, d)?);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.as_ref().expect("sigmoid output");
                let d = y.data().iter().zip(g.data()).map(|(&s, &gg)| gg * s * (1.0 - s)).collect();
                accumulate(&mut grads[x.0], shaped(g, d)?);
            }
            Op::Softmax { x, group } => {
                let y = self.nodes[i].value.as_ref().expect("softmax output");
                let d = kernels::softmax_backward(y.data(), g.data(), *group);
                accumulate(&mut grads[x.0], shaped(g, d)?);
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let (n, c3) = v.dims2("attention")?;
                let d = kernels::attention_backward(v.data(), probs, g.data(), n, c3 / 3, *heads);
                accumulate(&mut grads[qkv.0], shaped(v, d)?);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    accumulate(&mut grads[p.0], shaped(pv, g.data()[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut d = vec![0.0; xv.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(&mut grads[x.0], shaped(xv, d)?);
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let c = tv.last_dim();
                let mut d = vec![0.0; tv.len()];
                for (k, &r) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g.data()[k * c + j];
                    }
                }
                accumulate(&mut grads[table.0], shaped(tv, d)?);
            }
            Op::PadCols { x, offset } => {
                let xv = self.value(*x);
                let (n, c) = xv.dims2("pad_cols")?;
                let total = g.last_dim();
                let mut d = Vec::with_capacity(n * c);
                for r in 0..n {
                    d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                }
                accumulate(&mut grads[x.0], shaped(xv, d)?);
            }
            Op::Msda { value, offsets, weights, refs, levels, dims } => {
                let (vv, ov, wv, rv) = (self.value(*value), self.value(*offsets), self.value(*weights), self.value(*refs));
                let (dv, doff, dw, dr) =
                    kernels::msda_sample_backward(vv.data(), levels, ov.data(), wv.data(), rv.data(), *dims, g.data());
                accumulate(&mut grads[value.0], shaped(vv, dv)?);
                accumulate(&mut grads[offsets.0], shaped(ov, doff)?);
                accumulate(&mut grads[weights.0], shaped(wv, dw)?);
                accumulate(&mut grads[refs.0], shaped(rv, dr)?);
            }
        }
        Ok(())
    }

    /// Collects parameter gradients from a finished backward pass, aligned
    /// with the parameter store order. Parameters not reached get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.param_nodes.iter().map(|n| n.and_then(|id| grads.grads[id.0].clone())).collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
