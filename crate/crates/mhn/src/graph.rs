//! Architectures as typed DAGs plus static per-node analysis.
//!
//! An [`ArchGraph`] is an immutable directed acyclic graph of layer nodes
//! with named output maps. [`infer_signatures`] propagates feature stride,
//! receptive field, channel count, and convolution depth from the input to
//! every node, which is what the stride/receptive-field tables and the
//! structural invariants are checked against.

use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node id '{0}'")]
    UnknownNode(String),
    #[error("duplicate node id '{0}'")]
    DuplicateNode(String),
    #[error("cycle detected at node '{0}'")]
    Cycle(String),
    #[error("upsample at '{0}' would produce a stride below 1")]
    NonIntegerStride(String),
    #[error("stride mismatch at add node '{0}'")]
    StrideMismatch(String),
    #[error("unknown output '{0}'")]
    UnknownOutput(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// Convolution parameters. `padding` is zero padding applied on both sides
/// of each axis; output size follows the usual floor convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (u32, u32),
    pub stride: u32,
    pub dilation: u32,
    pub padding: (u32, u32),
    pub out_channels: u32,
}

impl ConvSpec {
    /// Square kernel, stride 1, dilation 1, padding chosen to preserve size.
    pub fn same(kernel: u32, out_channels: u32) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: 1,
            dilation: 1,
            padding: ((kernel - 1) / 2, (kernel - 1) / 2),
            out_channels,
        }
    }

    /// Same-padding variant with a dilation factor (odd kernels).
    pub fn same_dilated(kernel: u32, dilation: u32, out_channels: u32) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: 1,
            dilation,
            padding: ((kernel - 1) * dilation / 2, (kernel - 1) * dilation / 2),
            out_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: (u32, u32),
    pub stride: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    /// Source node carrying the declared input channel count.
    Input { channels: u32 },
    Conv(ConvSpec),
    Pool(PoolSpec),
    Relu,
    Add,
    UpsampleX2,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Conv(_) => "conv",
            OpKind::Pool(_) => "pool",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::UpsampleX2 => "upx2",
        }
    }
}

/// One layer node. `share_group` ties convolution weights across nodes in
/// the same structural column; all members must agree on kernel, dilation,
/// and output channels so one weight blob can serve the whole group.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub op: OpKind,
    pub share_group: Option<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, op: OpKind) -> Self {
        NodeSpec { id: id.into(), op, share_group: None }
    }

    pub fn shared(id: impl Into<String>, op: OpKind, group: impl Into<String>) -> Self {
        NodeSpec { id: id.into(), op, share_group: Some(group.into()) }
    }
}

/// A named output map of the graph, optionally carrying a short alias
/// (the M4/M5/M6-style stage names used in analysis tables).
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDecl {
    pub name: String,
    pub node: String,
    pub alias: Option<String>,
}

/// Prediction head attached to one branch output: a mid conv followed by
/// sibling classification and box-regression convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttachment {
    pub branch_output: String,
    pub cls: String,
    pub reg: String,
    pub anchors: u32,
}

/// Region-classification head declared on one output map: ROI pooling into
/// a fixed grid, then two fully-connected stages modeled as 1x1
/// convolutions over the flattened grid, then sibling cls/reg outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RcnnHead {
    pub source_output: String,
    pub roi_size: (u32, u32),
    pub fc_width: u32,
}

/// Directed acyclic graph of layer nodes with ordered predecessor lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArchGraph {
    nodes: Vec<NodeSpec>,
    preds: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    outputs: Vec<OutputDecl>,
    heads: Vec<HeadAttachment>,
    rcnn: Option<RcnnHead>,
}

impl ArchGraph {
    pub fn new() -> Self {
        ArchGraph::default()
    }

    /// Insert a node whose predecessors must already exist.
    pub fn add_node(&mut self, spec: NodeSpec, preds: &[&str]) -> Result<(), GraphError> {
        if self.index.contains_key(&spec.id) {
            return Err(GraphError::DuplicateNode(spec.id));
        }
        let mut pred_ix = Vec::with_capacity(preds.len());
        for p in preds {
            let ix = self
                .index
                .get(*p)
                .copied()
                .ok_or_else(|| GraphError::UnknownNode((*p).to_string()))?;
            pred_ix.push(ix);
        }
        self.index.insert(spec.id.clone(), self.nodes.len());
        self.nodes.push(spec);
        self.preds.push(pred_ix);
        Ok(())
    }

    pub fn declare_output(
        &mut self,
        name: impl Into<String>,
        node: &str,
        alias: Option<String>,
    ) -> Result<(), GraphError> {
        if !self.index.contains_key(node) {
            return Err(GraphError::UnknownNode(node.to_string()));
        }
        self.outputs.push(OutputDecl { name: name.into(), node: node.to_string(), alias });
        Ok(())
    }

    pub fn clear_outputs(&mut self) {
        self.outputs.clear();
    }

    pub fn add_head(&mut self, head: HeadAttachment) {
        self.heads.push(head);
    }

    pub fn set_rcnn(&mut self, rcnn: RcnnHead) {
        self.rcnn = Some(rcnn);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter()
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.index.get(id).map(|&ix| &self.nodes[ix])
    }

    pub fn preds_of(&self, id: &str) -> Option<Vec<&str>> {
        let ix = *self.index.get(id)?;
        Some(self.preds[ix].iter().map(|&p| self.nodes[p].id.as_str()).collect())
    }

    pub fn outputs(&self) -> &[OutputDecl] {
        &self.outputs
    }

    pub fn heads(&self) -> &[HeadAttachment] {
        &self.heads
    }

    pub fn rcnn(&self) -> Option<&RcnnHead> {
        self.rcnn.as_ref()
    }

    /// Indices in a topological order (insertion order is already
    /// topological for builder output; this handles arbitrary graphs).
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (ix, preds) in self.preds.iter().enumerate() {
            indegree[ix] = preds.len();
            for &p in preds {
                succs[p].push(ix);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        ready.sort_unstable();
        let mut order = Vec::with_capacity(n);
        let mut head = 0;
        while head < ready.len() {
            let ix = ready[head];
            head += 1;
            order.push(ix);
            for &s in &succs[ix] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(s);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n)
                .find(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .unwrap_or_default();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    fn node_ix(&self, id: &str) -> Result<usize, GraphError> {
        self.index.get(id).copied().ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }
}

/// Per-node static analysis record.
///
/// `stride` is input pixels per output cell, `rf` the receptive field in
/// input pixels per axis, and `conv_depth` the number of convolution
/// layers on the deepest input-to-node path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSignature {
    pub stride: u32,
    pub rf: (u32, u32),
    pub channels: u32,
    pub conv_depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub node: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.node {
            Some(n) => write!(f, "{} (node '{}')", self.message, n),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Everything `validate` found wrong with a graph. Violations are data,
/// not failures; an empty report means the graph is well-formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, node: Option<&str>, message: impl Into<String>) {
        self.violations.push(Violation { node: node.map(str::to_string), message: message.into() });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check structural invariants: a single input, acyclicity, per-op arity,
/// positive layer parameters, share-group consistency, reachable outputs,
/// and equal strides and channels at every add node.
pub fn validate(graph: &ArchGraph) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut input_count = 0;
    for node in graph.nodes() {
        let arity = graph.preds_of(&node.id).map(|p| p.len()).unwrap_or(0);
        match &node.op {
            OpKind::Input { channels } => {
                input_count += 1;
                if arity != 0 {
                    report.push(Some(&node.id), "input node must have no predecessors");
                }
                if *channels == 0 {
                    report.push(Some(&node.id), "input channel count must be positive");
                }
            }
            OpKind::Add => {
                if arity < 2 {
                    report.push(Some(&node.id), "add node needs at least 2 predecessors");
                }
            }
            op => {
                if arity != 1 {
                    report.push(
                        Some(&node.id),
                        format!("{} node needs exactly 1 predecessor", op.name()),
                    );
                }
            }
        }
        match &node.op {
            OpKind::Conv(c) => {
                if c.kernel.0 == 0 || c.kernel.1 == 0 || c.stride == 0 || c.dilation == 0 {
                    report.push(Some(&node.id), "conv kernel, stride, and dilation must be >= 1");
                }
                if c.out_channels == 0 {
                    report.push(Some(&node.id), "conv output channels must be positive");
                }
            }
            OpKind::Pool(p) => {
                if p.kernel.0 == 0 || p.kernel.1 == 0 || p.stride == 0 {
                    report.push(Some(&node.id), "pool kernel and stride must be >= 1");
                }
            }
            _ => {}
        }
        if node.share_group.is_some() && !matches!(node.op, OpKind::Conv(_)) {
            report.push(Some(&node.id), "share groups apply to conv nodes only");
        }
    }
    if input_count != 1 && !graph.is_empty() {
        report.push(None, format!("graph must have exactly one input node, found {input_count}"));
    }

    // Share groups: every member must carry identical kernel/dilation/channels.
    let mut groups: HashMap<&str, &ConvSpec> = HashMap::new();
    for node in graph.nodes() {
        if let (Some(g), OpKind::Conv(c)) = (&node.share_group, &node.op) {
            match groups.get(g.as_str()) {
                None => {
                    groups.insert(g, c);
                }
                Some(prev) => {
                    if prev.kernel != c.kernel
                        || prev.dilation != c.dilation
                        || prev.out_channels != c.out_channels
                    {
                        report.push(
                            Some(&node.id),
                            format!("share group '{g}' members disagree on kernel/dilation/channels"),
                        );
                    }
                }
            }
        }
    }

    let order = match graph.topo_order() {
        Ok(o) => o,
        Err(GraphError::Cycle(at)) => {
            report.push(Some(&at), "graph contains a cycle");
            return report;
        }
        Err(_) => unreachable!(),
    };

    // Stride/channel propagation to catch add mismatches and bad upsamples.
    // Receptive fields are left to infer_signatures.
    let mut strides: Vec<Option<u32>> = vec![None; graph.len()];
    let mut channels: Vec<Option<u32>> = vec![None; graph.len()];
    for ix in order {
        let node = &graph.nodes[ix];
        let pred_strides: Vec<Option<u32>> =
            graph.preds[ix].iter().map(|&p| strides[p]).collect();
        let pred_channels: Vec<Option<u32>> =
            graph.preds[ix].iter().map(|&p| channels[p]).collect();
        let (s, c) = match &node.op {
            OpKind::Input { channels } => (Some(1), Some(*channels)),
            OpKind::Conv(cv) => (
                pred_strides.first().copied().flatten().map(|s| s * cv.stride.max(1)),
                Some(cv.out_channels),
            ),
            OpKind::Pool(p) => (
                pred_strides.first().copied().flatten().map(|s| s * p.stride.max(1)),
                pred_channels.first().copied().flatten(),
            ),
            OpKind::Relu => (
                pred_strides.first().copied().flatten(),
                pred_channels.first().copied().flatten(),
            ),
            OpKind::UpsampleX2 => {
                let s = pred_strides.first().copied().flatten();
                match s {
                    Some(s) if s % 2 != 0 => {
                        report.push(Some(&node.id), "upsample would produce a stride below 1");
                        (None, pred_channels.first().copied().flatten())
                    }
                    other => (other.map(|s| s / 2), pred_channels.first().copied().flatten()),
                }
            }
            OpKind::Add => {
                let known: Vec<u32> = pred_strides.iter().flatten().copied().collect();
                if known.windows(2).any(|w| w[0] != w[1]) {
                    report.push(
                        Some(&node.id),
                        format!("stride mismatch at add: inputs have strides {known:?}"),
                    );
                }
                let kc: Vec<u32> = pred_channels.iter().flatten().copied().collect();
                if kc.windows(2).any(|w| w[0] != w[1]) {
                    report.push(
                        Some(&node.id),
                        format!("channel mismatch at add: inputs have channels {kc:?}"),
                    );
                }
                (known.first().copied(), kc.first().copied())
            }
        };
        strides[ix] = s;
        channels[ix] = c;
    }

    for out in graph.outputs() {
        match graph.index.get(&out.node) {
            None => report.push(None, format!("output '{}' names unknown node '{}'", out.name, out.node)),
            Some(&ix) => {
                if strides[ix].is_none() {
                    report.push(
                        Some(&out.node),
                        format!("output '{}' is not reachable from the input", out.name),
                    );
                }
            }
        }
    }

    report
}

/// Propagate stride, receptive field, channels, and conv depth through the
/// graph in topological order.
///
/// Per-axis rules: conv and pool multiply stride by their own stride and
/// grow the receptive field by `(k - 1) * dilation * stride_in`; relu and
/// add leave both unchanged (add takes the elementwise maximum receptive
/// field and maximum conv depth of its inputs, and requires equal strides);
/// upsample halves the stride and preserves the receptive field; conv
/// increments the conv depth.
pub fn infer_signatures(
    graph: &ArchGraph,
) -> Result<BTreeMap<String, FeatureSignature>, GraphError> {
    let order = graph.topo_order()?;
    let mut sig: Vec<Option<FeatureSignature>> = vec![None; graph.len()];
    for ix in order {
        let node = &graph.nodes[ix];
        let pred_sig = |k: usize| -> Result<FeatureSignature, GraphError> {
            let p = *graph.preds[ix]
                .get(k)
                .ok_or_else(|| GraphError::Invalid(format!("node '{}' lacks input {k}", node.id)))?;
            sig[p].ok_or_else(|| GraphError::Invalid(format!("node '{}' has an unresolved input", node.id)))
        };
        let s = match &node.op {
            OpKind::Input { channels } => FeatureSignature {
                stride: 1,
                rf: (1, 1),
                channels: *channels,
                conv_depth: 0,
            },
            OpKind::Conv(c) => {
                let p = pred_sig(0)?;
                FeatureSignature {
                    stride: p.stride * c.stride,
                    rf: (
                        p.rf.0 + (c.kernel.0 - 1) * c.dilation * p.stride,
                        p.rf.1 + (c.kernel.1 - 1) * c.dilation * p.stride,
                    ),
                    channels: c.out_channels,
                    conv_depth: p.conv_depth + 1,
                }
            }
            OpKind::Pool(pl) => {
                let p = pred_sig(0)?;
                FeatureSignature {
                    stride: p.stride * pl.stride,
                    rf: (
                        p.rf.0 + (pl.kernel.0 - 1) * p.stride,
                        p.rf.1 + (pl.kernel.1 - 1) * p.stride,
                    ),
                    channels: p.channels,
                    conv_depth: p.conv_depth,
                }
            }
            OpKind::Relu => pred_sig(0)?,
            OpKind::UpsampleX2 => {
                let p = pred_sig(0)?;
                if p.stride % 2 != 0 {
                    return Err(GraphError::NonIntegerStride(node.id.clone()));
                }
                FeatureSignature { stride: p.stride / 2, ..p }
            }
            OpKind::Add => {
                let mut acc = pred_sig(0)?;
                for k in 1..graph.preds[ix].len() {
                    let p = pred_sig(k)?;
                    if p.stride != acc.stride {
                        return Err(GraphError::StrideMismatch(node.id.clone()));
                    }
                    acc.rf.0 = acc.rf.0.max(p.rf.0);
                    acc.rf.1 = acc.rf.1.max(p.rf.1);
                    acc.conv_depth = acc.conv_depth.max(p.conv_depth);
                }
                acc
            }
        };
        sig[ix] = Some(s);
    }
    Ok(graph
        .nodes
        .iter()
        .zip(sig)
        .filter_map(|(n, s)| s.map(|s| (n.id.clone(), s)))
        .collect())
}

/// One row of the per-output analysis table.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRow {
    pub output: String,
    pub alias: Option<String>,
    pub stride: u32,
    pub rf: (u32, u32),
    pub conv_depth: u32,
}

/// Analysis table with one row per declared output, in declaration order.
pub fn branch_report(graph: &ArchGraph) -> Result<Vec<BranchRow>, GraphError> {
    let sigs = infer_signatures(graph)?;
    graph
        .outputs()
        .iter()
        .map(|out| {
            let sig = sigs
                .get(&out.node)
                .ok_or_else(|| GraphError::UnknownOutput(out.name.clone()))?;
            Ok(BranchRow {
                output: out.name.clone(),
                alias: out.alias.clone(),
                stride: sig.stride,
                rf: sig.rf,
                conv_depth: sig.conv_depth,
            })
        })
        .collect()
}
