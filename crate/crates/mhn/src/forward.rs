//! Weight binding and deterministic forward execution of architecture
//! graphs.
//!
//! Nodes run in topological order; all kernels have pinned summation
//! orders, so two runs with the same graph, weights, and input produce
//! bit-identical outputs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{infer_signatures, ArchGraph, GraphError, OpKind};
use crate::ops::{self, OpError};
use crate::tensor::Tensor4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("node '{node}': {source}")]
    Node { node: String, source: OpError },
    #[error("no weights bound for conv node '{node}' (key '{key}')")]
    MissingWeight { node: String, key: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input tensor has {got} channels, graph expects {expected}")]
    InputChannels { expected: u32, got: usize },
}

/// Weight keys for the region-classification head stages.
pub const RCNN_KEYS: [&str; 4] = ["rcnn/fc1", "rcnn/fc2", "rcnn/cls", "rcnn/reg"];

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    /// `(out_c, in_c, kh, kw)` kernel tensor.
    pub kernel: Tensor4,
    pub bias: Vec<f32>,
}

/// Weights keyed by share group where a node has one, otherwise by node
/// id, so one entry serves an entire shared column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    /// Key under which a node's weights are stored.
    pub fn key_for(node_id: &str, share_group: Option<&str>) -> String {
        share_group.unwrap_or(node_id).to_string()
    }

    pub fn insert(&mut self, key: impl Into<String>, kernel: Tensor4, bias: Vec<f32>) {
        self.entries.insert(key.into(), WeightEntry { kernel, bias });
    }

    pub fn get(&self, key: &str) -> Option<&WeightEntry> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &WeightEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gaussian-initialized weights for every conv in the graph (and the
    /// region head, when declared), generated in node declaration order
    /// from a seeded stream: same seed, same bytes. Biases are zero.
    pub fn seeded(graph: &ArchGraph, seed: u64, sigma: f32) -> Result<WeightStore, EngineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, sigma).expect("valid sigma");
        let mut gen = move |n: usize| -> Vec<f32> {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let mut store = WeightStore::new();
        Self::fill(graph, &mut store, &mut |out_c, in_c, kh, kw| {
            let data = gen(out_c * in_c * kh * kw);
            Tensor4::from_vec(out_c, in_c, kh, kw, data).expect("shape math")
        })?;
        Ok(store)
    }

    /// Constant-valued weights with zero biases; handy for structural
    /// probes such as receptive-field measurements.
    pub fn constant(graph: &ArchGraph, value: f32) -> Result<WeightStore, EngineError> {
        let mut store = WeightStore::new();
        Self::fill(graph, &mut store, &mut |out_c, in_c, kh, kw| {
            Tensor4::filled(out_c, in_c, kh, kw, value)
        })?;
        Ok(store)
    }

    fn fill(
        graph: &ArchGraph,
        store: &mut WeightStore,
        make: &mut dyn FnMut(usize, usize, usize, usize) -> Tensor4,
    ) -> Result<(), EngineError> {
        let sigs = infer_signatures(graph)?;
        for node in graph.nodes() {
            if let OpKind::Conv(c) = &node.op {
                let key = Self::key_for(&node.id, node.share_group.as_deref());
                if store.get(&key).is_some() {
                    continue;
                }
                let pred = graph
                    .preds_of(&node.id)
                    .and_then(|p| p.first().map(|s| s.to_string()))
                    .ok_or_else(|| GraphError::Invalid(format!("conv '{}' has no input", node.id)))?;
                let in_c = sigs
                    .get(&pred)
                    .ok_or_else(|| GraphError::Invalid(format!("no signature for '{pred}'")))?
                    .channels as usize;
                let kernel = make(c.out_channels as usize, in_c, c.kernel.0 as usize, c.kernel.1 as usize);
                store.insert(key, kernel, vec![0.0; c.out_channels as usize]);
            }
        }
        if let Some(rcnn) = graph.rcnn() {
            let src = graph
                .outputs()
                .iter()
                .find(|o| o.name == rcnn.source_output)
                .ok_or_else(|| GraphError::UnknownOutput(rcnn.source_output.clone()))?;
            let ch = sigs
                .get(&src.node)
                .ok_or_else(|| GraphError::Invalid(format!("no signature for '{}'", src.node)))?
                .channels as usize;
            let flat = ch * rcnn.roi_size.0 as usize * rcnn.roi_size.1 as usize;
            let fc = rcnn.fc_width as usize;
            for (key, out_c, in_c) in [
                (RCNN_KEYS[0], fc, flat),
                (RCNN_KEYS[1], fc, fc),
                (RCNN_KEYS[2], 2, fc),
                (RCNN_KEYS[3], 4, fc),
            ] {
                if store.get(key).is_none() {
                    store.insert(key, make(out_c, in_c, 1, 1), vec![0.0; out_c]);
                }
            }
        }
        Ok(())
    }
}

/// Run every node and keep every intermediate map. Toy-scale graphs make
/// this affordable, and the detection pipeline reads head maps out of it.
pub fn execute(
    graph: &ArchGraph,
    weights: &WeightStore,
    input: &Tensor4,
) -> Result<BTreeMap<String, Tensor4>, EngineError> {
    let order = graph.topo_order()?;
    let ids: Vec<&str> = graph.nodes().map(|n| n.id.as_str()).collect();
    let mut values: BTreeMap<String, Tensor4> = BTreeMap::new();
    for ix in order {
        let node = graph.node(ids[ix]).expect("indexed id");
        let preds = graph.preds_of(&node.id).unwrap_or_default();
        let arg = |k: usize| -> &Tensor4 { &values[preds[k]] };
        let out = match &node.op {
            OpKind::Input { channels } => {
                if input.channels() != *channels as usize {
                    return Err(EngineError::InputChannels {
                        expected: *channels,
                        got: input.channels(),
                    });
                }
                input.clone()
            }
            OpKind::Conv(c) => {
                let key = WeightStore::key_for(&node.id, node.share_group.as_deref());
                let entry = weights
                    .get(&key)
                    .ok_or_else(|| EngineError::MissingWeight { node: node.id.clone(), key })?;
                ops::conv2d(arg(0), &entry.kernel, &entry.bias, c.stride, c.dilation, c.padding)
                    .map_err(|source| EngineError::Node { node: node.id.clone(), source })?
            }
            OpKind::Pool(p) => ops::maxpool2d(arg(0), p.kernel, p.stride)
                .map_err(|source| EngineError::Node { node: node.id.clone(), source })?,
            OpKind::Relu => ops::relu(arg(0)),
            OpKind::UpsampleX2 => ops::upsample_bilinear_x2(arg(0)),
            OpKind::Add => {
                let mut acc = arg(0).clone();
                for k in 1..preds.len() {
                    acc = ops::elementwise_add(&acc, arg(k))
                        .map_err(|source| EngineError::Node { node: node.id.clone(), source })?;
                }
                acc
            }
        };
        values.insert(node.id.clone(), out);
    }
    Ok(values)
}

/// Forward pass returning one tensor per declared output, keyed by output
/// name.
pub fn forward(
    graph: &ArchGraph,
    weights: &WeightStore,
    input: &Tensor4,
) -> Result<BTreeMap<String, Tensor4>, EngineError> {
    let values = execute(graph, weights, input)?;
    let mut out = BTreeMap::new();
    for decl in graph.outputs() {
        let t = values
            .get(&decl.node)
            .ok_or_else(|| GraphError::UnknownOutput(decl.name.clone()))?;
        out.insert(decl.name.clone(), t.clone());
    }
    Ok(out)
}
