//! Constructors for the multi-branch architecture family.
//!
//! A VGG-like backbone description is split into three branches that end
//! at the same depth but different strides and receptive fields: the base
//! network runs shared blocks up to `conv(i-2)`, then one branch
//! (`bran-s`) continues without pooling and re-adds the `conv(i-2)` map,
//! one (`bran-m`) pools once, and one (`bran-l`) pools twice. Convolutions
//! at the same structural column carry a shared weight-group label.
//! Skip-layer variants fuse coarse branches into finer ones through 1x1
//! convolutions, bilinear x2 upsampling, and element-wise addition; the
//! dilated variant drops the first branch-side pool and compensates with
//! dilation 2 so strides halve while receptive fields are preserved.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    infer_signatures, ArchGraph, ConvSpec, GraphError, HeadAttachment, NodeSpec, OpKind, PoolSpec,
    RcnnHead,
};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid backbone: {0}")]
    InvalidBackbone(String),
    #[error("graph has no declared outputs")]
    NoOutputs,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One backbone block: a run of same-size convolutions at one width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub convs: u32,
    pub channels: u32,
}

fn default_in_channels() -> u32 {
    3
}

fn default_kernel() -> (u32, u32) {
    (3, 3)
}

/// Parametric description of the shared base network.
///
/// `split_block_index` is the 1-based index of the block playing the
/// `conv(i)` role; the construction consumes every block, so it must equal
/// the block count and be at least 3. Element-wise fusion and column
/// weight sharing force the last three blocks to share one width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub blocks: Vec<BlockSpec>,
    pub split_block_index: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: u32,
    #[serde(default = "default_kernel")]
    pub kernel: (u32, u32),
    /// Width of the lateral 1x1 convolutions in the skip variants; `None`
    /// preserves the branch width.
    #[serde(default)]
    pub lateral_channels: Option<u32>,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), BuildError> {
        let err = |m: String| Err(BuildError::InvalidBackbone(m));
        let i = self.split_block_index;
        if i < 3 {
            return err(format!("split_block_index must be >= 3, got {i}"));
        }
        if i != self.blocks.len() {
            return err(format!(
                "split_block_index must equal the block count ({} blocks, split at {i})",
                self.blocks.len()
            ));
        }
        if self.in_channels == 0 {
            return err("input channel count must be positive".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return err(format!("kernel must be odd and positive, got {:?}", self.kernel));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.convs == 0 || b.channels == 0 {
                return err(format!("block {} must have positive convs and channels", k + 1));
            }
        }
        for w in self.blocks.windows(2) {
            if w[1].channels < w[0].channels {
                return err("channel widths must be non-decreasing".into());
            }
        }
        let c = &self.blocks[i - 3..];
        if !(c[0].channels == c[1].channels && c[1].channels == c[2].channels) {
            return err(format!(
                "blocks {}, {}, {} must share one width so branch fusion can add them element-wise",
                i - 2,
                i - 1,
                i
            ));
        }
        Ok(())
    }
}

/// Desk-scale default: six blocks shaped like a thin VGG16 plus one extra
/// block, split at the last block, so branch strides come out (8, 16, 32).
pub fn default_backbone() -> BackboneSpec {
    BackboneSpec {
        blocks: vec![
            BlockSpec { convs: 1, channels: 8 },
            BlockSpec { convs: 1, channels: 16 },
            BlockSpec { convs: 2, channels: 32 },
            BlockSpec { convs: 2, channels: 64 },
            BlockSpec { convs: 2, channels: 64 },
            BlockSpec { convs: 2, channels: 64 },
        ],
        split_block_index: 6,
        in_channels: 3,
        kernel: (3, 3),
        lateral_channels: None,
    }
}

/// Per-branch prediction head: a 5x3 convolution shaped for pedestrians,
/// then sibling 1x1 convolutions for classification and box regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub anchors_per_branch: u32,
}

impl HeadSpec {
    pub const MID_KERNEL: (u32, u32) = (5, 3);
    pub const MID_PADDING: (u32, u32) = (2, 1);

    pub fn new(anchors_per_branch: u32) -> Self {
        HeadSpec { anchors_per_branch }
    }

    pub fn cls_channels(&self) -> u32 {
        2 * self.anchors_per_branch
    }

    pub fn reg_channels(&self) -> u32 {
        4 * self.anchors_per_branch
    }
}

/// Node ids of the three pre-fusion branch trunks every builder emits.
pub const BRANCH_TRUNKS: [&str; 3] = ["bran-s", "bran-m", "bran-l"];

#[derive(Clone, Copy, PartialEq)]
enum Flavor {
    NoSkip,
    Skip,
    SkipDilated,
}

/// Branch-side pools subsample by 2 with a 1x1 window: they change stride
/// without widening the receptive field, which keeps the dilated variant's
/// field sizes exactly equal to the undilated ones.
const POOL: PoolSpec = PoolSpec { kernel: (1, 1), stride: 2 };

struct Emitter<'a> {
    g: ArchGraph,
    spec: &'a BackboneSpec,
}

impl<'a> Emitter<'a> {
    /// Add one conv block. `suffix` distinguishes branch copies of a
    /// column ("s", "m", ""); `share_suffix` separates weight groups when
    /// a copy stops being weight-compatible with its column. Returns the
    /// id of the block's final node.
    fn block(
        &mut self,
        block_no: usize,
        suffix: &str,
        dilation: u32,
        share_suffix: &str,
        mut pred: String,
        last_id: Option<&str>,
    ) -> Result<String, GraphError> {
        let b = self.spec.blocks[block_no - 1];
        let (kh, kw) = self.spec.kernel;
        for j in 1..=b.convs {
            let conv_id = format!("conv{block_no}{suffix}_{j}");
            let share = format!("col{block_no}{share_suffix}_{j}");
            let spec = ConvSpec {
                kernel: (kh, kw),
                stride: 1,
                dilation,
                padding: ((kh - 1) * dilation / 2, (kw - 1) * dilation / 2),
                out_channels: b.channels,
            };
            self.g
                .add_node(NodeSpec::shared(conv_id.clone(), OpKind::Conv(spec), share), &[pred.as_str()])?;
            let relu_id = match (j == b.convs, last_id) {
                (true, Some(id)) => id.to_string(),
                _ => format!("relu{block_no}{suffix}_{j}"),
            };
            self.g.add_node(NodeSpec::new(relu_id.clone(), OpKind::Relu), &[conv_id.as_str()])?;
            pred = relu_id;
        }
        Ok(pred)
    }

    fn pool(&mut self, id: &str, pred: &str) -> Result<String, GraphError> {
        self.g.add_node(NodeSpec::new(id, OpKind::Pool(POOL)), &[pred])?;
        Ok(id.to_string())
    }

    fn lateral(&mut self, id: &str, pred: &str, channels: u32) -> Result<(), GraphError> {
        let spec = ConvSpec { kernel: (1, 1), stride: 1, dilation: 1, padding: (0, 0), out_channels: channels };
        self.g.add_node(NodeSpec::new(id, OpKind::Conv(spec)), &[pred])
    }
}

fn build(spec: &BackboneSpec, flavor: Flavor) -> Result<ArchGraph, BuildError> {
    spec.validate()?;
    let i = spec.split_block_index;
    let dilated = flavor == Flavor::SkipDilated;
    let mut e = Emitter { g: ArchGraph::new(), spec };
    e.g.add_node(NodeSpec::new("input", OpKind::Input { channels: spec.in_channels }), &[])?;

    // Shared trunk conv1 .. conv(i-2), pooling between blocks only.
    let mut pred = "input".to_string();
    for b in 1..i - 2 {
        pred = e.block(b, "", 1, "", pred, None)?;
        pred = e.pool(&format!("pool{b}"), &pred)?;
    }
    let trunk = e.block(i - 2, "", 1, "", pred, None)?;

    // bran-s: conv(i-1)s and conv(i)s with no pooling, re-adding the
    // trunk map. The copies share their column's weights except in the
    // dilated variant, where the column dilation differs.
    let s_share = if dilated { "s" } else { "" };
    let s1 = e.block(i - 1, "s", 1, s_share, trunk.clone(), None)?;
    let s2 = e.block(i, "s", 1, s_share, s1, None)?;
    e.g.add_node(NodeSpec::new("bran-s", OpKind::Add), &[s2.as_str(), trunk.as_str()])?;

    // Branch side: pool(i-2) + conv(i-1), except the dilated variant
    // drops the pool and dilates the convolutions instead.
    let d = if dilated { 2 } else { 1 };
    let side = if dilated { trunk } else { e.pool(&format!("pool{}", i - 2), &trunk)? };
    let mid = e.block(i - 1, "", d, "", side, None)?;

    // bran-m: conv(i)m with no pooling, re-adding the conv(i-1) map.
    let m = e.block(i, "m", d, "", mid.clone(), None)?;
    e.g.add_node(NodeSpec::new("bran-m", OpKind::Add), &[m.as_str(), mid.as_str()])?;

    // bran-l: pool(i-1) + conv(i).
    let l_in = e.pool(&format!("pool{}", i - 1), &mid)?;
    e.block(i, "", d, "", l_in, Some("bran-l"))?;

    let alias = |k: usize| Some(format!("M{}", i - 2 + k));
    match flavor {
        Flavor::NoSkip => {
            for (k, name) in BRANCH_TRUNKS.iter().enumerate() {
                e.g.declare_output(*name, name, alias(k))?;
            }
        }
        Flavor::Skip | Flavor::SkipDilated => {
            let width = spec.lateral_channels.unwrap_or(spec.blocks[i - 1].channels);
            // feat-m-c fuses feat-l (1x1 conv, then x2 bilinear upsample)
            // with feat-m (1x1 conv).
            e.lateral("lat-l", "bran-l", width)?;
            e.g.add_node(NodeSpec::new("up-l", OpKind::UpsampleX2), &["lat-l"])?;
            e.lateral("lat-m", "bran-m", width)?;
            e.g.add_node(NodeSpec::new("feat-m-c", OpKind::Add), &["up-l", "lat-m"])?;
            // feat-s-c fuses feat-m-c with feat-s the same way.
            e.lateral("lat-mc", "feat-m-c", width)?;
            e.g.add_node(NodeSpec::new("up-mc", OpKind::UpsampleX2), &["lat-mc"])?;
            e.lateral("lat-s", "bran-s", width)?;
            e.g.add_node(NodeSpec::new("feat-s-c", OpKind::Add), &["up-mc", "lat-s"])?;
            e.g.declare_output("feat-s-c", "feat-s-c", alias(0))?;
            e.g.declare_output("feat-m-c", "feat-m-c", alias(1))?;
            e.g.declare_output("feat-l", "bran-l", alias(2))?;
        }
    }
    Ok(e.g)
}

/// Basic three-branch network without skip-layer fusion; outputs are the
/// branch trunks themselves.
pub fn build_mhn_noskip(spec: &BackboneSpec) -> Result<ArchGraph, BuildError> {
    build(spec, Flavor::NoSkip)
}

/// Three-branch network with skip-layer fusion; outputs are
/// `feat-s-c`, `feat-m-c`, `feat-l`.
pub fn build_mhn(spec: &BackboneSpec) -> Result<ArchGraph, BuildError> {
    build(spec, Flavor::Skip)
}

/// Skip-fused network with the first branch-side pool removed and
/// dilation 2 in `conv(i-1)`, `conv(i)`, and `conv(i)m`, halving the two
/// coarser strides while keeping their receptive fields.
pub fn build_mhn_d(spec: &BackboneSpec) -> Result<ArchGraph, BuildError> {
    build(spec, Flavor::SkipDilated)
}

/// Append a prediction head to every declared output: a 5x3 convolution
/// (padding 2x1) and sibling 1x1 convolutions with `2A` classification
/// and `4A` regression channels.
pub fn attach_heads(graph: &ArchGraph, head: &HeadSpec) -> Result<ArchGraph, BuildError> {
    if graph.outputs().is_empty() {
        return Err(BuildError::NoOutputs);
    }
    let sigs = infer_signatures(graph)?;
    let mut g = graph.clone();
    for decl in graph.outputs().to_vec() {
        let width = sigs
            .get(&decl.node)
            .ok_or_else(|| GraphError::UnknownOutput(decl.name.clone()))?
            .channels;
        let mid = format!("head-{}-mid", decl.name);
        let rl = format!("head-{}-relu", decl.name);
        let cls = format!("head-{}-cls", decl.name);
        let reg = format!("head-{}-reg", decl.name);
        let mid_spec = ConvSpec {
            kernel: HeadSpec::MID_KERNEL,
            stride: 1,
            dilation: 1,
            padding: HeadSpec::MID_PADDING,
            out_channels: width,
        };
        g.add_node(NodeSpec::new(&mid, OpKind::Conv(mid_spec)), &[&decl.node])?;
        g.add_node(NodeSpec::new(&rl, OpKind::Relu), &[&mid])?;
        let one_by_one = |out_channels| ConvSpec {
            kernel: (1, 1),
            stride: 1,
            dilation: 1,
            padding: (0, 0),
            out_channels,
        };
        g.add_node(NodeSpec::new(&cls, OpKind::Conv(one_by_one(head.cls_channels()))), &[&rl])?;
        g.add_node(NodeSpec::new(&reg, OpKind::Conv(one_by_one(head.reg_channels()))), &[&rl])?;
        g.add_head(HeadAttachment {
            branch_output: decl.name.clone(),
            cls,
            reg,
            anchors: head.anchors_per_branch,
        });
    }
    Ok(g)
}

/// Declare the region-classification head on the finest (stride-smallest)
/// output map; ties go to the earliest declared output, which is the
/// undilated fine branch.
pub fn attach_rcnn_head(
    graph: &ArchGraph,
    roi_size: (u32, u32),
    fc_width: u32,
) -> Result<ArchGraph, BuildError> {
    if graph.outputs().is_empty() {
        return Err(BuildError::NoOutputs);
    }
    let sigs = infer_signatures(graph)?;
    let mut best: Option<(&str, u32)> = None;
    for decl in graph.outputs() {
        let stride = sigs
            .get(&decl.node)
            .ok_or_else(|| GraphError::UnknownOutput(decl.name.clone()))?
            .stride;
        if best.map_or(true, |(_, s)| stride < s) {
            best = Some((&decl.name, stride));
        }
    }
    let (source, _) = best.expect("outputs non-empty");
    let mut g = graph.clone();
    g.set_rcnn(RcnnHead { source_output: source.to_string(), roi_size, fc_width });
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{branch_report, validate};

    fn minimal() -> BackboneSpec {
        BackboneSpec {
            blocks: vec![
                BlockSpec { convs: 1, channels: 4 },
                BlockSpec { convs: 1, channels: 4 },
                BlockSpec { convs: 1, channels: 4 },
            ],
            split_block_index: 3,
            in_channels: 3,
            kernel: (3, 3),
            lateral_channels: None,
        }
    }

    fn strides(g: &ArchGraph) -> Vec<u32> {
        branch_report(g).unwrap().iter().map(|r| r.stride).collect()
    }

    fn trunk_sigs(g: &ArchGraph) -> Vec<crate::graph::FeatureSignature> {
        let sigs = infer_signatures(g).unwrap();
        BRANCH_TRUNKS.iter().map(|id| sigs[*id]).collect()
    }

    #[test]
    fn all_builders_validate_clean() {
        for spec in [default_backbone(), minimal()] {
            for g in [
                build_mhn_noskip(&spec).unwrap(),
                build_mhn(&spec).unwrap(),
                build_mhn_d(&spec).unwrap(),
            ] {
                let report = validate(&g);
                assert!(report.is_clean(), "violations: {report}");
            }
        }
    }

    #[test]
    fn default_noskip_strides_8_16_32() {
        let g = build_mhn_noskip(&default_backbone()).unwrap();
        assert_eq!(strides(&g), vec![8, 16, 32]);
    }

    #[test]
    fn default_mhn_strides_8_16_32_and_aliases() {
        let g = build_mhn(&default_backbone()).unwrap();
        assert_eq!(strides(&g), vec![8, 16, 32]);
        let aliases: Vec<_> =
            g.outputs().iter().map(|o| o.alias.clone().unwrap()).collect();
        assert_eq!(aliases, vec!["M4", "M5", "M6"]);
        let names: Vec<_> = g.outputs().iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, vec!["feat-s-c", "feat-m-c", "feat-l"]);
    }

    #[test]
    fn default_mhn_d_strides_8_8_16() {
        let g = build_mhn_d(&default_backbone()).unwrap();
        assert_eq!(strides(&g), vec![8, 8, 16]);
    }

    #[test]
    fn minimal_spec_three_outputs_equal_depth() {
        let g = build_mhn_noskip(&minimal()).unwrap();
        let rows = branch_report(&g).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].conv_depth, rows[1].conv_depth);
        assert_eq!(rows[1].conv_depth, rows[2].conv_depth);
        assert_eq!(strides(&g), vec![1, 2, 4]);
    }

    #[test]
    fn trunk_depth_equal_across_all_builders() {
        for spec in [default_backbone(), minimal()] {
            for g in [
                build_mhn_noskip(&spec).unwrap(),
                build_mhn(&spec).unwrap(),
                build_mhn_d(&spec).unwrap(),
            ] {
                let t = trunk_sigs(&g);
                assert_eq!(t[0].conv_depth, t[1].conv_depth);
                assert_eq!(t[1].conv_depth, t[2].conv_depth);
            }
        }
    }

    #[test]
    fn receptive_fields_increase_along_branches() {
        for g in [
            build_mhn(&default_backbone()).unwrap(),
            build_mhn_d(&default_backbone()).unwrap(),
        ] {
            let t = trunk_sigs(&g);
            assert!(t[0].rf.0 < t[1].rf.0 && t[1].rf.0 < t[2].rf.0, "{t:?}");
        }
    }

    #[test]
    fn skip_fusion_keeps_strides_and_adds_context() {
        let g = build_mhn(&default_backbone()).unwrap();
        let sigs = infer_signatures(&g).unwrap();
        assert_eq!(sigs["feat-s-c"].stride, sigs["bran-s"].stride);
        assert_eq!(sigs["feat-m-c"].stride, sigs["bran-m"].stride);
        assert!(sigs["feat-s-c"].rf.0 > sigs["bran-s"].rf.0);
    }

    #[test]
    fn dilation_preserves_branch_receptive_fields() {
        let spec = default_backbone();
        let mhn = infer_signatures(&build_mhn(&spec).unwrap()).unwrap();
        let mhnd = infer_signatures(&build_mhn_d(&spec).unwrap()).unwrap();
        for id in ["bran-m", "bran-l"] {
            assert_eq!(mhn[id].rf, mhnd[id].rf, "rf at {id}");
            assert_eq!(mhn[id].stride, 2 * mhnd[id].stride, "stride at {id}");
        }
        assert_eq!(mhn["bran-s"].stride, mhnd["bran-s"].stride);
    }

    #[test]
    fn column_sharing_reduces_weight_count() {
        use crate::forward::WeightStore;
        let spec = default_backbone();
        let shared = WeightStore::seeded(&build_mhn_noskip(&spec).unwrap(), 1, 0.01).unwrap();
        // conv5s/conv6s/conv6m tie to their columns: blocks 5 and 6 have
        // two convs each, so sharing saves 6 entries over naive counting.
        let total_convs: u32 = spec.blocks.iter().map(|b| b.convs).sum::<u32>()
            + 3 * spec.blocks[4].convs; // the three extra branch copies
        assert_eq!(shared.len() as u32, total_convs - 6);
    }

    #[test]
    fn heads_have_sibling_channel_counts() {
        let g = build_mhn(&default_backbone()).unwrap();
        for (a, cls_ch, reg_ch) in [(3u32, 6u32, 12u32), (4, 8, 16)] {
            let gh = attach_heads(&g, &HeadSpec::new(a)).unwrap();
            let sigs = infer_signatures(&gh).unwrap();
            for head in gh.heads() {
                assert_eq!(sigs[&head.cls].channels, cls_ch);
                assert_eq!(sigs[&head.reg].channels, reg_ch);
                // head convs leave the branch stride unchanged
                let branch_node = gh
                    .outputs()
                    .iter()
                    .find(|o| o.name == head.branch_output)
                    .unwrap()
                    .node
                    .clone();
                assert_eq!(sigs[&head.cls].stride, sigs[&branch_node].stride);
            }
            assert!(validate(&gh).is_clean());
        }
    }

    #[test]
    fn rcnn_head_reads_finest_map() {
        let g = attach_rcnn_head(&build_mhn(&default_backbone()).unwrap(), (7, 7), 256).unwrap();
        let rcnn = g.rcnn().unwrap();
        assert_eq!(rcnn.source_output, "feat-s-c");
        assert_eq!(rcnn.roi_size, (7, 7));
        assert_eq!(rcnn.fc_width, 256);

        // MHN-D has two stride-8 outputs; the tie goes to the fine branch.
        let gd = attach_rcnn_head(&build_mhn_d(&default_backbone()).unwrap(), (7, 7), 256).unwrap();
        assert_eq!(gd.rcnn().unwrap().source_output, "feat-s-c");
    }

    #[test]
    fn bad_backbones_rejected() {
        let mut s = minimal();
        s.split_block_index = 2;
        assert!(matches!(build_mhn(&s), Err(BuildError::InvalidBackbone(_))));

        let mut s = minimal();
        s.blocks[2].channels = 8; // breaks the equal-width fusion rule
        assert!(matches!(build_mhn(&s), Err(BuildError::InvalidBackbone(_))));

        let mut s = minimal();
        s.split_block_index = 4;
        assert!(matches!(build_mhn(&s), Err(BuildError::InvalidBackbone(_))));
    }

    #[test]
    fn attach_heads_requires_outputs() {
        let g = ArchGraph::new();
        assert!(matches!(attach_heads(&g, &HeadSpec::new(3)), Err(BuildError::NoOutputs)));
        assert!(matches!(attach_rcnn_head(&g, (7, 7), 64), Err(BuildError::NoOutputs)));
    }
}
