//! The layer graph: a DAG of typed nodes with statically checked dims.
//!
//! Graphs are built by the constructors in [`build`], evaluated by the
//! executor in [`exec`], and round-tripped through the text format in
//! [`serialize`].

pub mod build;
pub mod exec;
pub mod serialize;

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::regions::RegionGrid;
use crate::resample::{ResampleFactor, ResampleMode};
use crate::tensor::{ActKind, BnParams, EltwiseKind};
use std::collections::HashSet;

pub type NodeId = usize;

/// Which branch of the model a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Half,
    Full,
    Shared,
}

/// When a crop/uncrop pair is active.
///
/// `Always` pairs are part of the model definition: the enclosed segment is
/// computed per region in every phase (training, classic and fast
/// inference). `FastOnly` pairs are pass-through except during fast
/// inference, which is what exposes a crop-inconsistent model's boundary
/// problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPolicy {
    Always,
    FastOnly,
}

#[derive(Debug, Clone)]
pub enum NodeOp {
    /// The image placeholder.
    Input,
    Conv(ConvParams),
    BatchNorm(BnParams),
    Act(ActKind),
    SoftmaxChannels,
    Eltwise(EltwiseKind),
    Resample { factor: ResampleFactor, mode: ResampleMode },
    PoolAvg,
    /// Split a map into per-region tiles stacked along the batch axis.
    /// `stride` is the map's full-resolution pixels per cell.
    Crop { policy: CropPolicy, stride: usize },
    /// Inverse of `Crop`; skipped tiles are filled with exact zeros.
    Uncrop { policy: CropPolicy, stride: usize },
    /// Forward identity, adjoint zero.
    StopGrad,
    /// Extract one channel as a 1-channel map.
    SelectChannel(usize),
    /// Multiply a C-channel map by a 1-channel map (broadcast over channels).
    BroadcastMul,
    /// Region-constant broadcast of `mask * sigmoid(s)` to this node's dims.
    SparseWeights,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
    pub column: Column,
    /// True when, in classic mode, this node computes on per-region tiles
    /// (batch expanded by the region count).
    pub per_crop: bool,
    /// Per-sample output dims (channels, height, width) in classic mode.
    pub dims: (usize, usize, usize),
    pub label: String,
}

/// Fusion scheme of a two-column graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Sum,
    Max,
    Attention,
    Ctf,
    Sctf,
    Isctf,
}

impl FusionKind {
    pub fn is_sparse(self) -> bool {
        matches!(self, FusionKind::Sctf | FusionKind::Isctf)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Sum => "sum",
            FusionKind::Max => "max",
            FusionKind::Attention => "attention",
            FusionKind::Ctf => "ctf",
            FusionKind::Sctf => "sctf",
            FusionKind::Isctf => "isctf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    SingleColumn,
    TwoColumn(FusionKind),
}

/// Decoder topology of one column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderVariant {
    /// Per-tap score maps, upsampled and summed.
    Classic,
    /// Stage 4 and 5 downsamples replaced by dilation growth; one
    /// upsampling step with a jump connection.
    Dilated,
    /// Stage 5 dilated only; two upsampling steps with jump connections.
    Mixed,
    /// No dilation growth; up to three upsampling steps, each fused with a
    /// jump connection carrying 1x1-projected low-level features.
    Sharpmask,
}

impl DecoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            DecoderVariant::Classic => "classic",
            DecoderVariant::Dilated => "dilated",
            DecoderVariant::Mixed => "mixed",
            DecoderVariant::Sharpmask => "sharpmask",
        }
    }
}

/// Named result nodes of a graph.
#[derive(Debug, Clone)]
pub struct GraphOutputs {
    /// Final (fused) score map at quarter resolution.
    pub main: NodeId,
    /// Half-column scores upsampled to quarter resolution (training aux head).
    pub aux_half: Option<NodeId>,
    /// Full-column scores after uncrop (training aux head).
    pub aux_full: Option<NodeId>,
    /// Softmaxed 2-channel scale weights (z1 = channel 0, z2 = channel 1).
    pub z: Option<NodeId>,
    /// Raw sparse region scores, dims (N, 1, H, W).
    pub s: Option<NodeId>,
    /// Backbone taps as (full-resolution stride, node), per column.
    pub taps: Vec<(Column, usize, NodeId)>,
}

/// Everything needed to rebuild the graph deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub kind: GraphKind,
    pub decoder: DecoderVariant,
    pub classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub grid: Option<RegionGrid>,
    /// Default target activation rate for sparse graphs.
    pub p: f64,
    pub seed: u64,
    pub optimized: bool,
    /// Kept residual units per stage for the full-resolution (or only) column.
    pub plan_full: build::ResidualStagePlan,
    /// Kept residual units per stage for the half-resolution column.
    pub plan_half: build::ResidualStagePlan,
    pub stem_width: usize,
    /// Base width of the decoder's hidden feature layers.
    pub decoder_width: usize,
}

/// Directed acyclic graph of layer nodes plus its build configuration.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    pub outputs: GraphOutputs,
    pub config: GraphConfig,
}

/// Which parameter bank of a node a gradient or update refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeights,
    ConvBias,
    BnScale,
    BnShift,
}

impl ModelGraph {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn fusion(&self) -> Option<FusionKind> {
        match self.config.kind {
            GraphKind::TwoColumn(f) => Some(f),
            GraphKind::SingleColumn => None,
        }
    }

    pub fn is_sparse(&self) -> bool {
        self.fusion().is_some_and(FusionKind::is_sparse)
    }

    /// All ancestors of `id` (nodes it transitively depends on), excluding
    /// `id` itself.
    pub fn ancestors(&self, id: NodeId) -> HashSet<NodeId> {
        let mut seen = HashSet::new();
        let mut stack: Vec<NodeId> = self.nodes[id].inputs.clone();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.nodes[n].inputs.iter().copied());
            }
        }
        seen
    }

    /// Backbone tap lookup by column and full-resolution stride.
    pub fn tap(&self, column: Column, stride: usize) -> Option<NodeId> {
        self.outputs
            .taps
            .iter()
            .find(|(c, s, _)| *c == column && *s == stride)
            .map(|(_, _, id)| *id)
    }

    /// Trainable parameter banks in node order.
    pub fn param_entries(&self) -> Vec<(NodeId, ParamKind, usize)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.op {
                NodeOp::Conv(p) => {
                    out.push((id, ParamKind::ConvWeights, p.weights.len()));
                    out.push((id, ParamKind::ConvBias, p.bias.len()));
                }
                NodeOp::BatchNorm(p) => {
                    out.push((id, ParamKind::BnScale, p.scale.len()));
                    out.push((id, ParamKind::BnShift, p.shift.len()));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_slice(&self, id: NodeId, kind: ParamKind) -> &[f64] {
        match (&self.nodes[id].op, kind) {
            (NodeOp::Conv(p), ParamKind::ConvWeights) => p.weights.data(),
            (NodeOp::Conv(p), ParamKind::ConvBias) => &p.bias,
            (NodeOp::BatchNorm(p), ParamKind::BnScale) => &p.scale,
            (NodeOp::BatchNorm(p), ParamKind::BnShift) => &p.shift,
            _ => panic!("node {id} has no {kind:?} bank"),
        }
    }

    pub fn param_slice_mut(&mut self, id: NodeId, kind: ParamKind) -> &mut [f64] {
        match (&mut self.nodes[id].op, kind) {
            (NodeOp::Conv(p), ParamKind::ConvWeights) => p.weights.data_mut(),
            (NodeOp::Conv(p), ParamKind::ConvBias) => &mut p.bias,
            (NodeOp::BatchNorm(p), ParamKind::BnScale) => &mut p.scale,
            (NodeOp::BatchNorm(p), ParamKind::BnShift) => &mut p.shift,
            _ => panic!("node {id} has no {kind:?} bank"),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_entries().iter().map(|(_, _, n)| n).sum()
    }

    /// The region grid; errors for non-sparse graphs.
    pub fn grid(&self) -> Result<&RegionGrid> {
        self.config
            .grid
            .as_ref()
            .ok_or_else(|| Error::Usage("graph carries no region grid (not a sparse fusion)".into()))
    }

    /// True when any node of `column` can reach `target` going forward.
    pub fn column_reaches(&self, column: Column, target: NodeId) -> bool {
        let anc = self.ancestors(target);
        anc.iter().any(|&id| self.nodes[id].column == column)
    }
}
