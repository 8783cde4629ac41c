//! Graph constructors: backbone columns, the decoder variants, the fusion
//! heads, the full two-column sparse models, and structure optimization.

use super::{
    Column, CropPolicy, DecoderVariant, FusionKind, GraphConfig, GraphKind, GraphOutputs,
    ModelGraph, Node, NodeId, NodeOp,
};
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::regions::RegionGrid;
use crate::resample::{ResampleFactor, ResampleMode};
use crate::tensor::{ActKind, BnParams, EltwiseKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Kept residual units per stage (stages 2-5 of the backbone) and the stage
/// widths. The first unit of every non-empty stage is the projection
/// (non-identity) unit; all others are identity units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualStagePlan {
    pub units: [usize; 4],
    pub widths: [usize; 4],
}

impl ResidualStagePlan {
    /// Plan with the default toy stage widths (a 1/16-width analog of the
    /// usual 256/512/1024/2048 progression).
    pub fn new(units: [usize; 4]) -> ResidualStagePlan {
        ResidualStagePlan { units, widths: [16, 32, 64, 128] }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen_zero = false;
        for (i, &u) in self.units.iter().enumerate() {
            if u == 0 {
                seen_zero = true;
            } else if seen_zero {
                return Err(Error::Build(format!(
                    "stage {} has {} units after an empty stage; stages can only be removed from the top",
                    i + 2,
                    u
                )));
            }
            if self.widths[i] == 0 {
                return Err(Error::Build("stage widths must be positive".into()));
            }
        }
        if self.units[0] == 0 {
            return Err(Error::Build("the first residual stage needs at least one unit".into()));
        }
        Ok(())
    }

    pub fn total_units(&self) -> usize {
        self.units.iter().sum()
    }

    /// Number of non-identity (projection) units: one per non-empty stage.
    pub fn projection_units(&self) -> usize {
        self.units.iter().filter(|&&u| u > 0).count()
    }

    pub fn identity_units(&self) -> usize {
        self.total_units() - self.projection_units()
    }

    /// Strides (on the column input) of the existing stage outputs.
    pub fn tap_strides(&self, dilations: [usize; 4]) -> Vec<usize> {
        let mut stride = 4;
        let mut out = Vec::new();
        for i in 0..4 {
            if self.units[i] == 0 {
                break;
            }
            if i > 0 && dilations[i] == 1 {
                stride *= 2;
            }
            out.push(stride);
        }
        out
    }
}

/// Build configuration for a complete model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: GraphKind,
    pub decoder: DecoderVariant,
    pub plan_full: ResidualStagePlan,
    pub plan_half: ResidualStagePlan,
    pub stem_width: usize,
    pub decoder_width: usize,
    pub classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub region_px: usize,
    pub p: f64,
    pub seed: u64,
    pub optimized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: GraphKind::TwoColumn(FusionKind::Isctf),
            decoder: DecoderVariant::Sharpmask,
            plan_full: ResidualStagePlan::new([1, 1, 2, 0]),
            plan_half: ResidualStagePlan::new([1, 2, 4, 1]),
            stem_width: 16,
            decoder_width: 32,
            classes: 8,
            image_h: 64,
            image_w: 128,
            region_px: 16,
            p: 0.25,
            seed: 42,
            optimized: false,
        }
    }
}

impl ModelConfig {
    fn to_graph_config(&self, grid: Option<RegionGrid>) -> GraphConfig {
        GraphConfig {
            kind: self.kind,
            decoder: self.decoder,
            classes: self.classes,
            image_h: self.image_h,
            image_w: self.image_w,
            grid,
            p: self.p,
            seed: self.seed,
            optimized: self.optimized,
            plan_full: self.plan_full,
            plan_half: self.plan_half,
            stem_width: self.stem_width,
            decoder_width: self.decoder_width,
        }
    }
}

fn stage_dilations(variant: DecoderVariant) -> [usize; 4] {
    match variant {
        DecoderVariant::Dilated => [1, 1, 2, 4],
        DecoderVariant::Mixed => [1, 1, 1, 2],
        _ => [1, 1, 1, 1],
    }
}

/// Weight initialization scheme for a conv node.
#[derive(Clone, Copy)]
enum Init {
    /// He-uniform scaled by fan-in.
    He,
    /// All zeros (balanced softmax heads).
    Zero,
    /// Small uniform, for the sparse head.
    Small,
}

struct Builder {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    grid: Option<RegionGrid>,
}

/// One backbone tap or decoder level: (stride on the full-resolution image,
/// channel width, node).
#[derive(Debug, Clone, Copy)]
struct Feature {
    stride: usize,
    width: usize,
    node: NodeId,
}

impl Builder {
    fn new(seed: u64) -> Builder {
        Builder { nodes: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), grid: None }
    }

    fn dims(&self, id: NodeId) -> (usize, usize, usize) {
        self.nodes[id].dims
    }

    fn per_crop(&self, id: NodeId) -> bool {
        self.nodes[id].per_crop
    }

    fn push_node(
        &mut self,
        op: NodeOp,
        inputs: Vec<NodeId>,
        column: Column,
        per_crop: bool,
        dims: (usize, usize, usize),
        label: String,
    ) -> NodeId {
        self.nodes.push(Node { op, inputs, column, per_crop, dims, label });
        self.nodes.len() - 1
    }

    fn input(&mut self, c: usize, h: usize, w: usize) -> NodeId {
        self.push_node(NodeOp::Input, vec![], Column::Shared, false, (c, h, w), "image".into())
    }

    fn conv(
        &mut self,
        input: NodeId,
        out_c: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
        init: Init,
        column: Column,
        label: &str,
    ) -> Result<NodeId> {
        let (c, h, w) = self.dims(input);
        let mut p =
            ConvParams::new(c, out_c, kernel, stride, dilation, groups, padding).map_err(|e| {
                Error::Build(format!("{label}: {e}"))
            })?;
        let fan_in = (c / groups * kernel.0 * kernel.1) as f64;
        let bound = match init {
            Init::He => (6.0 / fan_in).sqrt(),
            Init::Zero => 0.0,
            Init::Small => 0.01,
        };
        if bound > 0.0 {
            for v in p.weights.data_mut() {
                *v = self.rng.random_range(-bound..bound);
            }
        }
        let (oh, ow) = p.out_dims(h, w).map_err(|e| Error::Build(format!("{label}: {e}")))?;
        let per_crop = self.per_crop(input);
        Ok(self.push_node(NodeOp::Conv(p), vec![input], column, per_crop, (out_c, oh, ow), label.into()))
    }

    fn bn(&mut self, input: NodeId, column: Column, label: &str) -> NodeId {
        let dims = self.dims(input);
        let per_crop = self.per_crop(input);
        self.push_node(
            NodeOp::BatchNorm(BnParams::new(dims.0)),
            vec![input],
            column,
            per_crop,
            dims,
            label.into(),
        )
    }

    fn act(&mut self, input: NodeId, kind: ActKind, column: Column, label: &str) -> NodeId {
        let dims = self.dims(input);
        let per_crop = self.per_crop(input);
        self.push_node(NodeOp::Act(kind), vec![input], column, per_crop, dims, label.into())
    }

    fn pool(&mut self, input: NodeId, column: Column, label: &str) -> Result<NodeId> {
        let (c, h, w) = self.dims(input);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Build(format!("{label}: pooling odd dims {h}x{w}")));
        }
        let per_crop = self.per_crop(input);
        Ok(self.push_node(NodeOp::PoolAvg, vec![input], column, per_crop, (c, h / 2, w / 2), label.into()))
    }

    fn eltwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: EltwiseKind,
        column: Column,
        label: &str,
    ) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) || self.per_crop(a) != self.per_crop(b) {
            return Err(Error::Build(format!(
                "{label}: eltwise operands differ: {:?}/{} vs {:?}/{}",
                self.dims(a),
                self.per_crop(a),
                self.dims(b),
                self.per_crop(b)
            )));
        }
        let dims = self.dims(a);
        let per_crop = self.per_crop(a);
        Ok(self.push_node(NodeOp::Eltwise(kind), vec![a, b], column, per_crop, dims, label.into()))
    }

    fn resample(
        &mut self,
        input: NodeId,
        factor: ResampleFactor,
        mode: ResampleMode,
        column: Column,
        label: &str,
    ) -> Result<NodeId> {
        let (c, h, w) = self.dims(input);
        let (num, den) = factor.ratio();
        if (h * num) % den != 0 || (w * num) % den != 0 || h * num / den == 0 {
            return Err(Error::Build(format!("{label}: cannot resample {h}x{w} by {num}/{den}")));
        }
        let dims = (c, h * num / den, w * num / den);
        let per_crop = self.per_crop(input);
        Ok(self.push_node(
            NodeOp::Resample { factor, mode },
            vec![input],
            column,
            per_crop,
            dims,
            label.into(),
        ))
    }

    fn softmax(&mut self, input: NodeId, column: Column, label: &str) -> NodeId {
        let dims = self.dims(input);
        let per_crop = self.per_crop(input);
        self.push_node(NodeOp::SoftmaxChannels, vec![input], column, per_crop, dims, label.into())
    }

    fn stop_grad(&mut self, input: NodeId, column: Column, label: &str) -> NodeId {
        let dims = self.dims(input);
        let per_crop = self.per_crop(input);
        self.push_node(NodeOp::StopGrad, vec![input], column, per_crop, dims, label.into())
    }

    fn select_channel(&mut self, input: NodeId, ch: usize, column: Column, label: &str) -> Result<NodeId> {
        let (c, h, w) = self.dims(input);
        if ch >= c {
            return Err(Error::Build(format!("{label}: channel {ch} out of {c}")));
        }
        let per_crop = self.per_crop(input);
        Ok(self.push_node(NodeOp::SelectChannel(ch), vec![input], column, per_crop, (1, h, w), label.into()))
    }

    fn broadcast_mul(&mut self, wide: NodeId, narrow: NodeId, column: Column, label: &str) -> Result<NodeId> {
        let (c, h, w) = self.dims(wide);
        let (nc, nh, nw) = self.dims(narrow);
        if nc != 1 || nh != h || nw != w || self.per_crop(wide) != self.per_crop(narrow) {
            return Err(Error::Build(format!(
                "{label}: broadcast operands differ: {:?} vs {:?}",
                self.dims(wide),
                self.dims(narrow)
            )));
        }
        let per_crop = self.per_crop(wide);
        Ok(self.push_node(NodeOp::BroadcastMul, vec![wide, narrow], column, per_crop, (c, h, w), label.into()))
    }

    fn crop(&mut self, input: NodeId, policy: CropPolicy, stride: usize, column: Column, label: &str) -> Result<NodeId> {
        let grid = self.grid.ok_or_else(|| Error::Build(format!("{label}: crop without a region grid")))?;
        let (c, h, w) = self.dims(input);
        if self.per_crop(input) {
            return Err(Error::Build(format!("{label}: input is already cropped")));
        }
        let f = grid.footprint(stride).map_err(|e| Error::Build(format!("{label}: {e}")))?;
        if h != grid.rows * f || w != grid.cols * f {
            return Err(Error::Build(format!(
                "{label}: {h}x{w} map does not tile into {}x{} regions of {f}",
                grid.rows, grid.cols
            )));
        }
        let (dims, per_crop) = match policy {
            CropPolicy::Always => ((c, f, f), true),
            CropPolicy::FastOnly => ((c, h, w), false),
        };
        Ok(self.push_node(NodeOp::Crop { policy, stride }, vec![input], column, per_crop, dims, label.into()))
    }

    fn uncrop(&mut self, input: NodeId, policy: CropPolicy, stride: usize, column: Column, label: &str) -> Result<NodeId> {
        let grid = self.grid.ok_or_else(|| Error::Build(format!("{label}: uncrop without a region grid")))?;
        let (c, h, w) = self.dims(input);
        let f = grid.footprint(stride).map_err(|e| Error::Build(format!("{label}: {e}")))?;
        let dims = match policy {
            CropPolicy::Always => {
                if !self.per_crop(input) || (h, w) != (f, f) {
                    return Err(Error::Build(format!("{label}: expected {f}x{f} crops, got {h}x{w}")));
                }
                (c, grid.rows * f, grid.cols * f)
            }
            CropPolicy::FastOnly => (c, h, w),
        };
        Ok(self.push_node(NodeOp::Uncrop { policy, stride }, vec![input], column, false, dims, label.into()))
    }

    fn sparse_weights(&mut self, s: NodeId, target_h: usize, target_w: usize, label: &str) -> Result<NodeId> {
        let (c, h, w) = self.dims(s);
        if c != 1 || target_h % h != 0 || target_w % w != 0 {
            return Err(Error::Build(format!(
                "{label}: cannot broadcast {c}x{h}x{w} scores to {target_h}x{target_w}"
            )));
        }
        Ok(self.push_node(
            NodeOp::SparseWeights,
            vec![s],
            Column::Shared,
            false,
            (1, target_h, target_w),
            label.into(),
        ))
    }
}

/// Adds stem + residual stages for one column; returns the taps.
///
/// `scale` is the column input's stride relative to the full-resolution
/// image (1 for the full column, 2 for the half column); returned tap
/// strides are measured in full-resolution pixels.
fn add_backbone_column(
    b: &mut Builder,
    input: NodeId,
    plan: &ResidualStagePlan,
    stem_width: usize,
    dilations: [usize; 4],
    scale: usize,
    column: Column,
    prefix: &str,
) -> Result<Vec<Feature>> {
    plan.validate()?;
    let stem_conv = b.conv(
        input,
        stem_width,
        (3, 3),
        2,
        1,
        1,
        1,
        Init::He,
        column,
        &format!("{prefix}.stem.conv"),
    )?;
    let mut x = b.pool(stem_conv, column, &format!("{prefix}.stem.pool"))?;
    let mut width = stem_width;
    let mut taps = Vec::new();
    let mut stride = 4 * scale;
    for (i, &units) in plan.units.iter().enumerate() {
        if units == 0 {
            break;
        }
        let out_w = plan.widths[i];
        let dil = dilations[i];
        let down = i > 0 && dil == 1;
        if down {
            stride *= 2;
        }
        for u in 0..units {
            let first = u == 0;
            let unit_stride = if first && down { 2 } else { 1 };
            let label = format!("{prefix}.stage{}.unit{}", i + 2, u + 1);
            let bn1 = b.bn(x, column, &format!("{label}.bn1"));
            let r1 = b.act(bn1, ActKind::Relu, column, &format!("{label}.relu1"));
            let c1 = b.conv(
                r1,
                out_w,
                (3, 3),
                unit_stride,
                dil,
                1,
                dil,
                Init::He,
                column,
                &format!("{label}.conv1"),
            )?;
            let bn2 = b.bn(c1, column, &format!("{label}.bn2"));
            let r2 = b.act(bn2, ActKind::Relu, column, &format!("{label}.relu2"));
            let c2 = b.conv(
                r2,
                out_w,
                (3, 3),
                1,
                dil,
                1,
                dil,
                Init::He,
                column,
                &format!("{label}.conv2"),
            )?;
            let skip = if first {
                b.conv(
                    x,
                    out_w,
                    (1, 1),
                    unit_stride,
                    1,
                    1,
                    0,
                    Init::He,
                    column,
                    &format!("{label}.project"),
                )?
            } else {
                x
            };
            x = b.eltwise(skip, c2, EltwiseKind::Sum, column, &format!("{label}.sum"))?;
            let _ = width;
            width = out_w;
        }
        taps.push(Feature { stride, width, node: x });
    }
    Ok(taps)
}

/// Keep only the deepest tap per distinct stride, ascending by stride.
fn dedup_taps(taps: &[Feature]) -> Vec<Feature> {
    let mut out: Vec<Feature> = Vec::new();
    for t in taps {
        if let Some(last) = out.last_mut() {
            if last.stride == t.stride {
                *last = *t;
                continue;
            }
        }
        out.push(*t);
    }
    out
}

/// Widths of the decoder hidden layers and group counts, per the build
/// configuration. `levels` is the number of decoder levels (tap count).
struct DecoderSpec {
    hidden_widths: Vec<usize>,
    raw_groups: usize,
    jump_groups: Vec<usize>,
    raw_kernel: (usize, usize),
}

fn decoder_spec(cfg: &ModelConfig, levels: usize, full_column: bool) -> DecoderSpec {
    let n_hidden = levels.max(1) - 1 + 1; // one conv on raw features plus one per fuse except the last
    let n_hidden = n_hidden.min(levels); // levels==1 -> just the raw conv
    let mut hidden_widths = Vec::with_capacity(n_hidden);
    for i in 0..n_hidden {
        let w = if cfg.optimized { (cfg.decoder_width >> i).max(1) } else { cfg.decoder_width };
        hidden_widths.push(w);
    }
    let jump_groups = if cfg.optimized {
        [8usize, 4, 2].iter().copied().take(levels.max(1) - 1).collect()
    } else {
        vec![1; levels.max(1) - 1]
    };
    DecoderSpec {
        hidden_widths,
        raw_groups: if cfg.optimized { 8 } else { 1 },
        jump_groups,
        raw_kernel: if cfg.optimized && full_column { (1, 1) } else { (3, 3) },
    }
}

/// Per-level cross-column injection sources: half-column level features
/// keyed by their full-resolution stride.
struct InjectionSources<'a> {
    half_levels: &'a [Feature],
    crop_policy: CropPolicy,
}

/// Adds the jump-connection decoder on top of `taps`. Returns the score
/// node and the per-level (post-fuse) features.
#[allow(clippy::too_many_arguments)]
fn add_jump_decoder(
    b: &mut Builder,
    taps: &[Feature],
    spec: &DecoderSpec,
    classes: usize,
    column: Column,
    prefix: &str,
    injections: Option<&InjectionSources>,
) -> Result<(NodeId, Vec<Feature>)> {
    assert!(!taps.is_empty());
    let deep = *taps.last().unwrap();
    let raw_pad = (spec.raw_kernel.0 - 1) / 2;
    let c0 = b.conv(
        deep.node,
        spec.hidden_widths[0],
        spec.raw_kernel,
        1,
        1,
        spec.raw_groups,
        raw_pad,
        Init::He,
        column,
        &format!("{prefix}.dec.raw"),
    )?;
    let mut f = b.act(c0, ActKind::Relu, column, &format!("{prefix}.dec.raw.relu"));
    let mut width = spec.hidden_widths[0];
    let mut stride = deep.stride;
    f = maybe_inject(b, f, width, stride, column, prefix, injections, 0)?;
    let mut levels = vec![Feature { stride, width, node: f }];

    let n = taps.len();
    for (i, tap) in taps.iter().rev().skip(1).enumerate() {
        stride = tap.stride;
        let up = b.resample(
            f,
            ResampleFactor::X2,
            ResampleMode::Bilinear,
            column,
            &format!("{prefix}.dec.up{}", i + 1),
        )?;
        let jump = b.conv(
            tap.node,
            width,
            (1, 1),
            1,
            1,
            spec.jump_groups[i],
            0,
            Init::He,
            column,
            &format!("{prefix}.dec.jump{}", i + 1),
        )?;
        f = b.eltwise(up, jump, EltwiseKind::Sum, column, &format!("{prefix}.dec.fuse{}", i + 1))?;
        f = maybe_inject(b, f, width, stride, column, prefix, injections, i + 1)?;
        levels.push(Feature { stride, width, node: f });
        if i + 2 < n {
            let hw = spec.hidden_widths[i + 1];
            let c = b.conv(
                f,
                hw,
                (3, 3),
                1,
                1,
                1,
                1,
                Init::He,
                column,
                &format!("{prefix}.dec.hidden{}", i + 2),
            )?;
            f = b.act(c, ActKind::Relu, column, &format!("{prefix}.dec.hidden{}.relu", i + 2));
            width = hw;
            levels.last_mut().unwrap().node = f;
            levels.last_mut().unwrap().width = hw;
        }
    }
    let scores = b.conv(
        f,
        classes,
        (1, 1),
        1,
        1,
        1,
        0,
        Init::He,
        column,
        &format!("{prefix}.dec.score"),
    )?;
    Ok((scores, levels))
}

/// Cross-column connection: 1x1-projected, gradient-blocked half-column
/// features summed into the full-column level feature at matching stride.
#[allow(clippy::too_many_arguments)]
fn maybe_inject(
    b: &mut Builder,
    f: NodeId,
    width: usize,
    stride: usize,
    column: Column,
    prefix: &str,
    injections: Option<&InjectionSources>,
    level: usize,
) -> Result<NodeId> {
    let Some(inj) = injections else { return Ok(f) };
    let Some(src) = inj.half_levels.iter().find(|l| l.stride == 2 * stride) else {
        return Ok(f);
    };
    let label = format!("{prefix}.xcol{level}");
    let blocked = b.stop_grad(src.node, Column::Half, &format!("{label}.stopgrad"));
    let up = b.resample(
        blocked,
        ResampleFactor::X2,
        ResampleMode::Bilinear,
        Column::Half,
        &format!("{label}.up"),
    )?;
    let cropped = b.crop(up, inj.crop_policy, stride, column, &format!("{label}.crop"))?;
    let proj = b.conv(
        cropped,
        width,
        (1, 1),
        1,
        1,
        1,
        0,
        Init::He,
        column,
        &format!("{label}.project"),
    )?;
    b.eltwise(f, proj, EltwiseKind::Sum, column, &format!("{label}.sum"))
}

/// Classic FCN decoder: per-tap 1x1 score maps, upsampled to quarter
/// resolution and summed.
fn add_classic_decoder(
    b: &mut Builder,
    taps: &[Feature],
    classes: usize,
    column: Column,
    prefix: &str,
    scale: usize,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (i, tap) in taps.iter().enumerate() {
        let mut s = b.conv(
            tap.node,
            classes,
            (1, 1),
            1,
            1,
            1,
            0,
            Init::He,
            column,
            &format!("{prefix}.cls.score{i}"),
        )?;
        // bring every score map to stride 4 on the column input
        let mut stride = tap.stride / scale;
        while stride > 4 {
            let factor = if stride >= 16 { ResampleFactor::X4 } else { ResampleFactor::X2 };
            s = b.resample(
                s,
                factor,
                ResampleMode::Bilinear,
                column,
                &format!("{prefix}.cls.up{i}.s{stride}"),
            )?;
            stride /= match factor {
                ResampleFactor::X4 => 4,
                _ => 2,
            };
        }
        total = Some(match total {
            None => s,
            Some(t) => b.eltwise(t, s, EltwiseKind::Sum, column, &format!("{prefix}.cls.sum{i}"))?,
        });
    }
    total.ok_or_else(|| Error::Build("classic decoder needs at least one tap".into()))
}

/// Builds one column (backbone + decoder); returns (scores, levels, taps).
#[allow(clippy::too_many_arguments)]
fn add_column(
    b: &mut Builder,
    input: NodeId,
    plan: &ResidualStagePlan,
    cfg: &ModelConfig,
    scale: usize,
    column: Column,
    prefix: &str,
    injections: Option<&InjectionSources>,
) -> Result<(NodeId, Vec<Feature>, Vec<Feature>)> {
    let dilations = stage_dilations(cfg.decoder);
    if matches!(cfg.decoder, DecoderVariant::Dilated | DecoderVariant::Mixed) && plan.units[3] == 0 {
        return Err(Error::Build(format!(
            "{} decoder dilates stage 5, but tap stride-{} was removed (stage 5 has zero units)",
            cfg.decoder.name(),
            32 * scale
        )));
    }
    let taps = add_backbone_column(b, input, plan, cfg.stem_width, dilations, scale, column, prefix)?;
    let taps = dedup_taps(&taps);
    match cfg.decoder {
        DecoderVariant::Classic => {
            let scores = add_classic_decoder(b, &taps, cfg.classes, column, prefix, scale)?;
            Ok((scores, Vec::new(), taps))
        }
        _ => {
            let spec = decoder_spec(cfg, taps.len(), column == Column::Full);
            let (scores, levels) =
                add_jump_decoder(b, &taps, &spec, cfg.classes, column, prefix, injections)?;
            Ok((scores, levels, taps))
        }
    }
}

/// Backbone feature strides (full-resolution pixels) available from a plan.
fn plan_full_strides(plan: &ResidualStagePlan, dilations: [usize; 4], scale: usize) -> Vec<usize> {
    plan.tap_strides(dilations).into_iter().map(|s| s * scale).collect()
}

/// Chooses the sparse-head feature tap: the deepest half-column feature
/// whose full-resolution stride divides the region size.
fn sparse_feature_stride(cfg: &ModelConfig) -> Result<usize> {
    let strides = plan_full_strides(&cfg.plan_half, stage_dilations(cfg.decoder), 2);
    strides
        .into_iter()
        .rev()
        .find(|s| cfg.region_px % s == 0)
        .ok_or_else(|| {
            Error::Build(format!(
                "no half-column feature stride divides the {}-px region size",
                cfg.region_px
            ))
        })
}

/// Builds a bare single-column backbone graph (taps only, no decoder).
pub fn build_backbone(plan: &ResidualStagePlan, stem_width: usize, image_h: usize, image_w: usize, seed: u64) -> Result<ModelGraph> {
    let cfg = ModelConfig {
        kind: GraphKind::SingleColumn,
        plan_full: *plan,
        stem_width,
        image_h,
        image_w,
        seed,
        ..ModelConfig::default()
    };
    let mut b = Builder::new(seed);
    let input = b.input(3, image_h, image_w);
    let taps = add_backbone_column(&mut b, input, plan, stem_width, [1; 4], 1, Column::Full, "col")?;
    let taps = dedup_taps(&taps);
    let deepest = taps.last().ok_or_else(|| Error::Build("backbone has no stages".into()))?;
    Ok(ModelGraph {
        nodes: b.nodes,
        outputs: GraphOutputs {
            main: deepest.node,
            aux_half: None,
            aux_full: None,
            z: None,
            s: None,
            taps: taps.iter().map(|t| (Column::Full, t.stride, t.node)).collect(),
        },
        config: cfg.to_graph_config(None),
    })
}

/// Builds a single-column model with the given decoder variant on top of
/// the backbone graph's configuration.
pub fn build_decoder(backbone: &ModelGraph, variant: DecoderVariant, classes: usize) -> Result<ModelGraph> {
    let cfg = ModelConfig {
        kind: GraphKind::SingleColumn,
        decoder: variant,
        plan_full: backbone.config.plan_full,
        stem_width: backbone.config.stem_width,
        decoder_width: backbone.config.decoder_width,
        classes,
        image_h: backbone.config.image_h,
        image_w: backbone.config.image_w,
        seed: backbone.config.seed,
        optimized: backbone.config.optimized,
        ..ModelConfig::default()
    };
    build_single_column(&cfg)
}

/// Builds a complete single-column segmentation model.
pub fn build_single_column(cfg: &ModelConfig) -> Result<ModelGraph> {
    let mut b = Builder::new(cfg.seed);
    let input = b.input(3, cfg.image_h, cfg.image_w);
    let (scores, _, taps) = add_column(&mut b, input, &cfg.plan_full, cfg, 1, Column::Full, "col", None)?;
    Ok(ModelGraph {
        nodes: b.nodes,
        outputs: GraphOutputs {
            main: scores,
            aux_half: None,
            aux_full: None,
            z: None,
            s: None,
            taps: taps.iter().map(|t| (Column::Full, t.stride, t.node)).collect(),
        },
        config: ModelConfig { kind: GraphKind::SingleColumn, ..cfg.clone() }.to_graph_config(None),
    })
}

/// Builds a two-column model with the requested fusion.
pub fn build_two_column(cfg: &ModelConfig) -> Result<ModelGraph> {
    let GraphKind::TwoColumn(fusion) = cfg.kind else {
        return Err(Error::Build("build_two_column needs a two-column kind".into()));
    };
    if cfg.image_h % 32 != 0 || cfg.image_w % 32 != 0 {
        return Err(Error::Build(format!(
            "image dims {}x{} must be divisible by 32",
            cfg.image_h, cfg.image_w
        )));
    }
    let mut b = Builder::new(cfg.seed);

    let grid = if fusion.is_sparse() {
        let fs = sparse_feature_stride(cfg)?;
        let grid = RegionGrid::new(cfg.image_h, cfg.image_w, cfg.region_px, fs)
            .map_err(|e| Error::Build(e.to_string()))?;
        b.grid = Some(grid);
        Some(grid)
    } else {
        None
    };

    let input = b.input(3, cfg.image_h, cfg.image_w);

    // half-resolution column on the bilinearly downsampled image
    let half_in = b.resample(
        input,
        ResampleFactor::Half,
        ResampleMode::Bilinear,
        Column::Half,
        "half.downsample",
    )?;
    let (half_scores, half_levels, half_taps) =
        add_column(&mut b, half_in, &cfg.plan_half, cfg, 2, Column::Half, "half", None)?;
    let sh_up = b.resample(
        half_scores,
        ResampleFactor::X2,
        ResampleMode::Bilinear,
        Column::Half,
        "half.scores.up",
    )?;

    // sparse head on the chosen half-column tap, before decoder upsampling
    let s_node = if fusion.is_sparse() {
        let grid = grid.unwrap();
        let tap = half_taps
            .iter()
            .find(|t| t.stride == grid.feature_stride)
            .ok_or_else(|| {
                Error::Build(format!(
                    "sparse head needs the stride-{} tap, which this plan removed",
                    grid.feature_stride
                ))
            })?;
        let s = b.conv(
            tap.node,
            1,
            (grid.tau, grid.tau),
            grid.tau,
            1,
            1,
            0,
            Init::Small,
            Column::Half,
            "sparse.head",
        )?;
        Some(s)
    } else {
        None
    };

    // full-resolution column, cropped per region for the sparse fusions
    let crop_policy = match fusion {
        FusionKind::Isctf => Some(CropPolicy::Always),
        FusionKind::Sctf => Some(CropPolicy::FastOnly),
        _ => None,
    };
    let full_in = match crop_policy {
        Some(policy) => b.crop(input, policy, 1, Column::Full, "full.crop")?,
        None => input,
    };
    let injections = (fusion == FusionKind::Isctf).then_some(InjectionSources {
        half_levels: &half_levels,
        crop_policy: CropPolicy::Always,
    });
    let (full_scores, full_levels, full_taps) = add_column(
        &mut b,
        full_in,
        &cfg.plan_full,
        cfg,
        1,
        Column::Full,
        "full",
        injections.as_ref(),
    )?;
    let sf = match crop_policy {
        Some(policy) => b.uncrop(full_scores, policy, 4, Column::Full, "full.scores.uncrop")?,
        None => full_scores,
    };

    // scale-weight head
    let z_node = match fusion {
        FusionKind::Ctf | FusionKind::Sctf | FusionKind::Isctf => {
            let src = half_levels
                .last()
                .ok_or_else(|| Error::Build("ctf weight head needs decoder levels".into()))?;
            let c1 = b.conv(src.node, 16, (3, 3), 1, 1, 1, 1, Init::He, Column::Half, "zhead.conv")?;
            let r1 = b.act(c1, ActKind::Relu, Column::Half, "zhead.relu");
            let logits = b.conv(r1, 2, (1, 1), 1, 1, 1, 0, Init::Zero, Column::Half, "zhead.logits")?;
            let up = b.resample(logits, ResampleFactor::X2, ResampleMode::Bilinear, Column::Half, "zhead.up")?;
            Some(b.softmax(up, Column::Half, "zhead.softmax"))
        }
        FusionKind::Attention => {
            let hsrc = half_levels
                .last()
                .ok_or_else(|| Error::Build("attention head needs decoder levels".into()))?;
            let fsrc = full_levels
                .last()
                .ok_or_else(|| Error::Build("attention head needs decoder levels".into()))?;
            let h_up = b.resample(hsrc.node, ResampleFactor::X2, ResampleMode::Bilinear, Column::Half, "zhead.half.up")?;
            let hp = b.conv(h_up, 16, (1, 1), 1, 1, 1, 0, Init::He, Column::Half, "zhead.half.proj")?;
            let fp = b.conv(fsrc.node, 16, (1, 1), 1, 1, 1, 0, Init::He, Column::Full, "zhead.full.proj")?;
            let joint = b.eltwise(hp, fp, EltwiseKind::Sum, Column::Shared, "zhead.join")?;
            let c1 = b.conv(joint, 16, (3, 3), 1, 1, 1, 1, Init::He, Column::Shared, "zhead.conv")?;
            let r1 = b.act(c1, ActKind::Relu, Column::Shared, "zhead.relu");
            let logits = b.conv(r1, 2, (1, 1), 1, 1, 1, 0, Init::Zero, Column::Shared, "zhead.logits")?;
            Some(b.softmax(logits, Column::Shared, "zhead.softmax"))
        }
        FusionKind::Sum | FusionKind::Max => None,
    };

    // fusion
    let main = match fusion {
        FusionKind::Sum => b.eltwise(sh_up, sf, EltwiseKind::Sum, Column::Shared, "fuse.sum")?,
        FusionKind::Max => b.eltwise(sh_up, sf, EltwiseKind::Max, Column::Shared, "fuse.max")?,
        FusionKind::Attention | FusionKind::Ctf => {
            let z = z_node.unwrap();
            let z1 = b.select_channel(z, 0, Column::Shared, "fuse.z1")?;
            let z2 = b.select_channel(z, 1, Column::Shared, "fuse.z2")?;
            let th = b.broadcast_mul(sh_up, z1, Column::Shared, "fuse.half")?;
            let tf = b.broadcast_mul(sf, z2, Column::Shared, "fuse.full")?;
            b.eltwise(th, tf, EltwiseKind::Sum, Column::Shared, "fuse.sum")?
        }
        FusionKind::Sctf | FusionKind::Isctf => {
            let z = z_node.unwrap();
            let z1 = b.select_channel(z, 0, Column::Shared, "fuse.z1")?;
            let z2 = b.select_channel(z, 1, Column::Shared, "fuse.z2")?;
            let (_, th4, tw4) = b.dims(sf);
            let u = b.sparse_weights(s_node.unwrap(), th4, tw4, "fuse.sparse")?;
            let w2 = b.eltwise(z2, u, EltwiseKind::Product, Column::Shared, "fuse.w2")?;
            let th = b.broadcast_mul(sh_up, z1, Column::Shared, "fuse.half")?;
            let tf = b.broadcast_mul(sf, w2, Column::Shared, "fuse.full")?;
            b.eltwise(th, tf, EltwiseKind::Sum, Column::Shared, "fuse.sum")?
        }
    };

    let mut taps: Vec<(Column, usize, NodeId)> =
        half_taps.iter().map(|t| (Column::Half, t.stride, t.node)).collect();
    taps.extend(full_taps.iter().map(|t| (Column::Full, t.stride, t.node)));

    Ok(ModelGraph {
        nodes: b.nodes,
        outputs: GraphOutputs {
            main,
            aux_half: (fusion == FusionKind::Isctf).then_some(sh_up),
            aux_full: (fusion == FusionKind::Isctf).then_some(sf),
            z: z_node,
            s: s_node,
            taps,
        },
        config: cfg.to_graph_config(grid),
    })
}

/// Builds a graph from a graph configuration (used to re-derive structure).
pub fn rebuild(config: &GraphConfig) -> Result<ModelGraph> {
    let cfg = ModelConfig {
        kind: config.kind,
        decoder: config.decoder,
        plan_full: config.plan_full,
        plan_half: config.plan_half,
        stem_width: config.stem_width,
        decoder_width: config.decoder_width,
        classes: config.classes,
        image_h: config.image_h,
        image_w: config.image_w,
        region_px: config.grid.map_or(0, |g| g.region_px),
        p: config.p,
        seed: config.seed,
        optimized: config.optimized,
    };
    match cfg.kind {
        GraphKind::SingleColumn => build_single_column(&cfg),
        GraphKind::TwoColumn(_) => build_two_column(&cfg),
    }
}

/// Applies the efficiency-oriented structure changes: shrinking decoder
/// widths, grouped decoder convolutions, and a 1x1 raw-feature layer in the
/// full-resolution column. Produces a freshly initialized graph.
pub fn optimize_structure(graph: &ModelGraph) -> Result<ModelGraph> {
    if graph.fusion() != Some(FusionKind::Isctf) {
        return Err(Error::Usage("structure optimization expects an isctf graph".into()));
    }
    if graph.config.optimized {
        return Err(Error::Usage("graph is already structure-optimized".into()));
    }
    let mut config = graph.config.clone();
    config.optimized = true;
    rebuild(&config)
}
