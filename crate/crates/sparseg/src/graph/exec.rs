//! Topological forward/backward execution of a model graph.
//!
//! One executor serves training (all crops, soft weights), classic inference
//! (all crops, masked weights) and fast inference (active crops only, masked
//! weights). The winner-take-all mask is derived on demand from the sparse
//! head's output, which the builders place before every consumer.

use super::{CropPolicy, ModelGraph, NodeId, NodeOp};
use crate::conv::conv2d_counted;
use crate::error::{Error, Result};
use crate::pipeline::{crop_to_active, uncrop_from_active};
use crate::sparsity::{select_wta, wta_count};
use crate::tensor::{
    activation, activation_adjoint, batchnorm, batchnorm_adjoint, batchnorm_adjoint_frozen,
    eltwise, eltwise_adjoint, pool_avg, pool_avg_adjoint, softmax_channels,
    softmax_channels_adjoint, BnCache, Tensor,
};
use crate::conv::conv2d_adjoint;
use crate::resample::{resample, resample_adjoint};
use crate::sparsity::{broadcast_weights, broadcast_weights_adjoint};
use std::collections::HashMap;

/// How a forward pass schedules crops and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExecMode {
    /// All crops, all-ones mask (soft sparse weights), batch-stats batchnorm.
    Train,
    /// All crops, winner-take-all mask, frozen batchnorm. `p_override`
    /// replaces the graph's configured target rate.
    Classic { p_override: Option<f64> },
    /// Active crops only, winner-take-all mask, frozen batchnorm.
    Fast { p: f64 },
}

impl ExecMode {
    fn is_train(self) -> bool {
        matches!(self, ExecMode::Train)
    }
    fn is_fast(self) -> bool {
        matches!(self, ExecMode::Fast { .. })
    }
}

/// All node outputs of one forward pass plus the sparsity decisions taken.
pub struct Activations {
    pub values: Vec<Option<Tensor>>,
    pub bn_caches: Vec<Option<BnCache>>,
    /// Binary region mask (n, 1, H, W); `None` until a consumer needed it.
    pub mask: Option<Tensor>,
    /// Per-image ascending region ids the crop nodes materialized.
    pub active: Option<Vec<Vec<usize>>>,
    pub mode: ExecMode,
    /// Convolution multiply-adds actually performed (one per kernel tap per
    /// output value, padding taps included).
    pub macs: u64,
}

impl Activations {
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id].as_ref().expect("node value missing")
    }
}

fn all_regions(n: usize, count: usize) -> Vec<Vec<usize>> {
    vec![(0..count).collect(); n]
}

/// Ensure mask/active are computed (requires the sparse head value).
fn ensure_mask(graph: &ModelGraph, acts: &mut Activations, n: usize) -> Result<()> {
    if acts.mask.is_some() {
        return Ok(());
    }
    let grid = graph.grid()?;
    let mask = match acts.mode {
        ExecMode::Train => Tensor::filled(n, 1, grid.rows, grid.cols, 1.0),
        ExecMode::Classic { p_override } => {
            let p = p_override.unwrap_or(graph.config.p);
            let s_id = graph.outputs.s.ok_or_else(|| {
                Error::Usage("graph has no sparse head; masked execution is undefined".into())
            })?;
            let s = acts.values[s_id]
                .as_ref()
                .ok_or_else(|| Error::Usage("sparse head not evaluated before its consumers".into()))?;
            select_wta(s, wta_count(validate_p(p)?, grid))?
        }
        ExecMode::Fast { p } => {
            let s_id = graph.outputs.s.ok_or_else(|| {
                Error::Usage("fast inference requires a sparse fusion (sctf/isctf)".into())
            })?;
            let s = acts.values[s_id]
                .as_ref()
                .ok_or_else(|| Error::Usage("sparse head not evaluated before its consumers".into()))?;
            select_wta(s, wta_count(validate_p(p)?, grid))?
        }
    };
    let active = if acts.mode.is_fast() {
        let (bn, _, h, w) = mask.dims();
        let mut lists = Vec::with_capacity(bn);
        for i in 0..bn {
            let mut l = Vec::new();
            for r in 0..h * w {
                if mask.data()[i * h * w + r] != 0.0 {
                    l.push(r);
                }
            }
            lists.push(l);
        }
        lists
    } else {
        all_regions(mask.n(), grid.count())
    };
    acts.mask = Some(mask);
    acts.active = Some(active);
    Ok(())
}

pub fn validate_p(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::Param(format!("target rate p = {p} outside [0, 1]")));
    }
    Ok(p)
}

/// Evaluates every node of the graph on `image`.
pub fn forward(graph: &ModelGraph, image: &Tensor, mode: ExecMode) -> Result<Activations> {
    let (n, c, h, w) = image.dims();
    if c != 3 || h != graph.config.image_h || w != graph.config.image_w {
        return Err(Error::Param(format!(
            "graph was built for 3x{}x{} images, got {c}x{h}x{w}",
            graph.config.image_h, graph.config.image_w
        )));
    }
    let mut acts = Activations {
        values: vec![None; graph.nodes.len()],
        bn_caches: vec![None; graph.nodes.len()],
        mask: None,
        active: None,
        mode,
        macs: 0,
    };
    let train = mode.is_train();
    let fast = mode.is_fast();
    for id in 0..graph.nodes.len() {
        let node = &graph.nodes[id];
        let ins = &node.inputs;
        let value = match &node.op {
            NodeOp::Input => image.clone(),
            NodeOp::Conv(p) => conv2d_counted(acts.value(ins[0]), p, &mut acts.macs)?,
            NodeOp::BatchNorm(p) => {
                let (out, cache) = batchnorm(acts.value(ins[0]), p, train)?;
                acts.bn_caches[id] = cache;
                out
            }
            NodeOp::Act(kind) => activation(acts.value(ins[0]), *kind),
            NodeOp::SoftmaxChannels => softmax_channels(acts.value(ins[0])),
            NodeOp::Eltwise(kind) => eltwise(acts.value(ins[0]), acts.value(ins[1]), *kind)?,
            NodeOp::Resample { factor, mode } => resample(acts.value(ins[0]), *factor, *mode)?,
            NodeOp::PoolAvg => pool_avg(acts.value(ins[0]))?,
            NodeOp::StopGrad => acts.value(ins[0]).clone(),
            NodeOp::SelectChannel(ch) => {
                let v = acts.value(ins[0]);
                let (vn, _, vh, vw) = v.dims();
                let mut out = Tensor::zeros(vn, 1, vh, vw);
                for i in 0..vn {
                    for y in 0..vh {
                        for x in 0..vw {
                            out.set(i, 0, y, x, v.at(i, *ch, y, x));
                        }
                    }
                }
                out
            }
            NodeOp::BroadcastMul => {
                let a = acts.value(ins[0]);
                let b = acts.value(ins[1]);
                let (vn, vc, vh, vw) = a.dims();
                let mut out = Tensor::zeros(vn, vc, vh, vw);
                for i in 0..vn {
                    for ch in 0..vc {
                        for y in 0..vh {
                            for x in 0..vw {
                                out.set(i, ch, y, x, a.at(i, ch, y, x) * b.at(i, 0, y, x));
                            }
                        }
                    }
                }
                out
            }
            NodeOp::Crop { policy, stride } => {
                if !fast && *policy == CropPolicy::FastOnly {
                    acts.value(ins[0]).clone()
                } else {
                    ensure_mask(graph, &mut acts, n)?;
                    let grid = graph.grid()?;
                    crop_to_active(acts.value(ins[0]), grid, *stride, acts.active.as_ref().unwrap())?
                }
            }
            NodeOp::Uncrop { policy, stride } => {
                if !fast && *policy == CropPolicy::FastOnly {
                    acts.value(ins[0]).clone()
                } else {
                    let grid = graph.grid()?;
                    uncrop_from_active(
                        acts.value(ins[0]),
                        grid,
                        *stride,
                        acts.active.as_ref().unwrap(),
                    )?
                }
            }
            NodeOp::SparseWeights => {
                ensure_mask(graph, &mut acts, n)?;
                let s = acts.value(ins[0]);
                let (_, th, tw) = node.dims;
                broadcast_weights(acts.mask.as_ref().unwrap(), s, th, tw)?
            }
        };
        acts.values[id] = Some(value);
    }
    Ok(acts)
}

/// Parameter gradients of one backward pass.
#[derive(Debug, Default)]
pub struct GradientStore {
    pub node_grads: Vec<Option<Tensor>>,
    /// node -> (weight grad, bias grad)
    pub conv: HashMap<NodeId, (Tensor, Vec<f64>)>,
    /// node -> (scale grad, shift grad)
    pub bn: HashMap<NodeId, (Vec<f64>, Vec<f64>)>,
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(t) => {
            assert_eq!(t.dims(), g.dims());
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Back-propagates the given output-gradient seeds through the graph.
pub fn backward(
    graph: &ModelGraph,
    acts: &Activations,
    seeds: Vec<(NodeId, Tensor)>,
) -> Result<GradientStore> {
    let mut store = GradientStore {
        node_grads: vec![None; graph.nodes.len()],
        conv: HashMap::new(),
        bn: HashMap::new(),
    };
    for (id, g) in seeds {
        add_grad(&mut store.node_grads[id], g);
    }
    let train = acts.mode.is_train();
    let fast = acts.mode.is_fast();
    for id in (0..graph.nodes.len()).rev() {
        let Some(g) = store.node_grads[id].take() else { continue };
        let node = &graph.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            NodeOp::Input => {}
            NodeOp::Conv(p) => {
                let (gi, gw, gb) = conv2d_adjoint(acts.value(ins[0]), p, &g)?;
                add_grad(&mut store.node_grads[ins[0]], gi);
                match store.conv.entry(id) {
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert((gw, gb));
                    }
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let (w, b) = e.get_mut();
                        for (a, v) in w.data_mut().iter_mut().zip(gw.data()) {
                            *a += v;
                        }
                        for (a, v) in b.iter_mut().zip(gb.iter()) {
                            *a += v;
                        }
                    }
                }
            }
            NodeOp::BatchNorm(p) => {
                let (gi, gs, gb) = if train {
                    let cache = acts.bn_caches[id].as_ref().expect("bn cache");
                    batchnorm_adjoint(acts.value(ins[0]), p, cache, &g)
                } else {
                    batchnorm_adjoint_frozen(p, &g)
                };
                add_grad(&mut store.node_grads[ins[0]], gi);
                let entry = store.bn.entry(id).or_insert_with(|| {
                    (vec![0.0; p.channels()], vec![0.0; p.channels()])
                });
                for (a, v) in entry.0.iter_mut().zip(gs.iter()) {
                    *a += v;
                }
                for (a, v) in entry.1.iter_mut().zip(gb.iter()) {
                    *a += v;
                }
            }
            NodeOp::Act(kind) => {
                let gi = activation_adjoint(acts.value(ins[0]), *kind, &g);
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::SoftmaxChannels => {
                let gi = softmax_channels_adjoint(acts.value(id), &g);
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::Eltwise(kind) => {
                let (ga, gb) = eltwise_adjoint(acts.value(ins[0]), acts.value(ins[1]), *kind, &g);
                add_grad(&mut store.node_grads[ins[0]], ga);
                add_grad(&mut store.node_grads[ins[1]], gb);
            }
            NodeOp::Resample { factor, mode } => {
                let gi = resample_adjoint(acts.value(ins[0]).dims(), *factor, *mode, &g);
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::PoolAvg => {
                let gi = pool_avg_adjoint(acts.value(ins[0]).dims(), &g);
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::StopGrad => {}
            NodeOp::SelectChannel(ch) => {
                let v = acts.value(ins[0]);
                let (vn, vc, vh, vw) = v.dims();
                let mut gi = Tensor::zeros(vn, vc, vh, vw);
                for i in 0..vn {
                    for y in 0..vh {
                        for x in 0..vw {
                            gi.set(i, *ch, y, x, g.at(i, 0, y, x));
                        }
                    }
                }
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::BroadcastMul => {
                let a = acts.value(ins[0]);
                let b = acts.value(ins[1]);
                let (vn, vc, vh, vw) = a.dims();
                let mut ga = Tensor::zeros(vn, vc, vh, vw);
                let mut gb = Tensor::zeros(vn, 1, vh, vw);
                for i in 0..vn {
                    for y in 0..vh {
                        for x in 0..vw {
                            let mut acc = 0.0;
                            for ch in 0..vc {
                                ga.set(i, ch, y, x, g.at(i, ch, y, x) * b.at(i, 0, y, x));
                                acc += g.at(i, ch, y, x) * a.at(i, ch, y, x);
                            }
                            gb.set(i, 0, y, x, acc);
                        }
                    }
                }
                add_grad(&mut store.node_grads[ins[0]], ga);
                add_grad(&mut store.node_grads[ins[1]], gb);
            }
            NodeOp::Crop { policy, stride } => {
                let gi = if !fast && *policy == CropPolicy::FastOnly {
                    g
                } else {
                    uncrop_from_active(&g, graph.grid()?, *stride, acts.active.as_ref().unwrap())?
                };
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::Uncrop { policy, stride } => {
                let gi = if !fast && *policy == CropPolicy::FastOnly {
                    g
                } else {
                    crop_to_active(&g, graph.grid()?, *stride, acts.active.as_ref().unwrap())?
                };
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
            NodeOp::SparseWeights => {
                let gi = broadcast_weights_adjoint(
                    acts.mask.as_ref().expect("mask"),
                    acts.value(ins[0]),
                    &g,
                );
                add_grad(&mut store.node_grads[ins[0]], gi);
            }
        }
    }
    Ok(store)
}
