//! Tree-structured multi-layer network: block geometry, greedy layer-wise
//! training, frame inference with an optional top-down pass, and
//! receptive-field back-projection.
//!
//! Layer 1 blocks each pool a `group` grid of `patch_size` pixel patches
//! spaced `stride` pixels apart. Blocks of layer `l ≥ 2` pool a `group` grid
//! of layer `l−1` blocks whose origins are `stride` pixels apart. Every layer
//! replicates its block on a `grid` with spacing `grid_stride`, and all
//! replicas share one set of parameters.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_patch_groups, GroupGeometry, PatchGroupSequence, Video};
use crate::error::{ensure_len, Error, Result};
use crate::inference::{JointOutcome, JointSolver};
use crate::learning::{train_layer_from, BatchReport};
use crate::model::{HyperParams, LayerDims, LayerParams, LayerState};
use crate::seed;

/// Block arrangement of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTopology {
    /// Members per block as (rows, cols).
    pub group: (usize, usize),
    /// Pixel spacing between members.
    pub stride: usize,
    /// Replicated blocks as (rows, cols).
    pub grid: (usize, usize),
    /// Pixel spacing between replicated blocks.
    pub grid_stride: usize,
}

impl LayerTopology {
    pub fn group_size(&self) -> usize {
        self.group.0 * self.group.1
    }

    fn member_offsets(&self) -> Vec<(usize, usize)> {
        grid_points(self.group, self.stride)
    }
}

fn grid_points(shape: (usize, usize), spacing: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(shape.0 * shape.1);
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            v.push((i * spacing, j * spacing));
        }
    }
    v
}

/// Geometry of the whole network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub patch_size: usize,
    pub layers: Vec<LayerTopology>,
}

impl Topology {
    /// Two layers over 32×32 frames: 12-pixel patches in 2×2 groups spaced
    /// 8 pixels apart, four layer-1 blocks, one layer-2 block covering the
    /// frame.
    pub fn shapes() -> Self {
        Self {
            patch_size: 12,
            layers: vec![
                LayerTopology {
                    group: (2, 2),
                    stride: 8,
                    grid: (2, 2),
                    grid_stride: 12,
                },
                LayerTopology {
                    group: (2, 2),
                    stride: 12,
                    grid: (1, 1),
                    grid_stride: 0,
                },
            ],
        }
    }

    /// 15-pixel patches in a 2×2 group two pixels apart: a 17×17 layer-1
    /// receptive field. The second layer pools four blocks three pixels
    /// apart.
    pub fn natural_video() -> Self {
        Self {
            patch_size: 15,
            layers: vec![
                LayerTopology {
                    group: (2, 2),
                    stride: 2,
                    grid: (2, 2),
                    grid_stride: 3,
                },
                LayerTopology {
                    group: (2, 2),
                    stride: 3,
                    grid: (1, 1),
                    grid_stride: 0,
                },
            ],
        }
    }

    /// One block of one patch.
    pub fn single_patch(patch_size: usize) -> Self {
        Self {
            patch_size,
            layers: vec![LayerTopology {
                group: (1, 1),
                stride: 0,
                grid: (1, 1),
                grid_stride: 0,
            }],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Keeps the lowest `depth` layers.
    pub fn truncated(&self, depth: usize) -> Result<Self> {
        if depth == 0 || depth > self.depth() {
            return Err(Error::param(format!(
                "cannot keep {depth} of {} layers",
                self.depth()
            )));
        }
        Ok(Self {
            patch_size: self.patch_size,
            layers: self.layers[..depth].to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Topology {
                boundary: 0,
                message: "patch size must be positive".into(),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Topology {
                boundary: 0,
                message: "network needs at least one layer".into(),
            });
        }
        for (l, lt) in self.layers.iter().enumerate() {
            let bad = |message: String| Error::Topology { boundary: l, message };
            if lt.group.0 == 0 || lt.group.1 == 0 || lt.grid.0 == 0 || lt.grid.1 == 0 {
                return Err(bad(format!("layer {} has an empty group or grid", l + 1)));
            }
            if lt.stride == 0 && lt.group_size() > 1 {
                return Err(bad(format!("layer {} groups several members with zero stride", l + 1)));
            }
            if lt.grid_stride == 0 && lt.grid.0 * lt.grid.1 > 1 {
                return Err(bad(format!("layer {} replicates blocks with zero spacing", l + 1)));
            }
            if l > 0 {
                self.children_checked(l)?;
            }
        }
        Ok(())
    }

    /// Receptive-field side lengths per layer, as (rows, cols).
    pub fn receptive_fields(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.depth());
        let mut rf = (self.patch_size, self.patch_size);
        for lt in &self.layers {
            rf = (
                rf.0 + lt.stride * (lt.group.0 - 1),
                rf.1 + lt.stride * (lt.group.1 - 1),
            );
            out.push(rf);
        }
        out
    }

    /// Top-left pixel of every replicated block of layer `l`, row-major.
    pub fn block_origins(&self, l: usize) -> Vec<(usize, usize)> {
        let lt = &self.layers[l];
        grid_points(lt.grid, lt.grid_stride)
    }

    pub fn block_count(&self, l: usize) -> usize {
        let g = self.layers[l].grid;
        g.0 * g.1
    }

    /// Frame size (rows, cols) needed to hold every block.
    pub fn frame_extent(&self) -> (usize, usize) {
        let rfs = self.receptive_fields();
        let mut ext = (0, 0);
        for (l, rf) in rfs.iter().enumerate() {
            for (r, c) in self.block_origins(l) {
                ext.0 = ext.0.max(r + rf.0);
                ext.1 = ext.1.max(c + rf.1);
            }
        }
        ext
    }

    /// Patch geometry of the layer-1 block `b`.
    pub fn patch_geometry(&self, b: usize) -> GroupGeometry {
        let lt = &self.layers[0];
        GroupGeometry {
            patch_size: self.patch_size,
            stride: lt.stride,
            group_shape: lt.group,
            origin: self.block_origins(0)[b],
        }
    }

    fn children_checked(&self, l: usize) -> Result<Vec<Vec<usize>>> {
        let below = self.block_origins(l - 1);
        let offsets = self.layers[l].member_offsets();
        self.block_origins(l)
            .into_iter()
            .map(|(r, c)| {
                offsets
                    .iter()
                    .map(|&(dr, dc)| {
                        let want = (r + dr, c + dc);
                        below.iter().position(|&o| o == want).ok_or_else(|| Error::Topology {
                            boundary: l,
                            message: format!(
                                "layer {} member at pixel ({}, {}) has no layer {} block there",
                                l + 1,
                                want.0,
                                want.1,
                                l
                            ),
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// For each block of layer `l ≥ 1`, the indices of the layer `l−1`
    /// blocks it pools, in member order.
    pub fn children(&self, l: usize) -> Vec<Vec<usize>> {
        self.children_checked(l).expect("validated topology")
    }

    /// Dimensions implied for layer `l` given its state and cause sizes and
    /// the cause size of the layer below.
    pub fn layer_dims(&self, l: usize, state: usize, causes: usize, causes_below: usize) -> Result<LayerDims> {
        let input = if l == 0 {
            self.patch_size * self.patch_size
        } else {
            causes_below
        };
        LayerDims::new(state, input, causes, self.layers[l].group_size())
    }
}

/// Parameters and hyperparameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkLayer {
    pub params: LayerParams,
    pub hyper: HyperParams,
}

/// Layers plus their geometry. Inference history lives in a separate
/// [`InferenceContext`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<NetworkLayer>,
    pub topology: Topology,
    trained: bool,
}

fn check_chain(topology: &Topology, dims: &[LayerDims]) -> Result<()> {
    topology.validate()?;
    if dims.len() != topology.depth() {
        return Err(Error::Topology {
            boundary: 0,
            message: format!("{} layer dimensions for a {}-layer topology", dims.len(), topology.depth()),
        });
    }
    for (l, d) in dims.iter().enumerate() {
        d.validate()?;
        let want_input = if l == 0 {
            topology.patch_size * topology.patch_size
        } else {
            dims[l - 1].causes
        };
        if d.input != want_input {
            return Err(Error::Topology {
                boundary: l,
                message: format!(
                    "layer {} input dimension {} does not match {} from below",
                    l + 1,
                    d.input,
                    want_input
                ),
            });
        }
        let group = topology.layers[l].group_size();
        if d.group != group {
            return Err(Error::Topology {
                boundary: l,
                message: format!("layer {} pools {} members, topology groups {}", l + 1, d.group, group),
            });
        }
    }
    Ok(())
}

impl Network {
    /// Network from explicit parameters, treated as trained.
    pub fn from_layers(topology: Topology, layers: Vec<(LayerParams, HyperParams)>) -> Result<Self> {
        let dims: Vec<LayerDims> = layers.iter().map(|(p, _)| p.dims).collect();
        check_chain(&topology, &dims)?;
        for (p, h) in &layers {
            p.validate()?;
            h.validate()?;
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|(params, hyper)| NetworkLayer { params, hyper })
                .collect(),
            topology,
            trained: true,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn dims(&self) -> Vec<LayerDims> {
        self.layers.iter().map(|l| l.params.dims).collect()
    }

    /// Width of one row of [`infer_sequence`] output.
    pub fn top_width(&self) -> usize {
        let l = self.depth() - 1;
        self.topology.block_count(l) * self.layers[l].params.dims.causes
    }
}

/// Freshly initialized network; each layer draws from its own seed.
pub fn build_network(topology: &Topology, dims: &[LayerDims], hypers: &[HyperParams], seed: u64) -> Result<Network> {
    check_chain(topology, dims)?;
    if hypers.len() != dims.len() {
        return Err(Error::param(format!(
            "{} hyperparameter sets for {} layers",
            hypers.len(),
            dims.len()
        )));
    }
    let mut layers = Vec::with_capacity(dims.len());
    for (l, (&d, h)) in dims.iter().zip(hypers).enumerate() {
        h.validate()?;
        layers.push(NetworkLayer {
            params: LayerParams::new(d, seed::derive_indexed(seed, "layer-init", l as u64))?,
            hyper: *h,
        });
    }
    Ok(Network {
        layers,
        topology: topology.clone(),
        trained: false,
    })
}

/// Per-layer, per-block results of the previous frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceContext {
    history: Option<Vec<Vec<LayerState>>>,
    frames_seen: usize,
}

impl InferenceContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn history(&self) -> Option<&[Vec<LayerState>]> {
        self.history.as_deref()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    fn check(&self, net: &Network) -> Result<()> {
        let Some(h) = &self.history else { return Ok(()) };
        if h.len() != net.depth() {
            return Err(Error::State(format!(
                "history holds {} layers, network has {}",
                h.len(),
                net.depth()
            )));
        }
        for (l, blocks) in h.iter().enumerate() {
            if blocks.len() != net.topology.block_count(l) {
                return Err(Error::State(format!("history for layer {} has the wrong block count", l + 1)));
            }
            for s in blocks {
                s.validate(net.layers[l].params.dims)
                    .map_err(|e| Error::State(format!("history for layer {}: {e}", l + 1)))?;
            }
        }
        Ok(())
    }
}

fn zero_priors(net: &Network) -> Vec<Vec<Array1<f64>>> {
    (0..net.depth())
        .map(|l| vec![Array1::zeros(net.layers[l].params.dims.causes); net.topology.block_count(l)])
        .collect()
}

/// Predicted causes for every block of every layer before the next frame.
///
/// The top layer carries its previous causes. Going down, each block
/// predicts its members' states from their previous values and its own
/// predicted causes, and maps them through its dictionary to predicted
/// causes of the child blocks. Children shared by several parents average
/// the parents' predictions. Without history every prediction is zero.
pub fn top_down_pass(net: &Network, ctx: &InferenceContext) -> Result<Vec<Vec<Array1<f64>>>> {
    ctx.check(net)?;
    let mut priors = zero_priors(net);
    let Some(history) = &ctx.history else {
        return Ok(priors);
    };
    let top = net.depth() - 1;
    for (p, s) in priors[top].iter_mut().zip(&history[top]) {
        p.assign(&s.causes);
    }
    for l in (1..net.depth()).rev() {
        let layer = &net.layers[l];
        let children = net.topology.children(l);
        let dims_below = net.layers[l - 1].params.dims;
        let mut sums = vec![Array1::<f64>::zeros(dims_below.causes); net.topology.block_count(l - 1)];
        let mut counts = vec![0usize; sums.len()];
        for (b, kids) in children.iter().enumerate() {
            for (n, &c) in kids.iter().enumerate() {
                let pred = crate::inference::top_down_prediction(
                    history[l][b].states[n].view(),
                    &layer.params,
                    priors[l][b].view(),
                    &layer.hyper,
                )?;
                sums[c] += &pred.u_hat;
                counts[c] += 1;
            }
        }
        for ((p, s), &n) in priors[l - 1].iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *p = s / n as f64;
            }
        }
    }
    Ok(priors)
}

/// Frame inference with cached per-layer solvers.
struct Engine<'a> {
    net: &'a Network,
    solvers: Vec<JointSolver<'a>>,
    children: Vec<Vec<Vec<usize>>>,
    geometries: Vec<GroupGeometry>,
}

impl<'a> Engine<'a> {
    fn new(net: &'a Network) -> Result<Self> {
        if !net.trained {
            return Err(Error::State("network has not been trained".into()));
        }
        let solvers = net
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| Ok(JointSolver::new(&layer.params, &layer.hyper)?.with_layer_index(l)))
            .collect::<Result<Vec<_>>>()?;
        let children = (0..net.depth())
            .map(|l| if l == 0 { Vec::new() } else { net.topology.children(l) })
            .collect();
        let geometries = (0..net.topology.block_count(0))
            .map(|b| net.topology.patch_geometry(b))
            .collect();
        Ok(Self {
            net,
            solvers,
            children,
            geometries,
        })
    }

    fn infer_frame(
        &self,
        ctx: &mut InferenceContext,
        frame: &[f32],
        width: usize,
        height: usize,
        use_top_down: bool,
    ) -> Result<Vec<Vec<LayerState>>> {
        let net = self.net;
        ctx.check(net)?;
        let (need_h, need_w) = net.topology.frame_extent();
        if need_h > height || need_w > width {
            return Err(Error::Geometry(format!(
                "topology needs a {need_w}x{need_h} frame, got {width}x{height}"
            )));
        }
        ensure_len("frame", frame.len(), width * height)?;
        let priors = if use_top_down {
            top_down_pass(net, ctx)?
        } else {
            zero_priors(net)
        };
        let mut out: Vec<Vec<LayerState>> = Vec::with_capacity(net.depth());
        for l in 0..net.depth() {
            let dims = net.layers[l].params.dims;
            let inputs: Vec<Vec<Array1<f64>>> = if l == 0 {
                self.geometries
                    .iter()
                    .map(|g| {
                        g.patch_origins()
                            .into_iter()
                            .map(|o| crate::data::extract_patch(frame, width, o, g.patch_size))
                            .collect()
                    })
                    .collect()
            } else {
                gather_inputs(&self.children[l], &out[l - 1])
            };
            let prev: Vec<Vec<Array1<f64>>> = match &ctx.history {
                Some(h) => h[l].iter().map(|s| s.states.clone()).collect(),
                None => vec![vec![Array1::zeros(dims.state); dims.group]; inputs.len()],
            };
            let states = infer_layer_blocks(&self.solvers[l], &inputs, &prev, &priors[l])?;
            out.push(states.into_iter().map(|o| o.state).collect());
        }
        ctx.history = Some(out.clone());
        ctx.frames_seen += 1;
        Ok(out)
    }
}

/// Inputs of every block of a layer: the causes of its child blocks.
pub fn gather_inputs(children: &[Vec<usize>], below: &[LayerState]) -> Vec<Vec<Array1<f64>>> {
    children
        .iter()
        .map(|kids| kids.iter().map(|&c| below[c].causes.clone()).collect())
        .collect()
}

/// Joint inference of all replicated blocks of one layer, in parallel.
pub fn infer_layer_blocks(
    solver: &JointSolver<'_>,
    inputs: &[Vec<Array1<f64>>],
    prev: &[Vec<Array1<f64>>],
    priors: &[Array1<f64>],
) -> Result<Vec<JointOutcome>> {
    ensure_len("previous states per block", prev.len(), inputs.len())?;
    ensure_len("priors per block", priors.len(), inputs.len())?;
    inputs
        .par_iter()
        .zip(prev.par_iter())
        .zip(priors.par_iter())
        .map(|((y, xp), p)| solver.infer(y, xp, Some(p.view())))
        .collect()
}

/// Infers one frame (`height × width`, row-major) through every layer.
///
/// Bottom-up inference uses zero cause predictions in every layer; with
/// `use_top_down` the predictions come from [`top_down_pass`]. The context
/// advances to this frame either way.
pub fn infer_frame(
    net: &Network,
    ctx: &mut InferenceContext,
    frame: &[f32],
    width: usize,
    height: usize,
    use_top_down: bool,
) -> Result<Vec<Vec<LayerState>>> {
    Engine::new(net)?.infer_frame(ctx, frame, width, height, use_top_down)
}

/// All layer states of every frame, in order, from a fresh context.
pub fn infer_sequence_full(net: &Network, video: &Video, use_top_down: bool) -> Result<Vec<Vec<Vec<LayerState>>>> {
    let engine = Engine::new(net)?;
    let mut ctx = InferenceContext::new();
    (0..video.frame_count())
        .map(|t| engine.infer_frame(&mut ctx, video.frame(t), video.width(), video.height(), use_top_down))
        .collect()
}

/// Top-layer causes per frame: one row per frame, the causes of the top
/// blocks concatenated in block order.
pub fn infer_sequence(net: &Network, video: &Video, use_top_down: bool) -> Result<Array2<f64>> {
    let engine = Engine::new(net)?;
    let mut ctx = InferenceContext::new();
    let width = net.top_width();
    let mut out = Array2::zeros((video.frame_count(), width));
    for t in 0..video.frame_count() {
        let states = engine.infer_frame(&mut ctx, video.frame(t), video.width(), video.height(), use_top_down)?;
        let top = states.last().expect("at least one layer");
        let row: Vec<f64> = top.iter().flat_map(|s| s.causes.iter().copied()).collect();
        out.row_mut(t).assign(&Array1::from(row));
    }
    Ok(out)
}

/// CSV with a `u0,u1,...` header and one row per frame.
pub fn causes_to_csv(causes: &Array2<f64>) -> String {
    let mut s = (0..causes.ncols())
        .map(|j| format!("u{j}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for row in causes.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn write_causes_csv(causes: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, causes_to_csv(causes)).map_err(|e| Error::io(path, e))
}

/// Sequential bottom-up inference of one layer over per-block input
/// streams, returning each block's cause sequence.
fn cause_sequences(
    solver: &JointSolver<'_>,
    streams: &[PatchGroupSequence],
    layer: usize,
) -> Result<Vec<Vec<Array1<f64>>>> {
    let dims = solver.params().dims;
    let zero = Array1::zeros(dims.causes);
    streams
        .par_iter()
        .map(|stream| {
            let mut prev = vec![Array1::zeros(dims.state); dims.group];
            let mut causes = Vec::with_capacity(stream.len());
            for t in 0..stream.len() {
                let out = solver
                    .infer(stream.group(t), &prev, Some(zero.view()))
                    .map_err(|e| Error::Training {
                        layer,
                        timestep: t,
                        source: Box::new(e),
                    })?;
                prev = out.state.states;
                causes.push(out.state.causes);
            }
            Ok(causes)
        })
        .collect()
}

/// Greedy layer-wise training. Layer 1 trains on the patch groups of every
/// replicated block; each trained layer is frozen and its bottom-up causes
/// become the grouped inputs of the layer above. No top-down predictions
/// are used while learning.
pub fn train_network(
    video: &Video,
    topology: &Topology,
    dims: &[LayerDims],
    hypers: &[HyperParams],
    seed: u64,
    observer: &mut dyn FnMut(&BatchReport),
) -> Result<Network> {
    let mut net = build_network(topology, dims, hypers, seed)?;
    if video.is_empty() {
        return Err(Error::State("cannot train on an empty video".into()));
    }
    let mut streams: Vec<PatchGroupSequence> = (0..topology.block_count(0))
        .map(|b| extract_patch_groups(video, topology.patch_geometry(b)))
        .collect::<Result<_>>()?;
    for l in 0..net.depth() {
        let layer = &net.layers[l];
        let trained = train_layer_from(&streams, layer.params.clone(), &layer.hyper, l, true, observer)?;
        net.layers[l].params = trained.params;
        if l + 1 == net.depth() {
            break;
        }
        let layer = &net.layers[l];
        let solver = JointSolver::new(&layer.params, &layer.hyper)?.with_layer_index(l);
        let causes = cause_sequences(&solver, &streams, l)?;
        let group = topology.layers[l + 1].group_size();
        streams = topology
            .children(l + 1)
            .iter()
            .map(|kids| {
                let groups = (0..video.frame_count())
                    .map(|t| kids.iter().map(|&c| causes[c][t].clone()).collect())
                    .collect();
                PatchGroupSequence::from_groups(group, dims[l].causes, groups)
            })
            .collect::<Result<_>>()?;
    }
    net.trained = true;
    Ok(net)
}

/// Linear back-projection of a weighting over the states of `layer` onto
/// the pixels of that layer's receptive field: each member contributes its
/// dictionary image of the weights, and above layer 1 the resulting
/// cause-space vector is spread over the child's states through `|B|`.
pub fn back_project(net: &Network, layer: usize, weights: ArrayView1<f64>) -> Result<Array2<f64>> {
    if layer >= net.depth() {
        return Err(Error::Index(format!("layer {layer} out of range 0..{}", net.depth())));
    }
    let params = &net.layers[layer].params;
    ensure_len("state weights", weights.len(), params.dims.state)?;
    let rf = net.topology.receptive_fields()[layer];
    let mut img = Array2::zeros(rf);
    let input = params.dictionary.dot(&weights);
    let offsets = net.topology.layers[layer].member_offsets();
    if layer == 0 {
        let p = net.topology.patch_size;
        let patch = input
            .into_shape_with_order((p, p))
            .map_err(|e| Error::dim(e.to_string()))?;
        for (r, c) in offsets {
            let mut win = img.slice_mut(ndarray::s![r..r + p, c..c + p]);
            win += &patch;
        }
    } else {
        let below = &net.layers[layer - 1].params;
        let child_weights = below.invariance.mapv(f64::abs).dot(&input);
        let child = back_project(net, layer - 1, child_weights.view())?;
        let (h, w) = child.dim();
        for (r, c) in offsets {
            let mut win = img.slice_mut(ndarray::s![r..r + h, c..c + w]);
            win += &child;
        }
    }
    Ok(img)
}

/// Pixel-space pattern of cause `unit` of `layer`, scaled to [0, 1]. The
/// unit weights the layer's states by the absolute values of its column of
/// `B`. A flat pattern maps to all zeros.
pub fn receptive_field(net: &Network, layer: usize, unit: usize) -> Result<Array2<f64>> {
    if layer >= net.depth() {
        return Err(Error::Index(format!("layer {layer} out of range 0..{}", net.depth())));
    }
    let b = &net.layers[layer].params.invariance;
    if unit >= b.ncols() {
        return Err(Error::Index(format!("unit {unit} out of range 0..{}", b.ncols())));
    }
    let raw = back_project(net, layer, b.column(unit).mapv(f64::abs).view())?;
    Ok(rescale_unit(&raw))
}

/// Affine map of the values onto [0, 1]; constant input maps to zeros.
pub fn rescale_unit(img: &Array2<f64>) -> Array2<f64> {
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(img.dim());
    }
    img.mapv(|v| (v - lo) / (hi - lo))
}

/// Binary 8-bit PGM (P5) of an image with values in [0, 1].
pub fn encode_pgm(img: &Array2<f64>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(img: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// `rf_L{layer}_U{unit}.pgm`, with one-based layer numbering.
pub fn receptive_field_filename(layer: usize, unit: usize) -> String {
    format!("rf_L{}_U{}.pgm", layer + 1, unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{predict_causes, predict_states, unified_energy};
    use ndarray::array;

    fn shapes_dims() -> Vec<LayerDims> {
        vec![
            LayerDims::new(100, 144, 40, 4).unwrap(),
            LayerDims::new(60, 40, 3, 4).unwrap(),
        ]
    }

    #[test]
    fn shapes_topology_covers_the_frame() {
        let t = Topology::shapes();
        t.validate().unwrap();
        assert_eq!(t.receptive_fields(), vec![(20, 20), (32, 32)]);
        assert_eq!(t.frame_extent(), (32, 32));
        let mut origins: Vec<usize> = (0..4)
            .flat_map(|b| t.patch_geometry(b).patch_origins())
            .map(|(r, _)| r)
            .collect();
        origins.sort_unstable();
        origins.dedup();
        assert_eq!(origins, vec![0, 8, 12, 20]);
        assert_eq!(t.children(1), vec![vec![0, 1, 2, 3]]);
        let net = build_network(&t, &shapes_dims(), &[HyperParams::default(); 2], 0).unwrap();
        assert_eq!(net.top_width(), 3);
        assert!(!net.is_trained());
    }

    #[test]
    fn natural_topology_fields() {
        let t = Topology::natural_video();
        t.validate().unwrap();
        assert_eq!(t.receptive_fields()[0], (17, 17));
        let rfs = t.receptive_fields();
        assert!(rfs.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn chain_mismatches_name_the_boundary() {
        let t = Topology::shapes();
        let mut dims = shapes_dims();
        dims[1].input = 39;
        let err = build_network(&t, &dims, &[HyperParams::default(); 2], 0).unwrap_err();
        assert!(matches!(err, Error::Topology { boundary: 1, .. }), "{err}");
        let mut dims = shapes_dims();
        dims[0].group = 2;
        assert!(matches!(
            build_network(&t, &dims, &[HyperParams::default(); 2], 0),
            Err(Error::Topology { boundary: 0, .. })
        ));
        let mut bad = Topology::shapes();
        bad.layers[1].stride = 5;
        assert!(matches!(bad.validate(), Err(Error::Topology { boundary: 1, .. })));
    }

    #[test]
    fn single_patch_network() {
        let t = Topology::single_patch(3);
        let d = [LayerDims::new(4, 9, 2, 1).unwrap()];
        let net = build_network(&t, &d, &[HyperParams::default()], 1).unwrap();
        assert_eq!(net.depth(), 1);
        assert_eq!(t.frame_extent(), (3, 3));
    }

    #[test]
    fn untrained_network_refuses_inference() {
        let t = Topology::single_patch(2);
        let net = build_network(&t, &[LayerDims::new(3, 4, 2, 1).unwrap()], &[HyperParams::default()], 0).unwrap();
        let mut ctx = InferenceContext::new();
        assert!(matches!(
            infer_frame(&net, &mut ctx, &[0.0; 4], 2, 2, false),
            Err(Error::State(_))
        ));
    }

    fn toy_two_layer() -> Network {
        // Layer 1: one-pixel patches, pairs of blocks side by side; layer 2
        // pools the two blocks.
        let t = Topology {
            patch_size: 1,
            layers: vec![
                LayerTopology {
                    group: (1, 1),
                    stride: 0,
                    grid: (1, 2),
                    grid_stride: 1,
                },
                LayerTopology {
                    group: (1, 2),
                    stride: 1,
                    grid: (1, 1),
                    grid_stride: 0,
                },
            ],
        };
        let d1 = LayerDims::new(2, 1, 2, 1).unwrap();
        let d2 = LayerDims::new(2, 2, 1, 2).unwrap();
        let l1 = LayerParams::from_parts(
            d1,
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[0.6, 0.8]],
        )
        .unwrap();
        let l2 = LayerParams::from_parts(
            d2,
            array![[0.5, 0.0], [0.0, 2.0]],
            array![[1.0], [0.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        let h = HyperParams {
            lambda: 0.3,
            gamma0: 1.0,
            ..Default::default()
        };
        Network::from_layers(t, vec![(l1, h), (l2, h)]).unwrap()
    }

    fn state(states: Vec<Array1<f64>>, causes: Array1<f64>) -> LayerState {
        let prev = vec![Array1::zeros(states[0].len()); states.len()];
        LayerState {
            states,
            causes,
            prev_states: prev,
        }
    }

    #[test]
    fn top_down_without_history_is_zero() {
        let net = toy_two_layer();
        let p = top_down_pass(&net, &InferenceContext::new()).unwrap();
        assert!(p.iter().flatten().all(|u| u.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn top_down_matches_hand_trace() {
        let net = toy_two_layer();
        let l2 = &net.layers[1];
        let ctx = InferenceContext {
            history: Some(vec![
                vec![state(vec![array![0.0, 0.0]], array![0.0, 0.0]); 2],
                vec![state(vec![array![1.0, 1.0], array![-1.0, 0.25]], array![2.0])],
            ]),
            frames_seen: 1,
        };
        let p = top_down_pass(&net, &ctx).unwrap();
        assert_eq!(p[1][0], array![2.0]);
        // Bû = [2, 0]; γ0·exp(−Bû)/2 = [0.0677, 0.5] against λ = 0.3: keep
        // component 0 only. A x_prev for member 0 = [0.5, 2], member 1 =
        // [−0.5, 0.5]. C = I.
        assert_eq!(p[0][0], array![0.5, 0.0]);
        assert_eq!(p[0][1], array![-0.5, 0.0]);
        let manual = predict_causes(
            predict_states(
                array![1.0, 1.0].view(),
                &l2.params.transition,
                &l2.params.invariance,
                array![2.0].view(),
                0.3,
                1.0,
            )
            .unwrap()
            .view(),
            &l2.params.dictionary,
        )
        .unwrap();
        assert_eq!(p[0][0], manual);
        let single = Network::from_layers(net.topology.truncated(1).unwrap(), vec![(
            net.layers[0].params.clone(),
            net.layers[0].hyper,
        )])
        .unwrap();
        let ctx1 = InferenceContext {
            history: Some(vec![vec![state(vec![array![0.0, 0.0]], array![0.5, 0.1]); 2]]),
            frames_seen: 1,
        };
        let p1 = top_down_pass(&single, &ctx1).unwrap();
        assert_eq!(p1, vec![vec![array![0.5, 0.1]; 2]]);
    }

    #[test]
    fn zero_frame_gives_zero_states() {
        let net = toy_two_layer();
        let mut ctx = InferenceContext::new();
        for flag in [false, true] {
            let out = infer_frame(&net, &mut ctx, &[0.0, 0.0], 2, 1, flag).unwrap();
            for s in out.iter().flatten() {
                assert!(s.states.iter().flatten().chain(s.causes.iter()).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn flags_agree_without_history() {
        let net = toy_two_layer();
        let a = infer_frame(&net, &mut InferenceContext::new(), &[0.7, -0.2], 2, 1, false).unwrap();
        let b = infer_frame(&net, &mut InferenceContext::new(), &[0.7, -0.2], 2, 1, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inferred_layers_beat_zero_energy() {
        let net = toy_two_layer();
        let mut ctx = InferenceContext::new();
        let frames: [[f32; 2]; 3] = [[0.7, -0.2], [0.6, -0.1], [0.9, 0.3]];
        for f in frames {
            let priors = top_down_pass(&net, &ctx).unwrap();
            let inputs0: Vec<Vec<Array1<f64>>> = f.iter().map(|&v| vec![array![f64::from(v)]]).collect();
            let out = infer_frame(&net, &mut ctx, &f, 2, 1, true).unwrap();
            let children = net.topology.children(1);
            for l in 0..2 {
                let layer = &net.layers[l];
                let inputs = if l == 0 {
                    inputs0.clone()
                } else {
                    gather_inputs(&children, &out[0])
                };
                for (b, s) in out[l].iter().enumerate() {
                    let mut zero = LayerState::zeros(layer.params.dims);
                    zero.prev_states = s.prev_states.clone();
                    let p = Some(priors[l][b].view());
                    let e = unified_energy(&inputs[b], s, &layer.params, &layer.hyper, p).unwrap();
                    let e0 = unified_energy(&inputs[b], &zero, &layer.params, &layer.hyper, p).unwrap();
                    assert!(e <= e0 + 1e-12, "layer {l} block {b}: {e} > {e0}");
                }
            }
        }
    }

    #[test]
    fn upper_layer_reads_only_the_layer_below() {
        let net = toy_two_layer();
        let solver = JointSolver::new(&net.layers[1].params, &net.layers[1].hyper).unwrap();
        let children = net.topology.children(1);
        let below = vec![
            state(vec![array![0.3, 0.0]], array![0.4, 0.1]),
            state(vec![array![0.0, -0.2]], array![0.0, 0.6]),
        ];
        let mut perturbed = below.clone();
        for s in &mut perturbed {
            s.states[0] += 5.0;
            s.prev_states[0] -= 3.0;
        }
        let prev = vec![vec![Array1::zeros(2); 2]];
        let prior = vec![Array1::zeros(1)];
        let a = infer_layer_blocks(&solver, &gather_inputs(&children, &below), &prev, &prior).unwrap();
        let b = infer_layer_blocks(&solver, &gather_inputs(&children, &perturbed), &prev, &prior).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn receptive_field_of_single_patch_unit_is_its_filter() {
        let t = Topology::single_patch(2);
        let d = LayerDims::new(3, 4, 3, 1).unwrap();
        let c = array![[0.5, 0.1, 0.0], [-0.5, 0.2, 0.0], [0.5, 0.3, 1.0], [0.5, 0.9, 0.0]];
        let p = LayerParams::from_parts(d, Array2::eye(3), Array2::eye(3), c.clone()).unwrap();
        let net = Network::from_layers(t, vec![(p, HyperParams::default())]).unwrap();
        for k in 0..3 {
            let rf = receptive_field(&net, 0, k).unwrap();
            let want = rescale_unit(&c.column(k).to_owned().into_shape_with_order((2, 2)).unwrap());
            assert!((&rf - &want).iter().all(|v| v.abs() < 1e-12));
        }
        assert!(matches!(receptive_field(&net, 0, 3), Err(Error::Index(_))));
        assert!(matches!(receptive_field(&net, 1, 0), Err(Error::Index(_))));
    }

    #[test]
    fn zero_column_gives_zero_field_and_projection_is_linear() {
        let t = Topology::shapes();
        let mut net = build_network(&t, &shapes_dims(), &[HyperParams::default(); 2], 3).unwrap();
        net.layers[1].params.invariance.column_mut(2).fill(0.0);
        let rf = receptive_field(&net, 1, 2).unwrap();
        assert_eq!(rf.dim(), (32, 32));
        assert!(rf.iter().all(|&v| v == 0.0));
        let b1 = net.layers[1].params.invariance.column(0).to_owned();
        let b2 = net.layers[1].params.invariance.column(1).to_owned();
        let (a, b) = (0.7, -1.3);
        let mix = &b1 * a + &b2 * b;
        let lhs = back_project(&net, 1, mix.view()).unwrap();
        let rhs = back_project(&net, 1, b1.view()).unwrap() * a + back_project(&net, 1, b2.view()).unwrap() * b;
        assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-9));
        let full = receptive_field(&net, 1, 0).unwrap();
        assert!(full.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pgm_encoding() {
        let img = array![[0.0, 0.5], [1.0, 2.0], [-1.0, 0.25]];
        let bytes = encode_pgm(&img);
        let header = b"P5\n2 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 64]);
        assert_eq!(receptive_field_filename(0, 7), "rf_L1_U7.pgm");
    }

    #[test]
    fn causes_csv_layout() {
        let csv = causes_to_csv(&Array2::zeros((0, 3)));
        assert_eq!(csv, "u0,u1,u2\n");
        let csv = causes_to_csv(&array![[1.0, -0.5]]);
        assert_eq!(csv.lines().count(), 2);
    }
}
