//! Real and quaternion message-passing layers (GCN, GAT, SAGE), readout,
//! link scoring, and parameter/FLOP accounting.
//!
//! Quaternion layers store four real weight blocks of shape
//! `[in/4 × out/4]` and lower the Hamilton product onto sixteen real
//! matrix products arranged by [`BLOCK_PATTERN`]. A hidden state of
//! width `F` is read as a packed quaternion vector: columns
//! `[0, F/4)` are the real parts, then the i, j, k blocks.
//!
//! Multiply-accumulate counts of the quaternion lowering equal those of
//! a real layer at the same widths (`16 · (in/4) · (out/4) = in · out`),
//! while the trainable weight count drops to a quarter.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{mean_aggregation_values, normalize_adjacency, Csr, Graph};
use crate::pruning::MaskSet;
use crate::quat::BLOCK_PATTERN;
use crate::tape::{ParamSet, Parameter, Tape, Var};
use crate::tensor::Tensor;

pub use crate::tape::Arithmetic;

/// Negative slope used inside GAT attention.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gcn,
    Gat,
    Sage,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Gat => "gat",
            LayerKind::Sage => "sage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskHead {
    NodeClassify,
    LinkDecode,
    GraphClassify,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub arithmetic: Arithmetic,
    pub in_width: usize,
    pub out_width: usize,
    pub heads: usize,
}

impl LayerSpec {
    pub fn new(
        kind: LayerKind,
        arithmetic: Arithmetic,
        in_width: usize,
        out_width: usize,
        heads: usize,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        let heads = if kind == LayerKind::Gat {
            heads.max(1)
        } else {
            1
        };
        if kind == LayerKind::Gat && out_width % heads != 0 {
            return Err(Error::Invalid(format!(
                "gat out width {out_width} not divisible by {heads} heads"
            )));
        }
        if arithmetic == Arithmetic::Quaternion {
            let per_head_out = out_width / heads;
            if in_width % 4 != 0 || per_head_out % 4 != 0 {
                return Err(Error::Invalid(format!(
                    "quaternion layer widths must be divisible by 4, got {in_width}→{out_width} ({heads} heads)"
                )));
            }
        }
        Ok(Self {
            kind,
            arithmetic,
            in_width,
            out_width,
            heads,
        })
    }

    /// Trainable scalars in this layer's linear transforms (weight
    /// matrices only; biases and attention vectors excluded).
    pub fn weight_scalar_count(&self) -> usize {
        let dense = match self.kind {
            LayerKind::Gcn | LayerKind::Gat => self.in_width * self.out_width,
            LayerKind::Sage => 2 * self.in_width * self.out_width,
        };
        match self.arithmetic {
            Arithmetic::Real => dense,
            Arithmetic::Quaternion => dense / 4,
        }
    }

    /// Multiply-accumulate count of one forward pass of this layer.
    /// Identical for both arithmetics at equal widths.
    pub fn macs(&self, num_nodes: usize, nnz: usize, nnz_loops: usize) -> usize {
        let linear = num_nodes * self.in_width * self.out_width;
        match self.kind {
            LayerKind::Gcn => linear + nnz_loops * self.out_width,
            LayerKind::Gat => linear + 2 * num_nodes * self.out_width + nnz_loops * self.out_width,
            LayerKind::Sage => 2 * linear + nnz * self.in_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub head: TaskHead,
    pub dropout: f64,
    /// Class count for the graph-classification head; unused otherwise.
    pub graph_classes: usize,
}

impl ModelSpec {
    /// Standard shapes: two layers for node/link tasks, three for graph
    /// tasks, all at the given hidden width.
    #[allow(clippy::too_many_arguments)]
    pub fn for_task(
        kind: LayerKind,
        arithmetic: Arithmetic,
        head: TaskHead,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        let layers = match head {
            TaskHead::NodeClassify => vec![
                LayerSpec::new(kind, arithmetic, in_dim, hidden, heads)?,
                LayerSpec::new(kind, arithmetic, hidden, out_dim, heads)?,
            ],
            TaskHead::LinkDecode => vec![
                LayerSpec::new(kind, arithmetic, in_dim, hidden, heads)?,
                LayerSpec::new(kind, arithmetic, hidden, hidden, heads)?,
            ],
            TaskHead::GraphClassify => vec![
                LayerSpec::new(kind, arithmetic, in_dim, hidden, heads)?,
                LayerSpec::new(kind, arithmetic, hidden, hidden, heads)?,
                LayerSpec::new(kind, arithmetic, hidden, hidden, heads)?,
            ],
        };
        let spec = Self {
            layers,
            head,
            dropout,
            graph_classes: if head == TaskHead::GraphClassify {
                out_dim
            } else {
                0
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("model has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].out_width != w[1].in_width {
                return Err(Error::Invalid(format!(
                    "adjacent layer widths mismatch: {} vs {}",
                    w[0].out_width, w[1].in_width
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.head == TaskHead::GraphClassify && self.graph_classes == 0 {
            return Err(Error::Invalid("graph head needs a class count".into()));
        }
        Ok(())
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width
    }

    pub fn kind(&self) -> LayerKind {
        self.layers[0].kind
    }

    pub fn arithmetic(&self) -> Arithmetic {
        self.layers[0].arithmetic
    }
}

/// Parameter indices of one linear transform: one weight for real
/// arithmetic, the four component blocks for quaternion.
#[derive(Debug, Clone)]
pub struct LinearIds {
    pub weights: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GatHeadIds {
    pub lin: LinearIds,
    pub att_src: usize,
    pub att_dst: usize,
}

#[derive(Debug, Clone)]
pub enum LayerIds {
    Gcn {
        lin: LinearIds,
    },
    Gat {
        heads: Vec<GatHeadIds>,
    },
    Sage {
        self_lin: LinearIds,
        neigh_lin: LinearIds,
    },
}

#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub ids: LayerIds,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub lin: LinearIds,
    pub bias: usize,
}

/// A model's specification, parameters, and the index layout tying them
/// together.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub set: ParamSet,
    pub layers: Vec<LayerLayout>,
    pub head: Option<HeadLayout>,
}

impl ModelParams {
    /// Exact trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.set.total_scalars()
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

fn init_linear(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    arith: Arithmetic,
    in_w: usize,
    out_w: usize,
) -> LinearIds {
    let weights = match arith {
        Arithmetic::Real => {
            vec![set.push(Parameter::new(
                format!("{name}.weight"),
                glorot(rng, in_w, out_w, in_w, out_w),
                true,
                true,
                arith,
            ))]
        }
        Arithmetic::Quaternion => {
            let (iq, oq) = (in_w / 4, out_w / 4);
            ["r", "i", "j", "k"]
                .iter()
                .map(|comp| {
                    set.push(Parameter::new(
                        format!("{name}.weight_{comp}"),
                        glorot(rng, iq, oq, in_w, out_w),
                        true,
                        true,
                        arith,
                    ))
                })
                .collect()
        }
    };
    LinearIds { weights }
}

/// Build seeded parameters for a model. Drawing order is fixed, so the
/// same seed always produces the same initialization.
pub fn init_model_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::default();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (l, ls) in spec.layers.iter().enumerate() {
        let prefix = format!("layer{l}");
        let ids = match ls.kind {
            LayerKind::Gcn => LayerIds::Gcn {
                lin: init_linear(
                    &mut set,
                    &mut rng,
                    &prefix,
                    ls.arithmetic,
                    ls.in_width,
                    ls.out_width,
                ),
            },
            LayerKind::Gat => {
                let per_head = ls.out_width / ls.heads;
                let heads = (0..ls.heads)
                    .map(|h| {
                        let hname = format!("{prefix}.head{h}");
                        let lin = init_linear(
                            &mut set,
                            &mut rng,
                            &hname,
                            ls.arithmetic,
                            ls.in_width,
                            per_head,
                        );
                        let att_src = set.push(Parameter::new(
                            format!("{hname}.att_src"),
                            glorot(&mut rng, per_head, 1, per_head, 1),
                            true,
                            false,
                            Arithmetic::Real,
                        ));
                        let att_dst = set.push(Parameter::new(
                            format!("{hname}.att_dst"),
                            glorot(&mut rng, per_head, 1, per_head, 1),
                            true,
                            false,
                            Arithmetic::Real,
                        ));
                        GatHeadIds {
                            lin,
                            att_src,
                            att_dst,
                        }
                    })
                    .collect();
                LayerIds::Gat { heads }
            }
            LayerKind::Sage => LayerIds::Sage {
                self_lin: init_linear(
                    &mut set,
                    &mut rng,
                    &format!("{prefix}.self"),
                    ls.arithmetic,
                    ls.in_width,
                    ls.out_width,
                ),
                neigh_lin: init_linear(
                    &mut set,
                    &mut rng,
                    &format!("{prefix}.neigh"),
                    ls.arithmetic,
                    ls.in_width,
                    ls.out_width,
                ),
            },
        };
        let bias = set.push(Parameter::new(
            format!("{prefix}.bias"),
            Tensor::zeros(1, ls.out_width),
            true,
            false,
            Arithmetic::Real,
        ));
        layers.push(LayerLayout { ids, bias });
    }
    let head = if spec.head == TaskHead::GraphClassify {
        let hidden = spec.out_width();
        let lin = init_linear(
            &mut set,
            &mut rng,
            "head",
            Arithmetic::Real,
            hidden,
            spec.graph_classes,
        );
        let bias = set.push(Parameter::new(
            "head.bias",
            Tensor::zeros(1, spec.graph_classes),
            true,
            false,
            Arithmetic::Real,
        ));
        Some(HeadLayout { lin, bias })
    } else {
        None
    };
    Ok(ModelParams {
        spec: spec.clone(),
        set,
        layers,
        head,
    })
}

/// Graph structures prepared once per run and shared across epochs.
#[derive(Debug, Clone)]
pub struct GraphTensors {
    pub num_nodes: usize,
    pub features: Tensor,
    /// Raw symmetrized adjacency, no self loops added.
    pub csr: Arc<Csr>,
    /// Structure with self loops; shared by the GCN normalization and
    /// GAT attention.
    pub csr_loops: Arc<Csr>,
    pub norm_values: Tensor,
    pub mean_values: Tensor,
    pub loop_offsets: Arc<Vec<usize>>,
    /// Destination (row owner) per entry of `csr_loops`.
    pub edge_dst: Arc<Vec<usize>>,
    /// Source (column) per entry of `csr_loops`.
    pub edge_src: Arc<Vec<usize>>,
}

pub fn prepare_graph(g: &Graph) -> GraphTensors {
    let (csr_loops, norm_values) = normalize_adjacency(g);
    let csr = Arc::new(g.csr.clone());
    let mean_values = mean_aggregation_values(&csr);
    let mut edge_dst = Vec::with_capacity(csr_loops.nnz());
    for u in 0..csr_loops.num_rows {
        edge_dst.extend(std::iter::repeat(u).take(csr_loops.degree(u)));
    }
    GraphTensors {
        num_nodes: g.num_nodes,
        features: g.features.clone(),
        loop_offsets: Arc::new(csr_loops.offsets.clone()),
        edge_dst: Arc::new(edge_dst),
        edge_src: Arc::new(csr_loops.cols.clone()),
        csr,
        csr_loops,
        norm_values,
        mean_values,
    }
}

/// Disjoint union of several graphs plus the node boundaries needed by
/// mean-pool readout.
pub fn prepare_batch(graphs: &[&Graph]) -> Result<(GraphTensors, Arc<Vec<usize>>)> {
    if graphs.is_empty() {
        return Err(Error::Invalid("empty graph batch".into()));
    }
    let f = graphs[0].feature_dim();
    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let mut features = Vec::with_capacity(total_nodes * f);
    let mut edges = Vec::new();
    let mut boundaries = Vec::with_capacity(graphs.len() + 1);
    boundaries.push(0);
    let mut base = 0;
    for g in graphs {
        if g.feature_dim() != f {
            return Err(Error::Shape(
                "batch members disagree on feature width".into(),
            ));
        }
        if g.num_nodes == 0 {
            return Err(Error::Invalid("empty graph in batch".into()));
        }
        features.extend_from_slice(g.features.data());
        for &(u, v) in &g.edges {
            edges.push((base + u, base + v));
        }
        base += g.num_nodes;
        boundaries.push(base);
    }
    let union = Graph::from_parts(
        total_nodes,
        &edges,
        Tensor::matrix(total_nodes, f, features)?,
        Vec::new(),
    )?;
    Ok((prepare_graph(&union), Arc::new(boundaries)))
}

/// How masks enter a forward pass.
#[derive(Clone, Copy)]
pub enum MaskMode<'m> {
    None,
    /// Binary masks folded in as constants; gradients to pruned weights
    /// vanish through the product.
    Hard(&'m MaskSet),
    /// Masks inserted as differentiable leaves so they receive gradients.
    Soft(&'m MaskSet),
}

/// Per-parameter tape handles for one forward pass.
pub struct BoundModel {
    /// Effective (possibly masked) value per parameter index.
    pub effective: Vec<Var>,
    /// Raw parameter leaves, for gradient export.
    pub leaves: Vec<Var>,
    /// Soft-mask leaves, parallel to the parameter list.
    pub mask_leaves: Vec<Option<Var>>,
}

pub fn bind_params(tape: &mut Tape, mp: &ModelParams, mode: MaskMode) -> Result<BoundModel> {
    let n = mp.set.len();
    let mut effective = Vec::with_capacity(n);
    let mut leaves = Vec::with_capacity(n);
    let mut mask_leaves = vec![None; n];
    for (i, p) in mp.set.params.iter().enumerate() {
        let leaf = tape.param(p.value.clone());
        leaves.push(leaf);
        let eff = match mode {
            MaskMode::None => leaf,
            MaskMode::Hard(ms) => match ms.mask_tensor(i, &p.value)? {
                Some(mask) => {
                    let mv = tape.constant(mask);
                    tape.mul(leaf, mv)?
                }
                None => leaf,
            },
            MaskMode::Soft(ms) => match ms.mask_tensor(i, &p.value)? {
                Some(mask) => {
                    let mv = tape.param(mask);
                    mask_leaves[i] = Some(mv);
                    tape.mul(leaf, mv)?
                }
                None => leaf,
            },
        };
        effective.push(eff);
    }
    Ok(BoundModel {
        effective,
        leaves,
        mask_leaves,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

fn apply_activation(tape: &mut Tape, h: Var, act: Activation) -> Var {
    match act {
        Activation::None => h,
        Activation::Relu => tape.relu(h),
    }
}

/// One linear transform in the layer's arithmetic. Quaternion inputs are
/// split into their four packed column blocks and recombined through the
/// Hamilton sign pattern.
pub fn linear_forward(
    tape: &mut Tape,
    h: Var,
    lin: &LinearIds,
    bound: &BoundModel,
    arith: Arithmetic,
) -> Result<Var> {
    match arith {
        Arithmetic::Real => tape.matmul(h, bound.effective[lin.weights[0]]),
        Arithmetic::Quaternion => {
            let width = tape.value(h).cols();
            if width % 4 != 0 {
                return Err(Error::Shape(format!(
                    "quaternion input width {width} not divisible by 4"
                )));
            }
            let iq = width / 4;
            let mut slices = Vec::with_capacity(4);
            for b in 0..4 {
                slices.push(tape.slice_cols(h, b * iq, iq)?);
            }
            let w: Vec<Var> = lin.weights.iter().map(|&i| bound.effective[i]).collect();
            let mut out_blocks = Vec::with_capacity(4);
            for pattern_row in BLOCK_PATTERN.iter() {
                let mut acc: Option<Var> = None;
                for (in_b, &(comp, sign)) in pattern_row.iter().enumerate() {
                    let term = tape.matmul(slices[in_b], w[comp])?;
                    acc = Some(match acc {
                        None => term, // leading column of the pattern is always +W_x
                        Some(prev) => {
                            if sign > 0.0 {
                                tape.add(prev, term)?
                            } else {
                                tape.sub(prev, term)?
                            }
                        }
                    });
                }
                out_blocks.push(acc.unwrap());
            }
            let ri = tape.concat_cols(out_blocks[0], out_blocks[1])?;
            let jk = tape.concat_cols(out_blocks[2], out_blocks[3])?;
            tape.concat_cols(ri, jk)
        }
    }
}

/// `activation(Â · linear(h) + bias)` over the normalized self-loop
/// adjacency.
pub fn gcn_layer_forward(
    tape: &mut Tape,
    h: Var,
    layout: &LayerLayout,
    spec: &LayerSpec,
    bound: &BoundModel,
    gt: &GraphTensors,
    act: Activation,
) -> Result<Var> {
    let LayerIds::Gcn { lin } = &layout.ids else {
        return Err(Error::Invalid("layer layout is not GCN".into()));
    };
    let z = linear_forward(tape, h, lin, bound, spec.arithmetic)?;
    let vals = tape.constant(gt.norm_values.clone());
    let agg = tape.spmm(Arc::clone(&gt.csr_loops), vals, z)?;
    let y = tape.add_bias(agg, bound.effective[layout.bias])?;
    Ok(apply_activation(tape, y, act))
}

/// Attention layer over the self-loop structure. Per-edge logits come
/// from two learned vectors applied to the transformed endpoint states,
/// pass through leaky-ReLU, and are normalized per destination by
/// segment softmax. Quaternion variants transform features with
/// quaternion weights while attention logits stay real scalars over the
/// packed view.
pub fn gat_layer_forward(
    tape: &mut Tape,
    h: Var,
    layout: &LayerLayout,
    spec: &LayerSpec,
    bound: &BoundModel,
    gt: &GraphTensors,
    act: Activation,
) -> Result<Var> {
    let LayerIds::Gat { heads } = &layout.ids else {
        return Err(Error::Invalid("layer layout is not GAT".into()));
    };
    let mut head_outs = Vec::with_capacity(heads.len());
    for head in heads {
        let z = linear_forward(tape, h, &head.lin, bound, spec.arithmetic)?;
        let s_src = tape.matmul(z, bound.effective[head.att_src])?;
        let s_dst = tape.matmul(z, bound.effective[head.att_dst])?;
        let e_dst = tape.gather_rows(s_dst, Arc::clone(&gt.edge_dst))?;
        let e_src = tape.gather_rows(s_src, Arc::clone(&gt.edge_src))?;
        let logits = tape.add(e_dst, e_src)?;
        let logits = tape.leaky_relu(logits, GAT_LEAKY_SLOPE);
        let alpha = tape.segment_softmax(logits, Arc::clone(&gt.loop_offsets))?;
        let out = tape.spmm(Arc::clone(&gt.csr_loops), alpha, z)?;
        head_outs.push(out);
    }
    let mut combined = head_outs[0];
    for &o in &head_outs[1..] {
        combined = tape.concat_cols(combined, o)?;
    }
    let y = tape.add_bias(combined, bound.effective[layout.bias])?;
    Ok(apply_activation(tape, y, act))
}

/// `activation(W_self·h + W_neigh·mean_{v∈N(u)} h_v + bias)`; isolated
/// nodes contribute a zero neighbor term.
pub fn sage_layer_forward(
    tape: &mut Tape,
    h: Var,
    layout: &LayerLayout,
    spec: &LayerSpec,
    bound: &BoundModel,
    gt: &GraphTensors,
    act: Activation,
) -> Result<Var> {
    let LayerIds::Sage {
        self_lin,
        neigh_lin,
    } = &layout.ids
    else {
        return Err(Error::Invalid("layer layout is not SAGE".into()));
    };
    let z_self = linear_forward(tape, h, self_lin, bound, spec.arithmetic)?;
    let combined = if gt.csr.nnz() > 0 {
        let vals = tape.constant(gt.mean_values.clone());
        let neigh = tape.spmm(Arc::clone(&gt.csr), vals, h)?;
        let z_neigh = linear_forward(tape, neigh, neigh_lin, bound, spec.arithmetic)?;
        tape.add(z_self, z_neigh)?
    } else {
        z_self
    };
    let y = tape.add_bias(combined, bound.effective[layout.bias])?;
    Ok(apply_activation(tape, y, act))
}

pub fn layer_forward(
    tape: &mut Tape,
    h: Var,
    layout: &LayerLayout,
    spec: &LayerSpec,
    bound: &BoundModel,
    gt: &GraphTensors,
    act: Activation,
) -> Result<Var> {
    match spec.kind {
        LayerKind::Gcn => gcn_layer_forward(tape, h, layout, spec, bound, gt, act),
        LayerKind::Gat => gat_layer_forward(tape, h, layout, spec, bound, gt, act),
        LayerKind::Sage => sage_layer_forward(tape, h, layout, spec, bound, gt, act),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub training: bool,
}

/// Run all message-passing layers and return the final node states.
/// Hidden layers use ReLU; the last layer is linear for node and link
/// heads and ReLU for the graph head (whose classifier follows readout).
/// Dropout precedes every layer at training time.
pub fn model_forward(
    tape: &mut Tape,
    mp: &ModelParams,
    bound: &BoundModel,
    gt: &GraphTensors,
    opts: ForwardOpts,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut h = tape.constant(gt.features.clone());
    let last = mp.spec.layers.len() - 1;
    for (l, (ls, layout)) in mp.spec.layers.iter().zip(&mp.layers).enumerate() {
        if opts.training && mp.spec.dropout > 0.0 {
            h = tape.dropout(h, mp.spec.dropout, rng)?;
        }
        let act = if l < last || mp.spec.head == TaskHead::GraphClassify {
            Activation::Relu
        } else {
            Activation::None
        };
        h = layer_forward(tape, h, layout, ls, bound, gt, act)?;
    }
    Ok(h)
}

/// Mean-pool readout per graph followed by the real linear classifier.
pub fn graph_head_forward(
    tape: &mut Tape,
    mp: &ModelParams,
    bound: &BoundModel,
    h: Var,
    boundaries: Arc<Vec<usize>>,
) -> Result<Var> {
    let head = mp
        .head
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no graph head".into()))?;
    let pooled = tape.segment_mean_rows(h, boundaries)?;
    let z = tape.matmul(pooled, bound.effective[head.lin.weights[0]])?;
    tape.add_bias(z, bound.effective[head.bias])
}

/// Edge logits `dot(h_u, h_v)` over the packed real components.
pub fn link_logits(tape: &mut Tape, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid("link_logits: no pairs".into()));
    }
    let us: Arc<Vec<usize>> = Arc::new(pairs.iter().map(|&(u, _)| u).collect());
    let vs: Arc<Vec<usize>> = Arc::new(pairs.iter().map(|&(_, v)| v).collect());
    let hu = tape.gather_rows(h, us)?;
    let hv = tape.gather_rows(h, vs)?;
    let prod = tape.mul(hu, hv)?;
    Ok(tape.row_sum(prod))
}

/// FLOPs (2 × multiply-accumulates) of one full forward pass. Aggregation
/// ops count one MAC per accumulated element; the graph head adds its
/// readout and classifier.
pub fn count_flops(
    spec: &ModelSpec,
    num_nodes: usize,
    nnz: usize,
    nnz_loops: usize,
    num_graphs: usize,
) -> f64 {
    let mut macs: usize = spec
        .layers
        .iter()
        .map(|ls| ls.macs(num_nodes, nnz, nnz_loops))
        .sum();
    if spec.head == TaskHead::GraphClassify {
        let hidden = spec.out_width();
        macs += num_nodes * hidden; // mean-pool accumulate
        macs += num_graphs * hidden * spec.graph_classes;
    }
    2.0 * macs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::{QuatMatrix, Quaternion};
    use crate::tensor;

    fn bind_plain(tape: &mut Tape, mp: &ModelParams) -> BoundModel {
        bind_params(tape, mp, MaskMode::None).unwrap()
    }

    fn rand_graph(seed: u64, n: usize, f: usize, edge_prob: f64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen::<f64>() < edge_prob {
                    pairs.push((u, v));
                }
            }
        }
        let data: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Graph::from_parts(n, &pairs, Tensor::matrix(n, f, data).unwrap(), vec![0; n]).unwrap()
    }

    fn single_layer_params(
        kind: LayerKind,
        arith: Arithmetic,
        in_w: usize,
        out_w: usize,
        seed: u64,
    ) -> ModelParams {
        let spec = ModelSpec {
            layers: vec![LayerSpec::new(kind, arith, in_w, out_w, 1).unwrap()],
            head: TaskHead::NodeClassify,
            dropout: 0.0,
            graph_classes: 0,
        };
        init_model_params(&spec, seed).unwrap()
    }

    #[test]
    fn parameter_count_examples() {
        // Real 1436→128 with bias: 1436·128 + 128.
        let real = single_layer_params(LayerKind::Gcn, Arithmetic::Real, 1436, 128, 0);
        assert_eq!(real.count_params(), 1436 * 128 + 128);
        assert_eq!(real.count_params(), 183_936);

        // Quaternion: a quarter of the weights plus the same bias.
        let quat = single_layer_params(LayerKind::Gcn, Arithmetic::Quaternion, 1436, 128, 0);
        assert_eq!(quat.count_params(), 1436 * 128 / 4 + 128);
        assert_eq!(quat.count_params(), 46_080);
    }

    #[test]
    fn weight_ratio_is_exactly_one_quarter() {
        for (kind, in_w, out_w) in [
            (LayerKind::Gcn, 1436, 128),
            (LayerKind::Gcn, 128, 8),
            (LayerKind::Gat, 64, 32),
            (LayerKind::Sage, 16, 8),
        ] {
            let real = LayerSpec::new(kind, Arithmetic::Real, in_w, out_w, 1).unwrap();
            let quat = LayerSpec::new(kind, Arithmetic::Quaternion, in_w, out_w, 1).unwrap();
            assert_eq!(real.weight_scalar_count(), 4 * quat.weight_scalar_count());
        }
    }

    #[test]
    fn mac_counts_match_between_arithmetics() {
        let g = rand_graph(1, 12, 8, 0.3);
        let gt = prepare_graph(&g);
        for kind in [LayerKind::Gcn, LayerKind::Gat, LayerKind::Sage] {
            let real = LayerSpec::new(kind, Arithmetic::Real, 8, 8, 1).unwrap();
            let quat = LayerSpec::new(kind, Arithmetic::Quaternion, 8, 8, 1).unwrap();
            let a = real.macs(g.num_nodes, gt.csr.nnz(), gt.csr_loops.nnz());
            let b = quat.macs(g.num_nodes, gt.csr.nnz(), gt.csr_loops.nnz());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn quaternion_identity_weights_pass_input_through() {
        let mp = {
            let mut mp = single_layer_params(LayerKind::Gcn, Arithmetic::Quaternion, 8, 8, 3);
            // Identity quaternion matrix: W_r = I, other blocks zero.
            let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            mp.set.params[0].value = eye;
            for b in 1..4 {
                mp.set.params[b].value = Tensor::zeros(2, 2);
            }
            mp
        };
        let g = rand_graph(5, 4, 8, 0.0);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(g.features.clone());
        let LayerIds::Gcn { lin } = &mp.layers[0].ids else {
            unreachable!()
        };
        let out = linear_forward(&mut tape, h, lin, &bound, Arithmetic::Quaternion).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(g.features.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn quaternion_linear_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (in_w, out_w) = (12, 8);
        let (iq, oq) = (in_w / 4, out_w / 4);
        let mp = single_layer_params(LayerKind::Gcn, Arithmetic::Quaternion, in_w, out_w, 4);

        // Mirror the four blocks into a quaternion matrix. The layer
        // stores blocks as [in_q × out_q]; the matrix form is [out_q × in_q].
        let mut qm = QuatMatrix::zeros(oq, iq).unwrap();
        for a in 0..oq {
            for b in 0..iq {
                qm.set(
                    a,
                    b,
                    Quaternion::new(
                        mp.set.params[0].value.get(b, a),
                        mp.set.params[1].value.get(b, a),
                        mp.set.params[2].value.get(b, a),
                        mp.set.params[3].value.get(b, a),
                    ),
                );
            }
        }

        let n = 5;
        let feats: Vec<f64> = (0..n * in_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::matrix(n, in_w, feats).unwrap();

        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(features.clone());
        let LayerIds::Gcn { lin } = &mp.layers[0].ids else {
            unreachable!()
        };
        let out = linear_forward(&mut tape, h, lin, &bound, Arithmetic::Quaternion).unwrap();

        for u in 0..n {
            let row = features.row(u);
            let hq = crate::quat::unpack_quat_vec(row).unwrap();
            let want = qm.quat_matvec(&hq).unwrap();
            let got = crate::quat::unpack_quat_vec(tape.value(out).row(u)).unwrap();
            for (a, b) in got.iter().zip(want.iter()) {
                for (x, y) in a.components().iter().zip(b.components()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn quaternion_linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mp = single_layer_params(LayerKind::Gcn, Arithmetic::Quaternion, 8, 4, 62);
        let feats: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::matrix(5, 8, feats).unwrap();
        let target = Tensor::matrix(5, 4, (0..20).map(|i| 0.1 * i as f64 - 1.0).collect()).unwrap();

        let loss_of = |mp: &ModelParams| -> f64 {
            let mut tape = Tape::new();
            let bound = bind_plain(&mut tape, mp);
            let h = tape.constant(features.clone());
            let LayerIds::Gcn { lin } = &mp.layers[0].ids else {
                unreachable!()
            };
            let out = linear_forward(&mut tape, h, lin, &bound, Arithmetic::Quaternion).unwrap();
            let t = tape.constant(target.clone());
            let diff = tape.sub(out, t).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.mean_all(sq);
            tape.value(loss).scalar_value()
        };

        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(features.clone());
        let LayerIds::Gcn { lin } = &mp.layers[0].ids else {
            unreachable!()
        };
        let out = linear_forward(&mut tape, h, lin, &bound, Arithmetic::Quaternion).unwrap();
        let t = tape.constant(target.clone());
        let diff = tape.sub(out, t).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.mean_all(sq);
        let mut grads = tape.backward(loss).unwrap();

        for (i, &leaf) in bound.leaves.iter().enumerate() {
            let analytic = grads
                .take(leaf)
                .unwrap_or_else(|| mp.set.params[i].value.zeros_like());
            let err = crate::tape::finite_difference_check(
                |perturbed| {
                    let mut probe = mp.clone();
                    probe.set.params[i].value = perturbed.clone();
                    Ok(loss_of(&probe))
                },
                &mp.set.params[i].value,
                &analytic,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-5, "param {i} rel err {err}");
        }
    }

    #[test]
    fn quaternion_layer_equals_real_layer_with_block_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (in_w, out_w) = (8, 12);
        let (iq, oq) = (in_w / 4, out_w / 4);
        let quat = single_layer_params(LayerKind::Gcn, Arithmetic::Quaternion, in_w, out_w, 6);

        let mut qm = QuatMatrix::zeros(oq, iq).unwrap();
        for a in 0..oq {
            for b in 0..iq {
                qm.set(
                    a,
                    b,
                    Quaternion::new(
                        quat.set.params[0].value.get(b, a),
                        quat.set.params[1].value.get(b, a),
                        quat.set.params[2].value.get(b, a),
                        quat.set.params[3].value.get(b, a),
                    ),
                );
            }
        }
        // Real weight [in_w × out_w] = block matrixᵀ.
        let block = qm.to_block_matrix();
        let mut wdata = vec![0.0; in_w * out_w];
        for r in 0..out_w {
            for c in 0..in_w {
                wdata[c * out_w + r] = block.get(r, c);
            }
        }
        let w_real = Tensor::matrix(in_w, out_w, wdata).unwrap();

        let n = 6;
        let feats: Vec<f64> = (0..n * in_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::matrix(n, in_w, feats).unwrap();

        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &quat);
        let h = tape.constant(features.clone());
        let LayerIds::Gcn { lin } = &quat.layers[0].ids else {
            unreachable!()
        };
        let via_quat = linear_forward(&mut tape, h, lin, &bound, Arithmetic::Quaternion).unwrap();

        let via_real = tensor::mat_mul(&features, &w_real).unwrap();
        for (a, b) in tape.value(via_quat).data().iter().zip(via_real.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_single_node_identity_weights() {
        let mut mp = single_layer_params(LayerKind::Gcn, Arithmetic::Real, 3, 3, 7);
        mp.set.params[0].value =
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let g = Graph::from_parts(
            1,
            &[],
            Tensor::matrix(1, 3, vec![0.5, -2.0, 1.0]).unwrap(),
            vec![0],
        )
        .unwrap();
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = gcn_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn gcn_zero_weights_zero_output() {
        let mut mp = single_layer_params(LayerKind::Gcn, Arithmetic::Real, 3, 4, 8);
        mp.set.params[0].value = Tensor::zeros(3, 4);
        let g = rand_graph(2, 5, 3, 0.5);
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = gcn_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::None,
        )
        .unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let mp = single_layer_params(LayerKind::Gcn, Arithmetic::Real, 4, 3, 11);
        let g = rand_graph(3, 6, 4, 0.5);
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = gcn_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::Relu,
        )
        .unwrap();

        // Dense oracle: relu(Â · X · W + b).
        let n = g.num_nodes;
        let mut dense = Tensor::zeros(n, n);
        for u in 0..n {
            for e in gt.csr_loops.offsets[u]..gt.csr_loops.offsets[u + 1] {
                dense.set(u, gt.csr_loops.cols[e], gt.norm_values.data()[e]);
            }
        }
        let z = tensor::mat_mul(&g.features, &mp.set.params[0].value).unwrap();
        let agg = tensor::mat_mul(&dense, &z).unwrap();
        for u in 0..n {
            for c in 0..3 {
                let want = (agg.get(u, c) + mp.set.params[1].value.get(0, c)).max(0.0);
                assert!((tape.value(out).get(u, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gat_single_node_self_loop_gets_full_attention() {
        let mp = single_layer_params(LayerKind::Gat, Arithmetic::Real, 3, 2, 13);
        let g = Graph::from_parts(
            1,
            &[],
            Tensor::matrix(1, 3, vec![1.0, -0.5, 2.0]).unwrap(),
            vec![0],
        )
        .unwrap();
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = gat_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::None,
        )
        .unwrap();
        // α = 1.0 on the lone self loop, so the output is W·h (bias 0).
        let want = tensor::mat_mul(&g.features, &mp.set.params[0].value).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_identical_neighbors_share_attention_equally() {
        // Destination 0 aggregates from two identical neighbors through a
        // hand-built structure without self loops: α = 0.5 each, so the
        // output row equals W·h of either neighbor.
        let mp = single_layer_params(LayerKind::Gat, Arithmetic::Real, 3, 2, 17);
        let features =
            Tensor::matrix(3, 3, vec![0.3, 0.4, -1.0, 0.7, -0.2, 0.5, 0.7, -0.2, 0.5]).unwrap();
        let csr = Arc::new(Csr::from_edge_pairs(3, &[(0, 1), (0, 2)]).unwrap());
        let gt = GraphTensors {
            num_nodes: 3,
            features: features.clone(),
            csr: Arc::clone(&csr),
            csr_loops: Arc::clone(&csr),
            norm_values: Tensor::zeros(2, 1),
            mean_values: Tensor::zeros(2, 1),
            loop_offsets: Arc::new(csr.offsets.clone()),
            edge_dst: Arc::new(vec![0, 0]),
            edge_src: Arc::new(csr.cols.clone()),
        };
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(features.clone());
        let out = gat_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::None,
        )
        .unwrap();
        let w = &mp.set.params[0].value;
        let wh = tensor::mat_mul(&features, w).unwrap();
        for c in 0..2 {
            let want = 0.5 * wh.get(1, c) + 0.5 * wh.get(2, c);
            assert!((tape.value(out).get(0, c) - want).abs() < 1e-12);
            assert!((tape.value(out).get(0, c) - wh.get(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_matches_direct_per_node_computation() {
        let mp = single_layer_params(LayerKind::Gat, Arithmetic::Real, 4, 3, 19);
        let g = rand_graph(7, 5, 4, 0.6);
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = gat_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::None,
        )
        .unwrap();

        let w = &mp.set.params[0].value;
        let a_src = &mp.set.params[1].value;
        let a_dst = &mp.set.params[2].value;
        let z = tensor::mat_mul(&g.features, w).unwrap();
        for u in 0..g.num_nodes {
            let row = gt.csr_loops.row(u);
            let mut logits = Vec::new();
            for &v in row {
                let mut sd = 0.0;
                let mut ss = 0.0;
                for c in 0..3 {
                    sd += z.get(u, c) * a_dst.get(c, 0);
                    ss += z.get(v, c) * a_src.get(c, 0);
                }
                let e = sd + ss;
                logits.push(if e > 0.0 { e } else { GAT_LEAKY_SLOPE * e });
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let zsum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..3 {
                let mut want = 0.0;
                for (pos, &v) in row.iter().enumerate() {
                    let alpha = (logits[pos] - mx).exp() / zsum;
                    want += alpha * z.get(v, c);
                }
                assert!((tape.value(out).get(u, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sage_isolated_node_uses_self_transform_only() {
        let mp = single_layer_params(LayerKind::Sage, Arithmetic::Real, 3, 2, 23);
        let g = Graph::from_parts(
            1,
            &[],
            Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(),
            vec![0],
        )
        .unwrap();
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = sage_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::Relu,
        )
        .unwrap();
        let want = tensor::mat_mul(&g.features, &mp.set.params[0].value).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_identity_weights_double_uniform_states() {
        let mut mp = single_layer_params(LayerKind::Sage, Arithmetic::Real, 2, 2, 29);
        let eye = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        mp.set.params[0].value = eye.clone();
        mp.set.params[1].value = eye;
        // Every node identical and fully connected: mean of neighbors = h.
        let feats = Tensor::matrix(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let g = Graph::from_parts(3, &[(0, 1), (0, 2), (1, 2)], feats.clone(), vec![0; 3]).unwrap();
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = sage_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::Relu,
        )
        .unwrap();
        for u in 0..3 {
            for c in 0..2 {
                let want = (2.0 * feats.get(u, c)).max(0.0);
                assert!((tape.value(out).get(u, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sage_matches_dense_mean_oracle() {
        let mp = single_layer_params(LayerKind::Sage, Arithmetic::Real, 4, 3, 31);
        let g = rand_graph(13, 6, 4, 0.5);
        let gt = prepare_graph(&g);
        let mut tape = Tape::new();
        let bound = bind_plain(&mut tape, &mp);
        let h = tape.constant(gt.features.clone());
        let out = sage_layer_forward(
            &mut tape,
            h,
            &mp.layers[0],
            &mp.spec.layers[0],
            &bound,
            &gt,
            Activation::Relu,
        )
        .unwrap();

        let (ws, wn, b) = (
            &mp.set.params[0].value,
            &mp.set.params[1].value,
            &mp.set.params[2].value,
        );
        for u in 0..g.num_nodes {
            let deg = gt.csr.degree(u);
            let mut mean = [0.0; 4];
            for &v in gt.csr.row(u) {
                for (m, &x) in mean.iter_mut().zip(g.features.row(v)) {
                    *m += x;
                }
            }
            if deg > 0 {
                for m in mean.iter_mut() {
                    *m /= deg as f64;
                }
            }
            for c in 0..3 {
                let mut want = b.get(0, c);
                for t in 0..4 {
                    want += g.features.get(u, t) * ws.get(t, c) + mean[t] * wn.get(t, c);
                }
                let got = tape.value(out).get(u, c);
                assert!((got - want.max(0.0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn readout_examples() {
        let mut tape = Tape::new();
        // One-node graph: readout is that node's state.
        let h = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let out = tape.segment_mean_rows(h, Arc::new(vec![0, 1])).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);

        // Two opposite nodes cancel.
        let h = tape.constant(Tensor::matrix(2, 2, vec![0.7, -1.2, -0.7, 1.2]).unwrap());
        let out = tape.segment_mean_rows(h, Arc::new(vec![0, 2])).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);

        // Three-graph batch against loop-computed means.
        let data: Vec<f64> = (0..6 * 2).map(|i| i as f64 * 0.5).collect();
        let h = tape.constant(Tensor::matrix(6, 2, data.clone()).unwrap());
        let bounds = vec![0usize, 2, 3, 6];
        let out = tape.segment_mean_rows(h, Arc::new(bounds.clone())).unwrap();
        for g in 0..3 {
            for c in 0..2 {
                let (lo, hi) = (bounds[g], bounds[g + 1]);
                let want: f64 = (lo..hi).map(|r| data[r * 2 + c]).sum::<f64>() / (hi - lo) as f64;
                assert!((tape.value(out).get(g, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn link_score_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.6, 0.8]).unwrap());
        let logits = link_logits(&mut tape, h, &[(0, 1), (1, 1), (1, 2)]).unwrap();
        let vals = tape.value(logits).data().to_vec();
        assert_eq!(vals[0], 0.0); // zero embedding → logit 0
        assert_eq!(vals[1], 1.0); // unit vector with itself
        assert!((vals[2] - 0.6).abs() < 1e-15); // manual dot product
    }

    #[test]
    fn flops_equal_between_arithmetics() {
        let g = rand_graph(37, 20, 8, 0.3);
        let gt = prepare_graph(&g);
        for kind in [LayerKind::Gcn, LayerKind::Gat, LayerKind::Sage] {
            let real = ModelSpec::for_task(
                kind,
                Arithmetic::Real,
                TaskHead::NodeClassify,
                8,
                8,
                4,
                1,
                0.0,
            )
            .unwrap();
            let quat = ModelSpec::for_task(
                kind,
                Arithmetic::Quaternion,
                TaskHead::NodeClassify,
                8,
                8,
                4,
                1,
                0.0,
            )
            .unwrap();
            let fr = count_flops(&real, g.num_nodes, gt.csr.nnz(), gt.csr_loops.nnz(), 1);
            let fq = count_flops(&quat, g.num_nodes, gt.csr.nnz(), gt.csr_loops.nnz(), 1);
            assert_eq!(fr, fq);
        }
    }

    #[test]
    fn layers_are_permutation_equivariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let g = rand_graph(41, 10, 8, 0.4);
        let mut perm: Vec<usize> = (0..10).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let gp = g.permute(&perm).unwrap();

        for kind in [LayerKind::Gcn, LayerKind::Gat, LayerKind::Sage] {
            for arith in [Arithmetic::Real, Arithmetic::Quaternion] {
                let mp = single_layer_params(kind, arith, 8, 8, 47);
                let run = |graph: &Graph| -> Tensor {
                    let gt = prepare_graph(graph);
                    let mut tape = Tape::new();
                    let bound = bind_plain(&mut tape, &mp);
                    let h = tape.constant(gt.features.clone());
                    let out = layer_forward(
                        &mut tape,
                        h,
                        &mp.layers[0],
                        &mp.spec.layers[0],
                        &bound,
                        &gt,
                        Activation::Relu,
                    )
                    .unwrap();
                    tape.value(out).clone()
                };
                let base = run(&g);
                let permuted = run(&gp);
                for u in 0..10 {
                    assert_eq!(
                        base.row(u),
                        permuted.row(perm[u]),
                        "{kind:?}/{arith:?} node {u} not bitwise equal"
                    );
                }
            }
        }
    }
}
