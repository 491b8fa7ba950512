//! Edge-featured graph attention and the two-edge-type (spatial / OD)
//! propagation with attentional fusion.
//!
//! Conventions: an arc `(src, dst)` carries a message from `src` into `dst`.
//! For arc `j → i` the attention logit is
//! `h_ij = LeakyReLU(aᵀ U [V_i ‖ E_ij ‖ V_j])`, normalized over the incoming
//! arcs of `i`, and the node update is `V'_i = Σ_j α_ij W V_j`. Every node
//! also receives a self-loop with a zero edge feature so that isolated nodes
//! keep their own signal. The edge update `E'_ij = A [V_i ‖ E_ij ‖ V_j]` is
//! produced for the real arcs only.
//!
//! Matrices act on row vectors (`V W` rather than `W V`). The concatenated
//! products are evaluated blockwise, `[V_i ‖ E ‖ V_j] U = V_i U₁ + E U₂ + V_j U₃`,
//! and the attention vector is folded in first (`U a`), which is the same
//! function with far fewer multiplications.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{
    segment_softmax_shared, segment_sum_shared, stack_rows, Init, ParamStore, Result, Tensor, TensorError,
};

/// Negative slope of the attention LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Learnable matrices of one EGAT layer.
#[derive(Debug, Clone)]
pub struct EgatParams {
    /// Node transform, `d_in x d_out`.
    pub w: Tensor,
    /// Pre-attention transform, `(2 d_in + d_e) x d_att`.
    pub u: Tensor,
    /// Attention vector, `d_att x 1`.
    pub a: Tensor,
    /// Edge update, `(2 d_in + d_e) x d_e_out`. Absent on layers whose edge
    /// output is never consumed.
    pub edge: Option<Tensor>,
    pub d_in: usize,
    pub d_e: usize,
}

impl EgatParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_e: usize,
        d_out: usize,
        d_e_out: Option<usize>,
        d_att: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = 2 * d_in + d_e;
        Self {
            w: store.add(format!("{prefix}.W"), d_in, d_out, Init::XavierUniform, rng),
            u: store.add(format!("{prefix}.U"), k, d_att, Init::XavierUniform, rng),
            a: store.add(format!("{prefix}.a"), d_att, 1, Init::XavierUniform, rng),
            edge: d_e_out.map(|c| store.add(format!("{prefix}.A"), k, c, Init::XavierUniform, rng)),
            d_in,
            d_e,
        }
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn d_e_out(&self) -> Option<usize> {
        self.edge.as_ref().map(Tensor::cols)
    }
}

/// Parameters of the per-node scoring `cᵀ tanh(W V_m + b)` shared by all tags
/// of one fusion site.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub c: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            c: store.add(format!("{prefix}.c"), d, 1, Init::XavierUniform, rng),
            w: store.add(format!("{prefix}.W"), d, d, Init::XavierUniform, rng),
            b: store.add(format!("{prefix}.b"), 1, 1, Init::Zeros, rng),
        }
    }
}

/// Attention weights of one EGAT layer: one entry per real arc followed by
/// one per self-loop (node order), with the destination of each entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub alpha: Vec<f64>,
    pub dst: Vec<usize>,
}

impl AttentionRecord {
    /// Sum of α over the incoming arcs of every node.
    pub fn sums_per_node(&self, n_nodes: usize) -> Vec<f64> {
        let mut s = vec![0.0; n_nodes];
        for (&a, &d) in self.alpha.iter().zip(&self.dst) {
            s[d] += a;
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct EgatOutput {
    pub nodes: Tensor,
    /// Updated arc features, absent when the caller did not ask for them.
    pub edges: Option<Tensor>,
    pub attention: AttentionRecord,
}

fn dim_error(op: &'static str, got: (usize, usize), want: (usize, usize)) -> TensorError {
    TensorError::Shape { op, left: got, right: want }
}

/// One EGAT layer over `n = v.rows()` nodes and the arcs `(src, dst)`.
/// Edge outputs are produced when the layer has an edge transform.
pub fn egat_layer(v: &Tensor, e: &Tensor, arcs: &[(usize, usize)], params: &EgatParams) -> Result<EgatOutput> {
    let n = v.rows();
    let m = arcs.len();
    if v.cols() != params.d_in {
        return Err(dim_error("egat_layer nodes", v.shape(), (n, params.d_in)));
    }
    if e.cols() != params.d_e || e.rows() != m {
        return Err(dim_error("egat_layer edges", e.shape(), (m, params.d_e)));
    }
    if let Some(&(s, d)) = arcs.iter().find(|(s, d)| *s >= n || *d >= n) {
        return Err(TensorError::IndexOutOfRange { op: "egat_layer arc", index: s.max(d), rows: n });
    }

    let src: Arc<[usize]> = arcs.iter().map(|a| a.0).chain(0..n).collect();
    let dst: Arc<[usize]> = arcs.iter().map(|a| a.1).chain(0..n).collect();
    let (d_in, d_e) = (params.d_in, params.d_e);

    // attention logits
    let ua = params.u.matmul(&params.a)?;
    let score_dst = v.matmul(&ua.slice_rows(0, d_in)?)?;
    let score_edge = e.matmul(&ua.slice_rows(d_in, d_in + d_e)?)?;
    let score_src = v.matmul(&ua.slice_rows(d_in + d_e, 2 * d_in + d_e)?)?;
    let edge_term = stack_rows(&[score_edge, Tensor::zeros(n, 1)])?;
    let logits = score_dst
        .gather_rows_shared(dst.clone())?
        .add(&score_src.gather_rows_shared(src.clone())?)?
        .add(&edge_term)?
        .leaky_relu(LEAKY_SLOPE);
    let alpha = segment_softmax_shared(&logits, dst.clone())?;

    // node update
    let messages = v.matmul(&params.w)?.gather_rows_shared(src)?.scale_rows(&alpha)?;
    let nodes = segment_sum_shared(&messages, dst.clone(), n)?;

    let edges = if let Some(a) = &params.edge {
        let real_src: Arc<[usize]> = arcs.iter().map(|a| a.0).collect();
        let real_dst: Arc<[usize]> = arcs.iter().map(|a| a.1).collect();
        let from_dst = v.matmul(&a.slice_rows(0, d_in)?)?.gather_rows_shared(real_dst)?;
        let from_edge = e.matmul(&a.slice_rows(d_in, d_in + d_e)?)?;
        let from_src = v.matmul(&a.slice_rows(d_in + d_e, 2 * d_in + d_e)?)?.gather_rows_shared(real_src)?;
        Some(from_dst.add(&from_edge)?.add(&from_src)?)
    } else {
        None
    };

    let attention = AttentionRecord { alpha: alpha.to_vec(), dst: dst.to_vec() };
    Ok(EgatOutput { nodes, edges, attention })
}

/// Which edge types take part in message passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeTypes {
    #[default]
    Both,
    SpatialOnly,
    OdOnly,
}

impl EdgeTypes {
    pub fn spatial(self) -> bool {
        self != EdgeTypes::OdOnly
    }

    pub fn od(self) -> bool {
        self != EdgeTypes::SpatialOnly
    }
}

/// Parameters of one heterogeneous layer. A missing edge type has no EGAT
/// parameters, and with a single type there is nothing to fuse.
#[derive(Debug, Clone)]
pub struct HeteroLayerParams {
    pub spatial: Option<EgatParams>,
    pub od: Option<EgatParams>,
    pub fusion: Option<FusionParams>,
}

impl HeteroLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        types: EdgeTypes,
        d_in: usize,
        d_spatial: usize,
        d_od: usize,
        d: usize,
        edges_out: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let d_e_out = edges_out.then_some(d);
        let spatial = types
            .spatial()
            .then(|| EgatParams::new(store, &format!("{prefix}.rn"), d_in, d_spatial, d, d_e_out, d, rng));
        let od = types
            .od()
            .then(|| EgatParams::new(store, &format!("{prefix}.od"), d_in, d_od, d, d_e_out, d, rng));
        let fusion = (types == EdgeTypes::Both).then(|| FusionParams::new(store, &format!("{prefix}.fusion"), d, rng));
        Self { spatial, od, fusion }
    }
}

/// Node features plus the two typed arc sets of one level, with OD features
/// already embedded.
#[derive(Debug, Clone)]
pub struct LayerInput {
    pub nodes: Tensor,
    pub spatial_arcs: Vec<(usize, usize)>,
    pub spatial_feats: Tensor,
    pub od_arcs: Vec<(usize, usize)>,
    pub od_feats: Tensor,
}

/// Attention produced by one heterogeneous layer.
#[derive(Debug, Clone, Default)]
pub struct HeteroRecord {
    pub spatial: Option<AttentionRecord>,
    pub od: Option<AttentionRecord>,
    /// Row-major `N x 2` fusion weights `(β_rn, β_od)`; a dropped type has weight 0.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeteroOutput {
    pub nodes: Tensor,
    pub spatial_edges: Option<Tensor>,
    pub od_edges: Option<Tensor>,
    pub record: HeteroRecord,
}

/// One EGAT pass per edge type followed by attentional fusion of the results.
pub fn hetero_layer(input: &LayerInput, params: &HeteroLayerParams) -> Result<HeteroOutput> {
    let n = input.nodes.rows();
    let spatial = params
        .spatial
        .as_ref()
        .map(|p| egat_layer(&input.nodes, &input.spatial_feats, &input.spatial_arcs, p))
        .transpose()?;
    let od = params
        .od
        .as_ref()
        .map(|p| egat_layer(&input.nodes, &input.od_feats, &input.od_arcs, p))
        .transpose()?;
    let (nodes, beta) = match (&spatial, &od, &params.fusion) {
        (Some(s), Some(o), Some(f)) => {
            let (fused, beta) = attention_fusion(&[s.nodes.clone(), o.nodes.clone()], f)?;
            (fused, beta)
        }
        (Some(s), None, _) => (s.nodes.clone(), (0..n).flat_map(|_| [1.0, 0.0]).collect()),
        (None, Some(o), _) => (o.nodes.clone(), (0..n).flat_map(|_| [0.0, 1.0]).collect()),
        _ => return Err(TensorError::Empty("hetero_layer: no edge type configured")),
    };
    Ok(HeteroOutput {
        nodes,
        record: HeteroRecord {
            spatial: spatial.as_ref().map(|s| s.attention.clone()),
            od: od.as_ref().map(|o| o.attention.clone()),
            beta,
        },
        spatial_edges: spatial.and_then(|s| s.edges),
        od_edges: od.and_then(|o| o.edges),
    })
}

/// Softmax across tags, per node. `scores[m]` is the `N x 1` score column of
/// tag `m`; the result stacks the weights tag by tag (`k N x 1`).
pub fn tag_softmax(scores: &[Tensor]) -> Result<Tensor> {
    let n = scores.first().ok_or(TensorError::Empty("tag_softmax"))?.rows();
    let segments: Arc<[usize]> = (0..scores.len()).flat_map(|_| 0..n).collect();
    segment_softmax_shared(&stack_rows(scores)?, segments)
}

/// Attention-weighted sum of same-shaped node matrices. Each tag's score per
/// node is `cᵀ tanh(W V_m + b)`; the weights β are a softmax over tags.
///
/// Returns the fused matrix and the row-major `N x k` weights.
pub fn attention_fusion(inputs: &[Tensor], params: &FusionParams) -> Result<(Tensor, Vec<f64>)> {
    let first = inputs.first().ok_or(TensorError::Empty("attention_fusion"))?;
    let (n, d) = first.shape();
    if let Some(bad) = inputs.iter().find(|t| t.shape() != (n, d)) {
        return Err(dim_error("attention_fusion", bad.shape(), (n, d)));
    }
    let k = inputs.len();
    if k == 1 {
        return Ok((first.clone(), vec![1.0; n]));
    }
    let scores = inputs
        .iter()
        .map(|v| v.matmul(&params.w)?.add_scalar(&params.b)?.tanh().matmul(&params.c))
        .collect::<Result<Vec<_>>>()?;
    let beta = tag_softmax(&scores)?;
    let mut fused: Option<Tensor> = None;
    for (m, v) in inputs.iter().enumerate() {
        let term = v.scale_rows(&beta.slice_rows(m * n, (m + 1) * n)?)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let flat = beta.to_vec();
    let weights = (0..n).flat_map(|i| (0..k).map(move |m| (i, m))).map(|(i, m)| flat[m * n + i]).collect();
    Ok((fused.expect("k >= 2"), weights))
}

/// Output of a heterogeneous stack: final node features and every layer's record.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub nodes: Tensor,
    pub records: Vec<HeteroRecord>,
}

/// `layers.len()` heterogeneous layers in sequence; each consumes the
/// previous layer's node features and per-type edge features. The last layer
/// is normally built without edge transforms since its edge output is unused.
pub fn stack_hetero(input: &LayerInput, layers: &[HeteroLayerParams]) -> Result<StackOutput> {
    if layers.is_empty() {
        return Err(TensorError::Empty("stack_hetero"));
    }
    let mut current = input.clone();
    let mut records = Vec::with_capacity(layers.len());
    for (l, params) in layers.iter().enumerate() {
        let last = l + 1 == layers.len();
        let out = hetero_layer(&current, params)?;
        records.push(out.record);
        if last {
            return Ok(StackOutput { nodes: out.nodes, records });
        }
        current.nodes = out.nodes;
        if let Some(e) = out.spatial_edges {
            current.spatial_feats = e;
        }
        if let Some(e) = out.od_edges {
            current.od_feats = e;
        }
    }
    unreachable!("loop returns on the last layer")
}

/// `layers.len()` EGAT layers over a single graph, returning the final node
/// features and, when the last layer has an edge transform, arc features.
pub fn stack_egat(
    v: &Tensor,
    e: &Tensor,
    arcs: &[(usize, usize)],
    layers: &[EgatParams],
) -> Result<(Tensor, Option<Tensor>)> {
    if layers.is_empty() {
        return Err(TensorError::Empty("stack_egat"));
    }
    let (mut v, mut e) = (v.clone(), Some(e.clone()));
    for params in layers {
        let input = e.as_ref().ok_or(TensorError::Empty("stack_egat: inner layer without edge transform"))?;
        let out = egat_layer(&v, input, arcs, params)?;
        v = out.nodes;
        e = out.edges;
    }
    Ok((v, e))
}
