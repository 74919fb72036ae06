//! Compact differentiable scene flow estimator.
//!
//! The model keeps the three-unit decomposition of recurrent scene flow
//! networks: a pointwise encoder, an all-to-all cosine-similarity correlation
//! unit producing a coarse flow, and a recurrent local update unit refining it
//! over K iterations (F_k = F_{k-1} + dF, with update-unit weights shared
//! across iterations). Parameters live in one flat vector with a named segment
//! layout, which is also the FL wire format; the encoder and correlation unit
//! form the `base` partition and the update unit the `head` partition for
//! partial-personalization methods.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradient, NodeId, Tape};
use crate::geometry::{self, PointCloud};
use crate::{Error, Result};

pub use crate::geometry::FlowField;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Number of refinement iterations K (the first produces the coarse flow).
    pub refine_iters: usize,
    pub correlation_temperature: f64,
    pub knn_k_local: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 64,
            refine_iters: 4,
            correlation_temperature: 0.07,
            knn_k_local: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refine_iters < 1 {
            return Err(Error::Config("model.refine_iters must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.correlation_temperature <= 0.0 {
            return Err(Error::Config(
                "model.correlation_temperature must be > 0".into(),
            ));
        }
        if self.knn_k_local == 0 {
            return Err(Error::Config("model.knn_k_local must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which side of the base/head partition a segment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    /// Encoder + correlation unit: the shared representation.
    Base,
    /// Local update unit.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegKind {
    Weight,
    Bias,
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: SegKind,
    pub part: Part,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Segment layout of a parameter vector; offsets tile the vector exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl Layout {
    /// Derives the layout for a model configuration.
    pub fn for_config(cfg: &ModelConfig) -> Arc<Layout> {
        let f = cfg.feature_dim;
        let h = cfg.hidden_dim;
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut seg = |name: &str, rows: usize, cols: usize, kind: SegKind, part: Part| {
            let s = Segment {
                name: name.to_string(),
                offset,
                rows,
                cols,
                kind,
                part,
            };
            offset += s.len();
            s
        };
        segments.push(seg("enc_w1", 6, h, SegKind::Weight, Part::Base));
        segments.push(seg("enc_b1", 1, h, SegKind::Bias, Part::Base));
        segments.push(seg("enc_w2", h, f, SegKind::Weight, Part::Base));
        segments.push(seg("enc_b2", 1, f, SegKind::Bias, Part::Base));
        segments.push(seg("upd_w1", 9, h, SegKind::Weight, Part::Head));
        segments.push(seg("upd_b1", 1, h, SegKind::Bias, Part::Head));
        segments.push(seg("upd_w2", h, 3, SegKind::Weight, Part::Head));
        segments.push(seg("upd_b2", 1, 3, SegKind::Bias, Part::Head));
        Arc::new(Layout {
            segments,
            total: offset,
        })
    }

    pub fn part_len(&self, part: Part) -> usize {
        self.segments
            .iter()
            .filter(|s| s.part == part)
            .map(Segment::len)
            .sum()
    }

    /// True at coordinates belonging to `part`.
    pub fn mask(&self, part: Part) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for s in &self.segments {
            if s.part == part {
                m[s.offset..s.offset + s.len()]
                    .iter_mut()
                    .for_each(|b| *b = true);
            }
        }
        m
    }
}

/// Flat 64-bit parameter vector plus its layout: the unit of FL communication.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.total],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.offset..seg.offset + seg.len()]
    }

    pub fn segment_array(&self, seg: &Segment) -> Array2<f64> {
        Array2::from_shape_vec((seg.rows, seg.cols), self.segment_values(seg).to_vec())
            .expect("segment shape")
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        *self.layout == *other.layout
    }
}

/// Initializes weights uniform in (-s, s) with s = 1/sqrt(fan_in); biases zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamVector {
    let layout = Layout::for_config(cfg);
    let mut values = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in &layout.segments {
        if seg.kind == SegKind::Weight {
            let s = 1.0 / (seg.rows as f64).sqrt();
            for v in &mut values[seg.offset..seg.offset + seg.len()] {
                *v = rng.gen_range(-s..s);
            }
        }
    }
    ParamVector { values, layout }
}

/// Tape nodes for every parameter segment.
pub struct StagedParams {
    pub enc_w1: NodeId,
    pub enc_b1: NodeId,
    pub enc_w2: NodeId,
    pub enc_b2: NodeId,
    pub upd_w1: NodeId,
    pub upd_b1: NodeId,
    pub upd_w2: NodeId,
    pub upd_b2: NodeId,
}

impl StagedParams {
    fn in_layout_order(&self) -> [NodeId; 8] {
        [
            self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2, self.upd_w1, self.upd_b1,
            self.upd_w2, self.upd_b2,
        ]
    }
}

/// Registers every segment as a differentiable leaf on the tape.
pub fn stage_params(tape: &mut Tape, params: &ParamVector) -> StagedParams {
    let mut seg = |i: usize| -> NodeId {
        tape.var(params.segment_array(&params.layout.segments[i]))
    };
    StagedParams {
        enc_w1: seg(0),
        enc_b1: seg(1),
        enc_w2: seg(2),
        enc_b2: seg(3),
        upd_w1: seg(4),
        upd_b1: seg(5),
        upd_w2: seg(6),
        upd_b2: seg(7),
    }
}

/// Flattens per-segment tape gradients into a vector matching the parameter
/// layout. Segments unreached by the output contribute zeros.
pub fn collect_gradient(
    node_grads: &[Option<Array2<f64>>],
    staged: &StagedParams,
    layout: &Layout,
) -> Gradient {
    let mut out = vec![0.0; layout.total];
    for (seg, node) in layout.segments.iter().zip(staged.in_layout_order()) {
        if let Some(g) = node_grads.get(node.index()).and_then(|g| g.as_ref()) {
            for (dst, src) in out[seg.offset..seg.offset + seg.len()]
                .iter_mut()
                .zip(g.iter())
            {
                *dst = *src;
            }
        }
    }
    out
}

pub fn cloud_to_array(c: &PointCloud) -> Array2<f64> {
    let mut a = Array2::zeros((c.len(), 3));
    for (i, p) in c.iter().enumerate() {
        for (j, v) in p.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    a
}

pub fn array_to_flow(a: &Array2<f64>) -> FlowField {
    FlowField {
        vectors: a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
    }
}

fn array_to_cloud(a: &Array2<f64>) -> Result<PointCloud> {
    PointCloud::new(a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Constant per-point encoder input: coordinates concatenated with the mean
/// offset to the k nearest neighbors within the same cloud (zero when the
/// point has no neighbors).
fn encoder_input(cloud: &PointCloud, k: usize) -> Result<Array2<f64>> {
    let n = cloud.len();
    let nn = geometry::knn_excluding_self(cloud, k)?;
    let mut x = Array2::zeros((n, 6));
    for (i, p) in cloud.iter().enumerate() {
        for j in 0..3 {
            x[(i, j)] = p[j];
        }
        let neigh = &nn.indices[i];
        if !neigh.is_empty() {
            let mut mean = [0.0; 3];
            for &jn in neigh {
                mean = geometry::add(mean, geometry::sub(cloud.points()[jn], *p));
            }
            mean = geometry::scale(mean, 1.0 / neigh.len() as f64);
            for j in 0..3 {
                x[(i, 3 + j)] = mean[j];
            }
        }
    }
    Ok(x)
}

/// Per-point features: two-layer pointwise network over the encoder input.
pub fn encode(
    tape: &mut Tape,
    staged: &StagedParams,
    cloud: &PointCloud,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("encode: empty cloud".into()));
    }
    let x = tape.constant(encoder_input(cloud, cfg.knn_k_local)?);
    let h_lin = tape.matmul(x, staged.enc_w1);
    let h_aff = tape.add_row(h_lin, staged.enc_b1);
    let h = tape.tanh(h_aff);
    let f_lin = tape.matmul(h, staged.enc_w2);
    Ok(tape.add_row(f_lin, staged.enc_b2))
}

/// Coarse flow from soft correspondences: row-softmax over scaled cosine
/// similarities gives weights w, and F1[a] = sum_b w_ab p_b - p_a.
pub fn global_correlation(
    tape: &mut Tape,
    feat_src: NodeId,
    feat_tgt: NodeId,
    src_node: NodeId,
    tgt_node: NodeId,
    temperature: f64,
) -> NodeId {
    let a = tape.row_normalize(feat_src);
    let b = tape.row_normalize(feat_tgt);
    let cosine = tape.matmul_t(a, b);
    let logits = tape.scale(cosine, 1.0 / temperature);
    let weights = tape.row_softmax(logits);
    let soft_tgt = tape.matmul(weights, tgt_node);
    tape.sub(soft_tgt, src_node)
}

/// Residual refinement: for each warped point, gather its nearest target
/// points (indices fixed from the forward values) and map
/// [warped, mean neighbor offset, previous flow] through a pointwise network.
pub fn local_update(
    tape: &mut Tape,
    staged: &StagedParams,
    warped: NodeId,
    tgt_node: NodeId,
    tgt_cloud: &PointCloud,
    f_prev: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    if tgt_cloud.is_empty() {
        return Err(Error::InvalidInput("local_update: empty target".into()));
    }
    let warped_cloud = array_to_cloud(tape.value(warped))?;
    let nn = geometry::knn(tgt_cloud, &warped_cloud, cfg.knn_k_local)?;
    let k_eff = nn.indices[0].len().max(1);

    // Mean of gathered neighbor positions, one gather per neighbor slot.
    let mut acc: Option<NodeId> = None;
    for slot in 0..k_eff {
        let idx: Vec<usize> = nn.indices.iter().map(|row| row[slot]).collect();
        let gathered = tape.gather(tgt_node, idx);
        acc = Some(match acc {
            None => gathered,
            Some(a) => tape.add(a, gathered),
        });
    }
    let sum_nbr = acc.expect("at least one neighbor slot");
    let mean_nbr = tape.scale(sum_nbr, 1.0 / k_eff as f64);
    let mean_offset = tape.sub(mean_nbr, warped);

    let wo = tape.concat_cols(warped, mean_offset);
    let x = tape.concat_cols(wo, f_prev);
    let h_lin = tape.matmul(x, staged.upd_w1);
    let h_aff = tape.add_row(h_lin, staged.upd_b1);
    let h = tape.tanh(h_aff);
    let d_lin = tape.matmul(h, staged.upd_w2);
    Ok(tape.add_row(d_lin, staged.upd_b2))
}

/// The recorded forward pass: K flow nodes plus the constant cloud nodes.
pub struct TapeForward {
    pub flows: Vec<NodeId>,
    pub src_node: NodeId,
    pub tgt_node: NodeId,
}

/// Runs the full K-step forward pass on the tape.
pub fn predict_on_tape(
    tape: &mut Tape,
    staged: &StagedParams,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &ModelConfig,
) -> Result<TapeForward> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidInput("predict: empty cloud".into()));
    }
    let src_node = tape.constant(cloud_to_array(src));
    let tgt_node = tape.constant(cloud_to_array(tgt));
    let feat_src = encode(tape, staged, src, cfg)?;
    let feat_tgt = encode(tape, staged, tgt, cfg)?;
    let mut flows = Vec::with_capacity(cfg.refine_iters);
    let f1 = global_correlation(
        tape,
        feat_src,
        feat_tgt,
        src_node,
        tgt_node,
        cfg.correlation_temperature,
    );
    flows.push(f1);
    for _ in 1..cfg.refine_iters {
        let prev = *flows.last().expect("nonempty");
        let warped = tape.add(src_node, prev);
        let delta = local_update(tape, staged, warped, tgt_node, tgt, prev, cfg)?;
        flows.push(tape.add(prev, delta));
    }
    Ok(TapeForward {
        flows,
        src_node,
        tgt_node,
    })
}

/// Convenience forward pass returning plain flow fields (final estimate last).
pub fn predict(
    params: &ParamVector,
    src: &PointCloud,
    tgt: &PointCloud,
    cfg: &ModelConfig,
) -> Result<Vec<FlowField>> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params);
    let fwd = predict_on_tape(&mut tape, &staged, src, tgt, cfg)?;
    Ok(fwd
        .flows
        .iter()
        .map(|id| array_to_flow(tape.value(*id)))
        .collect())
}

/// One side of the base/head partition, segments concatenated in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSegmentView {
    pub part: Part,
    pub values: Vec<f64>,
}

pub fn split_params(params: &ParamVector, part: Part) -> ParamSegmentView {
    let mut values = Vec::with_capacity(params.layout.part_len(part));
    for seg in &params.layout.segments {
        if seg.part == part {
            values.extend_from_slice(params.segment_values(seg));
        }
    }
    ParamSegmentView { part, values }
}

/// Reassembles a full vector from the two partition views.
pub fn merge_params(
    layout: &Arc<Layout>,
    base: &ParamSegmentView,
    head: &ParamSegmentView,
) -> Result<ParamVector> {
    if base.part != Part::Base || head.part != Part::Head {
        return Err(Error::LayoutMismatch(
            "merge_params expects (base, head) views in that order".into(),
        ));
    }
    if base.values.len() != layout.part_len(Part::Base)
        || head.values.len() != layout.part_len(Part::Head)
    {
        return Err(Error::LayoutMismatch(format!(
            "partition sizes {}/{} do not match layout {}/{}",
            base.values.len(),
            head.values.len(),
            layout.part_len(Part::Base),
            layout.part_len(Part::Head)
        )));
    }
    let mut values = vec![0.0; layout.total];
    let (mut bi, mut hi) = (0, 0);
    for seg in &layout.segments {
        let dst = &mut values[seg.offset..seg.offset + seg.len()];
        match seg.part {
            Part::Base => {
                dst.copy_from_slice(&base.values[bi..bi + seg.len()]);
                bi += seg.len();
            }
            Part::Head => {
                dst.copy_from_slice(&head.values[hi..hi + seg.len()]);
                hi += seg.len();
            }
        }
    }
    Ok(ParamVector {
        values,
        layout: Arc::clone(layout),
    })
}

/// Writes the wire format: flat little-endian f64 values plus a JSON layout
/// manifest at `<path>.layout.json`.
pub fn save_params(params: &ParamVector, bin_path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.values.len() * 8);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(bin_path, bytes)?;
    let manifest = serde_json::to_string_pretty(&*params.layout)?;
    std::fs::write(manifest_path(bin_path), manifest)?;
    Ok(())
}

pub fn load_params(bin_path: &Path) -> Result<ParamVector> {
    let layout: Layout = serde_json::from_str(&std::fs::read_to_string(manifest_path(bin_path))?)?;
    let bytes = std::fs::read(bin_path)?;
    if bytes.len() != layout.total * 8 {
        return Err(Error::LayoutMismatch(format!(
            "parameter file holds {} bytes, layout expects {}",
            bytes.len(),
            layout.total * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ParamVector {
        values,
        layout: Arc::new(layout),
    })
}

fn manifest_path(bin_path: &Path) -> std::path::PathBuf {
    let mut p = bin_path.as_os_str().to_owned();
    p.push(".layout.json");
    std::path::PathBuf::from(p)
}
