//! The self-supervised objective: static-probability weighted Chamfer loss
//! plus smoothness regularization, summed over the model's K flow estimates.
//!
//! The Chamfer term is one-directional (warped source toward target) as the
//! multi-modal formulation defines it; a bidirectional toggle exists for
//! ablation. Static probabilities s_a = exp(-alpha * ||optical||) reweight the
//! per-point terms on camera clients; single-modal clients use s_a = 1, which
//! is an exact reduction, not an approximation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradient, NodeId, Tape};
use crate::flowmodel::{
    self, cloud_to_array, stage_params, FlowField, ModelConfig, ParamVector,
};
use crate::geometry::{self, PointCloud};
use crate::scenegen::FramePair;
use crate::{Error, Result};

/// Loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta_ch: f64,
    pub beta_reg: f64,
    /// Static-probability decay per pixel of optical flow.
    pub alpha: f64,
    pub knn_k_smooth: usize,
    /// Adds the unweighted target-to-warped Chamfer term.
    pub bidirectional_chamfer: bool,
    /// Normalizes Chamfer sums by point count (off: the sum as defined).
    pub chamfer_mean: bool,
    /// Weights over the K step losses; empty means equal weights.
    pub per_step_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta_ch: 0.75,
            beta_reg: 0.25,
            alpha: 1.0,
            knn_k_smooth: 8,
            bidirectional_chamfer: false,
            chamfer_mean: false,
            per_step_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_ch < 0.0 || self.beta_reg < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("loss.alpha must be nonnegative".into()));
        }
        if self.knn_k_smooth == 0 {
            return Err(Error::Config("loss.knn_k_smooth must be >= 1".into()));
        }
        if self.per_step_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(
                "loss.per_step_weights must be nonnegative".into(),
            ));
        }
        if !self.per_step_weights.is_empty() && self.per_step_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "loss.per_step_weights must not sum to zero".into(),
            ));
        }
        Ok(())
    }

    /// Step weights for a K-iteration model.
    fn step_weights(&self, k: usize) -> Result<Vec<f64>> {
        if self.per_step_weights.is_empty() {
            return Ok(vec![1.0; k]);
        }
        if self.per_step_weights.len() != k {
            return Err(Error::Config(format!(
                "loss.per_step_weights has {} entries, model predicts {} steps",
                self.per_step_weights.len(),
                k
            )));
        }
        Ok(self.per_step_weights.clone())
    }
}

/// Per-point probabilities of being static, in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct StaticWeights {
    pub s: Vec<f64>,
}

impl StaticWeights {
    pub fn ones(n: usize) -> Self {
        Self { s: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// s_a = exp(-alpha * ||optical_a||).
pub fn static_weights(optical: &[[f64; 2]], alpha: f64) -> Result<StaticWeights> {
    if alpha < 0.0 {
        return Err(Error::InvalidInput("alpha must be nonnegative".into()));
    }
    Ok(StaticWeights {
        s: optical
            .iter()
            .map(|o| (-alpha * (o[0] * o[0] + o[1] * o[1]).sqrt()).exp())
            .collect(),
    })
}

fn pair_static_weights(pair: &FramePair, alpha: f64) -> Result<StaticWeights> {
    match &pair.optical {
        Some(o) => static_weights(o, alpha),
        None => Ok(StaticWeights::ones(pair.source.len())),
    }
}

/// Weighted one-directional Chamfer: sum_a s_a min_b ||warped_a - target_b||^2
/// (plus the unweighted reverse term when configured).
pub fn chamfer_loss(
    warped: &PointCloud,
    target: &PointCloud,
    s: &StaticWeights,
    cfg: &LossConfig,
) -> Result<f64> {
    if warped.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("chamfer_loss: empty cloud".into()));
    }
    if s.len() != warped.len() {
        return Err(Error::InvalidInput(
            "chamfer_loss: weights length differs from warped cloud".into(),
        ));
    }
    let nn = geometry::knn(target, warped, 1)?;
    let mut loss: f64 = nn
        .dist2
        .iter()
        .zip(&s.s)
        .map(|(d, w)| w * d[0])
        .sum();
    if cfg.chamfer_mean {
        loss /= warped.len() as f64;
    }
    if cfg.bidirectional_chamfer {
        let rev = geometry::knn(warped, target, 1)?;
        let mut back: f64 = rev.dist2.iter().map(|d| d[0]).sum();
        if cfg.chamfer_mean {
            back /= target.len() as f64;
        }
        loss += back;
    }
    Ok(loss)
}

/// Smoothness regularization over source-cloud neighborhoods:
/// sum_a (1/|N(a)|) sum_{j in N(a)} ||f_a - f_j||^2.
pub fn smoothness_loss(source: &PointCloud, flow: &FlowField, k: usize) -> Result<f64> {
    if flow.len() != source.len() {
        return Err(Error::InvalidInput(
            "smoothness_loss: flow length differs from source".into(),
        ));
    }
    if source.is_empty() {
        return Err(Error::InvalidInput("smoothness_loss: empty source".into()));
    }
    let nn = geometry::knn_excluding_self(source, k)?;
    let mut loss = 0.0;
    for (i, neigh) in nn.indices.iter().enumerate() {
        if neigh.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &j in neigh {
            let d = geometry::sub(flow.vectors[i], flow.vectors[j]);
            acc += geometry::dot(d, d);
        }
        loss += acc / neigh.len() as f64;
    }
    Ok(loss)
}

/// Records the weighted Chamfer term on the tape. Nearest-neighbor indices
/// are fixed from the forward values (argmin subgradient; ties take the
/// smaller index, like every knn query).
pub fn chamfer_term(
    tape: &mut Tape,
    warped: NodeId,
    target_node: NodeId,
    target_cloud: &PointCloud,
    s: &StaticWeights,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let warped_cloud = PointCloud::new(
        tape.value(warped)
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect(),
    )?;
    if warped_cloud.is_empty() || target_cloud.is_empty() {
        return Err(Error::InvalidInput("chamfer_term: empty cloud".into()));
    }
    if s.len() != warped_cloud.len() {
        return Err(Error::InvalidInput(
            "chamfer_term: weights length differs from warped cloud".into(),
        ));
    }
    let nn = geometry::knn(target_cloud, &warped_cloud, 1)?;
    let idx: Vec<usize> = nn.indices.iter().map(|r| r[0]).collect();
    let nearest = tape.gather(target_node, idx);
    let diff = tape.sub(warped, nearest);
    let sq = tape.mul(diff, diff);
    let rows = tape.row_sum(sq);
    let w = tape.constant(
        Array2::from_shape_vec((s.len(), 1), s.s.clone()).expect("weight column"),
    );
    let weighted = tape.mul_col(rows, w);
    let mut loss = tape.sum(weighted);
    if cfg.chamfer_mean {
        loss = tape.scale(loss, 1.0 / warped_cloud.len() as f64);
    }
    if cfg.bidirectional_chamfer {
        let rev = geometry::knn(&warped_cloud, target_cloud, 1)?;
        let ridx: Vec<usize> = rev.indices.iter().map(|r| r[0]).collect();
        let nearest_w = tape.gather(warped, ridx);
        let rdiff = tape.sub(nearest_w, target_node);
        let rsq = tape.mul(rdiff, rdiff);
        let rrows = tape.row_sum(rsq);
        let mut back = tape.sum(rrows);
        if cfg.chamfer_mean {
            back = tape.scale(back, 1.0 / target_cloud.len() as f64);
        }
        loss = tape.add(loss, back);
    }
    Ok(loss)
}

/// Records the smoothness term on the tape. Neighbor slots beyond a point's
/// neighborhood gather the point itself, contributing exactly zero.
pub fn smoothness_term(
    tape: &mut Tape,
    flow: NodeId,
    source: &PointCloud,
    k: usize,
) -> Result<NodeId> {
    if source.is_empty() {
        return Err(Error::InvalidInput("smoothness_term: empty source".into()));
    }
    let nn = geometry::knn_excluding_self(source, k)?;
    let n = source.len();
    let max_k = nn.indices.iter().map(Vec::len).max().unwrap_or(0);
    if max_k == 0 {
        return Ok(tape.scalar(0.0));
    }
    let weights: Vec<f64> = nn
        .indices
        .iter()
        .map(|r| if r.is_empty() { 0.0 } else { 1.0 / r.len() as f64 })
        .collect();
    let w = tape.constant(Array2::from_shape_vec((n, 1), weights).expect("weight column"));
    let mut acc: Option<NodeId> = None;
    for slot in 0..max_k {
        let idx: Vec<usize> = nn
            .indices
            .iter()
            .enumerate()
            .map(|(i, r)| if slot < r.len() { r[slot] } else { i })
            .collect();
        let gathered = tape.gather(flow, idx);
        let diff = tape.sub(flow, gathered);
        let sq = tape.mul(diff, diff);
        let rows = tape.row_sum(sq);
        let weighted = tape.mul_col(rows, w);
        let term = tape.sum(weighted);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    Ok(acc.expect("max_k > 0"))
}

/// Records the full objective: predict K flows, per step compute
/// beta_ch * chamfer + beta_reg * smoothness, combine with step weights.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    staged: &flowmodel::StagedParams,
    pair: &FramePair,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<NodeId> {
    loss_cfg.validate()?;
    let fwd = flowmodel::predict_on_tape(tape, staged, &pair.source, &pair.target, model_cfg)?;
    let s = pair_static_weights(pair, loss_cfg.alpha)?;
    let weights = loss_cfg.step_weights(fwd.flows.len())?;
    let wsum: f64 = weights.iter().sum();
    let mut acc: Option<NodeId> = None;
    for (flow, w) in fwd.flows.iter().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        let warped = tape.add(fwd.src_node, *flow);
        let ch = chamfer_term(tape, warped, fwd.tgt_node, &pair.target, &s, loss_cfg)?;
        let sm = smoothness_term(tape, *flow, &pair.source, loss_cfg.knn_k_smooth)?;
        let ch_w = tape.scale(ch, loss_cfg.beta_ch * w / wsum);
        let sm_w = tape.scale(sm, loss_cfg.beta_reg * w / wsum);
        let step = tape.add(ch_w, sm_w);
        acc = Some(match acc {
            None => step,
            Some(a) => tape.add(a, step),
        });
    }
    Ok(acc.unwrap_or_else(|| tape.scalar(0.0)))
}

/// Objective value at `params`.
pub fn total_loss(
    params: &ParamVector,
    pair: &FramePair,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params);
    let loss = total_loss_on_tape(&mut tape, &staged, pair, model_cfg, loss_cfg)?;
    Ok(tape.value(loss)[(0, 0)])
}

/// Objective value and gradient with respect to the flat parameters.
pub fn total_loss_grad(
    params: &ParamVector,
    pair: &FramePair,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, Gradient)> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params);
    let loss = total_loss_on_tape(&mut tape, &staged, pair, model_cfg, loss_cfg)?;
    let value = tape.value(loss)[(0, 0)];
    let node_grads = tape.backward(loss)?;
    let grad = flowmodel::collect_gradient(&node_grads, &staged, &params.layout);
    Ok((value, grad))
}

/// Single-step objective over a free per-point flow variable (no network):
/// beta_ch * chamfer(source + flow, target) + beta_reg * smoothness(flow).
/// Returns the loss and its gradient with respect to the flow.
pub fn flow_objective(
    src: &PointCloud,
    tgt: &PointCloud,
    optical: Option<&[[f64; 2]]>,
    flow: &FlowField,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if flow.len() != src.len() {
        return Err(Error::InvalidInput(
            "flow_objective: flow length differs from source".into(),
        ));
    }
    let s = match optical {
        Some(o) => static_weights(o, loss_cfg.alpha)?,
        None => StaticWeights::ones(src.len()),
    };
    let mut tape = Tape::new();
    let flow_arr = Array2::from_shape_vec(
        (flow.len(), 3),
        flow.vectors.iter().flat_map(|v| v.iter().copied()).collect(),
    )
    .expect("flow shape");
    let flow_node = tape.var(flow_arr);
    let src_node = tape.constant(cloud_to_array(src));
    let tgt_node = tape.constant(cloud_to_array(tgt));
    let warped = tape.add(src_node, flow_node);
    let ch = chamfer_term(&mut tape, warped, tgt_node, tgt, &s, loss_cfg)?;
    let sm = smoothness_term(&mut tape, flow_node, src, loss_cfg.knn_k_smooth)?;
    let ch_w = tape.scale(ch, loss_cfg.beta_ch);
    let sm_w = tape.scale(sm, loss_cfg.beta_reg);
    let loss = tape.add(ch_w, sm_w);
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss)?;
    let g = grads[flow_node.index()]
        .as_ref()
        .expect("flow variable receives a gradient");
    let grad = g.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
    Ok((value, grad))
}
