//! Structured pruning of attention heads and FFN channels.
//!
//! Units are ranked with the Wanda-sp importance: every weight contributes
//! `|W_ij| * ||X_j||`, where `X_j` is the input channel feeding it, and a unit's
//! score is the sum over every weight it owns.
//!
//! * A head owns its column group in Q, K and V (inputs weighted by the
//!   attention-input norms) and its row group in the output projection. The
//!   true inputs of that row group are per-head attention outputs, which are
//!   not collected; each output-projection weight is instead weighted by the
//!   attention-input norm of the residual channel it writes to.
//! * An FFN channel owns its `w_up` column (weighted by the FFN input norms)
//!   and its `w_down` row (weighted by the channel's own mid-activation norm).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config_space::PruningConfig;
use crate::engine::{ActivationStats, Block, Model};
use crate::scalar::Scalar;

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const WO_WEIGHTING_NOTE: &str =
    "output-projection rows weighted by residual-stream attention-input norms (approximation)";

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("layer count mismatch: expected {expected} rates (model layers), got {actual}")]
    LayerCount { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("inconsistent plan: {0}")]
    InconsistentPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Head,
    FfnChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub layer: usize,
    pub kind: UnitKind,
    pub index: usize,
    pub score: f64,
}

/// Score of one FFN channel from its `w_up` column and `w_down` row.
pub fn ffn_channel_score<T: Scalar>(
    up_column: &[T],
    input_norms: &[T],
    down_row: &[T],
    mid_norm: T,
) -> f64 {
    let up: f64 = up_column
        .iter()
        .zip(input_norms)
        .map(|(w, x)| w.abs().as_f64() * x.as_f64())
        .sum();
    let m = mid_norm.as_f64();
    let down: f64 = down_row.iter().map(|w| w.abs().as_f64() * m).sum();
    up + down
}

fn head_score<T: Scalar>(block: &Block<T>, attn: &[T], head: usize, head_dim: usize) -> f64 {
    let cols = head * head_dim..(head + 1) * head_dim;
    let mut s = 0.0;
    for (i, x) in attn.iter().enumerate() {
        let x = x.as_f64();
        for c in cols.clone() {
            s += (block.wq.get(i, c).abs() + block.wk.get(i, c).abs() + block.wv.get(i, c).abs())
                .as_f64()
                * x;
        }
    }
    for r in cols {
        for (c, x) in block.wo.row(r).iter().zip(attn) {
            s += c.abs().as_f64() * x.as_f64();
        }
    }
    s
}

fn check_stats<T: Scalar>(model: &Model<T>, stats: &ActivationStats<T>) -> Result<(), PruneError> {
    if stats.layers.len() != model.blocks.len() {
        return Err(PruneError::Dimension(format!(
            "stats cover {} layers, model has {}",
            stats.layers.len(),
            model.blocks.len()
        )));
    }
    let d = model.spec.d_model;
    for (l, (s, b)) in stats.layers.iter().zip(&model.blocks).enumerate() {
        if s.attn_input_norms.len() != d
            || s.ffn_input_norms.len() != d
            || s.ffn_mid_norms.len() != b.ffn_channels()
        {
            return Err(PruneError::Dimension(format!(
                "layer {l} stats do not match live dimensions"
            )));
        }
    }
    Ok(())
}

/// Importance of every live head and FFN channel in `layer`, heads first.
pub fn wanda_sp_unit_scores<T: Scalar>(
    model: &Model<T>,
    stats: &ActivationStats<T>,
    layer: usize,
) -> Result<Vec<UnitScore>, PruneError> {
    check_stats(model, stats)?;
    let block = model
        .blocks
        .get(layer)
        .ok_or_else(|| PruneError::Dimension(format!("no layer {layer}")))?;
    let st = &stats.layers[layer];
    let hd = model.spec.head_dim;
    let mut out: Vec<UnitScore> = (0..block.heads(hd))
        .map(|h| UnitScore {
            layer,
            kind: UnitKind::Head,
            index: h,
            score: head_score(block, &st.attn_input_norms, h, hd),
        })
        .collect();
    let d = model.spec.d_model;
    for k in 0..block.ffn_channels() {
        let up: Vec<T> = (0..d).map(|i| block.w_up.get(i, k)).collect();
        out.push(UnitScore {
            layer,
            kind: UnitKind::FfnChannel,
            index: k,
            score: ffn_channel_score(&up, &st.ffn_input_norms, block.w_down.row(k), st.ffn_mid_norms[k]),
        });
    }
    Ok(out)
}

/// Units to remove for `rate` of `n_units`: nearest integer, exact halves
/// rounded down.
pub fn rate_to_counts(rate: f64, n_units: usize) -> usize {
    let x = rate.clamp(0.0, 1.0) * n_units as f64;
    let floor = x.floor();
    // rates live on a 1e-5 grid, so a fractional part this close to 0.5 is a tie
    let up = x - floor > 0.5 + 1e-9;
    ((floor as usize) + usize::from(up)).min(n_units)
}

/// Indices that survive removing the `remove` lowest-scoring units; equal
/// scores lose the lower index first. Result is ascending.
pub fn select_survivors(scores: &[f64], remove: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order.split_off(remove.min(scores.len()));
    kept.sort_unstable();
    kept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub kept_heads: Vec<usize>,
    pub kept_ffn_channels: Vec<usize>,
    pub heads_before: usize,
    pub heads_removed: usize,
    pub ffn_before: usize,
    pub ffn_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub schema_version: u32,
    pub wo_weighting: String,
    pub layers: Vec<LayerPlan>,
}

impl PrunePlan {
    /// Plan that removes nothing.
    pub fn keep_all<T: Scalar>(model: &Model<T>) -> Self {
        let layers = model
            .layer_dims()
            .iter()
            .map(|d| LayerPlan {
                kept_heads: (0..d.heads).collect(),
                kept_ffn_channels: (0..d.ffn_channels).collect(),
                heads_before: d.heads,
                heads_removed: 0,
                ffn_before: d.ffn_channels,
                ffn_removed: 0,
            })
            .collect();
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            wo_weighting: WO_WEIGHTING_NOTE.into(),
            layers,
        }
    }

    /// Block projection parameters removed by this plan.
    pub fn removed_block_params(&self, d_model: usize, head_dim: usize) -> usize {
        self.layers
            .iter()
            .map(|l| l.heads_removed * 4 * head_dim * d_model + l.ffn_removed * 2 * d_model)
            .sum()
    }
}

/// Chooses survivors per layer: heads and FFN channels are each pruned at
/// the layer's rate, lowest score first.
pub fn plan<T: Scalar>(
    model: &Model<T>,
    stats: &ActivationStats<T>,
    config: &PruningConfig,
) -> Result<PrunePlan, PruneError> {
    if config.n_layers() != model.blocks.len() {
        return Err(PruneError::LayerCount {
            expected: model.blocks.len(),
            actual: config.n_layers(),
        });
    }
    check_stats(model, stats)?;
    let mut layers = Vec::with_capacity(model.blocks.len());
    for (l, &rate) in config.rates().iter().enumerate() {
        let scores = wanda_sp_unit_scores(model, stats, l)?;
        let (heads, ffn): (Vec<&UnitScore>, Vec<&UnitScore>) = scores.iter().partition(|u| u.kind == UnitKind::Head);
        let head_scores: Vec<f64> = heads.iter().map(|u| u.score).collect();
        let ffn_scores: Vec<f64> = ffn.iter().map(|u| u.score).collect();
        let heads_removed = rate_to_counts(rate, head_scores.len());
        let ffn_removed = rate_to_counts(rate, ffn_scores.len());
        layers.push(LayerPlan {
            kept_heads: select_survivors(&head_scores, heads_removed),
            kept_ffn_channels: select_survivors(&ffn_scores, ffn_removed),
            heads_before: head_scores.len(),
            heads_removed,
            ffn_before: ffn_scores.len(),
            ffn_removed,
        });
    }
    Ok(PrunePlan {
        schema_version: PLAN_SCHEMA_VERSION,
        wo_weighting: WO_WEIGHTING_NOTE.into(),
        layers,
    })
}

fn check_indices(kept: &[usize], live: usize, removed: usize, what: &str, l: usize) -> Result<(), PruneError> {
    let increasing = kept.windows(2).all(|w| w[0] < w[1]);
    let in_range = kept.last().is_none_or(|&i| i < live);
    if !increasing || !in_range || kept.len() + removed != live {
        return Err(PruneError::InconsistentPlan(format!(
            "layer {l} {what} indices do not fit {live} live units"
        )));
    }
    Ok(())
}

/// Physically slices the model down to the plan's survivors.
pub fn apply<T: Scalar>(model: &Model<T>, plan: &PrunePlan) -> Result<Model<T>, PruneError> {
    if plan.layers.len() != model.blocks.len() {
        return Err(PruneError::InconsistentPlan(format!(
            "plan covers {} layers, model has {}",
            plan.layers.len(),
            model.blocks.len()
        )));
    }
    let hd = model.spec.head_dim;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (l, (b, lp)) in model.blocks.iter().zip(&plan.layers).enumerate() {
        check_indices(&lp.kept_heads, b.heads(hd), lp.heads_removed, "head", l)?;
        check_indices(&lp.kept_ffn_channels, b.ffn_channels(), lp.ffn_removed, "ffn", l)?;
        if lp.heads_before != b.heads(hd) || lp.ffn_before != b.ffn_channels() {
            return Err(PruneError::InconsistentPlan(format!(
                "layer {l} unit counts differ from the model"
            )));
        }
        let cols: Vec<usize> = lp
            .kept_heads
            .iter()
            .flat_map(|&h| h * hd..(h + 1) * hd)
            .collect();
        blocks.push(Block {
            attn_norm: b.attn_norm.clone(),
            wq: b.wq.select_columns(&cols),
            wk: b.wk.select_columns(&cols),
            wv: b.wv.select_columns(&cols),
            wo: b.wo.select_rows(&cols),
            ffn_norm: b.ffn_norm.clone(),
            w_up: b.w_up.select_columns(&lp.kept_ffn_channels),
            w_down: b.w_down.select_rows(&lp.kept_ffn_channels),
        });
    }
    Ok(Model {
        spec: model.spec,
        embedding: model.embedding.clone(),
        blocks,
        final_norm: model.final_norm.clone(),
    })
}

/// Plans and applies in one go.
pub fn prune<T: Scalar>(
    model: &Model<T>,
    stats: &ActivationStats<T>,
    config: &PruningConfig,
) -> Result<(Model<T>, PrunePlan), PruneError> {
    let p = plan(model, stats, config)?;
    let pruned = apply(model, &p)?;
    Ok((pruned, p))
}
