//! Cross-entropy, symmetric cross-entropy and the joint feature/label cost.
//!
//! All losses use the negative-sum convention (`CE >= 0`) and clip the
//! argument of every logarithm at `clip_floor`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::ot::{sq_dist, CostMatrix, MetricTag};
use crate::{Error, Result};

pub const DEFAULT_CLIP_FLOOR: f64 = 1e-7;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Feature-distance weight in the ground cost.
    pub eta1: f64,
    /// Label-loss weight in the ground cost.
    pub eta2: f64,
    /// Forward CE coefficient inside SCE.
    pub eta4: f64,
    /// Reverse CE coefficient inside SCE.
    pub eta5: f64,
    pub clip_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eta1: 0.1, eta2: 0.1, eta4: 0.01, eta5: 1.0, clip_floor: DEFAULT_CLIP_FLOOR }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta4", self.eta4), ("eta5", self.eta5)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.clip_floor > 0.0 && self.clip_floor < 1.0) {
            return Err(Error::InvalidArgument(format!("clip_floor must lie in (0, 1), got {}", self.clip_floor)));
        }
        Ok(())
    }
}

/// Label loss used inside the ground cost and the transfer term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLoss {
    /// `CE(y, p)`.
    Ce,
    /// `eta4 CE(y, p) + eta5 CE(p, y)`.
    Sce,
}

impl LabelLoss {
    pub fn name(self) -> &'static str {
        match self {
            LabelLoss::Ce => "ce",
            LabelLoss::Sce => "sce",
        }
    }

    pub fn value(self, y: ArrayView1<f64>, p: ArrayView1<f64>, w: &LossWeights) -> f64 {
        match self {
            LabelLoss::Ce => ce_unchecked(y, p, w.clip_floor),
            LabelLoss::Sce => sce_unchecked(y, p, w),
        }
    }

    /// Partial derivatives with respect to the prediction `p`, accumulated
    /// into `out` after scaling by `scale`.
    pub fn grad_pred(self, y: ArrayView1<f64>, p: ArrayView1<f64>, w: &LossWeights, scale: f64, out: &mut [f64]) {
        let floor = w.clip_floor;
        let forward = match self {
            LabelLoss::Ce => 1.0,
            LabelLoss::Sce => w.eta4,
        };
        for k in 0..p.len() {
            let mut d = 0.0;
            // d/dp_k of -y_k log(max(p_k, floor)); zero on the clipped branch.
            if p[k] > floor {
                d -= forward * y[k] / p[k];
            }
            if self == LabelLoss::Sce {
                d -= w.eta5 * y[k].max(floor).ln();
            }
            out[k] += scale * d;
        }
    }
}

impl std::str::FromStr for LabelLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LabelLoss::Ce),
            "sce" | "rce" => Ok(LabelLoss::Sce),
            other => Err(Error::InvalidArgument(format!("unknown label loss {other:?}"))),
        }
    }
}

fn check_pair(q: ArrayView1<f64>, p: ArrayView1<f64>) -> Result<()> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch(format!("vectors of length {} and {}", q.len(), p.len())));
    }
    for (name, v) in [("q", q), ("q_pred", p)] {
        if v.iter().any(|x| !(*x >= 0.0 && *x <= 1.0)) {
            return Err(Error::InvalidArgument(format!("{name} has entries outside [0, 1]")));
        }
        if (v.sum() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("{name} sums to {}", v.sum())));
        }
    }
    Ok(())
}

fn ce_unchecked(q: ArrayView1<f64>, p: ArrayView1<f64>, floor: f64) -> f64 {
    -q.iter().zip(p.iter()).map(|(&qi, &pi)| if qi == 0.0 { 0.0 } else { qi * pi.max(floor).ln() }).sum::<f64>()
}

fn sce_unchecked(q: ArrayView1<f64>, p: ArrayView1<f64>, w: &LossWeights) -> f64 {
    w.eta4 * ce_unchecked(q, p, w.clip_floor) + w.eta5 * ce_unchecked(p, q, w.clip_floor)
}

/// `-sum_i q_i log(max(q_pred_i, clip_floor))`.
pub fn cross_entropy(q: ArrayView1<f64>, q_pred: ArrayView1<f64>, clip_floor: f64) -> Result<f64> {
    check_pair(q, q_pred)?;
    Ok(ce_unchecked(q, q_pred, clip_floor))
}

/// `eta4 CE(q, q_pred) + eta5 CE(q_pred, q)`.
pub fn symmetric_cross_entropy(q: ArrayView1<f64>, q_pred: ArrayView1<f64>, w: &LossWeights) -> Result<f64> {
    check_pair(q, q_pred)?;
    Ok(sce_unchecked(q, q_pred, w))
}

/// Ground cost `eta1 ||e_i - e'_j||^2 + eta2 L(y_i, p_j)`.
pub fn build_joint_cost(
    src_embed: ArrayView2<f64>,
    src_onehot: ArrayView2<f64>,
    tgt_embed: ArrayView2<f64>,
    tgt_pred: ArrayView2<f64>,
    w: &LossWeights,
    label_loss: LabelLoss,
) -> Result<CostMatrix> {
    w.validate()?;
    if src_embed.ncols() != tgt_embed.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dimensions {} and {}",
            src_embed.ncols(),
            tgt_embed.ncols()
        )));
    }
    if src_embed.nrows() != src_onehot.nrows() || tgt_embed.nrows() != tgt_pred.nrows() {
        return Err(Error::DimensionMismatch("embedding and label row counts differ".into()));
    }
    if src_onehot.ncols() != tgt_pred.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "label dimensions {} and {}",
            src_onehot.ncols(),
            tgt_pred.ncols()
        )));
    }
    if src_embed.iter().chain(tgt_embed.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    for row in src_onehot.rows().into_iter().chain(tgt_pred.rows()) {
        if row.iter().any(|x| !(*x >= 0.0 && *x <= 1.0)) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument("label rows must be probability vectors".into()));
        }
    }
    let values = Array2::from_shape_fn((src_embed.nrows(), tgt_embed.nrows()), |(i, j)| {
        let feature = if w.eta1 == 0.0 { 0.0 } else { w.eta1 * sq_dist(src_embed.row(i), tgt_embed.row(j)) };
        let label = if w.eta2 == 0.0 { 0.0 } else { w.eta2 * label_loss.value(src_onehot.row(i), tgt_pred.row(j), w) };
        feature + label
    });
    CostMatrix::new(values, MetricTag::Joint { eta1: w.eta1, eta2: w.eta2, label_loss: label_loss.name().into() })
}
