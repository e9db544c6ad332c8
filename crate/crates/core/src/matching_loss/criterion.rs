use serde::{Deserialize, Serialize};

use super::{hungarian, Assignment, MatchError};
use crate::decoder::StageOutput;
use crate::geometry::{giou, BoxCXCYWH};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Loss term weights and focal-loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Ground truth of one image: class indices and normalized center/size boxes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Target {
    pub classes: Vec<usize>,
    pub boxes: Vec<BoxCXCYWH<f64>>,
}

impl Target {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Classification matching cost for probability `p` of the target class:
/// `α(1-p)^γ·(-log p) - (1-α)p^γ·(-log(1-p))`.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    const EPS: f64 = 1e-8;
    let pos = alpha * (1.0 - p).powf(gamma) * -(p + EPS).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + EPS).ln();
    pos - neg
}

/// `[N, M]` matching cost from logits `[N, K]` and boxes `[N, 4]`.
pub fn cost_matrix(logits: &Tensor<f64>, boxes: &Tensor<f64>, target: &Target, w: &LossWeights) -> Tensor<f64> {
    let n = logits.shape()[0];
    let m = target.len();
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let b = boxes.row(i);
        let pred = BoxCXCYWH::new(b[0], b[1], b[2], b[3]);
        for (cls, gt) in target.classes.iter().zip(&target.boxes) {
            let p = 1.0 / (1.0 + (-logits.at(&[i, *cls])).exp());
            let l1: f64 = pred.to_array().iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum();
            let g = giou(pred.to_xyxy(), gt.to_xyxy());
            data.push(
                w.lambda_cls * focal_cost(p, w.focal_alpha, w.focal_gamma) + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g),
            );
        }
    }
    Tensor::new(&[n, m], data).expect("cost extent")
}

/// Summed sigmoid focal loss of `logits` against 0/1 `targets`.
pub fn sigmoid_focal_loss<'g, T: Scalar>(logits: Var<'g, T>, targets: &Tensor<T>, alpha: f64, gamma: f64) -> Var<'g, T> {
    let g = logits.graph();
    let t = g.constant(targets.clone());
    let p = logits.sigmoid();
    // Stable BCE with logits: softplus(x) - t·x.
    let bce = logits.softplus() - t * logits;
    let p_t = p * t + (-p).offset(1.0) * (-t).offset(1.0);
    let one_minus = (-p_t).offset(1.0);
    let modulator = if gamma == 2.0 {
        one_minus.square()
    } else if gamma == 0.0 {
        g.constant(Tensor::ones(&targets.shape().to_vec()))
    } else {
        one_minus.clamp(1e-12, 1.0).log().scale(gamma).exp()
    };
    let alpha_t = targets.map(|v| T::lit(alpha) * v + T::lit(1.0 - alpha) * (T::one() - v));
    (g.constant(alpha_t) * modulator * bce).sum()
}

/// Loss components of one stage (already divided by the GT count).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// `λ_cls·cls + λ_L1·l1 + λ_giou·giou`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stages: Vec<StageLoss>,
    pub total: f64,
}

impl LossBreakdown {
    /// Element-wise sum, used to accumulate over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        if self.stages.is_empty() {
            self.stages = vec![StageLoss::default(); other.stages.len()];
        }
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.cls += b.cls;
            a.l1 += b.l1;
            a.giou += b.giou;
            a.total += b.total;
        }
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            stages: self
                .stages
                .iter()
                .map(|l| StageLoss {
                    cls: l.cls * s,
                    l1: l.l1 * s,
                    giou: l.giou * s,
                    total: l.total * s,
                })
                .collect(),
            total: self.total * s,
        }
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={}", self.total)?;
        for (i, s) in self.stages.iter().enumerate() {
            write!(f, " stage{i}(cls={}, l1={}, giou={})", s.cls, s.l1, s.giou)?;
        }
        Ok(())
    }
}

/// Deep-supervised set loss: each stage is matched independently, the focal
/// loss covers all `N x K` outputs (unmatched predictions target zeros) and
/// the box losses cover matched pairs; everything is divided by `max(M, 1)`.
///
/// Returns the differentiable total, the breakdown and each stage's assignment.
pub fn set_criterion<'g, T: Scalar>(
    outputs: &[StageOutput<'g, T>],
    target: &Target,
    w: &LossWeights,
) -> Result<(Var<'g, T>, LossBreakdown, Vec<Assignment>), MatchError> {
    assert!(!outputs.is_empty(), "set criterion needs at least one stage");
    let g: &'g Graph<T> = outputs[0].logits.graph();
    let norm = 1.0 / target.len().max(1) as f64;
    let mut total: Option<Var<'g, T>> = None;
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(outputs.len());
    for out in outputs {
        let logits_v = out.logits.value().cast::<f64>();
        let boxes_v = out.boxes.value().cast::<f64>();
        let (n, k) = (logits_v.shape()[0], logits_v.shape()[1]);
        let assignment = hungarian(&cost_matrix(&logits_v, &boxes_v, target, w))?;
        let mut onehot = Tensor::<T>::zeros(&[n, k]);
        for &(p, gt) in &assignment.pairs {
            onehot.set(&[p, target.classes[gt]], T::one());
        }
        let cls = sigmoid_focal_loss(out.logits, &onehot, w.focal_alpha, w.focal_gamma).scale(norm);
        let mut stage = cls.scale(w.lambda_cls);
        let (mut l1_val, mut giou_val) = (0.0, 0.0);
        if !assignment.pairs.is_empty() {
            let preds: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
            let gt_data: Vec<T> = assignment
                .pairs
                .iter()
                .flat_map(|&(_, gt)| target.boxes[gt].to_array().map(T::lit))
                .collect();
            let gt = g.constant(Tensor::new(&[preds.len(), 4], gt_data).expect("gt extent"));
            let matched = out.boxes.index_select(&preds);
            let l1 = (matched - gt).abs().sum().scale(norm);
            let giou_loss = crate::geometry::giou_var(matched, gt).scale(-1.0).offset(1.0).sum().scale(norm);
            l1_val = l1.item().as_f64();
            giou_val = giou_loss.item().as_f64();
            stage = stage + l1.scale(w.lambda_l1) + giou_loss.scale(w.lambda_giou);
        }
        let stage_loss = StageLoss {
            cls: cls.item().as_f64(),
            l1: l1_val,
            giou: giou_val,
            total: stage.item().as_f64(),
        };
        breakdown.total += stage_loss.total;
        breakdown.stages.push(stage_loss);
        assignments.push(assignment);
        total = Some(match total {
            Some(t) => t + stage,
            None => stage,
        });
    }
    Ok((total.expect("non-empty"), breakdown, assignments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_cost_orders_confidence() {
        let w = LossWeights::default();
        assert!(focal_cost(0.99, w.focal_alpha, w.focal_gamma) < focal_cost(0.5, w.focal_alpha, w.focal_gamma));
        assert!(focal_cost(0.5, w.focal_alpha, w.focal_gamma) < focal_cost(0.01, w.focal_alpha, w.focal_gamma));
    }

    #[test]
    fn focal_loss_nonnegative_and_matches_scalar_form() {
        let g = Graph::<f64>::new();
        let logits = Tensor::from_f64(&[2, 2], &[2.0, -1.0, 0.3, -4.0]).unwrap();
        let t = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let got = sigmoid_focal_loss(g.constant(logits.clone()), &t, 0.25, 2.0).item();
        let want: f64 = logits
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if y == 1.0 {
                    -0.25 * (1.0 - p).powi(2) * p.ln()
                } else {
                    -0.75 * p.powi(2) * (1.0 - p).ln()
                }
            })
            .sum();
        assert!((got - want).abs() < 1e-12);
        assert!(got >= 0.0);
        let general = sigmoid_focal_loss(g.constant(logits), &t, 0.25, 2.0 + 1e-12).item();
        assert!((general - want).abs() < 1e-9);
    }
}
