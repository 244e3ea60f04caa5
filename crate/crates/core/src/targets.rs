//! Azimuth-local box targets and the detection losses.
//!
//! Each foreground point regresses its owning box in a frame whose x axis
//! points along the point's own azimuth, which makes the targets of an
//! object independent of where around the sensor it sits.

use serde::{Deserialize, Serialize};

use crate::assign::PixelLabel;
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::num::{normalize_angle, Real};
use crate::rimg::CartesianPoint;

/// Regression target or prediction for one point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetVector<T> {
    pub ox: T,
    pub oy: T,
    pub oz: T,
    pub log_l: T,
    pub log_w: T,
    pub log_h: T,
    pub cos_phi: T,
    pub sin_phi: T,
}

impl<T: Real> TargetVector<T> {
    pub const LEN: usize = 8;

    pub fn to_array(&self) -> [T; 8] {
        [
            self.ox,
            self.oy,
            self.oz,
            self.log_l,
            self.log_w,
            self.log_h,
            self.cos_phi,
            self.sin_phi,
        ]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self {
            ox: v[0],
            oy: v[1],
            oz: v[2],
            log_l: v[3],
            log_w: v[4],
            log_h: v[5],
            cos_phi: v[6],
            sin_phi: v[7],
        }
    }
}

fn azimuth_of<T: Real>(p: &CartesianPoint<T>) -> Result<T> {
    if p.x == T::zero() && p.y == T::zero() {
        return Err(Error::DegenerateAzimuth);
    }
    Ok(p.y.atan2(p.x))
}

/// Expresses `b` relative to `point` in the point's azimuth-local frame.
pub fn encode<T: Real>(point: &CartesianPoint<T>, b: &OrientedBox<T>) -> Result<TargetVector<T>> {
    let alpha = azimuth_of(point)?;
    let (s, c) = alpha.sin_cos();
    let (dx, dy, dz) = (b.cx - point.x, b.cy - point.y, b.cz - point.z);
    let phi = b.yaw - alpha;
    let (sin_phi, cos_phi) = phi.sin_cos();
    Ok(TargetVector {
        ox: c * dx + s * dy,
        oy: -s * dx + c * dy,
        oz: dz,
        log_l: b.length.ln(),
        log_w: b.width.ln(),
        log_h: b.height.ln(),
        cos_phi,
        sin_phi,
    })
}

/// Inverse of [`encode`]. The heading is recovered with `atan2`, so an
/// unnormalized `(cos_phi, sin_phi)` pair is accepted.
pub fn decode<T: Real>(point: &CartesianPoint<T>, t: &TargetVector<T>) -> Result<OrientedBox<T>> {
    let alpha = azimuth_of(point)?;
    let (s, c) = alpha.sin_cos();
    Ok(OrientedBox {
        cx: point.x + c * t.ox - s * t.oy,
        cy: point.y + s * t.ox + c * t.oy,
        cz: point.z + t.oz,
        length: t.log_l.exp(),
        width: t.log_w.exp(),
        height: t.log_h.exp(),
        yaw: normalize_angle(t.sin_phi.atan2(t.cos_phi) + alpha),
    })
}

/// Varifocal loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VflConfig<T> {
    pub alpha: T,
    pub gamma: T,
}

impl<T: Real> Default for VflConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.75),
            gamma: T::lit(2.0),
        }
    }
}

impl<T: Real> VflConfig<T> {
    pub fn new(alpha: T, gamma: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha <= T::one()) || !(gamma >= T::zero()) {
            return Err(Error::contract("varifocal alpha must be in (0, 1], gamma >= 0"));
        }
        Ok(Self { alpha, gamma })
    }
}

const P_CLAMP: f64 = 1e-7;

fn clamp_p<T: Real>(p: T) -> T {
    p.max(T::lit(P_CLAMP)).min(T::one() - T::lit(P_CLAMP))
}

/// Varifocal loss of one score `p` against IoU target `q`.
pub fn varifocal<T: Real>(p: T, q: T, cfg: &VflConfig<T>) -> T {
    let p = clamp_p(p);
    if q > T::zero() {
        -q * (q * p.ln() + (T::one() - q) * (T::one() - p).ln())
    } else {
        -cfg.alpha * p.powf(cfg.gamma) * (T::one() - p).ln()
    }
}

/// `d varifocal / dp`; zero where the clamp is active.
pub fn varifocal_dp<T: Real>(p: T, q: T, cfg: &VflConfig<T>) -> T {
    let lo = T::lit(P_CLAMP);
    if p < lo || p > T::one() - lo {
        return T::zero();
    }
    let one = T::one();
    if q > T::zero() {
        -q * (q / p - (one - q) / (one - p))
    } else {
        let dpow = if cfg.gamma == T::zero() {
            T::zero()
        } else {
            cfg.gamma * p.powf(cfg.gamma - one)
        };
        -cfg.alpha * (dpow * (one - p).ln() - p.powf(cfg.gamma) / (one - p))
    }
}

/// Quadratic below `|d| = 1`, linear above.
pub fn smooth_l1<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::lit(0.5) * d * d
    } else {
        a - T::lit(0.5)
    }
}

pub fn smooth_l1_grad<T: Real>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

/// Per-pixel weights of the classification loss: `1/M` on valid pixels, `M` = valid count.
pub fn cls_weights<T: Real>(valid_mask: &[bool]) -> Vec<T> {
    let m = valid_mask.iter().filter(|v| **v).count();
    if m == 0 {
        return vec![T::zero(); valid_mask.len()];
    }
    let w = T::one() / T::lit(m as f64);
    valid_mask
        .iter()
        .map(|&v| if v { w } else { T::zero() })
        .collect()
}

/// Mean varifocal loss over valid pixels; zero when no pixel is valid.
pub fn cls_loss<T: Real>(
    pred_scores: &[T],
    iou_targets: &[T],
    valid_mask: &[bool],
    cfg: &VflConfig<T>,
) -> Result<T> {
    if pred_scores.len() != iou_targets.len() || pred_scores.len() != valid_mask.len() {
        return Err(Error::shape(
            "cls_loss",
            &[pred_scores.len()],
            &[iou_targets.len(), valid_mask.len()],
        ));
    }
    let w: Vec<T> = cls_weights(valid_mask);
    let mut total = T::zero();
    for k in 0..pred_scores.len() {
        if w[k] != T::zero() {
            total += w[k] * varifocal(pred_scores[k], iou_targets[k], cfg);
        }
    }
    Ok(total)
}

/// Per-pixel weights of the regression loss: `1/(N·n_i)` for a foreground
/// pixel owned by box `i` holding `n_i` foreground pixels; `N` counts the
/// boxes that own at least one pixel.
pub fn reg_weights<T: Real>(labels: &[PixelLabel], num_boxes: usize) -> Vec<T> {
    let mut counts = vec![0usize; num_boxes];
    for l in labels {
        if let Some(g) = l.gt_index {
            counts[g] += 1;
        }
    }
    let n_boxes = counts.iter().filter(|&&c| c > 0).count();
    if n_boxes == 0 {
        return vec![T::zero(); labels.len()];
    }
    let n = T::lit(n_boxes as f64);
    labels
        .iter()
        .map(|l| match l.gt_index {
            Some(g) => T::one() / (n * T::lit(counts[g] as f64)),
            None => T::zero(),
        })
        .collect()
}

/// Encoded ground-truth target per pixel (zero for background).
pub fn target_grid<T: Real>(
    labels: &[PixelLabel],
    gts: &[OrientedBox<T>],
    points: &[CartesianPoint<T>],
) -> Result<Vec<TargetVector<T>>> {
    if labels.len() != points.len() {
        return Err(Error::shape("target_grid", &[labels.len()], &[points.len()]));
    }
    labels
        .iter()
        .zip(points)
        .map(|(l, p)| match l.gt_index {
            Some(g) => {
                let b = gts
                    .get(g)
                    .ok_or_else(|| Error::contract(format!("label refers to missing box {g}")))?;
                encode(p, b)
            }
            None => Ok(TargetVector::default()),
        })
        .collect()
}

/// Regression loss: per foreground pixel, the SmoothL1 sum over the eight
/// target components weighted by [`reg_weights`].
pub fn reg_loss<T: Real>(
    preds: &[TargetVector<T>],
    labels: &[PixelLabel],
    gts: &[OrientedBox<T>],
    points: &[CartesianPoint<T>],
) -> Result<T> {
    if preds.len() != labels.len() {
        return Err(Error::shape("reg_loss", &[preds.len()], &[labels.len()]));
    }
    let targets = target_grid(labels, gts, points)?;
    let weights: Vec<T> = reg_weights(labels, gts.len());
    let mut total = T::zero();
    for ((p, t), &w) in preds.iter().zip(&targets).zip(&weights) {
        if w == T::zero() {
            continue;
        }
        let mut row = T::zero();
        for (a, b) in p.to_array().iter().zip(t.to_array().iter()) {
            row += smooth_l1(*a - *b);
        }
        total += w * row;
    }
    Ok(total)
}
