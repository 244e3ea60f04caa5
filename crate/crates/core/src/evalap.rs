//! Average precision with range buckets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{IouKind, OrientedBox};
use crate::num::Real;
use crate::postproc::Proposal;

/// Half-open range interval `[lo, hi)`; `hi = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBucket {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl RangeBucket {
    pub fn contains(&self, r: f64) -> bool {
        r >= self.lo && self.hi.map_or(true, |h| r < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("{} - {}", self.lo, h),
            None => format!("{} - inf", self.lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub iou_kind: IouKind,
    pub range_buckets: Vec<RangeBucket>,
}

impl EvalConfig {
    pub fn new(iou_threshold: f64, iou_kind: IouKind) -> Result<Self> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(Error::contract("IoU threshold must be in (0, 1]"));
        }
        Ok(Self {
            iou_threshold,
            iou_kind,
            range_buckets: default_buckets(),
        })
    }

    pub fn vehicle(kind: IouKind) -> Self {
        Self::new(0.7, kind).unwrap()
    }

    pub fn pedestrian(kind: IouKind) -> Self {
        Self::new(0.5, kind).unwrap()
    }
}

pub fn default_buckets() -> Vec<RangeBucket> {
    vec![
        RangeBucket { lo: 0.0, hi: Some(30.0) },
        RangeBucket { lo: 30.0, hi: Some(50.0) },
        RangeBucket { lo: 50.0, hi: None },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMatch<T> {
    pub det_index: usize,
    pub score: T,
    pub gt_index: Option<usize>,
}

impl<T> DetectionMatch<T> {
    pub fn is_tp(&self) -> bool {
        self.gt_index.is_some()
    }
}

/// Greedy matching by descending score (input order on ties). Each detection
/// takes the unmatched ground truth of highest IoU if that IoU reaches the
/// threshold.
pub fn match_detections<T: Real>(
    dets: &[Proposal<T>],
    gts: &[OrientedBox<T>],
    iou_threshold: f64,
    kind: IouKind,
) -> Vec<DetectionMatch<T>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let thr = T::lit(iou_threshold);
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, T)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = kind.iou(&dets[d].bbox, gt);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            let gt_index = match best {
                Some((g, iou)) if iou >= thr => {
                    taken[g] = true;
                    Some(g)
                }
                _ => None,
            };
            DetectionMatch {
                det_index: d,
                score: dets[d].score,
                gt_index,
            }
        })
        .collect()
}

/// 101-point interpolated AP over TP/FP flags sorted by descending score.
///
/// With no ground truth the AP is 1 when there are also no detections and 0
/// otherwise.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let level = i as f64 / 100.0;
        let idx = recall.partition_point(|&r| r < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAp {
    pub label: String,
    pub lo: f64,
    pub hi: Option<f64>,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Overall and per-range AP, laid out as `Overall | 0 - 30 | 30 - 50 | 50 - inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_kind: IouKind,
    pub iou_threshold: f64,
    pub overall: BucketAp,
    pub buckets: Vec<BucketAp>,
}

/// One scene's detections and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub dets: Vec<Proposal<T>>,
    pub gts: Vec<OrientedBox<T>>,
}

fn pooled_ap<T: Real>(
    frames: &[Frame<T>],
    cfg: &EvalConfig,
    bucket: Option<&RangeBucket>,
) -> BucketAp {
    let keep = |b: &OrientedBox<T>| bucket.map_or(true, |bk| bk.contains(b.center_range().to_f64_lossy()));
    let mut scored: Vec<(T, bool)> = Vec::new();
    let mut num_gt = 0;
    for f in frames {
        let dets: Vec<Proposal<T>> = f.dets.iter().copied().filter(|d| keep(&d.bbox)).collect();
        let gts: Vec<OrientedBox<T>> = f.gts.iter().copied().filter(|g| keep(g)).collect();
        num_gt += gts.len();
        for m in match_detections(&dets, &gts, cfg.iou_threshold, cfg.iou_kind) {
            scored.push((m.score, m.is_tp()));
        }
    }
    // Stable sort keeps per-frame order on equal scores.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
    let (label, lo, hi) = match bucket {
        Some(b) => (b.label(), b.lo, b.hi),
        None => ("Overall".to_string(), 0.0, None),
    };
    BucketAp {
        label,
        lo,
        hi,
        ap: average_precision(&flags, num_gt),
        num_gt,
        num_det: flags.len(),
    }
}

/// AP pooled over several frames, overall and per range bucket. Matching is
/// done independently inside each bucket after partitioning by center range.
pub fn evaluate<T: Real>(frames: &[Frame<T>], cfg: &EvalConfig) -> ApReport {
    ApReport {
        iou_kind: cfg.iou_kind,
        iou_threshold: cfg.iou_threshold,
        overall: pooled_ap(frames, cfg, None),
        buckets: cfg
            .range_buckets
            .iter()
            .map(|b| pooled_ap(frames, cfg, Some(b)))
            .collect(),
    }
}

/// Single-frame [`evaluate`].
pub fn bucketed_ap<T: Real>(dets: &[Proposal<T>], gts: &[OrientedBox<T>], cfg: &EvalConfig) -> ApReport {
    evaluate(
        &[Frame {
            dets: dets.to_vec(),
            gts: gts.to_vec(),
        }],
        cfg,
    )
}
