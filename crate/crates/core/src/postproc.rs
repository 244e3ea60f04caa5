//! Weighted and standard non-maximum suppression.

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::geom::{IouKind, OrientedBox};
use crate::num::{normalize_angle, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal<T> {
    #[serde(rename = "box")]
    pub bbox: OrientedBox<T>,
    pub score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WnmsConfig {
    /// Proposals scoring strictly below this are dropped.
    pub score_threshold: f64,
    /// Cluster membership requires IoU strictly above this.
    pub iou_threshold: f64,
    #[serde(default)]
    pub iou_kind: IouKind,
}

impl Default for WnmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            iou_threshold: 0.5,
            iou_kind: IouKind::Bev,
        }
    }
}

/// Greedy clusters of proposal indices, seed first.
///
/// Proposals below the score threshold are discarded. Survivors are visited
/// by descending score (input order on ties); each unclaimed survivor seeds a
/// cluster that takes every other unclaimed survivor overlapping it by more
/// than the IoU threshold.
pub fn nms_clusters<T: Real>(props: &[Proposal<T>], cfg: &WnmsConfig) -> Vec<Vec<usize>> {
    let thr = T::lit(cfg.score_threshold);
    let iou_thr = T::lit(cfg.iou_threshold);
    let mut order: Vec<usize> = (0..props.len())
        .filter(|&i| !(props[i].score < thr))
        .collect();
    order.sort_by(|&a, &b| {
        props[b]
            .score
            .partial_cmp(&props[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut claimed = vec![false; props.len()];
    let mut clusters = Vec::new();
    for (pos, &seed) in order.iter().enumerate() {
        if claimed[seed] {
            continue;
        }
        claimed[seed] = true;
        let mut members = vec![seed];
        for &k in &order[pos + 1..] {
            if !claimed[k] && cfg.iou_kind.iou(&props[seed].bbox, &props[k].bbox) > iou_thr {
                claimed[k] = true;
                members.push(k);
            }
        }
        clusters.push(members);
    }
    clusters
}

/// Score-weighted mean `Σ w_k v_k / Σ w_k`, evaluated as an offset from
/// `anchor` so that equal inputs reproduce the anchor exactly. Works over any
/// numeric field, including exact rationals.
pub fn weighted_mean<S: Num + Copy>(anchor: S, values: &[S], weights: &[S]) -> S {
    let mut num = S::zero();
    let mut den = S::zero();
    for (&v, &w) in values.iter().zip(weights) {
        num = num + w * (v - anchor);
        den = den + w;
    }
    anchor + num / den
}

/// Score-weighted circular mean of headings around the seed heading. Members
/// pointing against the seed are flipped by π first.
pub fn weighted_heading<T: Real>(seed_yaw: T, yaws: &[T], weights: &[T]) -> T {
    let mut s = T::zero();
    let mut c = T::zero();
    for (&y, &w) in yaws.iter().zip(weights) {
        let (mut sd, mut cd) = (y - seed_yaw).sin_cos();
        if cd < T::zero() {
            sd = -sd;
            cd = -cd;
        }
        s += w * sd;
        c += w * cd;
    }
    normalize_angle(seed_yaw + s.atan2(c))
}

fn fuse<T: Real>(props: &[Proposal<T>], members: &[usize]) -> Proposal<T> {
    let seed = props[members[0]];
    if members.len() == 1 {
        return seed;
    }
    let weights: Vec<T> = members.iter().map(|&k| props[k].score).collect();
    let field = |f: fn(&OrientedBox<T>) -> T| {
        let vals: Vec<T> = members.iter().map(|&k| f(&props[k].bbox)).collect();
        weighted_mean(f(&seed.bbox), &vals, &weights)
    };
    let yaws: Vec<T> = members.iter().map(|&k| props[k].bbox.yaw).collect();
    Proposal {
        bbox: OrientedBox {
            cx: field(|b| b.cx),
            cy: field(|b| b.cy),
            cz: field(|b| b.cz),
            length: field(|b| b.length),
            width: field(|b| b.width),
            height: field(|b| b.height),
            yaw: weighted_heading(seed.bbox.yaw, &yaws, &weights),
        },
        score: seed.score,
    }
}

/// Weighted NMS: each cluster is replaced by the score-weighted average of its
/// members, carrying the seed's score.
pub fn weighted_nms<T: Real>(props: &[Proposal<T>], cfg: &WnmsConfig) -> Vec<Proposal<T>> {
    nms_clusters(props, cfg)
        .iter()
        .map(|m| fuse(props, m))
        .collect()
}

/// Classic greedy NMS: each cluster is replaced by its seed.
pub fn standard_nms<T: Real>(props: &[Proposal<T>], cfg: &WnmsConfig) -> Vec<Proposal<T>> {
    nms_clusters(props, cfg)
        .iter()
        .map(|m| props[m[0]])
        .collect()
}
