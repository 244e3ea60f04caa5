//! Finite-difference checks of every differentiable piece used in training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assign::PixelLabel;
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::grad::{grad_check_many, Tape, Tensor, Var};
use crate::metakernel::{Aggregation, BoundMetaKernel, MetaInput, MetaGeometry, MetaKernelConfig, MetaKernelLayer, SamplingGrid};
use crate::rimg::{BeamTable, CartesianPoint, RangeImage};
use crate::targets::{cls_weights, reg_weights, target_grid, VflConfig};

/// Largest relative error a case may show and still pass.
pub const GRAD_TOLERANCE: f64 = 1e-6;

/// Central-difference step for the loss cases.
pub const GRAD_STEP: f64 = 3e-5;

/// Central-difference step for the Meta-Kernel cases. Away from ReLU
/// switches and max-pool ties the layer is linear along every single
/// coordinate, so a wide step adds no truncation error and keeps roundoff small.
pub const MK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCase {
    fn new(name: String, max_rel_error: f64) -> Self {
        Self {
            passed: max_rel_error < GRAD_TOLERANCE,
            name,
            max_rel_error,
        }
    }
}

pub const SUITE_META: [MetaInput; 3] = [MetaInput::RelXyz, MetaInput::RelRange, MetaInput::RelXyzRange];
pub const SUITE_AGG: [Aggregation; 3] = [Aggregation::ConcatFc, Aggregation::MaxPool, Aggregation::Sum];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Random `h × w` image with a few holes: a surface at a common base range
/// with per-pixel jitter.
pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RangeImage<f64> {
    let beams = BeamTable::uniform(0.05, -0.3, h).expect("beam table");
    let mut img = RangeImage::empty(beams, w).expect("image");
    let base = rng.gen_range(5.0..30.0);
    for r in 0..h {
        for c in 0..w {
            if rng.gen_bool(0.15) {
                continue;
            }
            img.set_return(r, c, base + rng.gen_range(-1.5..1.5), rng.gen_range(0.0..1.0), 0.0);
        }
    }
    img
}

/// Whether one finite-difference step can carry a hidden unit across its
/// ReLU switch or reorder a max-pool winner; such instances are redrawn so
/// the differences never straddle a kink. Bounds are per value with a
/// safety factor.
fn near_kink(layer: &MetaKernelLayer<f64>, geo: &MetaGeometry<f64>, features: &Tensor<f64>) -> Result<bool> {
    const SAFETY: f64 = 1.5;
    let step = SAFETY * MK_STEP;
    let mut tape = Tape::new();
    let p = layer.bind(&mut tape);
    let meta = tape.constant(geo.meta.clone());
    let pre = tape.affine(meta, p.mlp_w1, Some(p.mlp_b1))?;
    let (dim, hid) = (geo.meta.shape()[1], layer.config.hidden);
    let meta_max: Vec<f64> = geo
        .meta
        .data()
        .chunks(dim)
        .map(|row| row.iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .collect();
    for (k, a) in tape.value(pre).data().iter().enumerate() {
        if a.abs() < step * (1.0 + meta_max[k / hid]) {
            return Ok(true);
        }
    }
    if layer.config.agg != Aggregation::MaxPool {
        return Ok(false);
    }
    let hidden = tape.relu(pre);
    let weights = tape.affine(hidden, p.mlp_w2, Some(p.mlp_b2))?;
    let f = tape.constant(features.clone());
    let sampled = tape.gather(f, geo.rows.clone())?;
    let prod = tape.mul(weights, sampled)?;
    let (vals, wv, sv) = (tape.value(prod).data(), tape.value(weights).data(), tape.value(sampled).data());
    let hv = tape.value(hidden).data();
    let w2_max = layer.mlp_w2.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (g, c) = (geo.grid_len, layer.config.c_in);
    for px in 0..geo.height * geo.width {
        for ch in 0..c {
            let mut col: Vec<(f64, f64)> = (0..g)
                .filter(|k| geo.rows[px * g + k].is_some())
                .map(|k| {
                    let r = px * g + k;
                    let h_sum: f64 = hv[r * hid..(r + 1) * hid].iter().sum();
                    let dw = 1.0 + h_sum + w2_max * hid as f64 * (1.0 + meta_max[r]);
                    let reach = wv[r * c + ch].abs() + sv[r * c + ch].abs() * dw;
                    (vals[r * c + ch], reach)
                })
                .collect();
            if col.len() < g {
                col.push((0.0, 0.0));
            }
            col.sort_by(|a, b| b.0.total_cmp(&a.0));
            if col.len() > 1 && col[0].0 - col[1].0 < step * (col[0].1 + col[1].1) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Meta-Kernel layer on an 8×8 image with four input channels, checked with
/// respect to the features and every parameter.
pub fn check_metakernel(meta: MetaInput, agg: Aggregation, seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (8, 8, 4);
    let c_out = if agg == Aggregation::ConcatFc { 3 } else { c };
    let mut cfg = MetaKernelConfig::new(c, c_out, meta, agg);
    cfg.hidden = 6;
    let mut attempts = 0;
    let (layer, geo, features) = loop {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::contract("no kink-free metakernel instance found"));
        }
        let img = random_image(&mut rng, h, w);
        let mut layer = MetaKernelLayer::random(cfg, SamplingGrid::default(), &mut rng)?;
        layer.mlp_b1 = uniform(&mut rng, layer.mlp_b1.shape(), -0.5, 0.5);
        layer.mlp_b2 = uniform(&mut rng, layer.mlp_b2.shape(), -0.5, 0.5);
        if let Some(b) = layer.agg_b.as_mut() {
            *b = uniform(&mut rng, b.shape(), -0.5, 0.5);
        }
        let geo = layer.geometry(&img);
        let features = uniform(&mut rng, &[h * w, c], -1.0, 1.0);
        if !near_kink(&layer, &geo, &features)? {
            break (layer, geo, features);
        }
    };
    let probe = uniform(&mut rng, &[h * w, c_out], -1.0, 1.0);

    let mut inputs = vec![features];
    inputs.extend(layer.named_params().into_iter().map(|(_, t)| t.clone()));
    let err = grad_check_many(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let concat = agg == Aggregation::ConcatFc;
            let bound = BoundMetaKernel {
                mlp_w1: v[1],
                mlp_b1: v[2],
                mlp_w2: v[3],
                mlp_b2: v[4],
                agg_w: concat.then(|| v[5]),
                agg_b: concat.then(|| v[6]),
            };
            let out = layer.forward_on(tape, &bound, v[0], &geo)?;
            let k = tape.constant(probe.clone());
            let p = tape.mul(out, k)?;
            Ok(tape.sum(p))
        },
        &inputs,
        MK_STEP,
    )?;
    Ok(GradCase::new(format!("metakernel/{meta:?}/{agg:?}"), err))
}

/// Targets with a `neg` share of zeros, the rest in `[0.05, 1)`.
fn iou_targets(rng: &mut ChaCha8Rng, n: usize, neg: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen_bool(neg) { 0.0 } else { rng.gen_range(0.05..1.0) })
        .collect()
}

/// Score in `[0.1, 0.9]` at least 0.05 from a positive target, where the
/// loss is stationary.
fn score_away_from(rng: &mut ChaCha8Rng, q: f64) -> f64 {
    loop {
        let p = rng.gen_range(0.1..0.9);
        if q == 0.0 || (p - q).abs() > 0.05 {
            return p;
        }
    }
}

/// Varifocal loss with respect to the scores, mixing positives and negatives.
pub fn check_vfl(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 32;
    let q = iou_targets(&mut rng, n, 0.5);
    let p: Vec<f64> = q.iter().map(|&t| score_away_from(&mut rng, t)).collect();
    let p = Tensor::new(vec![n], p)?;
    let weight: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    let cfg = VflConfig::default();
    let err = grad_check_many(
        |tape, v| tape.varifocal(v[0], q.clone(), weight.clone(), cfg),
        &[p],
        GRAD_STEP,
    )?;
    Ok(GradCase::new("vfl".into(), err))
}

/// Classification loss through the sigmoid, normalized over valid pixels.
pub fn check_cls_loss(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 48;
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    let q = iou_targets(&mut rng, n, 0.7);
    let logits: Vec<f64> = q
        .iter()
        .map(|&t| {
            let p = score_away_from(&mut rng, t);
            (p / (1.0 - p)).ln()
        })
        .collect();
    let logits = Tensor::new(vec![n, 1], logits)?;
    let weight: Vec<f64> = cls_weights(&mask);
    let cfg = VflConfig::default();
    let err = grad_check_many(
        |tape, v| {
            let p = tape.sigmoid(v[0]);
            tape.varifocal(p, q.clone(), weight.clone(), cfg)
        },
        &[logits],
        GRAD_STEP,
    )?;
    Ok(GradCase::new("cls_loss".into(), err))
}

/// Regression loss over encoded targets with per-box weighting. Residuals
/// keep clear of the SmoothL1 switch at `|d| = 1`.
pub fn check_reg_loss(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let boxes: Vec<OrientedBox<f64>> = (0..3)
        .map(|_| {
            OrientedBox::new(
                [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(1.0..5.0), rng.gen_range(1.0..3.0), rng.gen_range(1.0..2.0)],
                rng.gen_range(-3.0..3.0),
            )
        })
        .collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let g = if rng.gen_bool(0.6) { Some(rng.gen_range(0..boxes.len())) } else { None };
        labels.push(PixelLabel {
            is_foreground: g.is_some(),
            gt_index: g,
            layer: 0,
        });
        let base = g.map(|i| (boxes[i].cx, boxes[i].cy)).unwrap_or((10.0, 10.0));
        points.push(CartesianPoint::new(
            base.0 + rng.gen_range(-1.0..1.0),
            base.1 + rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
    }
    let targets: Vec<f64> = target_grid(&labels, &boxes, &points)?
        .iter()
        .flat_map(|t| t.to_array())
        .collect();
    let weights: Vec<f64> = reg_weights(&labels, boxes.len());
    let pred: Vec<f64> = targets
        .iter()
        .map(|&t| {
            let mag = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.9) } else { rng.gen_range(1.1..2.5) };
            if rng.gen_bool(0.5) { t + mag } else { t - mag }
        })
        .collect();
    let pred = Tensor::new(vec![n, 8], pred)?;
    let err = grad_check_many(
        |tape, v| tape.smooth_l1(v[0], targets.clone(), weights.clone()),
        &[pred],
        GRAD_STEP,
    )?;
    Ok(GradCase::new("reg_loss".into(), err))
}

/// Every case: nine Meta-Kernel configurations and the three losses.
pub fn run_grad_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut s = seed;
    for meta in SUITE_META {
        for agg in SUITE_AGG {
            out.push(check_metakernel(meta, agg, s)?);
            s += 1;
        }
    }
    out.push(check_vfl(s)?);
    out.push(check_cls_loss(s + 1)?);
    out.push(check_reg_loss(s + 2)?);
    Ok(out)
}
