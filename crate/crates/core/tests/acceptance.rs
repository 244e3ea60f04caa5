//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. An optional argument filters criteria by name.

use std::f64::consts::{FRAC_PI_4, PI};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rangeview::assign::{assign_layer, PixelLabel, RcpConfig};
use rangeview::augment::{copy_paste, flip, rotate, DonorPixel, FlipAxis, PasteCandidate};
use rangeview::evalap::average_precision;
use rangeview::geom::{iou_3d, iou_bev, OrientedBox};
use rangeview::grad::Tensor;
use rangeview::gradsuite::{run_grad_suite, GRAD_TOLERANCE};
use rangeview::metakernel::{Aggregation, MetaInput, MetaKernelConfig, MetaKernelLayer, SamplingGrid};
use rangeview::pipeline::{run_experiment, PipelineConfig};
use rangeview::postproc::{weighted_mean, weighted_nms, Proposal, WnmsConfig};
use rangeview::rimg::{decode, project, BeamTable, CartesianPoint, Channel, LidarPoint, RangeImage};
use rangeview::synth::{default_beam_table, random_scene, raycast, SceneProfile};
use rangeview::targets::{self, reg_loss, varifocal, TargetVector, VflConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(t0: Instant, limit: Duration) -> Result<(), String> {
    let el = t0.elapsed();
    ensure(el < limit, || format!("took {:.2} s, limit {:.0} s", el.as_secs_f64(), limit.as_secs_f64()))
}

// ---------------------------------------------------------------- geometry oracles

fn eq1(range: f64, azimuth: f64, inclination: f64) -> [f64; 3] {
    [
        range * inclination.cos() * azimuth.cos(),
        range * inclination.cos() * azimuth.sin(),
        range * inclination.sin(),
    ]
}

fn column_center(col: usize, width: usize) -> f64 {
    -PI + (col as f64 + 0.5) * 2.0 * PI / width as f64
}

/// Every non-empty pixel reproduces its xyz from range, azimuth and
/// inclination; empty pixels are all zero; angle channels follow the grid.
fn channels_consistent(img: &RangeImage<f64>, tol: f64) -> Result<(), String> {
    let (h, w) = (img.height(), img.width());
    for r in 0..h {
        for c in 0..w {
            let px = img.pixel(r, c);
            let range = px[Channel::Range as usize];
            if range <= 0.0 {
                ensure(px.iter().all(|v| *v == 0.0), || format!("empty pixel ({r},{c}) not zeroed"))?;
                continue;
            }
            let az = px[Channel::Azimuth as usize];
            let inc = px[Channel::Inclination as usize];
            ensure((az - column_center(c, w)).abs() <= tol, || format!("azimuth of column {c}"))?;
            ensure((inc - img.beams().get(r)).abs() <= tol, || format!("inclination of row {r}"))?;
            let e = eq1(range, az, inc);
            let got = [px[Channel::X as usize], px[Channel::Y as usize], px[Channel::Z as usize]];
            for k in 0..3 {
                ensure((got[k] - e[k]).abs() <= tol, || {
                    format!("pixel ({r},{c}) coordinate {k}: {} vs {}", got[k], e[k])
                })?;
            }
        }
    }
    Ok(())
}

fn corners(b: &OrientedBox<f64>) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [b.cx + u * c - v * s, b.cy + u * s + v * c])
}

fn inside_bev(b: &OrientedBox<f64>, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= b.length / 2.0 && v.abs() <= b.width / 2.0
}

fn inside_z(b: &OrientedBox<f64>, z: f64) -> bool {
    (z - b.cz).abs() <= b.height / 2.0
}

/// Monte-Carlo BEV and 3D IoU over the joint bounding volume.
fn mc_iou(a: &OrientedBox<f64>, b: &OrientedBox<f64>, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let pts: Vec<[f64; 2]> = corners(a).into_iter().chain(corners(b)).collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |m, p| (m.0.min(p[0]), m.1.max(p[0])));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |m, p| (m.0.min(p[1]), m.1.max(p[1])));
    let z0 = (a.cz - a.height / 2.0).min(b.cz - b.height / 2.0);
    let z1 = (a.cz + a.height / 2.0).max(b.cz + b.height / 2.0);
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    let (mut ia3, mut ib3, mut both3) = (0u64, 0u64, 0u64);
    for _ in 0..n {
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(y0..y1);
        let z = rng.gen_range(z0..z1);
        let (pa, pb) = (inside_bev(a, x, y), inside_bev(b, x, y));
        ia += pa as u64;
        ib += pb as u64;
        both += (pa && pb) as u64;
        let (qa, qb) = (pa && inside_z(a, z), pb && inside_z(b, z));
        ia3 += qa as u64;
        ib3 += qb as u64;
        both3 += (qa && qb) as u64;
    }
    let ratio = |i: u64, a: u64, b: u64| if a + b == i { 0.0 } else { i as f64 / (a + b - i) as f64 };
    (ratio(both, ia, ib), ratio(both3, ia3, ib3))
}

fn bx(center: [f64; 3], dims: [f64; 3], yaw: f64) -> OrientedBox<f64> {
    OrientedBox::new(center, dims, yaw).expect("valid box")
}

// ---------------------------------------------------------------- criteria

fn codec_round_trip() -> Check {
    let t0 = Instant::now();
    let beams: BeamTable<f64> = default_beam_table();
    let (h, w) = (beams.len(), 2048);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pixels: Vec<usize> = (0..h * w).collect();
    pixels.shuffle(&mut rng);
    pixels.truncate(10_000);
    pixels.sort_unstable();
    let points: Vec<LidarPoint<f64>> = pixels
        .iter()
        .map(|&k| {
            let (r, c) = (k / w, k % w);
            let [x, y, z] = eq1(rng.gen_range(0.5..120.0), column_center(c, w), beams.get(r));
            LidarPoint::new(CartesianPoint::new(x, y, z), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
        })
        .collect();
    let mut shuffled = points.clone();
    shuffled.shuffle(&mut rng);
    let img = project(&shuffled, &beams, w).map_err(|e| e.to_string())?;
    let back = decode(&img);
    within_time(t0, Duration::from_secs(1))?;
    ensure(back.len() == points.len(), || format!("{} points decoded of {}", back.len(), points.len()))?;
    let mut worst = 0.0f64;
    for (p, q) in points.iter().zip(&back) {
        for (a, b) in [(p.position.x, q.position.x), (p.position.y, q.position.y), (p.position.z, q.position.z)] {
            worst = worst.max((a - b).abs());
        }
        ensure(p.intensity == q.intensity && p.elongation == q.elongation, || "attribute mismatch".into())?;
    }
    ensure(worst < 1e-9, || format!("max coordinate error {worst:e}"))?;
    Ok(format!("10000 points, max error {worst:.1e}, {:.3} s", t0.elapsed().as_secs_f64()))
}

fn channel_consistency() -> Check {
    let t0 = Instant::now();
    let profile = SceneProfile::vehicle_like();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scenes = Vec::new();
    for seed in 0..100 {
        let spec = random_scene(&profile, seed).map_err(|e| e.to_string())?;
        scenes.push(raycast(&spec).map_err(|e| e.to_string())?);
    }
    let mut checked = 0;
    let mut check = |img: &RangeImage<f64>, what: &str| -> Result<(), String> {
        checked += 1;
        channels_consistent(img, 1e-9).map_err(|e| format!("{what}: {e}"))
    };
    for (i, (img, boxes)) in scenes.iter().enumerate() {
        check(img, "synth")?;
        let w = img.width();
        let cloud: Vec<LidarPoint<f64>> = decode(img)
            .into_iter()
            .map(|p| {
                let j = |v: f64| v + 0.01 * (v.abs() + 1.0).ln() * 0.5;
                LidarPoint::new(CartesianPoint::new(j(p.position.x), p.position.y, p.position.z), p.intensity, 0.0)
            })
            .collect();
        check(&project(&cloud, img.beams(), 300).map_err(|e| e.to_string())?, "project")?;
        let (rot, _) = rotate(img, boxes, rng.gen_range(0..w) as isize);
        check(&rot, "rotate")?;
        for axis in [FlipAxis::XzPlane, FlipAxis::YzPlane] {
            check(&flip(img, boxes, axis).map_err(|e| e.to_string())?.0, "flip")?;
        }
        let (dimg, dboxes) = &scenes[(i + 1) % scenes.len()];
        let shift = rng.gen_range(0..w) as isize;
        if let Some(cand) = dboxes.iter().find_map(|b| PasteCandidate::extract(dimg, *b, shift).ok()) {
            check(&copy_paste(img, boxes, &cand).map_err(|e| e.to_string())?.image, "copy_paste")?;
        }
    }
    within_time(t0, Duration::from_secs(5))?;
    Ok(format!("{checked} images from 100 scenes, {:.2} s", t0.elapsed().as_secs_f64()))
}

fn rotated_iou_monte_carlo() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mc = ChaCha8Rng::seed_from_u64(33);
    let n = 1_000_000;
    let sq = bx([0.0; 3], [1.0, 1.0, 1.0], 0.0);
    let sq45 = bx([0.0; 3], [1.0, 1.0, 1.0], FRAC_PI_4);
    let exact = 1.0 / 2f64.sqrt();
    let (m45, _) = mc_iou(&sq, &sq45, n, &mut mc);
    let got45 = iou_bev(&sq, &sq45);
    ensure((got45 - exact).abs() < 0.01 && (m45 - got45).abs() < 0.01, || {
        format!("45-degree squares: iou {got45}, monte carlo {m45}")
    })?;
    let mut worst = (m45 - got45).abs();
    for _ in 0..100 {
        let a = bx(
            [0.0, 0.0, rng.gen_range(-0.5..0.5)],
            [rng.gen_range(1.0..6.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.5)],
            rng.gen_range(-PI..PI),
        );
        let b = bx(
            [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5)],
            [rng.gen_range(1.0..6.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.5)],
            rng.gen_range(-PI..PI),
        );
        let (mb, m3) = mc_iou(&a, &b, n, &mut mc);
        let (gb, g3) = (iou_bev(&a, &b), iou_3d(&a, &b));
        let d = (mb - gb).abs().max((m3 - g3).abs());
        worst = worst.max(d);
        ensure(d < 0.01, || format!("pair {a:?} {b:?}: bev {gb} vs {mb}, 3d {g3} vs {m3}"))?;
    }
    within_time(t0, Duration::from_secs(30))?;
    Ok(format!(
        "100 pairs (BEV and 3D) at 1e6 samples, max |delta| {worst:.4}; 45-degree squares {got45:.5}; {:.1} s",
        t0.elapsed().as_secs_f64()
    ))
}

fn meta_vector(img: &RangeImage<f64>, p0: (usize, usize), pn: (isize, isize), meta: MetaInput) -> Option<Vec<f64>> {
    let (r, c) = (p0.0 as isize + pn.0, p0.1 as isize + pn.1);
    if r < 0 || c < 0 || r >= img.height() as isize || c >= img.width() as isize {
        return None;
    }
    let (r, c) = (r as usize, c as usize);
    if img.range(r, c) <= 0.0 || img.range(p0.0, p0.1) <= 0.0 {
        return None;
    }
    let xyz = |r: usize, c: usize| {
        [
            img.get(Channel::X, r, c),
            img.get(Channel::Y, r, c),
            img.get(Channel::Z, r, c),
        ]
    };
    let (pi, pj) = (xyz(r, c), xyz(p0.0, p0.1));
    let rel = vec![pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]];
    let dr = img.range(r, c) - img.range(p0.0, p0.1);
    let pix = [pn.1 as f64, pn.0 as f64];
    Some(match meta {
        MetaInput::RelXyz => rel,
        MetaInput::AbsXyzNeighbor => pi.to_vec(),
        MetaInput::RelPix => pix.to_vec(),
        MetaInput::AbsXyzBoth => [pi, pj].concat(),
        MetaInput::RelRange => vec![dr],
        MetaInput::RelXyzRange => [rel, vec![dr]].concat(),
        MetaInput::RelXyzPix => [rel, pix.to_vec()].concat(),
    })
}

/// Triple loop over pixels, kernel offsets and channels.
fn naive_metakernel(layer: &MetaKernelLayer<f64>, feats: &[f64], img: &RangeImage<f64>) -> Vec<f64> {
    let cfg = layer.config;
    let (h, w, ci, hid) = (img.height(), img.width(), cfg.c_in, cfg.hidden);
    let offs = layer.grid.offsets();
    let (w1, b1, w2, b2) = (layer.mlp_w1.data(), layer.mlp_b1.data(), layer.mlp_w2.data(), layer.mlp_b2.data());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let mut o = vec![vec![0.0; ci]; offs.len()];
            for (g, &pn) in offs.iter().enumerate() {
                let Some(m) = meta_vector(img, (r, c), pn, cfg.meta) else {
                    continue;
                };
                let nb = ((r as isize + pn.0) as usize) * w + (c as isize + pn.1) as usize;
                let mut hidden = vec![0.0; hid];
                for j in 0..hid {
                    let mut s = b1[j];
                    for (d, mv) in m.iter().enumerate() {
                        s += mv * w1[d * hid + j];
                    }
                    hidden[j] = s.max(0.0);
                }
                for ch in 0..ci {
                    let mut wt = b2[ch];
                    for j in 0..hid {
                        wt += hidden[j] * w2[j * ci + ch];
                    }
                    if cfg.relu_weights {
                        wt = wt.max(0.0);
                    }
                    o[g][ch] = wt * feats[nb * ci + ch];
                }
            }
            match cfg.agg {
                Aggregation::ConcatFc => {
                    let (aw, ab) = (layer.agg_w.as_ref().unwrap().data(), layer.agg_b.as_ref().unwrap().data());
                    for k in 0..cfg.c_out {
                        let mut s = ab[k];
                        for g in 0..offs.len() {
                            for ch in 0..ci {
                                s += o[g][ch] * aw[(g * ci + ch) * cfg.c_out + k];
                            }
                        }
                        out.push(s);
                    }
                }
                Aggregation::MaxPool => {
                    for ch in 0..ci {
                        out.push(o.iter().map(|v| v[ch]).fold(f64::NEG_INFINITY, f64::max));
                    }
                }
                Aggregation::Sum => {
                    for ch in 0..ci {
                        out.push(o.iter().map(|v| v[ch]).sum());
                    }
                }
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
}

fn test_image(rng: &mut ChaCha8Rng, h: usize, w: usize, holes: f64) -> RangeImage<f64> {
    let beams = BeamTable::uniform(0.05, -0.3, h).unwrap();
    let mut img = RangeImage::empty(beams, w).unwrap();
    let base = rng.gen_range(5.0..30.0);
    for r in 0..h {
        for c in 0..w {
            if holes > 0.0 && rng.gen_bool(holes) {
                continue;
            }
            img.set_return(r, c, base + rng.gen_range(-2.0..2.0), rng.gen_range(0.0..1.0), 0.0);
        }
    }
    img
}

fn random_layer(rng: &mut ChaCha8Rng, meta: MetaInput, agg: Aggregation, c_out: usize) -> MetaKernelLayer<f64> {
    let mut cfg = MetaKernelConfig::new(4, c_out, meta, agg);
    cfg.hidden = 16;
    let mut layer = MetaKernelLayer::random(cfg, SamplingGrid::default(), rng).unwrap();
    layer.mlp_b1 = random_tensor(rng, &[16], 0.5);
    layer.mlp_b2 = random_tensor(rng, &[4], 0.5);
    if let Some(b) = layer.agg_b.as_mut() {
        *b = random_tensor(rng, &[c_out], 0.5);
    }
    layer
}

fn metakernel_brute_force() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for inst in 0..20 {
        let img = test_image(&mut rng, 8, 8, 0.15);
        let feats = random_tensor(&mut rng, &[8, 8, 4], 1.0);
        let meta = MetaInput::ALL[inst % MetaInput::ALL.len()];
        for agg in [Aggregation::ConcatFc, Aggregation::MaxPool, Aggregation::Sum] {
            let c_out = if agg == Aggregation::ConcatFc { 5 } else { 4 };
            let layer = random_layer(&mut rng, meta, agg, c_out);
            let got = layer.forward(&feats, &img).map_err(|e| e.to_string())?;
            let want = naive_metakernel(&layer, feats.data(), &img);
            ensure(got.data().len() == want.len(), || "output size".into())?;
            for (a, b) in got.data().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
            ensure(worst < 1e-12, || format!("instance {inst} {meta:?} {agg:?}: max error {worst:e}"))?;
        }
    }
    within_time(t0, Duration::from_secs(10))?;
    Ok(format!("20 instances x 3 aggregations, max error {worst:.1e}, {:.2} s", t0.elapsed().as_secs_f64()))
}

fn metakernel_is_conv() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, ci, co) = (8, 8, 4, 5);
    let mut worst = 0.0f64;
    for meta in [MetaInput::RelXyz, MetaInput::RelRange, MetaInput::AbsXyzBoth] {
        let img = test_image(&mut rng, h, w, 0.0);
        let feats = random_tensor(&mut rng, &[h, w, ci], 1.0);
        let mut layer = random_layer(&mut rng, meta, Aggregation::ConcatFc, co);
        layer.mlp_w2 = Tensor::zeros(layer.mlp_w2.shape());
        layer.mlp_b2 = Tensor::filled(layer.mlp_b2.shape(), 1.0);
        let got = layer.forward(&feats, &img).map_err(|e| e.to_string())?;
        let (k, b) = (layer.agg_w.as_ref().unwrap().data(), layer.agg_b.as_ref().unwrap().data());
        let f = feats.data();
        for r in 0..h {
            for c in 0..w {
                for o in 0..co {
                    let mut s = b[o];
                    for (g, &(dr, dc)) in layer.grid.offsets().iter().enumerate() {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let nb = nr as usize * w + nc as usize;
                        for ch in 0..ci {
                            s += f[nb * ci + ch] * k[(g * ci + ch) * co + o];
                        }
                    }
                    worst = worst.max((got.data()[(r * w + c) * co + o] - s).abs());
                }
            }
        }
    }
    ensure(worst < 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("3 dense 8x8x4 images, max error vs zero-padded 3x3 conv {worst:.1e}"))
}

fn gradient_suite() -> Check {
    let t0 = Instant::now();
    let cases = run_grad_suite(1).map_err(|e| e.to_string())?;
    let worst = cases.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| c.max_rel_error >= GRAD_TOLERANCE)
        .map(|c| format!("{} {:e}", c.name, c.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    ensure(cases.len() == 12, || format!("{} cases", cases.len()))?;
    within_time(t0, Duration::from_secs(60))?;
    Ok(format!("{} cases, max relative error {worst:.1e}, {:.2} s", cases.len(), t0.elapsed().as_secs_f64()))
}

/// Exhaustive greedy clustering: repeatedly pick the highest-scoring
/// unclaimed survivor (lowest index on ties) and claim everything over the
/// IoU threshold; fuse each cluster by score weights.
fn reference_wnms(props: &[Proposal<f64>], cfg: &WnmsConfig) -> Vec<Proposal<f64>> {
    let mut free: Vec<bool> = props.iter().map(|p| !(p.score < cfg.score_threshold)).collect();
    let mut out = Vec::new();
    loop {
        let mut seed = None;
        for (i, p) in props.iter().enumerate() {
            if free[i] && seed.map_or(true, |s: usize| p.score > props[s].score) {
                seed = Some(i);
            }
        }
        let Some(s) = seed else { break };
        free[s] = false;
        let mut members = vec![s];
        // Remaining survivors in visiting order: descending score, then index.
        let mut rest: Vec<usize> = (0..props.len()).filter(|&i| free[i]).collect();
        rest.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap().then(a.cmp(&b)));
        for k in rest {
            if cfg.iou_kind.iou(&props[s].bbox, &props[k].bbox) > cfg.iou_threshold {
                free[k] = false;
                members.push(k);
            }
        }
        let sb = props[s].bbox;
        if members.len() == 1 {
            out.push(props[s]);
            continue;
        }
        let wsum_field = |f: &dyn Fn(&OrientedBox<f64>) -> f64| {
            let (mut num, mut den) = (0.0, 0.0);
            for &m in &members {
                num += props[m].score * (f(&props[m].bbox) - f(&sb));
                den += props[m].score;
            }
            f(&sb) + num / den
        };
        let (mut sn, mut cs) = (0.0, 0.0);
        for &m in &members {
            let (mut a, mut b) = (props[m].bbox.yaw - sb.yaw).sin_cos();
            if b < 0.0 {
                a = -a;
                b = -b;
            }
            sn += props[m].score * a;
            cs += props[m].score * b;
        }
        let mut yaw = sb.yaw + sn.atan2(cs);
        while yaw <= -PI {
            yaw += 2.0 * PI;
        }
        while yaw > PI {
            yaw -= 2.0 * PI;
        }
        out.push(Proposal {
            bbox: OrientedBox {
                cx: wsum_field(&|b| b.cx),
                cy: wsum_field(&|b| b.cy),
                cz: wsum_field(&|b| b.cz),
                length: wsum_field(&|b| b.length),
                width: wsum_field(&|b| b.width),
                height: wsum_field(&|b| b.height),
                yaw,
            },
            score: props[s].score,
        });
    }
    out
}

fn bits(p: &Proposal<f64>) -> [u64; 8] {
    let b = p.bbox;
    [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw, p.score].map(f64::to_bits)
}

fn weighted_nms_oracle() -> Check {
    let cfg = WnmsConfig::default();
    let hand = [
        Proposal { bbox: bx([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0), score: 0.9 },
        Proposal { bbox: bx([1.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0), score: 0.6 },
    ];
    let fused = weighted_nms(&hand, &cfg);
    let r = |n: i64, d: i64| Ratio::new(n, d);
    let exact = weighted_mean(r(0, 1), &[r(0, 1), r(1, 1)], &[r(9, 10), r(6, 10)]);
    ensure(exact == r(2, 5), || format!("exact hand case gave {exact}"))?;
    let cx = fused.first().map_or(f64::NAN, |p| p.bbox.cx);
    let same: f64 = weighted_mean(0.0, &[0.0, 1.0], &[0.9, 0.6]);
    ensure(fused.len() == 1 && cx.to_bits() == same.to_bits() && (cx - 0.4).abs() <= f64::EPSILON * 0.4, || {
        format!("hand case gave {fused:?}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0;
    for set in 0..200 {
        let n = rng.gen_range(0..=64);
        let centers: Vec<[f64; 2]> = (0..rng.gen_range(1..6))
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
            .collect();
        let props: Vec<Proposal<f64>> = (0..n)
            .map(|_| {
                let c = centers[rng.gen_range(0..centers.len())];
                let score = if rng.gen_bool(0.3) {
                    (rng.gen_range(0..20) as f64) * 0.05
                } else {
                    rng.gen_range(0.0..1.0)
                };
                Proposal {
                    bbox: bx(
                        [c[0] + rng.gen_range(-1.0..1.0), c[1] + rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)],
                        [rng.gen_range(3.5..5.0), rng.gen_range(1.6..2.2), rng.gen_range(1.3..1.9)],
                        rng.gen_range(-PI..PI),
                    ),
                    score,
                }
            })
            .collect();
        let (got, want) = (weighted_nms(&props, &cfg), reference_wnms(&props, &cfg));
        total += got.len();
        ensure(got.len() == want.len(), || format!("set {set}: {} vs {} outputs", got.len(), want.len()))?;
        for (a, b) in got.iter().zip(&want) {
            ensure(bits(a) == bits(b), || format!("set {set}: {a:?} vs {b:?}"))?;
        }
    }
    Ok(format!("200 sets bit-exact ({total} fused boxes); hand case cx = 2/5 exactly in rationals, {cx:?} in f64"))
}

fn target_codec() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = bx(
            [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-2.0..1.0)],
            [rng.gen_range(0.3..6.0), rng.gen_range(0.3..3.0), rng.gen_range(0.5..3.0)],
            rng.gen_range(-PI..PI),
        );
        let p = CartesianPoint::new(
            b.cx + rng.gen_range(-2.0..2.0),
            b.cy + rng.gen_range(-2.0..2.0),
            b.cz + rng.gen_range(-1.0..1.0),
        );
        if p.x.hypot(p.y) < 1e-3 {
            continue;
        }
        let t = targets::encode(&p, &b).map_err(|e| e.to_string())?;
        let d = targets::decode(&p, &t).map_err(|e| e.to_string())?;
        let mut dyaw = (d.yaw - b.yaw).rem_euclid(2.0 * PI);
        if dyaw > PI {
            dyaw -= 2.0 * PI;
        }
        for e in [d.cx - b.cx, d.cy - b.cy, d.cz - b.cz, d.length - b.length, d.width - b.width, d.height - b.height, dyaw] {
            worst = worst.max(e.abs());
        }
    }
    ensure(worst < 1e-9, || format!("round trip error {worst:e}"))?;
    let a = targets::encode(&CartesianPoint::new(10.0, 0.0, 0.0), &bx([12.0, 0.0, 0.0], [4.0, 2.0, 2.0], 0.0))
        .map_err(|e| e.to_string())?;
    let b = targets::encode(
        &CartesianPoint::new(0.0, 10.0, 0.0),
        &bx([0.0, 12.0, 0.0], [4.0, 2.0, 2.0], PI / 2.0),
    )
    .map_err(|e| e.to_string())?;
    let diff = a.to_array().iter().zip(b.to_array()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    ensure(diff < 1e-9, || format!("azimuth pair differs by {diff:e}: {a:?} vs {b:?}"))?;
    Ok(format!("1000 round trips, max error {worst:.1e}; azimuth pair max difference {diff:.1e}"))
}

fn loss_point_values() -> Check {
    let cfg = VflConfig::default();
    let (pos, neg): (f64, f64) = (varifocal(0.5, 0.8, &cfg), varifocal(0.5, 0.0, &cfg));
    ensure((pos - 0.55452).abs() <= 1e-5, || format!("vfl(0.5, 0.8) = {pos}"))?;
    ensure((neg - 0.12997).abs() <= 1e-5, || format!("vfl(0.5, 0) = {neg}"))?;
    let gt = bx([12.0, 0.0, 0.0], [4.0, 2.0, 2.0], 0.0);
    let points = [CartesianPoint::new(11.0, 0.0, 0.0), CartesianPoint::new(12.5, 0.3, 0.0)];
    let labels = [PixelLabel { is_foreground: true, gt_index: Some(0), layer: 0 }; 2];
    let preds: Vec<TargetVector<f64>> = points
        .iter()
        .map(|p| {
            let mut v = targets::encode(p, &gt).unwrap().to_array();
            v[0] += 1.5;
            TargetVector::from_slice(&v)
        })
        .collect();
    let reg = reg_loss(&preds, &labels, &[gt], &points).map_err(|e| e.to_string())?;
    ensure(reg == 1.0, || format!("two-pixel regression loss = {reg}"))?;
    Ok(format!("vfl(0.5,0.8) = {pos:.5}, vfl(0.5,0) = {neg:.5}, two-pixel regression = {reg}"))
}

fn augmentation_oracles() -> Check {
    let profile = SceneProfile::vehicle_like();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for seed in 200..220 {
        let (img, boxes) = raycast(&random_scene(&profile, seed).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let w = img.width();
        let k = rng.gen_range(1..w) as isize;
        let theta = 2.0 * PI * k as f64 / w as f64;
        let (s, c) = theta.sin_cos();
        let (rot, rboxes) = rotate(&img, &boxes, k);
        let mirror_x = flip(&img, &boxes, FlipAxis::XzPlane).map_err(|e| e.to_string())?.0;
        let mirror_y = flip(&img, &boxes, FlipAxis::YzPlane).map_err(|e| e.to_string())?.0;
        for out in [&rot, &mirror_x, &mirror_y] {
            ensure(out.non_empty_count() == img.non_empty_count(), || "return count changed".into())?;
        }
        for (r, col) in img.occupied() {
            let p = img.point(r, col);
            let cases = [
                (rot.point(r, (col + k as usize) % w), [p.x * c - p.y * s, p.x * s + p.y * c, p.z]),
                (mirror_x.point(r, w - 1 - col), [p.x, -p.y, p.z]),
                (mirror_y.point(r, (w - 1 - col + w / 2) % w), [-p.x, p.y, p.z]),
            ];
            for (q, e) in cases {
                for (a, b) in [q.x, q.y, q.z].into_iter().zip(e) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        for (b, rb) in boxes.iter().zip(&rboxes) {
            let e = [b.cx * c - b.cy * s, b.cx * s + b.cy * c];
            worst = worst.max((rb.cx - e[0]).abs()).max((rb.cy - e[1]).abs());
        }
    }
    ensure(worst < 1e-9, || format!("cloud mismatch {worst:e}"))?;

    let beams = BeamTable::uniform(0.05, -0.25, 6).unwrap();
    let mut wall = RangeImage::empty(beams, 12).unwrap();
    for r in 0..6 {
        for c in 0..12 {
            wall.set_return(r, c, 20.0, 0.2, 0.0);
        }
    }
    let donor = |range: f64| {
        let pixels = (0..3)
            .map(|k| {
                let mut src = RangeImage::empty(wall.beams().clone(), 12).unwrap();
                src.set_return(3, 2 + k, range, 0.5, 0.0);
                DonorPixel { row: 3, col: 2 + k, channels: src.pixel(3, 2 + k) }
            })
            .collect();
        PasteCandidate::new(pixels, bx([range, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0), 2).unwrap()
    };
    let far = copy_paste(&wall, &[], &donor(40.0)).map_err(|e| e.to_string())?;
    ensure(!far.accepted && far.image == wall && far.boxes.is_empty(), || "40 m behind 20 m wall was pasted".into())?;
    let near = copy_paste(&wall, &[], &donor(10.0)).map_err(|e| e.to_string())?;
    ensure(near.accepted && near.passed == 3 && near.boxes.len() == 1, || "10 m over 20 m wall rejected".into())?;
    ensure((4..7).all(|c| near.image.range(3, c) == 10.0), || "pasted pixels misplaced".into())?;
    Ok(format!("20 scenes rotate/flip cloud error {worst:.1e}; 40 m behind 20 m rejected, 10 m over 20 m accepted"))
}

fn rcp_assignment() -> Check {
    let cfg = RcpConfig::default();
    let ranges = [10.0, 15.0, 29.999, 30.0, 79.0, 95.0];
    let got: Vec<usize> = ranges
        .iter()
        .map(|&r| assign_layer(&bx([r, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0), &cfg))
        .collect();
    ensure(got == [0, 1, 1, 2, 2, 2], || format!("layers {got:?}"))?;
    Ok(format!("ranges {ranges:?} -> layers {got:?}"))
}

fn end_to_end() -> Check {
    let t0 = Instant::now();
    let cfg = PipelineConfig::default();
    let (_, rep) = run_experiment(&cfg, 5000, 10, |_| {}).map_err(|e| e.to_string())?;
    let ratio = rep.train.final_loss.total / rep.train.initial.total;
    let labels: Vec<&str> = std::iter::once(&rep.weighted.overall)
        .chain(&rep.weighted.buckets)
        .map(|b| b.label.as_str())
        .collect();
    let table = |r: &rangeview::evalap::ApReport| {
        std::iter::once(&r.overall)
            .chain(&r.buckets)
            .map(|b| format!("{} {:.3}", b.label, b.ap))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    println!("       weighted NMS: {} ({} detections)", table(&rep.weighted), rep.weighted_detections);
    println!("       standard NMS: {} ({} detections)", table(&rep.standard), rep.standard_detections);
    ensure(labels == ["Overall", "0 - 30", "30 - 50", "50 - inf"], || format!("report layout {labels:?}"))?;
    ensure(ratio < 0.5, || format!("loss ratio {ratio:.3}"))?;
    let ap = rep.weighted.overall.ap;
    ensure(ap >= 0.5, || format!("overall BEV AP@0.5 {ap:.3}, loss ratio {ratio:.3}"))?;
    within_time(t0, Duration::from_secs(600))?;
    Ok(format!(
        "loss {:.3} -> {:.3} (ratio {ratio:.3}); BEV AP@0.5 weighted {ap:.3}, standard {:.3}; {:.0} s",
        rep.train.initial.total,
        rep.train.final_loss.total,
        rep.standard.overall.ap,
        t0.elapsed().as_secs_f64()
    ))
}

fn ap_hand_case() -> Check {
    let ap = average_precision(&[true, false], 2);
    let exact = 51.0 / 101.0;
    ensure((ap - exact).abs() <= 1e-9, || format!("AP {ap} vs 51/101"))?;
    Ok(format!("AP = {ap:.9} = 51/101 within 1e-9 (rounded 0.50495, gap {:.2e})", (ap - 0.50495).abs()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 13] = [
        ("codec round trip", codec_round_trip),
        ("channel consistency", channel_consistency),
        ("rotated IoU vs Monte Carlo", rotated_iou_monte_carlo),
        ("Meta-Kernel brute force", metakernel_brute_force),
        ("Meta-Kernel unit weights = 3x3 conv", metakernel_is_conv),
        ("gradient suite", gradient_suite),
        ("weighted NMS oracle", weighted_nms_oracle),
        ("target codec", target_codec),
        ("loss point values", loss_point_values),
        ("augmentation oracles", augmentation_oracles),
        ("RCP assignment", rcp_assignment),
        ("end-to-end toy", end_to_end),
        ("AP hand case", ap_hand_case),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    panic::set_hook(Box::new(|_| {}));
    let (mut passed, mut run) = (0, 0);
    for (name, f) in criteria {
        if filter.as_ref().is_some_and(|flt| !name.contains(flt.as_str())) {
            continue;
        }
        run += 1;
        let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match res {
            Ok(detail) => {
                passed += 1;
                println!("[PASS] {name}: {detail}");
            }
            Err(why) => println!("[FAIL] {name}: {why}"),
        }
    }
    println!("acceptance: {passed}/{run} criteria passed");
    if passed == run {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
