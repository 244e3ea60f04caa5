mod dataset;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use rangeview::augment::{copy_paste, flip, rotate, FlipAxis, PasteCandidate};
use rangeview::evalap::{evaluate, ApReport, EvalConfig, Frame};
use rangeview::geom::{point_in_box, IouKind};
use rangeview::gradsuite::{run_grad_suite, GRAD_TOLERANCE};
use rangeview::io::{render_ppm, BoxRecord};
use rangeview::pipeline::{
    make_scenes, train, Checkpoint, FeatureNorm, LossRecord, Model, PipelineConfig, SceneInput,
    TrainingScene,
};
use rangeview::postproc::{standard_nms, weighted_nms, Proposal, WnmsConfig};
use rangeview::synth::{random_scene, raycast, SceneProfile};

use dataset::{entry_for, read_boxes, read_json, scene_name, write_file, Dataset, Scene};

#[derive(Parser)]
#[command(name = "rvdet", version, about = "Range-view LiDAR detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ray-cast random scenes into range images with ground truth.
    Synth(SynthArgs),
    /// Rotate, flip and copy-paste a scene set.
    Augment(AugmentArgs),
    /// Train the toy detector and write a checkpoint.
    TrainToy(TrainArgs),
    /// Run a checkpoint over a scene set and write detections.
    Infer(InferArgs),
    /// Bucketed AP of detections against ground truth.
    Eval(EvalArgs),
    /// Range channel as a PPM image.
    Render(RenderArgs),
    /// Finite-difference check of every trained component.
    Gradcheck(GradArgs),
    /// Weighted vs standard NMS on one proposal file.
    NmsDemo(NmsArgs),
    /// Print a default config as JSON.
    Config(ConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Pipeline,
    Augment,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(value_enum, default_value = "pipeline")]
    kind: ConfigKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileName {
    Vehicle,
    Ped,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

impl From<KindArg> for IouKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Bev => IouKind::Bev,
            KindArg::ThreeD => IouKind::ThreeD,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, value_enum, default_value = "vehicle")]
    profile: ProfileName,
    /// Pipeline config; its scene profile replaces --profile.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on this scene set instead of freshly synthesized scenes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Per-iteration losses as JSON lines (stderr when absent).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Greedy NMS instead of weighted NMS.
    #[arg(long)]
    standard: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, value_enum, default_value = "bev")]
    kind: KindArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tint returns inside these boxes.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct NmsArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    #[arg(long, value_enum, default_value = "bev")]
    kind: KindArg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AugmentConfig {
    seed: u64,
    rotate: bool,
    flip_prob: f64,
    flip_axis: FlipAxis,
    copy_paste: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rotate: true,
            flip_prob: 0.5,
            flip_axis: FlipAxis::XzPlane,
            copy_paste: true,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate().context("invalid pipeline config")?;
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<()> {
    let profile = match (&a.config, a.profile) {
        (Some(p), _) => load_config(Some(p))?.profile,
        (None, ProfileName::Vehicle) => SceneProfile::vehicle_like(),
        (None, ProfileName::Ped) => SceneProfile::ped_like(),
    };
    let scenes = (0..a.count)
        .map(|k| {
            let seed = a.seed + k as u64;
            let (image, boxes) = raycast(&random_scene(&profile, seed)?)?;
            Ok(Scene {
                entry: entry_for(scene_name(k), seed),
                image,
                boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    dataset::write_dataset(&a.out, profile.class.class.name(), &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let cfg: AugmentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AugmentConfig::default(),
    };
    if !(0.0..=1.0).contains(&cfg.flip_prob) {
        bail!("flip_prob must be in [0, 1]");
    }
    let ds = Dataset::open(&a.input)?;
    let originals = ds.load_all()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(originals.len());
    let mut log = Vec::new();
    for (i, s) in originals.iter().enumerate() {
        let w = s.image.width();
        let (mut image, mut boxes) = (s.image.clone(), s.boxes.clone());
        let mut ops = Vec::new();
        if cfg.rotate {
            let k = rng.gen_range(0..w) as isize;
            (image, boxes) = rotate(&image, &boxes, k);
            ops.push(json!({"op": "rotate", "cols": k}));
        }
        if rng.gen_bool(cfg.flip_prob) {
            (image, boxes) = flip(&image, &boxes, cfg.flip_axis)?;
            ops.push(json!({"op": "flip", "axis": cfg.flip_axis}));
        }
        if cfg.copy_paste && originals.len() > 1 {
            let donor = &originals[(i + 1) % originals.len()];
            if !donor.boxes.is_empty() {
                let j = rng.gen_range(0..donor.boxes.len());
                let shift = rng.gen_range(0..w) as isize;
                match PasteCandidate::extract(&donor.image, donor.boxes[j], shift) {
                    Ok(cand) => {
                        let res = copy_paste(&image, &boxes, &cand)?;
                        ops.push(json!({
                            "op": "copy_paste",
                            "donor": donor.entry.name,
                            "box": j,
                            "cols": shift,
                            "pixels": cand.pixels().len(),
                            "passed": res.passed,
                            "accepted": res.accepted,
                        }));
                        (image, boxes) = (res.image, res.boxes);
                    }
                    Err(e) => ops.push(json!({"op": "copy_paste", "skipped": e.to_string()})),
                }
            }
        }
        log.push(json!({"scene": s.entry.name, "source": s.entry.image, "ops": ops}));
        out.push(Scene {
            entry: s.entry.clone(),
            image,
            boxes,
        });
    }
    dataset::write_dataset(&a.out, &ds.manifest.class, &out)?;
    let mut text = String::new();
    for l in &log {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_file(&a.out.join("provenance.jsonl"), text.as_bytes())?;
    println!("augmented {} scenes into {}", out.len(), a.out.display());
    Ok(())
}

fn train_toy(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let rendered: Vec<_> = match &a.data {
        Some(dir) => Dataset::open(dir)?
            .load_all()?
            .into_iter()
            .map(|s| (s.image, s.boxes))
            .collect(),
        None => make_scenes(&cfg.profile, cfg.train.scene_seed, cfg.train.train_scenes)?,
    };
    let mut model = Model::random(cfg.model, cfg.train.seed)?;
    model.norm = FeatureNorm::fit(rendered.iter().map(|(img, _)| img));
    let scenes = rendered
        .into_iter()
        .map(|(img, boxes)| TrainingScene::new(img, boxes, &model, &cfg.rcp))
        .collect::<rangeview::Result<Vec<_>>>()?;
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stderr()),
    };
    let mut write_err = None;
    let report = train(&mut model, &scenes, &cfg, |r: &LossRecord| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("loss record serializes");
            write_err = writeln!(sink, "{line}").err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context("writing loss log"));
    }
    write_file(&a.out, Checkpoint::from_model(&model).to_json().as_bytes())?;
    println!(
        "{}",
        json!({
            "initial": report.initial,
            "final": report.final_loss,
            "ratio": report.final_loss.total / report.initial.total,
            "checkpoint": a.out,
        })
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => Some(load_config(Some(p))?),
        None => None,
    };
    let ckpt = Checkpoint::from_json(&dataset::read_text(&a.checkpoint)?)
        .with_context(|| format!("in {}", a.checkpoint.display()))?;
    let model = ckpt
        .to_model(cfg.as_ref().map(|c| &c.model))
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let nms = cfg.as_ref().map(|c| c.nms).unwrap_or_default();
    let weighted = !a.standard && cfg.as_ref().map_or(true, |c| c.weighted_nms);
    let ds = Dataset::open(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut total = 0;
    for entry in &ds.manifest.scenes {
        let scene = ds.load(entry)?;
        let input = SceneInput::new(scene.image, &model);
        let props = rangeview::pipeline::proposals(&model, &input)?;
        let dets = rangeview::pipeline::suppress(&props, &nms, weighted);
        total += dets.len();
        let recs: Vec<BoxRecord> = dets
            .iter()
            .map(|d| BoxRecord::new(&d.bbox, &ds.manifest.class, Some(d.score)))
            .collect();
        write_file(&det_path(&a.out, &entry.name), &dataset::records_bytes(&recs)?)?;
    }
    println!(
        "{} detections over {} scenes ({} NMS)",
        total,
        ds.manifest.scenes.len(),
        if weighted { "weighted" } else { "standard" }
    );
    Ok(())
}

fn det_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.det.jsonl"))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ecfg = EvalConfig::new(a.iou, a.kind.into())?;
    let ds = Dataset::open(&a.data)?;
    let mut frames = Vec::new();
    for entry in &ds.manifest.scenes {
        let scene = ds.load(entry)?;
        let dets = read_boxes(&det_path(&a.dets, &entry.name))?
            .iter()
            .map(|r| r.to_proposal())
            .collect::<rangeview::Result<Vec<_>>>()
            .with_context(|| format!("detections of {}", entry.name))?;
        frames.push(Frame {
            dets,
            gts: scene.boxes,
        });
    }
    let report = evaluate(&frames, &ecfg);
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        write_file(p, format!("{text}\n").as_bytes())?;
    }
    println!("{text}");
    eprint!("{}", ap_table(&report));
    Ok(())
}

fn ap_table(r: &ApReport) -> String {
    let mut head = String::new();
    let mut row = String::new();
    for b in std::iter::once(&r.overall).chain(&r.buckets) {
        head.push_str(&format!("{:>10}", b.label));
        row.push_str(&format!("{:>10.4}", b.ap));
    }
    format!("{head}\n{row}\n")
}

fn render(a: RenderArgs) -> Result<()> {
    let bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = rangeview::io::decode_rimg(&bytes).with_context(|| format!("in {}", a.image.display()))?;
    let mask = match &a.gt {
        Some(p) => {
            let boxes = read_boxes(p)?
                .iter()
                .map(|r| r.to_box())
                .collect::<rangeview::Result<Vec<_>>>()?;
            let mut m = vec![false; img.height() * img.width()];
            for (r, c) in img.occupied() {
                let pt = img.point(r, c);
                m[r * img.width() + c] = boxes.iter().any(|b| point_in_box(&pt, b));
            }
            Some(m)
        }
        None => None,
    };
    write_file(&a.out, &render_ppm(&img, mask.as_deref())?)?;
    println!("wrote {}x{} image to {}", img.width(), img.height(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradArgs) -> Result<()> {
    let cases = run_grad_suite(a.seed)?;
    let mut failed = 0;
    for c in &cases {
        println!(
            "{:<4} {:<36} {:.3e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_error
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks above {GRAD_TOLERANCE:e}", cases.len());
    }
    println!("all {} gradient checks below {GRAD_TOLERANCE:e}", cases.len());
    Ok(())
}

fn fmt_prop(p: Option<&Proposal<f64>>) -> String {
    match p {
        Some(p) => {
            let b = &p.bbox;
            format!(
                "{:.3} ({:.3},{:.3},{:.3}) {:.2}x{:.2}x{:.2} {:+.3}",
                p.score, b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw
            )
        }
        None => String::new(),
    }
}

fn nms_demo(a: NmsArgs) -> Result<()> {
    let cfg = WnmsConfig {
        score_threshold: a.score_threshold,
        iou_threshold: a.iou_threshold,
        iou_kind: a.kind.into(),
    };
    let props = read_boxes(&a.proposals)?
        .iter()
        .map(|r| r.to_proposal())
        .collect::<rangeview::Result<Vec<_>>>()
        .with_context(|| format!("in {}", a.proposals.display()))?;
    let w = weighted_nms(&props, &cfg);
    let s = standard_nms(&props, &cfg);
    println!("{} proposals", props.len());
    println!("{:<52} | standard", "weighted");
    for k in 0..w.len().max(s.len()) {
        println!("{:<52} | {}", fmt_prop(w.get(k)), fmt_prop(s.get(k)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Augment(a) => augment(a),
        Cmd::TrainToy(a) => train_toy(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Render(a) => render(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::NmsDemo(a) => nms_demo(a),
        Cmd::Config(a) => {
            let text = match a.kind {
                ConfigKind::Pipeline => serde_json::to_string_pretty(&PipelineConfig::default())?,
                ConfigKind::Augment => serde_json::to_string_pretty(&AugmentConfig::default())?,
            };
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
