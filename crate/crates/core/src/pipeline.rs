//! Toy detector: a single stride-1 Meta-Kernel layer over the eight input
//! channels, a ReLU, and two affine heads (sigmoid score, eight box-target
//! components). Trained by plain gradient descent on simulated scenes and
//! decoded through weighted or standard NMS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{label_pixels, PixelLabel, RcpConfig};
use crate::error::{Error, Result};
use crate::evalap::{evaluate, ApReport, EvalConfig, Frame};
use crate::geom::{iou_3d, IouKind, OrientedBox};
use crate::grad::{Tape, Tensor, Var};
use crate::metakernel::{
    Aggregation, BoundMetaKernel, MetaGeometry, MetaInput, MetaKernelConfig, MetaKernelLayer,
    SamplingGrid,
};
use crate::postproc::{standard_nms, weighted_nms, Proposal, WnmsConfig};
use crate::rimg::{CartesianPoint, Channel, RangeImage};
use crate::synth::{random_scene, raycast, SceneProfile};
use crate::targets::{cls_weights, decode, reg_weights, target_grid, TargetVector, VflConfig};


/// Boxes are grown by this much (per side) when labeling pixels, so that
/// returns lying exactly on a box face are not lost to rounding.
pub const LABEL_MARGIN_M: f64 = 1e-6;

const TARGET_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output width of the Meta-Kernel layer (concatenation mode only; the
    /// reducing modes keep the eight input channels).
    pub channels: usize,
    /// Hidden width of the weight-generating MLP.
    pub hidden: usize,
    pub meta: MetaInput,
    pub agg: Aggregation,
    /// Meta vectors are multiplied by this before entering the weight
    /// generator (0.1 means they are read in units of 10 m).
    pub meta_scale: f64,
    /// Fixed multiplier on the score head's output before the sigmoid.
    pub logit_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            hidden: 64,
            meta: MetaInput::RelXyz,
            agg: Aggregation::ConcatFc,
            meta_scale: 0.1,
            logit_scale: 10.0,
        }
    }
}

impl ModelConfig {
    fn metakernel(&self) -> MetaKernelConfig {
        let c_out = match self.agg {
            Aggregation::ConcatFc => self.channels,
            _ => Channel::COUNT,
        };
        let mut cfg = MetaKernelConfig::new(Channel::COUNT, c_out, self.meta, self.agg);
        cfg.hidden = self.hidden;
        cfg
    }

    /// Stable identifier of the architecture: FNV-1a of the canonical JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Scenes per gradient step.
    pub batch: usize,
    pub train_scenes: usize,
    /// Scene `k` of the training set is drawn with seed `scene_seed + k`.
    pub scene_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 0.05,
            seed: 7,
            batch: 2,
            train_scenes: 50,
            scene_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: SceneProfile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub nms: WnmsConfig,
    /// Weighted NMS when true, standard greedy NMS otherwise.
    pub weighted_nms: bool,
    pub vfl: VflConfig<f64>,
    pub rcp: RcpConfig,
    /// BEV IoU a detection needs to count as a true positive.
    pub eval_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: SceneProfile::vehicle_like(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            nms: WnmsConfig::default(),
            weighted_nms: true,
            vfl: VflConfig::default(),
            rcp: RcpConfig::default(),
            eval_iou: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch == 0 || t.train_scenes == 0 {
            return Err(Error::contract("batch and train_scenes must be positive"));
        }
        if !(t.step_size > 0.0 && t.step_size.is_finite()) {
            return Err(Error::contract("step_size must be positive"));
        }
        if !(self.model.meta_scale > 0.0 && self.model.meta_scale.is_finite()) {
            return Err(Error::contract("meta_scale must be positive"));
        }
        if !(self.model.logit_scale > 0.0 && self.model.logit_scale.is_finite()) {
            return Err(Error::contract("logit_scale must be positive"));
        }
        if self.model.channels == 0 || self.model.hidden == 0 {
            return Err(Error::contract("model widths must be positive"));
        }
        for v in [self.nms.score_threshold, self.nms.iou_threshold] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract("NMS thresholds must be in [0, 1]"));
            }
        }
        VflConfig::new(self.vfl.alpha, self.vfl.gamma)?;
        EvalConfig::new(self.eval_iou, IouKind::Bev)?;
        self.rcp.validate()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig::new(self.eval_iou, IouKind::Bev).expect("validated threshold")
    }
}

/// Per-channel standardization of the eight input channels, fitted on the
/// non-empty pixels of the training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: [f64; 8],
    pub scale: [f64; 8],
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; 8],
            scale: [1.0; 8],
        }
    }
}

impl FeatureNorm {
    /// Channels with (near) zero spread keep unit scale.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a RangeImage<f64>>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; 8];
        let mut sq = [0.0; 8];
        for img in images {
            for (r, c) in img.occupied() {
                n += 1;
                for (k, v) in img.pixel(r, c).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for k in 0..8 {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(0.0);
            out.mean[k] = mean;
            out.scale[k] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }

    /// Standardized channels, `[H·W, 8]` row-major; empty pixels stay zero.
    pub fn apply(&self, img: &RangeImage<f64>) -> Tensor<f64> {
        let n = img.height() * img.width();
        let mut data = vec![0.0; n * Channel::COUNT];
        for (r, c) in img.occupied() {
            let k = r * img.width() + c;
            for (ch, v) in img.pixel(r, c).iter().enumerate() {
                data[k * Channel::COUNT + ch] = (v - self.mean[ch]) / self.scale[ch];
            }
        }
        Tensor::new(vec![n, Channel::COUNT], data).expect("feature shape")
    }
}

/// Pixel labels against boxes grown by [`LABEL_MARGIN_M`].
pub fn label_scene(img: &RangeImage<f64>, boxes: &[OrientedBox<f64>], rcp: &RcpConfig) -> Vec<PixelLabel> {
    let grown: Vec<OrientedBox<f64>> = boxes
        .iter()
        .map(|b| OrientedBox {
            length: b.length + 2.0 * LABEL_MARGIN_M,
            width: b.width + 2.0 * LABEL_MARGIN_M,
            height: b.height + 2.0 * LABEL_MARGIN_M,
            ..*b
        })
        .collect();
    label_pixels(img, &grown, rcp)
}

fn points_of(img: &RangeImage<f64>) -> Vec<CartesianPoint<f64>> {
    (0..img.height())
        .flat_map(|r| (0..img.width()).map(move |c| (r, c)))
        .map(|(r, c)| img.point(r, c))
        .collect()
}

/// Per-image network input that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub image: RangeImage<f64>,
    pub features: Tensor<f64>,
    pub geometry: MetaGeometry<f64>,
}

impl SceneInput {
    pub fn new(image: RangeImage<f64>, model: &Model) -> Self {
        let mut geometry = MetaGeometry::new(&image, &SamplingGrid::default(), model.config.meta);
        for v in geometry.meta.data_mut() {
            *v *= model.config.meta_scale;
        }
        Self {
            features: model.norm.apply(&image),
            geometry,
            image,
        }
    }
}

/// A scene with everything the losses need.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub input: SceneInput,
    pub boxes: Vec<OrientedBox<f64>>,
    pub labels: Vec<PixelLabel>,
    pub points: Vec<CartesianPoint<f64>>,
    pub targets: Vec<f64>,
    pub cls_weight: Vec<f64>,
    pub reg_weight: Vec<f64>,
}

impl TrainingScene {
    pub fn new(
        image: RangeImage<f64>,
        boxes: Vec<OrientedBox<f64>>,
        model: &Model,
        rcp: &RcpConfig,
    ) -> Result<Self> {
        let labels = label_scene(&image, &boxes, rcp);
        let points = points_of(&image);
        let targets = target_grid(&labels, &boxes, &points)?
            .iter()
            .flat_map(|t| t.to_array())
            .collect();
        let valid: Vec<bool> = image.plane(Channel::Range).iter().map(|&r| r > 0.0).collect();
        Ok(Self {
            cls_weight: cls_weights(&valid),
            reg_weight: reg_weights(&labels, boxes.len()),
            input: SceneInput::new(image, model),
            boxes,
            labels,
            points,
            targets,
        })
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_foreground).count()
    }
}

/// Renders `count` random scenes with seeds `first_seed, first_seed + 1, ...`.
pub fn make_scenes(
    profile: &SceneProfile,
    first_seed: u64,
    count: usize,
) -> Result<Vec<(RangeImage<f64>, Vec<OrientedBox<f64>>)>> {
    (0..count as u64)
        .map(|k| raycast(&random_scene(profile, first_seed + k)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    pub metakernel: MetaKernelLayer<f64>,
    pub cls_w: Tensor<f64>,
    pub cls_b: Tensor<f64>,
    pub reg_w: Tensor<f64>,
    pub reg_b: Tensor<f64>,
}

struct BoundModel {
    mk: BoundMetaKernel,
    cls_w: Var,
    cls_b: Var,
    reg_w: Var,
    reg_b: Var,
}

impl BoundModel {
    fn vars(&self) -> Vec<Var> {
        let mut v = self.mk.vars();
        v.extend([self.cls_w, self.cls_b, self.reg_w, self.reg_b]);
        v
    }
}

/// Raw network output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Post-sigmoid score per pixel.
    pub scores: Vec<f64>,
    /// Eight target components per pixel, row-major.
    pub targets: Vec<f64>,
}

impl Prediction {
    pub fn target(&self, pixel: usize) -> TargetVector<f64> {
        TargetVector::from_slice(&self.targets[pixel * TARGET_DIM..(pixel + 1) * TARGET_DIM])
    }
}

impl Model {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let metakernel = MetaKernelLayer::zeros(config.metakernel(), SamplingGrid::default())?;
        let c = metakernel.output_channels();
        Ok(Self {
            config,
            norm: FeatureNorm::default(),
            metakernel,
            cls_w: Tensor::zeros(&[c, 1]),
            cls_b: Tensor::zeros(&[1]),
            reg_w: Tensor::zeros(&[c, TARGET_DIM]),
            reg_b: Tensor::zeros(&[TARGET_DIM]),
        })
    }

    /// Random start that is exactly a standard 3×3 convolution: the weight
    /// generator's output layer is zero with unit bias, so every generated
    /// weight is one, and the aggregation matrix is Glorot-uniform. Heads
    /// start at zero. The generator's hidden layer is random, so its output
    /// layer receives gradient from the first step on.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut metakernel = MetaKernelLayer::random(config.metakernel(), SamplingGrid::default(), &mut rng)?;
        metakernel.mlp_w2 = Tensor::zeros(metakernel.mlp_w2.shape());
        metakernel.mlp_b2 = Tensor::filled(metakernel.mlp_b2.shape(), 1.0);
        Ok(Self {
            metakernel,
            ..Self::zeros(config)?
        })
    }

    /// Every parameter tensor under a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut v: Vec<(String, &Tensor<f64>)> = self
            .metakernel
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("metakernel.{n}"), t))
            .collect();
        v.push(("cls_w".into(), &self.cls_w));
        v.push(("cls_b".into(), &self.cls_b));
        v.push(("reg_w".into(), &self.reg_w));
        v.push(("reg_b".into(), &self.reg_b));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v: Vec<&mut Tensor<f64>> = self
            .metakernel
            .named_params_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        v.extend([&mut self.cls_w, &mut self.cls_b, &mut self.reg_w, &mut self.reg_b]);
        v
    }

    fn bind(&self, tape: &mut Tape<f64>) -> BoundModel {
        BoundModel {
            mk: self.metakernel.bind(tape),
            cls_w: tape.param(self.cls_w.clone()),
            cls_b: tape.param(self.cls_b.clone()),
            reg_w: tape.param(self.reg_w.clone()),
            reg_b: tape.param(self.reg_b.clone()),
        }
    }

    /// Returns `(scores [H·W, 1], targets [H·W, 8])` on the tape.
    fn forward_on(&self, tape: &mut Tape<f64>, p: &BoundModel, input: &SceneInput) -> Result<(Var, Var)> {
        let f = tape.constant(input.features.clone());
        let trunk = self.metakernel.forward_on(tape, &p.mk, f, &input.geometry)?;
        let trunk = tape.relu(trunk);
        let logits = tape.affine(trunk, p.cls_w, Some(p.cls_b))?;
        let logits = tape.scale(logits, self.config.logit_scale);
        let scores = tape.sigmoid(logits);
        let reg = tape.affine(trunk, p.reg_w, Some(p.reg_b))?;
        Ok((scores, reg))
    }

    pub fn predict(&self, input: &SceneInput) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let (s, r) = self.forward_on(&mut tape, &p, input)?;
        Ok(Prediction {
            scores: tape.value(s).data().to_vec(),
            targets: tape.value(r).data().to_vec(),
        })
    }
}

/// IoU targets for the current predictions: 3D IoU of each foreground
/// pixel's decoded box with its owner, zero elsewhere (and for predictions
/// that do not decode to a valid box).
pub fn iou_targets(scene: &TrainingScene, reg: &[f64]) -> Vec<f64> {
    scene
        .labels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let Some(g) = l.gt_index else { return 0.0 };
            let t = TargetVector::from_slice(&reg[k * TARGET_DIM..(k + 1) * TARGET_DIM]);
            decode(&scene.points[k], &t).map_or(0.0, |b| iou_3d(&b, &scene.boxes[g]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

fn scene_loss(
    model: &Model,
    tape: &mut Tape<f64>,
    p: &BoundModel,
    scene: &TrainingScene,
    vfl: VflConfig<f64>,
) -> Result<(Var, Var)> {
    let (scores, reg) = model.forward_on(tape, p, &scene.input)?;
    let q = iou_targets(scene, tape.value(reg).data());
    let cls = tape.varifocal(scores, q, scene.cls_weight.clone(), vfl)?;
    let reg = tape.smooth_l1(reg, scene.targets.clone(), scene.reg_weight.clone())?;
    Ok((cls, reg))
}

/// Mean classification and regression loss over `scenes` at the current parameters.
pub fn dataset_loss(model: &Model, scenes: &[TrainingScene], vfl: VflConfig<f64>) -> Result<LossRecord> {
    let (mut cls, mut reg) = (0.0, 0.0);
    for s in scenes {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let (c, r) = scene_loss(model, &mut tape, &p, s, vfl)?;
        cls += tape.value(c).data()[0];
        reg += tape.value(r).data()[0];
    }
    let n = scenes.len().max(1) as f64;
    Ok(LossRecord {
        iteration: 0,
        cls: cls / n,
        reg: reg / n,
        total: (cls + reg) / n,
    })
}

/// One gradient-descent step on the scenes `batch`; returns the batch loss
/// before the update.
pub fn train_step(
    model: &mut Model,
    batch: &[&TrainingScene],
    vfl: VflConfig<f64>,
    step_size: f64,
) -> Result<LossRecord> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    for s in batch {
        let (c, r) = scene_loss(model, &mut tape, &p, s, vfl)?;
        cls_terms.push(c);
        reg_terms.push(r);
    }
    let k = 1.0 / batch.len() as f64;
    let cls_sum = tape.concat(&cls_terms, 0)?;
    let cls_sum = tape.sum(cls_sum);
    let cls = tape.scale(cls_sum, k);
    let reg_sum = tape.concat(&reg_terms, 0)?;
    let reg_sum = tape.sum(reg_sum);
    let reg = tape.scale(reg_sum, k);
    let total = tape.add(cls, reg)?;
    tape.backward(total)?;
    let record = LossRecord {
        iteration: 0,
        cls: tape.value(cls).data()[0],
        reg: tape.value(reg).data()[0],
        total: tape.value(total).data()[0],
    };
    if !record.total.is_finite() {
        return Err(Error::contract("training loss is not finite"));
    }
    let vars = p.vars();
    for (param, v) in model.params_mut().into_iter().zip(vars) {
        if let Some(g) = tape.grad(v) {
            for (w, d) in param.data_mut().iter_mut().zip(g.data()) {
                *w -= step_size * d;
            }
        }
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full training-set loss before the first step.
    pub initial: LossRecord,
    /// Full training-set loss after the last step.
    pub final_loss: LossRecord,
    /// Batch loss of every step.
    pub history: Vec<LossRecord>,
}

/// Runs `cfg.train.iterations` steps, cycling through the scenes in order
/// `batch` at a time. `on_step` sees each step's batch loss.
pub fn train(
    model: &mut Model,
    scenes: &[TrainingScene],
    cfg: &PipelineConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::contract("no training scenes"));
    }
    let t = &cfg.train;
    let initial = dataset_loss(model, scenes, cfg.vfl)?;
    let mut history = Vec::with_capacity(t.iterations);
    for it in 0..t.iterations {
        let batch: Vec<&TrainingScene> = (0..t.batch)
            .map(|b| &scenes[(it * t.batch + b) % scenes.len()])
            .collect();
        let mut rec = train_step(model, &batch, cfg.vfl, t.step_size)?;
        rec.iteration = it;
        on_step(&rec);
        history.push(rec);
    }
    let mut final_loss = dataset_loss(model, scenes, cfg.vfl)?;
    final_loss.iteration = t.iterations;
    Ok(TrainReport {
        initial,
        final_loss,
        history,
    })
}

/// One proposal per non-empty pixel whose prediction decodes to a valid box.
pub fn proposals(model: &Model, input: &SceneInput) -> Result<Vec<Proposal<f64>>> {
    let pred = model.predict(input)?;
    let img = &input.image;
    let mut out = Vec::new();
    for (r, c) in img.occupied() {
        let k = r * img.width() + c;
        if let Ok(bbox) = decode(&img.point(r, c), &pred.target(k)) {
            out.push(Proposal {
                bbox,
                score: pred.scores[k],
            });
        }
    }
    Ok(out)
}

pub fn suppress(props: &[Proposal<f64>], nms: &WnmsConfig, weighted: bool) -> Vec<Proposal<f64>> {
    if weighted {
        weighted_nms(props, nms)
    } else {
        standard_nms(props, nms)
    }
}

pub fn detect(model: &Model, input: &SceneInput, nms: &WnmsConfig, weighted: bool) -> Result<Vec<Proposal<f64>>> {
    Ok(suppress(&proposals(model, input)?, nms, weighted))
}

/// Serialized parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    pub params: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            fingerprint: model.config.fingerprint(),
            config: model.config,
            norm: model.norm,
            params: model
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model. With `expected`, the stored architecture must match it.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<Model> {
        if self.fingerprint != self.config.fingerprint() {
            return Err(Error::contract(format!(
                "checkpoint fingerprint {} does not match its config ({})",
                self.fingerprint,
                self.config.fingerprint()
            )));
        }
        if let Some(e) = expected {
            if e != &self.config {
                return Err(Error::contract(format!(
                    "checkpoint config {} does not match the requested config {}",
                    self.fingerprint,
                    e.fingerprint()
                )));
            }
        }
        let mut model = Model::zeros(self.config)?;
        model.norm = self.norm;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model needs {}",
                self.params.len(),
                names.len()
            )));
        }
        for ((name, slot), stored) in names.iter().zip(model.params_mut()).zip(&self.params) {
            if &stored.name != name {
                return Err(Error::contract(format!(
                    "checkpoint tensor {} where {name} was expected",
                    stored.name
                )));
            }
            if stored.shape != slot.shape() {
                return Err(Error::shape("checkpoint tensor", &stored.shape, slot.shape()));
            }
            *slot = Tensor::new(stored.shape.clone(), stored.data.clone())?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::io::parse_json(text)
    }
}

/// Outcome of the full train → infer → evaluate loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train: TrainReport,
    pub weighted: ApReport,
    pub standard: ApReport,
    pub weighted_detections: usize,
    pub standard_detections: usize,
}

/// Trains on `cfg.train.train_scenes` scenes, then evaluates weighted and
/// standard NMS on the same proposals of `eval_count` held-out scenes drawn
/// from `eval_seed` onward.
pub fn run_experiment(
    cfg: &PipelineConfig,
    eval_seed: u64,
    eval_count: usize,
    on_step: impl FnMut(&LossRecord),
) -> Result<(Model, ExperimentReport)> {
    cfg.validate()?;
    let t = &cfg.train;
    let train_range = t.scene_seed..t.scene_seed + t.train_scenes as u64;
    if (eval_seed..eval_seed + eval_count as u64).any(|s| train_range.contains(&s)) {
        return Err(Error::contract("held-out scene seeds overlap the training seeds"));
    }
    let rendered = make_scenes(&cfg.profile, t.scene_seed, t.train_scenes)?;
    let mut model = Model::random(cfg.model, t.seed)?;
    model.norm = FeatureNorm::fit(rendered.iter().map(|(img, _)| img));
    let scenes = rendered
        .into_iter()
        .map(|(img, boxes)| TrainingScene::new(img, boxes, &model, &cfg.rcp))
        .collect::<Result<Vec<_>>>()?;
    let train = train(&mut model, &scenes, cfg, on_step)?;
    drop(scenes);
    let mut wf = Vec::new();
    let mut sf = Vec::new();
    for (img, gts) in make_scenes(&cfg.profile, eval_seed, eval_count)? {
        let input = SceneInput::new(img, &model);
        let props = proposals(&model, &input)?;
        wf.push(Frame {
            dets: weighted_nms(&props, &cfg.nms),
            gts: gts.clone(),
        });
        sf.push(Frame {
            dets: standard_nms(&props, &cfg.nms),
            gts,
        });
    }
    let ecfg = cfg.eval_config();
    let count = |f: &[Frame<f64>]| f.iter().map(|x| x.dets.len()).sum();
    let report = ExperimentReport {
        train,
        weighted: evaluate(&wf, &ecfg),
        standard: evaluate(&sf, &ecfg),
        weighted_detections: count(&wf),
        standard_detections: count(&sf),
    };
    Ok((model, report))
}
