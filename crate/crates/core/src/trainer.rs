//! Single-pair training loop with the randomized sub-loss schedule, plus
//! checkpoint persistence and instance-norm-only retraining.
//!
//! Each iteration draws one of the six sub-losses (uniformly, without
//! replacement within blocks of six, so every loss is visited exactly once
//! every six steps), builds just that term's graph, and applies one
//! adaptive-moment step to whatever the mode marks trainable. Keeping a
//! single term per graph bounds memory; all parameters that term touches
//! are updated together.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image_io::ImageBuffer;
use crate::losses::{LossContext, LossWeights, SubLossId};
use crate::optim::{Adam, AdamConfig};
use crate::regions::{LabelMap, RegionMaskSet};
use crate::rng::Rng;
use crate::stylenet::{build_pair, NetConfig, ParamKey, StyleNetworkPair, StyleTag, Trainable};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_KIND: &str = "cyclestyle-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    InstanceNormOnly,
}

impl TrainMode {
    pub fn trainable(self) -> Trainable {
        match self {
            TrainMode::Full => Trainable::All,
            TrainMode::InstanceNormOnly => Trainable::InstanceNormOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::AdaptiveMoment,
            lr: 1e-3,
            betas: (0.9, 0.999),
        }
    }
}

impl OptimizerSpec {
    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub steps: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub mode: TrainMode,
    pub log_every: usize,
    pub net: NetConfig,
    /// Interim checkpoint cadence, if an autosave path is supplied.
    pub autosave_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            steps: 3000,
            optimizer: OptimizerSpec::default(),
            seed: 0,
            mode: TrainMode::Full,
            log_every: 50,
            net: NetConfig::default(),
            autosave_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        self.optimizer.adam_config().validate()
    }
}

/// Draws sub-losses uniformly without replacement: every aligned block of
/// six draws is a permutation of all six ids.
#[derive(Clone, Debug)]
pub struct SubLossSchedule {
    rng: Rng,
    current_block: [SubLossId; 6],
    cursor: usize,
}

impl SubLossSchedule {
    pub fn new(seed: u64) -> Self {
        let mut s = SubLossSchedule {
            rng: Rng::new(seed ^ 0x5b10_55c5),
            current_block: SubLossId::ALL,
            cursor: 6,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.current_block = SubLossId::ALL;
        self.rng.shuffle(&mut self.current_block);
        self.cursor = 0;
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> SubLossId {
        if self.cursor >= 6 {
            self.refill();
        }
        let id = self.current_block[self.cursor];
        self.cursor += 1;
        id
    }
}

/// Training metadata serialized alongside the parameter tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub checkpoint_version: u32,
    pub seed: u64,
    pub steps_completed: usize,
    pub region_labels: Vec<u32>,
    pub backbone_fingerprint: String,
    pub net: NetConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerSpec,
    pub mode: TrainMode,
}

/// Parameters plus the training pair: the unit of persistence. Everything
/// needed to stylize, evaluate, or retrain.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub pair: StyleNetworkPair<f32>,
    pub image_a: ImageBuffer,
    pub image_b: ImageBuffer,
    pub masks: RegionMaskSet,
}

fn key_path(key: &ParamKey, single_trunk: bool) -> String {
    match key {
        ParamKey::TrunkKernel { trunk, conv } => {
            if single_trunk {
                format!("trunk/layer/{}/kernel", conv + 1)
            } else {
                format!("trunk/{trunk}/layer/{}/kernel", conv + 1)
            }
        }
        ParamKey::TrunkBias { trunk, conv } => {
            if single_trunk {
                format!("trunk/layer/{}/bias", conv + 1)
            } else {
                format!("trunk/{trunk}/layer/{}/bias", conv + 1)
            }
        }
        // Instance norms sit on convs 1..=15; layer index here is the
        // 1-based conv the norm follows.
        ParamKey::InScale {
            style,
            region,
            layer,
        } => format!(
            "style/{}/region/{region}/layer/{}/scale",
            style.as_str(),
            layer + 1
        ),
        ParamKey::InShift {
            style,
            region,
            layer,
        } => format!(
            "style/{}/region/{region}/layer/{}/shift",
            style.as_str(),
            layer + 1
        ),
    }
}

fn label_map_tensor(map: &LabelMap) -> Tensor<f32> {
    Tensor::from_vec(
        &[map.height(), map.width()],
        map.labels().iter().map(|l| *l as f32).collect(),
    )
}

fn tensor_label_map(t: &Tensor<f32>) -> Result<LabelMap> {
    if t.shape().len() != 2 {
        return Err(Error::Integrity("label map tensor must be rank 2".into()));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let labels = t
        .data()
        .iter()
        .map(|v| {
            if *v < 0.0 || v.fract() != 0.0 {
                Err(Error::Integrity(format!("label value {v} is not a label")))
            } else {
                Ok(*v as u32)
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    LabelMap::new(h, w, labels)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.manifest)
            .map_err(|e| Error::Schema(format!("manifest encode: {e}")))?;
        let mut ar = TensorArchive::new(meta);
        let single = self.pair.trunk_count() == 1;
        for key in self.pair.all_keys() {
            ar.insert(key_path(&key, single), self.pair.param(key).clone());
        }
        ar.insert("input/image_a", self.image_a.to_tensor());
        ar.insert("input/image_b", self.image_b.to_tensor());
        ar.insert(
            "input/labels_a",
            label_map_tensor(self.masks.side(StyleTag::A)),
        );
        ar.insert(
            "input/labels_b",
            label_map_tensor(self.masks.side(StyleTag::B)),
        );
        ar.save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ar = TensorArchive::load(path)?;
        let manifest: CheckpointManifest = serde_json::from_value(ar.meta.clone())
            .map_err(|e| Error::Schema(format!("checkpoint manifest: {e}")))?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(Error::Schema(format!(
                "not a checkpoint (kind {:?})",
                manifest.kind
            )));
        }
        if manifest.checkpoint_version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint v{}, this build reads v{CHECKPOINT_VERSION}",
                manifest.checkpoint_version
            )));
        }
        let mut pair: StyleNetworkPair<f32> =
            build_pair(&manifest.net, &manifest.region_labels, manifest.seed)?;
        let single = pair.trunk_count() == 1;
        for key in pair.all_keys() {
            let path = key_path(&key, single);
            let tensor = ar
                .get(&path)
                .ok_or_else(|| Error::Integrity(format!("missing tensor {path:?}")))?;
            if tensor.shape() != pair.param(key).shape() {
                return Err(Error::Integrity(format!(
                    "tensor {path:?}: shape {:?}, expected {:?}",
                    tensor.shape(),
                    pair.param(key).shape()
                )));
            }
            *pair.param_mut(key) = tensor.clone();
        }
        let image_a = ImageBuffer::from_tensor(ar.require("input/image_a")?)?;
        let image_b = ImageBuffer::from_tensor(ar.require("input/image_b")?)?;
        let labels_a = tensor_label_map(ar.require("input/labels_a")?)?;
        let labels_b = tensor_label_map(ar.require("input/labels_b")?)?;
        let masks = RegionMaskSet::from_label_maps(labels_a, labels_b)?;
        Ok(Checkpoint {
            manifest,
            pair,
            image_a,
            image_b,
            masks,
        })
    }

    /// The fingerprint is advisory: a mismatch logs a warning and the caller
    /// proceeds.
    pub fn check_backbone(&self, backbone: &Backbone<f32>) -> bool {
        let ok = self.manifest.backbone_fingerprint == backbone.fingerprint();
        if !ok {
            log::warn!(
                "checkpoint was trained against backbone {} but {} is loaded; \
                 perceptual losses will differ",
                self.manifest.backbone_fingerprint,
                backbone.fingerprint()
            );
        }
        ok
    }
}

/// Out-of-band knobs for a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// JSON-lines sink for step records.
    pub log: Option<&'a mut dyn Write>,
    /// Where interim checkpoints go, if anywhere.
    pub autosave_path: Option<&'a Path>,
    /// Resume training from an existing checkpoint's parameters.
    pub resume: Option<&'a Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Complete loss evaluated exactly before the first step.
    pub initial_total: f64,
    /// Complete loss evaluated exactly after the last step.
    pub final_total: f64,
    /// λ-weighted sub-loss values, one per step.
    pub step_values: Vec<f64>,
}

impl TrainOutcome {
    /// Sum of the first aligned six-step block of λ-weighted sub-losses; an
    /// estimate of the complete loss early in training.
    pub fn first_block_sum(&self) -> f64 {
        self.step_values.iter().take(6).sum()
    }

    pub fn last_block_sum(&self) -> f64 {
        let n = self.step_values.len();
        self.step_values[n.saturating_sub(6)..].iter().sum()
    }
}

fn write_log(
    log: &mut Option<&mut dyn Write>,
    step: usize,
    subloss_id: &str,
    value: f64,
    lr: f64,
    wall_ms: f64,
) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::json!({
            "step": step,
            "subloss_id": subloss_id,
            "value": value,
            "lr": lr,
            "wall_ms": wall_ms,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Trains a pair on two photos. Builds a fresh pair unless `opts.resume`
/// carries one; `instance_norm_only` mode requires a resume checkpoint.
pub fn train_pair(
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    masks: &RegionMaskSet,
    cfg: &TrainConfig,
    backbone: &Backbone<f32>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    x_a.validate()?;
    x_b.validate()?;
    let mut pair = match opts.resume {
        Some(ckpt) => {
            if ckpt.manifest.region_labels != masks.correspondence() {
                return Err(Error::validation(format!(
                    "checkpoint regions {:?} do not match mask regions {:?}; \
                     retrain for a new pair instead",
                    ckpt.manifest.region_labels,
                    masks.correspondence()
                )));
            }
            ckpt.pair.clone()
        }
        None => {
            if cfg.mode == TrainMode::InstanceNormOnly {
                return Err(Error::validation(
                    "instance_norm_only mode requires an initial checkpoint",
                ));
            }
            build_pair(&cfg.net, masks.correspondence(), cfg.seed)?
        }
    };
    let resume = opts.resume.take();
    let steps_before = resume.map(|c| c.manifest.steps_completed).unwrap_or(0);
    run_training(
        &mut pair,
        x_a,
        x_b,
        masks,
        cfg,
        backbone,
        steps_before,
        &mut opts,
    )
}

/// Adapts a trained trunk to a new image pair by re-initializing the
/// instance-norm sets for the new regions and training only those.
pub fn retrain_for_new_style(
    base: &Checkpoint,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    masks: &RegionMaskSet,
    cfg: &TrainConfig,
    backbone: &Backbone<f32>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::InstanceNormOnly {
        return Err(Error::validation(
            "retraining for a new style runs in instance_norm_only mode",
        ));
    }
    let mut pair = base.pair.clone();
    pair.reset_in_params(masks.correspondence())?;
    run_training(&mut pair, x_a, x_b, masks, cfg, backbone, 0, &mut opts)
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    pair: &mut StyleNetworkPair<f32>,
    x_a: &ImageBuffer,
    x_b: &ImageBuffer,
    masks: &RegionMaskSet,
    cfg: &TrainConfig,
    backbone: &Backbone<f32>,
    steps_before: usize,
    opts: &mut TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let ctx = LossContext::new(backbone, x_a, x_b, masks, cfg.weights)?;
    ctx.check_pair(pair)?;
    let trainable = cfg.mode.trainable();
    let mut schedule = SubLossSchedule::new(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer.adam_config());
    let lr = cfg.optimizer.lr;

    let make_checkpoint = |pair: &StyleNetworkPair<f32>, steps_done: usize| Checkpoint {
        manifest: CheckpointManifest {
            kind: CHECKPOINT_KIND.to_string(),
            checkpoint_version: CHECKPOINT_VERSION,
            seed: cfg.seed,
            steps_completed: steps_done,
            region_labels: masks.correspondence().to_vec(),
            backbone_fingerprint: backbone.fingerprint().to_string(),
            net: pair.config().clone(),
            weights: cfg.weights,
            optimizer: cfg.optimizer,
            mode: cfg.mode,
        },
        pair: pair.clone(),
        image_a: x_a.clone(),
        image_b: x_b.clone(),
        masks: masks.clone(),
    };

    let initial_total = ctx.eval_total_loss(pair)?;
    if !initial_total.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: format!("total loss {initial_total}"),
        });
    }
    write_log(&mut opts.log, 0, "total", initial_total, lr, 0.0)?;

    let mut step_values = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let id = schedule.next();
        let mut g = Graph::new();
        let binding = ctx.bind(&mut g, pair, trainable);
        let node = ctx.build_sub_loss(&mut g, pair, &binding, id)?;
        let value = g.value(node).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("{} = {value}", id.as_str()),
            });
        }
        let grads = g.backward(node);
        let mut updates = Vec::new();
        for (key, nid) in binding.trainable_nodes() {
            if let Some(grad) = grads.get(*nid) {
                updates.push((*key, grad.clone()));
            }
        }
        adam.step(pair, &updates);
        step_values.push(id.weight(&cfg.weights) * value);

        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            write_log(&mut opts.log, step, id.as_str(), value, lr, wall_ms)?;
        }
        if let Some(path) = opts.autosave_path {
            if cfg.autosave_every > 0 && step % cfg.autosave_every == 0 && step != cfg.steps {
                make_checkpoint(pair, steps_before + step).save(path)?;
            }
        }
    }

    let final_total = ctx.eval_total_loss(pair)?;
    write_log(&mut opts.log, cfg.steps, "total", final_total, lr, 0.0)?;

    // In instance-norm-only mode the optimizer must never have touched a
    // convolution tensor.
    debug_assert!(cfg.mode == TrainMode::Full || adam.tracked_keys().iter().all(|k| !k.is_conv()));

    Ok(TrainOutcome {
        checkpoint: make_checkpoint(pair, steps_before + cfg.steps),
        initial_total,
        final_total,
        step_values,
    })
}
