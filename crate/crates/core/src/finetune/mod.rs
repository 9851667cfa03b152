//! Fine-tuning on the source domain: set-prediction losses, optimizer
//! parameter groups, training loop and inference.

mod hungarian;
mod infer;
mod loss;

pub use hungarian::{hungarian, Assignment};
pub use infer::*;
pub use loss::*;

use std::fmt::Write as _;
use std::path::Path;

use crate::augment::{AugRecipe, AugSample, MixerSet, MIXER_COUNT};
use crate::datagen::{SampleRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nets::{
    block_of, det_forward, freeze, init_det_decoder, init_seg_decoder, init_vit, patchify, seg_forward, vision_forward_patches, Checkpoint,
    DecoderConfig, FreezeSpec, ParamSet, ViTConfig,
};
use crate::image::Image;
use crate::numerics::{mix_seed, rng_for, AdamWConfig, Graph, LrSchedule};
use crate::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Detection,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(Task::Segmentation),
            "det" | "detection" => Ok(Task::Detection),
            _ => Err(Error::Config(format!("unknown task {s:?}; expected seg or det"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Detection => "det",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            Task::Segmentation => "miou",
            Task::Detection => "map50",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub iterations: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub weights: LossWeights,
    pub det_weights: DetWeights,
    pub lr: f64,
    /// Backbone learning-rate multiplier for segmentation.
    pub backbone_lr_factor: f64,
    /// Per-block learning-rate decay for detection.
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub freeze: FreezeSpec,
    pub recipe: String,
    pub seed: u64,
    pub vit: ViTConfig,
    pub decoder: DecoderConfig,
}

impl TrainConfig {
    pub fn new(task: Task, vit: ViTConfig) -> Self {
        TrainConfig {
            task,
            iterations: 800,
            batch_size: 8,
            crop: vit.image_size,
            weights: LossWeights::default(),
            det_weights: DetWeights::default(),
            lr: 1e-3,
            backbone_lr_factor: 0.1,
            layer_decay: 0.7,
            weight_decay: 0.05,
            warmup: 30,
            freeze: FreezeSpec::default(),
            recipe: match task {
                Task::Segmentation => "base".into(),
                Task::Detection => "det".into(),
            },
            seed: 0,
            vit,
            decoder: DecoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.decoder.validate()?;
        let w = &self.weights;
        let d = &self.det_weights;
        if [w.ce, w.bce, w.dice, d.ce, d.l1, d.iou].iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.backbone_lr_factor > 0.0 && self.backbone_lr_factor <= 1.0) {
            return Err(Error::Config(format!("backbone_lr_factor must lie in (0, 1], got {}", self.backbone_lr_factor)));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer_decay must lie in (0, 1], got {}", self.layer_decay)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be > 0 and weight_decay ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.crop != self.vit.image_size {
            return Err(Error::Config(format!("crop {} must equal the encoder input size {}", self.crop, self.vit.image_size)));
        }
        if self.decoder.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("decoder must predict {NUM_CLASSES} classes")));
        }
        AugRecipe::named(&self.recipe, self.crop)?;
        Ok(())
    }
}

/// Learning-rate multiplier of each parameter.
///
/// Segmentation scales every encoder tensor by `backbone_lr_factor`.
/// Detection gives block `i` the factor `decay^(depth − i)`, the patch and
/// position embeddings `decay^(depth + 1)` and everything else 1.
pub fn lr_multipliers(names: &[String], cfg: &TrainConfig) -> Vec<f64> {
    let depth = cfg.vit.depth as i32;
    names
        .iter()
        .map(|n| match cfg.task {
            Task::Segmentation if n.starts_with("vit.") => cfg.backbone_lr_factor,
            Task::Segmentation => 1.0,
            Task::Detection => match block_of(n) {
                Some(i) => cfg.layer_decay.powi(depth - i as i32),
                None if matches!(n.as_str(), "vit.patch.w" | "vit.patch.b" | "vit.pos" | "vit.mask_token") => cfg.layer_decay.powi(depth + 1),
                None => 1.0,
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub total_loss: f64,
    pub ce: f64,
    /// Mask BCE for segmentation, box L1 for detection.
    pub bce: f64,
    /// Mask dice for segmentation, `1 − IoU` for detection.
    pub dice: f64,
    pub lr_head: f64,
    /// Learning rate of the deepest encoder block.
    pub lr_backbone: f64,
}

pub const HISTORY_HEADER: &str = "iter,total_loss,ce,bce,dice,lr_head,lr_backbone";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{:.8},{:.6e},{:.6e}",
            r.iter, r.total_loss, r.ce, r.bce, r.dice, r.lr_head, r.lr_backbone
        );
    }
    s
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Encoder tensors of `init` plus a freshly initialized task decoder.
pub fn init_model(cfg: &TrainConfig, init: &Checkpoint) -> Result<ParamSet> {
    init.check_encoder(&cfg.vit)?;
    let mut reference = ParamSet::new();
    init_vit(&cfg.vit, 0, &mut reference)?;
    let mut params = ParamSet::new();
    for (name, t) in reference.iter() {
        let src = init
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("initial checkpoint lacks encoder tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Config(format!("encoder tensor {name} has shape {:?}, expected {:?}", src.shape(), t.shape())));
        }
        params.insert(name, src.clone());
    }
    let seed = mix_seed(cfg.seed, 0xDEC0);
    match cfg.task {
        Task::Segmentation => init_seg_decoder(&cfg.vit, &cfg.decoder, seed, &mut params)?,
        Task::Detection => init_det_decoder(&cfg.vit, &cfg.decoder, seed, &mut params)?,
    }
    Ok(params)
}

fn to_sample(r: &SampleRecord) -> AugSample {
    AugSample {
        image: r.image.to_f64(),
        mask: r.mask.clone(),
        boxes: r.boxes.clone(),
    }
}

/// Augmented batch for one iteration. Each slot draws its sources and
/// augmentation randomness from its own `(seed, iteration, slot)` stream.
pub fn training_batch(cfg: &TrainConfig, recipe: &AugRecipe, mixers: Option<&MixerSet>, data: &[SampleRecord], iter: u64) -> Result<Vec<AugSample>> {
    (0..cfg.batch_size)
        .map(|slot| {
            let mut rng = rng_for(mix_seed(mix_seed(cfg.seed, 0xF1E7), iter), slot as u64);
            let inputs: Vec<AugSample> = (0..recipe.inputs_needed())
                .map(|_| to_sample(&data[rand::Rng::gen_range(&mut rng, 0..data.len())]))
                .collect();
            recipe.apply_with(&inputs, mixers, &mut rng)
        })
        .collect()
}

/// Fully fine-tune encoder and decoder on `data`; returns the last
/// checkpoint and the per-iteration history.
pub fn finetune_run(cfg: &TrainConfig, init: &Checkpoint, data: &[SampleRecord]) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("fine-tuning needs a non-empty dataset"));
    }
    let mut params = init_model(cfg, init)?;
    let mask = freeze(&params, cfg.vit.depth, cfg.freeze)?;
    let mult = lr_multipliers(params.names(), cfg);
    let head_i = params.names().iter().position(|n| !n.starts_with("vit.")).expect("decoder present");
    let deep = format!("vit.block{}.", cfg.vit.depth - 1);
    let back_i = params.names().iter().position(|n| n.starts_with(&deep)).expect("encoder present");
    let total = cfg.iterations.max(2);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup.clamp(1, total - 1), total)?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut trainer = Trainer::new(&params, adam, schedule, mult, &mask);
    let recipe = AugRecipe::named(&cfg.recipe, cfg.crop)?;
    let mixers = recipe
        .steps
        .iter()
        .any(|s| matches!(s.op, crate::augment::AugOp::PixMix(_)))
        .then(|| MixerSet::generate(MIXER_COUNT, cfg.vit.image_size, mix_seed(cfg.seed, 0x313)));
    let grid = cfg.vit.grid();
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for iter in 0..cfg.iterations {
        let batch = training_batch(cfg, &recipe, mixers.as_ref(), data, iter)?;
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let mut g = Graph::new();
        let p = trainer.bind(&mut g, &params);
        let patches = patchify(&images, &cfg.vit)?;
        let enc = vision_forward_patches(&mut g, &p, &cfg.vit, patches, None)?;
        let loss = match cfg.task {
            Task::Segmentation => {
                let out = seg_forward(&mut g, &p, &cfg.vit, &cfg.decoder, enc.tokens)?;
                let targets = batch
                    .iter()
                    .map(|s| SegTarget::from_mask(&s.mask, NUM_CLASSES, grid))
                    .collect::<Result<Vec<_>>>()?;
                m2f_loss(&mut g, out.class_logits, out.mask_low, &targets, grid, &cfg.weights)?
            }
            Task::Detection => {
                let out = det_forward(&mut g, &p, &cfg.vit, &cfg.decoder, enc.tokens)?;
                let targets: Vec<DetTarget> = batch.iter().map(|s| DetTarget::from_boxes(&s.boxes)).collect();
                det_loss(&mut g, out.class_logits, out.boxes, &targets, &cfg.det_weights)?
            }
        };
        let value = g.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("fine-tuning loss"));
        }
        let grads = g.backward(loss.total)?;
        history.push(HistoryRow {
            iter,
            total_loss: value,
            ce: loss.ce,
            bce: loss.second,
            dice: loss.third,
            lr_head: trainer.lr(head_i, iter)?,
            lr_backbone: trainer.lr(back_i, iter)?,
        });
        trainer.step(&mut params, &p, &grads, iter)?;
    }
    let mut ck = Checkpoint::new(params);
    ck.tag_encoder(&cfg.vit);
    Ok((ck, history))
}
