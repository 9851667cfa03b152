//! Experiment configuration in a small INI dialect.
//!
//! ```text
//! file    := line*
//! line    := ws (comment | section | pair)? ws '\n'
//! comment := ('#' | ';') any*
//! section := '[' name ']'
//! pair    := key ws '=' ws value
//! value   := scalar | scalar (',' scalar)*
//! ```
//!
//! Sections `[data]`, `[pretrain]`, `[finetune]`, `[eval]` and `[sweep]`
//! must all appear (possibly empty); keys left out take their defaults.
//! Unknown sections or keys, repeated keys and unparsable values are errors.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::finetune::{InferMode, Task, TrainConfig, TTA_RATIOS};
use crate::nets::{FreezeDirection, FreezeSpec, ViTConfig};
use crate::pretrain::{PretrainConfig, PretrainMode};

pub const SECTIONS: [&str; 5] = ["data", "pretrain", "finetune", "eval", "sweep"];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// `whole`, `sliding` or `tta`.
    pub mode: String,
    pub stride: usize,
    pub ratios: Vec<f64>,
    pub flip: bool,
    pub corruptions: Vec<String>,
    /// Validation scenes per domain used by the corruption suite.
    pub corrupt_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: "whole".into(),
            stride: 43,
            ratios: TTA_RATIOS.to_vec(),
            flip: true,
            corruptions: crate::augment::CORRUPTION_TYPES.iter().map(|t| t.name().to_string()).collect(),
            corrupt_samples: 48,
        }
    }
}

impl EvalConfig {
    pub fn infer_mode(&self, crop: usize) -> Result<InferMode> {
        match self.mode.as_str() {
            "whole" => Ok(InferMode::Whole),
            "sliding" => Ok(InferMode::Sliding { crop, stride: self.stride }),
            "tta" => Ok(InferMode::Tta {
                ratios: self.ratios.clone(),
                flip: self.flip,
                crop,
                stride: self.stride,
            }),
            m => Err(Error::Config(format!("unknown eval mode {m:?}; expected whole, sliding or tta"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub init_modes: Vec<PretrainMode>,
    pub freeze_ks: Vec<usize>,
    pub lemma_p: Vec<f64>,
    pub lemma_noise: Vec<f64>,
    pub lemma_n: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![0, 1, 2],
            init_modes: vec![PretrainMode::VlContrastive, PretrainMode::SupervisedCls, PretrainMode::RandomInit],
            freeze_ks: (0..=8).collect(),
            lemma_p: vec![0.5, 0.8, 0.95, 1.0],
            lemma_noise: vec![0.0, 0.1, 0.3, 1.0],
            lemma_n: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vit = ViTConfig::micro();
        ExperimentConfig {
            data: DatasetConfig::default(),
            pretrain: PretrainConfig {
                vit: vit.clone(),
                ..PretrainConfig::default()
            },
            finetune: TrainConfig::new(Task::Segmentation, vit),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_scalar<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_scalar(section, key, v)).collect()
}

fn model_name(vit: &ViTConfig) -> String {
    for name in ["micro", "small", "base"] {
        if ViTConfig::preset(name).ok().as_ref() == Some(vit) {
            return name.into();
        }
    }
    "custom".into()
}

impl ExperimentConfig {
    /// Every `(section, key, value)` in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let d = &self.data;
        let p = &self.pretrain;
        let f = &self.finetune;
        let e = &self.eval;
        let s = &self.sweep;
        let priors = d.class_priors.as_deref().map(list).unwrap_or_default();
        vec![
            ("data", "seed", d.seed.to_string()),
            ("data", "n_train", d.n_train.to_string()),
            ("data", "n_val", d.n_val.to_string()),
            ("data", "n_pretrain", d.n_pretrain.to_string()),
            ("data", "k_targets", d.k_targets.to_string()),
            ("data", "pretrain_styles", d.pretrain_styles.to_string()),
            ("data", "caption_p", d.caption_p.to_string()),
            ("data", "max_objects", d.max_objects.to_string()),
            ("data", "image_size", d.image_size.to_string()),
            ("data", "class_priors", priors),
            ("pretrain", "model", model_name(&p.vit)),
            ("pretrain", "mode", p.mode.name().to_string()),
            ("pretrain", "temperature", p.temperature.to_string()),
            ("pretrain", "mask_ratio", p.mask_ratio.to_string()),
            ("pretrain", "iterations", p.iterations.to_string()),
            ("pretrain", "batch_size", p.batch_size.to_string()),
            ("pretrain", "lr", p.lr.to_string()),
            ("pretrain", "warmup", p.warmup.to_string()),
            ("pretrain", "weight_decay", p.weight_decay.to_string()),
            ("finetune", "task", f.task.name().to_string()),
            ("finetune", "iterations", f.iterations.to_string()),
            ("finetune", "batch_size", f.batch_size.to_string()),
            ("finetune", "crop", f.crop.to_string()),
            ("finetune", "lambda_ce", f.weights.ce.to_string()),
            ("finetune", "lambda_bce", f.weights.bce.to_string()),
            ("finetune", "lambda_dice", f.weights.dice.to_string()),
            ("finetune", "det_ce", f.det_weights.ce.to_string()),
            ("finetune", "det_l1", f.det_weights.l1.to_string()),
            ("finetune", "det_iou", f.det_weights.iou.to_string()),
            ("finetune", "lr", f.lr.to_string()),
            ("finetune", "backbone_lr_factor", f.backbone_lr_factor.to_string()),
            ("finetune", "layer_decay", f.layer_decay.to_string()),
            ("finetune", "weight_decay", f.weight_decay.to_string()),
            ("finetune", "warmup", f.warmup.to_string()),
            ("finetune", "freeze_k", f.freeze.k.to_string()),
            ("finetune", "freeze_direction", f.freeze.direction.name().to_string()),
            ("finetune", "recipe", f.recipe.clone()),
            ("finetune", "num_queries", f.decoder.num_queries.to_string()),
            ("eval", "mode", e.mode.clone()),
            ("eval", "stride", e.stride.to_string()),
            ("eval", "ratios", list(&e.ratios)),
            ("eval", "flip", e.flip.to_string()),
            ("eval", "corruptions", e.corruptions.join(",")),
            ("eval", "corrupt_samples", e.corrupt_samples.to_string()),
            ("sweep", "seeds", list(&s.seeds)),
            ("sweep", "init_modes", s.init_modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")),
            ("sweep", "freeze_ks", list(&s.freeze_ks)),
            ("sweep", "lemma_p", list(&s.lemma_p)),
            ("sweep", "lemma_noise", list(&s.lemma_noise)),
            ("sweep", "lemma_n", s.lemma_n.to_string()),
        ]
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let sc = section;
        match (section, key) {
            ("data", "seed") => self.data.seed = parse_scalar(sc, key, v)?,
            ("data", "n_train") => self.data.n_train = parse_scalar(sc, key, v)?,
            ("data", "n_val") => self.data.n_val = parse_scalar(sc, key, v)?,
            ("data", "n_pretrain") => self.data.n_pretrain = parse_scalar(sc, key, v)?,
            ("data", "k_targets") => self.data.k_targets = parse_scalar(sc, key, v)?,
            ("data", "pretrain_styles") => self.data.pretrain_styles = parse_scalar(sc, key, v)?,
            ("data", "caption_p") => self.data.caption_p = parse_scalar(sc, key, v)?,
            ("data", "max_objects") => self.data.max_objects = parse_scalar(sc, key, v)?,
            ("data", "image_size") => self.data.image_size = parse_scalar(sc, key, v)?,
            ("data", "class_priors") => {
                let p: Vec<f64> = parse_list(sc, key, v)?;
                self.data.class_priors = if p.is_empty() { None } else { Some(p) };
            }
            ("pretrain", "model") => {
                let vit = ViTConfig::preset(v.trim()).map_err(|e| Error::Config(format!("[pretrain] model: {e}")))?;
                self.pretrain.vit = vit.clone();
                self.finetune.vit = vit;
            }
            ("pretrain", "mode") => self.pretrain.mode = PretrainMode::parse(v.trim()).map_err(|e| Error::Config(e.to_string()))?,
            ("pretrain", "temperature") => self.pretrain.temperature = parse_scalar(sc, key, v)?,
            ("pretrain", "mask_ratio") => self.pretrain.mask_ratio = parse_scalar(sc, key, v)?,
            ("pretrain", "iterations") => self.pretrain.iterations = parse_scalar(sc, key, v)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = parse_scalar(sc, key, v)?,
            ("pretrain", "lr") => self.pretrain.lr = parse_scalar(sc, key, v)?,
            ("pretrain", "warmup") => self.pretrain.warmup = parse_scalar(sc, key, v)?,
            ("pretrain", "weight_decay") => self.pretrain.weight_decay = parse_scalar(sc, key, v)?,
            ("finetune", "task") => self.finetune.task = Task::parse(v.trim())?,
            ("finetune", "iterations") => self.finetune.iterations = parse_scalar(sc, key, v)?,
            ("finetune", "batch_size") => self.finetune.batch_size = parse_scalar(sc, key, v)?,
            ("finetune", "crop") => self.finetune.crop = parse_scalar(sc, key, v)?,
            ("finetune", "lambda_ce") => self.finetune.weights.ce = parse_scalar(sc, key, v)?,
            ("finetune", "lambda_bce") => self.finetune.weights.bce = parse_scalar(sc, key, v)?,
            ("finetune", "lambda_dice") => self.finetune.weights.dice = parse_scalar(sc, key, v)?,
            ("finetune", "det_ce") => self.finetune.det_weights.ce = parse_scalar(sc, key, v)?,
            ("finetune", "det_l1") => self.finetune.det_weights.l1 = parse_scalar(sc, key, v)?,
            ("finetune", "det_iou") => self.finetune.det_weights.iou = parse_scalar(sc, key, v)?,
            ("finetune", "lr") => self.finetune.lr = parse_scalar(sc, key, v)?,
            ("finetune", "backbone_lr_factor") => self.finetune.backbone_lr_factor = parse_scalar(sc, key, v)?,
            ("finetune", "layer_decay") => self.finetune.layer_decay = parse_scalar(sc, key, v)?,
            ("finetune", "weight_decay") => self.finetune.weight_decay = parse_scalar(sc, key, v)?,
            ("finetune", "warmup") => self.finetune.warmup = parse_scalar(sc, key, v)?,
            ("finetune", "freeze_k") => self.finetune.freeze.k = parse_scalar(sc, key, v)?,
            ("finetune", "freeze_direction") => {
                self.finetune.freeze.direction = FreezeDirection::parse(v.trim()).map_err(|e| Error::Config(e.to_string()))?
            }
            ("finetune", "recipe") => self.finetune.recipe = v.trim().to_string(),
            ("finetune", "num_queries") => self.finetune.decoder.num_queries = parse_scalar(sc, key, v)?,
            ("eval", "mode") => self.eval.mode = v.trim().to_string(),
            ("eval", "stride") => self.eval.stride = parse_scalar(sc, key, v)?,
            ("eval", "ratios") => self.eval.ratios = parse_list(sc, key, v)?,
            ("eval", "flip") => self.eval.flip = parse_scalar(sc, key, v)?,
            ("eval", "corruptions") => self.eval.corruptions = parse_list(sc, key, v)?,
            ("eval", "corrupt_samples") => self.eval.corrupt_samples = parse_scalar(sc, key, v)?,
            ("sweep", "seeds") => self.sweep.seeds = parse_list(sc, key, v)?,
            ("sweep", "init_modes") => {
                self.sweep.init_modes = v
                    .split(',')
                    .map(|m| PretrainMode::parse(m.trim()).map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            ("sweep", "freeze_ks") => self.sweep.freeze_ks = parse_list(sc, key, v)?,
            ("sweep", "lemma_p") => self.sweep.lemma_p = parse_list(sc, key, v)?,
            ("sweep", "lemma_noise") => self.sweep.lemma_noise = parse_list(sc, key, v)?,
            ("sweep", "lemma_n") => self.sweep.lemma_n = parse_scalar(sc, key, v)?,
            _ => return Err(unknown_key(section, key)),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        let mut seen_sections = BTreeSet::new();
        let mut seen_keys = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| at(format!("unterminated section header {line:?}")))?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section [{name}]; valid sections: {}", SECTIONS.join(", "))));
                }
                if !seen_sections.insert(name.to_string()) {
                    return Err(at(format!("section [{name}] appears twice")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let sec = section.as_deref().ok_or_else(|| at(format!("key {key:?} outside any section")))?;
            if !seen_keys.insert((sec.to_string(), key.to_string())) {
                return Err(at(format!("[{sec}] {key} set twice")));
            }
            cfg.set(sec, key, value.trim()).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        if let Some(missing) = SECTIONS.iter().find(|s| !seen_sections.contains(**s)) {
            return Err(Error::Config(format!("missing required section [{missing}]")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn write(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, value) in self.entries() {
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                current = sec;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfgerr = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.data.validate().map_err(cfgerr)?;
        self.pretrain.validate().map_err(cfgerr)?;
        self.finetune.validate().map_err(cfgerr)?;
        if self.data.image_size != self.finetune.vit.image_size {
            return Err(Error::Config(format!(
                "[data] image_size {} differs from the encoder input size {}",
                self.data.image_size, self.finetune.vit.image_size
            )));
        }
        self.eval.infer_mode(self.finetune.crop)?;
        for c in &self.eval.corruptions {
            crate::augment::CorruptionType::parse(c).map_err(cfgerr)?;
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("[sweep] seeds must not be empty".into()));
        }
        if let Some(k) = self.sweep.freeze_ks.iter().find(|&&k| k > self.finetune.vit.depth) {
            return Err(Error::Config(format!("[sweep] freeze_ks entry {k} exceeds depth {}", self.finetune.vit.depth)));
        }
        Ok(())
    }

    /// Pre-training config for one seed and mode.
    pub fn pretrain_for(&self, seed: u64, mode: PretrainMode) -> PretrainConfig {
        PretrainConfig {
            seed,
            mode,
            ..self.pretrain.clone()
        }
    }

    /// Fine-tuning config for one seed and freeze setting.
    pub fn finetune_for(&self, seed: u64, freeze: FreezeSpec) -> TrainConfig {
        TrainConfig {
            seed,
            freeze,
            ..self.finetune.clone()
        }
    }

    pub fn data_for(&self, seed: u64) -> DatasetConfig {
        DatasetConfig { seed, ..self.data.clone() }
    }
}

fn unknown_key(section: &str, key: &str) -> Error {
    let defaults = ExperimentConfig::default();
    let valid: Vec<&str> = defaults.entries().into_iter().filter(|(s, _, _)| *s == section).map(|(_, k, _)| k).collect();
    let nearest = valid
        .iter()
        .min_by_key(|k| strsim::levenshtein(k, key))
        .map(|k| format!("; did you mean `{k}`?"))
        .unwrap_or_default();
    Error::Config(format!("unknown key `{key}` in [{section}]{nearest}"))
}
