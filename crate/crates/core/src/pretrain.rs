//! Encoder pre-training paradigms: image–caption contrastive alignment,
//! dominant-class supervision and masked-patch reconstruction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::{SampleRecord, NUM_CLASSES, PAD};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{init_text, init_vit, linear, patchify, text_forward, vision_forward_patches, Bound, Checkpoint, Init, ParamSet, TextConfig, TrainMask, ViTConfig};
use crate::numerics::{mix_seed, rng_for, AdamWConfig, Graph, LrSchedule, Tensor, Var};
use crate::train::Trainer;

pub const TEMPERATURE_MIN: f64 = 1e-3;
pub const TEMPERATURE_MAX: f64 = 1.0;
const LOGIT_SCALE: &str = "clip.logit_scale";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainMode {
    VlContrastive,
    SupervisedCls,
    Mim,
    /// Masked reconstruction for the first half of the iterations, contrastive afterwards.
    MimThenVl,
    RandomInit,
}

impl PretrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vl-contrastive" | "vl" => Ok(Self::VlContrastive),
            "supervised-cls" | "supervised" => Ok(Self::SupervisedCls),
            "mim" => Ok(Self::Mim),
            "mim-then-vl" => Ok(Self::MimThenVl),
            "random-init" | "random" => Ok(Self::RandomInit),
            other => Err(Error::Config(format!(
                "unknown pre-training mode {other:?} (expected vl-contrastive, supervised-cls, mim, mim-then-vl or random-init)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::VlContrastive => "vl-contrastive",
            Self::SupervisedCls => "supervised-cls",
            Self::Mim => "mim",
            Self::MimThenVl => "mim-then-vl",
            Self::RandomInit => "random-init",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub vit: ViTConfig,
    pub text: TextConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: PretrainMode::VlContrastive,
            temperature: 0.07,
            mask_ratio: 0.4,
            iterations: 1000,
            batch_size: 32,
            seed: 0,
            lr: 1e-3,
            warmup: 40,
            weight_decay: 0.05,
            vit: ViTConfig::micro(),
            text: TextConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.vit.validate()?;
        self.text.validate(&self.vit)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,loss,lr,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.3}", r.iter, r.loss, r.lr, r.wall_ms);
    }
    s
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let (_, cols) = t.rows_cols();
    for (r, row) in t.data().chunks(cols.max(1)).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{what} row {r} has norm {n}, expected unit norm")));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over the `N×N` similarity matrix scaled by `scale = 1/τ`
/// (a scalar var so the temperature can be learned).
pub fn clip_loss_graph(g: &mut Graph, img: Var, txt: Var, scale: Var) -> Result<Var> {
    if g.shape(img) != g.shape(txt) || g.shape(img).len() != 2 || g.shape(img)[0] == 0 {
        return Err(Error::shape("clip_loss", format!("{:?} vs {:?}", g.shape(img), g.shape(txt))));
    }
    check_unit_rows(g, img, "image embedding")?;
    check_unit_rows(g, txt, "text embedding")?;
    let n = g.shape(img)[0];
    let targets: Vec<usize> = (0..n).collect();
    let sim = g.matmul_t(img, txt, false, true)?;
    let logits = g.scale_by(sim, scale)?;
    let i2t = g.cross_entropy(logits, &targets, None)?;
    let lt = g.transpose(logits)?;
    let t2i = g.cross_entropy(lt, &targets, None)?;
    let both = g.add(i2t, t2i)?;
    g.scale(both, 0.5)
}

/// Value-only contrastive loss at a fixed temperature.
pub fn clip_loss(img_emb: &Tensor, txt_emb: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let mut g = Graph::new();
    let i = g.constant(img_emb.clone());
    let t = g.constant(txt_emb.clone());
    let s = g.constant(Tensor::scalar(1.0 / tau));
    let l = clip_loss_graph(&mut g, i, t, s)?;
    Ok(g.value(l).item())
}

/// Cross-entropy of classifier logits `[B, S]` against dominant-class labels.
pub fn supervised_cls_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits)[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::invalid(format!("label {l} out of range for {s} classes")));
    }
    g.cross_entropy(logits, labels, None)
}

/// Mean squared error over the masked rows of a `[T, P]` patch matrix; zero
/// when nothing is masked.
pub fn mim_loss(g: &mut Graph, patches: &Tensor, patch_mask: &[bool], reconstruction: Var) -> Result<Var> {
    if patches.numel() == 0 {
        return Err(Error::invalid("mim_loss needs a non-empty image"));
    }
    let (rows, cols) = patches.rows_cols();
    if patch_mask.len() != rows || g.value(reconstruction).rows_cols() != (rows, cols) {
        return Err(Error::shape("mim_loss", format!("mask {} for {:?}", patch_mask.len(), patches.shape())));
    }
    let idx: Vec<usize> = (0..rows).filter(|&r| patch_mask[r]).collect();
    if idx.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let target: Vec<f64> = idx.iter().flat_map(|&r| patches.data()[r * cols..(r + 1) * cols].iter().copied()).collect();
    let target = g.constant(Tensor::matrix(idx.len(), cols, target)?);
    let pred = g.gather_rows(reconstruction, &idx)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// Initial encoder parameters shared by every mode for a given seed.
pub fn init_encoder(cfg: &PretrainConfig) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    init_vit(&cfg.vit, mix_seed(cfg.seed, 0x5EED_0001), &mut ps)?;
    Ok(ps)
}

fn init_heads(cfg: &PretrainConfig, ps: &mut ParamSet) {
    let seed = mix_seed(cfg.seed, 0x5EED_0002);
    if matches!(cfg.mode, PretrainMode::VlContrastive | PretrainMode::MimThenVl) {
        init_text(&cfg.text, seed, ps);
        ps.insert(LOGIT_SCALE, Tensor::from_vec(vec![(1.0 / cfg.temperature).ln()]));
    }
    let mut init = Init { seed, params: ps };
    match cfg.mode {
        PretrainMode::SupervisedCls => init.linear("cls", cfg.vit.joint_dim, NUM_CLASSES, 1.0),
        PretrainMode::Mim | PretrainMode::MimThenVl => init.linear("mim.head", cfg.vit.embed_dim, cfg.vit.patch_dim(), 1.0),
        _ => {}
    }
}

fn check_dataset(cfg: &PretrainConfig, data: &[SampleRecord]) -> Result<()> {
    if cfg.mode == PretrainMode::RandomInit {
        return Ok(());
    }
    if data.is_empty() {
        return Err(Error::invalid(format!("{} pre-training needs a non-empty dataset", cfg.mode.name())));
    }
    let needs_captions = matches!(cfg.mode, PretrainMode::VlContrastive | PretrainMode::MimThenVl);
    if needs_captions && data.iter().all(|r| r.caption.iter().all(|&t| t == PAD)) {
        return Err(Error::invalid(format!("{} pre-training needs captioned samples", cfg.mode.name())));
    }
    Ok(())
}

/// Draw a batch of distinct scenes, each in a random one of its renderings.
fn sample_batch<'a>(by_scene: &BTreeMap<u64, Vec<&'a SampleRecord>>, keys: &[u64], n: usize, seed: u64, iter: u64) -> Vec<&'a SampleRecord> {
    let mut rng = rng_for(mix_seed(seed, 0xBA7C), iter);
    let n = n.min(keys.len());
    keys.choose_multiple(&mut rng, n)
        .map(|k| {
            let v = &by_scene[k];
            v[rng.gen_range(0..v.len())]
        })
        .collect()
}

fn random_patch_mask(tokens: usize, batch: usize, ratio: f64, seed: u64, iter: u64) -> Vec<bool> {
    let per = (ratio * tokens as f64).round() as usize;
    let mut out = Vec::with_capacity(tokens * batch);
    for b in 0..batch {
        let mut rng = rng_for(mix_seed(seed, 0x3A5C), iter * 1_000_003 + b as u64);
        let mut m = vec![false; tokens];
        for i in rand::seq::index::sample(&mut rng, tokens, per) {
            m[i] = true;
        }
        out.extend(m);
    }
    out
}

enum Objective {
    Contrastive,
    Supervised,
    Reconstruct,
}

fn batch_loss(cfg: &PretrainConfig, objective: &Objective, g: &mut Graph, p: &Bound, batch: &[&SampleRecord], iter: u64) -> Result<Var> {
    let images: Vec<Image> = batch.iter().map(|r| r.image.to_f64()).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let patches = patchify(&refs, &cfg.vit)?;
    match objective {
        Objective::Contrastive => {
            let out = vision_forward_patches(g, p, &cfg.vit, patches, None)?;
            let caps: Vec<&[u32]> = batch.iter().map(|r| r.caption.as_slice()).collect();
            let txt = text_forward(g, p, &cfg.text, &caps)?;
            let log_scale = p.var(LOGIT_SCALE)?;
            let scale = g.exp(log_scale)?;
            clip_loss_graph(g, out.pooled, txt, scale)
        }
        Objective::Supervised => {
            let out = vision_forward_patches(g, p, &cfg.vit, patches, None)?;
            let logits = linear(g, p, "cls", out.pooled)?;
            let labels: Vec<usize> = batch.iter().map(|r| r.dominant_class()).collect();
            supervised_cls_loss(g, logits, &labels)
        }
        Objective::Reconstruct => {
            let mask = random_patch_mask(cfg.vit.num_tokens(), batch.len(), cfg.mask_ratio, cfg.seed, iter);
            let out = vision_forward_patches(g, p, &cfg.vit, patches.clone(), Some(&mask))?;
            let recon = linear(g, p, "mim.head", out.tokens)?;
            mim_loss(g, &patches, &mask, recon)
        }
    }
}

/// Train an encoder with the configured paradigm. The returned checkpoint
/// holds the encoder, the paradigm's auxiliary heads and the encoder tag.
pub fn run_pretrain(cfg: &PretrainConfig, data: &[SampleRecord]) -> Result<(Checkpoint, Vec<LogRow>)> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let mut params = init_encoder(cfg)?;
    let mut log = Vec::new();
    if cfg.mode != PretrainMode::RandomInit && cfg.iterations > 0 {
        init_heads(cfg, &mut params);
        let mut by_scene: BTreeMap<u64, Vec<&SampleRecord>> = BTreeMap::new();
        for r in data {
            by_scene.entry(r.id).or_default().push(r);
        }
        let keys: Vec<u64> = by_scene.keys().copied().collect();
        let warmup = cfg.warmup.clamp(1, cfg.iterations.max(2) - 1);
        let schedule = LrSchedule::new(cfg.lr, warmup, cfg.iterations.max(2))?;
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let mut trainer = Trainer::new(&params, adam, schedule, vec![1.0; params.len()], &TrainMask::default());
        let start = Instant::now();
        for iter in 0..cfg.iterations {
            let objective = match cfg.mode {
                PretrainMode::VlContrastive => Objective::Contrastive,
                PretrainMode::SupervisedCls => Objective::Supervised,
                PretrainMode::Mim => Objective::Reconstruct,
                PretrainMode::MimThenVl if iter < cfg.iterations / 2 => Objective::Reconstruct,
                PretrainMode::MimThenVl => Objective::Contrastive,
                PretrainMode::RandomInit => unreachable!(),
            };
            let batch = sample_batch(&by_scene, &keys, cfg.batch_size, cfg.seed, iter);
            let mut g = Graph::new();
            let p = trainer.bind(&mut g, &params);
            let loss = batch_loss(cfg, &objective, &mut g, &p, &batch, iter)?;
            let grads = g.backward(loss)?;
            let lr = trainer.schedule.lr_at(iter + 1)?;
            trainer.step(&mut params, &p, &grads, iter)?;
            if let Some(i) = params.names().iter().position(|n| n == LOGIT_SCALE) {
                let v = params.tensors()[i].item().clamp((1.0 / TEMPERATURE_MAX).ln(), (1.0 / TEMPERATURE_MIN).ln());
                params.tensors_mut()[i] = Tensor::from_vec(vec![v]);
            }
            log.push(LogRow {
                iter,
                loss: g.value(loss).item(),
                lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let mut ck = Checkpoint::new(params);
    ck.tag_encoder(&cfg.vit);
    Ok((ck, log))
}

/// Current temperature stored in a contrastive checkpoint.
pub fn temperature(ck: &Checkpoint) -> Option<f64> {
    ck.params.get(LOGIT_SCALE).map(|t| (-t.item()).exp())
}

/// Mean cosine similarity between matched image and caption embeddings.
pub fn mean_pair_similarity(ck: &Checkpoint, cfg: &PretrainConfig, data: &[SampleRecord]) -> Result<f64> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, &ck.params);
    let images: Vec<Image> = data.iter().map(|r| r.image.to_f64()).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let out = vision_forward_patches(&mut g, &p, &cfg.vit, patchify(&refs, &cfg.vit)?, None)?;
    let caps: Vec<&[u32]> = data.iter().map(|r| r.caption.as_slice()).collect();
    let txt = text_forward(&mut g, &p, &cfg.text, &caps)?;
    let (a, b) = (g.value(out.pooled), g.value(txt));
    let d = cfg.vit.joint_dim;
    let total: f64 = (0..data.len())
        .map(|i| a.data()[i * d..(i + 1) * d].iter().zip(&b.data()[i * d..(i + 1) * d]).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    Ok(total / data.len() as f64)
}

/// Pooled unit embeddings `[N, J]` of a batch of images.
pub fn pooled_embeddings(params: &ParamSet, vit: &ViTConfig, images: &[&Image]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let out = vision_forward_patches(&mut g, &p, vit, patchify(images, vit)?, None)?;
    Ok(g.value(out.pooled).clone())
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}
