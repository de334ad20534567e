//! Three-stage training at toy scale.
//!
//! Stage 1 sees single frames, stage 2 short clips, both with the alignment
//! losses on and merging off. Stage 3 turns merging on and trains on
//! question/answer pairs with the generative loss alone. Each stage starts
//! from the previous stage's model; the model records which stage it has
//! completed so out-of-order runs fail up front.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{forward, generate, BackboneConfig, BackboneParams, BackboneVars, ForwardTrace};
use crate::error::{bail, Error, Result};
use crate::guidance::{
    mock_teacher, total_loss, GuidanceConfig, GuidanceItem, GuidanceParams, GuidanceVars, LossBreakdown, TeacherFeatures,
};
use crate::merge::MergeConfig;
use crate::numerics::{grad_check_many, no_grad, params, Binder, GradCheckReport, Parameters, Tensor, Var};
use crate::patch_embed::{embed, marker_cross_attend, FeatureSeq, PatchEmbedConfig, PatchEmbedParams, PatchEmbedVars};
use crate::synth::Sample;
use crate::videotok::{tokenize, vocab, ResolutionPolicy, TokenStream, VideoClip};

/// Learning rates of the toy preset are the reference rates times this.
/// The reference rates assume batches of hundreds on a pretrained model; a
/// randomly initialised toy model at batch 8 barely moves at 4e-5.
pub const TOY_LR_SCALE: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed: PatchEmbedConfig,
    pub backbone: BackboneConfig,
    pub policy: ResolutionPolicy,
    pub teacher_dim: usize,
    /// Teacher feature grid per frame.
    pub teacher_grid: (usize, usize),
    pub teacher_seed: u64,
}

impl ModelConfig {
    /// 16×16 frames in 8-pixel patches, a 4-block backbone of width 64.
    pub fn toy() -> Self {
        ModelConfig {
            embed: PatchEmbedConfig { patch: 8, dim: 64, heads: 4 },
            backbone: BackboneConfig {
                depth: 4,
                dim: 64,
                heads: 4,
                ff: 256,
                vocab: vocab::MIN_SIZE,
                max_seq: 512,
                merge: MergeConfig::disabled(),
            },
            policy: ResolutionPolicy { patch: 8, max_edge_high: 16, max_edge_low: 16 },
            teacher_dim: 32,
            teacher_grid: (2, 2),
            teacher_seed: 7,
        }
    }

    /// Smallest pipeline for gradient checks: 8×8 frames in 4-pixel patches,
    /// two blocks of width 16, merging on.
    pub fn tiny() -> Self {
        ModelConfig {
            embed: PatchEmbedConfig { patch: 4, dim: 16, heads: 2 },
            backbone: BackboneConfig {
                vocab: vocab::MIN_SIZE,
                ..BackboneConfig::tiny()
            },
            policy: ResolutionPolicy { patch: 4, max_edge_high: 8, max_edge_low: 8 },
            teacher_dim: 8,
            teacher_grid: (2, 2),
            teacher_seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.embed.validate()?;
        self.policy.validate()?;
        if self.embed.dim != self.backbone.dim {
            bail!(Config, "embedding width {} differs from backbone width {}", self.embed.dim, self.backbone.dim);
        }
        if self.embed.patch != self.policy.patch {
            bail!(Config, "embedding patch {} differs from tokenizer patch {}", self.embed.patch, self.policy.patch);
        }
        if self.teacher_dim == 0 {
            bail!(Config, "teacher width must be positive");
        }
        Ok(())
    }
}

/// Patch embedding, backbone and guidance head, trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: PatchEmbedParams,
    pub backbone: BackboneParams,
    pub guidance: GuidanceParams,
    /// 0 for a fresh model.
    pub completed_stage: u8,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: PatchEmbedVars,
    pub backbone: BackboneVars,
    pub guidance: GuidanceVars,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            embed: PatchEmbedParams::init(config.embed, &mut rng)?,
            backbone: BackboneParams::init(config.backbone, &mut rng)?,
            guidance: GuidanceParams::init(config.backbone.dim, config.teacher_dim, &mut rng),
            config,
            completed_stage: 0,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            embed: PatchEmbedParams::zeros(config.embed)?,
            backbone: BackboneParams::zeros(config.backbone)?,
            guidance: GuidanceParams::zeros(config.backbone.dim, config.teacher_dim),
            config,
            completed_stage: 0,
        })
    }

    pub fn set_merge(&mut self, enabled: bool) {
        self.config.backbone.merge.enabled = enabled;
        self.backbone.config.merge.enabled = enabled;
    }

    pub fn bind(&self, binder: &mut Binder) -> ModelVars {
        ModelVars {
            embed: self.embed.bind(binder, "embed."),
            backbone: self.backbone.bind(binder, "backbone."),
            guidance: self.guidance.bind(binder, "guidance."),
        }
    }

    /// Graph nodes from `make`, called once per tensor in visit order.
    pub fn vars_with(&self, make: &mut dyn FnMut(&str, &Tensor) -> Var) -> ModelVars {
        let e = &self.embed;
        let mut m = |n: &str, t: &Tensor| make(&format!("embed.{n}"), t);
        let embed = PatchEmbedVars {
            config: e.config,
            w_p: m("w_p", &e.w_p),
            b_p: m("b_p", &e.b_p),
            line: m("line", &e.line),
            frame: m("frame", &e.frame),
            w_q: m("w_q", &e.w_q),
            w_k: m("w_k", &e.w_k),
            w_v: m("w_v", &e.w_v),
            w_o: m("w_o", &e.w_o),
        };
        let backbone = BackboneVars {
            config: self.backbone.config,
            w: self.backbone.weights.map(|n, t| make(&format!("backbone.{n}"), t)),
        };
        let guidance = GuidanceVars {
            proj: make("guidance.proj", &self.guidance.proj),
            log_tau: make("guidance.log_tau", &self.guidance.log_tau),
        };
        ModelVars { embed, backbone, guidance }
    }

    pub fn constants(&self) -> ModelVars {
        ModelVars {
            embed: self.embed.constants(),
            backbone: self.backbone.constants(),
            guidance: self.guidance.constants(),
        }
    }

    pub fn tokenize(&self, clip: &VideoClip) -> Result<TokenStream> {
        tokenize(clip, &self.config.policy)
    }

    pub fn teacher(&self, clip: &VideoClip) -> Result<TeacherFeatures> {
        let grids = vec![self.config.teacher_grid; clip.num_frames()];
        mock_teacher(clip, &grids, self.config.teacher_dim, self.config.teacher_seed)
    }

    /// SHA-256 over every tensor's name, shape and f64 bytes, in visit order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            h.update(t.to_hash_bytes());
        });
        hex::encode(h.finalize())
    }

    fn manifest_config(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "completed_stage": self.completed_stage })
    }

    /// Checkpoint directory: one `ELVT` file per tensor plus `manifest.json`.
    /// Tensors are stored as f32, so a reload is exact only to f32 rounding.
    pub fn save(&self, dir: &Path) -> Result<()> {
        params::save_dir(dir, self, self.manifest_config()).map(|_| ())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = params::read_manifest(dir)?;
        let config: ModelConfig = serde_json::from_value(m.config["model"].clone())
            .map_err(|e| Error::Format(format!("{}: model config: {e}", dir.display())))?;
        let mut model = Model::zeros(config)?;
        model.completed_stage = m.config["completed_stage"].as_u64().unwrap_or(0) as u8;
        params::load_dir(dir, &mut model)?;
        Ok(model)
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed.visit(&mut |n, t| f(&format!("embed.{n}"), t));
        self.backbone.visit(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.guidance.visit(&mut |n, t| f(&format!("guidance.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut(&mut |n, t| f(&format!("embed.{n}"), t));
        self.backbone.visit_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.guidance.visit_mut(&mut |n, t| f(&format!("guidance.{n}"), t));
    }
}

/// Patch embedding then marker cross-attention.
pub fn visual_features(vars: &ModelVars, stream: &TokenStream) -> Result<FeatureSeq> {
    marker_cross_attend(&embed(stream, &vars.embed)?, &vars.embed)
}

/// Embedding, cross-attention and the backbone over `visual ++ text`.
pub fn forward_sample(vars: &ModelVars, stream: &TokenStream, text: &[u32]) -> Result<ForwardTrace> {
    forward(&vars.backbone, &visual_features(vars, stream)?, text)
}

/// Token ids and the first target index for one sample. Captions train on
/// every token after `BOS`; QA pairs only on the answer and `EOS`.
pub fn text_for(sample: &Sample, stage: u8) -> Result<(Vec<u32>, usize)> {
    if stage == 3 {
        let Some(qa) = &sample.qa else {
            bail!(Contract, "stage-3 sample {} has no question", sample.id);
        };
        let mut ids = qa_prompt(&qa.question);
        let start = ids.len();
        ids.extend(vocab::encode(&qa.answer));
        ids.push(vocab::EOS);
        Ok((ids, start))
    } else {
        let mut ids = vec![vocab::BOS];
        ids.extend(vocab::encode(&sample.caption));
        ids.push(vocab::EOS);
        Ok((ids, 1))
    }
}

/// `BOS question SEP`, the decoding prompt of a QA pair.
pub fn qa_prompt(question: &str) -> Vec<u32> {
    let mut ids = vec![vocab::BOS];
    ids.extend(vocab::encode(question));
    ids.push(vocab::SEP);
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub frames: usize,
    pub merge_enabled: bool,
    /// Whether the alignment losses (MSE and contrastive) are active.
    pub auxiliary_losses: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl StageConfig {
    /// The reference schedule; batch sizes are the reference ones too.
    pub fn reference(stage: u8) -> Result<Self> {
        let (lr, warmup, batch, epochs, frames) = match stage {
            1 => (4e-5, 0.03, 256, 1, 1),
            2 => (4e-5, 0.01, 256, 2, 16),
            3 => (2e-5, 0.01, 128, 1, 32),
            s => bail!(Config, "stage must be 1, 2 or 3, got {s}"),
        };
        Ok(StageConfig {
            stage,
            lr,
            warmup_ratio: warmup,
            batch_size: batch,
            epochs,
            frames,
            merge_enabled: stage == 3,
            auxiliary_losses: stage != 3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            seed: 0,
            checkpoint_every: 0,
        })
    }

    /// Same stage structure at desk scale: batch 8, 4-frame clips, scaled lr.
    pub fn toy(stage: u8) -> Result<Self> {
        let r = Self::reference(stage)?;
        Ok(StageConfig {
            lr: r.lr * TOY_LR_SCALE,
            batch_size: 8,
            epochs: match stage {
                1 => 25,
                2 => 8,
                _ => 40,
            },
            frames: if stage == 1 { 1 } else { 4 },
            grad_clip: 1.0,
            ..r
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.stage {
            1 if self.frames != 1 => bail!(Config, "stage 1 trains on single frames, got {}", self.frames),
            2 if self.frames < 2 => bail!(Config, "stage 2 needs multi-frame clips, got {}", self.frames),
            1 | 2 if self.merge_enabled || !self.auxiliary_losses => {
                bail!(Config, "stage {} trains without merging and with all losses", self.stage)
            }
            3 if !self.merge_enabled || self.auxiliary_losses => {
                bail!(Config, "stage 3 trains with merging and the generative loss only")
            }
            1..=3 => {}
            s => bail!(Config, "stage must be 1, 2 or 3, got {s}"),
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_ratio) {
            bail!(Config, "lr must be positive and warmup ratio in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            bail!(Config, "batch size and epochs must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: StageConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stage config serializes")
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// Linear warmup from 0 over `ceil(warmup_ratio · total)` steps, then cosine
/// decay to 0 at `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &StageConfig) -> Result<f64> {
    if total_steps == 0 {
        bail!(Contract, "schedule over zero steps");
    }
    if step >= total_steps {
        bail!(Contract, "step {step} outside schedule of {total_steps}");
    }
    let w = cfg.warmup_steps(total_steps);
    if step < w {
        return Ok(cfg.lr * step as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(
        &mut self,
        params: &mut dyn Parameters,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &StageConfig,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut missing = None;
        params.visit_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else {
                missing.get_or_insert_with(|| name.to_string());
                return;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w -= lr * (upd + cfg.weight_decay * *w);
            }
        });
        match missing {
            Some(n) => Err(Error::Contract(format!("no gradient for parameter {n}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub l_gen: f64,
    pub l_mse: f64,
    pub l_con: f64,
    pub total: f64,
    pub temperature: f64,
    pub grad_norm: f64,
    /// Visual tokens entering the backbone, summed over the batch.
    pub visual_tokens: usize,
    /// Sequence length after the last block, summed over the batch.
    pub final_tokens: usize,
    pub step_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step serializes") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// A stage's training data. The stage tag must match the stage config.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub stage: u8,
    pub samples: Vec<Sample>,
}

struct Prepared {
    stream: TokenStream,
    teacher: Option<TeacherFeatures>,
    text: Vec<u32>,
    loss_start: usize,
}

fn prepare(model: &Model, corpus: &Corpus, cfg: &StageConfig) -> Result<Vec<Prepared>> {
    corpus
        .samples
        .iter()
        .map(|s| {
            if s.clip.num_frames() != cfg.frames {
                bail!(
                    Contract,
                    "sample {} has {} frames, stage {} expects {}",
                    s.id,
                    s.clip.num_frames(),
                    cfg.stage,
                    cfg.frames
                );
            }
            let (text, loss_start) = text_for(s, cfg.stage)?;
            Ok(Prepared {
                stream: model.tokenize(&s.clip)?,
                teacher: if cfg.auxiliary_losses { Some(model.teacher(&s.clip)?) } else { None },
                text,
                loss_start,
            })
        })
        .collect()
}

/// Loss of one batch under fresh leaves; returns the breakdown, the binder
/// holding the leaves and the token counts.
pub fn batch_loss(
    model: &Model,
    batch: &[(&TokenStream, Option<&TeacherFeatures>, &[u32], usize)],
    guidance: &GuidanceConfig,
) -> Result<(LossBreakdown, Binder, usize, usize)> {
    let mut binder = Binder::new();
    let vars = model.bind(&mut binder);
    let mut traces = Vec::with_capacity(batch.len());
    let (mut visual, mut fin) = (0, 0);
    for (stream, _, text, _) in batch {
        let tr = forward_sample(&vars, stream, text)?;
        visual += tr.counts[0] - text.len();
        fin += tr.counts.last().copied().unwrap_or(0);
        traces.push(tr);
    }
    // the stage-3 path never touches the teacher, so an empty stand-in serves
    let placeholder;
    let items: Vec<GuidanceItem> = if guidance.auxiliary {
        batch
            .iter()
            .zip(&traces)
            .map(|((_, teacher, text, start), trace)| {
                let Some(teacher) = teacher else {
                    bail!(Contract, "alignment losses need teacher features");
                };
                Ok(GuidanceItem { trace, teacher, text, loss_start: *start })
            })
            .collect::<Result<_>>()?
    } else {
        placeholder = TeacherFeatures {
            features: Tensor::zeros(&[0, model.config.teacher_dim]),
            grids: Vec::new(),
            provider: crate::guidance::Provider::Mock,
        };
        batch
            .iter()
            .zip(&traces)
            .map(|((_, _, text, start), trace)| GuidanceItem {
                trace,
                teacher: &placeholder,
                text,
                loss_start: *start,
            })
            .collect()
    };
    let losses = total_loss(&items, &vars.guidance, guidance)?;
    Ok((losses, binder, visual, fin))
}

/// Trains one stage in place. Batches are drawn by a per-epoch shuffle
/// seeded from `cfg.seed`, so runs are reproducible bit for bit.
pub fn run_stage(
    cfg: &StageConfig,
    corpus: &Corpus,
    model: &mut Model,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.completed_stage + 1 != cfg.stage {
        bail!(
            Config,
            "stage {} needs a model that completed stage {}, this one completed {}",
            cfg.stage,
            cfg.stage - 1,
            model.completed_stage
        );
    }
    if corpus.stage != cfg.stage {
        bail!(Contract, "corpus is for stage {}, config for stage {}", corpus.stage, cfg.stage);
    }
    if corpus.samples.is_empty() {
        bail!(Input, "empty corpus");
    }
    model.set_merge(cfg.merge_enabled);
    let data = prepare(model, corpus, cfg)?;
    let guidance = GuidanceConfig {
        auxiliary: cfg.auxiliary_losses,
        ..GuidanceConfig::default()
    };
    let total = cfg.total_steps(data.len());
    let mut opt = AdamW::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64) << 32)));
        for chunk in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let lr = lr_at(step, total, cfg)?;
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let d = &data[i];
                    (&d.stream, d.teacher.as_ref(), d.text.as_slice(), d.loss_start)
                })
                .collect();
            let (losses, binder, visual_tokens, final_tokens) = batch_loss(model, &batch, &guidance)?;
            let values = losses.values();
            if values.iter().any(|v| !v.is_finite()) {
                bail!(
                    Numeric,
                    "stage {} step {step}: non-finite loss (gen {}, mse {}, con {})",
                    cfg.stage,
                    values[0],
                    values[1],
                    values[2]
                );
            }
            losses.total.backward();
            let mut grads = binder.grads();
            let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
            opt.update(model, &grads, lr, cfg)?;
            log.steps.push(StepRecord {
                stage: cfg.stage,
                step,
                lr,
                l_gen: values[0],
                l_mse: values[1],
                l_con: values[2],
                total: values[3],
                temperature: losses.temperature,
                grad_norm: norm,
                visual_tokens,
                final_tokens,
                step_secs: start.elapsed().as_secs_f64(),
            });
            step += 1;
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total {
                    let p = dir.join(format!("stage{}-step{step:06}", cfg.stage));
                    model.save(&p)?;
                    log.checkpoints.push(p);
                }
            }
        }
    }
    model.completed_stage = cfg.stage;
    if let Some(dir) = checkpoint_dir {
        let p = dir.join(format!("stage{}", cfg.stage));
        model.save(&p)?;
        log.checkpoints.push(p);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question: String,
    pub expected: String,
    pub got: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Greedy-decodes an answer for each QA sample and scores exact matches.
pub fn evaluate_toy(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let vars = model.constants();
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let Some(qa) = &s.qa else {
            bail!(Contract, "sample {} has no question", s.id);
        };
        let stream = model.tokenize(&s.clip)?;
        let visual = no_grad(|| visual_features(&vars, &stream))?;
        let ids = generate(&model.backbone, &visual, &qa_prompt(&qa.question), 16, vocab::EOS)?;
        predictions.push(Prediction {
            id: s.id.clone(),
            question: qa.question.clone(),
            expected: qa.answer.clone(),
            got: vocab::decode(&ids),
        });
    }
    let correct = predictions.iter().filter(|p| p.got == p.expected).count();
    Ok(EvalReport {
        total: predictions.len(),
        correct,
        accuracy: if predictions.is_empty() { 0.0 } else { correct as f64 / predictions.len() as f64 },
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineCheck {
    pub report: GradCheckReport,
    /// Sequence length entering each block, per clip, at the unperturbed point.
    pub counts: Vec<Vec<usize>>,
}

/// Central-difference check of the whole pipeline (embedding, marker
/// cross-attention, the merging backbone, all three losses) on a random
/// batch of two 3-frame clips at the policy's high edge. Probes at most
/// `coords_per_tensor` coordinates of each parameter tensor.
pub fn pipeline_grad_check(config: &ModelConfig, seed: u64, coords_per_tensor: usize) -> Result<PipelineCheck> {
    let mut model = Model::init(*config, seed)?;
    let e = config.policy.max_edge_high;
    model.set_merge(true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let clips: Vec<VideoClip> = (0..2)
        .map(|i| {
            let px: Vec<f64> = (0..3 * 3 * e * e).map(|_| rng.gen::<f64>()).collect();
            VideoClip::from_frames(3, e, e, px, &format!("g{i}"))
        })
        .collect::<Result<_>>()?;
    let streams: Vec<TokenStream> = clips.iter().map(|c| model.tokenize(c)).collect::<Result<_>>()?;
    let teachers: Vec<TeacherFeatures> = clips.iter().map(|c| model.teacher(c)).collect::<Result<_>>()?;
    let texts: Vec<Vec<u32>> = ["ab", "cd"]
        .iter()
        .map(|w| [vec![vocab::BOS], vocab::encode(w), vec![vocab::EOS]].concat())
        .collect();
    let tensors: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    let cfg = GuidanceConfig::default();
    let f = |leaves: &[Var]| -> Result<Var> {
        let mut it = leaves.iter();
        let vars = model.vars_with(&mut |_, _| it.next().expect("one leaf per tensor").clone());
        let traces: Vec<ForwardTrace> = streams
            .iter()
            .zip(&texts)
            .map(|(s, t)| forward_sample(&vars, s, t))
            .collect::<Result<_>>()?;
        let items: Vec<GuidanceItem> = traces
            .iter()
            .zip(&teachers)
            .zip(&texts)
            .map(|((trace, teacher), text)| GuidanceItem { trace, teacher, text, loss_start: 1 })
            .collect();
        Ok(total_loss(&items, &vars.guidance, &cfg)?.total)
    };
    let vars = model.constants();
    let counts = no_grad(|| {
        streams
            .iter()
            .zip(&texts)
            .map(|(s, t)| forward_sample(&vars, s, t).map(|tr| tr.counts))
            .collect::<Result<Vec<_>>>()
    })?;
    let report = grad_check_many(f, &tensors, 1e-6, Some(coords_per_tensor))?;
    Ok(PipelineCheck { report, counts })
}
