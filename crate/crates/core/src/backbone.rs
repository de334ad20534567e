//! A small pre-norm decoder-only transformer over mixed visual and text
//! tokens, with temporal merging after every block.
//!
//! Positions for the rotary encoding are the flat pre-merge sequence
//! indices, so surviving tokens keep their original positions. Causality
//! follows sequence order.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::merge::{merge_for_layer, MergeConfig, MergeState};
use crate::numerics::{count_macs, no_grad, params, Binder, Mask, Parameters, Tensor, Var};
use crate::patch_embed::{FeatureSeq, TokenMeta};
use crate::videotok::TokenKind;

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub merge: MergeConfig,
}

impl BackboneConfig {
    /// Default toy model.
    pub fn toy() -> Self {
        BackboneConfig {
            depth: 8,
            dim: 128,
            heads: 4,
            ff: 512,
            vocab: 512,
            max_seq: 16_384,
            merge: MergeConfig::default(),
        }
    }

    /// Smallest model used for full-pipeline gradient checks.
    pub fn tiny() -> Self {
        BackboneConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            ff: 32,
            vocab: 300,
            max_seq: 256,
            merge: MergeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            bail!(Config, "depth must be at least 2, got {}", self.depth);
        }
        if self.dim == 0 || self.heads == 0 || self.ff == 0 || self.max_seq == 0 {
            bail!(Config, "backbone sizes must be positive");
        }
        if self.dim % self.heads != 0 || (self.dim / self.heads) % 2 != 0 {
            bail!(Config, "dim {} must split into {} heads of even width", self.dim, self.heads);
        }
        if self.vocab < crate::videotok::vocab::MIN_SIZE {
            bail!(Config, "vocabulary of {} cannot hold bytes and specials", self.vocab);
        }
        self.merge.validate(self.depth)
    }
}

/// One block's weights; `T` is `Tensor` at rest and `Var` inside a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const LAYER_NAMES: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&T; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.wk, &mut self.wv,
            &mut self.wo, &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1,
            &mut self.w2, &mut self.b2,
        ]
    }

    fn from_fields(mut f: impl FnMut(&'static str) -> T) -> Self {
        LayerParams {
            ln1_g: f("ln1_g"),
            ln1_b: f("ln1_b"),
            wq: f("wq"),
            wk: f("wk"),
            wv: f("wv"),
            wo: f("wo"),
            ln2_g: f("ln2_g"),
            ln2_b: f("ln2_b"),
            w1: f("w1"),
            b1: f("b1"),
            w2: f("w2"),
            b2: f("b2"),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> LayerParams<U> {
        let fields = self.fields();
        let mut i = 0;
        LayerParams::from_fields(|name| {
            let u = f(name, fields[i]);
            i += 1;
            u
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T> {
    pub tok_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    pub head: T,
}

impl<T> BackboneWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> BackboneWeights<U> {
        BackboneWeights {
            tok_emb: f("tok_emb", &self.tok_emb),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, p)| p.map(|n, t| f(&format!("layers.{l}.{n}"), t)))
                .collect(),
            lnf_g: f("lnf_g", &self.lnf_g),
            lnf_b: f("lnf_b", &self.lnf_b),
            head: f("head", &self.head),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub weights: BackboneWeights<Tensor>,
}

impl BackboneParams {
    /// Weights `~N(0, 1/√fan_in)`, output projections further scaled by
    /// `1/√(2·depth)`; norms start at identity, biases at zero.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.dim, config.ff, config.vocab);
        let sd = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / (2.0 * config.depth as f64).sqrt();
        let tok_emb = Tensor::randn(&[v, d], 1.0, rng);
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], sd, rng),
                wk: Tensor::randn(&[d, d], sd, rng),
                wv: Tensor::randn(&[d, d], sd, rng),
                wo: Tensor::randn(&[d, d], sd * out_scale, rng),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[d, f], sd, rng),
                b1: Tensor::zeros(&[f]),
                w2: Tensor::randn(&[f, d], out_scale / (f as f64).sqrt(), rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(BackboneParams {
            config,
            weights: BackboneWeights {
                tok_emb,
                layers,
                lnf_g: Tensor::full(&[d], 1.0),
                lnf_b: Tensor::zeros(&[d]),
                head: Tensor::randn(&[d, v], sd, rng),
            },
        })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.dim, config.ff, config.vocab);
        let layer = LayerParams::from_fields(|name| match name {
            "wq" | "wk" | "wv" | "wo" => Tensor::zeros(&[d, d]),
            "w1" => Tensor::zeros(&[d, f]),
            "b1" => Tensor::zeros(&[f]),
            "w2" => Tensor::zeros(&[f, d]),
            _ => Tensor::zeros(&[d]),
        });
        Ok(BackboneParams {
            config,
            weights: BackboneWeights {
                tok_emb: Tensor::zeros(&[v, d]),
                layers: vec![layer; config.depth],
                lnf_g: Tensor::zeros(&[d]),
                lnf_b: Tensor::zeros(&[d]),
                head: Tensor::zeros(&[d, v]),
            },
        })
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> BackboneVars {
        BackboneVars {
            config: self.config,
            w: self.weights.map(|n, t| binder.bind(&format!("{prefix}{n}"), t)),
        }
    }

    pub fn constants(&self) -> BackboneVars {
        BackboneVars {
            config: self.config,
            w: self.weights.map(|_, t| Var::constant(t.clone())),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(self.config).expect("config serializes");
        params::save_dir(dir, self, cfg).map(|_| ())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = params::read_manifest(dir)?;
        let config: BackboneConfig = serde_json::from_value(manifest.config)
            .map_err(|e| Error::Format(format!("backbone config: {e}")))?;
        let mut p = BackboneParams::zeros(config)?;
        params::load_dir(dir, &mut p)?;
        Ok(p)
    }
}

impl Parameters for BackboneParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let w = &self.weights;
        f("tok_emb", &w.tok_emb);
        for (l, p) in w.layers.iter().enumerate() {
            for (n, t) in LAYER_NAMES.iter().zip(p.fields()) {
                f(&format!("layers.{l}.{n}"), t);
            }
        }
        f("lnf_g", &w.lnf_g);
        f("lnf_b", &w.lnf_b);
        f("head", &w.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let w = &mut self.weights;
        f("tok_emb", &mut w.tok_emb);
        for (l, p) in w.layers.iter_mut().enumerate() {
            for (n, t) in LAYER_NAMES.iter().zip(p.fields_mut()) {
                f(&format!("layers.{l}.{n}"), t);
            }
        }
        f("lnf_g", &mut w.lnf_g);
        f("lnf_b", &mut w.lnf_b);
        f("head", &mut w.head);
    }
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub config: BackboneConfig,
    pub w: BackboneWeights<Var>,
}

/// Everything a forward pass reports.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Sequence length entering each block, then after the last one.
    pub counts: Vec<usize>,
    pub merge_states: Vec<MergeState>,
    /// Final-block hidden states (after the last merge, before the final norm).
    pub hidden: FeatureSeq,
    /// Next-token logits, one row per text token.
    pub logits: Option<Var>,
    /// Multiply-adds performed by matrix products.
    pub macs: u64,
}

impl ForwardTrace {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "counts": self.counts,
            "macs": self.macs,
            "merges": self.merge_states.iter().map(|s| serde_json::json!({
                "layer": s.layer, "policy": s.policy, "incoming": s.incoming, "kept": s.kept,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Per-layer keys (already rotated) and values for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
    next_pos: usize,
}

impl KvCache {
    /// Cached rows per layer; shrinks with depth when merging is on.
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(|(k, _)| k.rows()).collect()
    }
}

fn text_meta(start_pos: usize, n: usize) -> Vec<TokenMeta> {
    (0..n)
        .map(|i| TokenMeta {
            kind: TokenKind::Text,
            t: 0,
            t_last: 0,
            r: 0,
            c: 0,
            grid: (0, 0),
            merge_count: 1,
            pos: start_pos + i,
        })
        .collect()
}

fn attention(
    cfg: &BackboneConfig,
    q: &Var,
    k: &Var,
    v: &Var,
    mask: &Mask,
) -> Result<Var> {
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let a = qh.matmul_t(&kh)?.scale(scale)?.softmax_rows(mask)?;
        heads.push(a.matmul(&vh)?);
    }
    Var::concat_cols(&heads)
}

fn feed_forward(p: &LayerParams<Var>, x: &Var) -> Result<Var> {
    let h = x.layer_norm(&p.ln2_g, &p.ln2_b, LN_EPS)?;
    let f = h.matmul(&p.w1)?.add_row(&p.b1)?.gelu()?;
    x.add(&f.matmul(&p.w2)?.add_row(&p.b2)?)
}

/// One block over the whole sequence; returns the output and the rotated
/// keys and values it attended with.
fn block(cfg: &BackboneConfig, p: &LayerParams<Var>, x: &Var, pos: &[usize]) -> Result<(Var, Var, Var)> {
    let h = x.layer_norm(&p.ln1_g, &p.ln1_b, LN_EPS)?;
    let q = h.matmul(&p.wq)?.rope(pos, cfg.heads, ROPE_BASE)?;
    let k = h.matmul(&p.wk)?.rope(pos, cfg.heads, ROPE_BASE)?;
    let v = h.matmul(&p.wv)?;
    let a = attention(cfg, &q, &k, &v, &Mask::Causal)?;
    let x = x.add(&a.matmul(&p.wo)?)?;
    Ok((feed_forward(p, &x)?, k, v))
}

fn run(
    vars: &BackboneVars,
    visual: &FeatureSeq,
    text: &[u32],
    mut cache: Option<&mut Vec<(Tensor, Tensor)>>,
) -> Result<ForwardTrace> {
    let cfg = &vars.config;
    if visual.dim() != cfg.dim {
        bail!(Dimension, "visual features of width {}, model width {}", visual.dim(), cfg.dim);
    }
    let total = visual.len() + text.len();
    if total > cfg.max_seq {
        bail!(Capacity, "sequence of {total} tokens exceeds the limit of {}", cfg.max_seq);
    }
    if let Some(&bad) = text.iter().find(|&&id| id as usize >= cfg.vocab) {
        bail!(Index, "text id {bad} outside vocabulary {}", cfg.vocab);
    }
    let (res, macs) = count_macs(|| -> Result<_> {
        let start = visual.meta.iter().map(|m| m.pos + 1).max().unwrap_or(0);
        let mut meta = visual.meta.clone();
        meta.extend(text_meta(start, text.len()));
        let x = if text.is_empty() {
            visual.features.clone()
        } else {
            let ids: Vec<usize> = text.iter().map(|&i| i as usize).collect();
            Var::concat_rows(&[visual.features.clone(), vars.w.tok_emb.gather_rows(&ids)?])?
        };
        let mut seq = FeatureSeq::new(x, meta)?;
        let patches_in = seq.count(TokenKind::Patch);
        let mut counts = vec![seq.len()];
        let mut states = Vec::new();
        let mut deep_base = patches_in;
        for (l, p) in vars.w.layers.iter().enumerate() {
            let pos: Vec<usize> = seq.meta.iter().map(|m| m.pos).collect();
            let (y, k, v) = block(cfg, p, &seq.features, &pos)?;
            if let Some(c) = cache.as_deref_mut() {
                c.push((k.value().clone(), v.value().clone()));
            }
            seq = FeatureSeq::new(y, seq.meta)?;
            if cfg.merge.enabled {
                if l == cfg.merge.switch(cfg.depth) {
                    deep_base = seq.count(TokenKind::Patch);
                }
                let (merged, state) = merge_for_layer(&seq, &cfg.merge, l, cfg.depth, deep_base)?;
                seq = merged;
                states.push(state);
            }
            counts.push(seq.len());
        }
        let logits = if text.is_empty() {
            None
        } else {
            let rows: Vec<usize> = (0..seq.len())
                .filter(|&i| seq.meta[i].kind == TokenKind::Text)
                .collect();
            let h = seq
                .features
                .gather_rows(&rows)?
                .layer_norm(&vars.w.lnf_g, &vars.w.lnf_b, LN_EPS)?;
            Some(h.matmul(&vars.w.head)?)
        };
        Ok((counts, states, logits, seq))
    });
    let (counts, merge_states, logits, hidden) = res?;
    Ok(ForwardTrace {
        counts,
        merge_states,
        hidden,
        logits,
        macs,
    })
}

/// Runs every block over `visual` followed by `text`.
pub fn forward(vars: &BackboneVars, visual: &FeatureSeq, text: &[u32]) -> Result<ForwardTrace> {
    run(vars, visual, text, None)
}

/// Final-layer visual features split for the alignment losses.
#[derive(Clone, Debug)]
pub struct VisualTail {
    /// Final hidden states of the whole sequence.
    pub features: Var,
    /// Row indices of surviving patches, grouped by anchor frame.
    pub frame_patches: Vec<Vec<usize>>,
    /// Row index of each frame's `FRAME` marker.
    pub frame_rows: Vec<usize>,
    /// `T×D` features of the `FRAME` markers.
    pub frame_tokens: Var,
}

pub fn visual_tail(trace: &ForwardTrace) -> Result<VisualTail> {
    let meta = &trace.hidden.meta;
    let frame_rows: Vec<usize> = (0..meta.len())
        .filter(|&i| meta[i].kind == TokenKind::FrameMark)
        .collect();
    if frame_rows.is_empty() {
        bail!(Contract, "trace holds no visual tokens");
    }
    let mut frame_patches = vec![Vec::new(); frame_rows.len()];
    for (i, m) in meta.iter().enumerate() {
        if m.kind == TokenKind::Patch {
            let Some(g) = frame_patches.get_mut(m.t) else {
                bail!(Structure, "patch anchored at frame {} beyond {} frames", m.t, frame_rows.len());
            };
            g.push(i);
        }
    }
    Ok(VisualTail {
        features: trace.hidden.features.clone(),
        frame_tokens: trace.hidden.features.gather_rows(&frame_rows)?,
        frame_patches,
        frame_rows,
    })
}

/// Prefill under `no_grad`, keeping each layer's keys and values. Returns
/// the cache and the logits of the last prompt token.
pub fn prefill(params: &BackboneParams, visual: &FeatureSeq, prompt: &[u32]) -> Result<(KvCache, Tensor)> {
    if prompt.is_empty() {
        bail!(Input, "prefill needs at least one prompt token");
    }
    no_grad(|| {
        let vars = params.constants();
        let mut layers = Vec::with_capacity(params.config.depth);
        let trace = run(&vars, visual, prompt, Some(&mut layers))?;
        let logits = trace.logits.expect("prompt is non-empty").value().clone();
        let last = logits.row(logits.rows() - 1).to_vec();
        let next_pos = trace.hidden.meta.iter().map(|m| m.pos + 1).max().unwrap_or(0);
        Ok((
            KvCache { layers, next_pos },
            Tensor::new(vec![params.config.vocab], last)?,
        ))
    })
}

/// Appends `token` and returns its next-token logits.
pub fn decode_step(params: &BackboneParams, cache: &mut KvCache, token: u32) -> Result<Tensor> {
    let cfg = &params.config;
    if token as usize >= cfg.vocab {
        bail!(Index, "token {token} outside vocabulary {}", cfg.vocab);
    }
    if cache.next_pos >= cfg.max_seq {
        bail!(Capacity, "decode would exceed {} positions", cfg.max_seq);
    }
    no_grad(|| {
        let w = params.constants().w;
        let pos = [cache.next_pos];
        let mut x = w.tok_emb.gather_rows(&[token as usize])?;
        for (p, (kc, vc)) in w.layers.iter().zip(cache.layers.iter_mut()) {
            let h = x.layer_norm(&p.ln1_g, &p.ln1_b, LN_EPS)?;
            let q = h.matmul(&p.wq)?.rope(&pos, cfg.heads, ROPE_BASE)?;
            let k = h.matmul(&p.wk)?.rope(&pos, cfg.heads, ROPE_BASE)?;
            let v = h.matmul(&p.wv)?;
            let k_all = Var::concat_rows(&[Var::constant(kc.clone()), k])?;
            let v_all = Var::concat_rows(&[Var::constant(vc.clone()), v])?;
            let a = attention(cfg, &q, &k_all, &v_all, &Mask::None)?;
            x = feed_forward(p, &x.add(&a.matmul(&p.wo)?)?)?;
            *kc = k_all.value().clone();
            *vc = v_all.value().clone();
        }
        cache.next_pos += 1;
        let logits = x.layer_norm(&w.lnf_g, &w.lnf_b, LN_EPS)?.matmul(&w.head)?;
        Tensor::new(vec![cfg.vocab], logits.value().data().to_vec())
    })
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding until `stop` or `max_new` tokens; `stop` is not returned.
pub fn generate(
    params: &BackboneParams,
    visual: &FeatureSeq,
    prompt: &[u32],
    max_new: usize,
    stop: u32,
) -> Result<Vec<u32>> {
    let (mut cache, mut logits) = prefill(params, visual, prompt)?;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let next = argmax(logits.data());
        if next == stop {
            break;
        }
        out.push(next);
        logits = decode_step(params, &mut cache, next)?;
    }
    Ok(out)
}
