//! Patch projection and marker cross-attention.
//!
//! Pixel patches are projected linearly to `D` dimensions. `FRAME` and
//! `LINE` markers start from learnable embeddings and then each attends once
//! over the patch embeddings it covers (its frame, or its row), with a
//! residual update. Patch rows pass through the cross-attention untouched.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{params, Binder, Mask, Parameters, RowMix, Tensor, Var};
use crate::videotok::{TokenKind, TokenRecord, TokenStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.heads == 0 {
            bail!(Config, "patch, dim and heads must be positive");
        }
        if self.dim % self.heads != 0 {
            bail!(Config, "dim {} is not divisible by {} heads", self.dim, self.heads);
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams {
    pub config: PatchEmbedConfig,
    /// `3P² × D`
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub line: Tensor,
    pub frame: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl PatchEmbedParams {
    /// Projection `~N(0, 1/√(3P²))`, attention `~N(0, 1/√D)`, biases and
    /// marker embeddings zero.
    pub fn init(config: PatchEmbedConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.patch_len(), config.dim);
        let sa = 1.0 / (d as f64).sqrt();
        Ok(PatchEmbedParams {
            config,
            w_p: Tensor::randn(&[k, d], 1.0 / (k as f64).sqrt(), rng),
            b_p: Tensor::zeros(&[d]),
            line: Tensor::zeros(&[1, d]),
            frame: Tensor::zeros(&[1, d]),
            w_q: Tensor::randn(&[d, d], sa, rng),
            w_k: Tensor::randn(&[d, d], sa, rng),
            w_v: Tensor::randn(&[d, d], sa, rng),
            w_o: Tensor::randn(&[d, d], sa, rng),
        })
    }

    /// All-zero parameters of the right shapes, e.g. as a load target.
    pub fn zeros(config: PatchEmbedConfig) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.patch_len(), config.dim);
        Ok(PatchEmbedParams {
            config,
            w_p: Tensor::zeros(&[k, d]),
            b_p: Tensor::zeros(&[d]),
            line: Tensor::zeros(&[1, d]),
            frame: Tensor::zeros(&[1, d]),
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
        })
    }

    /// Graph leaves for one forward pass, registered under `prefix`.
    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> PatchEmbedVars {
        let mut b = |n: &str, t: &Tensor| binder.bind(&format!("{prefix}{n}"), t);
        PatchEmbedVars {
            config: self.config,
            w_p: b("w_p", &self.w_p),
            b_p: b("b_p", &self.b_p),
            line: b("line", &self.line),
            frame: b("frame", &self.frame),
            w_q: b("w_q", &self.w_q),
            w_k: b("w_k", &self.w_k),
            w_v: b("w_v", &self.w_v),
            w_o: b("w_o", &self.w_o),
        }
    }

    pub fn constants(&self) -> PatchEmbedVars {
        let c = |t: &Tensor| Var::constant(t.clone());
        PatchEmbedVars {
            config: self.config,
            w_p: c(&self.w_p),
            b_p: c(&self.b_p),
            line: c(&self.line),
            frame: c(&self.frame),
            w_q: c(&self.w_q),
            w_k: c(&self.w_k),
            w_v: c(&self.w_v),
            w_o: c(&self.w_o),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(self.config).expect("config serializes");
        params::save_dir(dir, self, cfg).map(|_| ())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = params::read_manifest(dir)?;
        let config: PatchEmbedConfig = serde_json::from_value(manifest.config)
            .map_err(|e| crate::Error::Format(format!("patch-embed config: {e}")))?;
        let mut p = PatchEmbedParams::zeros(config)?;
        params::load_dir(dir, &mut p)?;
        Ok(p)
    }
}

impl Parameters for PatchEmbedParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_p", &self.w_p);
        f("b_p", &self.b_p);
        f("line", &self.line);
        f("frame", &self.frame);
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("w_o", &self.w_o);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_p", &mut self.w_p);
        f("b_p", &mut self.b_p);
        f("line", &mut self.line);
        f("frame", &mut self.frame);
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("w_o", &mut self.w_o);
    }
}

/// Parameters as graph nodes.
#[derive(Clone, Debug)]
pub struct PatchEmbedVars {
    pub config: PatchEmbedConfig,
    pub w_p: Var,
    pub b_p: Var,
    pub line: Var,
    pub frame: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Per-token bookkeeping that travels with the features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub kind: TokenKind,
    /// First frame covered.
    pub t: usize,
    /// Last frame covered; equals `t` until the token absorbs later frames.
    pub t_last: usize,
    pub r: usize,
    /// Column for patches; zero for markers.
    pub c: usize,
    /// Patch grid `(rows, cols)` of frame `t`.
    pub grid: (usize, usize),
    pub merge_count: usize,
    /// Sequence position used for rotary encoding; kept through merging.
    pub pos: usize,
}

/// `N×D` features with one metadata entry per row.
#[derive(Clone, Debug)]
pub struct FeatureSeq {
    pub features: Var,
    pub meta: Vec<TokenMeta>,
}

impl FeatureSeq {
    pub fn new(features: Var, meta: Vec<TokenMeta>) -> Result<Self> {
        if features.rows() != meta.len() {
            bail!(Dimension, "{} feature rows for {} metadata entries", features.rows(), meta.len());
        }
        if meta.iter().any(|m| m.merge_count == 0) {
            bail!(Contract, "merge_count must be at least 1");
        }
        Ok(FeatureSeq { features, meta })
    }

    /// A sequence in tokenizer order built from `T·rows·cols` patch feature
    /// rows (frame-major, raster within a frame). With `markers`, zero
    /// `FRAME`/`LINE` rows are interleaved.
    pub fn from_patch_grid(patches: &Tensor, t: usize, rows: usize, cols: usize, markers: bool) -> Result<Self> {
        let g = rows * cols;
        if patches.rows() != t * g || t == 0 || g == 0 {
            bail!(Dimension, "{} patch rows for {t} frames of {rows}×{cols}", patches.rows());
        }
        let d = patches.cols();
        let mut data = Vec::new();
        let mut meta = Vec::new();
        let mut push = |kind, ti, r, c, row: &[f64], meta: &mut Vec<TokenMeta>| {
            data.extend_from_slice(row);
            meta.push(TokenMeta {
                kind,
                t: ti,
                t_last: ti,
                r,
                c,
                grid: (rows, cols),
                merge_count: 1,
                pos: meta.len(),
            });
        };
        let zero = vec![0.0; d];
        for ti in 0..t {
            if markers {
                push(TokenKind::FrameMark, ti, 0, 0, &zero, &mut meta);
            }
            for r in 0..rows {
                for c in 0..cols {
                    push(TokenKind::Patch, ti, r, c, patches.row(ti * g + r * cols + c), &mut meta);
                }
                if markers {
                    push(TokenKind::LineMark, ti, r, 0, &zero, &mut meta);
                }
            }
        }
        let n = meta.len();
        FeatureSeq::new(Var::constant(Tensor::new(vec![n, d], data)?), meta)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn total_merge_count(&self) -> usize {
        self.meta.iter().map(|m| m.merge_count).sum()
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        self.meta.iter().filter(|m| m.kind == kind).count()
    }
}

/// Embeds the visual records of `stream`; text records are skipped.
pub fn embed(stream: &TokenStream, vars: &PatchEmbedVars) -> Result<FeatureSeq> {
    let cfg = vars.config;
    let k = cfg.patch_len();
    let mut payload = Vec::new();
    let mut n_patch = 0usize;
    let mut meta = Vec::new();
    // source row per output: patch index, or the marker rows appended after patches
    let mut src = Vec::new();
    enum Src {
        Patch(usize),
        Line,
        Frame,
    }
    let mut grids = Vec::<(usize, usize)>::new();
    for layout in crate::videotok::detokenize_layout(stream)? {
        grids.push((layout.rows, layout.cols));
    }
    for rec in stream.records() {
        let (kind, t, r, c, s) = match rec {
            TokenRecord::Patch { t, r, c, pixels } => {
                if pixels.len() != k {
                    bail!(Contract, "patch payload has {} values, expected {k}", pixels.len());
                }
                payload.extend_from_slice(pixels);
                n_patch += 1;
                (TokenKind::Patch, *t, *r, *c, Src::Patch(n_patch - 1))
            }
            TokenRecord::LineMark { t, r } => (TokenKind::LineMark, *t, *r, 0, Src::Line),
            TokenRecord::FrameMark { t } => (TokenKind::FrameMark, *t, 0, 0, Src::Frame),
            TokenRecord::Text { .. } => continue,
        };
        meta.push(TokenMeta {
            kind,
            t,
            t_last: t,
            r,
            c,
            grid: grids[t],
            merge_count: 1,
            pos: meta.len(),
        });
        src.push(s);
    }
    if meta.is_empty() {
        bail!(Input, "stream holds no visual records");
    }
    let line_row = n_patch;
    let frame_row = n_patch + 1;
    let order: Vec<usize> = src
        .iter()
        .map(|s| match s {
            Src::Patch(i) => *i,
            Src::Line => line_row,
            Src::Frame => frame_row,
        })
        .collect();
    let (line, frame) = (vars.line.clone(), vars.frame.clone());
    if n_patch == 0 {
        bail!(Structure, "stream holds markers but no patches");
    }
    let x = Var::constant(Tensor::new(vec![n_patch, k], payload)?);
    let proj = x.matmul(&vars.w_p)?.add_row(&vars.b_p)?;
    let stacked = Var::concat_rows(&[proj, line, frame])?;
    FeatureSeq::new(stacked.gather_rows(&order)?, meta)
}

/// Index groups each marker attends over: its frame's patches for `FRAME`,
/// its row's patches for `LINE`.
fn marker_groups(meta: &[TokenMeta]) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let mut markers = Vec::new();
    let mut groups = Vec::new();
    for (i, m) in meta.iter().enumerate() {
        let group: Vec<usize> = match m.kind {
            TokenKind::FrameMark => meta
                .iter()
                .enumerate()
                .filter(|(_, p)| p.kind == TokenKind::Patch && p.t == m.t)
                .map(|(j, _)| j)
                .collect(),
            TokenKind::LineMark => meta
                .iter()
                .enumerate()
                .filter(|(_, p)| p.kind == TokenKind::Patch && p.t == m.t && p.r == m.r)
                .map(|(j, _)| j)
                .collect(),
            _ => continue,
        };
        if group.is_empty() {
            bail!(Structure, "{:?} at frame {} row {} covers no patches", m.kind, m.t, m.r);
        }
        markers.push(i);
        groups.push(group);
    }
    Ok((markers, groups))
}

/// Residual multi-head attention from each marker over the patches it covers.
pub fn marker_cross_attend(seq: &FeatureSeq, vars: &PatchEmbedVars) -> Result<FeatureSeq> {
    let cfg = vars.config;
    let (markers, groups) = marker_groups(&seq.meta)?;
    if markers.is_empty() {
        return Ok(seq.clone());
    }
    let patches: Vec<usize> = seq
        .meta
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind == TokenKind::Patch)
        .map(|(i, _)| i)
        .collect();
    let mut col_of = vec![usize::MAX; seq.len()];
    for (j, &p) in patches.iter().enumerate() {
        col_of[p] = j;
    }
    let mut allowed = vec![false; markers.len() * patches.len()];
    for (i, g) in groups.iter().enumerate() {
        for &p in g {
            allowed[i * patches.len() + col_of[p]] = true;
        }
    }
    let mask = Mask::Allowed(Rc::new(allowed));

    let m = seq.features.gather_rows(&markers)?;
    let p = seq.features.gather_rows(&patches)?;
    let q = m.matmul(&vars.w_q)?;
    let k = p.matmul(&vars.w_k)?;
    let v = p.matmul(&vars.w_v)?;
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * dh, dh)?,
            k.slice_cols(h * dh, dh)?,
            v.slice_cols(h * dh, dh)?,
        );
        let a = qh.matmul_t(&kh)?.scale(scale)?.softmax_rows(&mask)?;
        heads.push(a.matmul(&vh)?);
    }
    let updated = m.add(&Var::concat_cols(&heads)?.matmul(&vars.w_o)?)?;

    // reassemble: patch rows are copied, marker rows come from `updated`
    let n_p = patches.len();
    let mut marker_slot = vec![usize::MAX; seq.len()];
    for (j, &mi) in markers.iter().enumerate() {
        marker_slot[mi] = n_p + j;
    }
    let order: Vec<usize> = (0..seq.len())
        .map(|i| if marker_slot[i] != usize::MAX { marker_slot[i] } else { col_of[i] })
        .collect();
    let parts = if n_p > 0 { vec![p, updated] } else { vec![updated] };
    let stacked = Var::concat_rows(&parts)?;
    let mix = Rc::new(RowMix::gather(&order));
    FeatureSeq::new(stacked.row_mix(mix)?, seq.meta.clone())
}

/// Attention weights each marker assigns to the patches it covers, one
/// vector per head per marker, in marker order.
pub fn marker_attention_weights(seq: &FeatureSeq, vars: &PatchEmbedVars) -> Result<Vec<Vec<Vec<f64>>>> {
    let cfg = vars.config;
    let (markers, groups) = marker_groups(&seq.meta)?;
    let dh = cfg.dim / cfg.heads;
    let q = seq.features.value().matmul(vars.w_q.value())?;
    let k = seq.features.value().matmul(vars.w_k.value())?;
    let mut out = Vec::new();
    for (&mi, g) in markers.iter().zip(&groups) {
        let per_head = (0..cfg.heads)
            .map(|h| {
                let cols = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = g
                    .iter()
                    .map(|&p| crate::numerics::dot(&q.row(mi)[cols.clone()], &k.row(p)[cols.clone()]) / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                scores.iter().map(|s| (s - max).exp() / z).collect()
            })
            .collect();
        out.push(per_head);
    }
    Ok(out)
}
