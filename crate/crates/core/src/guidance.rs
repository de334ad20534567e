//! Auxiliary supervision from teacher features.
//!
//! Three losses are summed: next-token cross-entropy on caption text, a
//! tube-level MSE between L2-normalized student and teacher features, and a
//! symmetric InfoNCE over pooled clip (or frame) vectors with a learnable
//! temperature.
//!
//! Student features come from the last block, after merging. Merged tokens
//! are expanded back to every frame they cover, both sides are pooled to the
//! coarser grid per axis, then averaged over frames per tube. Every student
//! step is linear in the hidden rows, so it is one row mix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{visual_tail, ForwardTrace};
use crate::error::{bail, Error, Result};
use crate::numerics::{elvt, params, Binder, Parameters, RowMix, Tensor, Var};
use crate::patch_embed::FeatureSeq;
use crate::videotok::{TokenKind, VideoClip};

pub const INIT_TEMPERATURE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Mock,
    File,
}

/// Teacher features for one clip: a `G_t × D_t` block per frame, stacked.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    /// `(Σ G_t) × D_t`, frame-major, raster within a frame.
    pub features: Tensor,
    pub grids: Vec<(usize, usize)>,
    pub provider: Provider,
}

impl TeacherFeatures {
    pub fn new(features: Tensor, grids: Vec<(usize, usize)>, provider: Provider) -> Result<Self> {
        let cells: usize = grids.iter().map(|(r, c)| r * c).sum();
        if grids.is_empty() || grids.iter().any(|&(r, c)| r == 0 || c == 0) {
            bail!(Input, "teacher grids must be non-empty");
        }
        if features.rank() != 2 || features.rows() != cells {
            bail!(Dimension, "teacher tensor {:?} for {cells} grid cells", features.shape());
        }
        if !features.is_finite() {
            bail!(Numeric, "teacher features hold non-finite values");
        }
        Ok(TeacherFeatures { features, grids, provider })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_frames(&self) -> usize {
        self.grids.len()
    }

    fn frame_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.grids.len());
        let mut acc = 0;
        for &(r, c) in &self.grids {
            off.push(acc);
            acc += r * c;
        }
        off
    }

    /// Writes `teacher_<id>.elvt` and its `teacher_<id>.json` sidecar.
    pub fn save(&self, dir: &Path, clip_id: &str) -> Result<PathBuf> {
        let path = dir.join(format!("teacher_{clip_id}.elvt"));
        elvt::write(&path, &self.features)?;
        let side = dir.join(format!("teacher_{clip_id}.json"));
        let meta = serde_json::json!({ "grids": self.grids, "dim": self.dim(), "provider": self.provider });
        fs::write(&side, meta.to_string()).map_err(|e| Error::io(&side, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path, clip_id: &str) -> Result<Self> {
        let side = dir.join(format!("teacher_{clip_id}.json"));
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        #[derive(Deserialize)]
        struct Sidecar {
            grids: Vec<(usize, usize)>,
        }
        let meta: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let features = elvt::read(&dir.join(format!("teacher_{clip_id}.elvt")))?;
        TeacherFeatures::new(features, meta.grids, Provider::File)
    }
}

/// `[start, end)` source ranges of adaptive average pooling from `n_in` to
/// `n_out` bins.
pub fn adaptive_bins(n_in: usize, n_out: usize) -> Vec<(usize, usize)> {
    (0..n_out)
        .map(|i| ((i * n_in) / n_out, ((i + 1) * n_in).div_ceil(n_out)))
        .collect()
}

/// Weights pooling an `rows×cols` raster to `out`, as `(cell, weight)` lists.
fn pool_weights(rows: usize, cols: usize, out: (usize, usize)) -> Vec<Vec<(usize, f64)>> {
    let rb = adaptive_bins(rows, out.0);
    let cb = adaptive_bins(cols, out.1);
    let mut res = Vec::with_capacity(out.0 * out.1);
    for &(r0, r1) in &rb {
        for &(c0, c1) in &cb {
            let w = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            let mut cell = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    cell.push((r * cols + c, w));
                }
            }
            res.push(cell);
        }
    }
    res
}

/// Per-frame grid expansion of the surviving student patches: for each
/// frame, the hidden row covering each cell.
pub fn expand_student(hidden: &FeatureSeq) -> Result<Vec<((usize, usize), Vec<usize>)>> {
    let meta = &hidden.meta;
    let mut grids: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut covering: BTreeMap<((usize, usize), usize, usize), Vec<(usize, usize, usize)>> = BTreeMap::new();
    for (i, m) in meta.iter().enumerate() {
        match m.kind {
            TokenKind::FrameMark => {
                grids.insert(m.t, m.grid);
            }
            TokenKind::Patch => covering.entry((m.grid, m.r, m.c)).or_default().push((m.t, m.t_last, i)),
            _ => {}
        }
    }
    if grids.is_empty() {
        bail!(Contract, "no visual frames in the student sequence");
    }
    let mut out = Vec::with_capacity(grids.len());
    for (expected, (&t, &grid)) in grids.iter().enumerate() {
        if t != expected {
            bail!(Structure, "frame markers skip frame {expected}");
        }
        let mut rows = Vec::with_capacity(grid.0 * grid.1);
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                let hit = covering
                    .get(&(grid, r, c))
                    .and_then(|v| v.iter().find(|&&(a, b, _)| a <= t && t <= b));
                let Some(&(_, _, i)) = hit else {
                    bail!(Structure, "no surviving token covers frame {t} cell ({r},{c})");
                };
                rows.push(i);
            }
        }
        out.push((grid, rows));
    }
    Ok(out)
}

/// Geometry-aligned student and teacher features.
#[derive(Clone, Debug)]
pub struct AlignedPairs {
    /// Per-frame aligned cells of the student, `(Σ G'_t) × D`.
    pub student: Var,
    pub teacher: Tensor,
    pub grids: Vec<(usize, usize)>,
}

/// Pools each frame of both sides to the coarser grid per axis.
pub fn align_geometry(hidden: &FeatureSeq, teacher: &TeacherFeatures) -> Result<AlignedPairs> {
    let frames = expand_student(hidden)?;
    if frames.len() != teacher.num_frames() {
        bail!(
            Contract,
            "student has {} frames, teacher {}",
            frames.len(),
            teacher.num_frames()
        );
    }
    let offsets = teacher.frame_offsets();
    let mut s_rows = Vec::new();
    let mut t_rows = Vec::new();
    let mut grids = Vec::new();
    for (f, ((sg, cell_rows), &tg)) in frames.iter().zip(&teacher.grids).enumerate() {
        let out = (sg.0.min(tg.0), sg.1.min(tg.1));
        for cell in pool_weights(sg.0, sg.1, out) {
            // several cells may map to one merged row; weights add up
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (k, w) in cell {
                *acc.entry(cell_rows[k]).or_default() += w;
            }
            s_rows.push(acc.into_iter().collect());
        }
        for cell in pool_weights(tg.0, tg.1, out) {
            t_rows.push(cell.into_iter().map(|(k, w)| (offsets[f] + k, w)).collect());
        }
        grids.push(out);
    }
    Ok(AlignedPairs {
        student: hidden.features.row_mix(Rc::new(RowMix { rows: s_rows }))?,
        teacher: RowMix { rows: t_rows }.apply(&teacher.features)?,
        grids,
    })
}

/// Tube-mean weights over aligned per-frame cells: frames sharing an aligned
/// grid are averaged cell by cell.
fn tube_mix(grids: &[(usize, usize)]) -> RowMix {
    let mut tubes: Vec<((usize, usize), Vec<Vec<usize>>)> = Vec::new();
    let mut offset = 0;
    for &g in grids {
        let n = g.0 * g.1;
        let slot = match tubes.iter().position(|(k, _)| *k == g) {
            Some(i) => i,
            None => {
                tubes.push((g, vec![Vec::new(); n]));
                tubes.len() - 1
            }
        };
        for (cell, members) in tubes[slot].1.iter_mut().enumerate() {
            members.push(offset + cell);
        }
        offset += n;
    }
    let groups: Vec<Vec<usize>> = tubes.into_iter().flat_map(|(_, g)| g).collect();
    RowMix::group_means(&groups)
}

/// MSE between row-normalized tube vectors of equal shape.
pub fn normalized_mse(student: &Var, teacher: &Var) -> Result<Var> {
    student
        .l2_normalize_rows()?
        .sub(&teacher.l2_normalize_rows()?)
        .and_then(|d| d.mul(&d))?
        .mean()
}

/// Tube-level alignment loss; `proj` maps student width to teacher width.
pub fn tube_mse(pairs: &AlignedPairs, proj: &Var) -> Result<Var> {
    let mix = tube_mix(&pairs.grids);
    let s = pairs.student.row_mix(Rc::new(mix.clone()))?;
    let t = Var::constant(mix.apply(&pairs.teacher)?);
    if proj.rows() != s.cols() || proj.cols() != t.cols() {
        bail!(Dimension, "projection {:?} cannot map width {} to {}", proj.shape(), s.cols(), t.cols());
    }
    normalized_mse(&s.matmul(proj)?, &t)
}

/// Symmetric InfoNCE over `B` paired rows, averaged over the batch and the
/// two directions. Rows are L2-normalized first; logits are
/// `exp(log_tau) · ⟨s_i, t_j⟩`.
pub fn frame_contrastive(student: &Var, teacher: &Var, log_tau: &Var) -> Result<Var> {
    let b = student.rows();
    if b == 0 || student.value().numel() == 0 {
        bail!(Contract, "contrastive loss needs at least one pair");
    }
    if teacher.shape() != student.shape() {
        bail!(Dimension, "contrastive pairs {:?} and {:?}", student.shape(), teacher.shape());
    }
    let s = student.l2_normalize_rows()?;
    let t = teacher.l2_normalize_rows()?;
    let logits = s.matmul_t(&t)?.scale_by(&log_tau.exp()?)?;
    let diag: Vec<usize> = (0..b).collect();
    let a = logits.softmax_ce(&diag)?;
    let c = logits.transpose()?.softmax_ce(&diag)?;
    a.add(&c)?.scale(0.5)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastUnit {
    /// One vector per clip: frame vectors averaged.
    #[default]
    Clip,
    /// One vector per frame.
    Frame,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastSource {
    /// Final-layer `FRAME` marker features.
    #[default]
    FrameToken,
    /// Mean of the frame's expanded patch features.
    PooledPatches,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Off in the instruction-tuning stage: only the generative loss remains.
    pub auxiliary: bool,
    pub unit: ContrastUnit,
    pub source: ContrastSource,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            auxiliary: true,
            unit: ContrastUnit::Clip,
            source: ContrastSource::FrameToken,
        }
    }
}

/// Projection from student width to teacher width plus the log-temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceParams {
    pub proj: Tensor,
    pub log_tau: Tensor,
}

impl GuidanceParams {
    pub fn init(student_dim: usize, teacher_dim: usize, rng: &mut impl Rng) -> Self {
        GuidanceParams {
            proj: Tensor::randn(&[student_dim, teacher_dim], 1.0 / (student_dim as f64).sqrt(), rng),
            log_tau: Tensor::scalar(INIT_TEMPERATURE.ln()),
        }
    }

    pub fn zeros(student_dim: usize, teacher_dim: usize) -> Self {
        GuidanceParams {
            proj: Tensor::zeros(&[student_dim, teacher_dim]),
            log_tau: Tensor::scalar(0.0),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_tau.item().exp()
    }

    pub fn bind(&self, binder: &mut Binder, prefix: &str) -> GuidanceVars {
        GuidanceVars {
            proj: binder.bind(&format!("{prefix}proj"), &self.proj),
            log_tau: binder.bind(&format!("{prefix}log_tau"), &self.log_tau),
        }
    }

    pub fn constants(&self) -> GuidanceVars {
        GuidanceVars {
            proj: Var::constant(self.proj.clone()),
            log_tau: Var::constant(self.log_tau.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::json!({ "student_dim": self.proj.rows(), "teacher_dim": self.proj.cols() });
        params::save_dir(dir, self, cfg).map(|_| ())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = params::read_manifest(dir)?;
        let dims = |k: &str| m.config[k].as_u64().map(|v| v as usize);
        let (Some(s), Some(t)) = (dims("student_dim"), dims("teacher_dim")) else {
            bail!(Format, "guidance manifest lacks dimensions");
        };
        let mut p = GuidanceParams::zeros(s, t);
        params::load_dir(dir, &mut p)?;
        Ok(p)
    }
}

impl Parameters for GuidanceParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("proj", &self.proj);
        f("log_tau", &self.log_tau);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("proj", &mut self.proj);
        f("log_tau", &mut self.log_tau);
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceVars {
    pub proj: Var,
    pub log_tau: Var,
}

/// One training example as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceItem<'a> {
    pub trace: &'a ForwardTrace,
    pub teacher: &'a TeacherFeatures,
    /// The text fed after the visual tokens.
    pub text: &'a [u32],
    /// Index of the first text token that is a prediction target (≥ 1).
    pub loss_start: usize,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub l_gen: Var,
    pub l_mse: Var,
    pub l_con: Var,
    pub total: Var,
    pub temperature: f64,
}

impl LossBreakdown {
    pub fn values(&self) -> [f64; 4] {
        [self.l_gen.item(), self.l_mse.item(), self.l_con.item(), self.total.item()]
    }
}

/// Mean next-token cross-entropy over `text[loss_start..]`.
pub fn generative_loss(trace: &ForwardTrace, text: &[u32], loss_start: usize) -> Result<Var> {
    if loss_start == 0 || loss_start >= text.len() {
        bail!(Input, "loss start {loss_start} must lie in 1..{}", text.len());
    }
    let Some(logits) = &trace.logits else {
        bail!(Contract, "trace carries no text logits");
    };
    let rows: Vec<usize> = (loss_start - 1..text.len() - 1).collect();
    let targets: Vec<usize> = text[loss_start..].iter().map(|&t| t as usize).collect();
    logits.gather_rows(&rows)?.softmax_ce(&targets)
}

fn contrast_vectors(
    trace: &ForwardTrace,
    teacher: &TeacherFeatures,
    cfg: &GuidanceConfig,
) -> Result<(Var, Tensor)> {
    let tail = visual_tail(trace)?;
    let frames = tail.frame_rows.len();
    if frames != teacher.num_frames() {
        bail!(Contract, "student has {frames} frames, teacher {}", teacher.num_frames());
    }
    let student_frames = match cfg.source {
        ContrastSource::FrameToken => tail.frame_tokens.clone(),
        ContrastSource::PooledPatches => {
            let groups: Vec<Vec<usize>> = expand_student(&trace.hidden)?.into_iter().map(|(_, r)| r).collect();
            let mix = RowMix::group_means(&groups);
            tail.features.row_mix(Rc::new(mix))?
        }
    };
    let offs = teacher.frame_offsets();
    let t_groups: Vec<Vec<usize>> = teacher
        .grids
        .iter()
        .zip(&offs)
        .map(|(&(r, c), &o)| (o..o + r * c).collect())
        .collect();
    let teacher_frames = RowMix::group_means(&t_groups).apply(&teacher.features)?;
    match cfg.unit {
        ContrastUnit::Frame => Ok((student_frames, teacher_frames)),
        ContrastUnit::Clip => {
            let all = Rc::new(RowMix::group_means(&[(0..frames).collect()]));
            Ok((student_frames.row_mix(all.clone())?, all.apply(&teacher_frames)?))
        }
    }
}

/// `l_gen + l_mse + l_con` over a batch. With `auxiliary` off the two
/// alignment terms are constant zeros and carry no gradient.
pub fn total_loss(items: &[GuidanceItem], head: &GuidanceVars, cfg: &GuidanceConfig) -> Result<LossBreakdown> {
    if items.is_empty() {
        bail!(Contract, "empty batch");
    }
    let inv_b = 1.0 / items.len() as f64;
    let mut gens = Vec::with_capacity(items.len());
    for it in items {
        gens.push(generative_loss(it.trace, it.text, it.loss_start)?);
    }
    let l_gen = batch_mean(&gens, inv_b)?;
    let zero = || Var::constant(Tensor::scalar(0.0));
    let (l_mse, l_con) = if cfg.auxiliary {
        let mut mses = Vec::with_capacity(items.len());
        let mut s_vecs = Vec::new();
        let mut t_vecs = Vec::new();
        for it in items {
            let pairs = align_geometry(&it.trace.hidden, it.teacher)?;
            mses.push(tube_mse(&pairs, &head.proj)?);
            let (s, t) = contrast_vectors(it.trace, it.teacher, cfg)?;
            s_vecs.push(s.matmul(&head.proj)?);
            t_vecs.push(Var::constant(t));
        }
        let l_mse = batch_mean(&mses, inv_b)?;
        let l_con = frame_contrastive(
            &Var::concat_rows(&s_vecs)?,
            &Var::concat_rows(&t_vecs)?,
            &head.log_tau,
        )?;
        (l_mse, l_con)
    } else {
        (zero(), zero())
    };
    let total = l_gen.add(&l_mse)?.add(&l_con)?;
    Ok(LossBreakdown {
        temperature: head.log_tau.item().exp(),
        l_gen,
        l_mse,
        l_con,
        total,
    })
}

fn batch_mean(xs: &[Var], inv_b: f64) -> Result<Var> {
    let mut acc = xs[0].clone();
    for x in &xs[1..] {
        acc = acc.add(x)?;
    }
    acc.scale(inv_b)
}

/// Deterministic stand-in teacher. For every cell of each frame's grid the
/// per-channel pixel mean and standard deviation plus a constant 1 form a
/// 7-vector, mapped to `dim` by a seeded Gaussian matrix.
pub fn mock_teacher(clip: &VideoClip, grids: &[(usize, usize)], dim: usize, seed: u64) -> Result<TeacherFeatures> {
    if grids.len() != clip.num_frames() {
        bail!(Contract, "{} grids for {} frames", grids.len(), clip.num_frames());
    }
    let map = Tensor::randn(&[7, dim], 1.0 / 7f64.sqrt(), &mut ChaCha8Rng::seed_from_u64(seed));
    let (h, w) = (clip.height(), clip.width());
    let mut stats = Vec::new();
    for (t, &(rows, cols)) in grids.iter().enumerate() {
        if rows == 0 || cols == 0 || rows > h || cols > w {
            bail!(Input, "teacher grid {rows}×{cols} does not fit a {h}×{w} frame");
        }
        let px = clip.frame(t);
        for &(y0, y1) in &adaptive_bins(h, rows) {
            for &(x0, x1) in &adaptive_bins(w, cols) {
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..3 {
                    let plane = &px[ch * h * w..(ch + 1) * h * w];
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for y in y0..y1 {
                        for &v in &plane[y * w + x0..y * w + x1] {
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let mean = s / n;
                    stats.push(mean);
                    stats.push((s2 / n - mean * mean).max(0.0).sqrt());
                }
                stats.push(1.0);
            }
        }
    }
    let cells = stats.len() / 7;
    let x = Tensor::new(vec![cells, 7], stats)?;
    TeacherFeatures::new(x.matmul(&map)?, grids.to_vec(), Provider::Mock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_many};

    fn grid_seq(rows: &[Vec<f64>], t: usize, gr: usize, gc: usize) -> FeatureSeq {
        FeatureSeq::from_patch_grid(&Tensor::from_rows(rows).unwrap(), t, gr, gc, true).unwrap()
    }

    #[test]
    fn adaptive_bins_examples() {
        assert_eq!(adaptive_bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(adaptive_bins(3, 2), vec![(0, 2), (1, 3)]);
        assert_eq!(adaptive_bins(2, 2), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn four_by_four_student_pools_to_two_by_two() {
        let rows: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64]).collect();
        let s = grid_seq(&rows, 1, 4, 4);
        let teacher = TeacherFeatures::new(Tensor::full(&[4, 1], 1.0), vec![(2, 2)], Provider::Mock).unwrap();
        let p = align_geometry(&s, &teacher).unwrap();
        // top-left block holds 0, 1, 4, 5
        assert_eq!(p.student.value().data(), &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(p.grids, vec![(2, 2)]);
    }

    #[test]
    fn three_by_three_matches_binning_oracle() {
        let rows: Vec<Vec<f64>> = (0..9).map(|i| vec![(i * i) as f64, 1.0]).collect();
        let s = grid_seq(&rows, 1, 3, 3);
        let teacher = TeacherFeatures::new(Tensor::full(&[4, 2], 1.0), vec![(2, 2)], Provider::Mock).unwrap();
        let p = align_geometry(&s, &teacher).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (r0, r1) = (i * 3 / 2, ((i + 1) * 3usize).div_ceil(2));
                let (c0, c1) = (j * 3 / 2, ((j + 1) * 3usize).div_ceil(2));
                let mut acc = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += ((r * 3 + c) * (r * 3 + c)) as f64;
                    }
                }
                let want = acc / ((r1 - r0) * (c1 - c0)) as f64;
                assert!((p.student.value().row(i * 2 + j)[0] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_grids_pair_identically_and_frame_mismatch_errors() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let s = grid_seq(&rows, 1, 2, 2);
        let teacher = TeacherFeatures::new(Tensor::full(&[4, 1], 1.0), vec![(2, 2)], Provider::Mock).unwrap();
        let p = align_geometry(&s, &teacher).unwrap();
        assert_eq!(p.student.value().data(), &[0.0, 1.0, 2.0, 3.0]);
        let two = TeacherFeatures::new(Tensor::full(&[8, 1], 1.0), vec![(2, 2); 2], Provider::Mock).unwrap();
        assert!(matches!(align_geometry(&s, &two), Err(Error::Contract(_))));
    }

    #[test]
    fn merged_tokens_expand_to_every_covered_frame() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = grid_seq(&rows, 3, 1, 1);
        let (m, _) = crate::merge::threshold_merge(&s, 0.6).unwrap();
        let e = expand_student(&m).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].1, e[1].1);
        assert_ne!(e[1].1, e[2].1);
    }

    #[test]
    fn mse_identities() {
        let a = Var::constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = Var::constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        assert_eq!(normalized_mse(&a, &b).unwrap().item(), 1.0);
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, 0.5]]).unwrap();
        let y = Var::constant(Tensor::new(vec![2, 3], x.data().iter().map(|v| 3.0 * v).collect()).unwrap());
        assert!(normalized_mse(&Var::constant(x.clone()), &y).unwrap().item() <= 1e-12);
        let z = Var::constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(normalized_mse(&z, &y), Err(Error::Numeric(_))));
    }

    #[test]
    fn contrastive_identities() {
        let lt = Var::constant(Tensor::scalar(10f64.ln()));
        let one = Var::constant(Tensor::from_rows(&[vec![0.2, 0.7]]).unwrap());
        assert_eq!(frame_contrastive(&one, &one, &lt).unwrap().item(), 0.0);
        let eq = Var::constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let l = frame_contrastive(&eq, &eq, &lt).unwrap().item();
        assert!((l - 2f64.ln()).abs() <= 1e-9);
        let ortho = Var::constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let big = Var::constant(Tensor::scalar(60f64.ln()));
        assert!(frame_contrastive(&ortho, &ortho, &big).unwrap().item() < 1e-20);
        let s = Var::constant(Tensor::from_rows(&[vec![1.0, 0.3], vec![-0.2, 0.9], vec![0.5, 0.5]]).unwrap());
        let t = Var::constant(Tensor::from_rows(&[vec![0.1, 1.0], vec![1.0, 0.0], vec![0.7, -0.4]]).unwrap());
        let ab = frame_contrastive(&s, &t, &lt).unwrap().item();
        let ba = frame_contrastive(&t, &s, &lt).unwrap().item();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0);
    }

    #[test]
    fn loss_gradients() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, 0.5]]).unwrap();
        let y = Var::constant(Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![0.5, -1.0, 0.7]]).unwrap());
        let rep = grad_check(|v| normalized_mse(v, &y), &x, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        let tv = Tensor::from_rows(&[vec![0.3, 0.1], vec![0.2, -0.5], vec![1.0, 0.4]]).unwrap();
        let sv = Tensor::from_rows(&[vec![0.9, 0.1], vec![-0.2, 0.5], vec![0.3, 0.3]]).unwrap();
        let rep = grad_check_many(
            |v| frame_contrastive(&v[0], &v[1], &v[2]),
            &[sv, tv, Tensor::scalar(1.0)],
            1e-6,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn mock_teacher_determinism_and_locality() {
        let mut data = vec![0.5; 2 * 3 * 4 * 4];
        let a = VideoClip::from_frames(2, 4, 4, data.clone(), "a").unwrap();
        let ta = mock_teacher(&a, &[(2, 2), (2, 2)], 5, 9).unwrap();
        assert_eq!(ta.features.row(0), ta.features.row(4));
        assert_eq!(ta, mock_teacher(&a, &[(2, 2), (2, 2)], 5, 9).unwrap());
        // change pixel (y=3, x=3) of frame 0, red channel: bottom-right cell only
        data[3 * 4 + 3] = 0.9;
        let b = VideoClip::from_frames(2, 4, 4, data, "b").unwrap();
        let tb = mock_teacher(&b, &[(2, 2), (2, 2)], 5, 9).unwrap();
        let changed: Vec<usize> = (0..8).filter(|&i| ta.features.row(i) != tb.features.row(i)).collect();
        assert_eq!(changed, vec![3]);
    }

    #[test]
    fn teacher_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TeacherFeatures::new(Tensor::full(&[5, 3], 0.25), vec![(2, 2), (1, 1)], Provider::Mock).unwrap();
        t.save(dir.path(), "clip7").unwrap();
        let back = TeacherFeatures::load(dir.path(), "clip7").unwrap();
        assert_eq!(back.features, t.features);
        assert_eq!(back.grids, t.grids);
        assert_eq!(back.provider, Provider::File);
    }
}
