//! Prefill cost accounting.
//!
//! Counts are multiply-adds (MACs); FLOPs are twice that. A block over `N`
//! tokens of width `D` costs `4·N·D²` for the four projections, `2·N²·D`
//! for the score and value products (the full score matrix is formed and
//! then masked), and `2·N·D·D_ff` for the feed-forward pair. The output head
//! adds `text·D·V`.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{decode_step, prefill, BackboneConfig, BackboneParams};
use crate::error::{bail, Result};
use crate::merge::MergeConfig;
use crate::numerics::count_macs;
use crate::patch_embed::FeatureSeq;
use crate::videotok::{frame_token_count, ResolutionPolicy, Tier};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    /// Tokens processed by the block, text included.
    pub tokens: u64,
    pub projections: u64,
    pub scores: u64,
    pub feed_forward: u64,
}

impl LayerMacs {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.feed_forward
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub label: String,
    pub layers: Vec<LayerMacs>,
    pub head_macs: u64,
    /// Per-frame vision-encoder cost, for the encoder-based baseline.
    pub encoder_macs: u64,
    pub total_macs: u64,
    pub measured_macs: Option<u64>,
}

impl FlopsReport {
    pub fn total_flops(&self) -> f64 {
        2.0 * self.total_macs as f64
    }

    /// `|analytic − measured| / measured`, when a measurement is attached.
    pub fn relative_gap(&self) -> Option<f64> {
        self.measured_macs
            .map(|m| (self.total_macs as f64 - m as f64).abs() / m.max(1) as f64)
    }
}

/// Closed-form prefill MACs. `visual[l]` is the visual token count entering
/// block `l`; `text_len` text tokens ride along in every block.
pub fn analytic_flops(visual: &[usize], cfg: &BackboneConfig, text_len: usize, label: &str) -> Result<FlopsReport> {
    if visual.len() != cfg.depth {
        bail!(Dimension, "{} layer counts for depth {}", visual.len(), cfg.depth);
    }
    let (d, f, v) = (cfg.dim as u64, cfg.ff as u64, cfg.vocab as u64);
    let layers: Vec<LayerMacs> = visual
        .iter()
        .map(|&nv| {
            let n = (nv + text_len) as u64;
            LayerMacs {
                tokens: n,
                projections: 4 * n * d * d,
                scores: 2 * n * n * d,
                feed_forward: 2 * n * d * f,
            }
        })
        .collect();
    let head_macs = text_len as u64 * d * v;
    let total_macs = layers.iter().map(LayerMacs::total).sum::<u64>() + head_macs;
    Ok(FlopsReport {
        label: label.to_string(),
        layers,
        head_macs,
        encoder_macs: 0,
        total_macs,
        measured_macs: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillMeasurement {
    pub runs_secs: Vec<f64>,
    pub median_secs: f64,
    /// Median prefill time plus one decode step.
    pub ttft_secs: f64,
    pub counts: Vec<usize>,
    pub instrumented_macs: u64,
    pub analytic: FlopsReport,
    pub advisory: Option<String>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One timed prefill plus one decode step; returns both times and the
/// multiply-adds of the prefill.
fn time_once(params: &BackboneParams, visual: &FeatureSeq, text: &[u32]) -> Result<(f64, f64, u64)> {
    let start = Instant::now();
    let (res, macs) = count_macs(|| prefill(params, visual, text));
    let secs = start.elapsed().as_secs_f64();
    let (mut cache, logits) = res?;
    let next = logits
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i as u32);
    let start = Instant::now();
    decode_step(params, &mut cache, next)?;
    Ok((secs, start.elapsed().as_secs_f64(), macs))
}

fn summarize(
    params: &BackboneParams,
    visual: &FeatureSeq,
    text: &[u32],
    runs: Vec<(f64, f64, u64)>,
) -> Result<PrefillMeasurement> {
    let trace = crate::numerics::no_grad(|| crate::backbone::forward(&params.constants(), visual, text))?;
    let counts = trace.counts;
    let visual_counts: Vec<usize> = counts[..params.config.depth].iter().map(|n| n - text.len()).collect();
    let mut analytic = analytic_flops(&visual_counts, &params.config, text.len(), "measured")?;
    let macs = runs.last().map_or(0, |r| r.2);
    analytic.measured_macs = Some(macs);
    let times: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let decode: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let med = median(&times);
    Ok(PrefillMeasurement {
        advisory: (med < 1e-3).then(|| format!("median prefill {med:.2e}s is below timer resolution; scale the input up")),
        ttft_secs: med + median(&decode),
        runs_secs: times,
        median_secs: med,
        counts,
        instrumented_macs: macs,
        analytic,
    })
}

/// Times `runs` prefills after `warmups` untimed ones and checks the
/// instrumented multiply-adds against the closed form.
pub fn measure_prefill(
    params: &BackboneParams,
    visual: &FeatureSeq,
    text: &[u32],
    warmups: usize,
    runs: usize,
) -> Result<PrefillMeasurement> {
    if runs == 0 {
        bail!(Config, "at least one timed run is needed");
    }
    for _ in 0..warmups {
        prefill(params, visual, text)?;
    }
    let timed = (0..runs).map(|_| time_once(params, visual, text)).collect::<Result<Vec<_>>>()?;
    summarize(params, visual, text, timed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillComparison {
    pub visual_tokens: usize,
    pub without_merge: PrefillMeasurement,
    pub with_merge: PrefillMeasurement,
    /// Median time without merging over median time with it.
    pub speedup: f64,
}

/// Prefill of `frames` random square frames of side `edge` through a model
/// of `config`, with and without merging. Timed runs alternate between the
/// two so drift in machine load hits both alike.
pub fn compare_prefill(
    config: BackboneConfig,
    policy: &ResolutionPolicy,
    frames: usize,
    edge: usize,
    seed: u64,
    warmups: usize,
    runs: usize,
) -> Result<PrefillComparison> {
    use rand::SeedableRng;
    if runs == 0 {
        bail!(Config, "at least one timed run is needed");
    }
    let (rows, cols) = policy.grid(edge, edge, Tier::High);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut on_cfg = config;
    on_cfg.merge.enabled = true;
    let on = BackboneParams::init(on_cfg, &mut rng)?;
    let off = BackboneParams {
        config: BackboneConfig {
            merge: MergeConfig::disabled(),
            ..on_cfg
        },
        weights: on.weights.clone(),
    };
    let x = crate::numerics::Tensor::randn(&[frames * rows * cols, config.dim], 1.0, &mut rng);
    let visual = FeatureSeq::from_patch_grid(&x, frames, rows, cols, true)?;
    let text = crate::videotok::vocab::encode("describe the clip");
    for _ in 0..warmups {
        prefill(&off, &visual, &text)?;
        prefill(&on, &visual, &text)?;
    }
    let (mut t_off, mut t_on) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
    for _ in 0..runs {
        t_off.push(time_once(&off, &visual, &text)?);
        t_on.push(time_once(&on, &visual, &text)?);
    }
    let without_merge = summarize(&off, &visual, &text, t_off)?;
    let with_merge = summarize(&on, &visual, &text, t_on)?;
    Ok(PrefillComparison {
        visual_tokens: visual.len(),
        speedup: without_merge.median_secs / with_merge.median_secs,
        without_merge,
        with_merge,
    })
}

/// A frame mix for schedule simulation: patch grid and frame count per tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGroup {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Count-only merge schedule. The first shallow pass keeps a `keep`
/// fraction of each tube's tokens (later shallow passes find nothing new);
/// each deep layer then applies the configured ratio, never below one
/// token per tube. Returns the visual count entering each block.
pub fn simulate_counts(groups: &[FrameGroup], merge: &MergeConfig, depth: usize, keep: f64) -> Vec<usize> {
    let markers: usize = groups.iter().map(|g| g.frames * (g.rows + 1)).sum();
    let tubes: usize = {
        let mut grids: Vec<(usize, usize)> = groups.iter().filter(|g| g.frames > 0).map(|g| (g.rows, g.cols)).collect();
        grids.sort_unstable();
        grids.dedup();
        grids.iter().map(|(r, c)| r * c).sum()
    };
    let mut patches: usize = groups.iter().map(|g| g.frames * g.rows * g.cols).sum();
    let switch = merge.switch(depth);
    let mut out = Vec::with_capacity(depth);
    for l in 0..depth {
        out.push(patches + markers);
        if !merge.enabled {
            continue;
        }
        let factor = if l < switch {
            if l == 0 {
                keep
            } else {
                1.0
            }
        } else {
            merge.ratio
        };
        patches = ((factor * patches as f64).ceil() as usize).max(tubes.min(patches));
    }
    out
}

/// Named configurations of the speed comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub model: BackboneConfig,
    pub policy: ResolutionPolicy,
    pub text_len: usize,
    /// Shallow keep fraction; `None` means the deep ratio.
    pub shallow_keep: Option<f64>,
    /// Tokens per frame the encoder-based baseline feeds the language model.
    pub baseline_tokens_per_frame: usize,
    /// Encoder-based over encoder-free FLOPs at the calibration frame count.
    pub baseline_ratio: f64,
    pub calibration_frames: usize,
}

impl ScenarioConfig {
    /// A 7B-class decoder with the paper-scale tokenizer settings.
    pub fn paper_scale() -> Self {
        ScenarioConfig {
            model: BackboneConfig {
                depth: 28,
                dim: 3584,
                heads: 28,
                ff: 18944,
                vocab: 152_064,
                max_seq: 1 << 20,
                merge: MergeConfig::default(),
            },
            policy: ResolutionPolicy::table5(),
            text_len: 64,
            shallow_keep: None,
            baseline_tokens_per_frame: 144,
            baseline_ratio: 260.0 / 75.0,
            calibration_frames: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub frames: usize,
    pub scenario: String,
    pub visual_tokens: usize,
    pub flops: f64,
    /// `1 − flops / encoder-free flops`.
    pub reduction_vs_encoder_free: f64,
}

fn square_grid(policy: &ResolutionPolicy, tier: Tier) -> (usize, usize) {
    let e = policy.max_edge_high;
    policy.grid(e, e, tier)
}

fn scenario_report(
    cfg: &ScenarioConfig,
    groups: &[FrameGroup],
    merge: bool,
    label: &str,
) -> Result<(usize, FlopsReport)> {
    let mut m = cfg.model.merge;
    m.enabled = merge;
    let keep = cfg.shallow_keep.unwrap_or(m.ratio);
    let counts = simulate_counts(groups, &m, cfg.model.depth, keep);
    let visual: usize = groups.iter().map(|g| g.frames * frame_token_count(g.rows, g.cols)).sum();
    Ok((visual, analytic_flops(&counts, &cfg.model, cfg.text_len, label)?))
}

/// Encoder-free, +Merge and +Merge+HR rows per frame count, plus the
/// encoder-based baseline whose per-frame encoder cost is calibrated to the
/// configured ratio at `calibration_frames`.
pub fn scenario_table(frame_counts: &[usize], cfg: &ScenarioConfig) -> Result<Vec<ScenarioRow>> {
    let hi = square_grid(&cfg.policy, Tier::High);
    let lo = square_grid(&cfg.policy, Tier::Low);
    let all_high = |t| [FrameGroup { frames: t, rows: hi.0, cols: hi.1 }];
    let mixed = |t: usize| {
        [
            FrameGroup { frames: t - t / 2, rows: hi.0, cols: hi.1 },
            FrameGroup { frames: t / 2, rows: lo.0, cols: lo.1 },
        ]
    };
    let baseline_llm = |t: usize| -> Result<f64> {
        let counts = vec![t * cfg.baseline_tokens_per_frame; cfg.model.depth];
        Ok(analytic_flops(&counts, &cfg.model, cfg.text_len, "baseline")?.total_flops())
    };
    let cal = cfg.calibration_frames;
    let ef_cal = scenario_report(cfg, &all_high(cal), false, "")?.1.total_flops();
    let per_frame_encoder = ((cfg.baseline_ratio * ef_cal - baseline_llm(cal)?) / cal as f64).max(0.0);

    let mut rows = Vec::new();
    for &t in frame_counts {
        if t == 0 {
            bail!(Input, "frame counts must be positive");
        }
        let (v_ef, ef) = scenario_report(cfg, &all_high(t), false, "Encoder-free")?;
        let (v_m, m) = scenario_report(cfg, &all_high(t), true, "+ Merge")?;
        let (v_hr, hr) = scenario_report(cfg, &mixed(t), true, "+ Merge + HR")?;
        let ef_flops = ef.total_flops();
        let base = baseline_llm(t)? + per_frame_encoder * t as f64;
        let mut push = |name: &str, visual: usize, flops: f64| {
            rows.push(ScenarioRow {
                frames: t,
                scenario: name.to_string(),
                visual_tokens: visual,
                flops,
                reduction_vs_encoder_free: 1.0 - flops / ef_flops,
            })
        };
        push("Encoder-based", t * cfg.baseline_tokens_per_frame, base);
        push("Encoder-free", v_ef, ef_flops);
        push("+ Merge", v_m, m.total_flops());
        push("+ Merge + HR", v_hr, hr.total_flops());
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Csv,
    Json,
    Table,
}

impl std::str::FromStr for Emit {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Emit::Csv),
            "json" => Ok(Emit::Json),
            "table" => Ok(Emit::Table),
            other => Err(crate::Error::Input(format!("unknown format {other:?}; use csv, json or table"))),
        }
    }
}

pub fn render_rows(rows: &[ScenarioRow], emit: Emit) -> String {
    match emit {
        Emit::Json => serde_json::to_string_pretty(rows).expect("rows serialize"),
        Emit::Csv => {
            let mut s = String::from("frames,scenario,visual_tokens,tflops,reduction_vs_encoder_free\n");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.3},{:.4}",
                    r.frames,
                    r.scenario,
                    r.visual_tokens,
                    r.flops / 1e12,
                    r.reduction_vs_encoder_free
                );
            }
            s
        }
        Emit::Table => {
            let mut s = format!("{:>6}  {:<14} {:>13} {:>10} {:>9}\n", "frames", "scenario", "visual tokens", "TFLOPs", "vs EF");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:>6}  {:<14} {:>13} {:>10.2} {:>8.1}%",
                    r.frames,
                    r.scenario,
                    r.visual_tokens,
                    r.flops / 1e12,
                    100.0 * r.reduction_vs_encoder_free
                );
            }
            s
        }
    }
}
