//! Acceptance criteria 1-9. Each test writes one `criterion N PASS|FAIL`
//! line straight to stderr, so the verdicts show even under output capture.
//! A shared lock keeps the timed sections from overlapping.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use efv_core::backbone::{self, BackboneConfig, BackboneParams};
use efv_core::guidance::{
    align_geometry, frame_contrastive, generative_loss, normalized_mse, tube_mse, GuidanceConfig, Provider,
    TeacherFeatures,
};
use efv_core::hybridres::{apply, plan_square};
use efv_core::merge::{merge_for_layer, ratio_merge, threshold_merge, MergeConfig, MergeState, RatioMode};
use efv_core::numerics::{grad_check_many, Tensor, Var};
use efv_core::patch_embed::{FeatureSeq, TokenMeta};
use efv_core::profiler::{analytic_flops, compare_prefill, measure_prefill, scenario_table, ScenarioConfig};
use efv_core::synth::{generate, samples, CorpusConfig, Sample, SynthSpec};
use efv_core::trainer::{
    batch_loss, evaluate_toy, pipeline_grad_check, run_stage, Corpus, EvalReport, Model, ModelConfig, StageConfig,
    TrainLog,
};
use efv_core::videotok::{tokenize, vocab, ResolutionPolicy, TokenKind, VideoClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T> Ctx<T> for efv_core::Result<T> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

fn criterion(n: u32, budget_secs: u64, body: impl FnOnce() -> Check) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".to_string()))
    });
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if elapsed > Duration::from_secs(budget_secs) => Err(format!(
            "{detail}; took {:.1}s, budget {budget_secs}s",
            elapsed.as_secs_f64()
        )),
        other => other,
    };
    let (verdict, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(e) => ("FAIL", e),
    };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} {verdict} [{:.2}s] {detail}",
        elapsed.as_secs_f64()
    );
    if let Err(e) = outcome {
        panic!("criterion {n}: {e}");
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Output patch tokens with their feature rows, in sequence order.
fn patches(seq: &FeatureSeq) -> Vec<(TokenMeta, Vec<f64>)> {
    let x = seq.features.value();
    seq.meta
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind == TokenKind::Patch)
        .map(|(i, m)| (*m, x.row(i).to_vec()))
        .collect()
}

/// Patch tokens grouped by spatial cell, each in frame order.
fn tube_rows(seq: &FeatureSeq) -> BTreeMap<(usize, usize), Vec<(TokenMeta, Vec<f64>)>> {
    let mut map: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for (m, row) in patches(seq) {
        map.entry((m.r, m.c)).or_default().push((m, row));
    }
    map
}

fn correlated(rng: &mut ChaCha8Rng, t: usize, g: usize, d: usize, drift: f64) -> Tensor {
    let base: Vec<f64> = (0..g * d).map(|_| gauss(rng)).collect();
    let data = (0..t).flat_map(|_| base.clone()).map(|b| b + drift * gauss(rng)).collect();
    Tensor::new(vec![t * g, d], data).expect("shape")
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_token_budget_rows() {
    criterion(1, 1, || {
        let policy = ResolutionPolicy::table5();
        ensure!(
            (policy.patch, policy.max_edge_high, policy.max_edge_low) == (28, 672, 224),
            "preset is {policy:?}"
        );
        // g×g patches, a line mark per row, a frame mark
        let per_frame = |edge: usize| {
            let g = edge / 28;
            g * g + g + 1
        };
        let rows = [
            (8, 16, 5976),
            (8, 32, 7144),
            (16, 0, 9616),
            (16, 8, 10200),
            (16, 16, 10784),
            (32, 0, 19232),
        ];
        for (h, l, want) in rows {
            ensure!(h * per_frame(672) + l * per_frame(224) == want, "hand count for ({h}H,{l}L)");
            let plan = plan_square(h + l, h, l, &policy).ctx("plan")?;
            ensure!(
                plan.predicted_tokens == want,
                "({h}H,{l}L): planned {} expected {want}",
                plan.predicted_tokens
            );
            ensure!(plan.num_high() == h, "({h}H,{l}L) placed {} high frames", plan.num_high());
        }
        // a realized stream matches its prediction
        let plan = plan_square(3, 1, 2, &policy).ctx("plan")?;
        let px = (0..3 * 3 * 672 * 672).map(|i| (i % 251) as f64 / 250.0).collect();
        let clip = VideoClip::from_frames(3, 672, 672, px, "c1").ctx("clip")?;
        let stream = apply(&plan, &clip).ctx("apply")?;
        ensure!(
            stream.len() == plan.predicted_tokens,
            "stream has {} tokens, plan {}",
            stream.len(),
            plan.predicted_tokens
        );
        Ok(format!("all {} budget rows exact, realized 1H+2L stream = {}", rows.len(), stream.len()))
    });
}

// ---------------------------------------------------------------- criterion 2

struct RandomSeq {
    seq: FeatureSeq,
    t: usize,
    rows: usize,
    cols: usize,
}

fn random_seq(rng: &mut ChaCha8Rng) -> RandomSeq {
    let (t, rows, cols, d) = (
        rng.gen_range(1..=6),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(2..=6),
    );
    let g = rows * cols;
    let drift = [0.05, 0.3, 1.0, 3.0][rng.gen_range(0..4)];
    let base: Vec<Vec<f64>> = (0..g).map(|_| (0..d).map(|_| gauss(rng)).collect()).collect();
    let mut data: Vec<f64> = Vec::with_capacity(t * g * d);
    for ti in 0..t {
        for (cell, b) in base.iter().enumerate() {
            let u: f64 = rng.gen();
            if u < 0.05 {
                data.extend(std::iter::repeat(0.0).take(d));
            } else if u < 0.15 && ti > 0 {
                let prev = ((ti - 1) * g + cell) * d;
                data.extend_from_within(prev..prev + d);
            } else {
                data.extend(b.iter().map(|v| v + drift * gauss(rng)));
            }
        }
    }
    let x = Tensor::new(vec![t * g, d], data).expect("shape");
    let markers = rng.gen_bool(0.5);
    RandomSeq {
        seq: FeatureSeq::from_patch_grid(&x, t, rows, cols, markers).expect("grid"),
        t,
        rows,
        cols,
    }
}

fn conserved(input: &FeatureSeq, out: &FeatureSeq, st: &MergeState) -> Result<(), String> {
    ensure!(
        out.total_merge_count() == input.total_merge_count(),
        "merge_count sum {} -> {}",
        input.total_merge_count(),
        out.total_merge_count()
    );
    let markers = input.len() - input.count(TokenKind::Patch);
    ensure!(
        st.kept == st.index_sum() && st.kept == out.count(TokenKind::Patch) && out.len() == st.kept + markers,
        "kept {} index {} patches {} len {}",
        st.kept,
        st.index_sum(),
        out.count(TokenKind::Patch),
        out.len()
    );
    Ok(())
}

#[test]
fn criterion_2_merge_invariants() {
    criterion(2, 30, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut merged, mut shortfalls) = (0, 0);
        for case in 0..1000 {
            let RandomSeq { seq, t, rows, cols } = random_seq(&mut rng);
            let g = rows * cols;
            let n = t * g;
            let fail = |what: String| format!("case {case} ({t}×{rows}×{cols}): {what}");

            // threshold pass: anchors are tube heads and every frame whose
            // similarity to its predecessor is not above tau
            let mut taus: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..0.95)).collect();
            taus.sort_by(f64::total_cmp);
            let mut kept_by_tau = Vec::new();
            for &tau in &taus {
                let (out, st) = threshold_merge(&seq, tau).map_err(|e| fail(e.to_string()))?;
                conserved(&seq, &out, &st).map_err(fail)?;
                let mut index = vec![vec![0u8; g]; t];
                for (cell, tube) in tube_rows(&seq) {
                    for (k, (m, row)) in tube.iter().enumerate() {
                        let joins = k > 0 && cos(&tube[k - 1].1, row).is_some_and(|s| s > tau);
                        if !joins {
                            index[m.t][cell.0 * cols + cell.1] = 1;
                        }
                    }
                }
                ensure!(st.index == index, "{}", fail(format!("anchor matrix at tau {tau}")));
                for (m, _) in patches(&out) {
                    ensure!(index[m.t][m.r * cols + m.c] == 1, "{}", fail("output token off an anchor".into()));
                }
                kept_by_tau.push(st.kept);
                merged += usize::from(st.kept < n);
            }
            ensure!(
                kept_by_tau.windows(2).all(|w| w[0] <= w[1]),
                "{}",
                fail(format!("kept {kept_by_tau:?} not monotone in tau {taus:?}"))
            );

            // ratio pass: reach the target or report why not
            let r: f64 = rng.gen_range(0.05..=1.0);
            let target = (r * n as f64).ceil() as usize;
            let (out, st) = ratio_merge(&seq, r).map_err(|e| fail(e.to_string()))?;
            conserved(&seq, &out, &st).map_err(fail)?;
            if st.kept <= target {
                ensure!(st.shortfall == 0, "{}", fail("shortfall reported at target".into()));
            } else {
                shortfalls += 1;
                ensure!(
                    st.shortfall == st.kept - target,
                    "{}",
                    fail(format!("kept {} target {target} shortfall {}", st.kept, st.shortfall))
                );
                for tube in tube_rows(&out).values() {
                    for w in tube.windows(2) {
                        ensure!(cos(&w[0].1, &w[1].1).is_none(), "{}", fail("stopped with a mergeable pair".into()));
                    }
                }
            }

            // a stack of layers keeps the invariants
            let cfg = MergeConfig {
                enabled: true,
                threshold: taus[1],
                ratio: r,
                switch_layer: Some(rng.gen_range(0..=4)),
                ratio_mode: if rng.gen_bool(0.5) { RatioMode::PerLayer } else { RatioMode::Cumulative },
            };
            let mut cur = seq.clone();
            let mut deep_base = None;
            for layer in 0..4 {
                if layer >= cfg.switch(4) && deep_base.is_none() {
                    deep_base = Some(cur.count(TokenKind::Patch));
                }
                let (next, st) = merge_for_layer(&cur, &cfg, layer, 4, deep_base.unwrap_or(0))
                    .map_err(|e| fail(e.to_string()))?;
                conserved(&seq, &next, &st).map_err(fail)?;
                ensure!(st.kept <= st.incoming, "{}", fail("layer grew the sequence".into()));
                cur = next;
            }

            // identical frames (up to positive scale) collapse to one token per tube
            let base: Vec<Vec<f64>> = (0..g).map(|_| (0..3).map(|_| gauss(&mut rng)).collect()).collect();
            let mut data = Vec::new();
            for _ in 0..t {
                let s = rng.gen_range(0.5..2.0);
                for b in &base {
                    data.extend(b.iter().map(|v| v * s));
                }
            }
            let same = FeatureSeq::from_patch_grid(&Tensor::new(vec![n, 3], data).unwrap(), t, rows, cols, true)
                .map_err(|e| fail(e.to_string()))?;
            let (out, st) = threshold_merge(&same, taus[2]).map_err(|e| fail(e.to_string()))?;
            ensure!(st.kept == g, "{}", fail(format!("identical frames kept {}", st.kept)));
            ensure!(
                patches(&out).iter().all(|(m, _)| m.merge_count == t && m.t == 0 && m.t_last == t - 1),
                "{}",
                fail("identical-frame tokens do not span the clip".into())
            );
            let (_, st) = ratio_merge(&same, r).map_err(|e| fail(e.to_string()))?;
            ensure!(st.kept == target.max(g), "{}", fail(format!("identical frames ratio kept {}", st.kept)));
        }
        Ok(format!(
            "1000 sequences, {merged} threshold passes merged, {shortfalls} ratio shortfalls all justified"
        ))
    });
}

// ---------------------------------------------------------------- criterion 3

/// Exact cosine ordering over integer vectors: `dot / sqrt(norms)` as a pair.
#[derive(Clone, Copy)]
struct ExactCos {
    dot: i128,
    norms: i128,
}

impl ExactCos {
    fn of(a: &[i64], b: &[i64]) -> Option<Self> {
        let dot: i64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: i64 = a.iter().map(|x| x * x).sum();
        let nb: i64 = b.iter().map(|x| x * x).sum();
        (na > 0 && nb > 0).then_some(ExactCos { dot: dot as i128, norms: (na * nb) as i128 })
    }

    /// `cos > num/den` for a non-negative fraction.
    fn above(&self, num: i128, den: i128) -> bool {
        self.dot > 0 && self.dot * self.dot * den * den > num * num * self.norms
    }

    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        let sa = self.dot.signum();
        let sb = o.dot.signum();
        if sa != sb {
            return sa.cmp(&sb);
        }
        let lhs = self.dot * self.dot * o.norms;
        let rhs = o.dot * o.dot * self.norms;
        if sa >= 0 {
            lhs.cmp(&rhs)
        } else {
            rhs.cmp(&lhs)
        }
    }
}

/// Partition of one tube: groups of frame indices.
type Partition = Vec<Vec<usize>>;

/// Enumerates every cut mask of each tube and keeps the one whose cuts are
/// exactly the pairs not above the threshold.
fn threshold_oracle(vals: &[Vec<[i64; 2]>], num: i128, den: i128) -> Vec<Partition> {
    vals.iter()
        .map(|tube| {
            let t = tube.len();
            let mut found = Vec::new();
            for mask in 0u32..(1 << (t - 1)) {
                let cut = |i: usize| mask >> (i - 1) & 1 == 1;
                let ok = (1..t).all(|i| {
                    let joins = ExactCos::of(&tube[i - 1], &tube[i]).is_some_and(|c| c.above(num, den));
                    cut(i) != joins
                });
                if ok {
                    let mut groups: Partition = vec![vec![0]];
                    for i in 1..t {
                        if cut(i) {
                            groups.push(vec![i]);
                        } else {
                            groups.last_mut().unwrap().push(i);
                        }
                    }
                    found.push(groups);
                }
            }
            assert_eq!(found.len(), 1, "exactly one mask satisfies the rule");
            found.pop().unwrap()
        })
        .collect()
}

fn group_sum(tube: &[[i64; 2]], group: &[usize]) -> [i64; 2] {
    group.iter().fold([0, 0], |acc, &i| [acc[0] + tube[i][0], acc[1] + tube[i][1]])
}

/// Greedy passes recomputed from scratch each pass: every adjacent pair of
/// groups is scored by the exact cosine of its member sums.
fn ratio_oracle(vals: &[Vec<[i64; 2]>], target: usize) -> Vec<Partition> {
    let mut parts: Vec<Partition> = vals.iter().map(|tube| (0..tube.len()).map(|i| vec![i]).collect()).collect();
    let mut kept: usize = parts.iter().map(Vec::len).sum();
    while kept > target {
        let mut cands: Vec<(ExactCos, (usize, usize), usize, usize)> = Vec::new();
        for (g, part) in parts.iter().enumerate() {
            for k in 0..part.len().saturating_sub(1) {
                let a = group_sum(&vals[g], &part[k]);
                let b = group_sum(&vals[g], &part[k + 1]);
                if let Some(c) = ExactCos::of(&a, &b) {
                    cands.push((c, (part[k][0], g), g, k));
                }
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut used: Vec<Vec<bool>> = parts.iter().map(|p| vec![false; p.len()]).collect();
        let mut chosen = Vec::new();
        for (_, _, g, k) in cands {
            if kept - chosen.len() <= target {
                break;
            }
            if !used[g][k] && !used[g][k + 1] {
                used[g][k] = true;
                used[g][k + 1] = true;
                chosen.push((g, k));
            }
        }
        kept -= chosen.len();
        chosen.sort_unstable_by(|a, b| b.cmp(a));
        for (g, k) in chosen {
            let right = parts[g].remove(k + 1);
            parts[g][k].extend(right);
        }
    }
    parts
}

/// Compares a library result with an oracle partition: surviving count,
/// order, merge counts and means.
fn agrees(out: &FeatureSeq, st: &MergeState, vals: &[Vec<[i64; 2]>], parts: &[Partition]) -> Result<(), String> {
    let mut want: Vec<(usize, usize, usize, [f64; 2])> = Vec::new();
    for (g, part) in parts.iter().enumerate() {
        for grp in part {
            let s = group_sum(&vals[g], grp);
            let n = grp.len() as f64;
            want.push((grp[0], g, grp.len(), [s[0] as f64 / n, s[1] as f64 / n]));
        }
    }
    want.sort_by_key(|w| (w.0, w.1));
    let got = patches(out);
    ensure!(st.kept == want.len(), "kept {} oracle {}", st.kept, want.len());
    for ((m, row), (t, g, count, mean)) in got.iter().zip(&want) {
        ensure!(
            (m.t, m.c, m.merge_count) == (*t, *g, *count),
            "token at (t {}, c {}) x{} vs oracle (t {t}, c {g}) x{count}",
            m.t,
            m.c,
            m.merge_count
        );
        let err = (row[0] - mean[0]).abs().max((row[1] - mean[1]).abs());
        ensure!(err <= 1e-9, "mean off by {err:e}");
    }
    Ok(())
}

/// Every sequence of `t` frames over a `1×g` grid with values from `set`.
fn exhaustive(set: &[[i64; 2]], t: usize, g: usize, mut f: impl FnMut(usize, &[Vec<[i64; 2]>]) -> Result<(), String>) -> Result<usize, String> {
    let cells = t * g;
    let total = set.len().pow(cells as u32);
    for code in 0..total {
        let mut c = code;
        let mut tubes = vec![Vec::with_capacity(t); g];
        for _ in 0..t {
            for tube in tubes.iter_mut() {
                tube.push(set[c % set.len()]);
                c /= set.len();
            }
        }
        f(code, &tubes)?;
    }
    Ok(total)
}

#[test]
fn criterion_3_merge_oracles() {
    criterion(3, 60, || {
        let taus: [(f64, i128, i128); 2] = [(0.6, 3, 5), (0.75, 3, 4)];
        let ratios: [(f64, usize, usize); 3] = [(0.25, 1, 4), (0.5, 1, 2), (0.75, 3, 4)];
        let positive = [[1, 0], [1, 1], [0, 1]];
        let signed = [[1, 0], [0, 1], [-1, 1], [0, 0]];
        let mut sequences = 0;
        for (set, max_cells) in [(&positive[..], 12), (&signed[..], 8)] {
            for t in 1..=4 {
                for g in 1..=3 {
                    if t * g > max_cells {
                        continue;
                    }
                    let n = t * g;
                    sequences += exhaustive(set, t, g, |code, tubes| {
                        let rows: Vec<f64> = (0..t)
                            .flat_map(|ti| tubes.iter().flat_map(move |tube| tube[ti].map(|v| v as f64)))
                            .collect();
                        let x = Tensor::new(vec![n, 2], rows).expect("shape");
                        let seq = FeatureSeq::from_patch_grid(&x, t, 1, g, code % 2 == 0).map_err(|e| e.to_string())?;
                        let here = |what: &str| format!("{what} on {tubes:?}");
                        for &(tau, num, den) in &taus {
                            let (out, st) = threshold_merge(&seq, tau).map_err(|e| e.to_string())?;
                            agrees(&out, &st, tubes, &threshold_oracle(tubes, num, den))
                                .map_err(|e| format!("{}: {e}", here(&format!("threshold {tau}"))))?;
                        }
                        for &(r, num, den) in &ratios {
                            let target = (num * n).div_ceil(den);
                            let (out, st) = ratio_merge(&seq, r).map_err(|e| e.to_string())?;
                            agrees(&out, &st, tubes, &ratio_oracle(tubes, target))
                                .map_err(|e| format!("{}: {e}", here(&format!("ratio {r}"))))?;
                            // every group mean is nonzero here, so only tube count limits merging
                            if set.len() == 3 {
                                ensure!(st.kept == target.max(g), "{}", here("positive set missed its target"));
                            }
                        }
                        Ok(())
                    })?;
                }
            }
        }
        Ok(format!("{sequences} sequences, 2 thresholds and 3 ratios each, all match the oracles"))
    });
}

// ---------------------------------------------------------------- criterion 4

const H: f64 = 1e-6;

#[test]
fn criterion_4_gradients() {
    criterion(4, 120, || {
        let mut worst = [0.0f64; 4];
        for inst in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + inst);

            // generative loss through the merging backbone
            let params = BackboneParams::init(BackboneConfig::tiny(), &mut rng).ctx("params")?;
            let x = correlated(&mut rng, 3, 4, 16, 0.3);
            let vis = FeatureSeq::from_patch_grid(&x, 3, 2, 2, true).ctx("grid")?;
            let text: Vec<u32> = [vec![vocab::BOS], vocab::encode("ok"), vec![vocab::EOS]].concat();
            let f = |v: &[Var]| {
                let mut vars = params.constants();
                vars.w.head = v[1].clone();
                let seq = FeatureSeq::new(v[0].clone(), vis.meta.clone())?;
                let tr = backbone::forward(&vars, &seq, &text)?;
                generative_loss(&tr, &text, 1)
            };
            // embedded markers are never zero; an all-zero row sits where layer
            // norm bends on a 1/sqrt(eps) scale and defeats central differences
            let mut feats = vis.features.value().clone();
            for (i, m) in vis.meta.iter().enumerate() {
                if m.kind != TokenKind::Patch {
                    feats.row_mut(i).iter_mut().for_each(|v| *v = gauss(&mut rng));
                }
            }
            let inputs = [feats, params.weights.head.clone()];
            let rep = grad_check_many(f, &inputs, H, Some(64)).ctx("gen check")?;
            worst[0] = worst[0].max(rep.max_rel_error);

            // tube alignment loss on a merged student against a coarser teacher
            let x = correlated(&mut rng, 3, 9, 8, 0.2);
            let seq = FeatureSeq::from_patch_grid(&x, 3, 3, 3, true).ctx("grid")?;
            let (merged, _) = threshold_merge(&seq, 0.8).ctx("merge")?;
            let hidden = Tensor::randn(&[merged.len(), 8], 1.0, &mut rng);
            let teacher =
                TeacherFeatures::new(Tensor::randn(&[12, 5], 1.0, &mut rng), vec![(2, 2); 3], Provider::Mock)
                    .ctx("teacher")?;
            let f = |v: &[Var]| {
                let h = FeatureSeq::new(v[0].clone(), merged.meta.clone())?;
                tube_mse(&align_geometry(&h, &teacher)?, &v[1])
            };
            let rep = grad_check_many(f, &[hidden, Tensor::randn(&[8, 5], 0.5, &mut rng)], H, None)
                .ctx("mse check")?;
            worst[1] = worst[1].max(rep.max_rel_error);

            // contrastive loss over batch sizes 1..5, temperature included
            let b = 1 + inst as usize % 5;
            let inputs = [
                Tensor::randn(&[b, 6], 1.0, &mut rng),
                Tensor::randn(&[b, 6], 1.0, &mut rng),
                Tensor::scalar(rng.gen_range(-1.0..2.0)),
            ];
            let rep = grad_check_many(|v| frame_contrastive(&v[0], &v[1], &v[2]), &inputs, H, None)
                .ctx("con check")?;
            worst[2] = worst[2].max(rep.max_rel_error);
        }
        for (name, w) in ["generative", "alignment", "contrastive"].iter().zip(&worst) {
            ensure!(*w < 1e-5, "{name} loss relative error {w:e}");
        }

        let mut merging = 0;
        for seed in 0..20 {
            let check = pipeline_grad_check(&ModelConfig::tiny(), seed, 6).ctx("pipeline")?;
            worst[3] = worst[3].max(check.report.max_rel_error);
            merging += usize::from(check.counts.iter().any(|c| c.windows(2).any(|w| w[1] < w[0])));
        }
        ensure!(worst[3] < 1e-4, "pipeline relative error {:e}", worst[3]);
        ensure!(merging == 20, "only {merging}/20 pipeline instances merged tokens");
        Ok(format!(
            "20 instances each: gen {:.1e}, mse {:.1e}, con {:.1e}, pipeline {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ))
    });
}

// ---------------------------------------------------------------- criterion 5

fn tiny_batch(model: &Model, seed: u64) -> efv_core::Result<(efv_core::videotok::TokenStream, TeacherFeatures)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = model.config.policy.max_edge_high;
    let px = (0..2 * 3 * e * e).map(|_| rng.gen::<f64>()).collect();
    let clip = VideoClip::from_frames(2, e, e, px, "g")?;
    Ok((model.tokenize(&clip)?, model.teacher(&clip)?))
}

#[test]
fn criterion_5_loss_identities() {
    criterion(5, 10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::randn(&[6, 9], 1.0, &mut rng);
        let scaled = Tensor::new(vec![6, 9], s.data().iter().map(|v| 3.7 * v).collect()).unwrap();
        let mse = normalized_mse(&Var::constant(s.clone()), &Var::constant(scaled)).ctx("mse")?.item();
        ensure!(mse.abs() <= 1e-12, "scaled copy gives alignment loss {mse:e}");

        let log_tau = Var::constant(Tensor::scalar(10f64.ln()));
        let one = Var::constant(Tensor::randn(&[1, 9], 1.0, &mut rng));
        let other = Var::constant(Tensor::randn(&[1, 9], 1.0, &mut rng));
        let b1 = frame_contrastive(&one, &other, &log_tau).ctx("con")?.item();
        ensure!(b1 == 0.0, "single pair gives {b1:e}");

        let row = Tensor::randn(&[1, 9], 1.0, &mut rng);
        let twice = Var::constant(Tensor::new(vec![2, 9], [row.data(), row.data()].concat()).unwrap());
        let b2 = frame_contrastive(&twice, &twice, &log_tau).ctx("con")?.item();
        ensure!((b2 - 2f64.ln()).abs() <= 1e-9, "equal pair of pairs gives {b2} vs ln 2");

        // instruction tuning: no gradient reaches the alignment head
        let model = Model::init(ModelConfig::tiny(), 5).ctx("model")?;
        let (stream, teacher) = tiny_batch(&model, 55).ctx("batch")?;
        let text: Vec<u32> = [vec![vocab::BOS], vocab::encode("red"), vec![vocab::EOS]].concat();
        let batch = [(&stream, Some(&teacher), text.as_slice(), 1)];
        let off = GuidanceConfig { auxiliary: false, ..GuidanceConfig::default() };
        let (losses, binder, _, _) = batch_loss(&model, &batch, &off).ctx("gated loss")?;
        ensure!(
            losses.l_mse.item() == 0.0 && losses.l_con.item() == 0.0,
            "gated alignment terms are {} and {}",
            losses.l_mse.item(),
            losses.l_con.item()
        );
        losses.total.backward();
        let grads = binder.grads();
        let aux: Vec<_> = grads.iter().filter(|(k, _)| k.starts_with("guidance.")).collect();
        ensure!(!aux.is_empty(), "no alignment parameters bound");
        ensure!(
            aux.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)),
            "alignment gradients nonzero under gating"
        );
        ensure!(
            !binder.reached("guidance.proj") && !binder.reached("guidance.log_tau"),
            "backward reached the alignment head"
        );
        ensure!(
            grads.iter().any(|(k, g)| !k.starts_with("guidance.") && g.data().iter().any(|&v| v != 0.0)),
            "generative loss produced no gradient"
        );
        // and the same batch with alignment on does reach the head
        let (losses, binder, _, _) = batch_loss(&model, &batch, &GuidanceConfig::default()).ctx("full loss")?;
        losses.total.backward();
        ensure!(
            binder.grads()["guidance.proj"].data().iter().any(|&v| v != 0.0),
            "alignment head unreachable even with alignment on"
        );
        Ok(format!("mse {mse:.1e}, B=1 {b1}, B=2 |{b2:.12} - ln 2| {:.1e}, gated gradients zero", (b2 - 2f64.ln()).abs()))
    });
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_flops_model() {
    criterion(6, 60, || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = vocab::encode("what moves here");
        let mut gaps = Vec::new();
        for merge in [false, true] {
            let mut cfg = BackboneConfig::toy();
            cfg.merge.enabled = merge;
            let params = BackboneParams::init(cfg, &mut rng).ctx("params")?;
            let x = correlated(&mut rng, 4, 64, cfg.dim, 0.3);
            let vis = FeatureSeq::from_patch_grid(&x, 4, 8, 8, true).ctx("grid")?;
            let m = measure_prefill(&params, &vis, &text, 0, 1).ctx("prefill")?;
            // closed form recomputed from the observed per-block lengths
            let (d, f, v) = (cfg.dim as u64, cfg.ff as u64, cfg.vocab as u64);
            let by_hand: u64 = m.counts[..cfg.depth]
                .iter()
                .map(|&n| {
                    let n = n as u64;
                    4 * n * d * d + 2 * n * n * d + 2 * n * d * f
                })
                .sum::<u64>()
                + text.len() as u64 * d * v;
            ensure!(by_hand == m.analytic.total_macs, "closed form {} vs report {}", by_hand, m.analytic.total_macs);
            if merge {
                ensure!(m.counts[cfg.depth - 1] < m.counts[0], "merging left {:?}", m.counts);
            }
            let gap = (m.instrumented_macs as f64 - by_hand as f64).abs() / by_hand as f64;
            ensure!(gap <= 0.02, "merge={merge}: instrumented {} vs analytic {by_hand} ({:.2}%)", m.instrumented_macs, 100.0 * gap);
            gaps.push(gap);
        }

        let rows = scenario_table(&[32], &ScenarioConfig::paper_scale()).ctx("scenario")?;
        let flops = |name: &str| rows.iter().find(|r| r.scenario == name).map(|r| r.flops).unwrap_or(f64::NAN);
        let (ef, m, hr) = (flops("Encoder-free"), flops("+ Merge"), flops("+ Merge + HR"));
        let (r1, r2) = (1.0 - m / ef, 1.0 - hr / m);
        ensure!(r1 >= 0.6, "+Merge saves {:.1}% over encoder-free", 100.0 * r1);
        ensure!(r2 >= 0.4, "+Merge+HR saves {:.1}% over +Merge", 100.0 * r2);
        Ok(format!(
            "MAC gap {:.3}% / {:.3}% (dense / merged); 32 frames: EF {:.1}T, +Merge {:.1}T (-{:.1}%), +HR {:.1}T (-{:.1}%)",
            100.0 * gaps[0],
            100.0 * gaps[1],
            ef / 1e12,
            m / 1e12,
            100.0 * r1,
            hr / 1e12,
            100.0 * r2
        ))
    });
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_prefill_speedup() {
    criterion(7, 300, || {
        // No warmup: the median of 5 already discards a cold first run, and
        // the 5 minute budget has little slack on one core.
        let cmp = compare_prefill(BackboneConfig::toy(), &ResolutionPolicy::runtime(), 7, 672, 7, 0, 5)
            .ctx("prefill")?;
        ensure!(cmp.visual_tokens >= 4096, "only {} visual tokens", cmp.visual_tokens);
        ensure!(
            cmp.with_merge.median_secs < cmp.without_merge.median_secs,
            "merged median {:.3}s not below dense {:.3}s",
            cmp.with_merge.median_secs,
            cmp.without_merge.median_secs
        );
        Ok(format!(
            "{} visual tokens: dense {:.3}s, merged {:.3}s, speedup {:.2}x",
            cmp.visual_tokens, cmp.without_merge.median_secs, cmp.with_merge.median_secs, cmp.speedup
        ))
    });
}

// ---------------------------------------------------------------- criterion 8

struct PipelineRun {
    model: Model,
    logs: Vec<TrainLog>,
    eval: EvalReport,
}

fn corpora(seed: u64) -> efv_core::Result<[Vec<Sample>; 3]> {
    Ok([
        samples(&CorpusConfig::toy(64, 1, seed))?,
        samples(&CorpusConfig::toy(64, 2, seed + 1))?,
        samples(&CorpusConfig::toy(16, 3, seed + 2))?,
    ])
}

fn three_stages(seed: u64) -> efv_core::Result<PipelineRun> {
    let data = corpora(seed)?;
    let mut model = Model::init(ModelConfig::toy(), seed)?;
    let mut logs = Vec::new();
    for (stage, samples) in (1u8..=3).zip(&data) {
        let corpus = Corpus { stage, samples: samples.clone() };
        logs.push(run_stage(&StageConfig::toy(stage)?, &corpus, &mut model, None)?);
    }
    let eval = evaluate_toy(&model, &data[2])?;
    Ok(PipelineRun { model, logs, eval })
}

#[test]
fn criterion_8_training() {
    criterion(8, 1200, || {
        let a = three_stages(8).ctx("first run")?;
        let s1 = &a.logs[0].steps;
        ensure!(!s1.is_empty() && s1.len() <= 200, "stage 1 ran {} steps", s1.len());
        let first = s1[0].l_gen;
        let tail = &s1[s1.len().saturating_sub(8)..];
        let last = tail.iter().map(|s| s.l_gen).sum::<f64>() / tail.len() as f64;
        ensure!(last <= 0.5 * first, "stage-1 generative loss {first:.3} -> {last:.3}");
        ensure!(a.eval.accuracy >= 0.9, "QA exact match {}/{}", a.eval.correct, a.eval.total);

        let b = three_stages(8).ctx("second run")?;
        ensure!(a.model.hash() == b.model.hash(), "checkpoint hashes differ across seeded runs");
        Ok(format!(
            "stage-1 L_gen {first:.3} -> {last:.4} in {} steps; QA {}/{}; hash {}… stable",
            s1.len(),
            a.eval.correct,
            a.eval.total,
            &a.model.hash()[..12]
        ))
    });
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_determinism() {
    criterion(9, 300, || {
        let spec = SynthSpec::toy(99, 4);
        let (clip_a, cap_a) = generate(&spec).ctx("synth")?;
        let (clip_b, cap_b) = generate(&spec).ctx("synth")?;
        ensure!(clip_a.frames() == clip_b.frames() && cap_a == cap_b, "synth generation differs");
        let ca = corpora(3).ctx("corpus")?;
        let cb = corpora(3).ctx("corpus")?;
        for (x, y) in ca.iter().flatten().zip(cb.iter().flatten()) {
            ensure!(x.clip.frames() == y.clip.frames() && x.caption == y.caption && x.qa == y.qa, "corpus {} differs", x.id);
        }

        let policy = ModelConfig::toy().policy;
        let ta = tokenize(&clip_a, &policy).ctx("tokenize")?.to_jsonl();
        let tb = tokenize(&clip_b, &policy).ctx("tokenize")?.to_jsonl();
        ensure!(ta == tb, "tokenization differs");

        let x = correlated(&mut ChaCha8Rng::seed_from_u64(9), 6, 9, 8, 0.4);
        let seq = FeatureSeq::from_patch_grid(&x, 6, 3, 3, true).ctx("grid")?;
        let run_merge = || -> efv_core::Result<(Vec<u8>, MergeState, MergeState)> {
            let (a, sa) = threshold_merge(&seq, 0.6)?;
            let (b, sb) = ratio_merge(&a, 0.5)?;
            Ok((b.features.value().to_hash_bytes(), sa, sb))
        };
        ensure!(run_merge().ctx("merge")? == run_merge().ctx("merge")?, "merging differs");

        let plan = || plan_square(24, 8, 16, &ResolutionPolicy::table5()).map(|p| p.to_json());
        ensure!(plan().ctx("plan")? == plan().ctx("plan")?, "plan differs");
        let flops = || analytic_flops(&[900, 900, 700, 700, 400, 200, 100, 50], &BackboneConfig::toy(), 32, "d");
        ensure!(flops().ctx("flops")? == flops().ctx("flops")?, "analytic flops differ");

        let short = |seed: u64| -> efv_core::Result<(String, Vec<f64>)> {
            let mut model = Model::init(ModelConfig::toy(), seed)?;
            let mut cfg = StageConfig::toy(1)?;
            cfg.epochs = 2;
            let corpus = Corpus { stage: 1, samples: ca[0][..16].to_vec() };
            let log = run_stage(&cfg, &corpus, &mut model, None)?;
            Ok((model.hash(), log.steps.iter().map(|s| s.total).collect()))
        };
        let (ha, la) = short(4).ctx("train")?;
        let (hb, lb) = short(4).ctx("train")?;
        ensure!(ha == hb && la == lb, "seeded training differs");
        Ok(format!("synth, corpus, tokenize, merge, plan, flops and {}-step training bit-identical", la.len()))
    });
}
