//! Temporal token merging.
//!
//! Patch tokens sharing a spatial cell form a tube `(grid, r, c)`, ordered by
//! frame. Shallow layers merge a token into its predecessor's chain when the
//! two raw features are similar enough; deep layers merge the most similar
//! adjacent pairs until a target count is met. A merged token takes the
//! arithmetic mean of its members, the position of its earliest member, and
//! the summed `merge_count`. Markers and text never merge.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{cosine, RowMix, Tensor};
use crate::patch_embed::{FeatureSeq, TokenMeta};
use crate::videotok::TokenKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Each deep layer targets `ceil(r · incoming)`.
    #[default]
    PerLayer,
    /// Deep layer `k` (counting from 1) targets `ceil(r^k · N)`, with `N` the
    /// patch count entering the first deep layer.
    Cumulative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub ratio: f64,
    /// First layer using the ratio policy; `None` means `depth / 2`.
    pub switch_layer: Option<usize>,
    pub ratio_mode: RatioMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            enabled: true,
            threshold: 0.6,
            ratio: 0.5,
            switch_layer: None,
            ratio_mode: RatioMode::PerLayer,
        }
    }
}

impl MergeConfig {
    pub fn disabled() -> Self {
        MergeConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            bail!(Config, "merge threshold {} outside (0, 1)", self.threshold);
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            bail!(Config, "merge ratio {} outside (0, 1]", self.ratio);
        }
        if self.switch(depth) > depth {
            bail!(Config, "switch layer {} beyond depth {depth}", self.switch(depth));
        }
        Ok(())
    }

    pub fn switch(&self, depth: usize) -> usize {
        self.switch_layer.unwrap_or(depth / 2)
    }

    pub fn policy_for(&self, layer: usize, depth: usize) -> MergePolicy {
        if layer < self.switch(depth) {
            MergePolicy::Threshold
        } else {
            MergePolicy::Ratio
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    Threshold,
    Ratio,
    Pooling,
}

/// Bookkeeping for one merge pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeState {
    pub layer: Option<usize>,
    pub policy: MergePolicy,
    /// Incoming patch tokens.
    pub incoming: usize,
    /// Surviving patch tokens.
    pub kept: usize,
    pub target: Option<usize>,
    /// `kept − target` when the target was unreachable, else zero.
    pub shortfall: usize,
    /// Per frame, a `rows·cols` 0/1 row: 1 where a token anchored at that
    /// frame and cell survives. Sums to `kept`.
    pub index: Vec<Vec<u8>>,
    /// Output row of every incoming row.
    pub anchor_of: Vec<usize>,
    /// Incoming members absorbed by each surviving patch, in output order.
    pub chain_lengths: Vec<usize>,
    /// Similarities skipped because a vector had zero norm.
    pub zero_norm_pairs: usize,
}

impl MergeState {
    pub fn index_sum(&self) -> usize {
        self.index.iter().flatten().map(|&b| b as usize).sum()
    }

    pub fn achieved_ratio(&self) -> f64 {
        if self.incoming == 0 {
            1.0
        } else {
            self.kept as f64 / self.incoming as f64
        }
    }

    /// One JSON line summarizing the pass.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "layer": self.layer,
            "policy": self.policy,
            "incoming": self.incoming,
            "kept": self.kept,
            "target": self.target,
            "shortfall": self.shortfall,
            "zero_norm_pairs": self.zero_norm_pairs,
            "chain_lengths": self.chain_lengths,
        })
        .to_string()
    }
}

/// Incoming patch rows grouped by tube, each in sequence order.
fn tubes(meta: &[TokenMeta]) -> BTreeMap<((usize, usize), usize, usize), Vec<usize>> {
    let mut map: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, m) in meta.iter().enumerate() {
        if m.kind == TokenKind::Patch {
            map.entry((m.grid, m.r, m.c)).or_default().push(i);
        }
    }
    map
}

fn check_order(meta: &[TokenMeta]) -> Result<()> {
    for (_, rows) in tubes(meta) {
        for w in rows.windows(2) {
            if meta[w[0]].t_last >= meta[w[1]].t {
                bail!(
                    Structure,
                    "tube tokens at rows {} and {} are not in frame order",
                    w[0],
                    w[1]
                );
            }
        }
    }
    Ok(())
}

/// Applies a partition of the patch rows: each group collapses onto its
/// first member. Non-patch rows pass through.
fn collapse(
    seq: &FeatureSeq,
    groups: &[Vec<usize>],
    layer: Option<usize>,
    policy: MergePolicy,
) -> Result<(FeatureSeq, MergeState)> {
    let n = seq.len();
    let mut leader = vec![usize::MAX; n];
    for g in groups {
        for &i in g {
            leader[i] = g[0];
        }
    }
    let mut group_of_leader: BTreeMap<usize, &Vec<usize>> = BTreeMap::new();
    for g in groups {
        group_of_leader.insert(g[0], g);
    }
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    let mut out_row = vec![usize::MAX; n];
    let mut chain_lengths = Vec::new();
    for i in 0..n {
        let m = seq.meta[i];
        if m.kind != TokenKind::Patch {
            out_row[i] = rows.len();
            rows.push(vec![(i, 1.0)]);
            meta.push(m);
            continue;
        }
        if leader[i] == usize::MAX {
            bail!(Contract, "patch row {i} is in no merge group");
        }
        if leader[i] != i {
            continue;
        }
        let g = group_of_leader[&i];
        let w = 1.0 / g.len() as f64;
        out_row[i] = rows.len();
        rows.push(g.iter().map(|&k| (k, w)).collect());
        let mut merged = m;
        merged.merge_count = g.iter().map(|&k| seq.meta[k].merge_count).sum();
        merged.t_last = g.iter().map(|&k| seq.meta[k].t_last).max().unwrap_or(m.t_last);
        meta.push(merged);
        chain_lengths.push(g.len());
    }
    let anchor_of: Vec<usize> = (0..n)
        .map(|i| {
            if leader[i] == usize::MAX {
                out_row[i]
            } else {
                out_row[leader[i]]
            }
        })
        .collect();

    let frames = seq.meta.iter().map(|m| m.t_last + 1).max().unwrap_or(0);
    let mut grids = vec![(0usize, 0usize); frames];
    for m in &seq.meta {
        if m.kind != TokenKind::Text {
            grids[m.t] = m.grid;
        }
    }
    let mut index: Vec<Vec<u8>> = grids.iter().map(|&(r, c)| vec![0; r * c]).collect();
    for m in meta.iter().filter(|m| m.kind == TokenKind::Patch) {
        index[m.t][m.r * m.grid.1 + m.c] = 1;
    }
    let features = seq.features.row_mix(Rc::new(RowMix { rows }))?;
    let incoming = seq.count(TokenKind::Patch);
    let kept = chain_lengths.len();
    let out = FeatureSeq::new(features, meta)?;
    Ok((
        out,
        MergeState {
            layer,
            policy,
            incoming,
            kept,
            target: None,
            shortfall: 0,
            index,
            anchor_of,
            chain_lengths,
            zero_norm_pairs: 0,
        },
    ))
}

/// Chains each tube: a token joins its predecessor's chain when their
/// cosine similarity exceeds `tau`. The first token of a tube always anchors;
/// a zero-norm vector breaks the chain.
pub fn threshold_merge(seq: &FeatureSeq, tau: f64) -> Result<(FeatureSeq, MergeState)> {
    check_order(&seq.meta)?;
    let x = seq.features.value();
    let mut groups = Vec::new();
    let mut zero = 0;
    for (_, rows) in tubes(&seq.meta) {
        let mut cur = vec![rows[0]];
        for w in rows.windows(2) {
            match cosine(x.row(w[0]), x.row(w[1])) {
                Some(s) if s > tau => cur.push(w[1]),
                other => {
                    zero += usize::from(other.is_none());
                    groups.push(std::mem::replace(&mut cur, vec![w[1]]));
                }
            }
        }
        groups.push(cur);
    }
    let (out, mut state) = collapse(seq, &groups, None, MergePolicy::Threshold)?;
    state.zero_norm_pairs = zero;
    Ok((out, state))
}

/// Target-count merging with `ceil(ratio · incoming patches)` as target.
pub fn ratio_merge(seq: &FeatureSeq, ratio: f64) -> Result<(FeatureSeq, MergeState)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        bail!(Config, "merge ratio {ratio} outside (0, 1]");
    }
    let n = seq.count(TokenKind::Patch);
    merge_to_count(seq, (ratio * n as f64).ceil() as usize)
}

/// Greedy passes over adjacent same-tube pairs in descending similarity of
/// their current group means, ties broken by the earlier token's
/// `(t, r, c)`. Similarities equal to 12 decimals count as tied, so rounding
/// noise in the means cannot reorder mathematically equal pairs. Each group joins at most one merge per pass; passes repeat
/// until at most `target` patches remain or no pair can merge.
pub fn merge_to_count(seq: &FeatureSeq, target: usize) -> Result<(FeatureSeq, MergeState)> {
    check_order(&seq.meta)?;
    let x = seq.features.value();
    let d = x.cols();
    // groups per tube, each with its member rows and the running member sum
    let mut tube_groups: Vec<Vec<(Vec<usize>, Vec<f64>)>> = tubes(&seq.meta)
        .into_values()
        .map(|rows| rows.into_iter().map(|i| (vec![i], x.row(i).to_vec())).collect())
        .collect();
    let mut kept: usize = tube_groups.iter().map(Vec::len).sum();
    let mut zero = 0;
    while kept > target {
        // (quantized similarity, tie key, tube, left group index)
        let mut cands = Vec::new();
        zero = 0;
        for (ti, groups) in tube_groups.iter().enumerate() {
            for k in 0..groups.len().saturating_sub(1) {
                let (a, b) = (&groups[k], &groups[k + 1]);
                let mean = |g: &(Vec<usize>, Vec<f64>)| -> Vec<f64> {
                    g.1.iter().map(|v| v / g.0.len() as f64).collect()
                };
                match cosine(&mean(a), &mean(b)) {
                    Some(s) => {
                        let m = &seq.meta[a.0[0]];
                        cands.push(((s * 1e12).round() as i64, (m.t, m.r, m.c), ti, k));
                    }
                    None => zero += 1,
                }
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut used: Vec<Vec<bool>> = tube_groups.iter().map(|g| vec![false; g.len()]).collect();
        let mut chosen: Vec<(usize, usize)> = Vec::new();
        for &(_, _, ti, k) in &cands {
            if kept - chosen.len() <= target {
                break;
            }
            if used[ti][k] || used[ti][k + 1] {
                continue;
            }
            used[ti][k] = true;
            used[ti][k + 1] = true;
            chosen.push((ti, k));
        }
        kept -= chosen.len();
        // merge right groups into left ones, highest index first per tube
        chosen.sort_unstable_by(|a, b| b.cmp(a));
        for (ti, k) in chosen {
            let (rows, sum) = tube_groups[ti].remove(k + 1);
            let left = &mut tube_groups[ti][k];
            left.0.extend(rows);
            for (l, v) in left.1.iter_mut().zip(&sum) {
                *l += v;
            }
        }
    }
    debug_assert!(tube_groups.iter().flatten().all(|g| g.1.len() == d));
    let groups: Vec<Vec<usize>> = tube_groups
        .into_iter()
        .flatten()
        .map(|(rows, _)| rows)
        .collect();
    let (out, mut state) = collapse(seq, &groups, None, MergePolicy::Ratio)?;
    state.target = Some(target);
    state.shortfall = state.kept.saturating_sub(target);
    state.zero_norm_pairs = zero;
    Ok((out, state))
}

/// Mean-pools consecutive groups of `ceil(1/ratio)` tokens in each tube.
/// Needs an unmerged sequence.
pub fn pooling_baseline(seq: &FeatureSeq, ratio: f64) -> Result<(FeatureSeq, MergeState)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        bail!(Config, "pooling ratio {ratio} outside (0, 1]");
    }
    if seq.meta.iter().any(|m| m.merge_count != 1) {
        bail!(Contract, "pooling needs an unmerged patch grid");
    }
    check_order(&seq.meta)?;
    let k = (1.0 / ratio).ceil() as usize;
    let groups: Vec<Vec<usize>> = tubes(&seq.meta)
        .into_values()
        .flat_map(|rows| rows.chunks(k).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    collapse(seq, &groups, None, MergePolicy::Pooling)
}

/// Runs the policy configured for `layer`. `deep_base` is the patch count
/// that entered the first deep layer, used by the cumulative ratio mode.
pub fn merge_for_layer(
    seq: &FeatureSeq,
    cfg: &MergeConfig,
    layer: usize,
    depth: usize,
    deep_base: usize,
) -> Result<(FeatureSeq, MergeState)> {
    let (out, mut state) = match cfg.policy_for(layer, depth) {
        MergePolicy::Threshold => threshold_merge(seq, cfg.threshold)?,
        _ => match cfg.ratio_mode {
            RatioMode::PerLayer => ratio_merge(seq, cfg.ratio)?,
            RatioMode::Cumulative => {
                let k = (layer + 1 - cfg.switch(depth)) as i32;
                let target = (cfg.ratio.powi(k) * deep_base as f64).ceil() as usize;
                merge_to_count(seq, target)?
            }
        },
    };
    state.layer = Some(layer);
    Ok((out, state))
}

/// Writes one JSON line per state.
pub fn states_to_jsonl(states: &[MergeState]) -> String {
    states.iter().map(|s| s.to_json_line() + "\n").collect()
}

/// Features of surviving patches, for inspection.
pub fn patch_features(seq: &FeatureSeq) -> Result<Tensor> {
    let rows: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.meta[i].kind == TokenKind::Patch)
        .collect();
    RowMix::gather(&rows).apply(seq.features.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_from(rows: &[Vec<f64>], t: usize, g: usize, markers: bool) -> FeatureSeq {
        let x = Tensor::from_rows(rows).unwrap();
        FeatureSeq::from_patch_grid(&x, t, 1, g, markers).unwrap()
    }

    #[test]
    fn identical_frames_collapse_per_tube() {
        let frame = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]];
        let rows: Vec<Vec<f64>> = (0..4).flat_map(|_| frame.clone()).collect();
        let s = seq_from(&rows, 4, 3, true);
        let (out, st) = threshold_merge(&s, 0.99).unwrap();
        assert_eq!(st.kept, 3);
        assert_eq!(out.count(TokenKind::FrameMark), 4);
        assert_eq!(out.count(TokenKind::LineMark), 4);
        assert_eq!(out.total_merge_count(), s.total_merge_count());
        let (_, st) = ratio_merge(&seq_from(&rows[..6], 2, 3, false), 0.5).unwrap();
        assert_eq!((st.kept, st.shortfall), (3, 0));
    }

    #[test]
    fn orthogonal_frames_are_kept() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let s = seq_from(&rows, 3, 1, false);
        let (out, st) = threshold_merge(&s, 0.6).unwrap();
        assert_eq!(st.kept, 3);
        assert_eq!(out.features.value(), s.features.value());
    }

    #[test]
    fn hand_chain() {
        let rows = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, -1.0]];
        let (out, st) = threshold_merge(&seq_from(&rows, 3, 1, false), 0.6).unwrap();
        assert_eq!(out.meta.iter().map(|m| m.merge_count).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(out.features.value().data(), &[1.0, 1.0, 1.0, -1.0]);
        assert_eq!(st.index, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(st.anchor_of, vec![0, 0, 1]);
        assert_eq!(out.meta[0].t_last, 1);
    }

    #[test]
    fn ratio_one_is_identity_and_pooling_examples() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0]).collect();
        let s = seq_from(&rows, 4, 1, false);
        let (out, _) = ratio_merge(&s, 1.0).unwrap();
        assert_eq!(out.features.value(), s.features.value());
        let (out, st) = pooling_baseline(&s, 0.5).unwrap();
        assert_eq!(st.kept, 2);
        assert_eq!(out.features.value().data(), &[0.5, 1.0, 2.5, 1.0]);
        let (out, _) = pooling_baseline(&s, 0.25).unwrap();
        assert_eq!(out.features.value().data(), &[1.5, 1.0]);
        let (out, _) = pooling_baseline(&s, 1.0).unwrap();
        assert_eq!(out.features.value(), s.features.value());
    }

    #[test]
    fn zero_norm_is_kept_and_counted() {
        let rows = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let (_, st) = threshold_merge(&seq_from(&rows, 2, 1, false), 0.5).unwrap();
        assert_eq!((st.kept, st.zero_norm_pairs), (2, 1));
        let (_, st) = ratio_merge(&seq_from(&rows, 2, 1, false), 0.5).unwrap();
        assert_eq!((st.kept, st.target, st.shortfall), (2, Some(1), 1));
    }

    #[test]
    fn shortfall_when_chains_exhausted() {
        // 2 tubes of 2 frames can reach 2 but not 1
        let rows = vec![vec![1.0], vec![2.0], vec![1.0], vec![2.0]];
        let (_, st) = merge_to_count(&seq_from(&rows, 2, 2, false), 1).unwrap();
        assert_eq!((st.kept, st.shortfall), (2, 1));
    }

    #[test]
    fn ratio_merge_tie_break_prefers_earlier_frame() {
        // all pairs equally similar: the (t=0) pair merges first, then (t=2)
        let rows = vec![vec![1.0]; 4];
        let (out, st) = merge_to_count(&seq_from(&rows, 4, 1, false), 3).unwrap();
        assert_eq!(st.chain_lengths, vec![2, 1, 1]);
        assert_eq!(out.meta[1].t, 2);
    }

    #[test]
    fn rounding_noise_does_not_break_ties() {
        // cos((1,1),(1,1)) rounds to just below 1; it must still tie with the
        // exact 1 of the cell-1 tube so that cell 0 merges first
        let rows = vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 0.0]];
        let s = seq_from(&rows, 2, 2, false);
        let (out, st) = merge_to_count(&s, 3).unwrap();
        assert_eq!(st.chain_lengths, vec![2, 1, 1]);
        assert_eq!((out.meta[0].c, out.meta[0].merge_count), (0, 2));
    }

    #[test]
    fn ratio_repeats_passes() {
        // 4 frames to 1 needs two passes
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, 0.1 * i as f64]).collect();
        let (out, st) = merge_to_count(&seq_from(&rows, 4, 1, false), 1).unwrap();
        assert_eq!(st.kept, 1);
        assert!((out.features.value().data()[1] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn layer_dispatch() {
        let cfg = MergeConfig::default();
        assert_eq!(cfg.policy_for(3, 8), MergePolicy::Threshold);
        assert_eq!(cfg.policy_for(4, 8), MergePolicy::Ratio);
        assert!(MergeConfig { threshold: 1.0, ..cfg }.validate(8).is_err());
        assert!(MergeConfig { switch_layer: Some(9), ..cfg }.validate(8).is_err());
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64]).collect();
        let s = seq_from(&rows, 8, 1, false);
        let cum = MergeConfig { ratio_mode: RatioMode::Cumulative, ..cfg };
        let (_, st) = merge_for_layer(&s, &cum, 5, 8, 8).unwrap();
        assert_eq!((st.layer, st.target), (Some(5), Some(2)));
        let line: serde_json::Value = serde_json::from_str(&st.to_json_line()).unwrap();
        assert_eq!(line["kept"], 2);
    }

    fn arb_seq() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..5, 1usize..4).prop_flat_map(|(t, g)| {
            (Just(t), Just(g), prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0]), t * g * 2))
        })
    }

    proptest! {
        #[test]
        fn conservation_count_law_monotonicity((t, g, data) in arb_seq(), tau in 0.05f64..0.95, r in 0.1f64..1.0) {
            let x = Tensor::new(vec![t * g, 2], data).unwrap();
            let s = FeatureSeq::from_patch_grid(&x, t, 1, g, true).unwrap();
            let (a, sa) = threshold_merge(&s, tau).unwrap();
            prop_assert_eq!(a.total_merge_count(), s.total_merge_count());
            prop_assert_eq!(sa.kept, sa.index_sum());
            prop_assert!(sa.kept >= g);
            let (_, sb) = threshold_merge(&s, (tau + 0.04).min(0.99)).unwrap();
            prop_assert!(sb.kept >= sa.kept);
            let (b, sr) = ratio_merge(&a, r).unwrap();
            prop_assert_eq!(b.total_merge_count(), s.total_merge_count());
            let target = (r * sa.kept as f64).ceil() as usize;
            prop_assert!(sr.kept <= target || sr.shortfall == sr.kept - target);
            prop_assert_eq!(b.count(TokenKind::FrameMark), t);
            // stable compaction keeps positions increasing
            prop_assert!(b.meta.windows(2).all(|w| w[0].pos < w[1].pos));
        }
    }
}
