//! Mixed-resolution planning: which frames are tokenized at the high edge
//! limit and which at the low one, and the exact token count that results.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::videotok::{frame_token_count, resize_to_policy, ResolutionPolicy, Tier, TokenStream, VideoClip};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "step")]
pub enum Placement {
    /// High frames at `floor(i·T/n_high)`; the first frame is always high.
    #[default]
    Uniform,
    /// The first `n_high` frames.
    FirstK,
    /// Every `step`-th frame from frame 0; must place exactly `n_high`.
    Stride(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPlan {
    pub tiers: Vec<Tier>,
    pub placement: Placement,
    pub policy: ResolutionPolicy,
    /// Source frame `(height, width)` the prediction assumes.
    pub source: (usize, usize),
    pub high_tokens_per_frame: usize,
    pub low_tokens_per_frame: usize,
    pub predicted_tokens: usize,
}

impl HybridPlan {
    pub fn num_frames(&self) -> usize {
        self.tiers.len()
    }

    pub fn num_high(&self) -> usize {
        self.tiers.iter().filter(|&&t| t == Tier::High).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

fn high_positions(frames: usize, n_high: usize, placement: Placement) -> Result<Vec<usize>> {
    Ok(match placement {
        Placement::Uniform => (0..n_high).map(|i| i * frames / n_high).collect(),
        Placement::FirstK => (0..n_high).collect(),
        Placement::Stride(step) => {
            if step == 0 {
                bail!(Config, "stride must be positive");
            }
            let pos: Vec<usize> = (0..frames).step_by(step).take(n_high).collect();
            if pos.len() != n_high {
                bail!(
                    Contract,
                    "stride {step} places only {} of {n_high} high frames in {frames}",
                    pos.len()
                );
            }
            pos
        }
    })
}

/// Plans `frames` frames of `source` size with `n_high` high-tier frames.
pub fn plan(
    frames: usize,
    n_high: usize,
    n_low: usize,
    policy: &ResolutionPolicy,
    placement: Placement,
    source: (usize, usize),
) -> Result<HybridPlan> {
    policy.validate()?;
    if n_high + n_low != frames {
        bail!(Contract, "{n_high} high + {n_low} low frames != {frames}");
    }
    if source.0 == 0 || source.1 == 0 {
        bail!(Input, "degenerate source frame {}×{}", source.0, source.1);
    }
    let mut tiers = vec![Tier::Low; frames];
    for p in high_positions(frames, n_high, placement)? {
        tiers[p] = Tier::High;
    }
    let per = |tier| {
        let (r, c) = policy.grid(source.0, source.1, tier);
        frame_token_count(r, c)
    };
    let (hi, lo) = (per(Tier::High), per(Tier::Low));
    Ok(HybridPlan {
        predicted_tokens: n_high * hi + n_low * lo,
        tiers,
        placement,
        policy: *policy,
        source,
        high_tokens_per_frame: hi,
        low_tokens_per_frame: lo,
    })
}

/// Square source frames at the high edge limit, as in the token-budget table.
pub fn plan_square(frames: usize, n_high: usize, n_low: usize, policy: &ResolutionPolicy) -> Result<HybridPlan> {
    let e = policy.max_edge_high;
    plan(frames, n_high, n_low, policy, Placement::Uniform, (e, e))
}

/// Resizes each frame to its tier and tokenizes in frame order.
pub fn apply(plan: &HybridPlan, clip: &VideoClip) -> Result<TokenStream> {
    if clip.num_frames() != plan.num_frames() {
        bail!(Contract, "plan covers {} frames, clip has {}", plan.num_frames(), clip.num_frames());
    }
    if (clip.height(), clip.width()) != plan.source {
        bail!(
            Contract,
            "plan assumes {}×{} frames, clip is {}×{}",
            plan.source.0,
            plan.source.1,
            clip.height(),
            clip.width()
        );
    }
    let mut stream = TokenStream::new(plan.policy.patch);
    for (t, &tier) in plan.tiers.iter().enumerate() {
        let frame = resize_to_policy(&clip.select_frame(t)?, &plan.policy, tier)?;
        stream.push_frame(frame.frame(0), frame.height(), frame.width(), t)?;
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn budget_table_rows() {
        let p = ResolutionPolicy::table5();
        let rows = [(8, 16, 5976), (8, 32, 7144), (16, 0, 9616), (16, 8, 10200), (16, 16, 10784), (32, 0, 19232)];
        for (h, l, want) in rows {
            assert_eq!(plan_square(h + l, h, l, &p).unwrap().predicted_tokens, want);
        }
        assert_eq!(plan_square(5, 0, 5, &p).unwrap().predicted_tokens, 5 * 73);
    }

    #[test]
    fn placement_policies() {
        let p = ResolutionPolicy::table5();
        let uni = plan(10, 4, 6, &p, Placement::Uniform, (672, 672)).unwrap();
        let hi: Vec<usize> = (0..10).filter(|&i| uni.tiers[i] == Tier::High).collect();
        assert_eq!(hi, vec![0, 2, 5, 7]);
        let s = plan(10, 4, 6, &p, Placement::Stride(3), (672, 672)).unwrap();
        assert_eq!(s.tiers[9], Tier::High);
        assert!(plan(10, 6, 4, &p, Placement::Stride(2), (672, 672)).is_err());
        let f = plan(4, 2, 2, &p, Placement::FirstK, (672, 672)).unwrap();
        assert_eq!(f.tiers, vec![Tier::High, Tier::High, Tier::Low, Tier::Low]);
        assert!(matches!(plan(4, 2, 1, &p, Placement::Uniform, (672, 672)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn apply_two_frames() {
        let p = ResolutionPolicy::table5();
        let clip = VideoClip::from_frames(2, 672, 672, vec![0.5; 2 * 3 * 672 * 672], "c").unwrap();
        let pl = plan_square(2, 1, 1, &p).unwrap();
        let s = apply(&pl, &clip).unwrap();
        assert_eq!(s.len(), 674);
        assert_eq!(s.len(), pl.predicted_tokens);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn prediction_matches_tokenizer(frames in 1usize..4, h in 20usize..90, w in 20usize..90, seed in 0usize..100) {
            let policy = ResolutionPolicy { patch: 8, max_edge_high: 64, max_edge_low: 24 };
            let n_high = seed % (frames + 1);
            let pl = plan(frames, n_high, frames - n_high, &policy, Placement::Uniform, (h, w)).unwrap();
            let clip = VideoClip::from_frames(frames, h, w, vec![0.25; frames * 3 * h * w], "p").unwrap();
            prop_assert_eq!(apply(&pl, &clip).unwrap().len(), pl.predicted_tokens);
            if n_high > 0 {
                let fewer = plan(frames, n_high - 1, frames - n_high + 1, &policy, Placement::Uniform, (h, w)).unwrap();
                prop_assert!(fewer.predicted_tokens <= pl.predicted_tokens);
            }
        }
    }
}
