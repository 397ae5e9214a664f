//! Mask plans: which tokens the encoder sees and which are reconstructed.
//!
//! Besides the random, tube and frame baselines, two motion-guided samplers
//! keep the tokens whose embedding changes most between adjacent temporal
//! slices at the same spatial cell.

use std::cmp::Ordering;

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::tokenizer::{TokenGrid, TokenLayout};

/// Slack for `floor(ratio * n)` so that e.g. `0.29 * 100` counts as 29.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Tube,
    Frame,
    #[serde(rename = "surgmae")]
    SurgMae,
    #[serde(rename = "surgmae_static")]
    SurgMaeStatic,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::Tube,
        Strategy::Frame,
        Strategy::SurgMae,
        Strategy::SurgMaeStatic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Tube => "tube",
            Strategy::Frame => "frame",
            Strategy::SurgMae => "surgmae",
            Strategy::SurgMaeStatic => "surgmae_static",
        }
    }

    /// Whether the plan depends on token embeddings.
    pub fn needs_scores(self) -> bool {
        matches!(self, Strategy::SurgMae | Strategy::SurgMaeStatic)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown masking strategy `{s}`")))
    }
}

/// Everything needed to build a plan besides the clip and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Share of the visible budget taken from the score ranking (static variant).
    pub alpha: f64,
    /// Frame masking hides the first slices instead of the last.
    pub past: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SurgMae,
            ratio: 0.9,
            alpha: 0.5,
            past: false,
        }
    }
}

/// Disjoint visible/masked token sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub n: usize,
    /// Sorted ascending.
    pub visible: Vec<usize>,
    /// Sorted ascending.
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub strategy: Strategy,
    /// Per-token motion scores, for the score-driven strategies.
    pub scores: Option<Vec<f64>>,
    pub seed: u64,
}

/// The JSON shape written for cross-tool diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlanExport {
    pub n: usize,
    pub ratio: f64,
    pub strategy: Strategy,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    fn from_visible(n: usize, mut visible: Vec<usize>, ratio: f64, strategy: Strategy, seed: u64) -> Self {
        visible.sort_unstable();
        let mut is_visible = vec![false; n];
        visible.iter().for_each(|&k| is_visible[k] = true);
        let masked = (0..n).filter(|&k| !is_visible[k]).collect();
        Self {
            n,
            visible,
            masked,
            ratio,
            strategy,
            scores: None,
            seed,
        }
    }

    fn from_masked(n: usize, masked: Vec<usize>, ratio: f64, strategy: Strategy, seed: u64) -> Self {
        let mut is_masked = vec![false; n];
        masked.iter().for_each(|&k| is_masked[k] = true);
        let visible = (0..n).filter(|&k| !is_masked[k]).collect();
        Self::from_visible(n, visible, ratio, strategy, seed)
    }

    /// `true` at masked positions.
    pub fn mask_indicator(&self) -> Vec<bool> {
        let mut m = vec![false; self.n];
        self.masked.iter().for_each(|&k| m[k] = true);
        m
    }

    /// Checks the partition invariant.
    pub fn validate(&self) -> Result<()> {
        if self.visible.len() + self.masked.len() != self.n {
            return contract_err(format!(
                "plan covers {} + {} tokens, expected {}",
                self.visible.len(),
                self.masked.len(),
                self.n
            ));
        }
        let mut seen = vec![false; self.n];
        for &k in self.visible.iter().chain(&self.masked) {
            if k >= self.n || std::mem::replace(&mut seen[k], true) {
                return contract_err(format!("token {k} is out of range or listed twice"));
            }
        }
        Ok(())
    }

    pub fn export(&self) -> MaskPlanExport {
        MaskPlanExport {
            n: self.n,
            ratio: self.ratio,
            strategy: self.strategy,
            visible: self.visible.clone(),
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.export())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: MaskPlanExport = serde_json::from_str(s)?;
        if e.visible.iter().any(|&k| k >= e.n) {
            return contract_err("visible index out of range");
        }
        let plan = Self::from_visible(e.n, e.visible, e.ratio, e.strategy, e.seed);
        plan.validate()?;
        Ok(plan)
    }
}

/// `floor(ratio · n)`
pub fn masked_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + COUNT_SLACK).floor() as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return config_err(format!("mask ratio {ratio} must lie in (0, 1)"));
    }
    Ok(())
}

/// How a score slice was derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceRule {
    /// Distance to the previous slice.
    Difference,
    /// Copied from slice 1 (slice 0 has no predecessor).
    Backfill,
}

/// Per-token motion scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub layout: TokenLayout,
    /// Indexed by flat token index.
    pub scores: Vec<f64>,
    /// One entry per temporal slice.
    pub rules: Vec<SliceRule>,
}

impl ScoreField {
    pub fn at(&self, t: usize, r: usize, c: usize) -> f64 {
        self.scores[self.layout.flat_index(t, r, c)]
    }

    /// Token indices ordered by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }
}

/// `s(t,r,c) = ‖X(t,r,c) − X(t−1,r,c)‖₂` for `t ≥ 1`, and `s(0,·) = s(1,·)`.
///
/// Reads embedding values only; nothing here is differentiated.
pub fn score_tokens(grid: &TokenGrid) -> Result<ScoreField> {
    let layout = grid.layout;
    if layout.nt < 2 {
        return contract_err(format!(
            "motion scores need at least 2 temporal slices, grid has {}",
            layout.nt
        ));
    }
    let mut scores = vec![0.0; layout.len()];
    for t in 1..layout.nt {
        for r in 0..layout.nh {
            for c in 0..layout.nw {
                let cur = grid.token(layout.flat_index(t, r, c));
                let prev = grid.token(layout.flat_index(t - 1, r, c));
                let d2: f64 = cur.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum();
                scores[layout.flat_index(t, r, c)] = d2.sqrt();
            }
        }
    }
    let s = layout.spatial();
    let (first, rest) = scores.split_at_mut(s);
    first.copy_from_slice(&rest[..s]);
    let mut rules = vec![SliceRule::Difference; layout.nt];
    rules[0] = SliceRule::Backfill;
    Ok(ScoreField { layout, scores, rules })
}

/// Uniformly masks `floor(ratio · n)` tokens.
pub fn mask_random(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let k = masked_count(ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = index::sample(&mut rng, n, k).into_vec();
    Ok(MaskPlan::from_masked(n, masked, ratio, Strategy::Random, seed))
}

/// Masks `floor(ratio · nh · nw)` spatial cells in every temporal slice.
pub fn mask_tube(layout: &TokenLayout, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let cells = masked_count(ratio, layout.spatial());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, layout.spatial(), cells).into_vec();
    let masked = (0..layout.nt)
        .flat_map(|t| chosen.iter().map(move |&cell| t * layout.spatial() + cell))
        .collect();
    Ok(MaskPlan::from_masked(layout.len(), masked, ratio, Strategy::Tube, seed))
}

/// Masks the last `floor(ratio · nt)` temporal slices (the first ones when `past`).
pub fn mask_frame(layout: &TokenLayout, ratio: f64, past: bool, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let slices = masked_count(ratio, layout.nt);
    let range = if past { 0..slices } else { layout.nt - slices..layout.nt };
    let s = layout.spatial();
    let masked = range.flat_map(|t| t * s..(t + 1) * s).collect();
    Ok(MaskPlan::from_masked(layout.len(), masked, ratio, Strategy::Frame, seed))
}

/// Keeps the `n − floor(ratio · n)` highest-scoring tokens visible.
pub fn mask_surgmae_from_scores(field: &ScoreField, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n = field.scores.len();
    let keep = n - masked_count(ratio, n);
    let visible = field.ranking().into_iter().take(keep).collect();
    let mut plan = MaskPlan::from_visible(n, visible, ratio, Strategy::SurgMae, seed);
    plan.scores = Some(field.scores.clone());
    Ok(plan)
}

/// Motion-guided plan on pre-positional embeddings. Grids with a single
/// temporal slice carry no motion signal and fall back to random masking.
pub fn mask_surgmae(grid: &TokenGrid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if grid.layout.nt < 2 {
        log::warn!("single temporal slice: motion-guided masking falls back to random");
        return mask_random(grid.layout.len(), ratio, seed);
    }
    mask_surgmae_from_scores(&score_tokens(grid)?, ratio, seed)
}

/// Takes `ceil(alpha · visible)` tokens from the score ranking and fills the
/// rest of the visible budget uniformly from the remaining tokens.
pub fn mask_surgmae_static_from_scores(field: &ScoreField, ratio: f64, alpha: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if !(0.0..=1.0).contains(&alpha) {
        return config_err(format!("alpha {alpha} must lie in [0, 1]"));
    }
    let n = field.scores.len();
    let keep = n - masked_count(ratio, n);
    let top = ((alpha * keep as f64 - COUNT_SLACK).ceil().max(0.0) as usize).min(keep);
    let ranking = field.ranking();
    let mut visible: Vec<usize> = ranking[..top].to_vec();
    let leftover = &ranking[top..];
    let mut pool: Vec<usize> = leftover.to_vec();
    pool.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    visible.extend(index::sample(&mut rng, pool.len(), keep - top).into_iter().map(|i| pool[i]));
    let mut plan = MaskPlan::from_visible(n, visible, ratio, Strategy::SurgMaeStatic, seed);
    plan.scores = Some(field.scores.clone());
    Ok(plan)
}

pub fn mask_surgmae_static(grid: &TokenGrid, ratio: f64, alpha: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if grid.layout.nt < 2 {
        log::warn!("single temporal slice: motion-guided masking falls back to random");
        return mask_random(grid.layout.len(), ratio, seed);
    }
    mask_surgmae_static_from_scores(&score_tokens(grid)?, ratio, alpha, seed)
}

/// Builds a plan for any strategy. `grid` must hold pre-positional embeddings
/// for the score-driven strategies; the others only read its layout.
pub fn plan_mask(cfg: &MaskConfig, grid: &TokenGrid, seed: u64) -> Result<MaskPlan> {
    match cfg.strategy {
        Strategy::Random => mask_random(grid.layout.len(), cfg.ratio, seed),
        Strategy::Tube => mask_tube(&grid.layout, cfg.ratio, seed),
        Strategy::Frame => mask_frame(&grid.layout, cfg.ratio, cfg.past, seed),
        Strategy::SurgMae => mask_surgmae(grid, cfg.ratio, seed),
        Strategy::SurgMaeStatic => mask_surgmae_static(grid, cfg.ratio, cfg.alpha, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn grid_from(layout: TokenLayout, d: usize, f: impl Fn(usize) -> Vec<f64>) -> TokenGrid {
        let values: Vec<f64> = (0..layout.len()).flat_map(f).collect();
        TokenGrid::new(Tensor::new(vec![layout.len(), d], values).unwrap(), layout).unwrap()
    }

    #[test]
    fn identical_slices_score_zero() {
        let layout = TokenLayout::new(4, 3, 3);
        let g = grid_from(layout, 2, |k| {
            let (_, r, c) = layout.coords(k);
            vec![r as f64, c as f64 * 0.5]
        });
        let f = score_tokens(&g).unwrap();
        assert!(f.scores.iter().all(|&s| s == 0.0));
        assert_eq!(f.rules[0], SliceRule::Backfill);
    }

    #[test]
    fn hand_computed_distance() {
        let layout = TokenLayout::new(2, 1, 1);
        let g = grid_from(layout, 2, |k| if k == 0 { vec![1.0, 0.0] } else { vec![1.0, 2.0] });
        let f = score_tokens(&g).unwrap();
        assert_eq!(f.scores, vec![2.0, 2.0]);
    }

    #[test]
    fn single_changed_token_has_unique_max() {
        let layout = TokenLayout::new(3, 4, 5);
        let target = layout.flat_index(1, 2, 3);
        let g = grid_from(layout, 3, |k| if k == target { vec![1.0, 1.0, 1.0] } else { vec![0.0; 3] });
        let f = score_tokens(&g).unwrap();
        let max = f.scores.iter().cloned().fold(0.0, f64::max);
        let argmax: Vec<usize> = (0..layout.len()).filter(|&k| f.scores[k] == max).collect();
        // the changed token, its t=0 backfill, and (t=2) which differs from t=1
        assert!(argmax.contains(&target));
        assert!(argmax.contains(&layout.flat_index(0, 2, 3)));
        assert!(f.scores.iter().enumerate().all(|(k, &s)| s == 0.0 || argmax.contains(&k)));
    }

    #[test]
    fn two_slice_change_is_unique_max() {
        let layout = TokenLayout::new(2, 4, 5);
        let target = layout.flat_index(1, 2, 3);
        let g = grid_from(layout, 3, |k| if k == target { vec![1.0, -2.0, 0.5] } else { vec![0.0; 3] });
        let f = score_tokens(&g).unwrap();
        for k in 0..layout.len() {
            let expect_max = k == target || k == layout.flat_index(0, 2, 3);
            assert_eq!(f.scores[k] > 0.0, expect_max, "token {k}");
        }
    }

    #[test]
    fn counts_at_vit_b_geometry() {
        assert_eq!(masked_count(0.9, 1568), 1411);
        let plan = mask_random(1568, 0.9, 0).unwrap();
        assert_eq!((plan.masked.len(), plan.visible.len()), (1411, 157));
    }

    #[test]
    fn tie_break_prefers_low_indices() {
        let layout = TokenLayout::new(2, 2, 2);
        let g = grid_from(layout, 1, |_| vec![0.5]);
        let plan = mask_surgmae(&g, 0.75, 3).unwrap();
        assert_eq!(plan.visible, vec![0, 1]);
        assert_eq!(plan, mask_surgmae(&g, 0.75, 99).map(|p| MaskPlan { seed: 3, ..p }).unwrap());
    }

    #[test]
    fn single_slice_falls_back_to_random() {
        let layout = TokenLayout::new(1, 4, 4);
        let g = grid_from(layout, 1, |k| vec![k as f64]);
        let plan = mask_surgmae(&g, 0.5, 1).unwrap();
        assert_eq!(plan.strategy, Strategy::Random);
    }

    #[test]
    fn invalid_ratio_rejected() {
        for r in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(mask_random(10, r, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_masked_count_keeps_everything_visible() {
        let plan = mask_random(5, 0.1, 0).unwrap();
        assert!(plan.masked.is_empty());
        assert_eq!(plan.visible, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn static_variant_split() {
        let layout = TokenLayout::new(8, 8, 8);
        let g = grid_from(layout, 1, |k| vec![(k as f64 * 0.37).sin() * (k / 64) as f64]);
        let f = score_tokens(&g).unwrap();
        let plan = mask_surgmae_static_from_scores(&f, 0.8, 0.5, 4).unwrap();
        assert_eq!(plan.visible.len(), 103);
        let top: Vec<usize> = f.ranking()[..52].to_vec();
        assert!(top.iter().all(|k| plan.visible.contains(k)));

        let full = mask_surgmae_from_scores(&f, 0.8, 4).unwrap();
        let alpha1 = mask_surgmae_static_from_scores(&f, 0.8, 1.0, 4).unwrap();
        assert_eq!(full.visible, alpha1.visible);
    }

    #[test]
    fn tube_and_frame_counts() {
        let layout = TokenLayout::new(8, 8, 8);
        let tube = mask_tube(&layout, 0.9, 5).unwrap();
        assert_eq!(tube.masked.len(), 57 * 8);
        let frame = mask_frame(&layout, 0.9, false, 0).unwrap();
        assert_eq!(frame.masked.len(), 7 * 64);
        assert!(frame.visible.iter().all(|&k| layout.coords(k).0 == 0));
        let half = mask_frame(&layout, 0.5, false, 0).unwrap();
        assert_eq!(half.visible, (0..4 * 64).collect::<Vec<_>>());
        let past = mask_frame(&layout, 0.5, true, 0).unwrap();
        assert_eq!(past.masked, (0..4 * 64).collect::<Vec<_>>());
    }

    #[test]
    fn json_export_roundtrip() {
        let plan = mask_tube(&TokenLayout::new(2, 3, 3), 0.5, 8).unwrap();
        let json = plan.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["strategy"], "tube");
        assert_eq!(v["n"], 18);
        assert_eq!(MaskPlan::from_json(&json).unwrap(), plan);
    }
}
